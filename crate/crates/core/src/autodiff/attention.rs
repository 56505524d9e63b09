//! Scaled dot-product multi-head attention over batches of fixed-length
//! sequences stacked row-wise.
//!
//! Inputs are already projected: `q` is `(batch·q_len)×d`, `k` and `v` are
//! `(batch·k_len)×d`. Head `h` owns columns `[h·dh, (h+1)·dh)`.

use super::kernels::softmax_row;
use crate::par;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn block(&self) -> usize {
        self.q_len * self.k_len
    }
}

/// Returns `(output, probs)`; `probs` holds one `q_len×k_len` block per
/// (batch, head) pair in batch-major order.
pub fn forward<T: Real>(q: &[T], k: &[T], v: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        q_len,
        k_len,
        d,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let work = q_len * k_len * dh * 2;
    let blocks = par::map_indexed_weighted(batch * heads, work * batch * heads, |bh| {
        let (b, h) = (bh / heads, bh % heads);
        let c0 = h * dh;
        let mut probs = vec![T::zero(); q_len * k_len];
        let mut out = vec![T::zero(); q_len * dh];
        let mut scores = vec![T::zero(); k_len];
        for i in 0..q_len {
            let qi = &q[(b * q_len + i) * d + c0..(b * q_len + i) * d + c0 + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k[(b * k_len + j) * d + c0..(b * k_len + j) * d + c0 + dh];
                *s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
            }
            let p_row = &mut probs[i * k_len..(i + 1) * k_len];
            softmax_row(&scores, p_row);
            let o_row = &mut out[i * dh..(i + 1) * dh];
            for (j, &p) in p_row.iter().enumerate() {
                let vj = &v[(b * k_len + j) * d + c0..(b * k_len + j) * d + c0 + dh];
                for (o, &x) in o_row.iter_mut().zip(vj) {
                    *o = *o + p * x;
                }
            }
        }
        (out, probs)
    });

    let mut out = vec![T::zero(); batch * q_len * d];
    let mut probs = Vec::with_capacity(batch * heads * dims.block());
    for (bh, (o, p)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for i in 0..q_len {
            let dst = (b * q_len + i) * d + h * dh;
            out[dst..dst + dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
        }
        probs.extend(p);
    }
    (out, probs)
}

/// Vector-Jacobian product. Returns `(dq, dk, dv)`.
pub fn backward<T: Real>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        q_len,
        k_len,
        d,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let work = q_len * k_len * dh * 4;
    let blocks = par::map_indexed_weighted(batch * heads, work * batch * heads, |bh| {
        let (b, h) = (bh / heads, bh % heads);
        let c0 = h * dh;
        let p = &probs[bh * q_len * k_len..(bh + 1) * q_len * k_len];
        let mut dq = vec![T::zero(); q_len * dh];
        let mut dk = vec![T::zero(); k_len * dh];
        let mut dv = vec![T::zero(); k_len * dh];
        let mut dp = vec![T::zero(); k_len];
        for i in 0..q_len {
            let gi = &g[(b * q_len + i) * d + c0..(b * q_len + i) * d + c0 + dh];
            let p_row = &p[i * k_len..(i + 1) * k_len];
            // dV += pᵀ g ; dP = g Vᵀ
            for j in 0..k_len {
                let vj = &v[(b * k_len + j) * d + c0..(b * k_len + j) * d + c0 + dh];
                dp[j] = gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                let pj = p_row[j];
                for (o, &x) in dv[j * dh..(j + 1) * dh].iter_mut().zip(gi) {
                    *o = *o + pj * x;
                }
            }
            let inner = p_row
                .iter()
                .zip(&dp)
                .fold(T::zero(), |a, (&x, &y)| a + x * y);
            let qi = &q[(b * q_len + i) * d + c0..(b * q_len + i) * d + c0 + dh];
            for j in 0..k_len {
                let ds = p_row[j] * (dp[j] - inner) * scale;
                if ds == T::zero() {
                    continue;
                }
                let kj = &k[(b * k_len + j) * d + c0..(b * k_len + j) * d + c0 + dh];
                for (o, &x) in dq[i * dh..(i + 1) * dh].iter_mut().zip(kj) {
                    *o = *o + ds * x;
                }
                for (o, &x) in dk[j * dh..(j + 1) * dh].iter_mut().zip(qi) {
                    *o = *o + ds * x;
                }
            }
        }
        (dq, dk, dv)
    });

    let mut dq = vec![T::zero(); batch * q_len * d];
    let mut dk = vec![T::zero(); batch * k_len * d];
    let mut dv = vec![T::zero(); batch * k_len * d];
    for (bh, (bq, bk, bv)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for i in 0..q_len {
            let dst = (b * q_len + i) * d + h * dh;
            dq[dst..dst + dh].copy_from_slice(&bq[i * dh..(i + 1) * dh]);
        }
        for j in 0..k_len {
            let dst = (b * k_len + j) * d + h * dh;
            dk[dst..dst + dh].copy_from_slice(&bk[j * dh..(j + 1) * dh]);
            dv[dst..dst + dh].copy_from_slice(&bv[j * dh..(j + 1) * dh]);
        }
    }
    (dq, dk, dv)
}
