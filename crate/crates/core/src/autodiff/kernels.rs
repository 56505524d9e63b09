//! Dense matrix kernels shared by the tape and inference paths.
//!
//! Each kernel parallelises over output rows; every output element is
//! accumulated in a fixed order, so results do not depend on thread count.

use crate::par;
use crate::tensor::Real;

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n.max(1), m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    });
    out
}

/// `aᵀ (k×m) · g (m×n)` where `a` is stored m×k.
pub fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    par::for_each_chunk_mut(&mut out, n.max(1), m * k * n, |p, row| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &g_ij) in row.iter_mut().zip(g_row) {
                *o = *o + a_ip * g_ij;
            }
        }
    });
    out
}

/// `g (m×n) · bᵀ (n×k)` where `b` is stored k×n.
pub fn matmul_nt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    par::for_each_chunk_mut(&mut out, k.max(1), m * k * n, |i, row| {
        let g_row = &g[i * n..(i + 1) * n];
        for (q, o) in row.iter_mut().enumerate() {
            let b_row = &b[q * n..(q + 1) * n];
            *o = g_row
                .iter()
                .zip(b_row)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    });
    out
}

/// Column sums of an m×n matrix.
pub fn col_sums<T: Real>(g: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for i in 0..m {
        for (o, &x) in out.iter_mut().zip(&g[i * n..(i + 1) * n]) {
            *o = *o + x;
        }
    }
    out
}

pub fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ c vs naive with explicit transpose
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let tn = matmul_tn(&a, &c, m, k, n);
        let want = naive(&at, &c, k, m, n);
        for (x, y) in tn.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let nt = matmul_nt(&c, &b, m, n, k);
        let want = naive(&c, &bt, m, n, k);
        for (x, y) in nt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for &x in &[-30.0f64, -2.0, 0.0, 1.5, 40.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
