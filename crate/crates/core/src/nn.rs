//! Layers built from tape ops. A layer holds only parameter names; values
//! live in a [`ParamStore`] and are bound to the tape on each forward.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{Real, Tensor};

fn xavier<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn([fan_in, fan_out], std, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert(&weight, xavier(rng, in_dim, out_dim))?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros([out_dim]))?;
            Some(b)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Same as [`Linear::new`] with an all-zero weight.
    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert(&weight, Tensor::zeros([in_dim, out_dim]))?;
        let b = format!("{name}.bias");
        store.insert(&b, Tensor::zeros([out_dim]))?;
        Ok(Linear {
            weight,
            bias: Some(b),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(&gamma, Tensor::ones([dim]))?;
        store.insert(&beta, Tensor::zeros([dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, &self.gamma)?;
        let b = tape.param(store, &self.beta)?;
        tape.layer_norm(x, g, b)
    }
}

/// Position-wise `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true)?,
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, store, h)
    }
}

/// Multi-head attention with input/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid("attention", format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    /// `x` is `(batch·q_len)×d` queries, `ctx` is `(batch·k_len)×d`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: Var,
        q_len: usize,
        k_len: usize,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, ctx)?;
        let v = self.v.forward(tape, store, ctx)?;
        let a = tape.attention(q, k, v, self.heads, q_len, k_len)?;
        self.out.forward(tape, store, a)
    }
}

/// Pre-norm self-attention block: `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, seq_len: usize) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, seq_len, seq_len)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries attend to a separate context.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        Ok(CrossAttentionBlock {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim)?,
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        queries: Var,
        ctx: Var,
        q_len: usize,
        k_len: usize,
    ) -> Result<Var> {
        let hq = self.norm_q.forward(tape, store, queries)?;
        let hk = self.norm_kv.forward(tape, store, ctx)?;
        let a = self.attn.forward(tape, store, hq, hk, q_len, k_len)?;
        let x = tape.add(queries, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

/// Gated recurrent cell with input, forget, cell and output gates.
/// Gate columns are packed `[i | f | g | o]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: String,
    pub w_hidden: String,
    pub bias: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let w_input = format!("{name}.w_input");
        let w_hidden = format!("{name}.w_hidden");
        let bias = format!("{name}.bias");
        store.insert(&w_input, xavier(rng, input, 4 * hidden))?;
        store.insert(&w_hidden, xavier(rng, hidden, 4 * hidden))?;
        // forget-gate bias starts at 1
        let b = Tensor::from_fn([4 * hidden], |i| {
            if (hidden..2 * hidden).contains(&i) {
                T::one()
            } else {
                T::zero()
            }
        });
        store.insert(&bias, b)?;
        Ok(LstmCell {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        })
    }

    /// One step: `x` is `batch×input`, `h`/`c` are `batch×hidden`.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wx = tape.param(store, &self.w_input)?;
        let wh = tape.param(store, &self.w_hidden)?;
        let b = tape.param(store, &self.bias)?;
        let zx = tape.matmul(x, wx)?;
        let zh = tape.matmul(h, wh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_row(z, b)?;
        let hs = self.hidden;
        let i = tape.slice_cols(z, 0, hs)?;
        let f = tape.slice_cols(z, hs, hs)?;
        let g = tape.slice_cols(z, 2 * hs, hs)?;
        let o = tape.slice_cols(z, 3 * hs, hs)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Run over `steps` (each `batch×input`) from zero state; returns the
    /// final hidden state.
    pub fn run<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::invalid("lstm", "empty sequence"))?;
        let s = tape.shape(first).to_vec();
        if s.len() != 2 || s[1] != self.input {
            return Err(Error::shape("lstm", &s, &[s.first().copied().unwrap_or(0), self.input]));
        }
        let batch = s[0];
        let mut h = tape.constant(Tensor::zeros([batch, self.hidden]));
        let mut c = tape.constant(Tensor::zeros([batch, self.hidden]));
        for &x in steps {
            (h, c) = self.step(tape, store, x, h, c)?;
        }
        Ok(h)
    }
}

/// `x + W₂·act(W₁·x + b₁) + b₂`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub inner: Linear,
    pub outer: Linear,
}

impl ResidualBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Result<Self> {
        Ok(ResidualBlock {
            inner: Linear::new(store, rng, &format!("{name}.inner"), dim, dim, true)?,
            outer: Linear::new(store, rng, &format!("{name}.outer"), dim, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        let h = self.outer.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
