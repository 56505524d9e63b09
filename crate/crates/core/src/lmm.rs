//! Latent masked modeling of the time branch.
//!
//! Each record is cut into `n` units, projected to width `d` and given a
//! learned positional embedding. A random subset of units is hidden; the
//! student encodes the visible rest, a predictor reconstructs the hidden
//! units' teacher features and their codewords from a frozen random
//! tokenizer. The teacher is an exponential moving average of the student.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{CrossAttentionBlock, LayerNorm, Linear, TransformerBlock};
use crate::optim::ParamStore;
use crate::par::derive_seed;
use crate::tensor::{Real, Tensor};
use crate::train::{argmax_rows, epoch_batches, EpochLog, TrainConfig};

pub const STUDENT: &str = "time";
pub const TEACHER: &str = "time_teacher";
pub const PREDICTOR: &str = "lmm.pred";
pub const TOKENIZER: &str = "lmm.tokenizer.weight";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmmConfig {
    pub n_units: usize,
    /// Flattened unit length `c·l/n`.
    pub unit_dim: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub sa_blocks: usize,
    pub ca_blocks: usize,
    pub n_t: usize,
    pub mask_ratio: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// `floor(n·r_m)` indices drawn uniformly without replacement are masked.
/// Both index lists are sorted.
pub fn make_mask_plan<R: Rng + ?Sized>(n: usize, r_m: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(r_m > 0.0 && r_m < 1.0) {
        return Err(Error::invalid("mask", format!("ratio {r_m} outside (0, 1)")));
    }
    let k = (n as f64 * r_m).floor() as usize;
    if k == 0 || k >= n {
        return Err(Error::invalid("mask", format!("{k} of {n} units masked")));
    }
    let mut masked = sample(rng, n, k).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { visible, masked })
}

/// Frozen random-projection quantizer over per-unit z-scored raw values.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub weight: String,
    pub unit_dim: usize,
    pub n_t: usize,
}

impl Tokenizer {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, unit_dim: usize, n_t: usize) -> Result<Self> {
        store.insert(TOKENIZER, Tensor::randn([unit_dim, n_t], 1.0, rng))?;
        store.set_trainable(TOKENIZER, false);
        Ok(Tokenizer {
            weight: TOKENIZER.into(),
            unit_dim,
            n_t,
        })
    }

    /// Codeword index for each row of `units` (`m × unit_dim`).
    pub fn codes<T: Real>(&self, store: &ParamStore<T>, units: &Tensor<T>) -> Result<Vec<usize>> {
        if units.cols() != self.unit_dim {
            return Err(Error::shape("tokenize", units.shape(), &[units.rows(), self.unit_dim]));
        }
        let w = store.get(&self.weight).ok_or_else(|| Error::UnknownParam(self.weight.clone()))?;
        let mut z = units.clone();
        let k = self.unit_dim;
        for row in z.data_mut().chunks_mut(k) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / k as f64;
            let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
            for v in row.iter_mut() {
                *v = T::of((v.f64() - mean) / std);
            }
        }
        Ok(argmax_rows(&z.matmul(w)?))
    }
}

pub fn one_hot<T: Real>(codes: &[usize], n_t: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([codes.len(), n_t]);
    for (i, &c) in codes.iter().enumerate() {
        t.data_mut()[i * n_t + c] = T::one();
    }
    t
}

/// Unit projection, positional table, self-attention stack and final norm.
#[derive(Clone, Debug)]
pub struct TimeEncoder {
    pub prefix: String,
    pub proj: Linear,
    pub pos: String,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub n_units: usize,
    pub d: usize,
}

impl TimeEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, cfg: &LmmConfig) -> Result<Self> {
        let pos = format!("{prefix}.pos");
        let proj = Linear::new(store, rng, &format!("{prefix}.proj"), cfg.unit_dim, cfg.d, true)?;
        store.insert(&pos, Tensor::randn([cfg.n_units, cfg.d], 0.02, rng))?;
        let blocks = (0..cfg.sa_blocks)
            .map(|i| TransformerBlock::new(store, rng, &format!("{prefix}.block{i}"), cfg.d, cfg.heads, cfg.ffn))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cfg.d)?;
        Ok(TimeEncoder {
            prefix: prefix.into(),
            proj,
            pos,
            blocks,
            norm,
            n_units: cfg.n_units,
            d: cfg.d,
        })
    }

    /// Same architecture under a different prefix; no parameters are
    /// created.
    pub fn renamed(&self, prefix: &str) -> Self {
        let re = |s: &str| format!("{prefix}{}", &s[self.prefix.len()..]);
        let mut out = self.clone();
        out.prefix = prefix.into();
        out.pos = re(&self.pos);
        for lin in out.linears_mut() {
            lin.weight = re(&lin.weight);
            lin.bias = lin.bias.as_deref().map(re);
        }
        for ln in out.norms_mut() {
            ln.gamma = re(&ln.gamma);
            ln.beta = re(&ln.beta);
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v = vec![&mut self.proj];
        for b in &mut self.blocks {
            let a = &mut b.attn;
            v.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.out, &mut b.ffn.up, &mut b.ffn.down]);
        }
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut LayerNorm> {
        let mut v = vec![&mut self.norm];
        for b in &mut self.blocks {
            v.extend([&mut b.norm1, &mut b.norm2]);
        }
        v
    }

    /// `units` rows are raw units, `positions[i]` the unit index of row `i`.
    pub fn project_units<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, units: Var, positions: &[usize]) -> Result<Var> {
        let z = self.proj.forward(tape, store, units)?;
        let table = tape.param(store, &self.pos)?;
        let pe = tape.gather_rows(table, positions)?;
        tape.add(z, pe)
    }

    /// Encode a stack of equal-length sequences (`batch·seq_len` rows).
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        units: Var,
        positions: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        let mut h = self.project_units(tape, store, units, positions)?;
        for b in &self.blocks {
            h = b.forward(tape, store, h, seq_len)?;
        }
        self.norm.forward(tape, store, h)
    }

    /// Encode full records (all `n` units, no masking).
    pub fn encode_full<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[&Tensor<T>]) -> Result<Var> {
        let n = self.n_units;
        let x = stack_rows(batch)?;
        let x = tape.constant(x);
        let pos: Vec<usize> = (0..batch.len()).flat_map(|_| 0..n).collect();
        self.encode(tape, store, x, &pos, n)
    }
}

fn stack_rows<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts.first().map_or(0, |p| p.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::shape("stack", p.shape(), &[p.rows(), cols]));
        }
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Tensor::new([rows, cols], data)
}

/// Mask queries attending to visible features, then a codeword head.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub mask_token: String,
    pub pos: String,
    pub blocks: Vec<CrossAttentionBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Predictor {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: &LmmConfig) -> Result<Self> {
        let mask_token = format!("{PREDICTOR}.mask_token");
        let pos = format!("{PREDICTOR}.pos");
        store.insert(&mask_token, Tensor::randn([1, cfg.d], 0.02, rng))?;
        store.insert(&pos, Tensor::randn([cfg.n_units, cfg.d], 0.02, rng))?;
        let blocks = (0..cfg.ca_blocks)
            .map(|i| CrossAttentionBlock::new(store, rng, &format!("{PREDICTOR}.block{i}"), cfg.d, cfg.heads, cfg.ffn))
            .collect::<Result<_>>()?;
        Ok(Predictor {
            mask_token,
            pos,
            blocks,
            norm: LayerNorm::new(store, &format!("{PREDICTOR}.norm"), cfg.d)?,
            head: Linear::new(store, rng, &format!("{PREDICTOR}.head"), cfg.d, cfg.n_t, true)?,
        })
    }

    /// Returns `(f_mp, p_m)` for `masked_pos.len()` queries against `f_v`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_v: Var,
        masked_pos: &[usize],
        q_len: usize,
        k_len: usize,
    ) -> Result<(Var, Var)> {
        let token = tape.param(store, &self.mask_token)?;
        let q = tape.gather_rows(token, &vec![0; masked_pos.len()])?;
        let table = tape.param(store, &self.pos)?;
        let pe = tape.gather_rows(table, masked_pos)?;
        let mut h = tape.add(q, pe)?;
        for b in &self.blocks {
            h = b.forward(tape, store, h, f_v, q_len, k_len)?;
        }
        let f_mp = self.norm.forward(tape, store, h)?;
        let logits = self.head.forward(tape, store, f_mp)?;
        let p_m = tape.softmax(logits)?;
        Ok((f_mp, p_m))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LmmLoss {
    pub reg: Var,
    pub cls: Var,
    pub total: Var,
}

/// Feature regression (mean over masked units of `‖f_m − f_mp‖²/d`) plus
/// codeword cross-entropy, summed.
pub fn lmm_loss<T: Real>(tape: &mut Tape<T>, f_m: Var, f_mp: Var, l_m: &Tensor<T>, p_m: Var) -> Result<LmmLoss> {
    let reg = tape.mse(f_mp, f_m)?;
    let cls = tape.cross_entropy_probs(p_m, l_m)?;
    let total = tape.add(reg, cls)?;
    Ok(LmmLoss { reg, cls, total })
}

/// `teacher ← τ·teacher + (1−τ)·student`, element-wise.
pub fn ema_update<T: Real>(teacher: &mut Tensor<T>, student: &Tensor<T>, tau: f64) -> Result<()> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape("teacher_update", teacher.shape(), student.shape()));
    }
    let (a, b) = (T::of(tau), T::of(1.0 - tau));
    for (t, &s) in teacher.data_mut().iter_mut().zip(student.data()) {
        *t = a * *t + b * s;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LmmModel {
    pub cfg: LmmConfig,
    pub student: TimeEncoder,
    pub teacher: TimeEncoder,
    pub predictor: Predictor,
    pub tokenizer: Tokenizer,
}

impl LmmModel {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: LmmConfig) -> Result<Self> {
        if !(cfg.tau > 0.0 && cfg.tau < 1.0) {
            return Err(Error::Config {
                field: "tau",
                msg: format!("{} outside (0, 1)", cfg.tau),
            });
        }
        let student = TimeEncoder::new(store, rng, STUDENT, &cfg)?;
        let teacher = student.renamed(TEACHER);
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(&format!("{STUDENT}.")))
            .map(str::to_owned)
            .collect();
        for n in names {
            let v = store.get(&n).expect("listed").clone();
            store.insert(teacher_name(&n), v)?;
        }
        store.set_trainable(&format!("{TEACHER}."), false);
        let predictor = Predictor::new(store, rng, &cfg)?;
        let tokenizer = Tokenizer::new(store, rng, cfg.unit_dim, cfg.n_t)?;
        Ok(LmmModel {
            cfg,
            student,
            teacher,
            predictor,
            tokenizer,
        })
    }

    /// Move every teacher tensor towards its student counterpart.
    pub fn teacher_update<T: Real>(&self, store: &mut ParamStore<T>, tau: f64) -> Result<()> {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(&format!("{STUDENT}.")))
            .map(str::to_owned)
            .collect();
        for n in names {
            let s = store.get(&n).expect("listed").clone();
            let t = store
                .param_mut(&teacher_name(&n))
                .ok_or_else(|| Error::UnknownParam(teacher_name(&n)))?;
            ema_update(&mut t.value, &s, tau)?;
        }
        Ok(())
    }

    /// Teacher features of the masked units, computed over the full
    /// sequence on a separate inference tape.
    pub fn teacher_encode_masked<T: Real>(&self, store: &ParamStore<T>, batch: &[&Tensor<T>], plans: &[MaskPlan]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let full = self.teacher.encode_full(&mut tape, store, batch)?;
        let n = self.cfg.n_units;
        let idx: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.masked.iter().map(move |&m| b * n + m))
            .collect();
        Ok(tape.value(full).select_rows(&idx))
    }

    /// Student, predictor and loss for one batch of unit matrices
    /// (`n × unit_dim` each).
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &[&Tensor<T>],
        plans: &[MaskPlan],
    ) -> Result<(LmmLoss, Var, Var)> {
        if batch.len() != plans.len() || batch.is_empty() {
            return Err(Error::invalid("lmm", "one mask plan per record required"));
        }
        let n_vis = plans[0].visible.len();
        let n_mask = plans[0].masked.len();
        for (u, p) in batch.iter().zip(plans) {
            if u.shape() != [self.cfg.n_units, self.cfg.unit_dim] {
                return Err(Error::shape("project_units", u.shape(), &[self.cfg.n_units, self.cfg.unit_dim]));
            }
            if p.visible.len() != n_vis || p.masked.len() != n_mask {
                return Err(Error::invalid("lmm", "mask plans in a batch must share sizes"));
            }
        }
        let vis_pos: Vec<usize> = plans.iter().flat_map(|p| p.visible.iter().copied()).collect();
        let mask_pos: Vec<usize> = plans.iter().flat_map(|p| p.masked.iter().copied()).collect();
        let vis_rows: Vec<Tensor<T>> = batch.iter().zip(plans).map(|(u, p)| u.select_rows(&p.visible)).collect();
        let masked_raw: Vec<Tensor<T>> = batch.iter().zip(plans).map(|(u, p)| u.select_rows(&p.masked)).collect();
        let x_vis = tape.constant(stack_rows(&vis_rows.iter().collect::<Vec<_>>())?);
        let f_v = self.student.encode(tape, store, x_vis, &vis_pos, n_vis)?;
        let f_m = self.teacher_encode_masked(store, batch, plans)?;
        let f_m = tape.constant(f_m);
        let (f_mp, p_m) = self.predictor.forward(tape, store, f_v, &mask_pos, n_mask, n_vis)?;
        let codes = self.tokenizer.codes(store, &stack_rows(&masked_raw.iter().collect::<Vec<_>>())?)?;
        let l_m = one_hot(&codes, self.cfg.n_t);
        let loss = lmm_loss(tape, f_m, f_mp, &l_m, p_m)?;
        Ok((loss, f_mp, p_m))
    }
}

fn teacher_name(student: &str) -> String {
    format!("{TEACHER}{}", &student[STUDENT.len()..])
}

/// Mask plans for one batch, drawn from a stream keyed by
/// `(seed, epoch, batch)`.
pub fn batch_plans(n: usize, r_m: f64, len: usize, seed: u64, epoch: usize, batch: usize) -> Result<Vec<MaskPlan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4d41534b, epoch as u64, batch as u64]));
    (0..len).map(|_| make_mask_plan(n, r_m, &mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmmLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub reg: f64,
    pub cls: f64,
}

/// Adam on the student and predictor, EMA on the teacher after every step.
/// Stops after `max_steps` optimizer steps when given.
pub fn train_lmm(
    model: &LmmModel,
    store: &mut ParamStore<f32>,
    units: &[Tensor<f32>],
    cfg: &TrainConfig,
    max_steps: Option<u64>,
) -> Result<(Vec<EpochLog>, Vec<LmmLog>)> {
    let adam = cfg.adam();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        let batches = epoch_batches(units.len(), cfg.batch_size, cfg.seed, epoch);
        let mut total = 0.0;
        for (bi, b) in batches.iter().enumerate() {
            let batch: Vec<&Tensor<f32>> = b.iter().map(|&i| &units[i]).collect();
            let plans = batch_plans(model.cfg.n_units, model.cfg.mask_ratio, b.len(), cfg.seed, epoch, bi)?;
            let mut tape = Tape::new();
            let (loss, _, _) = model.step(&mut tape, store, &batch, &plans)?;
            let (l, r, c) = (
                tape.value(loss.total).item() as f64,
                tape.value(loss.reg).item() as f64,
                tape.value(loss.cls).item() as f64,
            );
            total += l;
            let grads = tape.backward(loss.total)?;
            store.adam_step(&grads.into_named(), &adam)?;
            model.teacher_update(store, model.cfg.tau)?;
            steps.push(LmmLog {
                step: store.step(),
                epoch,
                loss: l,
                reg: r,
                cls: c,
            });
            if max_steps.is_some_and(|m| store.step() >= m) {
                epochs.push(EpochLog {
                    stage: "lmm".into(),
                    epoch,
                    loss: total / (bi + 1) as f64,
                    train_acc: None,
                    val_acc: None,
                });
                break 'outer;
            }
        }
        epochs.push(EpochLog {
            stage: "lmm".into(),
            epoch,
            loss: total / batches.len().max(1) as f64,
            train_acc: None,
            val_acc: None,
        });
    }
    Ok((epochs, steps))
}
