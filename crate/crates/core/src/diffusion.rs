//! Two-stage conditional denoising diffusion on small images.
//!
//! Stage 1 denoises from pure noise down to step `T_s` under the aligned
//! EEG embedding; stage 2 continues from that exact latent to step 0 under
//! the predicted class. Latents are kept in `f64`; the learned denoiser
//! computes in `f32`.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::crc_f32;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ResidualBlock};
use crate::optim::ParamStore;
use crate::par::{self, derive_seed};
use crate::tensor::{Real, Tensor};

/// Linear variance schedule with `ᾱ_0 = 1`; index `t` runs `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Config {
                field: "diffusion_steps",
                msg: "need at least 2 steps".into(),
            });
        }
        let betas: Vec<f64> = std::iter::once(0.0)
            .chain((0..t_max).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64))
            .collect();
        if betas[1..].iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config {
                field: "diffusion_steps",
                msg: format!("β range [{beta_start}, {beta_end}] leaves (0, 1)"),
            });
        }
        let mut alpha_bars = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t]);
        }
        Ok(NoiseSchedule {
            t_max,
            betas,
            alpha_bars,
        })
    }

    /// The 1000-step `1e-4 → 0.02` schedule's endpoints rescaled by
    /// `1000/T`, which keeps `ᾱ_T` near zero for short chains.
    pub fn scaled(t_max: usize) -> Result<Self> {
        let k = 1000.0 / t_max as f64;
        Self::linear(t_max, 1e-4 * k, 0.02 * k)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, op: &'static str, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            return Err(Error::invalid(op, format!("step {t} outside [{lo}, {}]", self.t_max)));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(s: &NoiseSchedule, x0: &Tensor<f64>, t: usize, eps: &Tensor<f64>) -> Result<Tensor<f64>> {
    s.check("forward_diffuse", t, 0)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse", x0.shape(), eps.shape()));
    }
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// `x̂0 = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t`.
pub fn predict_x0(s: &NoiseSchedule, x_t: &Tensor<f64>, t: usize, eps: &Tensor<f64>) -> Result<Tensor<f64>> {
    s.check("predict_x0", t, 0)?;
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    Ok(x_t.zip_map(eps, |x, e| (x - b * e) / a))
}

/// What a denoiser is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Embedding(Vec<f32>),
    Class(usize),
}

impl Condition {
    pub fn describe(&self) -> String {
        match self {
            Condition::Embedding(v) => format!("embedding crc32={:08x}", crc_f32(v)),
            Condition::Class(c) => format!("class {c}"),
        }
    }
}

pub trait Denoiser: Sync {
    fn predict_eps(&self, x_t: &Tensor<f64>, t: usize, cond: &Condition) -> Result<Tensor<f64>>;

    /// Number of class conditions understood, if any.
    fn n_classes(&self) -> Option<usize> {
        None
    }
}

/// Knows the single clean image and returns the exact noise.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub x0: Tensor<f64>,
    pub schedule: NoiseSchedule,
}

impl Denoiser for OracleDenoiser {
    fn predict_eps(&self, x_t: &Tensor<f64>, t: usize, _cond: &Condition) -> Result<Tensor<f64>> {
        let (a, b) = (self.schedule.alpha_bar(t).sqrt(), (1.0 - self.schedule.alpha_bar(t)).sqrt());
        Ok(x_t.zip_map(&self.x0, |x, x0| (x - a * x0) / b))
    }
}

/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β_t·z`, with `z = 0` at `t = 1`.
pub fn reverse_step<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    den: &dyn Denoiser,
    x_t: &Tensor<f64>,
    t: usize,
    cond: &Condition,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    s.check("reverse_step", t, 1)?;
    let eps = den.predict_eps(x_t, t, cond)?;
    if eps.shape() != x_t.shape() {
        return Err(Error::shape("reverse_step", x_t.shape(), eps.shape()));
    }
    let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / s.alpha(t).sqrt();
    let sigma = s.beta(t).sqrt();
    let mut out = x_t.zip_map(&eps, |x, e| inv * (x - coef * e));
    if t > 1 {
        for v in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(out)
}

/// Same posterior step written through `x̂0`, which is clamped to
/// `[−1, 1]` first. Identical to [`reverse_step`] up to rounding whenever
/// the clamp is inactive.
pub fn reverse_step_clipped<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    den: &dyn Denoiser,
    x_t: &Tensor<f64>,
    t: usize,
    cond: &Condition,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    s.check("reverse_step", t, 1)?;
    let eps = den.predict_eps(x_t, t, cond)?;
    if eps.shape() != x_t.shape() {
        return Err(Error::shape("reverse_step", x_t.shape(), eps.shape()));
    }
    let x0 = predict_x0(s, x_t, t, &eps)?.map(|v| v.clamp(-1.0, 1.0));
    let (ab, abp, b) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t));
    let c0 = abp.sqrt() * b / (1.0 - ab);
    let ct = s.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab);
    let sigma = b.sqrt();
    let mut out = x0.zip_map(x_t, |a, x| c0 * a + ct * x);
    if t > 1 {
        for v in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(out)
}

/// Run reverse steps `from → to` (exclusive of `to`'s own step).
#[allow(clippy::too_many_arguments)]
fn run_steps<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    den: &dyn Denoiser,
    mut x: Tensor<f64>,
    from: usize,
    to: usize,
    cond: &Condition,
    clip: bool,
    rng: &mut R,
) -> Result<(Tensor<f64>, usize)> {
    let mut steps = 0;
    for t in (to + 1..=from).rev() {
        x = if clip {
            reverse_step_clipped(s, den, &x, t, cond, rng)?
        } else {
            reverse_step(s, den, &x, t, cond, rng)?
        };
        steps += 1;
    }
    Ok((x, steps))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Fraction of the chain left for refinement; `T_s = floor(ρ·T)`.
    pub rho: f64,
    /// Use [`reverse_step_clipped`] instead of [`reverse_step`].
    pub clip_x0: bool,
}

impl CascadeConfig {
    pub fn switch_step(&self, t_max: usize) -> Result<usize> {
        let ts = (self.rho * t_max as f64).floor() as usize;
        if !(self.rho > 0.0 && self.rho < 1.0) || ts == 0 || ts >= t_max {
            return Err(Error::Config {
                field: "rho",
                msg: format!("ρ={} gives switch step {ts} of {t_max}", self.rho),
            });
        }
        Ok(ts)
    }
}

pub fn initial_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

/// From `x_T ~ N(0, I)` down to `x_{T_s}` under `cond`. Returns the latent
/// and the number of steps taken.
pub fn sample_stage1<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    den: &dyn Denoiser,
    cascade: &CascadeConfig,
    shape: &[usize],
    cond: &Condition,
    rng: &mut R,
) -> Result<(Tensor<f64>, usize)> {
    let ts = cascade.switch_step(s.t_max)?;
    let x = initial_noise(shape, rng);
    run_steps(s, den, x, s.t_max, ts, cond, cascade.clip_x0, rng)
}

/// Continue from `x_{T_s}` to `x_0` under the class condition. The input
/// latent is used as is.
pub fn refine_stage2<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    den: &dyn Denoiser,
    cascade: &CascadeConfig,
    x_ts: Tensor<f64>,
    class: &Condition,
    rng: &mut R,
) -> Result<(Tensor<f64>, usize)> {
    if let (Condition::Class(c), Some(n)) = (class, den.n_classes()) {
        if *c >= n {
            return Err(Error::invalid("refine_stage2", format!("unknown class {c} (of {n})")));
        }
    }
    let ts = cascade.switch_step(s.t_max)?;
    run_steps(s, den, x_ts, ts, 0, class, cascade.clip_x0, rng)
}

/// Which conditions drive the chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeMode {
    /// EEG embedding to `T_s`, then the class.
    Cascade,
    /// EEG embedding for the whole chain.
    EmbeddingOnly,
    /// Class condition for the whole chain.
    ClassOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub record_id: usize,
    pub sample: usize,
    pub seed: u64,
    pub label: usize,
    pub c_eeg_crc32: String,
    pub stage1_condition: String,
    pub stage1_steps: usize,
    pub stage2_condition: String,
    pub stage2_steps: usize,
}

#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub image: Tensor<f64>,
    pub provenance: Provenance,
}

/// `n_samples` independent trajectories for one record. Sample `k` draws
/// from the stream `(master_seed, record_id, k)`.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    s: &NoiseSchedule,
    den: &dyn Denoiser,
    cascade: &CascadeConfig,
    mode: CascadeMode,
    shape: &[usize],
    c_eeg: &[f32],
    class_cond: &Condition,
    label: usize,
    record_id: usize,
    n_samples: usize,
    master_seed: u64,
) -> Result<Vec<GeneratedSample>> {
    let emb = Condition::Embedding(c_eeg.to_vec());
    let crc = format!("{:08x}", crc_f32(c_eeg));
    par::map_indexed(n_samples, |k| {
        let seed = derive_seed(master_seed, &[record_id as u64, k as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (first, second) = match mode {
            CascadeMode::Cascade => (&emb, class_cond),
            CascadeMode::EmbeddingOnly => (&emb, &emb),
            CascadeMode::ClassOnly => (class_cond, class_cond),
        };
        let (x_ts, n1) = sample_stage1(s, den, cascade, shape, first, &mut rng)?;
        let (image, n2) = refine_stage2(s, den, cascade, x_ts, second, &mut rng)?;
        Ok(GeneratedSample {
            image,
            provenance: Provenance {
                record_id,
                sample: k,
                seed,
                label,
                c_eeg_crc32: crc.clone(),
                stage1_condition: first.describe(),
                stage1_steps: n1,
                stage2_condition: second.describe(),
                stage2_steps: n2,
            },
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub hidden: usize,
    pub time_dim: usize,
    pub res_blocks: usize,
    pub cond_dim: usize,
    pub n_classes: usize,
}

impl DenoiserConfig {
    pub fn latent_len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat MLP `ε_θ(x_t, t, cond)`: the time and condition projections are
/// summed into one embedding that is added to the input projection and
/// again before every residual block.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    pub cfg: DenoiserConfig,
    pub input: Linear,
    pub time: Linear,
    pub cond: Linear,
    pub class_table: String,
    pub blocks: Vec<ResidualBlock>,
    pub norm: LayerNorm,
    pub out: Linear,
    pub t_max: usize,
}

/// Sinusoidal features of `t/T` scaled to a period range of `[1, 1000]`.
pub fn time_embedding<T: Real>(ts: &[usize], t_max: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn([ts.len(), dim], |i| {
        let (r, j) = (i / dim, i % dim);
        let pos = ts[r] as f64 * 1000.0 / t_max as f64;
        let k = j % half.max(1);
        let freq = (-(k as f64) / half.max(1) as f64 * 1000f64.ln()).exp();
        T::of(if j < half { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

impl MlpDenoiser {
    pub const PREFIX: &'static str = "diff";

    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: DenoiserConfig, t_max: usize) -> Result<Self> {
        let d = cfg.latent_len();
        let h = cfg.hidden;
        let class_table = "diff.class_table".to_string();
        store.insert(&class_table, Tensor::randn([cfg.n_classes, cfg.cond_dim], (1.0 / cfg.cond_dim as f64).sqrt(), rng))?;
        let out = Linear::new(store, rng, "diff.out", h, d, true)?;
        // start near a zero prediction so the initial loss is ≈ E[ε²] = 1
        let w = store.get(&out.weight).expect("just inserted").map(|v| v * T::of(0.05));
        store.set(&out.weight, w)?;
        Ok(MlpDenoiser {
            cfg,
            input: Linear::new(store, rng, "diff.input", d, h, true)?,
            time: Linear::new(store, rng, "diff.time", cfg.time_dim, h, true)?,
            cond: Linear::new(store, rng, "diff.cond", cfg.cond_dim, h, false)?,
            class_table,
            blocks: (0..cfg.res_blocks)
                .map(|i| ResidualBlock::new(store, rng, &format!("diff.res{i}"), h))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, "diff.norm", h)?,
            out,
            t_max,
        })
    }

    /// `x_t` is `batch × latent_len`; `cond` is `batch × cond_dim`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let a = self.input.forward(tape, store, x_t)?;
        let te = tape.constant(time_embedding(ts, self.t_max, self.cfg.time_dim));
        let b = self.time.forward(tape, store, te)?;
        let c = self.cond.forward(tape, store, cond)?;
        let emb = tape.add(b, c)?;
        let h = tape.add(a, emb)?;
        let mut h = tape.gelu(h)?;
        for blk in &self.blocks {
            let x = tape.add(h, emb)?;
            h = blk.forward(tape, store, x)?;
        }
        let h = self.norm.forward(tape, store, h)?;
        self.out.forward(tape, store, h)
    }

    pub fn class_rows<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, labels: &[usize]) -> Result<Var> {
        let table = tape.param(store, &self.class_table)?;
        tape.gather_rows(table, labels)
    }

    /// Bind the model to a parameter store for sampling.
    pub fn bind<'a>(&'a self, store: &'a ParamStore<f32>) -> BoundDenoiser<'a> {
        BoundDenoiser { net: self, store }
    }
}

pub struct BoundDenoiser<'a> {
    pub net: &'a MlpDenoiser,
    pub store: &'a ParamStore<f32>,
}

impl Denoiser for BoundDenoiser<'_> {
    fn predict_eps(&self, x_t: &Tensor<f64>, t: usize, cond: &Condition) -> Result<Tensor<f64>> {
        let shape = x_t.shape().to_vec();
        if x_t.len() != self.net.cfg.latent_len() {
            return Err(Error::shape("denoiser", &shape, &self.net.cfg.shape));
        }
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(x_t.cast::<f32>().reshape([1, x_t.len()])?);
        let c = match cond {
            Condition::Embedding(v) => {
                if v.len() != self.net.cfg.cond_dim {
                    return Err(Error::shape("denoiser condition", &[v.len()], &[self.net.cfg.cond_dim]));
                }
                tape.constant(Tensor::new([1, v.len()], v.clone())?)
            }
            Condition::Class(k) => {
                if *k >= self.net.cfg.n_classes {
                    return Err(Error::invalid("denoiser", format!("unknown class {k}")));
                }
                self.net.class_rows(&mut tape, self.store, &[*k])?
            }
        };
        let y = self.net.forward(&mut tape, self.store, x, &[t], c)?;
        tape.value(y).cast::<f64>().reshape(shape)
    }

    fn n_classes(&self) -> Option<usize> {
        Some(self.net.cfg.n_classes)
    }
}

/// One training pair: a clean image with its embedding and class.
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub x0: Tensor<f64>,
    pub embedding: Vec<f32>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// ε-prediction MSE with random `t`, `ε` and condition type (embedding or
/// class, one half of each batch each). Returns the loss per step.
pub fn train_denoiser(
    net: &MlpDenoiser,
    store: &mut ParamStore<f32>,
    s: &NoiseSchedule,
    data: &[DiffusionExample],
    cfg: &DenoiserTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("train_denoiser", "no examples"));
    }
    let adam = crate::optim::AdamConfig::with_lr(cfg.lr);
    let d = net.cfg.latent_len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xD1FF]));
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let b = cfg.batch_size.max(2);
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=s.t_max)).collect();
        let mut x_t = Vec::with_capacity(b * d);
        let mut eps = Vec::with_capacity(b * d);
        for (&i, &t) in idx.iter().zip(&ts) {
            let e = initial_noise(data[i].x0.shape(), &mut rng);
            x_t.extend(forward_diffuse(s, &data[i].x0, t, &e)?.data().iter().map(|&v| v as f32));
            eps.extend(e.data().iter().map(|&v| v as f32));
        }
        let half = b / 2;
        let mut tape = Tape::new();
        let mut total: Option<Var> = None;
        for (lo, hi, by_class) in [(0, half, false), (half, b, true)] {
            let rows = hi - lo;
            let x = tape.constant(Tensor::new([rows, d], x_t[lo * d..hi * d].to_vec())?);
            let target = tape.constant(Tensor::new([rows, d], eps[lo * d..hi * d].to_vec())?);
            let cond = if by_class {
                let labels: Vec<usize> = idx[lo..hi].iter().map(|&i| data[i].label).collect();
                net.class_rows(&mut tape, store, &labels)?
            } else {
                let e = net.cfg.cond_dim;
                let mut c = Vec::with_capacity(rows * e);
                for &i in &idx[lo..hi] {
                    c.extend_from_slice(&data[i].embedding);
                }
                tape.constant(Tensor::new([rows, e], c)?)
            };
            let pred = net.forward(&mut tape, store, x, &ts[lo..hi], cond)?;
            let l = tape.mse(pred, target)?;
            let l = tape.scale(l, rows as f64 / b as f64)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let loss = total.expect("two halves");
        curve.push(tape.value(loss).item() as f64);
        let grads = tape.backward(loss)?;
        store.adam_step(&grads.into_named(), &adam)?;
    }
    Ok(curve)
}

/// Deterministic target image in `[−1, 1]`: a class colour and stripe
/// orientation with an image-specific phase and tint.
pub fn synthetic_image(class: usize, image_id: u32, n_classes: usize, shape: [usize; 3], seed: u64) -> Tensor<f64> {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1A6E, class as u64, image_id as u64]));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tint: f64 = rng.random_range(-0.1..0.1);
    let hue = std::f64::consts::TAU * class as f64 / n_classes.max(1) as f64;
    let angle = std::f64::consts::PI * class as f64 / n_classes.max(1) as f64;
    let freq = 1.0 + (class % 3) as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let colour = 0.45 * (hue + std::f64::consts::TAU * ch as f64 / c.max(1) as f64).cos();
        let u = (x as f64 * ca + y as f64 * sa) / w.max(1) as f64;
        let stripe = 0.4 * (std::f64::consts::TAU * freq * u + phase).sin();
        (colour + stripe + tint).clamp(-1.0, 1.0)
    })
}

/// Binary PPM (P6), mapping `[−1, 1]` linearly to `0..=255`.
pub fn ppm_bytes(img: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("ppm", format!("expected a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.data()[ch * h * w + y * w + x];
                out.push(to_byte(v));
            }
        }
    }
    Ok(out)
}

pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let bytes = ppm_bytes(img)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Inverse of [`ppm_bytes`] up to 8-bit quantisation.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let bad = |m: &str| Error::Malformed(format!("ppm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != 3 * w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", 3 * w * h, body.len())));
    }
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        body[(y * w + x) * 3 + ch] as f64 / 255.0 * 2.0 - 1.0
    }))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    parse_ppm(&crate::codec::read_file(path)?)
}

pub fn ppm_name(record_id: usize, sample: usize) -> String {
    format!("{record_id}_{sample}.ppm")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_nearly_destroys_signal() {
        let s = NoiseSchedule::scaled(100).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((1..=100).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!(s.alpha_bar(100) < 0.05);
        assert!(NoiseSchedule::linear(10, 0.5, 1.5).is_err());
    }

    #[test]
    fn forward_endpoints() {
        let s = NoiseSchedule::scaled(100).unwrap();
        let x0 = Tensor::from_fn([3, 2, 2], |i| i as f64 / 12.0 - 0.5);
        let eps = Tensor::from_fn([3, 2, 2], |i| (i as f64).sin());
        assert_eq!(forward_diffuse(&s, &x0, 0, &eps).unwrap(), x0);
        let z = Tensor::zeros([3, 2, 2]);
        let xt = forward_diffuse(&s, &x0, 40, &z).unwrap();
        assert_eq!(xt, x0.map(|v| s.alpha_bar(40).sqrt() * v));
        assert!(forward_diffuse(&s, &x0, 101, &eps).is_err());
    }

    struct Zero;
    impl Denoiser for Zero {
        fn predict_eps(&self, x: &Tensor<f64>, _: usize, _: &Condition) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x.shape().to_vec()))
        }
    }

    #[test]
    fn zero_prediction_last_step_only_rescales() {
        let s = NoiseSchedule::scaled(100).unwrap();
        let x = Tensor::from_fn([1, 2, 2], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = reverse_step(&s, &Zero, &x, 1, &Condition::Class(0), &mut rng).unwrap();
        assert_eq!(y, x.map(|v| (1.0 / s.alpha(1).sqrt()) * v));
        assert!(reverse_step(&s, &Zero, &x, 0, &Condition::Class(0), &mut rng).is_err());
    }

    #[test]
    fn ppm_header_and_mapping() {
        let img = Tensor::from_fn([3, 1, 2], |i| [-1.0, 1.0, 0.0, 2.0, -0.5, 0.5][i]);
        let b = ppm_bytes(&img).unwrap();
        assert!(b.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[0, 128, 64, 255, 255, 191]);
        let back = parse_ppm(&b).unwrap();
        assert_eq!(ppm_bytes(&back).unwrap(), b);
        assert!(parse_ppm(&b[..b.len() - 1]).is_err());
    }
}
