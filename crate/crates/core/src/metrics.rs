//! Classification and generation metrics, plus the small surrogate image
//! classifier that stands in for a pretrained one.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::ParamStore;
use crate::par::{self, derive_seed};
use crate::tensor::{Real, Tensor};
use crate::train::{epoch_batches, TrainConfig};

/// Whether class `y` is among the `k` highest scores, ties going to the
/// lower index.
pub fn in_top_k<T: Real>(row: &[T], y: usize, k: usize) -> bool {
    let sy = row[y];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > sy || (s == sy && j < y))
        .count();
    ahead < k
}

pub fn top_k_accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let (n, c) = (logits.rows(), logits.cols());
    if k == 0 || k > c {
        return Err(Error::invalid("top_k_accuracy", format!("k={k} with {c} classes")));
    }
    check_labels("top_k_accuracy", n, labels, c)?;
    if n == 0 {
        return Ok(0.0);
    }
    let hits = (0..n).filter(|&i| in_top_k(logits.row(i), labels[i], k)).count();
    Ok(hits as f64 / n as f64)
}

fn check_labels(op: &'static str, rows: usize, labels: &[usize], n_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(op, &[rows], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::invalid(op, format!("label {bad} ≥ {n_classes} classes")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn per_class(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<ClassBreakdown>> {
    check_labels("f1_macro", pred.len(), labels, n_classes)?;
    check_labels("f1_macro", labels.len(), pred, n_classes)?;
    let mut tp = vec![0usize; n_classes];
    let mut npred = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        npred[p] += 1;
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..n_classes)
        .map(|k| {
            let (p, r) = (ratio(tp[k], npred[k]), ratio(tp[k], support[k]));
            ClassBreakdown {
                class: k,
                support: support[k],
                precision: p,
                recall: r,
                f1: if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) },
            }
        })
        .collect())
}

pub fn f1_macro(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    if n_classes == 0 {
        return Err(Error::invalid("f1_macro", "no classes"));
    }
    let rows = per_class(pred, labels, n_classes)?;
    Ok(rows.iter().map(|r| r.f1).sum::<f64>() / n_classes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub n_way: usize,
    pub k: usize,
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            n_way: 50,
            k: 1,
            n_trials: 20,
            seed: 0,
        }
    }
}

/// Hit rate of the true class within random `N`-class subsets that always
/// contain it.
pub fn n_way_top_k(probs: &Tensor<f64>, labels: &[usize], cfg: &GaConfig) -> Result<f64> {
    let (n, c) = (probs.rows(), probs.cols());
    if cfg.n_way < 2 || cfg.n_way > c {
        return Err(Error::invalid("n_way_top_k", format!("N={} with {c} classes", cfg.n_way)));
    }
    if cfg.k == 0 || cfg.k >= cfg.n_way || cfg.n_trials == 0 {
        return Err(Error::invalid("n_way_top_k", format!("K={} N={} trials={}", cfg.k, cfg.n_way, cfg.n_trials)));
    }
    check_labels("n_way_top_k", n, labels, c)?;
    if n == 0 {
        return Ok(0.0);
    }
    let hits: Vec<usize> = par::map_indexed(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[i as u64]));
        let y = labels[i];
        let row = probs.row(i);
        let mut sub = Vec::with_capacity(cfg.n_way);
        (0..cfg.n_trials)
            .filter(|_| {
                sub.clear();
                sub.extend(index::sample(&mut rng, c - 1, cfg.n_way - 1).into_iter().map(|j| if j >= y { j + 1 } else { j }));
                let sy = row[y];
                let ahead = sub.iter().filter(|&&j| row[j] > sy || (row[j] == sy && j < y)).count();
                ahead < cfg.k
            })
            .count()
    });
    Ok(hits.iter().sum::<usize>() as f64 / (n * cfg.n_trials) as f64)
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` in nats for one group of rows.
pub fn inception_score(probs: &Tensor<f64>) -> Result<f64> {
    let (n, c) = (probs.rows(), probs.cols());
    if n == 0 {
        return Err(Error::invalid("inception_score", "no rows"));
    }
    for i in 0..n {
        let s: f64 = probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-5 || probs.row(i).iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid("inception_score", format!("row {i} is not a distribution (sum {s})")));
        }
    }
    let mut marginal = vec![0.0; c];
    for i in 0..n {
        for (m, &p) in marginal.iter_mut().zip(probs.row(i)) {
            *m += p / n as f64;
        }
    }
    let kl: f64 = (0..n)
        .map(|i| {
            probs
                .row(i)
                .iter()
                .zip(&marginal)
                .filter(|&(&p, _)| p > 0.0)
                .map(|(&p, &m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(kl.exp())
}

/// Mean and population std of the score over contiguous splits.
pub fn inception_score_splits(probs: &Tensor<f64>, splits: usize) -> Result<(f64, f64)> {
    let n = probs.rows();
    let splits = splits.clamp(1, n.max(1));
    let scores = (0..splits)
        .map(|s| {
            let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
            inception_score(&probs.select_rows(&(lo..hi).collect::<Vec<_>>()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

fn mean_cov(x: &Tensor<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut centred = m;
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centred.transpose() * &centred / denom;
    (mu, cov)
}

fn psd_eigen(m: DMatrix<f64>, what: &str) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = sym.symmetric_eigen();
    for v in e.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-8 {
                log::warn!("{what}: clamping eigenvalue {v:e}");
            }
            *v = 0.0;
        }
    }
    e
}

/// Fréchet distance between Gaussians fitted to two feature sets (rows).
/// `Tr((Σ_A Σ_B)^½)` is taken from the eigenvalues of `Σ_A^½ Σ_B Σ_A^½`.
pub fn fid(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("fid", a.shape(), b.shape()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid("fid", "empty feature set"));
    }
    let d = a.cols();
    if a.rows() <= d || b.rows() <= d {
        log::warn!("fid: {} and {} samples for {d} dimensions", a.rows(), b.rows());
    }
    let (mu_a, cov_a) = mean_cov(a);
    let (mu_b, cov_b) = mean_cov(b);
    let ea = psd_eigen(cov_a.clone(), "fid Σ_A");
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt)) * ea.eigenvectors.transpose();
    let inner = psd_eigen(&sqrt_a * &cov_b * &sqrt_a, "fid product");
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub stride: usize,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 8,
            stride: 4,
            dynamic_range: 2.0,
        }
    }
}

fn window_starts(len: usize, win: usize, stride: usize) -> Vec<usize> {
    if len <= win {
        return vec![0];
    }
    (0..=len - win).step_by(stride.max(1)).collect()
}

/// Windowed SSIM on `C×H×W` images, averaged over windows and channels.
/// Images smaller than the window use a single whole-image window.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let [c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    let c1 = (0.01 * cfg.dynamic_range).powi(2);
    let c2 = (0.03 * cfg.dynamic_range).powi(2);
    let (wh, ww) = (cfg.window.min(h), cfg.window.min(w));
    let ys = window_starts(h, wh, cfg.stride);
    let xs = window_starts(w, ww, cfg.stride);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for &y0 in &ys {
            for &x0 in &xs {
                let idx = || (y0..y0 + wh).flat_map(move |y| (x0..x0 + ww).map(move |x| ch * h * w + y * w + x));
                let m = (wh * ww) as f64;
                let ma = idx().map(|i| ad[i]).sum::<f64>() / m;
                let mb = idx().map(|i| bd[i]).sum::<f64>() / m;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in idx() {
                    let (da, db) = (ad[i] - ma, bd[i] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
                let (va, vb, cov) = (va / m, vb / m, cov / m);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// One-hidden-layer image classifier; its hidden activations are the
/// feature space for FID.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub hidden: Linear,
    pub out: Linear,
    pub n_classes: usize,
}

impl Surrogate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<f32>, rng: &mut R, in_dim: usize, hidden: usize, n_classes: usize) -> Result<Self> {
        Ok(Surrogate {
            hidden: Linear::new(store, rng, "surrogate.hidden", in_dim, hidden, true)?,
            out: Linear::new(store, rng, "surrogate.out", hidden, n_classes, true)?,
            n_classes,
        })
    }

    fn batch(images: &[&Tensor<f64>], in_dim: usize) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(images.len() * in_dim);
        for im in images {
            if im.len() != in_dim {
                return Err(Error::shape("surrogate", &[in_dim], im.shape()));
            }
            data.extend(im.data().iter().map(|&v| v as f32));
        }
        Tensor::new([images.len(), in_dim], data)
    }

    /// `(features, probabilities)` for a set of images.
    pub fn infer(&self, store: &ParamStore<f32>, images: &[&Tensor<f64>]) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut tape = Tape::inference();
        let x = tape.constant(Self::batch(images, self.hidden.in_dim)?);
        let h = self.hidden.forward(&mut tape, store, x)?;
        let h = tape.gelu(h)?;
        let z = self.out.forward(&mut tape, store, h)?;
        let p = tape.softmax(z)?;
        let probs = tape.value(p).cast::<f64>();
        // renormalise in f64 so rows sum to 1 to rounding
        let probs = Tensor::from_fn(probs.shape().to_vec(), |i| {
            let r = i / self.n_classes;
            probs.data()[i] / probs.row(r).iter().sum::<f64>()
        });
        Ok((tape.value(h).cast(), probs))
    }

    /// Cross-entropy training with Gaussian pixel noise as augmentation.
    pub fn train(&self, store: &mut ParamStore<f32>, images: &[Tensor<f64>], labels: &[usize], noise: f64, cfg: &TrainConfig) -> Result<Vec<f64>> {
        check_labels("surrogate", images.len(), labels, self.n_classes)?;
        let adam = cfg.adam();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5u64]));
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut sum = 0.0;
            let batches = epoch_batches(images.len(), cfg.batch_size, cfg.seed, epoch);
            for b in &batches {
                let noisy: Vec<Tensor<f64>> = b
                    .iter()
                    .map(|&i| {
                        let im = &images[i];
                        Tensor::from_fn(im.shape().to_vec(), |j| im.data()[j] + noise * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    })
                    .collect();
                let refs: Vec<&Tensor<f64>> = noisy.iter().collect();
                let ys: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let x = tape.constant(Self::batch(&refs, self.hidden.in_dim)?);
                let h = self.hidden.forward(&mut tape, store, x)?;
                let h = tape.gelu(h)?;
                let z = self.out.forward(&mut tape, store, h)?;
                let loss = tape.cross_entropy_logits(z, &ys)?;
                sum += tape.value(loss).item() as f64;
                let g = tape.backward(loss)?;
                store.adam_step(&g.into_named(), &adam)?;
            }
            curve.push(sum / batches.len().max(1) as f64);
        }
        Ok(curve)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub ga: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub ssim_mean: f64,
}

/// GA, IS, FID and SSIM of generated images against their ground truth.
/// `ground_truth[i]` and `labels[i]` belong to `generated[i]`.
pub fn evaluate_generation(
    surrogate: &Surrogate,
    store: &ParamStore<f32>,
    generated: &[Tensor<f64>],
    ground_truth: &[Tensor<f64>],
    labels: &[usize],
    ga: &GaConfig,
    is_splits: usize,
    ssim_cfg: &SsimConfig,
) -> Result<GenerationMetrics> {
    if generated.len() != ground_truth.len() {
        return Err(Error::shape("evaluate_generation", &[generated.len()], &[ground_truth.len()]));
    }
    if generated.is_empty() {
        return Err(Error::invalid("evaluate_generation", "no images"));
    }
    let gen_refs: Vec<&Tensor<f64>> = generated.iter().collect();
    let gt_refs: Vec<&Tensor<f64>> = ground_truth.iter().collect();
    let (gen_feat, gen_probs) = surrogate.infer(store, &gen_refs)?;
    let (gt_feat, _) = surrogate.infer(store, &gt_refs)?;
    let ga_cfg = GaConfig {
        n_way: ga.n_way.min(surrogate.n_classes),
        k: ga.k.min(ga.n_way.min(surrogate.n_classes) - 1),
        ..*ga
    };
    let ssims = par::map_indexed(generated.len(), |i| ssim(&generated[i], &ground_truth[i], ssim_cfg));
    let ssims = ssims.into_iter().collect::<Result<Vec<_>>>()?;
    let (is_mean, is_std) = inception_score_splits(&gen_probs, is_splits)?;
    Ok(GenerationMetrics {
        ga: n_way_top_k(&gen_probs, labels, &ga_cfg)?,
        is_mean,
        is_std,
        fid: fid(&gen_feat, &gt_feat)?,
        ssim_mean: ssims.iter().sum::<f64>() / ssims.len() as f64,
    })
}

/// Everything reported for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1_ca: f64,
    pub top3_ca: f64,
    pub top5_ca: f64,
    pub f1_macro: f64,
    pub ga: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub ssim_mean: f64,
    pub per_class: Vec<ClassBreakdown>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Top-k for k = 1, 3, 5 is capped at the class count.
    pub fn assemble(logits: &Tensor<f64>, labels: &[usize], generation: &GenerationMetrics, config: serde_json::Value) -> Result<Self> {
        let c = logits.cols();
        let pred = crate::train::argmax_rows(logits);
        Ok(MetricsReport {
            top1_ca: top_k_accuracy(logits, labels, 1)?,
            top3_ca: top_k_accuracy(logits, labels, 3.min(c))?,
            top5_ca: top_k_accuracy(logits, labels, 5.min(c))?,
            f1_macro: f1_macro(&pred, labels, c)?,
            ga: generation.ga,
            is_mean: generation.is_mean,
            is_std: generation.is_std,
            fid: generation.fid,
            ssim_mean: generation.ssim_mean,
            per_class: per_class(&pred, labels, c)?,
            config,
        })
    }

    pub fn check_ranges(&self) -> Result<()> {
        let unit = [self.top1_ca, self.top3_ca, self.top5_ca, self.f1_macro, self.ga];
        let ok = unit.iter().all(|v| (0.0..=1.0).contains(v))
            && self.is_mean >= 1.0 - 1e-9
            && self.fid >= 0.0
            && (-1.0..=1.0).contains(&self.ssim_mean);
        if ok {
            Ok(())
        } else {
            Err(Error::Malformed(format!("metric out of range: {self:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lower_index() {
        assert!(in_top_k(&[1.0, 1.0, 0.0], 0, 1));
        assert!(!in_top_k(&[1.0, 1.0, 0.0], 1, 1));
        assert!(in_top_k(&[1.0, 1.0, 0.0], 1, 2));
    }

    #[test]
    fn f1_single_predicted_class() {
        let f = f1_macro(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ssim_constant_images() {
        let a = Tensor::full([1, 8, 8], 0.2);
        let b = Tensor::full([1, 8, 8], 0.5);
        let cfg = SsimConfig::default();
        let c1 = (0.01f64 * 2.0).powi(2);
        let want = (2.0 * 0.2 * 0.5 + c1) / (0.04 + 0.25 + c1);
        assert!((ssim(&a, &b, &cfg).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn fid_diagonal_closed_form() {
        // axis-aligned grids have diagonal sample covariance
        let grid = |cx: f64, sx: f64, sy: f64| {
            Tensor::new([4, 2], vec![cx + sx, sy, cx + sx, -sy, cx - sx, sy, cx - sx, -sy]).unwrap()
        };
        let (a, b) = (grid(0.0, 1.0, 2.0), grid(2.0, 1.0, 0.5));
        let (va, vb) = ([4.0 / 3.0, 16.0 / 3.0], [4.0 / 3.0, 1.0 / 3.0]);
        let want = 4.0 + (0..2).map(|i| va[i] + vb[i] - 2.0 * (va[i] * vb[i] as f64).sqrt()).sum::<f64>();
        assert!((fid(&a, &b).unwrap() - want).abs() < 1e-9);
    }
}
