//! Finite-difference sweep over every tape op and every trainable model
//! component, on small random shapes in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::gradcheck::{check, check_model, DEFAULT_STEP};
use super::{Tape, Var};
use crate::align::{si_loss, AlignmentNet};
use crate::diffusion::{DenoiserConfig, MlpDenoiser};
use crate::error::Result;
use crate::freq::{fft_magnitude, FreqEncoder};
use crate::fusion::{Branches, TfeModel, TfeSample};
use crate::lmm::{lmm_loss, one_hot, LmmConfig, Predictor, TimeEncoder};
use crate::nn::{
    CrossAttentionBlock, FeedForward, LayerNorm, Linear, LstmCell, MultiHeadAttention, ResidualBlock, TransformerBlock,
};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_PROBES: usize = 10;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ProbeResult {
    pub name: &'static str,
    pub probes: usize,
    pub worst: f64,
    pub passed: bool,
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Normal entries pushed at least 0.1 away from zero, for kinked ops.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn op(f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<f64> {
    check(f, inputs, DEFAULT_STEP)
}

fn tiny_lmm() -> LmmConfig {
    LmmConfig {
        n_units: 4,
        unit_dim: 3,
        d: 4,
        heads: 2,
        ffn: 6,
        sa_blocks: 1,
        ca_blocks: 1,
        n_t: 5,
        mask_ratio: 0.5,
        tau: 0.9,
    }
}

fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r| op(&|t, v| t.add(v[0], v[1]), &[randn(r, &[3, 4]), randn(r, &[3, 4])])),
        ("sub", |r| op(&|t, v| t.sub(v[0], v[1]), &[randn(r, &[3, 4]), randn(r, &[3, 4])])),
        ("mul", |r| op(&|t, v| t.mul(v[0], v[1]), &[randn(r, &[3, 4]), randn(r, &[3, 4])])),
        ("scale", |r| {
            let s = r.random_range(-2.0..2.0);
            op(&move |t, v| t.scale(v[0], s), &[randn(r, &[2, 5])])
        }),
        ("add_row", |r| op(&|t, v| t.add_row(v[0], v[1]), &[randn(r, &[3, 4]), randn(r, &[1, 4])])),
        ("mul_row", |r| op(&|t, v| t.mul_row(v[0], v[1]), &[randn(r, &[3, 4]), randn(r, &[1, 4])])),
        ("matmul", |r| op(&|t, v| t.matmul(v[0], v[1]), &[randn(r, &[3, 4]), randn(r, &[4, 2])])),
        ("transpose", |r| op(&|t, v| t.transpose(v[0]), &[randn(r, &[3, 4])])),
        ("relu", |r| op(&|t, v| t.relu(v[0]), &[off_kink(r, &[3, 4])])),
        ("gelu", |r| op(&|t, v| t.gelu(v[0]), &[randn(r, &[3, 4])])),
        ("sigmoid", |r| op(&|t, v| t.sigmoid(v[0]), &[randn(r, &[3, 4])])),
        ("tanh", |r| op(&|t, v| t.tanh(v[0]), &[randn(r, &[3, 4])])),
        ("softmax", |r| op(&|t, v| t.softmax(v[0]), &[randn(r, &[3, 5])])),
        ("log_softmax", |r| op(&|t, v| t.log_softmax(v[0]), &[randn(r, &[3, 5])])),
        ("layer_norm", |r| {
            op(&|t, v| t.layer_norm(v[0], v[1], v[2]), &[randn(r, &[3, 5]), randn(r, &[1, 5]), randn(r, &[1, 5])])
        }),
        ("mean_pool", |r| op(&|t, v| t.mean_pool(v[0], 3), &[randn(r, &[6, 4])])),
        ("concat_cols", |r| op(&|t, v| t.concat_cols(&[v[0], v[1]]), &[randn(r, &[3, 2]), randn(r, &[3, 4])])),
        ("concat_rows", |r| op(&|t, v| t.concat_rows(&[v[0], v[1]]), &[randn(r, &[2, 3]), randn(r, &[4, 3])])),
        ("slice_cols", |r| op(&|t, v| t.slice_cols(v[0], 1, 3), &[randn(r, &[3, 5])])),
        ("gather_rows", |r| {
            let idx: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
            op(&move |t, v| t.gather_rows(v[0], &idx), &[randn(r, &[4, 3])])
        }),
        ("reshape", |r| op(&|t, v| t.reshape(v[0], &[2, 6]), &[randn(r, &[3, 4])])),
        ("sum", |r| op(&|t, v| t.sum(v[0]), &[randn(r, &[3, 4])])),
        ("mean", |r| op(&|t, v| t.mean(v[0]), &[randn(r, &[3, 4])])),
        ("mse", |r| op(&|t, v| t.mse(v[0], v[1]), &[randn(r, &[3, 4]), randn(r, &[3, 4])])),
        ("cross_entropy_probs", |r| {
            let target = randn(r, &[3, 5]).map(f64::exp);
            let target = target.zip_map(&row_sums(&target), |a, s| a / s);
            op(
                &move |t, v| {
                    let p = t.softmax(v[0])?;
                    t.cross_entropy_probs(p, &target)
                },
                &[randn(r, &[3, 5])],
            )
        }),
        ("cross_entropy_logits", |r| {
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            op(&move |t, v| t.cross_entropy_logits(v[0], &labels), &[randn(r, &[4, 5])])
        }),
        ("cosine_rows", |r| op(&|t, v| t.cosine_rows(v[0], v[1]), &[randn(r, &[3, 4]), randn(r, &[3, 4])])),
        ("attention", |r| {
            op(
                &|t, v| t.attention(v[0], v[1], v[2], 2, 3, 4),
                &[randn(r, &[6, 4]), randn(r, &[8, 4]), randn(r, &[8, 4])],
            )
        }),
    ]
}

/// Per-row sums broadcast back to the input shape.
fn row_sums(x: &Tensor<f64>) -> Tensor<f64> {
    let (rows, cols) = (x.rows(), x.cols());
    let sums: Vec<f64> = (0..rows).map(|i| x.data()[i * cols..(i + 1) * cols].iter().sum()).collect();
    Tensor::from_fn([rows, cols], |k| sums[k / cols])
}

/// Perturb freshly initialised affine parameters so gains are not all one
/// and biases not all zero.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for n in names {
        let v = store.get(&n).expect("listed").clone();
        let noise = Tensor::randn(v.shape().to_vec(), 0.3, rng);
        store.set(&n, v.zip_map(&noise, |a, b| a + b))?;
    }
    Ok(())
}

fn component_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("linear", |r| {
            let mut s = ParamStore::new();
            let m = Linear::new(&mut s, r, "m", 4, 3, true)?;
            jitter(&mut s, r)?;
            check_model(&|t, s, v| m.forward(t, s, v[0]), &s, &[randn(r, &[2, 4])], DEFAULT_STEP)
        }),
        ("layer_norm_module", |r| {
            let mut s = ParamStore::new();
            let m = LayerNorm::new(&mut s, "m", 5)?;
            jitter(&mut s, r)?;
            check_model(&|t, s, v| m.forward(t, s, v[0]), &s, &[randn(r, &[3, 5])], DEFAULT_STEP)
        }),
        ("feed_forward", |r| {
            let mut s = ParamStore::new();
            let m = FeedForward::new(&mut s, r, "m", 4, 6)?;
            check_model(&|t, s, v| m.forward(t, s, v[0]), &s, &[randn(r, &[3, 4])], DEFAULT_STEP)
        }),
        ("multi_head_attention", |r| {
            let mut s = ParamStore::new();
            let m = MultiHeadAttention::new(&mut s, r, "m", 4, 2)?;
            check_model(
                &|t, s, v| m.forward(t, s, v[0], v[1], 3, 2),
                &s,
                &[randn(r, &[6, 4]), randn(r, &[4, 4])],
                DEFAULT_STEP,
            )
        }),
        ("transformer_block", |r| {
            let mut s = ParamStore::new();
            let m = TransformerBlock::new(&mut s, r, "m", 4, 2, 6)?;
            jitter(&mut s, r)?;
            check_model(&|t, s, v| m.forward(t, s, v[0], 3), &s, &[randn(r, &[6, 4])], DEFAULT_STEP)
        }),
        ("cross_attention_block", |r| {
            let mut s = ParamStore::new();
            let m = CrossAttentionBlock::new(&mut s, r, "m", 4, 2, 6)?;
            jitter(&mut s, r)?;
            check_model(
                &|t, s, v| m.forward(t, s, v[0], v[1], 2, 3),
                &s,
                &[randn(r, &[4, 4]), randn(r, &[6, 4])],
                DEFAULT_STEP,
            )
        }),
        ("lstm", |r| {
            let mut s = ParamStore::new();
            let m = LstmCell::new(&mut s, r, "m", 2, 3)?;
            let xs: Vec<Tensor<f64>> = (0..4).map(|_| randn(r, &[2, 2])).collect();
            check_model(&|t, s, v| m.run(t, s, v), &s, &xs, DEFAULT_STEP)
        }),
        ("residual_block", |r| {
            let mut s = ParamStore::new();
            let m = ResidualBlock::new(&mut s, r, "m", 4)?;
            check_model(&|t, s, v| m.forward(t, s, v[0]), &s, &[randn(r, &[3, 4])], DEFAULT_STEP)
        }),
        ("time_encoder", |r| {
            let cfg = tiny_lmm();
            let mut s = ParamStore::new();
            let m = TimeEncoder::new(&mut s, r, "time", &cfg)?;
            jitter(&mut s, r)?;
            let pos = vec![0, 2, 3, 1, 0, 2];
            check_model(
                &|t, s, v| m.encode(t, s, v[0], &pos, 3),
                &s,
                &[randn(r, &[6, cfg.unit_dim])],
                DEFAULT_STEP,
            )
        }),
        ("predictor_and_masked_loss", |r| {
            let cfg = tiny_lmm();
            let mut s = ParamStore::new();
            let m = Predictor::new(&mut s, r, &cfg)?;
            jitter(&mut s, r)?;
            let masked = vec![1, 3, 0, 2];
            let codes: Vec<usize> = (0..4).map(|_| r.random_range(0..cfg.n_t)).collect();
            let l_m: Tensor<f64> = one_hot(&codes, cfg.n_t);
            check_model(
                &|t, s, v| {
                    let (f_mp, p_m) = m.forward(t, s, v[0], &masked, 2, 2)?;
                    Ok(lmm_loss(t, v[1], f_mp, &l_m, p_m)?.total)
                },
                &s,
                &[randn(r, &[4, cfg.d]), randn(r, &[4, cfg.d])],
                DEFAULT_STEP,
            )
        }),
        ("freq_encoder", |r| {
            let mut s = ParamStore::new();
            let m = FreqEncoder::new(&mut s, r, 2, 3, 4)?;
            let spectra = (0..2)
                .map(|_| {
                    let x: Vec<f32> = (0..2 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
                    fft_magnitude(&x, 2, 8, 100.0)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = spectra.iter().collect();
            check_model(&|t, s, _| m.logits(t, s, &refs), &s, &[], DEFAULT_STEP)
        }),
        ("fused_classifier", |r| {
            let cfg = tiny_lmm();
            let (channels, samples) = (3, 4);
            let mut s = ParamStore::new();
            let m = TfeModel::new(&mut s, r, &cfg, channels, 3, 4, Branches::BOTH)?;
            jitter(&mut s, r)?;
            s.set_trainable("freq.head.", false);
            let batch = (0..2)
                .map(|i| {
                    let x: Vec<f32> = (0..channels * samples).map(|_| r.random_range(-1.0..1.0)).collect();
                    Ok(TfeSample {
                        units: Tensor::from_fn([cfg.n_units, cfg.unit_dim], |k| x[k]),
                        spectrum: fft_magnitude(&x, channels, samples, 100.0)?,
                        label: i,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = batch.iter().collect();
            check_model(
                &|t, s, _| {
                    let logits = m.logits(t, s, &refs)?;
                    t.cross_entropy_logits(logits, &[0, 3])
                },
                &s,
                &[],
                DEFAULT_STEP,
            )
        }),
        ("alignment_and_si_loss", |r| {
            let mut s = ParamStore::new();
            let m = AlignmentNet::new(&mut s, r, 5, 4, 1)?;
            let lambda = r.random_range(0.0..2.0);
            check_model(
                &move |t, s, v| {
                    let c = m.forward(t, s, v[0])?;
                    si_loss(t, c, v[1], v[2], lambda)
                },
                &s,
                &[randn(r, &[3, 5]), randn(r, &[3, 4]), randn(r, &[3, 4])],
                DEFAULT_STEP,
            )
        }),
        ("denoiser", |r| {
            let cfg = DenoiserConfig {
                shape: [1, 2, 2],
                hidden: 6,
                time_dim: 4,
                res_blocks: 1,
                cond_dim: 3,
                n_classes: 3,
            };
            let mut s = ParamStore::new();
            let m = MlpDenoiser::new(&mut s, r, cfg, 50)?;
            jitter(&mut s, r)?;
            let ts: Vec<usize> = (0..2).map(|_| r.random_range(1..=50)).collect();
            let labels = vec![r.random_range(0..3)];
            check_model(
                &|t, s, v| {
                    let class = m.class_rows(t, s, &labels)?;
                    let cond = t.concat_rows(&[v[1], class])?;
                    let eps = m.forward(t, s, v[0], &ts, cond)?;
                    t.mse(eps, v[2])
                },
                &s,
                &[randn(r, &[2, 4]), randn(r, &[1, 3]), randn(r, &[2, 4])],
                DEFAULT_STEP,
            )
        }),
    ]
}

/// Run every case `probes` times with independent random draws.
pub fn run(probes: usize, tolerance: f64, seed: u64) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for (i, (name, case)) in op_cases().into_iter().chain(component_cases()).enumerate() {
        let mut worst = 0.0f64;
        for p in 0..probes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ p as u64);
            worst = worst.max(case(&mut rng)?);
        }
        log::debug!("gradcheck {name}: worst relative error {worst:.3e}");
        out.push(ProbeResult {
            name,
            probes,
            worst,
            passed: worst < tolerance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_short_sweep() {
        for r in run(2, DEFAULT_TOLERANCE, 11).unwrap() {
            assert!(r.passed, "{} {:.3e}", r.name, r.worst);
        }
    }
}
