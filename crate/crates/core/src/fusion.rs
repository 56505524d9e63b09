//! Time-frequency embedding: mean-pooled time features concatenated with
//! the recurrent frequency state, a linear classifier, and the two-stage
//! fine-tuning schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::freq::{FreqEncoder, FreqSequence};
use crate::lmm::{LmmConfig, TimeEncoder, STUDENT};
use crate::nn::Linear;
use crate::optim::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::train::{accuracy, argmax_rows, epoch_batches, EpochLog, TrainConfig};

pub const HEAD: &str = "tfe.head";

/// Which branches feed the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub time: bool,
    pub freq: bool,
}

impl Branches {
    pub const BOTH: Branches = Branches { time: true, freq: true };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfeStage {
    /// Time branch and head; frequency branch frozen.
    Time,
    /// Both branches and head.
    Joint,
}

impl TfeStage {
    pub fn tag(self) -> &'static str {
        match self {
            TfeStage::Time => "time_ft",
            TfeStage::Joint => "joint_ft",
        }
    }
}

/// One record's inputs to both branches.
#[derive(Clone, Debug)]
pub struct TfeSample {
    pub units: Tensor<f32>,
    pub spectrum: FreqSequence,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TfeModel {
    pub time: Option<TimeEncoder>,
    pub freq: Option<FreqEncoder>,
    pub head: Linear,
    pub n_classes: usize,
}

/// Mean over the unit axis of a stacked `(batch·n)×d` encoder output.
pub fn pool_time<T: Real>(tape: &mut Tape<T>, encoded: Var, n_units: usize) -> Result<Var> {
    tape.mean_pool(encoded, n_units)
}

/// `[time ‖ freq]` row-wise, checking each part's width.
pub fn fuse<T: Real>(tape: &mut Tape<T>, time: Option<(Var, usize)>, freq: Option<(Var, usize)>) -> Result<Var> {
    let mut parts = Vec::new();
    for (v, width) in [time, freq].into_iter().flatten() {
        if tape.value(v).cols() != width {
            return Err(Error::shape("fuse", tape.shape(v), &[tape.value(v).rows(), width]));
        }
        parts.push(v);
    }
    match parts.len() {
        0 => Err(Error::invalid("fuse", "both branches disabled")),
        1 => Ok(parts[0]),
        _ => tape.concat_cols(&parts),
    }
}

impl TfeModel {
    /// Fresh parameters for the enabled branches under the names the
    /// pre-training stages use, so pretrained weights can be copied over.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        lmm: &LmmConfig,
        channels: usize,
        hidden: usize,
        n_classes: usize,
        branches: Branches,
    ) -> Result<Self> {
        if !branches.time && !branches.freq {
            return Err(Error::Config {
                field: "ablate",
                msg: "at least one branch must stay enabled".into(),
            });
        }
        let time = if branches.time {
            Some(TimeEncoder::new(store, rng, STUDENT, lmm)?)
        } else {
            None
        };
        let freq = if branches.freq {
            let f = FreqEncoder::new(store, rng, channels, hidden, n_classes)?;
            // the frequency pre-training head plays no part in the fused model
            store.set_trainable("freq.head.", false);
            Some(f)
        } else {
            None
        };
        let width = lmm.d * branches.time as usize + hidden * branches.freq as usize;
        let head = Linear::new(store, rng, HEAD, width, n_classes, true)?;
        Ok(TfeModel {
            time,
            freq,
            head,
            n_classes,
        })
    }

    pub fn width(&self) -> usize {
        self.time.as_ref().map_or(0, |t| t.d) + self.freq.as_ref().map_or(0, |f| f.hidden)
    }

    pub fn branches(&self) -> Branches {
        Branches {
            time: self.time.is_some(),
            freq: self.freq.is_some(),
        }
    }

    /// Fused embedding, `batch × width`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[&TfeSample]) -> Result<Var> {
        let time = match &self.time {
            Some(enc) => {
                let units: Vec<Tensor<T>> = batch.iter().map(|s| s.units.cast()).collect();
                let full = enc.encode_full(tape, store, &units.iter().collect::<Vec<_>>())?;
                Some((pool_time(tape, full, enc.n_units)?, enc.d))
            }
            None => None,
        };
        let freq = match &self.freq {
            Some(enc) => {
                let spectra: Vec<&FreqSequence> = batch.iter().map(|s| &s.spectrum).collect();
                Some((enc.encode(tape, store, &spectra)?, enc.hidden))
            }
            None => None,
        };
        fuse(tape, time, freq)
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[&TfeSample]) -> Result<Var> {
        let e = self.embed(tape, store, batch)?;
        self.head.forward(tape, store, e)
    }

    /// Class logits (`batch × n_classes`) without recording gradients.
    pub fn classify<T: Real>(&self, store: &ParamStore<T>, batch: &[&TfeSample]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let l = self.logits(&mut tape, store, batch)?;
        Ok(tape.value(l).clone())
    }

    /// Embeddings and logits for many samples, in chunks.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, samples: &[&TfeSample], chunk: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut emb = Vec::new();
        let mut logits = Vec::new();
        for c in samples.chunks(chunk.max(1)) {
            let mut tape = Tape::inference();
            let e = self.embed(&mut tape, store, c)?;
            let l = self.head.forward(&mut tape, store, e)?;
            emb.extend_from_slice(tape.value(e).data());
            logits.extend_from_slice(tape.value(l).data());
        }
        let n = samples.len();
        Ok((
            Tensor::new([n, self.width()], emb)?,
            Tensor::new([n, self.n_classes], logits)?,
        ))
    }

    /// Set trainable flags for one fine-tuning stage. With `head_only` the
    /// encoders stay frozen in both stages.
    pub fn prepare_stage<T: Real>(&self, store: &mut ParamStore<T>, stage: TfeStage, head_only: bool) {
        store.freeze_all();
        store.set_trainable(&format!("{HEAD}."), true);
        if head_only {
            return;
        }
        if self.time.is_some() {
            store.set_trainable(&format!("{STUDENT}."), true);
        }
        if stage == TfeStage::Joint && self.freq.is_some() {
            store.set_trainable("freq.lstm.", true);
        }
    }

    pub fn accuracy<T: Real>(&self, store: &ParamStore<T>, samples: &[&TfeSample], chunk: usize) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let (_, logits) = self.infer(store, samples, chunk)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Ok(accuracy(&argmax_rows(&logits), &labels))
    }
}

/// Cross-entropy training for one stage.
pub fn run_stage(
    model: &TfeModel,
    store: &mut ParamStore<f32>,
    stage: TfeStage,
    head_only: bool,
    train: &[&TfeSample],
    val: &[&TfeSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    model.prepare_stage(store, stage, head_only);
    let adam = cfg.adam();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed ^ stage as u64, epoch);
        let mut total = 0.0;
        for b in &batches {
            let batch: Vec<&TfeSample> = b.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let logits = model.logits(&mut tape, store, &batch)?;
            let loss = tape.cross_entropy_logits(logits, &labels)?;
            total += tape.value(loss).item() as f64;
            let grads = tape.backward(loss)?;
            store.adam_step(&grads.into_named(), &adam)?;
        }
        let train_acc = model.accuracy(store, train, cfg.batch_size)?;
        let val_acc = if val.is_empty() {
            None
        } else {
            Some(model.accuracy(store, val, cfg.batch_size)?)
        };
        logs.push(EpochLog {
            stage: stage.tag().into(),
            epoch,
            loss: total / batches.len().max(1) as f64,
            train_acc: Some(train_acc),
            val_acc,
        });
    }
    Ok(logs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSchedule {
    pub time_epochs: usize,
    pub joint_epochs: usize,
    /// Skip the joint stage entirely.
    pub skip_joint: bool,
    /// Train only the classifier head.
    pub head_only: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Time-only stage followed by the joint stage (unless skipped).
pub fn finetune_tfe(
    model: &TfeModel,
    store: &mut ParamStore<f32>,
    train: &[&TfeSample],
    val: &[&TfeSample],
    schedule: &FinetuneSchedule,
) -> Result<Vec<EpochLog>> {
    let cfg = |epochs| TrainConfig {
        epochs,
        batch_size: schedule.batch_size,
        lr: schedule.lr,
        seed: schedule.seed,
    };
    let mut logs = run_stage(model, store, TfeStage::Time, schedule.head_only, train, val, &cfg(schedule.time_epochs))?;
    if !schedule.skip_joint {
        logs.extend(run_stage(model, store, TfeStage::Joint, schedule.head_only, train, val, &cfg(schedule.joint_epochs))?);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_and_fusion_by_hand() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap());
        let p = pool_time(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0]);
        let f = tape.constant(Tensor::zeros([1, 3]));
        let e = fuse(&mut tape, Some((p, 2)), Some((f, 3))).unwrap();
        assert_eq!(tape.value(e).data(), &[2.0, 4.0, 0.0, 0.0, 0.0]);
        assert!(fuse(&mut tape, Some((p, 3)), None).is_err());
        assert!(fuse::<f64>(&mut tape, None, None).is_err());
    }
}
