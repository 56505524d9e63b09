//! Frequency branch: per-channel FFT magnitudes read as a sequence over
//! bins, a gated recurrent encoder, and label-supervised training.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::EegRecord;
use crate::error::{Error, Result};
use crate::fft::FftPlan;
use crate::nn::{Linear, LstmCell};
use crate::optim::ParamStore;
use crate::par;
use crate::tensor::{Real, Tensor};
use crate::train::{accuracy, argmax_rows, epoch_batches, EpochLog, TrainConfig};

/// Magnitude spectrum laid out `n_bins × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqSequence {
    pub n_bins: usize,
    pub channels: usize,
    pub bin_resolution: f64,
    pub mags: Vec<f64>,
}

impl FreqSequence {
    pub fn at(&self, bin: usize, channel: usize) -> f64 {
        self.mags[bin * self.channels + channel]
    }
}

/// `|DFT|` of each channel over bins `0..=l/2`.
pub fn fft_magnitude(x: &[f32], channels: usize, samples: usize, sample_rate: f64) -> Result<FreqSequence> {
    if samples < 2 {
        return Err(Error::invalid("fft_magnitude", "need at least 2 samples"));
    }
    if x.len() != channels * samples {
        return Err(Error::shape("fft_magnitude", &[x.len()], &[channels, samples]));
    }
    let plan = FftPlan::new(samples);
    let n_bins = samples / 2 + 1;
    let mut mags = vec![0.0; n_bins * channels];
    let mut buf = vec![num_complex::Complex64::new(0.0, 0.0); samples];
    for c in 0..channels {
        for (b, &v) in buf.iter_mut().zip(&x[c * samples..(c + 1) * samples]) {
            *b = num_complex::Complex64::new(v as f64, 0.0);
        }
        plan.forward(&mut buf);
        for k in 0..n_bins {
            mags[k * channels + c] = buf[k].norm();
        }
    }
    Ok(FreqSequence {
        n_bins,
        channels,
        bin_resolution: sample_rate / samples as f64,
        mags,
    })
}

pub fn record_spectra(records: &[&EegRecord], sample_rate: f64) -> Result<Vec<FreqSequence>> {
    let work = records.iter().map(|r| r.data.len() * 16).sum();
    par::map_indexed_weighted(records.len(), work, |i| {
        let r = records[i];
        fft_magnitude(&r.data, r.channels, r.samples, sample_rate)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug)]
pub struct FreqEncoder {
    pub lstm: LstmCell,
    pub head: Linear,
    pub channels: usize,
    pub hidden: usize,
}

impl FreqEncoder {
    pub const PREFIX: &'static str = "freq";

    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        channels: usize,
        hidden: usize,
        n_classes: usize,
    ) -> Result<Self> {
        Ok(FreqEncoder {
            lstm: LstmCell::new(store, rng, "freq.lstm", channels, hidden)?,
            head: Linear::new(store, rng, "freq.head", hidden, n_classes, true)?,
            channels,
            hidden,
        })
    }

    /// Final hidden state for a batch of spectra, `batch × hidden`.
    ///
    /// Magnitudes are scaled by `1/√l` (the unitary DFT convention) so
    /// inputs stay O(1) whatever the record length.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[&FreqSequence]) -> Result<Var> {
        let first = batch.first().ok_or_else(|| Error::invalid("freq encode", "empty batch"))?;
        for s in batch {
            if s.channels != self.channels || s.n_bins != first.n_bins {
                return Err(Error::shape("freq encode", &[s.n_bins, s.channels], &[first.n_bins, self.channels]));
            }
        }
        let samples = 2 * (first.n_bins - 1);
        let scale = 1.0 / (samples.max(1) as f64).sqrt();
        let c = self.channels;
        let steps: Vec<Var> = (0..first.n_bins)
            .map(|k| {
                let t = Tensor::from_fn([batch.len(), c], |i| T::of(batch[i / c].at(k, i % c) * scale));
                tape.constant(t)
            })
            .collect();
        self.lstm.run(tape, store, &steps)
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[&FreqSequence]) -> Result<Var> {
        let h = self.encode(tape, store, batch)?;
        self.head.forward(tape, store, h)
    }

    pub fn predict<T: Real>(&self, store: &ParamStore<T>, seqs: &[&FreqSequence], batch: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch.max(1)) {
            let mut tape = Tape::inference();
            let l = self.logits(&mut tape, store, chunk)?;
            out.extend(argmax_rows(tape.value(l)));
        }
        Ok(out)
    }
}

/// Cross-entropy training of the recurrent encoder plus its linear head.
/// Returns one log entry per epoch with train and validation accuracy.
pub fn freq_classify_train(
    enc: &FreqEncoder,
    store: &mut ParamStore<f32>,
    train: (&[&FreqSequence], &[usize]),
    val: (&[&FreqSequence], &[usize]),
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let (xs, ys) = train;
    let adam = cfg.adam();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(xs.len(), cfg.batch_size, cfg.seed, epoch);
        for b in &batches {
            let bx: Vec<&FreqSequence> = b.iter().map(|&i| xs[i]).collect();
            let by: Vec<usize> = b.iter().map(|&i| ys[i]).collect();
            let mut tape = Tape::new();
            let logits = enc.logits(&mut tape, store, &bx)?;
            let loss = tape.cross_entropy_logits(logits, &by)?;
            total += tape.value(loss).item() as f64;
            let grads = tape.backward(loss)?;
            store.adam_step(&grads.into_named(), &adam)?;
        }
        let train_acc = accuracy(&enc.predict(store, xs, cfg.batch_size)?, ys);
        let val_acc = if val.0.is_empty() {
            None
        } else {
            Some(accuracy(&enc.predict(store, val.0, cfg.batch_size)?, val.1))
        };
        let loss = total / batches.len().max(1) as f64;
        log::debug!("freq epoch {epoch}: loss {loss:.4} train {train_acc:.3}");
        logs.push(EpochLog {
            stage: "freq".into(),
            epoch,
            loss,
            train_acc: Some(train_acc),
            val_acc,
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck;

    #[test]
    fn constant_signal_is_pure_dc() {
        let l = 440;
        let s = fft_magnitude(&vec![1.5; l], 1, l, 1000.0).unwrap();
        assert_eq!(s.n_bins, 221);
        assert!((s.at(0, 0) - 1.5 * l as f64).abs() < 1e-6);
        assert!((1..s.n_bins).all(|k| s.at(k, 0).abs() < 1e-6));
    }

    #[test]
    fn integer_tone_lands_in_its_bin() {
        let (l, k0) = (440, 37);
        let x: Vec<f32> = (0..l).map(|t| (2.0 * PI * (k0 * t) as f64 / l as f64).sin() as f32).collect();
        let s = fft_magnitude(&x, 1, l, 1000.0).unwrap();
        // f32 input rounding limits the floor to ~1e-5 per bin
        assert!((s.at(k0, 0) - l as f64 / 2.0).abs() < 1e-3);
        assert!((0..s.n_bins).filter(|&k| k != k0).all(|k| s.at(k, 0) < 1e-3));
    }

    #[test]
    fn zero_weights_give_zero_hidden_state() {
        let mut store = ParamStore::<f64>::new();
        let enc = FreqEncoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 3, 5, 2).unwrap();
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(shape)).unwrap();
        }
        let x: Vec<f32> = (0..3 * 8).map(|i| (i as f32).sin()).collect();
        let s = fft_magnitude(&x, 3, 8, 100.0).unwrap();
        let mut tape = Tape::inference();
        let h = enc.encode(&mut tape, &store, &[&s]).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_gradient_on_three_steps() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell = LstmCell::new(&mut store, &mut rng, "cell", 2, 3).unwrap();
        let xs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn([2, 2], 1.0, &mut rng)).collect();
        let err = gradcheck::check_model(
            &|tape, s, v| cell.run(tape, s, v),
            &store,
            &xs,
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
