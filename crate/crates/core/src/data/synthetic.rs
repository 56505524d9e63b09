use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EegRecord;
use crate::error::{Error, Result};
use crate::par;

pub const N_SUBJECTS: u32 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub freqs_hz: Vec<f64>,
    /// One gain per channel.
    pub channel_gains: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenSpec {
    pub n_classes: usize,
    pub records_per_class: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub signatures: Vec<ClassSignature>,
    pub seed: u64,
}

impl SyntheticGenSpec {
    /// Classes with two bin-centred tones each (distinct tone pairs drawn by
    /// `seed`) and random channel gains in `[0.2, 1]`.
    #[allow(clippy::too_many_arguments)]
    pub fn separable(
        n_classes: usize,
        records_per_class: usize,
        images_per_class: usize,
        channels: usize,
        samples: usize,
        sample_rate: f64,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, &[u64::MAX]));
        // skip DC and Nyquist
        let top = samples.saturating_sub(1) / 2;
        let mut pairs: Vec<(usize, usize)> = (1..=top)
            .flat_map(|a| (a + 1..=top).map(move |b| (a, b)))
            .collect();
        if pairs.len() < n_classes {
            return Err(Error::Config {
                field: "samples",
                msg: format!("{samples} samples give only {} tone pairs for {n_classes} classes", pairs.len()),
            });
        }
        pairs.shuffle(&mut rng);
        let bin_hz = sample_rate / samples as f64;
        let signatures = pairs[..n_classes]
            .iter()
            .map(|&(a, b)| ClassSignature {
                freqs_hz: vec![a as f64 * bin_hz, b as f64 * bin_hz],
                channel_gains: (0..channels).map(|_| rng.random_range(0.2..1.0)).collect(),
            })
            .collect();
        let spec = SyntheticGenSpec {
            n_classes,
            records_per_class,
            images_per_class,
            channels,
            samples,
            sample_rate,
            amplitude: 1.0,
            noise_std,
            signatures,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_records(&self) -> usize {
        self.n_classes * self.records_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |field, msg: String| Err(Error::Config { field, msg });
        if self.n_classes == 0 || self.channels == 0 || self.samples < 2 {
            return cfg("n_classes", "classes, channels and samples must be positive (samples ≥ 2)".into());
        }
        if self.images_per_class == 0 || self.images_per_class > self.records_per_class.max(1) {
            return cfg(
                "images_per_class",
                format!("{} images for {} records per class", self.images_per_class, self.records_per_class),
            );
        }
        if !(self.sample_rate > 0.0) || !(self.noise_std >= 0.0) || !self.amplitude.is_finite() {
            return cfg("sample_rate", "sample rate must be positive and noise non-negative".into());
        }
        if self.signatures.len() != self.n_classes {
            return cfg("signatures", format!("{} signatures for {} classes", self.signatures.len(), self.n_classes));
        }
        for (k, s) in self.signatures.iter().enumerate() {
            if s.channel_gains.len() != self.channels {
                return cfg("signatures", format!("class {k} has {} gains", s.channel_gains.len()));
            }
            if s.freqs_hz.iter().any(|&f| !(f > 0.0 && f < self.sample_rate / 2.0)) {
                return cfg("signatures", format!("class {k} has a frequency outside (0, sample_rate/2)"));
            }
            if self.signatures[..k].iter().any(|o| o == s) {
                return cfg("signatures", format!("class {k} duplicates an earlier signature"));
            }
        }
        Ok(())
    }
}

/// Records are class-major; record `r` of class `k` shows image
/// `k·images_per_class + r mod images_per_class`.
pub fn generate_synthetic(spec: &SyntheticGenSpec) -> Result<Vec<EegRecord>> {
    spec.validate()?;
    let (c, l) = (spec.channels, spec.samples);
    let work = spec.n_records() * c * l;
    let out = par::map_indexed_weighted(spec.n_records(), work, |idx| {
        let k = idx / spec.records_per_class;
        let r = idx % spec.records_per_class;
        let sig = &spec.signatures[k];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64);
        let phases: Vec<f64> = sig.freqs_hz.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let base: Vec<f64> = (0..l)
            .map(|t| {
                let time = t as f64 / spec.sample_rate;
                sig.freqs_hz
                    .iter()
                    .zip(&phases)
                    .map(|(&f, &p)| (2.0 * PI * f * time + p).sin())
                    .sum()
            })
            .collect();
        let mut data = Vec::with_capacity(c * l);
        for &g in &sig.channel_gains {
            for &b in &base {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((spec.amplitude * g * b + spec.noise_std * z) as f32);
            }
        }
        let image = (k * spec.images_per_class + r % spec.images_per_class) as u32;
        EegRecord::new(c, l, data, k as u32, idx as u32 % N_SUBJECTS, image)
    });
    out.into_iter().collect()
}
