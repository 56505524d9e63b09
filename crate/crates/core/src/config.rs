//! Pipeline configuration. Every field must be present in a config file;
//! `PipelineConfig::default()` carries the full-scale values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::read_file;
use crate::diffusion::{CascadeConfig, CascadeMode, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fusion::Branches;
use crate::lmm::LmmConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoTime,
    NoFreq,
    NoPretrain,
    NoFinetune,
    NoRefine,
    NoSemantic,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoTime,
        Ablation::NoFreq,
        Ablation::NoPretrain,
        Ablation::NoFinetune,
        Ablation::NoRefine,
        Ablation::NoSemantic,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::NoTime => "no-time",
            Ablation::NoFreq => "no-freq",
            Ablation::NoPretrain => "no-pretrain",
            Ablation::NoFinetune => "no-finetune",
            Ablation::NoRefine => "no-refine",
            Ablation::NoSemantic => "no-semantic",
        }
    }

    /// The component this mode switches off.
    pub fn disabled(self) -> &'static str {
        match self {
            Ablation::NoTime => "time_branch",
            Ablation::NoFreq => "freq_branch",
            Ablation::NoPretrain => "pretraining",
            Ablation::NoFinetune => "encoder_finetuning",
            Ablation::NoRefine => "refinement_stage",
            Ablation::NoSemantic => "semantic_stage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.tag() == s).ok_or_else(|| Error::Config {
            field: "ablate",
            msg: format!("unknown mode `{s}`"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_classes: usize,
    pub records_per_class: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: f64,
    pub noise_std: f64,
    pub split: [u32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_units: usize,
    pub d: usize,
    pub mask_ratio: f64,
    pub n_t: usize,
    pub heads: usize,
    pub ffn: usize,
    pub sa_blocks: usize,
    pub ca_blocks: usize,
    pub tau: f64,
    pub lstm_hidden: usize,
    pub e: usize,
    pub align_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    pub lmm: usize,
    pub freq: usize,
    pub time_ft: usize,
    pub joint_ft: usize,
    pub align: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: Epochs,
    /// Optional cap on LMM optimizer steps.
    pub lmm_max_steps: Option<u64>,
    pub align_lambda: f64,
    pub align_unfreeze_tfe: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassCondition {
    /// Trainable `n_classes × e` table.
    Learned,
    /// Frozen table of the fixture label embeddings.
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub rho: f64,
    pub clip_x0: bool,
    pub shape: [usize; 3],
    pub hidden: usize,
    pub time_dim: usize,
    pub res_blocks: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub class_condition: ClassCondition,
    pub samples_per_record: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSection {
    pub caption_offset: f64,
    pub orthogonal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ga_n_way: usize,
    pub ga_k: usize,
    pub ga_trials: usize,
    pub is_splits: usize,
    pub surrogate_hidden: usize,
    pub surrogate_epochs: usize,
    pub surrogate_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub seed: u64,
    pub ablation: Option<Ablation>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub fixtures: FixtureSection,
    pub diffusion: DiffusionSection,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            name: "default".into(),
            seed: 0,
            ablation: None,
            data: DataConfig {
                n_classes: 40,
                records_per_class: 50,
                images_per_class: 50,
                channels: 128,
                samples: 440,
                sample_rate: 1000.0,
                noise_std: 0.1,
                split: [8, 1, 1],
            },
            model: ModelConfig {
                n_units: 110,
                d: 1024,
                mask_ratio: 0.75,
                n_t: 660,
                heads: 16,
                ffn: 4096,
                sa_blocks: 8,
                ca_blocks: 4,
                tau: 0.99,
                lstm_hidden: 128,
                e: 768,
                align_blocks: 2,
            },
            training: TrainingConfig {
                lr: 1e-3,
                batch_size: 128,
                epochs: Epochs {
                    lmm: 300,
                    freq: 900,
                    time_ft: 80,
                    joint_ft: 30,
                    align: 200,
                },
                lmm_max_steps: None,
                align_lambda: 1.0,
                align_unfreeze_tfe: false,
            },
            fixtures: FixtureSection {
                caption_offset: 0.5,
                orthogonal: true,
            },
            diffusion: DiffusionSection {
                steps: 100,
                rho: 0.3,
                clip_x0: true,
                shape: [3, 16, 16],
                hidden: 1024,
                time_dim: 64,
                res_blocks: 2,
                train_steps: 5000,
                batch_size: 64,
                lr: 1e-3,
                class_condition: ClassCondition::Learned,
                samples_per_record: 4,
            },
            eval: EvalConfig {
                ga_n_way: 50,
                ga_k: 1,
                ga_trials: 20,
                is_splits: 10,
                surrogate_hidden: 64,
                surrogate_epochs: 30,
                surrogate_noise: 0.1,
            },
        }
    }
}

fn bad(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Config { field, msg: msg.into() }
}

fn positive(field: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(bad(field, "must be positive"));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_slice(&read_file(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m, t, df, ev) = (&self.data, &self.model, &self.training, &self.diffusion, &self.eval);
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(bad("name", "must be a non-empty path component"));
        }
        positive("data.n_classes", d.n_classes)?;
        positive("data.records_per_class", d.records_per_class)?;
        positive("data.images_per_class", d.images_per_class)?;
        if d.images_per_class > d.records_per_class {
            return Err(bad("data.images_per_class", "cannot exceed records_per_class"));
        }
        positive("data.channels", d.channels)?;
        if !(d.sample_rate > 0.0) {
            return Err(bad("data.sample_rate", "must be positive"));
        }
        if !(d.noise_std >= 0.0) {
            return Err(bad("data.noise_std", "must be non-negative"));
        }
        if d.split[0] == 0 || d.split[1] == 0 || d.split[2] == 0 {
            return Err(bad("data.split", "all three parts must be positive"));
        }
        if d.n_classes * d.images_per_class < 10 {
            return Err(bad("data.images_per_class", "need at least 10 distinct images to split"));
        }
        positive("model.n_units", m.n_units)?;
        if d.samples % m.n_units != 0 {
            return Err(bad("model.n_units", format!("{} samples are not divisible into {} units", d.samples, m.n_units)));
        }
        positive("model.heads", m.heads)?;
        if m.d == 0 || m.d % m.heads != 0 {
            return Err(bad("model.d", format!("{} is not a positive multiple of {} heads", m.d, m.heads)));
        }
        let masked = (m.n_units as f64 * m.mask_ratio).floor() as usize;
        if !(m.mask_ratio > 0.0 && m.mask_ratio < 1.0) || masked == 0 || masked >= m.n_units {
            return Err(bad("model.mask_ratio", format!("masks {masked} of {} units", m.n_units)));
        }
        if m.n_t < 2 {
            return Err(bad("model.n_t", "need at least two codes"));
        }
        positive("model.ffn", m.ffn)?;
        positive("model.sa_blocks", m.sa_blocks)?;
        positive("model.ca_blocks", m.ca_blocks)?;
        if !(m.tau > 0.0 && m.tau < 1.0) {
            return Err(bad("model.tau", "must lie in (0, 1)"));
        }
        positive("model.lstm_hidden", m.lstm_hidden)?;
        positive("model.e", m.e)?;
        if self.fixtures.orthogonal && d.n_classes > m.e {
            return Err(bad("fixtures.orthogonal", format!("{} classes do not fit {} dimensions", d.n_classes, m.e)));
        }
        if !(self.fixtures.caption_offset >= 0.0) {
            return Err(bad("fixtures.caption_offset", "must be non-negative"));
        }
        if !(t.lr > 0.0) {
            return Err(bad("training.lr", "must be positive"));
        }
        positive("training.batch_size", t.batch_size)?;
        positive("training.epochs.lmm", t.epochs.lmm)?;
        positive("training.epochs.freq", t.epochs.freq)?;
        positive("training.epochs.time_ft", t.epochs.time_ft)?;
        positive("training.epochs.align", t.epochs.align)?;
        if t.lmm_max_steps == Some(0) {
            return Err(bad("training.lmm_max_steps", "must be positive when set"));
        }
        if !(t.align_lambda >= 0.0) {
            return Err(bad("training.align_lambda", "must be non-negative"));
        }
        NoiseSchedule::scaled(df.steps).map_err(|e| bad("diffusion.steps", e.to_string()))?;
        self.cascade().switch_step(df.steps).map_err(|e| bad("diffusion.rho", e.to_string()))?;
        if df.shape[0] != 3 || df.shape[1] == 0 || df.shape[2] == 0 {
            return Err(bad("diffusion.shape", "must be 3×H×W"));
        }
        let latent: usize = df.shape.iter().product();
        if df.hidden < latent {
            return Err(bad("diffusion.hidden", format!("{} is narrower than the {latent}-value latent", df.hidden)));
        }
        if df.time_dim < 2 || df.time_dim % 2 != 0 {
            return Err(bad("diffusion.time_dim", "must be even and at least 2"));
        }
        positive("diffusion.train_steps", df.train_steps)?;
        if df.batch_size < 2 {
            return Err(bad("diffusion.batch_size", "must be at least 2"));
        }
        if !(df.lr > 0.0) {
            return Err(bad("diffusion.lr", "must be positive"));
        }
        positive("diffusion.samples_per_record", df.samples_per_record)?;
        if ev.ga_n_way < 2 || ev.ga_k == 0 || ev.ga_k >= ev.ga_n_way {
            return Err(bad("eval.ga_n_way", format!("need 1 ≤ K < N, got K={} N={}", ev.ga_k, ev.ga_n_way)));
        }
        if d.n_classes < 2 {
            return Err(bad("data.n_classes", "generation accuracy needs at least 2 classes"));
        }
        positive("eval.ga_trials", ev.ga_trials)?;
        positive("eval.is_splits", ev.is_splits)?;
        positive("eval.surrogate_hidden", ev.surrogate_hidden)?;
        positive("eval.surrogate_epochs", ev.surrogate_epochs)?;
        Ok(())
    }

    pub fn lmm(&self) -> LmmConfig {
        let m = &self.model;
        LmmConfig {
            n_units: m.n_units,
            unit_dim: self.data.channels * self.data.samples / m.n_units,
            d: m.d,
            heads: m.heads,
            ffn: m.ffn,
            sa_blocks: m.sa_blocks,
            ca_blocks: m.ca_blocks,
            n_t: m.n_t,
            mask_ratio: m.mask_ratio,
            tau: m.tau,
        }
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            rho: self.diffusion.rho,
            clip_x0: self.diffusion.clip_x0,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let df = &self.diffusion;
        DenoiserConfig {
            shape: df.shape,
            hidden: df.hidden,
            time_dim: df.time_dim,
            res_blocks: df.res_blocks,
            cond_dim: self.model.e,
            n_classes: self.data.n_classes,
        }
    }

    pub fn branches(&self) -> Branches {
        match self.ablation {
            Some(Ablation::NoTime) => Branches { time: false, freq: true },
            Some(Ablation::NoFreq) => Branches { time: true, freq: false },
            _ => Branches::BOTH,
        }
    }

    pub fn pretrain(&self) -> bool {
        self.ablation != Some(Ablation::NoPretrain)
    }

    pub fn cascade_mode(&self) -> CascadeMode {
        match self.ablation {
            Some(Ablation::NoRefine) => CascadeMode::EmbeddingOnly,
            Some(Ablation::NoSemantic) => CascadeMode::ClassOnly,
            _ => CascadeMode::Cascade,
        }
    }

    /// Config snapshot plus the ablation summary, as echoed in reports.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "pipeline": self,
            "ablation": self.ablation.map(Ablation::tag),
            "disabled": self.ablation.map(Ablation::disabled),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lmm().unit_dim, 512);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&s).unwrap(), c);
    }

    #[test]
    fn violations_name_the_field() {
        let mut c = PipelineConfig::default();
        c.model.n_units = 100;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.n_units"),
            other => panic!("{other:?}"),
        }
        let mut c = PipelineConfig::default();
        c.diffusion.rho = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config { field: "diffusion.rho", .. })));
    }

    #[test]
    fn missing_fields_are_rejected() {
        let mut v = serde_json::to_value(PipelineConfig::default()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        assert!(serde_json::from_value::<PipelineConfig>(v).is_err());
    }
}
