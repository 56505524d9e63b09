//! Stage commands over a run directory.
//!
//! Each command writes `<run>/<stage>/` with a `config.json` snapshot, a
//! `metrics.jsonl` log and, for training stages, `checkpoint.bvc` plus its
//! JSON sidecar. A command loads the checkpoints it depends on and fails
//! with the missing stage's name if they are absent.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, generate_fixtures, load_fixtures, save_fixtures, stack_targets, AlignmentNet, FixtureGenSpec, FixtureSet};
use crate::checkpoint::{load_stage, save_checkpoint, CheckpointArchive, Stage};
use crate::codec::{read_file, write_file};
use crate::config::{Ablation, ClassCondition, PipelineConfig};
use crate::data::{generate_synthetic, load_dataset, save_dataset, split_by_image, units_matrix, Dataset, DatasetHeader, DatasetSplit, SyntheticGenSpec};
use crate::diffusion::{self, generate, synthetic_image, Condition, DenoiserTrainConfig, DiffusionExample, MlpDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::freq::{fft_magnitude, freq_classify_train, FreqEncoder, FreqSequence};
use crate::fusion::{run_stage, TfeModel, TfeSample, TfeStage};
use crate::lmm::{train_lmm, LmmModel};
use crate::metrics::{evaluate_generation, GaConfig, MetricsReport, SsimConfig, Surrogate};
use crate::optim::ParamStore;
use crate::par::{self, derive_seed};
use crate::tensor::Tensor;
use crate::train::{argmax_rows, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    TrainLmm,
    TrainFreq,
    FinetuneTfe,
    TrainAlign,
    TrainDiffusion,
    Generate,
    Evaluate,
}

impl Command {
    pub const CHAIN: [Command; 8] = [
        Command::GenData,
        Command::TrainLmm,
        Command::TrainFreq,
        Command::FinetuneTfe,
        Command::TrainAlign,
        Command::TrainDiffusion,
        Command::Generate,
        Command::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainLmm => "train-lmm",
            Command::TrainFreq => "train-freq",
            Command::FinetuneTfe => "finetune-tfe",
            Command::TrainAlign => "train-align",
            Command::TrainDiffusion => "train-diffusion",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
        }
    }

    /// Directory under the run root.
    pub fn dir(self) -> &'static str {
        match self {
            Command::GenData => "data",
            Command::TrainLmm => "lmm",
            Command::TrainFreq => "freq",
            Command::FinetuneTfe => "tfe",
            Command::TrainAlign => "align",
            Command::TrainDiffusion => "diffusion",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
        }
    }
}

pub const CHECKPOINT: &str = "checkpoint.bvc";

/// Seed-path roots, one per consumer.
mod seeds {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const FIXTURES: u64 = 3;
    pub const IMAGES: u64 = 4;
    pub const LMM: u64 = 5;
    pub const FREQ: u64 = 6;
    pub const TFE: u64 = 7;
    pub const ALIGN: u64 = 8;
    pub const DIFFUSION: u64 = 9;
    pub const GENERATE: u64 = 10;
    pub const SURROGATE: u64 = 11;
    pub const GA: u64 = 12;
}

/// JSON-lines log writer.
struct Log(BufWriter<File>, PathBuf);

impl Log {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Log(BufWriter::new(f), path))
    }

    fn line<S: Serialize>(&mut self, v: &S) -> Result<()> {
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n").map_err(|e| Error::io(&self.1, e))
    }

    fn lines<S: Serialize>(&mut self, vs: &[S]) -> Result<()> {
        vs.iter().try_for_each(|v| self.line(v))
    }

    fn close(mut self) -> Result<()> {
        self.0.flush().map_err(|e| Error::io(&self.1, e))
    }
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    write_file(path, &serde_json::to_vec_pretty(v)?)
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

struct DataBundle {
    ds: Dataset,
    split: DatasetSplit,
    fixtures: FixtureSet,
}

/// Model structures rebuilt from the config. Parameter values come from
/// whichever checkpoint is loaded alongside.
struct Models {
    tfe: TfeModel,
    align: AlignmentNet,
    denoiser: MlpDenoiser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub record_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    pub logits: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Run {
    pub root: PathBuf,
    pub cfg: PipelineConfig,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Run { root: root.into(), cfg })
    }

    pub fn dir(&self, c: Command) -> PathBuf {
        self.root.join(c.dir())
    }

    pub fn checkpoint(&self, c: Command) -> PathBuf {
        self.dir(c).join(CHECKPOINT)
    }

    fn seed(&self, path: &[u64]) -> u64 {
        derive_seed(self.cfg.seed, path)
    }

    fn rng(&self, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(path))
    }

    fn begin(&self, c: Command) -> Result<(PathBuf, Log)> {
        let dir = self.dir(c);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("config.json"), &self.cfg.echo())?;
        let log = Log::create(dir.join("metrics.jsonl"))?;
        Ok((dir, log))
    }

    fn train_cfg(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.cfg.training.batch_size,
            lr: self.cfg.training.lr,
            seed: self.seed(&[seed]),
        }
    }

    /// Whether the command does any work under the current ablation.
    pub fn enabled(&self, c: Command) -> bool {
        let b = self.cfg.branches();
        match c {
            Command::TrainLmm => b.time && self.cfg.pretrain(),
            Command::TrainFreq => b.freq && self.cfg.pretrain(),
            _ => true,
        }
    }

    pub fn run(&self, c: Command) -> Result<()> {
        if !self.enabled(c) {
            log::info!("{}: disabled by --ablate {}", c.name(), self.cfg.ablation.map_or("", Ablation::tag));
            return Ok(());
        }
        log::info!("{}: start", c.name());
        match c {
            Command::GenData => self.gen_data(),
            Command::TrainLmm => self.train_lmm(),
            Command::TrainFreq => self.train_freq(),
            Command::FinetuneTfe => self.finetune_tfe(),
            Command::TrainAlign => self.train_align(),
            Command::TrainDiffusion => self.train_diffusion(),
            Command::Generate => self.generate(),
            Command::Evaluate => self.evaluate().map(|_| ()),
        }
    }

    /// Every stage in order; returns the final report.
    pub fn run_all(&self) -> Result<MetricsReport> {
        for c in Command::CHAIN {
            self.run(c)?;
        }
        read_json(&self.dir(Command::Evaluate).join("metrics.json"))
    }

    fn gen_data(&self) -> Result<()> {
        let d = &self.cfg.data;
        let (dir, mut log) = self.begin(Command::GenData)?;
        let spec = SyntheticGenSpec::separable(
            d.n_classes,
            d.records_per_class,
            d.images_per_class,
            d.channels,
            d.samples,
            d.sample_rate,
            d.noise_std,
            self.seed(&[seeds::DATA]),
        )?;
        let records = generate_synthetic(&spec)?;
        let split = split_by_image(&records, (d.split[0], d.split[1], d.split[2]), self.seed(&[seeds::SPLIT]))?;
        let pairs: BTreeSet<(u32, u32)> = records.iter().map(|r| (r.class_label, r.image_id)).collect();
        let header = DatasetHeader {
            channels: d.channels,
            samples: d.samples,
            n_classes: d.n_classes,
            normalized: false,
        };
        let ds = Dataset::new(header, records)?;
        save_dataset(&dir.join("dataset.bvd"), &ds)?;
        write_json(&dir.join("split.json"), &split)?;
        let (fixtures, sidecar) = generate_fixtures(
            &FixtureGenSpec {
                n_classes: d.n_classes,
                e: self.cfg.model.e,
                caption_offset: self.cfg.fixtures.caption_offset,
                orthogonal: self.cfg.fixtures.orthogonal,
                seed: self.seed(&[seeds::FIXTURES]),
            },
            pairs,
        )?;
        save_fixtures(&dir.join("fixtures.bve"), &fixtures, Some(&sidecar))?;
        log.line(&serde_json::json!({
            "records": ds.len(),
            "train": split.train.len(),
            "val": split.val.len(),
            "test": split.test.len(),
            "fixtures": fixtures.len(),
        }))?;
        log.close()
    }

    fn load_data(&self) -> Result<DataBundle> {
        let dir = self.dir(Command::GenData);
        let path = dir.join("dataset.bvd");
        if !path.exists() {
            return Err(Error::MissingStage {
                needed: Command::GenData.name().into(),
                path,
            });
        }
        let ds = load_dataset(&path)?.normalized();
        let d = &self.cfg.data;
        if (ds.header.channels, ds.header.samples, ds.header.n_classes) != (d.channels, d.samples, d.n_classes) {
            return Err(Error::Config {
                field: "data",
                msg: format!("dataset at {} does not match the config", path.display()),
            });
        }
        let split = read_json(&dir.join("split.json"))?;
        let fixtures = load_fixtures(&dir.join("fixtures.bve"))?;
        Ok(DataBundle { ds, split, fixtures })
    }

    fn samples(&self, ds: &Dataset) -> Result<Vec<TfeSample>> {
        let (n, sr) = (self.cfg.model.n_units, self.cfg.data.sample_rate);
        par::map_indexed(ds.len(), |i| {
            let r = &ds.records[i];
            Ok(TfeSample {
                units: units_matrix(r, n)?,
                spectrum: fft_magnitude(&r.data, r.channels, r.samples, sr)?,
                label: r.class_label as usize,
            })
        })
        .into_iter()
        .collect()
    }

    fn save(&self, c: Command, stage: Stage, store: &ParamStore<f32>) -> Result<()> {
        let a = CheckpointArchive::from_store(stage, store, self.cfg.echo());
        save_checkpoint(&self.checkpoint(c), &a)
    }

    fn load(&self, c: Command, stage: Stage) -> Result<ParamStore<f32>> {
        load_stage(&self.checkpoint(c), stage)?.to_store()
    }

    fn train_lmm(&self) -> Result<()> {
        let data = self.load_data()?;
        let (_, mut log) = self.begin(Command::TrainLmm)?;
        let n = self.cfg.model.n_units;
        let units = data
            .split
            .train
            .iter()
            .map(|&i| units_matrix(&data.ds.records[i], n))
            .collect::<Result<Vec<_>>>()?;
        let mut store = ParamStore::new();
        let model = LmmModel::new(&mut store, &mut self.rng(&[seeds::LMM]), self.cfg.lmm())?;
        let tc = self.train_cfg(self.cfg.training.epochs.lmm, seeds::LMM);
        let (epochs, steps) = train_lmm(&model, &mut store, &units, &tc, self.cfg.training.lmm_max_steps)?;
        log.lines(&steps)?;
        log.lines(&epochs)?;
        log.close()?;
        self.save(Command::TrainLmm, Stage::Lmm, &store)
    }

    fn train_freq(&self) -> Result<()> {
        let data = self.load_data()?;
        let (_, mut log) = self.begin(Command::TrainFreq)?;
        let sr = self.cfg.data.sample_rate;
        let spectra = |idx: &[usize]| -> Result<(Vec<FreqSequence>, Vec<usize>)> {
            let seqs = idx
                .iter()
                .map(|&i| {
                    let r = &data.ds.records[i];
                    fft_magnitude(&r.data, r.channels, r.samples, sr)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((seqs, idx.iter().map(|&i| data.ds.records[i].class_label as usize).collect()))
        };
        let (tx, ty) = spectra(&data.split.train)?;
        let (vx, vy) = spectra(&data.split.val)?;
        let mut store = ParamStore::new();
        let d = &self.cfg.data;
        let enc = FreqEncoder::new(&mut store, &mut self.rng(&[seeds::FREQ]), d.channels, self.cfg.model.lstm_hidden, d.n_classes)?;
        let tr: Vec<&FreqSequence> = tx.iter().collect();
        let va: Vec<&FreqSequence> = vx.iter().collect();
        let tc = self.train_cfg(self.cfg.training.epochs.freq, seeds::FREQ);
        let logs = freq_classify_train(&enc, &mut store, (&tr, &ty), (&va, &vy), &tc)?;
        log.lines(&logs)?;
        log.close()?;
        self.save(Command::TrainFreq, Stage::Freq, &store)
    }

    fn tfe_model(&self, store: &mut ParamStore<f32>) -> Result<TfeModel> {
        let d = &self.cfg.data;
        TfeModel::new(
            store,
            &mut self.rng(&[seeds::TFE]),
            &self.cfg.lmm(),
            d.channels,
            self.cfg.model.lstm_hidden,
            d.n_classes,
            self.cfg.branches(),
        )
    }

    fn finetune_tfe(&self) -> Result<()> {
        let data = self.load_data()?;
        let samples = self.samples(&data.ds)?;
        let mut store = ParamStore::new();
        let model = self.tfe_model(&mut store)?;
        if self.enabled(Command::TrainLmm) {
            let lmm = self.load(Command::TrainLmm, Stage::Lmm)?;
            store.copy_prefix_from(&lmm, &format!("{}.", crate::lmm::STUDENT))?;
        }
        if self.enabled(Command::TrainFreq) {
            let freq = self.load(Command::TrainFreq, Stage::Freq)?;
            store.copy_prefix_from(&freq, "freq.")?;
        }
        let (dir, mut log) = self.begin(Command::FinetuneTfe)?;
        let pick = |idx: &[usize]| -> Vec<&TfeSample> { idx.iter().map(|&i| &samples[i]).collect() };
        let (train, val, test) = (pick(&data.split.train), pick(&data.split.val), pick(&data.split.test));
        let head_only = self.cfg.ablation == Some(Ablation::NoFinetune);
        let ep = &self.cfg.training.epochs;
        let logs = run_stage(&model, &mut store, TfeStage::Time, head_only, &train, &val, &self.train_cfg(ep.time_ft, seeds::TFE))?;
        log.lines(&logs)?;
        let a = CheckpointArchive::from_store(Stage::TimeFt, &store, self.cfg.echo());
        save_checkpoint(&dir.join("time_ft.bvc"), &a)?;
        if ep.joint_ft > 0 && model.freq.is_some() {
            let cfg = self.train_cfg(ep.joint_ft, seeds::TFE + 100);
            log.lines(&run_stage(&model, &mut store, TfeStage::Joint, head_only, &train, &val, &cfg)?)?;
        }
        let test_acc = model.accuracy(&store, &test, self.cfg.training.batch_size)?;
        log.line(&serde_json::json!({ "stage": "test", "test_acc": test_acc }))?;
        log.close()?;
        self.save(Command::FinetuneTfe, Stage::JointFt, &store)
    }

    fn train_align(&self) -> Result<()> {
        let data = self.load_data()?;
        let samples = self.samples(&data.ds)?;
        let mut store = self.load(Command::FinetuneTfe, Stage::JointFt)?;
        let tfe = self.tfe_model(&mut ParamStore::new())?;
        let (_, mut log) = self.begin(Command::TrainAlign)?;
        store.freeze_all();
        let net = AlignmentNet::new(&mut store, &mut self.rng(&[seeds::ALIGN]), tfe.width(), self.cfg.model.e, self.cfg.model.align_blocks)?;
        let keys = |idx: &[usize]| -> Vec<(u32, u32)> {
            idx.iter()
                .map(|&i| (data.ds.records[i].class_label, data.ds.records[i].image_id))
                .collect()
        };
        let (cap, lab) = stack_targets(&data.fixtures, &keys(&data.split.train))?;
        let train: Vec<&TfeSample> = data.split.train.iter().map(|&i| &samples[i]).collect();
        let t = &self.cfg.training;
        let tc = self.train_cfg(t.epochs.align, seeds::ALIGN);
        let logs = if t.align_unfreeze_tfe {
            store.set_trainable(&format!("{}.", crate::lmm::STUDENT), tfe.time.is_some());
            store.set_trainable("freq.lstm.", tfe.freq.is_some());
            store.set_trainable(&format!("{}.", crate::fusion::HEAD), true);
            align::train_align_unfrozen(&net, &tfe, &mut store, &train, (&cap, &lab), t.align_lambda, &tc)?
        } else {
            let (emb, _) = tfe.infer(&store, &train, t.batch_size)?;
            align::train_align(&net, &mut store, &emb, (&cap, &lab), t.align_lambda, &tc)?
        };
        log.lines(&logs)?;
        if !data.split.val.is_empty() {
            let val: Vec<&TfeSample> = data.split.val.iter().map(|&i| &samples[i]).collect();
            let (emb, _) = tfe.infer(&store, &val, t.batch_size)?;
            let c = net.align(&store, &emb)?;
            let (vc, vl) = stack_targets(&data.fixtures, &keys(&data.split.val))?;
            let mut tape = crate::autodiff::Tape::inference();
            let (a, b, l) = (tape.constant(c), tape.constant(vc), tape.constant(vl));
            let loss = align::si_loss(&mut tape, a, b, l, t.align_lambda)?;
            log.line(&serde_json::json!({ "stage": "val", "si_loss": tape.value(loss).item() }))?;
        }
        log.close()?;
        self.save(Command::TrainAlign, Stage::Align, &store)
    }

    fn models(&self) -> Result<Models> {
        let mut scratch = ParamStore::<f32>::new();
        let tfe = self.tfe_model(&mut scratch)?;
        let mut rng = self.rng(&[seeds::ALIGN]);
        let align = AlignmentNet::new(&mut scratch, &mut rng, tfe.width(), self.cfg.model.e, self.cfg.model.align_blocks)?;
        let denoiser = MlpDenoiser::new(&mut scratch, &mut self.rng(&[seeds::DIFFUSION]), self.cfg.denoiser(), self.cfg.diffusion.steps)?;
        Ok(Models { tfe, align, denoiser })
    }

    fn target_image(&self, class: u32, image_id: u32) -> Tensor<f64> {
        synthetic_image(
            class as usize,
            image_id,
            self.cfg.data.n_classes,
            self.cfg.diffusion.shape,
            self.seed(&[seeds::IMAGES]),
        )
    }

    /// `(logits, aligned embeddings)` for some records.
    fn encode(&self, m: &Models, store: &ParamStore<f32>, samples: &[&TfeSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (emb, logits) = m.tfe.infer(store, samples, self.cfg.training.batch_size)?;
        Ok((logits, m.align.align(store, &emb)?))
    }

    fn train_diffusion(&self) -> Result<()> {
        let data = self.load_data()?;
        let samples = self.samples(&data.ds)?;
        let mut store = self.load(Command::TrainAlign, Stage::Align)?;
        let m = self.models()?;
        let (_, mut log) = self.begin(Command::TrainDiffusion)?;
        let train: Vec<&TfeSample> = data.split.train.iter().map(|&i| &samples[i]).collect();
        let (_, c_eeg) = self.encode(&m, &store, &train)?;
        let examples: Vec<DiffusionExample> = data
            .split
            .train
            .iter()
            .enumerate()
            .map(|(row, &i)| {
                let r = &data.ds.records[i];
                DiffusionExample {
                    x0: self.target_image(r.class_label, r.image_id),
                    embedding: c_eeg.row(row).to_vec(),
                    label: r.class_label as usize,
                }
            })
            .collect();
        store.freeze_all();
        let df = &self.cfg.diffusion;
        let net = MlpDenoiser::new(&mut store, &mut self.rng(&[seeds::DIFFUSION]), self.cfg.denoiser(), df.steps)?;
        if df.class_condition == ClassCondition::Fixture {
            store.set(&net.class_table, data.fixtures.class_table(self.cfg.data.n_classes)?)?;
            store.set_trainable(&net.class_table, false);
        }
        let sched = NoiseSchedule::scaled(df.steps)?;
        let tc = DenoiserTrainConfig {
            steps: df.train_steps,
            batch_size: df.batch_size,
            lr: df.lr,
            seed: self.seed(&[seeds::DIFFUSION]),
        };
        let curve = diffusion::train_denoiser(&net, &mut store, &sched, &examples, &tc)?;
        for (step, loss) in curve.iter().enumerate() {
            log.line(&serde_json::json!({ "stage": "diffusion", "step": step, "loss": loss }))?;
        }
        log.close()?;
        self.save(Command::TrainDiffusion, Stage::Diffusion, &store)
    }

    fn generate(&self) -> Result<()> {
        let data = self.load_data()?;
        let samples = self.samples(&data.ds)?;
        let store = self.load(Command::TrainDiffusion, Stage::Diffusion)?;
        let m = self.models()?;
        let (dir, mut log) = self.begin(Command::Generate)?;
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let test: Vec<&TfeSample> = data.split.test.iter().map(|&i| &samples[i]).collect();
        let (logits, c_eeg) = self.encode(&m, &store, &test)?;
        let predicted = argmax_rows(&logits);
        let den = m.denoiser.bind(&store);
        let sched = NoiseSchedule::scaled(self.cfg.diffusion.steps)?;
        let df = &self.cfg.diffusion;
        let master = self.seed(&[seeds::GENERATE]);
        for (row, &rid) in data.split.test.iter().enumerate() {
            let out = generate(
                &sched,
                &den,
                &self.cfg.cascade(),
                self.cfg.cascade_mode(),
                &df.shape,
                c_eeg.row(row),
                &Condition::Class(predicted[row]),
                predicted[row],
                rid,
                df.samples_per_record,
                master,
            )?;
            for s in out {
                diffusion::write_ppm(&images.join(diffusion::ppm_name(rid, s.provenance.sample)), &s.image)?;
                log.line(&s.provenance)?;
            }
        }
        log.close()?;
        let preds = Predictions {
            record_ids: data.split.test.clone(),
            labels: data.split.test.iter().map(|&i| data.ds.records[i].class_label as usize).collect(),
            predicted,
            logits: (0..logits.rows()).map(|i| logits.row(i).to_vec()).collect(),
        };
        write_json(&dir.join("predictions.json"), &preds)
    }

    /// Score the generated images and the test-set classification.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let data = self.load_data()?;
        let gen_dir = self.dir(Command::Generate);
        let pred_path = gen_dir.join("predictions.json");
        if !pred_path.exists() {
            return Err(Error::MissingStage {
                needed: Command::Generate.name().into(),
                path: pred_path,
            });
        }
        let preds: Predictions = read_json(&pred_path)?;
        let (dir, mut log) = self.begin(Command::Evaluate)?;
        let ev = &self.cfg.eval;
        let n_classes = self.cfg.data.n_classes;

        // surrogate classifier on every clean target image
        let pairs: BTreeSet<(u32, u32)> = data.ds.records.iter().map(|r| (r.class_label, r.image_id)).collect();
        let clean: Vec<Tensor<f64>> = pairs.iter().map(|&(c, i)| self.target_image(c, i)).collect();
        let clean_labels: Vec<usize> = pairs.iter().map(|&(c, _)| c as usize).collect();
        let mut store = ParamStore::new();
        let in_dim = self.cfg.diffusion.shape.iter().product();
        let sur = Surrogate::new(&mut store, &mut self.rng(&[seeds::SURROGATE]), in_dim, ev.surrogate_hidden, n_classes)?;
        let tc = TrainConfig {
            epochs: ev.surrogate_epochs,
            batch_size: self.cfg.training.batch_size,
            lr: self.cfg.training.lr,
            seed: self.seed(&[seeds::SURROGATE]),
        };
        let curve = sur.train(&mut store, &clean, &clean_labels, ev.surrogate_noise, &tc)?;
        for (epoch, loss) in curve.iter().enumerate() {
            log.line(&serde_json::json!({ "stage": "surrogate", "epoch": epoch, "loss": loss }))?;
        }

        let mut generated = Vec::new();
        let mut truth = Vec::new();
        let mut labels = Vec::new();
        for (&rid, &y) in preds.record_ids.iter().zip(&preds.labels) {
            let r = &data.ds.records[rid];
            let gt = self.target_image(r.class_label, r.image_id);
            for k in 0..self.cfg.diffusion.samples_per_record {
                generated.push(diffusion::read_ppm(&gen_dir.join("images").join(diffusion::ppm_name(rid, k)))?);
                truth.push(gt.clone());
                labels.push(y);
            }
        }
        let ga = GaConfig {
            n_way: ev.ga_n_way,
            k: ev.ga_k,
            n_trials: ev.ga_trials,
            seed: self.seed(&[seeds::GA]),
        };
        let gen = evaluate_generation(&sur, &store, &generated, &truth, &labels, &ga, ev.is_splits, &SsimConfig::default())?;
        let logits = Tensor::new(
            [preds.logits.len(), n_classes],
            preds.logits.iter().flatten().map(|&v| v as f64).collect(),
        )?;
        let report = MetricsReport::assemble(&logits, &preds.labels, &gen, self.cfg.echo())?;
        report.check_ranges()?;
        log.line(&gen)?;
        log.close()?;
        write_json(&dir.join("metrics.json"), &report)?;
        Ok(report)
    }
}

/// Run the whole chain with one component disabled, under
/// `<root>/ablate/<mode>/`.
pub fn ablate(root: &Path, cfg: &PipelineConfig, mode: Ablation) -> Result<MetricsReport> {
    let cfg = PipelineConfig {
        ablation: Some(mode),
        ..cfg.clone()
    };
    Run::new(root.join("ablate").join(mode.tag()), cfg)?.run_all()
}
