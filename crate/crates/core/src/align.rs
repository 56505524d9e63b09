//! Semantic alignment: fixture label/caption embeddings, the residual
//! alignment network and the dual-cosine interpolation loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{Linear, ResidualBlock};
use crate::optim::ParamStore;
use crate::par::derive_seed;
use crate::tensor::{Real, Tensor};
use crate::train::{epoch_batches, EpochLog, TrainConfig};

pub const BVE_MAGIC: &[u8; 4] = b"BVE1";
pub const BVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTargets {
    pub c_label: Vec<f32>,
    pub c_cap: Vec<f32>,
}

/// Targets keyed by `(class_label, image_id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSet {
    pub e: usize,
    entries: BTreeMap<(u32, u32), SemanticTargets>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

impl FixtureSet {
    pub fn new(e: usize) -> Self {
        FixtureSet {
            e,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class_label: u32, image_id: u32, t: SemanticTargets) -> Result<()> {
        for v in [&t.c_label, &t.c_cap] {
            if v.len() != self.e {
                return Err(Error::shape("fixture", &[v.len()], &[self.e]));
            }
            if !(norm(v) > 0.0) {
                return Err(Error::ZeroNorm { op: "fixture" });
            }
        }
        if self.entries.insert((class_label, image_id), t).is_some() {
            return Err(Error::Malformed(format!("duplicate fixture ({class_label}, {image_id})")));
        }
        Ok(())
    }

    pub fn get(&self, class_label: u32, image_id: u32) -> Result<&SemanticTargets> {
        self.entries
            .get(&(class_label, image_id))
            .ok_or(Error::MissingFixture { class_label, image_id })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u32, u32), &SemanticTargets)> {
        self.entries.iter()
    }

    /// Every `(class, image)` pair must resolve.
    pub fn require_all(&self, keys: impl IntoIterator<Item = (u32, u32)>) -> Result<()> {
        for (c, i) in keys {
            self.get(c, i)?;
        }
        Ok(())
    }

    /// One `c_label` per class (the first entry seen for it).
    pub fn class_table(&self, n_classes: usize) -> Result<Tensor<f32>> {
        let mut rows: Vec<Option<&Vec<f32>>> = vec![None; n_classes];
        for ((c, _), t) in &self.entries {
            if let Some(slot) = rows.get_mut(*c as usize) {
                slot.get_or_insert(&t.c_label);
            }
        }
        let mut data = Vec::with_capacity(n_classes * self.e);
        for (c, r) in rows.into_iter().enumerate() {
            let r = r.ok_or(Error::MissingFixture {
                class_label: c as u32,
                image_id: u32::MAX,
            })?;
            data.extend_from_slice(r);
        }
        Tensor::new([n_classes, self.e], data)
    }
}

pub fn encode_fixtures(f: &FixtureSet) -> Result<Vec<u8>> {
    let mut w = Writer::new(BVE_MAGIC, BVE_VERSION);
    w.u32(u32::try_from(f.entries.len()).map_err(|_| Error::Malformed("too many fixtures".into()))?);
    w.u32(f.e as u32);
    for ((c, i), t) in &f.entries {
        w.u32(*c);
        w.u32(*i);
        w.f32s(&t.c_label);
        w.f32s(&t.c_cap);
    }
    Ok(w.finish())
}

pub fn decode_fixtures(bytes: &[u8]) -> Result<FixtureSet> {
    let mut r = Reader::open(bytes, BVE_MAGIC, BVE_VERSION)?;
    let n = r.u32("entry count")? as usize;
    let e = r.u32("embedding width")? as usize;
    let mut f = FixtureSet::new(e);
    for _ in 0..n {
        let c = r.u32("entry key")?;
        let i = r.u32("entry key")?;
        let c_label = r.f32s(e, "label embedding")?;
        let c_cap = r.f32s(e, "caption embedding")?;
        f.insert(c, i, SemanticTargets { c_label, c_cap })?;
    }
    r.finish()?;
    Ok(f)
}

/// Human-readable provenance written next to a fixture file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSidecar {
    pub e: usize,
    pub generator: String,
    pub entries: Vec<SidecarEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub class_label: u32,
    pub image_id: u32,
    pub label: String,
    pub caption: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_fixtures(path: &Path, f: &FixtureSet, sidecar: Option<&FixtureSidecar>) -> Result<()> {
    write_file(path, &encode_fixtures(f)?)?;
    if let Some(s) = sidecar {
        write_file(&sidecar_path(path), serde_json::to_string_pretty(s)?.as_bytes())?;
    }
    Ok(())
}

pub fn load_fixtures(path: &Path) -> Result<FixtureSet> {
    decode_fixtures(&read_file(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureGenSpec {
    pub n_classes: usize,
    pub e: usize,
    /// Length of the per-image offset added to the class direction before
    /// normalising; sets the label/caption angle.
    pub caption_offset: f64,
    /// Gram–Schmidt the class directions (needs `n_classes ≤ e`).
    pub orthogonal: bool,
    pub seed: u64,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, e: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..e).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `c_label` is a unit class direction; `c_cap` is
/// `normalize(c_label + offset·u_image)` for a unit random `u_image`.
pub fn generate_fixtures(spec: &FixtureGenSpec, pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<(FixtureSet, FixtureSidecar)> {
    if spec.e == 0 || spec.n_classes == 0 {
        return Err(Error::Config {
            field: "e",
            msg: "fixture width and class count must be positive".into(),
        });
    }
    if spec.orthogonal && spec.n_classes > spec.e {
        return Err(Error::Config {
            field: "e",
            msg: format!("{} orthogonal classes need e ≥ {}", spec.n_classes, spec.n_classes),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xC1A55]));
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    while dirs.len() < spec.n_classes {
        let mut v = unit_gaussian(&mut rng, spec.e);
        if spec.orthogonal {
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
        }
        dirs.push(v);
    }
    let mut set = FixtureSet::new(spec.e);
    let mut side = FixtureSidecar {
        e: spec.e,
        generator: format!("class directions + {} image offset, seed {}", spec.caption_offset, spec.seed),
        entries: vec![],
    };
    let mut pairs: Vec<(u32, u32)> = pairs.into_iter().collect();
    pairs.sort_unstable();
    pairs.dedup();
    for (c, i) in pairs {
        let dir = dirs
            .get(c as usize)
            .ok_or_else(|| Error::invalid("fixtures", format!("class {c} ≥ {}", spec.n_classes)))?;
        let mut img_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[c as u64, i as u64]));
        let u = unit_gaussian(&mut img_rng, spec.e);
        let cap: Vec<f64> = dir.iter().zip(&u).map(|(a, b)| a + spec.caption_offset * b).collect();
        let n = cap.iter().map(|x| x * x).sum::<f64>().sqrt();
        set.insert(
            c,
            i,
            SemanticTargets {
                c_label: dir.iter().map(|&x| x as f32).collect(),
                c_cap: cap.iter().map(|&x| (x / n) as f32).collect(),
            },
        )?;
        side.entries.push(SidecarEntry {
            class_label: c,
            image_id: i,
            label: format!("class {c}"),
            caption: format!("image {i} of class {c}"),
        });
    }
    Ok((set, side))
}

/// Input projection to width `e` followed by residual blocks.
#[derive(Clone, Debug)]
pub struct AlignmentNet {
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub e: usize,
}

impl AlignmentNet {
    pub const PREFIX: &'static str = "align";

    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, in_dim: usize, e: usize, blocks: usize) -> Result<Self> {
        Ok(AlignmentNet {
            input: Linear::new(store, rng, "align.input", in_dim, e, true)?,
            blocks: (0..blocks)
                .map(|i| ResidualBlock::new(store, rng, &format!("align.res{i}"), e))
                .collect::<Result<_>>()?,
            e,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = self.input.forward(tape, store, x)?;
        for b in &self.blocks {
            h = b.forward(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn align<T: Real>(&self, store: &ParamStore<T>, tfe: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(tfe.clone());
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Mean over rows of `(1+λ) − cos(c_eeg, c_cap) − λ·cos(c_eeg, c_label)`.
pub fn si_loss<T: Real>(tape: &mut Tape<T>, c_eeg: Var, c_cap: Var, c_label: Var, lambda: f64) -> Result<Var> {
    let cc = tape.cosine_rows(c_eeg, c_cap)?;
    let cl = tape.cosine_rows(c_eeg, c_label)?;
    let cl = tape.scale(cl, lambda)?;
    let s = tape.add(cc, cl)?;
    let m = tape.mean(s)?;
    let top = tape.constant(Tensor::scalar(T::of(1.0 + lambda)));
    tape.sub(top, m)
}

/// Per-record targets stacked as `(c_cap, c_label)` matrices.
pub fn stack_targets(f: &FixtureSet, keys: &[(u32, u32)]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut cap = Vec::with_capacity(keys.len() * f.e);
    let mut lab = Vec::with_capacity(keys.len() * f.e);
    for &(c, i) in keys {
        let t = f.get(c, i)?;
        cap.extend_from_slice(&t.c_cap);
        lab.extend_from_slice(&t.c_label);
    }
    Ok((Tensor::new([keys.len(), f.e], cap)?, Tensor::new([keys.len(), f.e], lab)?))
}

/// Minimise the mean interpolation loss over precomputed embeddings.
pub fn train_align(
    net: &AlignmentNet,
    store: &mut ParamStore<f32>,
    tfe: &Tensor<f32>,
    targets: (&Tensor<f32>, &Tensor<f32>),
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let (cap, lab) = targets;
    let adam = cfg.adam();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(tfe.rows(), cfg.batch_size, cfg.seed, epoch);
        let mut total = 0.0;
        let mut count = 0;
        for b in &batches {
            let mut tape = Tape::new();
            let x = tape.constant(tfe.select_rows(b));
            let y = net.forward(&mut tape, store, x)?;
            let c = tape.constant(cap.select_rows(b));
            let l = tape.constant(lab.select_rows(b));
            let loss = si_loss(&mut tape, y, c, l, lambda)?;
            total += tape.value(loss).item() as f64 * b.len() as f64;
            count += b.len();
            let grads = tape.backward(loss)?;
            store.adam_step(&grads.into_named(), &adam)?;
        }
        logs.push(EpochLog {
            stage: "align".into(),
            epoch,
            loss: total / count.max(1) as f64,
            train_acc: None,
            val_acc: None,
        });
    }
    Ok(logs)
}

/// Alignment with the fused encoder trainable as well: embeddings are
/// recomputed on the tape every batch.
pub fn train_align_unfrozen(
    net: &AlignmentNet,
    tfe: &crate::fusion::TfeModel,
    store: &mut ParamStore<f32>,
    samples: &[&crate::fusion::TfeSample],
    targets: (&Tensor<f32>, &Tensor<f32>),
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let (cap, lab) = targets;
    let adam = cfg.adam();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch);
        let mut total = 0.0;
        for b in &batches {
            let batch: Vec<_> = b.iter().map(|&i| samples[i]).collect();
            let mut tape = Tape::new();
            let x = tfe.embed(&mut tape, store, &batch)?;
            let y = net.forward(&mut tape, store, x)?;
            let c = tape.constant(cap.select_rows(b));
            let l = tape.constant(lab.select_rows(b));
            let loss = si_loss(&mut tape, y, c, l, lambda)?;
            total += tape.value(loss).item() as f64 * b.len() as f64;
            let grads = tape.backward(loss)?;
            store.adam_step(&grads.into_named(), &adam)?;
        }
        logs.push(EpochLog {
            stage: "align".into(),
            epoch,
            loss: total / samples.len().max(1) as f64,
            train_acc: None,
            val_acc: None,
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss3(e: [f64; 3], c: [f64; 3], l: [f64; 3]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let mut v = |x: [f64; 3]| tape.constant(Tensor::new([1, 3], x.to_vec()).unwrap());
        let (a, b, d) = (v(e), v(c), v(l));
        let s = si_loss(&mut tape, a, b, d, 1.0).unwrap();
        tape.value(s).item()
    }

    #[test]
    fn interpolation_loss_fixed_points() {
        assert!(loss3([1.0, 2.0, 0.0], [1.0, 2.0, 0.0], [1.0, 2.0, 0.0]).abs() < 1e-12);
        assert!((loss3([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]) - 2.0).abs() < 1e-12);
        let h = 0.5f64.sqrt();
        assert!((loss3([h, h, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]) - (2.0 - 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn fixtures_reject_bad_vectors() {
        let mut f = FixtureSet::new(2);
        let ok = SemanticTargets {
            c_label: vec![1.0, 0.0],
            c_cap: vec![0.0, 1.0],
        };
        f.insert(0, 0, ok.clone()).unwrap();
        assert!(matches!(f.insert(0, 0, ok), Err(Error::Malformed(_))));
        let zero = SemanticTargets {
            c_label: vec![0.0, 0.0],
            c_cap: vec![0.0, 1.0],
        };
        assert!(matches!(f.insert(1, 0, zero), Err(Error::ZeroNorm { .. })));
        let short = SemanticTargets {
            c_label: vec![1.0],
            c_cap: vec![0.0, 1.0],
        };
        assert!(matches!(f.insert(2, 0, short), Err(Error::Shape { .. })));
        assert!(matches!(f.get(5, 5), Err(Error::MissingFixture { class_label: 5, image_id: 5 })));
    }

    #[test]
    fn generated_caption_angle() {
        let spec = FixtureGenSpec {
            n_classes: 3,
            e: 16,
            caption_offset: 0.25,
            orthogonal: true,
            seed: 9,
        };
        let (f, side) = generate_fixtures(&spec, [(0, 0), (1, 3), (2, 7)]).unwrap();
        assert_eq!(side.entries.len(), 3);
        let t = f.get(1, 3).unwrap();
        let cos: f64 = t.c_label.iter().zip(&t.c_cap).map(|(&a, &b)| a as f64 * b as f64).sum();
        // cos of the angle between d and d + 0.25u with u ⟂-ish d lies near 1/√(1+1/16)
        assert!(cos > 0.9 && cos < 1.0, "{cos}");
        let a = &f.get(0, 0).unwrap().c_label;
        let b = &f.get(2, 7).unwrap().c_label;
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        assert!(dot.abs() < 1e-6);
    }
}
