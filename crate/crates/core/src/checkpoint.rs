//! BVC1 checkpoint archives and the training stage graph.
//!
//! Layout: `"BVC1" | u32 version | u32 n_tensors | n × (u16 name_len | name |
//! u8 rank | rank × u32 dims | f32 data) | u32 CRC32`. Parameter values are
//! stored as `param/<name>`, Adam moments as `adam.m/<name>` and
//! `adam.v/<name>`. Scalars that are not tensors (stage tag, optimizer step,
//! frozen flags) ride along as empty `meta.*` tensors whose name carries the
//! value. The config snapshot lives in a JSON file next to the archive.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const BVC_MAGIC: &[u8; 4] = b"BVC1";
pub const BVC_VERSION: u32 = 1;

const STAGE: &str = "meta.stage.";
const STEP: &str = "meta.step.";
const FROZEN: &str = "meta.frozen/";
const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Lmm,
    Freq,
    TimeFt,
    JointFt,
    Align,
    Diffusion,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Lmm, Stage::Freq, Stage::TimeFt, Stage::JointFt, Stage::Align, Stage::Diffusion];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::Lmm => "lmm",
            Stage::Freq => "freq",
            Stage::TimeFt => "time_ft",
            Stage::JointFt => "joint_ft",
            Stage::Align => "align",
            Stage::Diffusion => "diffusion",
        }
    }

    /// Direct prerequisites in the full pipeline.
    pub fn parents(self) -> &'static [Stage] {
        match self {
            Stage::Lmm | Stage::Freq => &[],
            Stage::TimeFt => &[Stage::Lmm],
            Stage::JointFt => &[Stage::TimeFt, Stage::Freq],
            Stage::Align => &[Stage::JointFt],
            Stage::Diffusion => &[Stage::Align],
        }
    }

    /// Whether `self` is reachable from `other` along the graph.
    pub fn depends_on(self, other: Stage) -> bool {
        self.parents().iter().any(|&p| p == other || p.depends_on(other))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::Malformed(format!("unknown stage tag `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointArchive {
    pub stage: Stage,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub config: serde_json::Value,
}

fn marker() -> Tensor<f32> {
    Tensor::zeros([0])
}

impl CheckpointArchive {
    /// Snapshot a store, including Adam state and frozen flags.
    pub fn from_store(stage: Stage, store: &ParamStore<f32>, config: serde_json::Value) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, p) in store.iter() {
            tensors.insert(format!("{PARAM}{name}"), p.value.clone());
            tensors.insert(format!("{ADAM_M}{name}"), p.m.clone());
            tensors.insert(format!("{ADAM_V}{name}"), p.v.clone());
            if !p.trainable {
                tensors.insert(format!("{FROZEN}{name}"), marker());
            }
        }
        tensors.insert(format!("{STEP}{}", store.step()), marker());
        CheckpointArchive { stage, tensors, config }
    }

    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (key, t) in &self.tensors {
            if let Some(name) = key.strip_prefix(PARAM) {
                store.insert(name, t.clone())?;
            }
        }
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for name in names {
            let p = store.param_mut(&name).expect("inserted above");
            for (prefix, slot) in [(ADAM_M, &mut p.m), (ADAM_V, &mut p.v)] {
                if let Some(t) = self.tensors.get(&format!("{prefix}{name}")) {
                    if t.shape() != slot.shape() {
                        return Err(Error::shape("checkpoint moments", slot.shape(), t.shape()));
                    }
                    *slot = t.clone();
                }
            }
            p.trainable = !self.tensors.contains_key(&format!("{FROZEN}{name}"));
        }
        let step = self
            .tensors
            .keys()
            .find_map(|k| k.strip_prefix(STEP))
            .map(|s| s.parse::<u64>().map_err(|_| Error::Malformed(format!("bad step marker `{s}`"))))
            .transpose()?
            .unwrap_or(0);
        store.set_step(step);
        Ok(store)
    }
}

pub fn encode_checkpoint(a: &CheckpointArchive) -> Result<Vec<u8>> {
    let stage_key = format!("{STAGE}{}", a.stage.tag());
    let stage_marker = marker();
    let all: Vec<(&str, &Tensor<f32>)> = a
        .tensors
        .iter()
        .filter(|(k, _)| !k.starts_with(STAGE))
        .map(|(k, t)| (k.as_str(), t))
        .chain(std::iter::once((stage_key.as_str(), &stage_marker)))
        .collect();
    let mut w = Writer::new(BVC_MAGIC, BVC_VERSION);
    w.u32(all.len() as u32);
    for (name, t) in all {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::invalid("checkpoint", format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("checkpoint", format!("rank too high: {name}")))?;
        w.u16(len);
        w.bytes(nb);
        w.u8(rank);
        for &d in t.shape() {
            w.u32(u32::try_from(d).map_err(|_| Error::invalid("checkpoint", format!("dimension too large: {name}")))?);
        }
        w.f32s(t.data());
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointArchive> {
    let mut r = Reader::open(bytes, BVC_MAGIC, BVC_VERSION)?;
    let n = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    let mut stage = None;
    for _ in 0..n {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated("tensor data"))?;
        let data = r.f32s(count, "tensor data")?;
        if let Some(tag) = name.strip_prefix(STAGE) {
            if stage.replace(tag.parse::<Stage>()?).is_some() {
                return Err(Error::Malformed("more than one stage tag".into()));
            }
            continue;
        }
        if tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor `{name}`")));
        }
    }
    r.finish()?;
    Ok(CheckpointArchive {
        stage: stage.ok_or_else(|| Error::Malformed("checkpoint has no stage tag".into()))?,
        tensors,
        config: serde_json::Value::Null,
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, a: &CheckpointArchive) -> Result<()> {
    write_file(path, &encode_checkpoint(a)?)?;
    let json = serde_json::to_vec_pretty(&a.config)?;
    write_file(&sidecar_path(path), &json)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointArchive> {
    let mut a = decode_checkpoint(&read_file(path)?)?;
    let side = sidecar_path(path);
    if side.exists() {
        a.config = serde_json::from_slice(&read_file(&side)?)?;
    }
    Ok(a)
}

/// Load the checkpoint a command depends on, naming the stage when it is
/// absent or holds a different stage.
pub fn load_stage(path: &Path, expected: Stage) -> Result<CheckpointArchive> {
    if !path.exists() {
        return Err(Error::MissingStage {
            needed: expected.tag().into(),
            path: path.to_owned(),
        });
    }
    let a = load_checkpoint(path)?;
    if a.stage != expected {
        return Err(Error::StageMismatch {
            expected: expected.tag().into(),
            found: a.stage.tag().into(),
            path: path.to_owned(),
        });
    }
    Ok(a)
}
