//! EEG records, the BVD1 container, a deterministic synthetic generator,
//! the image-grouped split and unit segmentation.

mod bvd;
mod split;
mod synthetic;
mod units;

pub use bvd::{decode_dataset, encode_dataset, load_dataset, save_dataset, BVD_MAGIC, BVD_VERSION};
pub use split::{split_by_image, DatasetSplit, DEFAULT_RATIOS};
pub use synthetic::{generate_synthetic, ClassSignature, SyntheticGenSpec, N_SUBJECTS};
pub use units::{reassemble, segment_units, units_matrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One multichannel trial; `data` is `channels × samples`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecord {
    pub channels: usize,
    pub samples: usize,
    pub data: Vec<f32>,
    pub class_label: u32,
    pub subject_id: u32,
    pub image_id: u32,
}

impl EegRecord {
    pub fn new(channels: usize, samples: usize, data: Vec<f32>, class_label: u32, subject_id: u32, image_id: u32) -> Result<Self> {
        if data.len() != channels * samples {
            return Err(Error::invalid(
                "eeg record",
                format!("{} values for {channels}×{samples}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "eeg record" });
        }
        Ok(EegRecord {
            channels,
            samples,
            data,
            class_label,
            subject_id,
            image_id,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    /// Per-channel z-score; a flat channel is only centred.
    pub fn z_scored(&self) -> Self {
        let mut out = self.clone();
        let l = self.samples as f64;
        for ch in out.data.chunks_mut(self.samples) {
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / l;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / l;
            let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
            for v in ch.iter_mut() {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub channels: usize,
    pub samples: usize,
    pub n_classes: usize,
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<EegRecord>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, records: Vec<EegRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.channels != header.channels || r.samples != header.samples {
                return Err(Error::Malformed(format!(
                    "record {i} is {}×{}, header says {}×{}",
                    r.channels, r.samples, header.channels, header.samples
                )));
            }
            if r.class_label as usize >= header.n_classes {
                return Err(Error::Malformed(format!(
                    "record {i} has class {} of {}",
                    r.class_label, header.n_classes
                )));
            }
        }
        Ok(Dataset { header, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Z-score every record per channel and set the header flag. Idempotent.
    pub fn normalized(self) -> Self {
        if self.header.normalized {
            return self;
        }
        let records = crate::par::map_indexed(self.records.len(), |i| self.records[i].z_scored());
        Dataset {
            header: DatasetHeader {
                normalized: true,
                ..self.header
            },
            records,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_label as usize).collect()
    }
}
