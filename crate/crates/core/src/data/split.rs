use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EegRecord;
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: (u32, u32, u32) = (8, 1, 1);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffle the distinct images, give `floor(N·val/Σ)` to validation and
/// `floor(N·test/Σ)` to test, the rest to training; records follow their
/// image.
pub fn split_by_image(records: &[EegRecord], ratios: (u32, u32, u32), seed: u64) -> Result<DatasetSplit> {
    let mut images: Vec<u32> = records.iter().map(|r| r.image_id).collect();
    images.sort_unstable();
    images.dedup();
    if images.len() < 10 {
        return Err(Error::invalid("split", format!("need at least 10 distinct images, got {}", images.len())));
    }
    let total = (ratios.0 + ratios.1 + ratios.2) as usize;
    if total == 0 || ratios.0 == 0 {
        return Err(Error::invalid("split", "training ratio must be positive"));
    }
    images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = images.len();
    let n_val = n * ratios.1 as usize / total;
    let n_test = n * ratios.2 as usize / total;
    let n_train = n - n_val - n_test;
    let mut which = std::collections::HashMap::with_capacity(n);
    for (i, &img) in images.iter().enumerate() {
        let part = if i < n_train {
            0u8
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        which.insert(img, part);
    }
    let mut split = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        seed,
    };
    for (i, r) in records.iter().enumerate() {
        match which[&r.image_id] {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(images: u32, per: u32) -> Vec<EegRecord> {
        (0..images * per)
            .map(|i| EegRecord::new(1, 1, vec![0.0], 0, 0, i / per).unwrap())
            .collect()
    }

    fn image_counts(r: &[EegRecord], s: &DatasetSplit) -> [usize; 3] {
        let count = |idx: &[usize]| {
            let mut v: Vec<u32> = idx.iter().map(|&i| r[i].image_id).collect();
            v.dedup();
            v.len()
        };
        [count(&s.train), count(&s.val), count(&s.test)]
    }

    #[test]
    fn two_thousand_images() {
        let r = recs(2000, 1);
        assert_eq!(image_counts(&r, &split_by_image(&r, DEFAULT_RATIOS, 3).unwrap()), [1600, 200, 200]);
    }

    #[test]
    fn ten_images() {
        let r = recs(10, 3);
        let s = split_by_image(&r, DEFAULT_RATIOS, 3).unwrap();
        assert_eq!(image_counts(&r, &s), [8, 1, 1]);
        assert_eq!(s.train.len(), 24);
    }

    #[test]
    fn too_few_images() {
        assert!(split_by_image(&recs(9, 4), DEFAULT_RATIOS, 0).is_err());
    }
}
