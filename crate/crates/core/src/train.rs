//! Shared training-loop plumbing: minibatch order, epoch logs, argmax.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::optim::AdamConfig;
use crate::par::derive_seed;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// Shuffled minibatches of `0..n` for one epoch; the order depends only on
/// `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
}

/// Row argmax, ties to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_partition_indices() {
        let b = epoch_batches(10, 3, 1, 0);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 3, 1, 0));
        assert_ne!(b, epoch_batches(10, 3, 1, 1));
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f64>::new([2, 3], vec![1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
