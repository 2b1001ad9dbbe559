use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Mixes `parts` into `base` (splitmix64 finalizer per part) so that
/// independent streams (epochs, dialogs, folds) get unrelated seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED69));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Patience-based early stopping on a dev score where higher is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, usize)>,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stalled: 0,
        }
    }

    /// Records the score after `epoch` (1-based). Only a strict improvement
    /// resets the patience counter.
    pub fn observe(&mut self, epoch: usize, score: f64) -> Progress {
        match self.best {
            Some((b, _)) if score <= b => {
                self.stalled += 1;
                if self.stalled >= self.patience {
                    Progress::Stop
                } else {
                    Progress::Stalled
                }
            }
            _ => {
                self.best = Some((score, epoch));
                self.stalled = 0;
                Progress::Improved
            }
        }
    }

    /// Best `(score, epoch)` so far.
    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_qwk: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_qwk: f64,
}

/// Shuffles example indices, sorts them by length inside pools of eight
/// batches, cuts batches, and shuffles the batch order.
pub fn bucket_batches<R: Rng>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks_mut(batch_size * 8) {
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}
