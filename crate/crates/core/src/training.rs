//! Training-loop plumbing shared by both models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingConfig {
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            max_epochs: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Tracks the best validation objective (lower is better).
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    config: StoppingConfig,
    best: f64,
    since_best: usize,
    epochs: usize,
}

impl EarlyStopper {
    pub fn new(config: StoppingConfig) -> Self {
        Self {
            config,
            best: f64::INFINITY,
            since_best: 0,
            epochs: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, validation_objective: f64) -> StopDecision {
        self.epochs += 1;
        let improved = validation_objective < self.best;
        if improved {
            self.best = validation_objective;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        let stop = self.since_best > self.config.patience || self.epochs >= self.config.max_epochs;
        StopDecision { improved, stop }
    }
}

/// Splits `0..n` into shuffled batches of at most `batch_size`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Batches that draw from every class in proportion to its size. The batch
/// count is capped by the smallest class so every batch sees every class.
pub fn stratified_batches(labels: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let smallest = per_class.iter().map(Vec::len).min().unwrap_or(0);
    let wanted = labels.len().div_ceil(batch_size.max(1));
    let n_batches = wanted.min(smallest).max(1);
    let mut batches = vec![Vec::new(); n_batches];
    for members in &mut per_class {
        members.shuffle(rng);
        let n = members.len();
        for (j, batch) in batches.iter_mut().enumerate() {
            batch.extend_from_slice(&members[j * n / n_batches..(j + 1) * n / n_batches]);
        }
    }
    batches.shuffle(rng);
    batches
}

/// Independent stream for a named stage of a seeded run.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ master;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

pub fn stage_rng(master: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stage))
}
