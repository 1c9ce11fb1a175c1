use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{derive_seed, stage_rng};

pub const MIN_CLASS_SIZE: usize = 6;

/// One resampled test set: for each novel class, in introduction order, the
/// rows drawn for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NovelTestSet {
    pub per_class: Vec<Vec<usize>>,
}

impl NovelTestSet {
    /// Known-test rows followed by the rows of the first `k` novel classes.
    pub fn rows_with_first(&self, k: usize, known_test: &[usize]) -> Vec<usize> {
        let mut rows = known_test.to_vec();
        for c in &self.per_class[..k.min(self.per_class.len())] {
            rows.extend_from_slice(c);
        }
        rows
    }
}

/// Row indices of every split. Persisted as JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub known_classes: Vec<usize>,
    /// In introduction order.
    pub novel_classes: Vec<usize>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub known_test: Vec<usize>,
    pub novel_test_sets: Vec<NovelTestSet>,
    pub seed: u64,
}

fn rows_of(labels: &[usize], class: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&r| labels[r] == class).collect()
}

/// Sizes of the train/validation/test parts of a class of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (2.0 * n as f64 / 3.0).round() as usize;
    let validation = (n as f64 / 6.0).round() as usize;
    (train, validation, n - train - validation)
}

/// Stratified 2/3, 1/6, 1/6 split of every known class and `n_test_sets`
/// novel test sets, each drawing `⌊n/6⌋` rows per novel class without
/// replacement. Sets come from independent per-set streams.
pub fn make_splits(
    labels: &[usize],
    known: &[usize],
    novel: &[usize],
    n_test_sets: usize,
    seed: u64,
) -> Result<SplitBundle> {
    let known_set: HashSet<usize> = known.iter().copied().collect();
    let novel_set: HashSet<usize> = novel.iter().copied().collect();
    if known_set.len() != known.len() || novel_set.len() != novel.len() {
        return Err(Error::InvalidConfig("duplicate class in known or novel list".into()));
    }
    if !known_set.is_disjoint(&novel_set) {
        return Err(Error::InvalidConfig("known and novel classes overlap".into()));
    }
    if known.len() < 2 {
        return Err(Error::InvalidConfig("at least two known classes".into()));
    }
    if n_test_sets == 0 {
        return Err(Error::InvalidConfig("at least one test set".into()));
    }
    for &c in known.iter().chain(novel) {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < MIN_CLASS_SIZE {
            return Err(Error::InvalidConfig(format!(
                "class {c} has {n} samples; at least {MIN_CLASS_SIZE} are required"
            )));
        }
    }

    let mut rng = stage_rng(seed, "split-known");
    let (mut train, mut validation, mut known_test) = (Vec::new(), Vec::new(), Vec::new());
    for &c in known {
        let mut rows = rows_of(labels, c);
        rows.shuffle(&mut rng);
        let (nt, nv, _) = split_sizes(rows.len());
        train.extend_from_slice(&rows[..nt]);
        validation.extend_from_slice(&rows[nt..nt + nv]);
        known_test.extend_from_slice(&rows[nt + nv..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    known_test.sort_unstable();

    let novel_rows: Vec<Vec<usize>> = novel.iter().map(|&c| rows_of(labels, c)).collect();
    let novel_seed = derive_seed(seed, "split-novel");
    let novel_test_sets = (0..n_test_sets)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(novel_seed, &i.to_string()));
            NovelTestSet {
                per_class: novel_rows
                    .iter()
                    .map(|rows| {
                        index::sample(&mut rng, rows.len(), rows.len() / 6)
                            .into_iter()
                            .map(|j| rows[j])
                            .collect()
                    })
                    .collect(),
            }
        })
        .collect();

    Ok(SplitBundle {
        known_classes: known.to_vec(),
        novel_classes: novel.to_vec(),
        train,
        validation,
        known_test,
        novel_test_sets,
        seed,
    })
}

impl SplitBundle {
    /// Checks every structural invariant of the bundle against `labels`.
    pub fn verify(&self, labels: &[usize]) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidDataset(m));
        let known: HashSet<usize> = self.known_classes.iter().copied().collect();
        let parts = [
            ("train", &self.train),
            ("validation", &self.validation),
            ("known_test", &self.known_test),
        ];
        let mut seen = HashSet::new();
        for (name, rows) in parts {
            for &r in rows.iter() {
                if r >= labels.len() {
                    return fail(format!("{name} row {r} out of range"));
                }
                if !known.contains(&labels[r]) {
                    return fail(format!("{name} row {r} is not from a known class"));
                }
                if !seen.insert(r) {
                    return fail(format!("row {r} appears twice across known splits"));
                }
            }
        }
        for &c in &self.known_classes {
            let n = labels.iter().filter(|&&l| l == c).count();
            let count = |rows: &[usize]| rows.iter().filter(|&&r| labels[r] == c).count();
            let (nt, nv, ns) = (count(&self.train), count(&self.validation), count(&self.known_test));
            if (nt, nv, ns) != split_sizes(n) {
                return fail(format!("class {c} split {nt}/{nv}/{ns} from {n} samples"));
            }
            let sixth = n as f64 / 6.0;
            if (nv as f64 - sixth).abs() > 1.0 || (ns as f64 - sixth).abs() > 1.0 {
                return fail(format!("class {c} validation/test sizes stray from n/6"));
            }
        }
        for (i, set) in self.novel_test_sets.iter().enumerate() {
            if set.per_class.len() != self.novel_classes.len() {
                return fail(format!("test set {i} has the wrong number of novel classes"));
            }
            for (rows, &c) in set.per_class.iter().zip(&self.novel_classes) {
                let n = labels.iter().filter(|&&l| l == c).count();
                if rows.len() != n / 6 {
                    return fail(format!("test set {i} draws {} rows of class {c}", rows.len()));
                }
                let unique: HashSet<&usize> = rows.iter().collect();
                if unique.len() != rows.len() {
                    return fail(format!("test set {i} repeats a row of class {c}"));
                }
                if rows.iter().any(|&r| labels[r] != c) {
                    return fail(format!("test set {i} mislabels class {c}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<usize> {
        let mut l = vec![0; 12];
        l.extend(vec![1; 30]);
        l.extend(vec![2; 13]);
        l.extend(vec![3; 7]);
        l
    }

    #[test]
    fn twelve_sample_class() {
        assert_eq!(split_sizes(12), (8, 2, 2));
        let b = make_splits(&labels(), &[0, 1], &[2, 3], 100, 4).unwrap();
        b.verify(&labels()).unwrap();
        assert_eq!(b.train.iter().filter(|&&r| r < 12).count(), 8);
    }

    #[test]
    fn novel_floor_rule_and_set_count() {
        let b = make_splits(&labels(), &[0, 1], &[2, 3], 100, 4).unwrap();
        assert_eq!(b.novel_test_sets.len(), 100);
        assert!(b.novel_test_sets.iter().all(|s| s.per_class[0].len() == 2 && s.per_class[1].len() == 1));
    }

    #[test]
    fn rejections() {
        assert!(make_splits(&labels(), &[0, 1], &[1, 2], 10, 0).is_err());
        let small = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        assert!(matches!(make_splits(&small, &[0, 1], &[], 10, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = make_splits(&labels(), &[0, 1], &[2, 3], 20, 9).unwrap();
        assert_eq!(a, make_splits(&labels(), &[0, 1], &[2, 3], 20, 9).unwrap());
        assert_ne!(a, make_splits(&labels(), &[0, 1], &[2, 3], 20, 10).unwrap());
    }

    #[test]
    fn incremental_rows() {
        let set = NovelTestSet {
            per_class: vec![vec![7, 8], vec![9]],
        };
        assert_eq!(set.rows_with_first(0, &[1, 2]), vec![1, 2]);
        assert_eq!(set.rows_with_first(2, &[1]), vec![1, 7, 8, 9]);
    }
}
