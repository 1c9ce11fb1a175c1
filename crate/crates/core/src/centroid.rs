//! Per-class latent centroids shared by both pipelines.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// One centroid row per known class. Row `i` belongs to model class `i`,
/// whose dataset-level identifier is `class_ids[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    pub centroids: Array2<f64>,
    pub class_ids: Vec<usize>,
}

impl CentroidSet {
    pub fn new(centroids: Array2<f64>, class_ids: Vec<usize>) -> Result<Self> {
        if centroids.nrows() != class_ids.len() {
            return Err(shape_err(format!(
                "{} centroid rows for {} class ids",
                centroids.nrows(),
                class_ids.len()
            )));
        }
        if centroids.nrows() < 2 {
            return Err(Error::InvalidInput("at least two centroids are required".into()));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate class id in centroid set".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("centroids must be finite".into()));
        }
        Ok(Self {
            centroids,
            class_ids,
        })
    }

    /// Arithmetic mean of `embeddings` per model class. `labels[j]` indexes
    /// into `class_ids`.
    pub fn from_embeddings(
        embeddings: &Array2<f64>,
        labels: &[usize],
        class_ids: Vec<usize>,
    ) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(shape_err("one label per embedding row is required"));
        }
        let c = class_ids.len();
        let mut sums = Array2::<f64>::zeros((c, embeddings.ncols()));
        let mut counts = vec![0usize; c];
        for (row, &label) in embeddings.axis_iter(Axis(0)).zip(labels) {
            if label >= c {
                return Err(Error::InvalidInput(format!("label {label} outside 0..{c}")));
            }
            let mut s = sums.row_mut(label);
            s += &row;
            counts[label] += 1;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidDataset(format!(
                "class {} has no samples",
                class_ids[empty]
            )));
        }
        for (mut row, &n) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
            row /= n as f64;
        }
        Self::new(sums, class_ids)
    }

    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn squared_distances(&self, embedding: ArrayView1<f64>) -> Vec<f64> {
        self.centroids
            .axis_iter(Axis(0))
            .map(|c| squared_distance(c, embedding))
            .collect()
    }

    /// Nearest centroid index and its squared distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, embedding: ArrayView1<f64>) -> (usize, f64) {
        argmin(&self.squared_distances(embedding))
    }
}

pub(crate) fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// First index of the minimum.
pub(crate) fn argmin(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}
