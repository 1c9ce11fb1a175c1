//! Open-set decision rules on latent embeddings: the uncertainty ratio,
//! its threshold rule, validation-F1 saturation threshold selection and
//! threshold-neighbourhood sweeps.

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centroid::{argmin, CentroidSet};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::iiloss::nearest_rank_percentile;

/// Predicted or true label in the open-set problem. `Known` carries the
/// dataset-level class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpenLabel {
    Known(usize),
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenSetPrediction {
    pub label: OpenLabel,
    /// The uncertainty or outlier score compared against the threshold.
    pub rule_value: f64,
    /// Class id of the nearest centroid.
    pub nearest_class: usize,
}

/// Shared thresholding step of both rules: known when `value ≤ threshold`.
pub fn threshold_rule(rule_value: f64, nearest_class: usize, threshold: f64) -> OpenSetPrediction {
    let label = if rule_value <= threshold {
        OpenLabel::Known(nearest_class)
    } else {
        OpenLabel::Novel
    };
    OpenSetPrediction {
        label,
        rule_value,
        nearest_class,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub value: f64,
    /// Row index of the nearest centroid.
    pub nearest: usize,
    /// Set when the embedding coincides with every centroid (0/0).
    pub degenerate: bool,
}

/// Distance to the nearest centroid divided by the mean distance to all
/// other centroids.
pub fn uncertainty(embedding: ArrayView1<f64>, centroids: &CentroidSet) -> Result<Uncertainty> {
    if embedding.len() != centroids.dim() {
        return Err(Error::Shape(format!(
            "embedding width {} != centroid width {}",
            embedding.len(),
            centroids.dim()
        )));
    }
    let dists: Vec<f64> = centroids
        .squared_distances(embedding)
        .into_iter()
        .map(f64::sqrt)
        .collect();
    let (nearest, d_near) = argmin(&dists);
    let others: f64 = dists
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != nearest)
        .map(|(_, d)| d)
        .sum();
    let mean_other = others / (dists.len() - 1) as f64;
    if mean_other == 0.0 {
        return Ok(Uncertainty {
            value: 1.0,
            nearest,
            degenerate: true,
        });
    }
    Ok(Uncertainty {
        value: d_near / mean_other,
        nearest,
        degenerate: false,
    })
}

pub fn predict_open_set_u(
    embedding: ArrayView1<f64>,
    centroids: &CentroidSet,
    tau: f64,
) -> Result<OpenSetPrediction> {
    let u = uncertainty(embedding, centroids)?;
    Ok(threshold_rule(u.value, centroids.class_ids[u.nearest], tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdSelectionConfig {
    pub tau_grid: Vec<f64>,
    pub epsilon1: f64,
    pub epsilon2: f64,
}

impl Default for ThresholdSelectionConfig {
    fn default() -> Self {
        Self {
            tau_grid: uniform_grid(0.01),
            epsilon1: 1.0,
            epsilon2: 0.25,
        }
    }
}

/// `0, step, 2·step, …, 1` with each point computed as `j / n` to avoid
/// accumulated drift.
pub fn uniform_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|j| j as f64 / n as f64).collect()
}

impl ThresholdSelectionConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.tau_grid;
        if g.len() < 3 {
            return Err(Error::InvalidConfig("τ grid needs at least 3 points".into()));
        }
        if g.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidConfig("τ grid values must lie in [0, 1]".into()));
        }
        if g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("τ grid must be strictly increasing".into()));
        }
        if !(self.epsilon1 > self.epsilon2 && self.epsilon2 > 0.0) {
            return Err(Error::InvalidConfig("need ε₁ > ε₂ > 0".into()));
        }
        Ok(())
    }
}

/// Validation macro-F1 as a function of the uncertainty threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub tau_grid: Vec<f64>,
    pub f1_values: Vec<f64>,
    /// Forward differences; entry `j` belongs to `tau_grid[j]`.
    pub derivative: Vec<f64>,
    pub tau_tilde: Option<f64>,
    pub tau_star: Option<f64>,
}

impl ThresholdCurve {
    /// Builds a curve from precomputed F1 values, filling the derivative and
    /// the saturation points.
    pub fn from_values(
        tau_grid: Vec<f64>,
        f1_values: Vec<f64>,
        config: &ThresholdSelectionConfig,
    ) -> Result<Self> {
        if tau_grid.len() != f1_values.len() {
            return Err(Error::Shape("one F1 value per grid point".into()));
        }
        let derivative: Vec<f64> = tau_grid
            .windows(2)
            .zip(f1_values.windows(2))
            .map(|(t, f)| (f[1] - f[0]) / (t[1] - t[0]))
            .collect();
        let (tilde, star) = saturation_indices(&derivative, config.epsilon1, config.epsilon2);
        Ok(Self {
            tau_tilde: tilde.map(|j| tau_grid[j]),
            tau_star: star.map(|j| tau_grid[j]),
            tau_grid,
            f1_values,
            derivative,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,f1,f1_prime\n");
        for (j, (t, f)) in self.tau_grid.iter().zip(&self.f1_values).enumerate() {
            match self.derivative.get(j) {
                Some(d) => out.push_str(&format!("{t},{f},{d}\n")),
                None => out.push_str(&format!("{t},{f},\n")),
            }
        }
        out
    }
}

fn saturation_indices(derivative: &[f64], eps1: f64, eps2: f64) -> (Option<usize>, Option<usize>) {
    let tilde = derivative.iter().position(|&d| d >= eps1);
    let star = tilde.and_then(|t| {
        derivative
            .iter()
            .enumerate()
            .skip(t + 1)
            .find(|&(_, &d)| d <= eps2)
            .map(|(j, _)| j)
    });
    (tilde, star)
}

/// Validation F1 of the uncertainty rule at every grid threshold. Labels are
/// dataset class ids of known classes; a novel prediction counts only as a
/// miss for the true class.
pub fn f1_vs_tau_curve(
    embeddings: &Array2<f64>,
    labels: &[usize],
    centroids: &CentroidSet,
    config: &ThresholdSelectionConfig,
) -> Result<ThresholdCurve> {
    config.validate()?;
    if embeddings.nrows() == 0 {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape("one label per validation embedding".into()));
    }
    let scored = embeddings
        .axis_iter(Axis(0))
        .map(|e| uncertainty(e, centroids))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<OpenLabel> = labels.iter().map(|&c| OpenLabel::Known(c)).collect();
    let universe: Vec<OpenLabel> = centroids.class_ids.iter().map(|&c| OpenLabel::Known(c)).collect();
    let f1_values = config
        .tau_grid
        .par_iter()
        .map(|&tau| {
            let pred: Vec<OpenLabel> = scored
                .iter()
                .map(|u| threshold_rule(u.value, centroids.class_ids[u.nearest], tau).label)
                .collect();
            macro_f1(&truth, &pred, &universe).map(|s| s.macro_f1)
        })
        .collect::<Result<Vec<_>>>()?;
    ThresholdCurve::from_values(config.tau_grid.clone(), f1_values, config)
}

/// The saturation threshold τ*: first grid point after τ̃ whose forward
/// difference has dropped to ε₂ or below.
pub fn select_threshold_saturation(curve: &ThresholdCurve, config: &ThresholdSelectionConfig) -> Result<f64> {
    let (tilde, star) = saturation_indices(&curve.derivative, config.epsilon1, config.epsilon2);
    match (tilde, star) {
        (None, _) => Err(Error::NoSaturation(format!(
            "no forward difference reaches ε₁ = {}",
            config.epsilon1
        ))),
        (Some(t), None) => Err(Error::NoSaturation(format!(
            "F1 never flattens below ε₂ = {} after τ̃ = {}",
            config.epsilon2, curve.tau_grid[t]
        ))),
        (Some(_), Some(s)) => Ok(curve.tau_grid[s]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub tau: f64,
    /// True when no saturation point existed and the arg-max F1 grid point
    /// was used instead.
    pub fallback: bool,
}

pub fn select_threshold_or_fallback(curve: &ThresholdCurve, config: &ThresholdSelectionConfig) -> ThresholdChoice {
    match select_threshold_saturation(curve, config) {
        Ok(tau) => ThresholdChoice {
            tau,
            fallback: false,
        },
        Err(_) => {
            let mut best = 0;
            for (j, &f) in curve.f1_values.iter().enumerate() {
                if f > curve.f1_values[best] {
                    best = j;
                }
            }
            ThresholdChoice {
                tau: curve.tau_grid[best],
                fallback: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepRule {
    Uncertainty,
    OutlierScore,
}

impl std::str::FromStr for SweepRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertainty" => Ok(SweepRule::Uncertainty),
            "outlier_score" => Ok(SweepRule::OutlierScore),
            other => Err(Error::InvalidInput(format!("unknown sweep rule `{other}`"))),
        }
    }
}

/// Rule values for one test set, ready to be re-thresholded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub truth: Vec<OpenLabel>,
    pub rule_values: Vec<f64>,
    pub nearest: Vec<usize>,
}

impl ScoredSet {
    pub fn predict(&self, threshold: f64) -> Vec<OpenLabel> {
        self.rule_values
            .iter()
            .zip(&self.nearest)
            .map(|(&v, &c)| threshold_rule(v, c, threshold).label)
            .collect()
    }

    pub fn macro_f1(&self, threshold: f64, universe: &[OpenLabel]) -> Result<f64> {
        Ok(macro_f1(&self.truth, &self.predict(threshold), universe)?.macro_f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// τ for the uncertainty rule, α for the outlier-score rule.
    pub param: f64,
    pub threshold: f64,
    pub f1_min: f64,
    pub f1_mean: f64,
    pub f1_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rule: SweepRule,
    pub center: f64,
    pub halfwidth: f64,
    pub step: f64,
    /// Set when part of the requested interval fell outside the valid range.
    pub clipped: bool,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,threshold,f1_min,f1_mean,f1_max\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.param, p.threshold, p.f1_min, p.f1_mean, p.f1_max
            ));
        }
        out
    }
}

pub struct SweepRequest<'a> {
    pub rule: SweepRule,
    pub center: f64,
    pub halfwidth: f64,
    pub step: f64,
    /// Training outlier scores; required by the outlier-score rule, where
    /// each swept α is refitted to a threshold.
    pub training_scores: Option<&'a [f64]>,
}

/// Open-set macro-F1 (min/mean/max over `sets`) across a neighbourhood of
/// the chosen threshold parameter.
pub fn sweep_thresholds(sets: &[ScoredSet], universe: &[OpenLabel], req: &SweepRequest<'_>) -> Result<SweepTable> {
    if sets.is_empty() {
        return Err(Error::InvalidInput("no test sets to sweep".into()));
    }
    if !(req.halfwidth >= 0.0) || !(req.step > 0.0) {
        return Err(Error::InvalidConfig("halfwidth must be ≥ 0 and step > 0".into()));
    }
    let (lo_ok, hi_ok) = match req.rule {
        SweepRule::Uncertainty => (0.0, 1.0),
        SweepRule::OutlierScore => (0.0, 1.0 - f64::EPSILON),
    };
    let m = (req.halfwidth / req.step).round() as i64;
    let mut clipped = false;
    let mut params: Vec<f64> = Vec::new();
    for i in -m..=m {
        let p = req.center + i as f64 * req.step;
        let q = p.clamp(lo_ok, hi_ok);
        if q != p {
            clipped = true;
        }
        if params.last().is_none_or(|&last| q > last) {
            params.push(q);
        }
    }
    let training_scores = match req.rule {
        SweepRule::OutlierScore => Some(req.training_scores.ok_or_else(|| {
            Error::InvalidInput("outlier-score sweep needs training scores".into())
        })?),
        SweepRule::Uncertainty => None,
    };
    let points = params
        .par_iter()
        .map(|&param| {
            let threshold = match training_scores {
                Some(scores) => nearest_rank_percentile(scores, param)?,
                None => param,
            };
            let f1s = sets
                .iter()
                .map(|s| s.macro_f1(threshold, universe))
                .collect::<Result<Vec<_>>>()?;
            let (min, mean, max) = min_mean_max(&f1s);
            Ok(SweepPoint {
                param,
                threshold,
                f1_min: min,
                f1_mean: mean,
                f1_max: max,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        rule: req.rule,
        center: req.center,
        halfwidth: req.halfwidth,
        step: req.step,
        clipped,
        points,
    })
}

pub(crate) fn min_mean_max(values: &[f64]) -> (f64, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    // Summation rounding can push the mean a hair outside [min, max].
    (min, mean.clamp(min, max), max)
}
