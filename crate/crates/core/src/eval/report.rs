use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{relative_change, ConfusionMatrix};
use crate::data::SplitBundle;
use crate::decision::{min_mean_max, OpenLabel, ScoredSet, SweepTable};
use crate::error::{Error, Result};

/// Rule values of one pipeline for every dataset row, plus the threshold
/// the pipeline decides with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineScores {
    pub name: String,
    pub threshold: f64,
    pub rule_values: Vec<f64>,
    /// Class id of the nearest centroid per row.
    pub nearest: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of novel classes mixed into the test sets.
    pub novel_classes: usize,
    pub f1_min: f64,
    pub f1_mean: f64,
    pub f1_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCurve {
    pub name: String,
    pub threshold: f64,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeChangePoint {
    pub novel_classes: usize,
    /// Percent change of the first pipeline's mean F1 over the second's;
    /// `None` when the baseline is zero.
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub tau_star: f64,
    pub tau_star_fallback: bool,
    pub alpha: f64,
    pub outlier_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub curves: Vec<PipelineCurve>,
    pub relative_change: Vec<RelativeChangePoint>,
    /// Mean of the defined relative changes over k ≥ 1.
    pub mean_relative_change: Option<f64>,
    pub thresholds: ThresholdSummary,
    /// Per pipeline, the confusion matrix of test set 0 with all novel classes.
    pub confusion: Vec<(String, ConfusionMatrix)>,
    pub sweeps: Vec<SweepTable>,
}

impl EvalReport {
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("pipeline,novel_classes,f1_min,f1_mean,f1_max\n");
        for c in &self.curves {
            for p in &c.points {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    c.name, p.novel_classes, p.f1_min, p.f1_mean, p.f1_max
                ));
            }
        }
        out
    }

    /// Builds relative-change entries from the first two curves.
    pub fn fill_relative_change(&mut self) {
        let (Some(a), Some(b)) = (self.curves.first(), self.curves.get(1)) else {
            return;
        };
        self.relative_change = a
            .points
            .iter()
            .zip(&b.points)
            .map(|(pa, pb)| RelativeChangePoint {
                novel_classes: pa.novel_classes,
                percent: relative_change(pa.f1_mean, pb.f1_mean),
            })
            .collect();
        let defined: Vec<f64> = self
            .relative_change
            .iter()
            .filter(|p| p.novel_classes >= 1)
            .filter_map(|p| p.percent)
            .collect();
        self.mean_relative_change =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    }
}

pub fn truth_label(class: usize, known: &[usize]) -> OpenLabel {
    if known.contains(&class) {
        OpenLabel::Known(class)
    } else {
        OpenLabel::Novel
    }
}

/// Known classes plus the aggregated novel label.
pub fn open_set_universe(known: &[usize]) -> Vec<OpenLabel> {
    known
        .iter()
        .map(|&k| OpenLabel::Known(k))
        .chain(std::iter::once(OpenLabel::Novel))
        .collect()
}

pub fn scored_set(rows: &[usize], labels: &[usize], known: &[usize], scores: &PipelineScores) -> ScoredSet {
    ScoredSet {
        truth: rows.iter().map(|&r| truth_label(labels[r], known)).collect(),
        rule_values: rows.iter().map(|&r| scores.rule_values[r]).collect(),
        nearest: rows.iter().map(|&r| scores.nearest[r]).collect(),
    }
}

/// Open-set macro-F1 for k = 0..=#novel novel classes, summarized over the
/// bundle's test sets. At k = 0 only the known classes form the universe.
pub fn incremental_novel_curve(
    pipelines: &[PipelineScores],
    bundle: &SplitBundle,
    labels: &[usize],
) -> Result<Vec<PipelineCurve>> {
    if bundle.novel_test_sets.is_empty() {
        return Err(Error::InvalidConfig("split bundle has no test sets".into()));
    }
    for p in pipelines {
        if !p.threshold.is_finite() {
            return Err(Error::InvalidConfig(format!("pipeline `{}` has no threshold", p.name)));
        }
        if p.rule_values.len() != labels.len() || p.nearest.len() != labels.len() {
            return Err(Error::Shape(format!("pipeline `{}` must score every row", p.name)));
        }
    }
    let known = &bundle.known_classes;
    let n_novel = bundle.novel_classes.len();
    pipelines
        .iter()
        .map(|p| {
            let points = (0..=n_novel)
                .map(|k| {
                    let universe = if k == 0 {
                        known.iter().map(|&c| OpenLabel::Known(c)).collect()
                    } else {
                        open_set_universe(known)
                    };
                    let f1s = bundle
                        .novel_test_sets
                        .par_iter()
                        .map(|set| {
                            let rows = set.rows_with_first(k, &bundle.known_test);
                            scored_set(&rows, labels, known, p).macro_f1(p.threshold, &universe)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (f1_min, f1_mean, f1_max) = min_mean_max(&f1s);
                    Ok(CurvePoint {
                        novel_classes: k,
                        f1_min,
                        f1_mean,
                        f1_max,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PipelineCurve {
                name: p.name.clone(),
                threshold: p.threshold,
                points,
            })
        })
        .collect()
}
