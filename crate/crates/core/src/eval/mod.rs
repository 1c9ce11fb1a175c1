//! Evaluation: macro-F1, confusion matrices and the incremental-novel-class
//! protocol over resampled test sets.

mod metrics;
mod report;

pub use metrics::{confusion, macro_f1, relative_change, ConfusionLayout, ConfusionMatrix, F1Summary};
pub use report::{
    incremental_novel_curve, open_set_universe, scored_set, truth_label, CurvePoint, EvalReport, PipelineCurve,
    PipelineScores, RelativeChangePoint, ThresholdSummary,
};
