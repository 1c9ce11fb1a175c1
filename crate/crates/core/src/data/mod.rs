//! Tabular ingestion, imputation, encoding, splitting and the synthetic
//! benchmark generator.

mod encode;
mod impute;
mod split;
mod synth;
mod table;

use ndarray::Array2;

pub use encode::{encode, BlockKind, EncodedDataset, FeatureBlock};
pub use impute::{carry_forward_impute, chained_impute, impute_categorical_modes, ChainedImputeConfig};
pub use split::{make_splits, split_sizes, NovelTestSet, SplitBundle, MIN_CLASS_SIZE};
pub use synth::{synth_generate, GroundTruth, SynthCategorical, SynthConfig, SynthDataset};
pub use table::{load_table, parse_table, ColumnData, ColumnKind, ColumnSpec, RawTable, Schema};

use crate::error::{shape_err, Error, Result};

/// Feature rows with dataset-level class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(shape_err("one label per feature row"));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Every label is one of `class_ids` and every class has a sample.
    pub fn check_classes(&self, class_ids: &[usize]) -> Result<()> {
        if let Some(l) = self.labels.iter().find(|l| !class_ids.contains(l)) {
            return Err(Error::InvalidDataset(format!("class {l} is not a known class")));
        }
        if let Some(c) = class_ids.iter().find(|c| !self.labels.contains(c)) {
            return Err(Error::InvalidDataset(format!("class {c} has no samples")));
        }
        Ok(())
    }

    /// Labels as positions in `class_ids`.
    pub fn model_labels(&self, class_ids: &[usize]) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| {
                class_ids
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::InvalidDataset(format!("class {l} is not a known class")))
            })
            .collect()
    }
}
