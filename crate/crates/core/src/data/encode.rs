use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::table::{ColumnData, RawTable};
use super::LabeledData;
use crate::error::{Error, Result};
use crate::gmvae::{Likelihood, ReconstructionBlock};

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    Numeric { mean: f64, std: f64, std_floored: bool },
    OneHot { levels: Vec<String> },
}

/// Encoded columns `start..start + width` derived from one source column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub source: String,
    pub start: usize,
    pub width: usize,
    #[serde(flatten)]
    pub kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub blocks: Vec<FeatureBlock>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledData {
        LabeledData {
            features: self.features.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Likelihood layout for the decoder: Gaussian for numeric blocks,
    /// Bernoulli for one-hot blocks, adjacent runs merged.
    pub fn reconstruction_blocks(&self) -> Vec<ReconstructionBlock> {
        let mut out: Vec<ReconstructionBlock> = Vec::new();
        for b in &self.blocks {
            let likelihood = match b.kind {
                BlockKind::Numeric { .. } => Likelihood::Gaussian,
                BlockKind::OneHot { .. } => Likelihood::Bernoulli,
            };
            match out.last_mut() {
                Some(last) if last.likelihood == likelihood => last.width += b.width,
                _ => out.push(ReconstructionBlock {
                    width: b.width,
                    likelihood,
                }),
            }
        }
        out
    }

    /// The level a one-hot block encodes in `row`.
    pub fn decode_level<'a>(&'a self, row: ArrayView1<f64>, block: &'a FeatureBlock) -> Option<&'a str> {
        let BlockKind::OneHot { levels } = &block.kind else {
            return None;
        };
        let hot: Vec<usize> = (0..block.width).filter(|&i| row[block.start + i] == 1.0).collect();
        (hot.len() == 1).then(|| levels[hot[0]].as_str())
    }
}

/// z-scores numeric columns with statistics of `train_rows` (population
/// standard deviation, floored) and one-hot encodes categoricals.
pub fn encode(table: &RawTable, train_rows: &[usize]) -> Result<EncodedDataset> {
    if table.missing_count() > 0 {
        return Err(Error::InvalidDataset("impute missing cells before encoding".into()));
    }
    if train_rows.is_empty() {
        return Err(Error::InvalidDataset("no training rows for normalization statistics".into()));
    }
    if let Some(&r) = train_rows.iter().find(|&&r| r >= table.len()) {
        return Err(Error::InvalidInput(format!("training row {r} out of range")));
    }
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut column_values: Vec<Vec<f64>> = Vec::new();
    for ((name, spec), col) in table.schema.columns.iter().zip(&table.columns) {
        match col {
            ColumnData::Numeric(v) if spec.kind == super::ColumnKind::Numeric => {
                let v: Vec<f64> = v.iter().map(|x| x.expect("no missing cells")).collect();
                let n = train_rows.len() as f64;
                let mean = train_rows.iter().map(|&r| v[r]).sum::<f64>() / n;
                let var = train_rows.iter().map(|&r| (v[r] - mean).powi(2)).sum::<f64>() / n;
                let std_floored = var.sqrt() < STD_FLOOR;
                let std = var.sqrt().max(STD_FLOOR);
                column_values.push(v.iter().map(|x| (x - mean) / std).collect());
                blocks.push(FeatureBlock {
                    source: name.clone(),
                    start,
                    width: 1,
                    kind: BlockKind::Numeric {
                        mean,
                        std,
                        std_floored,
                    },
                });
                start += 1;
            }
            ColumnData::Categorical(v) => {
                let levels = spec.levels.clone().expect("validated schema");
                for l in 0..levels.len() {
                    column_values.push(v.iter().map(|x| f64::from(u8::from(*x == Some(l)))).collect());
                }
                blocks.push(FeatureBlock {
                    source: name.clone(),
                    start,
                    width: levels.len(),
                    kind: BlockKind::OneHot { levels },
                });
                start += blocks.last().expect("pushed").width;
            }
            _ => {}
        }
    }
    let n = table.len();
    let features = Array2::from_shape_fn((n, column_values.len()), |(r, c)| column_values[c][r]);
    Ok(EncodedDataset {
        features,
        labels: table.labels().to_vec(),
        class_names: table.class_names.clone(),
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::table::{parse_table, Schema};
    use ndarray::Axis;

    fn table() -> RawTable {
        let schema: Schema = serde_json::from_str(
            r#"{"a": {"kind": "numeric"}, "s": {"kind": "categorical", "levels": ["p", "q", "r"]},
                "y": {"kind": "label"}}"#,
        )
        .unwrap();
        parse_table("a,s,y\n0,q,L\n2,p,L\n5,r,M\n", &schema).unwrap()
    }

    #[test]
    fn z_scores_use_training_rows() {
        let e = encode(&table(), &[0, 1]).unwrap();
        assert_eq!(e.features.column(0).to_vec(), vec![-1.0, 1.0, 4.0]);
        assert_eq!(e.features.row(0).to_vec(), vec![-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(e.width(), 4);
    }

    #[test]
    fn one_hot_round_trip() {
        let t = table();
        let e = encode(&t, &[0, 1, 2]).unwrap();
        let block = &e.blocks[1];
        let decoded: Vec<&str> = e.features.axis_iter(Axis(0)).map(|r| e.decode_level(r, block).unwrap()).collect();
        assert_eq!(decoded, vec!["q", "p", "r"]);
        assert_eq!(
            e.reconstruction_blocks(),
            vec![
                ReconstructionBlock { width: 1, likelihood: Likelihood::Gaussian },
                ReconstructionBlock { width: 3, likelihood: Likelihood::Bernoulli },
            ]
        );
    }

    #[test]
    fn constant_column_is_floored() {
        let e = encode(&table(), &[0]).unwrap();
        assert!(matches!(e.blocks[0].kind, BlockKind::Numeric { std_floored: true, .. }));
        assert!(e.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_cells_rejected() {
        let schema: Schema = serde_json::from_str(r#"{"a": {"kind": "numeric"}, "y": {"kind": "label"}}"#).unwrap();
        let t = parse_table("a,y\n,L\n1,L\n", &schema).unwrap();
        assert!(encode(&t, &[1]).is_err());
    }
}
