use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::table::{ColumnData, ColumnKind, ColumnSpec, RawTable, Schema};
use crate::error::{Error, Result};
use crate::training::stage_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCategorical {
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class_names: Vec<String>,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Distance between every pair of class means in units of `sigma`.
    /// Ignored when `means` is given.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Explicit class means, one per class.
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    /// Explicit full covariances, one per class; `sigma²·I` when absent.
    #[serde(default)]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub categorical: Vec<SynthCategorical>,
    /// Probability that any feature cell is blanked.
    #[serde(default)]
    pub missing_rate: f64,
    /// Groups rows into patients with this many encounters each.
    #[serde(default)]
    pub encounters_per_patient: Option<usize>,
}

fn default_separation() -> f64 {
    10.0
}

fn default_sigma() -> f64 {
    1.0
}

/// The generating parameters, for use as an oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_names: Vec<String>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    /// `[categorical column][class][level]`.
    pub categorical_probabilities: Vec<Vec<Vec<f64>>>,
    pub missing_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub table: RawTable,
    pub truth: GroundTruth,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if c < 3 {
            return Err(Error::InvalidConfig("at least three classes".into()));
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig("dim and samples_per_class must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::InvalidConfig("missing_rate outside [0, 1)".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        match &self.means {
            Some(m) if m.len() != c || m.iter().any(|v| v.len() != self.dim) => {
                return Err(Error::InvalidConfig("one mean of width dim per class".into()))
            }
            None if c > self.dim => {
                return Err(Error::InvalidConfig(
                    "equidistant means need dim ≥ number of classes".into(),
                ))
            }
            _ => {}
        }
        if self.categorical.iter().any(|k| k.levels < 2) {
            return Err(Error::InvalidConfig("categorical features need at least two levels".into()));
        }
        if self.encounters_per_patient == Some(0) {
            return Err(Error::InvalidConfig("encounters_per_patient must be positive".into()));
        }
        Ok(())
    }

    /// Means on scaled orthogonal axes, so every pair is exactly
    /// `separation · sigma` apart.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.means {
            return m.clone();
        }
        let scale = self.separation * self.sigma / std::f64::consts::SQRT_2;
        (0..self.class_names.len())
            .map(|c| (0..self.dim).map(|d| if d == c { scale } else { 0.0 }).collect())
            .collect()
    }
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    config.validate()?;
    let c = config.class_names.len();
    let d = config.dim;
    let means = config.class_means();
    let covariances: Vec<Vec<Vec<f64>>> = match &config.covariances {
        Some(cov) => {
            if cov.len() != c || cov.iter().any(|m| m.len() != d || m.iter().any(|r| r.len() != d)) {
                return Err(Error::InvalidConfig("one d×d covariance per class".into()));
            }
            cov.clone()
        }
        None => (0..c)
            .map(|_| {
                (0..d)
                    .map(|i| (0..d).map(|j| if i == j { config.sigma * config.sigma } else { 0.0 }).collect())
                    .collect()
            })
            .collect(),
    };
    let factors: Vec<DMatrix<f64>> = covariances
        .iter()
        .enumerate()
        .map(|(k, cov)| {
            let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
            if (&m - m.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidConfig(format!("covariance of class {k} is not symmetric")));
            }
            m.cholesky()
                .map(|ch| ch.l())
                .ok_or_else(|| Error::InvalidConfig(format!("covariance of class {k} is not positive definite")))
        })
        .collect::<Result<_>>()?;

    let mut rng = stage_rng(seed, "synth");
    let categorical_probabilities: Vec<Vec<Vec<f64>>> = config
        .categorical
        .iter()
        .map(|k| {
            (0..c)
                .map(|_| {
                    let w: Vec<f64> = (0..k.levels).map(|_| (rng.sample::<f64, _>(StandardNormal)).exp()).collect();
                    let s: f64 = w.iter().sum();
                    w.iter().map(|v| v / s).collect()
                })
                .collect()
        })
        .collect();

    let n = c * config.samples_per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut numeric = vec![Vec::with_capacity(n); d];
    let mut cats = vec![Vec::with_capacity(n); config.categorical.len()];
    let mut labels = Vec::with_capacity(n);
    for &slot in &order {
        let class = slot / config.samples_per_class;
        labels.push(class);
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &factors[class] * eps;
        for j in 0..d {
            numeric[j].push(Some(means[class][j] + x[j]));
        }
        for (col, probs) in cats.iter_mut().zip(&categorical_probabilities) {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let p = &probs[class];
            let level = p
                .iter()
                .position(|q| {
                    acc += q;
                    u < acc
                })
                .unwrap_or(p.len() - 1);
            col.push(Some(level));
        }
    }
    if config.missing_rate > 0.0 {
        for col in numeric.iter_mut() {
            for v in col.iter_mut() {
                if rng.random::<f64>() < config.missing_rate {
                    *v = None;
                }
            }
        }
        for col in cats.iter_mut() {
            for v in col.iter_mut() {
                if rng.random::<f64>() < config.missing_rate {
                    *v = None;
                }
            }
        }
    }

    let mut schema = IndexMap::new();
    let mut columns = Vec::new();
    if let Some(m) = config.encounters_per_patient {
        schema.insert("patient".to_owned(), ColumnSpec::of(ColumnKind::PatientId));
        columns.push(ColumnData::Text((0..n).map(|r| format!("p{}", r / m)).collect()));
        schema.insert("encounter".to_owned(), ColumnSpec::of(ColumnKind::EncounterOrder));
        columns.push(ColumnData::Numeric((0..n).map(|r| Some((r % m) as f64)).collect()));
    }
    for (j, col) in numeric.into_iter().enumerate() {
        schema.insert(format!("x{j}"), ColumnSpec::of(ColumnKind::Numeric));
        columns.push(ColumnData::Numeric(col));
    }
    for (j, (col, k)) in cats.into_iter().zip(&config.categorical).enumerate() {
        schema.insert(
            format!("c{j}"),
            ColumnSpec {
                kind: ColumnKind::Categorical,
                levels: Some((0..k.levels).map(|l| format!("l{l}")).collect()),
            },
        );
        columns.push(ColumnData::Categorical(col));
    }
    schema.insert(
        "label".to_owned(),
        ColumnSpec {
            kind: ColumnKind::Label,
            levels: Some(config.class_names.clone()),
        },
    );
    columns.push(ColumnData::Label(labels));
    let table = RawTable::new(Schema { columns: schema }, columns, config.class_names.clone())?;
    Ok(SynthDataset {
        table,
        truth: GroundTruth {
            class_names: config.class_names.clone(),
            means,
            covariances,
            categorical_probabilities,
            missing_rate: config.missing_rate,
            seed,
        },
    })
}
