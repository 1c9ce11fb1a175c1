use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::decision::OpenLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Summary<T> {
    pub macro_f1: f64,
    pub per_class: Vec<(T, f64)>,
    /// Universe classes with no true and no predicted instance. They
    /// contribute F1 = 0 to the average.
    pub empty_classes: Vec<T>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

/// Unweighted mean of per-class F1 over `universe`.
///
/// Every true label must belong to the universe. A prediction outside the
/// universe (for instance a novel prediction when only known classes are
/// scored) is a miss for its true class and a false positive for nobody.
pub fn macro_f1<T: Eq + Hash + Clone>(truth: &[T], predicted: &[T], universe: &[T]) -> Result<F1Summary<T>> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidInput(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if universe.is_empty() {
        return Err(Error::InvalidInput("empty class universe".into()));
    }
    let index: HashMap<&T, usize> = universe.iter().enumerate().map(|(i, c)| (c, i)).collect();
    if index.len() != universe.len() {
        return Err(Error::InvalidInput("duplicate class in universe".into()));
    }
    let mut counts = vec![Counts::default(); universe.len()];
    for (t, p) in truth.iter().zip(predicted) {
        let ti = *index
            .get(t)
            .ok_or_else(|| Error::InvalidInput("true label outside the class universe".into()))?;
        if t == p {
            counts[ti].tp += 1;
        } else {
            counts[ti].fn_ += 1;
            if let Some(&pi) = index.get(p) {
                counts[pi].fp += 1;
            }
        }
    }
    let mut per_class = Vec::with_capacity(universe.len());
    let mut empty_classes = Vec::new();
    for (class, c) in universe.iter().zip(&counts) {
        if c.tp + c.fn_ == 0 && c.tp + c.fp == 0 {
            empty_classes.push(class.clone());
        }
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push((class.clone(), f1));
    }
    let macro_f1 = per_class.iter().map(|(_, f)| f).sum::<f64>() / universe.len() as f64;
    Ok(F1Summary {
        macro_f1,
        per_class,
        empty_classes,
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Row and column layout of an open-set confusion matrix: one row per
/// known class then one per novel class, one column per known class plus
/// an aggregated novel column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionLayout {
    pub known: Vec<usize>,
    pub novel: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// True class ids, knowns first.
    pub rows: Vec<usize>,
    pub columns: Vec<OpenLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |id: usize| class_names.get(id).cloned().unwrap_or_else(|| id.to_string());
        let mut out = String::from("true");
        for c in &self.columns {
            match c {
                OpenLabel::Known(id) => out.push_str(&format!(",{}", name(*id))),
                OpenLabel::Novel => out.push_str(",Novel"),
            }
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.counts) {
            out.push_str(&name(*r));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Counts `(true class, predicted label)` pairs under `layout`.
pub fn confusion(truth: &[usize], predicted: &[OpenLabel], layout: &ConfusionLayout) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidInput("truth and predictions differ in length".into()));
    }
    let rows: Vec<usize> = layout.known.iter().chain(&layout.novel).copied().collect();
    let mut columns: Vec<OpenLabel> = layout.known.iter().map(|&k| OpenLabel::Known(k)).collect();
    columns.push(OpenLabel::Novel);
    let row_index: HashMap<usize, usize> = rows.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let col_index: HashMap<OpenLabel, usize> = columns.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut counts = vec![vec![0u64; columns.len()]; rows.len()];
    for (t, p) in truth.iter().zip(predicted) {
        let r = row_index
            .get(t)
            .ok_or_else(|| Error::InvalidInput(format!("true class {t} not in layout")))?;
        let c = col_index
            .get(p)
            .ok_or_else(|| Error::InvalidInput(format!("predicted label {p:?} not in layout")))?;
        counts[*r][*c] += 1;
    }
    Ok(ConfusionMatrix {
        rows,
        columns,
        counts,
    })
}

/// `100 · (a − b) / b`; `None` when the baseline is zero.
pub fn relative_change(f1_a: f64, f1_b: f64) -> Option<f64> {
    if f1_b == 0.0 {
        None
    } else {
        Some(100.0 * (f1_a - f1_b) / f1_b)
    }
}
