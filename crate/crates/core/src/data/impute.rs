use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::table::{ColumnData, ColumnKind, RawTable};
use crate::error::{Error, Result};

const RIDGE: f64 = 1e-6;

/// Rows of each patient sorted by encounter order.
fn patient_histories(table: &RawTable) -> Result<Vec<Vec<usize>>> {
    let (Some(pid), Some(ord)) = (
        table.schema.column_of_kind(ColumnKind::PatientId),
        table.schema.column_of_kind(ColumnKind::EncounterOrder),
    ) else {
        return Err(Error::InvalidDataset(
            "carry-forward needs patient_id and encounter_order columns".into(),
        ));
    };
    let (ColumnData::Text(patients), ColumnData::Numeric(order)) = (&table.columns[pid], &table.columns[ord]) else {
        unreachable!("schema kinds fix the column types");
    };
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (r, p) in patients.iter().enumerate() {
        by_patient.entry(p.as_str()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(by_patient.len());
    for (p, mut rows) in by_patient {
        let key = |r: &usize| order[*r].expect("encounter order is never missing");
        rows.sort_by(|a, b| key(a).total_cmp(&key(b)));
        if rows.windows(2).any(|w| key(&w[0]) == key(&w[1])) {
            return Err(Error::InvalidDataset(format!(
                "patient `{p}` has two encounters with the same order"
            )));
        }
        out.push(rows);
    }
    Ok(out)
}

/// Fills each missing numeric cell with the same patient's most recent
/// earlier observation of that column. Row order is preserved.
pub fn carry_forward_impute(table: &RawTable) -> Result<RawTable> {
    let histories = patient_histories(table)?;
    let mut out = table.clone();
    for c in table.numeric_columns() {
        let ColumnData::Numeric(values) = &mut out.columns[c] else {
            unreachable!()
        };
        for rows in &histories {
            let mut last = None;
            for &r in rows {
                match values[r] {
                    Some(v) => last = Some(v),
                    None => values[r] = last,
                }
            }
        }
    }
    Ok(out)
}

fn mode(counts: &HashMap<usize, usize>) -> Option<usize> {
    // Lowest level index wins ties.
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&level, _)| level)
}

/// Fills missing categorical cells with the patient's most frequent level,
/// or the column's most frequent level when the patient has none.
pub fn impute_categorical_modes(table: &RawTable) -> Result<RawTable> {
    let pid = table.schema.column_of_kind(ColumnKind::PatientId);
    let patients: Option<&Vec<String>> = pid.map(|i| match &table.columns[i] {
        ColumnData::Text(v) => v,
        _ => unreachable!(),
    });
    let mut out = table.clone();
    for c in table.categorical_columns() {
        let ColumnData::Categorical(values) = &mut out.columns[c] else {
            unreachable!()
        };
        let mut global: HashMap<usize, usize> = HashMap::new();
        let mut per_patient: HashMap<&str, HashMap<usize, usize>> = HashMap::new();
        for (r, v) in values.iter().enumerate() {
            if let Some(l) = v {
                *global.entry(*l).or_default() += 1;
                if let Some(p) = patients {
                    *per_patient.entry(p[r].as_str()).or_default().entry(*l).or_default() += 1;
                }
            }
        }
        let fallback = mode(&global);
        for (r, v) in values.iter_mut().enumerate() {
            if v.is_none() {
                let own = patients.and_then(|p| per_patient.get(p[r].as_str())).and_then(mode);
                *v = own.or(fallback);
                if v.is_none() {
                    let name = table.schema.columns.get_index(c).expect("column").0;
                    return Err(Error::InvalidDataset(format!("categorical column `{name}` is entirely missing")));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainedImputeConfig {
    pub trials: usize,
    pub iterations: usize,
}

impl Default for ChainedImputeConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            iterations: 10,
        }
    }
}

/// Least squares with intercept; falls back to a small ridge penalty when
/// the normal equations are not positive definite.
fn fit_linear(design: &DMatrix<f64>, target: &DVector<f64>) -> DVector<f64> {
    let xtx = design.transpose() * design;
    let xty = design.transpose() * target;
    if let Some(ch) = xtx.clone().cholesky() {
        return ch.solve(&xty);
    }
    let n = xtx.nrows();
    let ridged = xtx + DMatrix::identity(n, n) * RIDGE;
    match ridged.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => ridged.pseudo_inverse(1e-12).expect("ridge system is square") * xty,
    }
}

/// Chained-equation imputation of numeric columns: start from column
/// means, then repeatedly regress each incomplete column on all other
/// numeric columns over its observed rows and overwrite its missing cells
/// with the predictions. The result is the mean over `trials` runs.
///
/// Every step is deterministic, so all trials agree; the trial loop keeps
/// the averaging contract explicit.
pub fn chained_impute(table: &RawTable, config: &ChainedImputeConfig) -> Result<RawTable> {
    if config.trials == 0 {
        return Err(Error::InvalidConfig("at least one imputation trial".into()));
    }
    if table.missing_count() == 0 || table.is_empty() {
        return Ok(table.clone());
    }
    let cols = table.numeric_columns();
    let n = table.len();
    let observed: Vec<Vec<Option<f64>>> = cols
        .iter()
        .map(|&c| match &table.columns[c] {
            ColumnData::Numeric(v) => v.clone(),
            _ => unreachable!(),
        })
        .collect();
    for (values, &c) in observed.iter().zip(&cols) {
        if values.iter().all(Option::is_none) {
            let name = table.schema.columns.get_index(c).expect("column").0;
            return Err(Error::InvalidDataset(format!("numeric column `{name}` has no observed values")));
        }
    }
    let incomplete: Vec<usize> = (0..cols.len())
        .filter(|&j| observed[j].iter().any(Option::is_none))
        .collect();

    let mut sum = vec![vec![0.0; n]; cols.len()];
    for _ in 0..config.trials {
        let mut current: Vec<Vec<f64>> = observed
            .iter()
            .map(|v| {
                let obs: Vec<f64> = v.iter().flatten().copied().collect();
                let mean = obs.iter().sum::<f64>() / obs.len() as f64;
                v.iter().map(|x| x.unwrap_or(mean)).collect()
            })
            .collect();
        for _ in 0..config.iterations {
            for &j in &incomplete {
                let others: Vec<usize> = (0..cols.len()).filter(|&k| k != j).collect();
                let design_row = |r: usize| {
                    std::iter::once(1.0).chain(others.iter().map(|&k| current[k][r])).collect::<Vec<f64>>()
                };
                let obs_rows: Vec<usize> = (0..n).filter(|&r| observed[j][r].is_some()).collect();
                let design = DMatrix::from_row_iterator(
                    obs_rows.len(),
                    others.len() + 1,
                    obs_rows.iter().flat_map(|&r| design_row(r)),
                );
                let target = DVector::from_iterator(obs_rows.len(), obs_rows.iter().map(|&r| current[j][r]));
                let coef = fit_linear(&design, &target);
                let predictions: Vec<(usize, f64)> = (0..n)
                    .filter(|&r| observed[j][r].is_none())
                    .map(|r| (r, design_row(r).iter().zip(coef.iter()).map(|(a, b)| a * b).sum()))
                    .collect();
                for (r, v) in predictions {
                    current[j][r] = v;
                }
            }
        }
        for (s, c) in sum.iter_mut().zip(&current) {
            for (a, b) in s.iter_mut().zip(c) {
                *a += b;
            }
        }
    }
    let mut out = table.clone();
    for (j, &c) in cols.iter().enumerate() {
        let ColumnData::Numeric(values) = &mut out.columns[c] else {
            unreachable!()
        };
        for (r, v) in values.iter_mut().enumerate() {
            if v.is_none() {
                *v = Some(sum[j][r] / config.trials as f64);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::table::{parse_table, Schema};

    fn schema(extra: &str) -> Schema {
        serde_json::from_str(&format!(
            r#"{{"pid": {{"kind": "patient_id"}}, "t": {{"kind": "encounter_order"}},
                 "a": {{"kind": "numeric"}}{extra}, "y": {{"kind": "label"}}}}"#
        ))
        .unwrap()
    }

    fn column(t: &RawTable, name: &str) -> Vec<Option<f64>> {
        let i = t.schema.columns.get_index_of(name).unwrap();
        match &t.columns[i] {
            ColumnData::Numeric(v) => v.clone(),
            _ => panic!(),
        }
    }

    #[test]
    fn carry_forward_one_patient() {
        let csv = "pid,t,a,y\np,1,1,L\np,2,,L\np,3,,L\np,4,2,L\np,5,,L\n";
        let t = carry_forward_impute(&parse_table(csv, &schema("")).unwrap()).unwrap();
        assert_eq!(column(&t, "a"), vec![Some(1.0), Some(1.0), Some(1.0), Some(2.0), Some(2.0)]);
    }

    #[test]
    fn carry_forward_keeps_leading_gap_and_isolates_patients() {
        let csv = "pid,t,a,y\nA,1,1,L\nB,1,,L\nA,2,,L\nB,2,5,L\n";
        let t = carry_forward_impute(&parse_table(csv, &schema("")).unwrap()).unwrap();
        assert_eq!(column(&t, "a"), vec![Some(1.0), None, Some(1.0), Some(5.0)]);
    }

    #[test]
    fn carry_forward_follows_encounter_order_not_row_order() {
        let csv = "pid,t,a,y\nA,2,,L\nA,1,7,L\n";
        let t = carry_forward_impute(&parse_table(csv, &schema("")).unwrap()).unwrap();
        assert_eq!(column(&t, "a"), vec![Some(7.0), Some(7.0)]);
    }

    #[test]
    fn duplicate_encounter_rejected() {
        let csv = "pid,t,a,y\nA,1,1,L\nA,1,2,L\n";
        assert!(carry_forward_impute(&parse_table(csv, &schema("")).unwrap()).is_err());
    }

    #[test]
    fn chained_recovers_linear_relation() {
        let extra = r#", "b": {"kind": "numeric"}"#;
        let csv = "pid,t,a,b,y\np,1,1,2,L\np,2,2,4,L\np,3,3,,L\np,4,4,8,L\np,5,5,10,L\n";
        let t = chained_impute(&parse_table(csv, &schema(extra)).unwrap(), &ChainedImputeConfig::default()).unwrap();
        assert!((column(&t, "b")[2].unwrap() - 6.0).abs() < 1e-6);
        assert_eq!(column(&t, "a"), vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0), Some(5.0)]);
    }

    #[test]
    fn chained_on_complete_table_is_identity() {
        let csv = "pid,t,a,y\np,1,1,L\np,2,2,L\n";
        let t = parse_table(csv, &schema("")).unwrap();
        assert_eq!(chained_impute(&t, &ChainedImputeConfig::default()).unwrap(), t);
    }

    #[test]
    fn single_trial_equals_average() {
        let extra = r#", "b": {"kind": "numeric"}, "c": {"kind": "numeric"}"#;
        let csv = "pid,t,a,b,c,y\np,1,1,,3,L\np,2,2,4,,L\np,3,,5,1,L\np,4,4,8,2,L\np,5,5,1,0,L\n";
        let t = parse_table(csv, &schema(extra)).unwrap();
        let one = chained_impute(&t, &ChainedImputeConfig { trials: 1, iterations: 10 }).unwrap();
        let five = chained_impute(&t, &ChainedImputeConfig::default()).unwrap();
        for name in ["a", "b", "c"] {
            for (x, y) in column(&one, name).iter().zip(column(&five, name)) {
                assert!((x.unwrap() - y.unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_missing_column_rejected() {
        let csv = "pid,t,a,y\np,1,,L\np,2,,L\n";
        assert!(chained_impute(&parse_table(csv, &schema("")).unwrap(), &ChainedImputeConfig::default()).is_err());
    }

    #[test]
    fn categorical_modes() {
        let extra = r#", "s": {"kind": "categorical", "levels": ["u", "v"]}"#;
        let csv = "pid,t,a,s,y\nA,1,1,v,L\nA,2,1,,L\nB,1,1,u,L\nC,1,1,u,L\nD,1,1,,L\n";
        let t = impute_categorical_modes(&parse_table(csv, &schema(extra)).unwrap()).unwrap();
        let i = t.schema.columns.get_index_of("s").unwrap();
        assert_eq!(
            t.columns[i],
            ColumnData::Categorical(vec![Some(1), Some(1), Some(0), Some(0), Some(0)])
        );
    }
}
