use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Label,
    PatientId,
    EncounterOrder,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub kind: ColumnKind,
    /// Declared levels for categorical columns, and optionally the class
    /// order for the label column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

impl ColumnSpec {
    pub fn of(kind: ColumnKind) -> Self {
        Self { kind, levels: None }
    }
}

/// Column name → spec, in file order. Serializes as
/// `{"name": {"kind": ..., "levels": [...]}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub columns: IndexMap<String, ColumnSpec>,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        let count = |k| self.columns.values().filter(|c| c.kind == k).count();
        if count(ColumnKind::Label) != 1 {
            return Err(Error::InvalidConfig("schema needs exactly one label column".into()));
        }
        if count(ColumnKind::PatientId) > 1 || count(ColumnKind::EncounterOrder) > 1 {
            return Err(Error::InvalidConfig(
                "at most one patient_id and one encounter_order column".into(),
            ));
        }
        for (name, spec) in &self.columns {
            if spec.kind == ColumnKind::Categorical && spec.levels.as_ref().is_none_or(Vec::is_empty) {
                return Err(Error::InvalidConfig(format!("categorical column `{name}` declares no levels")));
            }
            if let Some(levels) = &spec.levels {
                let mut sorted = levels.clone();
                sorted.sort();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::InvalidConfig(format!("duplicate level in column `{name}`")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let schema: Schema = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn label_column(&self) -> &str {
        self.columns
            .iter()
            .find(|(_, c)| c.kind == ColumnKind::Label)
            .map(|(n, _)| n.as_str())
            .expect("validated schema has a label column")
    }

    pub fn column_of_kind(&self, kind: ColumnKind) -> Option<usize> {
        self.columns.values().position(|c| c.kind == kind)
    }
}

/// Typed cells of one column. `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    /// Index into the column's declared levels.
    Categorical(Vec<Option<usize>>),
    /// Class id: index into [`RawTable::class_names`].
    Label(Vec<usize>),
    /// Patient ids and ignored columns, kept verbatim.
    Text(Vec<String>),
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
            ColumnData::Label(v) => v.len(),
            ColumnData::Text(v) => v.len(),
        }
    }

    fn select(&self, rows: &[usize]) -> Self {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical(v) => ColumnData::Categorical(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Label(v) => ColumnData::Label(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Text(v) => ColumnData::Text(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }
}

/// A parsed table in schema column order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub schema: Schema,
    pub columns: Vec<ColumnData>,
    pub class_names: Vec<String>,
}

impl RawTable {
    pub fn new(schema: Schema, columns: Vec<ColumnData>, class_names: Vec<String>) -> Result<Self> {
        schema.validate()?;
        if columns.len() != schema.columns.len() {
            return Err(Error::InvalidInput("one data column per schema column".into()));
        }
        let n = columns.first().map_or(0, ColumnData::len);
        for ((name, spec), col) in schema.columns.iter().zip(&columns) {
            if col.len() != n {
                return Err(Error::InvalidInput(format!("column `{name}` has a different row count")));
            }
            let ok = match (spec.kind, col) {
                (ColumnKind::Numeric | ColumnKind::EncounterOrder, ColumnData::Numeric(v)) => {
                    v.iter().flatten().all(|x| x.is_finite())
                }
                (ColumnKind::Categorical, ColumnData::Categorical(v)) => {
                    let levels = spec.levels.as_ref().map_or(0, Vec::len);
                    v.iter().flatten().all(|&l| l < levels)
                }
                (ColumnKind::Label, ColumnData::Label(v)) => v.iter().all(|&l| l < class_names.len()),
                (ColumnKind::PatientId | ColumnKind::Ignore, ColumnData::Text(_)) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidInput(format!("column `{name}` does not match its schema kind")));
            }
        }
        Ok(Self {
            schema,
            columns,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, ColumnData::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[usize] {
        let i = self.schema.column_of_kind(ColumnKind::Label).expect("label column");
        match &self.columns[i] {
            ColumnData::Label(v) => v,
            _ => unreachable!("label column holds labels"),
        }
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Indices of numeric feature columns (not encounter order).
    pub fn numeric_columns(&self) -> Vec<usize> {
        self.schema
            .columns
            .values()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Numeric)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn categorical_columns(&self) -> Vec<usize> {
        self.schema
            .columns
            .values()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Categorical)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn missing_count(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnData::Numeric(v) => v.iter().filter(|x| x.is_none()).count(),
                ColumnData::Categorical(v) => v.iter().filter(|x| x.is_none()).count(),
                _ => 0,
            })
            .sum()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// CSV text with a header row; missing cells are empty fields and
    /// numbers use the shortest representation that round-trips.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.schema.columns.keys())?;
        let specs: Vec<&ColumnSpec> = self.schema.columns.values().collect();
        for r in 0..self.len() {
            let record: Vec<String> = self
                .columns
                .iter()
                .zip(&specs)
                .map(|(col, spec)| match col {
                    ColumnData::Numeric(v) => v[r].map(|x| format!("{x:?}")).unwrap_or_default(),
                    ColumnData::Categorical(v) => v[r]
                        .map(|l| spec.levels.as_ref().expect("levels")[l].clone())
                        .unwrap_or_default(),
                    ColumnData::Label(v) => self.class_names[v[r]].clone(),
                    ColumnData::Text(v) => v[r].clone(),
                })
                .collect();
            w.write_record(&record)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }
}

/// Parses `csv_text` under `schema`. Row numbers in errors are 1-based data
/// rows (the header is row 0).
pub fn parse_table(csv_text: &str, schema: &Schema) -> Result<RawTable> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(csv_text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut header_sorted = header.clone();
    header_sorted.sort();
    let mut schema_sorted: Vec<String> = schema.columns.keys().cloned().collect();
    schema_sorted.sort();
    if header_sorted != schema_sorted {
        return Err(Error::InvalidInput(format!(
            "CSV header {header:?} does not match the schema columns"
        )));
    }
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let label_levels = schema.columns[schema.label_column()].levels.clone();
    let mut class_names: Vec<String> = label_levels.clone().unwrap_or_default();
    let mut raw_labels: Vec<String> = Vec::new();

    let mut columns: Vec<ColumnData> = schema
        .columns
        .values()
        .map(|c| match c.kind {
            ColumnKind::Numeric | ColumnKind::EncounterOrder => ColumnData::Numeric(Vec::new()),
            ColumnKind::Categorical => ColumnData::Categorical(Vec::new()),
            ColumnKind::Label => ColumnData::Label(Vec::new()),
            ColumnKind::PatientId | ColumnKind::Ignore => ColumnData::Text(Vec::new()),
        })
        .collect();

    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for ((name, spec), col) in schema.columns.iter().zip(columns.iter_mut()) {
            let cell = record.get(position[name.as_str()]).unwrap_or("").trim();
            let err = |message: String| Error::Parse {
                row,
                column: name.clone(),
                message,
            };
            match col {
                ColumnData::Numeric(v) => {
                    if cell.is_empty() {
                        if spec.kind == ColumnKind::EncounterOrder {
                            return Err(err("encounter order is missing".into()));
                        }
                        v.push(None);
                    } else {
                        let x: f64 = cell.parse().map_err(|_| err(format!("`{cell}` is not a number")))?;
                        if !x.is_finite() {
                            return Err(err(format!("`{cell}` is not finite")));
                        }
                        v.push(Some(x));
                    }
                }
                ColumnData::Categorical(v) => {
                    if cell.is_empty() {
                        v.push(None);
                    } else {
                        let levels = spec.levels.as_ref().expect("validated");
                        let l = levels
                            .iter()
                            .position(|lv| lv == cell)
                            .ok_or_else(|| err(format!("unknown level `{cell}`")))?;
                        v.push(Some(l));
                    }
                }
                ColumnData::Label(_) => {
                    if cell.is_empty() {
                        return Err(err("label is missing".into()));
                    }
                    if let Some(levels) = &label_levels {
                        if !levels.iter().any(|l| l == cell) {
                            return Err(err(format!("unknown class `{cell}`")));
                        }
                    }
                    raw_labels.push(cell.to_owned());
                }
                ColumnData::Text(v) => v.push(cell.to_owned()),
            }
        }
    }

    if label_levels.is_none() {
        class_names = raw_labels.clone();
        class_names.sort();
        class_names.dedup();
    }
    let label_col = schema.column_of_kind(ColumnKind::Label).expect("validated");
    columns[label_col] = ColumnData::Label(
        raw_labels
            .iter()
            .map(|l| class_names.iter().position(|c| c == l).expect("collected above"))
            .collect(),
    );
    RawTable::new(schema.clone(), columns, class_names)
}

pub fn load_table(csv_path: &Path, schema_path: &Path) -> Result<RawTable> {
    let schema = Schema::load(schema_path)?;
    parse_table(&std::fs::read_to_string(csv_path)?, &schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        serde_json::from_str(
            r#"{"age": {"kind": "numeric"},
                "sex": {"kind": "categorical", "levels": ["f", "m"]},
                "cocktail": {"kind": "label"}}"#,
        )
        .unwrap()
    }

    #[test]
    fn empty_data_section() {
        let t = parse_table("age,sex,cocktail\n", &schema()).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn empty_numeric_cell_is_missing() {
        let t = parse_table("age,sex,cocktail\n,f,A\n3.5,m,B\n", &schema()).unwrap();
        assert_eq!(t.columns[0], ColumnData::Numeric(vec![None, Some(3.5)]));
        assert_eq!(t.class_names, vec!["A", "B"]);
        assert_eq!(t.labels(), &[0, 1]);
    }

    #[test]
    fn missing_label_names_row() {
        let e = parse_table("age,sex,cocktail\n1,f,A\n2,m,\n", &schema()).unwrap_err();
        assert!(matches!(e, Error::Parse { row: 2, ref column, .. } if column == "cocktail"));
    }

    #[test]
    fn bad_cells() {
        assert!(matches!(
            parse_table("age,sex,cocktail\nx,f,A\n", &schema()),
            Err(Error::Parse { row: 1, .. })
        ));
        assert!(matches!(
            parse_table("age,sex,cocktail\n1,q,A\n", &schema()),
            Err(Error::Parse { row: 1, .. })
        ));
        assert!(parse_table("age,cocktail\n1,A\n", &schema()).is_err());
    }

    #[test]
    fn header_order_may_differ() {
        let t = parse_table("cocktail,age,sex\nA,1,m\n", &schema()).unwrap();
        assert_eq!(t.columns[1], ColumnData::Categorical(vec![Some(1)]));
    }

    #[test]
    fn csv_round_trip() {
        let t = parse_table("age,sex,cocktail\n,f,A\n0.1,,B\n", &schema()).unwrap();
        assert_eq!(parse_table(&t.to_csv().unwrap(), &schema()).unwrap(), t);
    }

    #[test]
    fn schema_rules() {
        let two_labels: Schema =
            serde_json::from_str(r#"{"a": {"kind": "label"}, "b": {"kind": "label"}}"#).unwrap();
        assert!(two_labels.validate().is_err());
        let dup: Schema = serde_json::from_str(
            r#"{"a": {"kind": "label"}, "b": {"kind": "categorical", "levels": ["x", "x"]}}"#,
        )
        .unwrap();
        assert!(dup.validate().is_err());
    }
}
