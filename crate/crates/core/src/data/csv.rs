use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result, WindowSpec};
use crate::model::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Forecasting,
}

/// Column roles of a CSV file, stored as TOML next to the data.
///
/// ```toml
/// task = "forecasting"
/// features = ["load", "temp"]
/// target = "load"
///
/// [window]
/// history = 48
/// horizon = 1
/// stride = 1
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub task: TaskKind,
    pub features: Vec<String>,
    /// Integer class column (classification).
    #[serde(default)]
    pub label: Option<String>,
    /// Column to forecast (forecasting); may also be a feature.
    #[serde(default)]
    pub target: Option<String>,
    /// Carried along but not used as a feature.
    #[serde(default)]
    pub timestamp: Option<String>,
    /// Consecutive rows sharing an id form one classification sample.
    /// Without it, classification samples are windows labelled by their last row.
    #[serde(default)]
    pub sequence: Option<String>,
    /// Inferred from the largest label when absent.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Replace missing feature/target values by the previous row's value.
    #[serde(default)]
    pub forward_fill: bool,
    #[serde(default)]
    pub window: WindowSpec,
}

impl Schema {
    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: Schema = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.into(), source })?;
        Self::from_toml(&text).map_err(|e| DataError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            TaskKind::Classification if self.label.is_none() => {
                Err(DataError::Schema("classification needs a `label` column".into()))
            }
            TaskKind::Forecasting if self.target.is_none() => {
                Err(DataError::Schema("forecasting needs a `target` column".into()))
            }
            _ => self.validate_inputs(),
        }
    }

    /// Everything [`validate`](Self::validate) checks except the presence
    /// of a label or target column.
    pub fn validate_inputs(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(DataError::Schema("`features` must list at least one column".into()));
        }
        match self.task {
            TaskKind::Classification => {
                if self.sequence.is_none() && (self.window.history == 0 || self.window.stride == 0) {
                    return Err(DataError::Schema("window history and stride must be ≥ 1".into()));
                }
                if let Some(c) = self.classes {
                    if c < 2 {
                        return Err(DataError::Schema("`classes` must be ≥ 2".into()));
                    }
                }
            }
            TaskKind::Forecasting => self.window.validate()?,
        }
        Ok(())
    }

    /// Same roles minus the label and target, for unlabelled inputs.
    pub fn inputs_only(&self) -> Schema {
        Schema { label: None, target: None, ..self.clone() }
    }

    /// Concrete task; the class count is checked against every label.
    pub fn resolve_task(&self, tables: &[&RawTable]) -> Result<Task> {
        match self.task {
            TaskKind::Forecasting => Ok(Task::Forecasting { horizon: self.window.horizon }),
            TaskKind::Classification => {
                let max = tables.iter().filter_map(|t| t.labels.as_ref()).flatten().copied().max();
                let classes = match (self.classes, max) {
                    (Some(c), Some(m)) if m >= c => {
                        return Err(DataError::Invalid(format!("label {m} is out of range for {c} classes")))
                    }
                    (Some(c), _) => c,
                    (None, Some(m)) => (m + 1).max(2),
                    (None, None) => 2,
                };
                Ok(Task::Classification { classes })
            }
        }
    }
}

/// Columns of one CSV file, restricted to the roles a schema declares.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawTable {
    pub features: Vec<String>,
    /// One vector per feature, all of equal length.
    pub columns: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub target: Option<Vec<f64>>,
    pub timestamps: Option<Vec<String>>,
    pub sequence: Option<Vec<String>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, range: Range<usize>) -> RawTable {
        RawTable {
            features: self.features.clone(),
            columns: self.columns.iter().map(|c| c[range.clone()].to_vec()).collect(),
            labels: self.labels.as_ref().map(|v| v[range.clone()].to_vec()),
            target: self.target.as_ref().map(|v| v[range.clone()].to_vec()),
            timestamps: self.timestamps.as_ref().map(|v| v[range.clone()].to_vec()),
            sequence: self.sequence.as_ref().map(|v| v[range.clone()].to_vec()),
        }
    }
}

const MISSING: [&str; 5] = ["", "NA", "N/A", "?", "nan"];

pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    parse_csv(file, schema).map_err(|e| match e {
        DataError::Io { .. } => e,
        other => DataError::Invalid(format!("{}: {other}", path.display())),
    })
}

/// Reads comma-separated UTF-8 with a header row.
///
/// Rows with exactly one field more than the header are taken to carry a
/// leading row index, which is dropped.
pub fn parse_csv(reader: impl Read, schema: &Schema) -> Result<RawTable> {
    schema.validate_inputs()?;
    let mut rdr = ::csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(::csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Csv { line: 1, msg: e.to_string() })?
        .iter()
        .map(str::to_owned)
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.into()));
    let feature_idx = schema.features.iter().map(|f| find(f)).collect::<Result<Vec<_>>>()?;
    let label_idx = schema.label.as_deref().map(find).transpose()?;
    let target_idx = schema.target.as_deref().map(find).transpose()?;
    let time_idx = schema.timestamp.as_deref().map(find).transpose()?;
    let seq_idx = schema.sequence.as_deref().map(find).transpose()?;

    let mut table = RawTable {
        features: schema.features.clone(),
        columns: vec![Vec::new(); feature_idx.len()],
        labels: label_idx.map(|_| Vec::new()),
        target: target_idx.map(|_| Vec::new()),
        timestamps: time_idx.map(|_| Vec::new()),
        sequence: seq_idx.map(|_| Vec::new()),
    };

    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let offset = match record.len() {
            n if n == header.len() => 0,
            n if n == header.len() + 1 => 1,
            n => return Err(DataError::Ragged { line, expected: header.len(), found: n }),
        };
        let field = |i: usize| &record[i + offset];
        let number = |i: usize, prev: Option<f64>| -> Result<f64> {
            let raw = field(i);
            if MISSING.iter().any(|m| raw.eq_ignore_ascii_case(m)) {
                return match prev {
                    Some(p) if schema.forward_fill => Ok(p),
                    _ => Err(DataError::MissingValue { line, column: header[i].clone() }),
                };
            }
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| DataError::Parse {
                line,
                column: header[i].clone(),
                value: raw.into(),
            })
        };
        for (col, &i) in table.columns.iter_mut().zip(&feature_idx) {
            let v = number(i, col.last().copied())?;
            col.push(v);
        }
        if let (Some(t), Some(i)) = (table.target.as_mut(), target_idx) {
            let v = number(i, t.last().copied())?;
            t.push(v);
        }
        if let (Some(l), Some(i)) = (table.labels.as_mut(), label_idx) {
            l.push(parse_label(field(i)).ok_or_else(|| DataError::BadLabel {
                line,
                column: header[i].clone(),
                value: field(i).into(),
            })?);
        }
        if let (Some(ts), Some(i)) = (table.timestamps.as_mut(), time_idx) {
            ts.push(field(i).into());
        }
        if let (Some(s), Some(i)) = (table.sequence.as_mut(), seq_idx) {
            s.push(field(i).into());
        }
    }
    Ok(table)
}

/// Accepts `3` as well as `3.0`.
fn parse_label(raw: &str) -> Option<usize> {
    raw.parse::<usize>().ok().or_else(|| {
        let v: f64 = raw.parse().ok()?;
        (v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64).then_some(v as usize)
    })
}

/// Writes `table` with a header derived from `schema`; floats use the
/// shortest representation that parses back to the same bits.
pub fn write_table(table: &RawTable, schema: &Schema, out: impl Write) -> Result<()> {
    let mut w = ::csv::Writer::from_writer(out);
    let target_is_feature = schema.target.as_ref().is_some_and(|t| schema.features.contains(t));
    let mut header: Vec<&str> = Vec::new();
    header.extend(schema.timestamp.as_deref());
    header.extend(schema.sequence.as_deref());
    header.extend(schema.features.iter().map(String::as_str));
    header.extend(schema.label.as_deref());
    if !target_is_feature {
        header.extend(schema.target.as_deref());
    }
    let err = |e: ::csv::Error| DataError::Invalid(format!("csv write: {e}"));
    w.write_record(&header).map_err(err)?;
    for r in 0..table.len() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if schema.timestamp.is_some() {
            row.push(table.timestamps.as_ref().map(|t| t[r].clone()).unwrap_or_default());
        }
        if schema.sequence.is_some() {
            row.push(table.sequence.as_ref().map(|s| s[r].clone()).unwrap_or_default());
        }
        row.extend(table.columns.iter().map(|c| c[r].to_string()));
        if schema.label.is_some() {
            row.push(table.labels.as_ref().map(|l| l[r].to_string()).unwrap_or_default());
        }
        if schema.target.is_some() && !target_is_feature {
            row.push(table.target.as_ref().map(|t| t[r].to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| DataError::Invalid(format!("csv write: {e}")))
}
