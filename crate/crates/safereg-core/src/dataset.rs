//! Passive observation datasets and CSV ingestion.
//!
//! A dataset is a column store of equal-length real vectors, one per
//! variable. Rows are time steps of a recorded run (windowed estimators rely
//! on consecutive rows being consecutive steps).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::env::Row;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error reading dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("row {row}: column `{column}` mismatches the schema")]
    SchemaMismatch { row: usize, column: String },
    #[error("columns have unequal lengths")]
    UnequalColumns,
    #[error("column `{0}` not found")]
    MissingColumn(String),
}

/// Column-major dataset of real-valued observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationDataset {
    columns: BTreeMap<String, Vec<f64>>,
    rows: usize,
}

impl ObservationDataset {
    pub fn new(columns: BTreeMap<String, Vec<f64>>) -> Result<Self, DatasetError> {
        let mut rows = None;
        for values in columns.values() {
            match rows {
                None => rows = Some(values.len()),
                Some(n) if n != values.len() => return Err(DatasetError::UnequalColumns),
                _ => {}
            }
        }
        let rows = rows.unwrap_or(0);
        if rows == 0 || columns.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        Ok(ObservationDataset { columns, rows })
    }

    /// Builds a dataset from environment rows; every row must carry the same
    /// variable set.
    pub fn from_rows(rows: &[Row]) -> Result<Self, DatasetError> {
        let first = rows.first().ok_or(DatasetError::EmptyDataset)?;
        let mut columns: BTreeMap<String, Vec<f64>> = first
            .values
            .keys()
            .map(|k| (k.clone(), Vec::with_capacity(rows.len())))
            .collect();
        for (i, row) in rows.iter().enumerate() {
            for (name, column) in columns.iter_mut() {
                let value = row.values.get(name).copied().ok_or_else(|| {
                    DatasetError::SchemaMismatch {
                        row: i + 1,
                        column: name.clone(),
                    }
                })?;
                column.push(value);
            }
        }
        ObservationDataset::new(columns)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.keys().cloned().collect()
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64], DatasetError> {
        self.columns
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    }

    /// Value of `column` at `row`.
    pub fn value(&self, column: &str, row: usize) -> Result<f64, DatasetError> {
        Ok(self.column(column)?[row])
    }
}

/// Parses a CSV file with a header row into a dataset, keeping exactly the
/// `schema` columns. Rows with any unparseable cell in a schema column are
/// rejected with their (1-based) data row number.
pub fn load_csv<P: AsRef<Path>>(
    path: P,
    schema: &[String],
) -> Result<ObservationDataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: Read>(
    reader: R,
    schema: &[String],
) -> Result<ObservationDataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut indices = Vec::with_capacity(schema.len());
    for name in schema {
        let idx = headers.iter().position(|h| h == name).ok_or_else(|| {
            DatasetError::SchemaMismatch {
                row: 0,
                column: name.clone(),
            }
        })?;
        indices.push(idx);
    }
    let mut columns: BTreeMap<String, Vec<f64>> =
        schema.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        for (name, &col_idx) in schema.iter().zip(&indices) {
            let cell = record.get(col_idx).ok_or_else(|| DatasetError::SchemaMismatch {
                row: row_idx + 1,
                column: name.clone(),
            })?;
            let value: f64 = cell.parse().map_err(|_| DatasetError::SchemaMismatch {
                row: row_idx + 1,
                column: name.clone(),
            })?;
            columns.get_mut(name).unwrap().push(value);
        }
    }
    ObservationDataset::new(columns)
}

/// Writes environment rows as CSV in the same schema [`load_csv`] consumes.
/// An optional comment header line records provenance (ignored on re-read).
pub fn save_csv<P: AsRef<Path>>(
    path: P,
    rows: &[Row],
    columns: &[String],
    comment: Option<&str>,
) -> Result<(), DatasetError> {
    let mut out = String::new();
    if let Some(comment) = comment {
        out.push_str("# ");
        out.push_str(comment);
        out.push('\n');
    }
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        let mut first = true;
        for name in columns {
            if !first {
                out.push(',');
            }
            first = false;
            let value = row.values.get(name).copied().unwrap_or(f64::NAN);
            out.push_str(&format!("{value}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
