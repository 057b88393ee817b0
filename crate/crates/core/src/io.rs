//! CSV tables and row-major matrix serialization.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A numeric table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IoError> {
        let p = path.display().to_string();
        let mut w = csv::Writer::from_path(path).map_err(|source| IoError::Csv { path: p.clone(), source })?;
        w.write_record(&self.header)
            .map_err(|source| IoError::Csv { path: p.clone(), source })?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format_float(*v)))
                .map_err(|source| IoError::Csv { path: p.clone(), source })?;
        }
        w.flush().map_err(|source| IoError::Io { path: p, source })
    }

    pub fn read_csv(path: &Path) -> Result<Self, IoError> {
        let p = path.display().to_string();
        let mut r = csv::Reader::from_path(path).map_err(|source| IoError::Csv { path: p.clone(), source })?;
        let header: Vec<String> = r
            .headers()
            .map_err(|source| IoError::Csv { path: p.clone(), source })?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(IoError::Format { path: p, msg: "missing header".into() });
        }
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|source| IoError::Csv { path: p.clone(), source })?;
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| IoError::Format {
                    path: p.clone(),
                    msg: format!("row {}: {e}", line + 2),
                })?;
            if row.len() != header.len() {
                return Err(IoError::Format {
                    path: p.clone(),
                    msg: format!("row {} has {} fields, header has {}", line + 2, row.len(), header.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }
}

/// Shortest round-trip representation.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Serde adapter writing a matrix as a list of rows.
pub mod rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nc) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
    }
}
