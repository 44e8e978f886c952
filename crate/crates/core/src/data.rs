//! Paired samples `(x_n, y_n)` and their CSV + JSON sidecar storage.

use crate::error::{check_dim, EncpError, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_META: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub seed: u64,
    pub spec_digest: String,
}

/// How a dataset was produced; enough to regenerate it or its oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Gmm {
        group: String,
        px: usize,
        qy: usize,
        n_g: usize,
        seed: u64,
    },
    Moons {
        beta: f64,
        seed: u64,
    },
    Csv {
        path: String,
    },
}

/// JSON sidecar written next to `dataset.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: DataSource,
    pub group: String,
    pub n: usize,
    pub px: usize,
    pub qy: usize,
    pub seed: u64,
    pub spec_digest: String,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, seed: u64, spec_digest: String) -> Result<Self> {
        check_dim(x.nrows(), y.nrows(), "dataset x/y row count")?;
        if x.nrows() == 0 {
            return Err(EncpError::InvalidParameter("dataset must be nonempty".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(EncpError::InvalidParameter("dataset contains non-finite values".into()));
        }
        Ok(Self {
            x,
            y,
            seed,
            spec_digest,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.ncols()
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: self.y.select_rows(indices),
            seed: self.seed,
            spec_digest: self.spec_digest.clone(),
        }
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let idx: Vec<usize> = range.collect();
        self.select(&idx)
    }

    /// Writes columns `x_0..x_{p-1}, y_0..y_{q-1}`; values use Rust's shortest
    /// round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (0..self.x_dim())
            .map(|i| format!("x_{i}"))
            .chain((0..self.y_dim()).map(|j| format!("y_{j}")))
            .collect();
        w.write_record(&header)?;
        for n in 0..self.len() {
            let row: Vec<String> = self
                .x
                .row(n)
                .iter()
                .chain(self.y.row(n).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV whose header names columns `x_*` and `y_*`.
    pub fn read_csv(path: &Path, seed: u64, spec_digest: String) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let xs: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("x_"))
            .map(|(i, _)| i)
            .collect();
        let ys: Vec<usize> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("y_"))
            .map(|(i, _)| i)
            .collect();
        if xs.is_empty() || ys.is_empty() {
            return Err(EncpError::InvalidParameter(format!(
                "{}: header needs x_* and y_* columns",
                path.display()
            )));
        }
        let mut xv = Vec::new();
        let mut yv = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| EncpError::InvalidParameter(format!("{}: bad number in column {i}", path.display())))
            };
            for &i in &xs {
                xv.push(parse(i)?);
            }
            for &i in &ys {
                yv.push(parse(i)?);
            }
        }
        let n = xv.len() / xs.len();
        Dataset::new(
            DMatrix::from_row_slice(n, xs.len(), &xv),
            DMatrix::from_row_slice(n, ys.len(), &yv),
            seed,
            spec_digest,
        )
    }

    /// Writes `dataset.csv` and `dataset.json` into `dir`.
    pub fn save(&self, dir: &Path, source: DataSource, group: &str) -> Result<DatasetMeta> {
        fs::create_dir_all(dir)?;
        self.write_csv(&dir.join(DATASET_CSV))?;
        let meta = DatasetMeta {
            source,
            group: group.to_string(),
            n: self.len(),
            px: self.x_dim(),
            qy: self.y_dim(),
            seed: self.seed,
            spec_digest: self.spec_digest.clone(),
        };
        fs::write(dir.join(DATASET_META), serde_json::to_string_pretty(&meta)?)?;
        Ok(meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, DatasetMeta)> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(DATASET_META))?)?;
        let data = Self::read_csv(&dir.join(DATASET_CSV), meta.seed, meta.spec_digest.clone())?;
        check_dim(meta.px, data.x_dim(), "sidecar px")?;
        check_dim(meta.qy, data.y_dim(), "sidecar qy")?;
        Ok((data, meta))
    }
}

/// Reads a headerless-or-headed CSV of probe points (one point per row).
pub fn read_points(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            // a header line
            Err(_) if rows.is_empty() => continue,
            Err(_) => {
                return Err(EncpError::InvalidParameter(format!(
                    "{}: non-numeric row",
                    path.display()
                )))
            }
        }
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(EncpError::InvalidParameter(format!("{}: ragged or empty", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Writes a matrix as CSV with the given column names.
pub fn write_matrix(path: &Path, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    check_dim(names.len(), m.ncols(), "csv column names")?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}
