//! Dataset ingestion, standardization and weak-label splitting.
//!
//! Input files are plain CSV: numeric feature columns plus one binary label
//! column (1 = anomaly). Standardization uses the statistics of the whole
//! file, and a random fraction of the true anomalies becomes the labeled set;
//! every other row is unlabeled.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{join_list, render, KvFile};
use crate::seed::{stream_rng, Stream};
use crate::vae::RowKind;

/// Feature matrix with ground-truth labels, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawData {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
}

impl RawData {
    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn anomalies(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvOptions {
    /// Label column index; `None` means the last column.
    pub label_column: Option<usize>,
    pub has_header: bool,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_csv(path: &Path, opts: CsvOptions) -> Result<RawData> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, path, opts)
}

/// Parses CSV from any reader; `path` is only used in error messages.
pub fn read_csv<R: Read>(reader: R, path: &Path, opts: CsvOptions) -> Result<RawData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let n = record.len();
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(parse_err(path, line, format!("expected {w} fields, found {n}")))
            }
            _ => {}
        }
        let label_col = opts.label_column.unwrap_or(n.saturating_sub(1));
        if label_col >= n || n < 2 {
            return Err(parse_err(
                path,
                line,
                format!("label column {label_col} missing from a row of {n} fields"),
            ));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(path, line, format!("non-numeric value `{cell}` in column {j}"))
            })?;
            if j == label_col {
                if v != 0.0 && v != 1.0 {
                    return Err(parse_err(path, line, format!("label `{cell}` is not 0 or 1")));
                }
                labels.push(v as u8);
            } else {
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("non-finite value in column {j}")));
                }
                values.push(v);
            }
        }
    }
    let Some(w) = width else {
        return Err(parse_err(path, 0, "file contains no data rows"));
    };
    let features = Array2::from_shape_vec((labels.len(), w - 1), values)
        .expect("row widths validated");
    Ok(RawData { features, labels })
}

/// Per-column statistics used to standardize a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant columns.
    pub std: Vec<f64>,
    pub constant_columns: Vec<usize>,
}

impl Standardization {
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::dim("standardized columns", self.mean.len(), x.ncols()));
        }
        let mut out = x.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }
}

/// Z-scores every column with population statistics over all rows. Constant
/// columns are centred only and reported in the returned statistics.
pub fn standardize(x: ArrayView2<f64>) -> Result<(Array2<f64>, Standardization)> {
    if x.nrows() < 2 {
        return Err(Error::Input(format!(
            "standardization needs at least 2 rows, got {}",
            x.nrows()
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let var = x.var_axis(Axis(0), 0.0);
    let mut std = Vec::with_capacity(x.ncols());
    let mut constant_columns = Vec::new();
    for (j, &v) in var.iter().enumerate() {
        let s = v.sqrt();
        if s <= 1e-12 * mean[j].abs().max(1.0) {
            log::warn!("column {j} is constant; centring without scaling");
            constant_columns.push(j);
            std.push(1.0);
        } else {
            std.push(s);
        }
    }
    let stats = Standardization {
        mean: mean.to_vec(),
        std,
        constant_columns,
    };
    let out = stats.apply(x)?;
    Ok((out, stats))
}

/// `round(ratio × anomalies)` with halves rounded up.
pub fn labeled_count(ratio: f64, anomalies: usize) -> usize {
    (ratio * anomalies as f64 + 0.5).floor() as usize
}

/// Where a prepared dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub label_ratio: f64,
    pub split_seed: u64,
}

/// Standardized features with weak labels (training signal) and ground-truth
/// labels (evaluation only).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub weak_labels: Vec<u8>,
    pub truth: Vec<u8>,
    pub standardization: Standardization,
    pub provenance: Provenance,
}

impl LabeledDataset {
    /// Standardizes `raw` and draws the labeled anomalies.
    pub fn prepare(raw: &RawData, ratio: f64, seed: u64, source: impl Into<String>) -> Result<Self> {
        let (features, standardization) = standardize(raw.features.view())?;
        let weak_labels = split_weak_labels(&raw.labels, ratio, seed)?;
        Ok(Self {
            features,
            weak_labels,
            truth: raw.labels.clone(),
            standardization,
            provenance: Provenance {
                source: source.into(),
                label_ratio: ratio,
                split_seed: seed,
            },
        })
    }

    /// Same standardized features with a fresh draw of labeled anomalies.
    pub fn resplit(&self, ratio: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            weak_labels: split_weak_labels(&self.truth, ratio, seed)?,
            provenance: Provenance {
                label_ratio: ratio,
                split_seed: seed,
                ..self.provenance.clone()
            },
            ..self.clone()
        })
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labeled_anomalies(&self) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.weak_labels[i] == 1).collect()
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.weak_labels[i] == 0).collect()
    }

    pub fn kind(&self, row: usize) -> RowKind {
        if self.weak_labels[row] == 1 {
            RowKind::LabeledAnomaly
        } else {
            RowKind::Unlabeled
        }
    }

    pub fn true_anomalies(&self) -> usize {
        self.truth.iter().filter(|&&t| t == 1).count()
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    /// Writes `path` (CSV: features, `weak_label`, `label`) and the
    /// `path.meta` sidecar holding the standardization statistics and split
    /// provenance. Values are written in shortest round-trip form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim())
            .map(|j| format!("f{j}"))
            .chain(["weak_label".into(), "label".into()])
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (i, row) in self.features.rows().into_iter().enumerate() {
            out.push_str(&join_list(row.iter()));
            out.push_str(&format!(",{},{}\n", self.weak_labels[i], self.truth[i]));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let s = &self.standardization;
        let meta = render([
            ("source", self.provenance.source.clone()),
            ("label_ratio", self.provenance.label_ratio.to_string()),
            ("split_seed", self.provenance.split_seed.to_string()),
            ("mean", join_list(&s.mean)),
            ("std", join_list(&s.std)),
            ("constant_columns", join_list(&s.constant_columns)),
        ]);
        let side = Self::sidecar_path(path);
        std::fs::write(&side, meta).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let headers = rdr
            .headers()
            .map_err(|e| parse_err(path, 1, e.to_string()))?
            .clone();
        let n = headers.len();
        if n < 3 || &headers[n - 2] != "weak_label" || &headers[n - 1] != "label" {
            return Err(parse_err(path, 1, "not a prepared dataset (missing weak_label,label)"));
        }
        let d = n - 2;
        let mut values = Vec::new();
        let mut weak_labels = Vec::new();
        let mut truth = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                parse_err(path, e.position().map_or(0, |p| p.line() as usize), e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            for (j, cell) in record.iter().enumerate() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("non-numeric value `{cell}`")))?;
                match j {
                    j if j < d => values.push(v),
                    j if j == d => weak_labels.push(v as u8),
                    _ => truth.push(v as u8),
                }
            }
        }
        let rows = truth.len();
        if rows == 0 {
            return Err(parse_err(path, 2, "prepared dataset has no rows"));
        }
        let features = Array2::from_shape_vec((rows, d), values).expect("csv enforces width");
        if weak_labels.iter().zip(&truth).any(|(&w, &t)| w == 1 && t != 1) {
            return Err(Error::Input(format!(
                "{}: a weak-labeled row is not a true anomaly",
                path.display()
            )));
        }

        let meta = KvFile::read(&Self::sidecar_path(path))?;
        let standardization = Standardization {
            mean: meta.get_list("mean")?.unwrap_or_default(),
            std: meta.get_list("std")?.unwrap_or_default(),
            constant_columns: meta.get_list("constant_columns")?.unwrap_or_default(),
        };
        if standardization.mean.len() != d || standardization.std.len() != d {
            return Err(Error::dim("sidecar statistics", d, standardization.mean.len()));
        }
        Ok(Self {
            features,
            weak_labels,
            truth,
            standardization,
            provenance: Provenance {
                source: meta.require("source")?,
                label_ratio: meta.require("label_ratio")?,
                split_seed: meta.require("split_seed")?,
            },
        })
    }
}

/// Selects `round(ratio × anomalies)` true anomalies uniformly at random as
/// labeled; returns the weak label of every row.
pub fn split_weak_labels(truth: &[u8], ratio: f64, seed: u64) -> Result<Vec<u8>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "label ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    let anomalies: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == 1).collect();
    let count = labeled_count(ratio, anomalies.len());
    if count == 0 {
        return Err(Error::Config(format!(
            "ratio {ratio} of {} anomalies rounds to zero labeled anomalies",
            anomalies.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let mut weak = vec![0u8; truth.len()];
    for pick in index::sample(&mut rng, anomalies.len(), count) {
        weak[anomalies[pick]] = 1;
    }
    Ok(weak)
}
