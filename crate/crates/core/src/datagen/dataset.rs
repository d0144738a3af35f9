use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io;

/// The observed condition of every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// `[N, d]` feature vectors or `[N, C, T]` reference signals.
    Numeric(Tensor),
    /// Class index per sample, each below `classes`.
    Classes { labels: Vec<usize>, classes: usize },
}

impl Condition {
    pub fn len(&self) -> usize {
        match self {
            Condition::Numeric(t) => t.shape()[0],
            Condition::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(match self {
            Condition::Numeric(t) => Condition::Numeric(t.select_rows(rows)?),
            Condition::Classes { labels, classes } => Condition::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                classes: *classes,
            },
        })
    }

    /// Numeric tensor, or one-hot `[N, K]` rows for class labels.
    pub fn to_tensor(&self) -> Tensor {
        match self {
            Condition::Numeric(t) => t.clone(),
            Condition::Classes { labels, classes } => {
                let mut data = vec![0.0; labels.len() * classes];
                for (i, &l) in labels.iter().enumerate() {
                    data[i * classes + l] = 1.0;
                }
                Tensor::new(vec![labels.len(), *classes], data).expect("finite one-hot")
            }
        }
    }
}

/// Per-segment integer lags for the presence-ratio metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLags {
    pub fetal: usize,
    pub maternal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: serde_json::Value,
    /// Set for sequence datasets, whose CSV rows are time steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lags: Option<Vec<SegmentLags>>,
}

/// Samples `(x_i, t_i)` with the hidden source `s_i` kept for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub x: Tensor,
    pub t: Condition,
    pub s: Option<Tensor>,
    pub meta: DatasetMeta,
}

/// What training sees: inputs and conditions, never the hidden source.
#[derive(Clone, Copy, Debug)]
pub struct DataView<'a> {
    pub x: &'a Tensor,
    pub t: &'a Condition,
}

impl DataView<'_> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairedDataset {
    pub fn new(x: Tensor, t: Condition, s: Option<Tensor>, meta: DatasetMeta) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if t.len() != n || s.as_ref().is_some_and(|s| s.shape()[0] != n) {
            return Err(Error::shape(
                "dataset",
                format!(
                    "x has {n} samples, t {}, s {:?}",
                    t.len(),
                    s.as_ref().map(|s| s.shape()[0])
                ),
            ));
        }
        if let Condition::Classes { labels, classes } = &t {
            if let Some(l) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::invalid(format!("class label {l} >= {classes}")));
            }
        }
        Ok(Self { x, t, s, meta })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_sequence(&self) -> bool {
        self.x.ndim() == 3
    }

    pub fn view(&self) -> DataView<'_> {
        DataView { x: &self.x, t: &self.t }
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut meta = self.meta.clone();
        if let Some(lags) = &self.meta.lags {
            meta.lags = Some(rows.iter().map(|&r| lags[r]).collect());
        }
        Ok(Self {
            x: self.x.select_rows(rows)?,
            t: self.t.select(rows)?,
            s: self.s.as_ref().map(|s| s.select_rows(rows)).transpose()?,
            meta,
        })
    }

    /// Splits into the first `n_first` samples and the rest.
    pub fn split(&self, n_first: usize) -> Result<(Self, Self)> {
        if n_first > self.len() {
            return Err(Error::invalid(format!("cannot take {n_first} of {} samples", self.len())));
        }
        let a: Vec<usize> = (0..n_first).collect();
        let b: Vec<usize> = (n_first..self.len()).collect();
        Ok((self.select(&a)?, self.select(&b)?))
    }

    /// Path of the meta sidecar for a dataset CSV: `data.csv -> data.meta.json`.
    pub fn meta_path(csv: &Path) -> PathBuf {
        csv.with_extension("meta.json")
    }

    /// Writes the CSV table and its meta sidecar.
    ///
    /// Flat datasets hold one sample per row. Sequence datasets hold one time
    /// step per row, segments back to back, with `segment_len` in the meta.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut meta = self.meta.clone();
        let cols = |t: &Tensor| t.shape().get(1).copied().unwrap_or(1);
        let (nx, nt, ns) = (
            cols(&self.x),
            match &self.t {
                Condition::Numeric(t) => cols(t),
                Condition::Classes { .. } => 1,
            },
            self.s.as_ref().map(cols).unwrap_or(0),
        );
        let mut header: Vec<String> = (0..nx).map(|i| format!("x_{i}")).collect();
        match &self.t {
            Condition::Numeric(_) => header.extend((0..nt).map(|i| format!("t_{i}"))),
            Condition::Classes { .. } => header.push("t_class".into()),
        }
        header.extend((0..ns).map(|i| format!("s_{i}")));

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header)?;
        let seq_len = if self.is_sequence() {
            let len = self.x.shape()[2];
            meta.segment_len = Some(len);
            Some(len)
        } else {
            meta.segment_len = None;
            None
        };
        // Value of column `c` of a `[N, C]` or `[N, C, T]` tensor at sample `i`, step `k`.
        let at = |t: &Tensor, i: usize, c: usize, k: usize| -> f64 {
            match seq_len {
                Some(len) => t.data()[(i * t.shape()[1] + c) * len + k],
                None => t.data()[i * cols(t) + c],
            }
        };
        let mut row = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            for k in 0..seq_len.unwrap_or(1) {
                row.clear();
                row.extend((0..nx).map(|c| at(&self.x, i, c, k).to_string()));
                match &self.t {
                    Condition::Numeric(t) => row.extend((0..nt).map(|c| at(t, i, c, k).to_string())),
                    Condition::Classes { labels, .. } => row.push(labels[i].to_string()),
                }
                if let Some(s) = &self.s {
                    row.extend((0..ns).map(|c| at(s, i, c, k).to_string()));
                }
                w.write_record(&row)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::io(csv_path, e.into_error()))?;
        io::write_atomic(csv_path, &bytes)?;
        io::write_json(&Self::meta_path(csv_path), &meta)
    }

    /// Reads a CSV table written by [`PairedDataset::write`] with its sidecar.
    pub fn read(csv_path: &Path) -> Result<Self> {
        let meta: DatasetMeta = io::read_json(&Self::meta_path(csv_path))?;
        let text = io::read_text(csv_path)?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut xi = Vec::new();
        let mut ti = Vec::new();
        let mut si = Vec::new();
        let mut class_col = None;
        for (j, h) in header.iter().enumerate() {
            let indexed = |prefix: &str| -> Option<usize> { h.strip_prefix(prefix)?.parse().ok() };
            if h == "t_class" {
                class_col = Some(j);
            } else if let Some(k) = indexed("x_") {
                xi.push((k, j));
            } else if let Some(k) = indexed("t_") {
                ti.push((k, j));
            } else if let Some(k) = indexed("s_") {
                si.push((k, j));
            } else {
                return Err(Error::invalid(format!("unknown dataset column `{h}`")));
            }
        }
        for cols in [&mut xi, &mut ti, &mut si] {
            cols.sort();
            if cols.iter().enumerate().any(|(want, &(k, _))| k != want) {
                return Err(Error::invalid("dataset columns are not numbered 0.. contiguously"));
            }
        }
        if xi.is_empty() || (ti.is_empty() == class_col.is_none()) {
            return Err(Error::invalid("dataset needs x_ columns and exactly one kind of t column"));
        }

        let mut xs = Vec::new();
        let mut ts = Vec::new();
        let mut ss = Vec::new();
        let mut labels = Vec::new();
        let mut rows = 0usize;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |j: usize| -> Result<f64> {
                let v: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("row {}: `{}` is not a number", line + 2, &rec[j])))?;
                if !v.is_finite() {
                    return Err(Error::invalid(format!("row {}: non-finite value", line + 2)));
                }
                Ok(v)
            };
            for &(_, j) in &xi {
                xs.push(num(j)?);
            }
            for &(_, j) in &ti {
                ts.push(num(j)?);
            }
            for &(_, j) in &si {
                ss.push(num(j)?);
            }
            if let Some(j) = class_col {
                labels.push(
                    rec[j]
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| Error::invalid(format!("row {}: bad class label", line + 2)))?,
                );
            }
            rows += 1;
        }

        let shape_of = |data: Vec<f64>, c: usize| -> Result<Tensor> {
            match meta.segment_len {
                None => Tensor::new(vec![rows, c], data),
                Some(len) => {
                    if len == 0 || !rows.is_multiple_of(len) {
                        return Err(Error::invalid(format!(
                            "{rows} rows do not divide into segments of {len}"
                        )));
                    }
                    let n = rows / len;
                    // Rows are time steps: transpose [n, len, c] into [n, c, len].
                    let mut out = vec![0.0; data.len()];
                    for i in 0..n {
                        for k in 0..len {
                            for ch in 0..c {
                                out[(i * c + ch) * len + k] = data[(i * len + k) * c + ch];
                            }
                        }
                    }
                    Tensor::new(vec![n, c, len], out)
                }
            }
        };
        if class_col.is_some() && meta.segment_len.is_some() {
            return Err(Error::invalid("class conditions are not supported for sequence datasets"));
        }
        let x = shape_of(xs, xi.len())?;
        let t = match class_col {
            Some(_) => {
                let classes = labels.iter().max().map_or(1, |m| m + 1);
                let classes = meta
                    .params
                    .get("classes")
                    .and_then(|v| v.as_u64())
                    .map_or(classes, |k| k as usize);
                Condition::Classes { labels, classes }
            }
            None => Condition::Numeric(shape_of(ts, ti.len())?),
        };
        let s = if si.is_empty() {
            None
        } else {
            Some(shape_of(ss, si.len())?)
        };
        Self::new(x, t, s, meta)
    }
}
