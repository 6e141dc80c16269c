//! Dataset ingestion, standardization, chronological splitting and windowing.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Default chronological split for forecasting datasets.
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    EttCsv,
    UeaArchive,
    GenericCsv,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ett_csv" => Ok(Format::EttCsv),
            "uea_archive" => Ok(Format::UeaArchive),
            "generic_csv" => Ok(Format::GenericCsv),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Forecasting,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

/// Three disjoint, ordered, half-open row ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn get(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.train.clone(),
            SplitKind::Valid => self.valid.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }

    fn check(&self, n_total: usize) -> Result<()> {
        let ordered = self.train.start <= self.train.end
            && self.train.end <= self.valid.start
            && self.valid.start <= self.valid.end
            && self.valid.end <= self.test.start
            && self.test.start <= self.test.end
            && self.test.end <= n_total;
        if ordered {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "split ranges {self:?} are not disjoint and ordered within {n_total} rows"
            )))
        }
    }
}

/// Train-split channel statistics, kept for the inverse transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn inverse(&self, values: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = values.to_owned();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        out
    }
}

/// A multivariate series (forecasting) or a stack of equal-length instances
/// (classification), stored time-major as `N_total x F`.
///
/// For classification data every instance occupies `instance_len` consecutive
/// rows and split ranges are multiples of `instance_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub values: Array2<f64>,
    /// Seconds since the Unix epoch, when the source carries timestamps.
    pub timestamps: Option<Vec<i64>>,
    pub columns: Vec<String>,
    pub split: Split,
    pub task: Task,
    /// Class index per instance (classification only).
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub instance_len: Option<usize>,
    /// Set once the dataset has been standardized.
    pub stats: Option<ChannelStats>,
}

impl TimeSeriesDataset {
    pub fn n_total(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_instances(&self) -> usize {
        match self.instance_len {
            Some(len) => self.n_total() / len,
            None => 1,
        }
    }

    /// Checks the structural invariants of the type.
    pub fn validate(&self) -> Result<()> {
        self.split.check(self.n_total())?;
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.n_total() {
                return Err(Error::Validation("timestamp count differs from row count".into()));
            }
        }
        if let Some(stats) = &self.stats {
            if stats.std.iter().any(|&s| s < STD_FLOOR) {
                return Err(Error::Validation("channel std below floor".into()));
            }
        }
        if self.task == Task::Classification {
            let len = self
                .instance_len
                .ok_or_else(|| Error::Validation("classification data without instance length".into()))?;
            let labels = self
                .labels
                .as_ref()
                .ok_or_else(|| Error::Validation("classification data without labels".into()))?;
            if len == 0 || self.n_total() % len != 0 || labels.len() != self.n_total() / len {
                return Err(Error::Validation(format!(
                    "{} labels for {} rows of instance length {len}",
                    labels.len(),
                    self.n_total()
                )));
            }
        }
        Ok(())
    }

    /// Rows of one split.
    pub fn split_values(&self, kind: SplitKind) -> ArrayView2<'_, f64> {
        let r = self.split.get(kind);
        self.values.slice(s![r.start..r.end, ..])
    }

    /// Instance index range of a split (classification only).
    pub fn split_instances(&self, kind: SplitKind) -> Result<Range<usize>> {
        let len = self
            .instance_len
            .ok_or_else(|| Error::Validation("dataset has no instances".into()))?;
        let r = self.split.get(kind);
        Ok(r.start / len..r.end / len)
    }

    /// Keeps only the last (target) channel.
    pub fn univariate(&self) -> TimeSeriesDataset {
        let last = self.n_features() - 1;
        let mut out = self.clone();
        out.values = self.values.slice(s![.., last..]).to_owned();
        out.columns = vec![self.columns[last].clone()];
        out.stats = self.stats.as_ref().map(|st| ChannelStats {
            mean: vec![st.mean[last]],
            std: vec![st.std[last]],
        });
        out
    }

    /// Stable content hash of the values, split and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_total() as u64).to_le_bytes());
        h.update((self.n_features() as u64).to_le_bytes());
        for v in self.values.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        for r in [&self.split.train, &self.split.valid, &self.split.test] {
            h.update((r.start as u64).to_le_bytes());
            h.update((r.end as u64).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                h.update((l as u64).to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn format_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

fn parse_number(path: &Path, cell: &str, line: usize, column: usize) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Err(format_err(path, line, column, "missing value"));
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(format_err(path, line, column, format!("non-finite value `{cell}`"))),
        Err(_) => Err(format_err(path, line, column, format!("`{cell}` is not a number"))),
    }
}

fn parse_timestamp(path: &Path, cell: &str, line: usize) -> Result<i64> {
    use chrono::{NaiveDate, NaiveDateTime};
    let cell = cell.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(cell, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp());
    }
    Err(format_err(path, line, 1, format!("`{cell}` is not a timestamp")))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn read_csv_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => format_err(path, 1, 1, format!("{other:?}")),
        })?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, i + 1, 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

fn load_ett_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let records = read_csv_records(path)?;
    let header = records
        .first()
        .ok_or_else(|| format_err(path, 1, 1, "empty file"))?;
    if header.len() < 2 {
        return Err(format_err(path, 1, 1, "expected a date column followed by numeric channels"));
    }
    let columns: Vec<String> = header.iter().skip(1).map(|c| c.trim().to_string()).collect();
    let f = columns.len();
    let mut values = Vec::with_capacity((records.len() - 1) * f);
    let mut stamps = Vec::with_capacity(records.len() - 1);
    for (i, rec) in records.iter().enumerate().skip(1) {
        let line = i + 1;
        if rec.len() != f + 1 {
            return Err(format_err(
                path,
                line,
                rec.len().min(f + 1) + 1,
                format!("expected {} columns, found {}", f + 1, rec.len()),
            ));
        }
        stamps.push(parse_timestamp(path, &rec[0], line)?);
        for c in 0..f {
            values.push(parse_number(path, &rec[c + 1], line, c + 2)?);
        }
    }
    for (i, w) in stamps.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::Validation(format!(
                "{}: timestamps not strictly increasing at line {}",
                path.display(),
                i + 3
            )));
        }
    }
    let n = stamps.len();
    let values = Array2::from_shape_vec((n, f), values).expect("row-major fill");
    let ds = TimeSeriesDataset {
        name: stem(path),
        values,
        timestamps: Some(stamps),
        columns,
        split: Split { train: 0..n, valid: n..n, test: n..n },
        task: Task::Forecasting,
        labels: None,
        class_names: Vec::new(),
        instance_len: None,
        stats: None,
    };
    split_forecasting(ds, DEFAULT_RATIOS)
}

fn load_generic_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let records = read_csv_records(path)?;
    let first = records
        .first()
        .ok_or_else(|| format_err(path, 1, 1, "empty file"))?;
    let has_header = first.iter().any(|c| c.trim().parse::<f64>().is_err());
    let f = first.len();
    let columns: Vec<String> = if has_header {
        first.iter().map(|c| c.trim().to_string()).collect()
    } else {
        (0..f).map(|i| format!("c{i}")).collect()
    };
    let skip = usize::from(has_header);
    let mut values = Vec::with_capacity(records.len() * f);
    for (i, rec) in records.iter().enumerate().skip(skip) {
        let line = i + 1;
        if rec.len() != f {
            return Err(format_err(
                path,
                line,
                rec.len().min(f) + 1,
                format!("expected {f} columns, found {}", rec.len()),
            ));
        }
        for (c, cell) in rec.iter().enumerate() {
            values.push(parse_number(path, cell, line, c + 1)?);
        }
    }
    let n = records.len() - skip;
    let values = Array2::from_shape_vec((n, f), values).expect("row-major fill");
    let ds = TimeSeriesDataset {
        name: stem(path),
        values,
        timestamps: None,
        columns,
        split: Split { train: 0..n, valid: n..n, test: n..n },
        task: Task::Forecasting,
        labels: None,
        class_names: Vec::new(),
        instance_len: None,
        stats: None,
    };
    // too short for three non-empty splits: keep everything in train
    match split_forecasting(ds.clone(), DEFAULT_RATIOS) {
        Err(Error::Validation(_)) => Ok(ds),
        other => other,
    }
}

fn load_instance_file(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .enumerate()
            .map(|(c, cell)| parse_number(path, cell, i + 1, c + 1))
            .collect::<Result<Vec<_>>>()?;
        if let Some(prev) = rows.first() {
            if prev.len() != row.len() {
                return Err(format_err(path, i + 1, 1, "ragged row"));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_err(path, 1, 1, "empty instance"));
    }
    let (t, f) = (rows.len(), rows[0].len());
    Ok(Array2::from_shape_vec((t, f), rows.concat()).expect("row-major fill"))
}

/// Reads the converted archive layout: `data/<id>.txt` plus `labels.txt`.
/// Ids starting with `test` form the test split; all others are training data.
fn load_uea_archive(dir: &Path) -> Result<TimeSeriesDataset> {
    let labels_path = dir.join("labels.txt");
    let text = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| format_err(&labels_path, i + 1, 1, "expected `instance_id,label`"))?;
        let entry = (id.trim().to_string(), label.trim().to_string());
        if entry.0.starts_with("test") {
            test.push(entry);
        } else {
            train.push(entry);
        }
    }
    if train.is_empty() {
        return Err(Error::Validation(format!("{}: no training instances", dir.display())));
    }
    let class_names: Vec<String> = train
        .iter()
        .chain(test.iter())
        .map(|(_, l)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut blocks = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for (id, label) in train.iter().chain(test.iter()) {
        let path = dir.join("data").join(format!("{id}.txt"));
        let block = load_instance_file(&path)?;
        match shape {
            None => shape = Some(block.dim()),
            Some(s) if s != block.dim() => {
                return Err(Error::Validation(format!(
                    "instance {id} has shape {:?}, expected {s:?} (unequal lengths are not supported)",
                    block.dim()
                )))
            }
            _ => {}
        }
        blocks.push(block);
        labels.push(class_names.binary_search(label).expect("label collected above"));
    }
    let (t, f) = shape.expect("at least one instance");
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let values = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let n_train = train.len() * t;
    let n = values.nrows();
    let ds = TimeSeriesDataset {
        name: stem(dir),
        values,
        timestamps: None,
        columns: (0..f).map(|i| format!("dim_{i}")).collect(),
        split: Split {
            train: 0..n_train,
            valid: n_train..n_train,
            test: n_train..n,
        },
        task: Task::Classification,
        labels: Some(labels),
        class_names,
        instance_len: Some(t),
        stats: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads a dataset from disk. No normalization is applied.
pub fn load_series(path: impl AsRef<Path>, format: Format) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    match format {
        Format::EttCsv => load_ett_csv(path),
        Format::GenericCsv => load_generic_csv(path),
        Format::UeaArchive => load_uea_archive(path),
    }
}

/// Resolves a dataset name or path. Relative names are looked up under
/// `data_dir`, then `$AUTOTCL_DATA_DIR`.
pub fn resolve_dataset_path(name: &str, data_dir: Option<&Path>) -> PathBuf {
    let direct = PathBuf::from(name);
    if direct.is_absolute() || direct.exists() {
        return direct;
    }
    let mut roots: Vec<PathBuf> = data_dir.map(Path::to_path_buf).into_iter().collect();
    if let Ok(env) = std::env::var("AUTOTCL_DATA_DIR") {
        roots.push(PathBuf::from(env));
    }
    for root in &roots {
        for candidate in [root.join(name), root.join(format!("{name}.csv"))] {
            if candidate.exists() {
                return candidate;
            }
        }
    }
    roots.first().map(|r| r.join(name)).unwrap_or(direct)
}

/// Guesses the on-disk format: directories are converted UEA archives,
/// files named `ETT*` use the ETT layout, anything else is generic CSV.
pub fn infer_format(path: &Path) -> Format {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if path.is_dir() {
        Format::UeaArchive
    } else if name.starts_with("ETT") {
        Format::EttCsv
    } else {
        Format::GenericCsv
    }
}

/// Resolves, loads and standardizes a dataset. `univariate` keeps only the
/// target column of forecasting data and is ignored for classification.
pub fn prepare_dataset(
    name: &str,
    format: Option<Format>,
    univariate: bool,
    data_dir: Option<&Path>,
) -> Result<TimeSeriesDataset> {
    let path = resolve_dataset_path(name, data_dir);
    let format = format.unwrap_or_else(|| infer_format(&path));
    let mut ds = load_series(&path, format)?;
    if univariate && ds.task == Task::Forecasting {
        ds = ds.univariate();
    }
    standardize(&ds)
}

/// Train-split mean and population standard deviation per channel.
pub fn channel_stats(ds: &TimeSeriesDataset) -> Result<ChannelStats> {
    let train = ds.split_values(SplitKind::Train);
    if train.nrows() == 0 {
        return Err(Error::Validation("empty training split".into()));
    }
    let n = train.nrows() as f64;
    let mut mean = Vec::with_capacity(ds.n_features());
    let mut std = Vec::with_capacity(ds.n_features());
    for col in train.axis_iter(Axis(1)) {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    Ok(ChannelStats { mean, std })
}

/// Z-scores every channel with train-split statistics.
pub fn standardize(ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    let stats = channel_stats(ds)?;
    let mut out = ds.clone();
    for (c, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        col.mapv_inplace(|v| (v - m) / s);
    }
    out.stats = Some(stats);
    Ok(out)
}

/// Contiguous chronological split using the floor-then-remainder rule.
pub fn split_forecasting(mut ds: TimeSeriesDataset, ratios: (f64, f64, f64)) -> Result<TimeSeriesDataset> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let n = ds.n_total();
    let n_train = (n as f64 * a + 1e-9).floor() as usize;
    let n_valid = (n as f64 * b + 1e-9).floor() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::Validation(format!(
            "ratios {ratios:?} leave an empty split for {n} rows"
        )));
    }
    ds.split = Split {
        train: 0..n_train,
        valid: n_train..n_train + n_valid,
        test: n_train + n_valid..n,
    };
    Ok(ds)
}

/// A batch of equal-length windows cut from one split.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `B x T x F`.
    pub windows: Array3<f64>,
    /// Start of each window relative to the start of its split.
    pub origin_indices: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.origin_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin_indices.is_empty()
    }

    /// Gathers a batch from explicit window starts.
    pub fn gather(split_rows: ArrayView2<'_, f64>, starts: &[usize], t: usize) -> WindowBatch {
        let f = split_rows.ncols();
        let mut windows = Array3::zeros((starts.len(), t, f));
        for (b, &s0) in starts.iter().enumerate() {
            windows
                .slice_mut(s![b, .., ..])
                .assign(&split_rows.slice(s![s0..s0 + t, ..]));
        }
        WindowBatch {
            windows,
            origin_indices: starts.to_vec(),
        }
    }
}

/// Start offsets (relative to the split) of every window of length `t`.
pub fn window_starts(split_len: usize, t: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Validation("stride must be at least 1".into()));
    }
    if t == 0 || t > split_len {
        return Err(Error::Validation(format!(
            "window length {t} does not fit a split of length {split_len}"
        )));
    }
    Ok((0..=split_len - t).step_by(stride).collect())
}

/// Sliding windows over one split, grouped into consecutive batches.
pub fn make_windows(
    ds: &TimeSeriesDataset,
    t: usize,
    stride: usize,
    split: SplitKind,
    batch_size: usize,
) -> Result<Vec<WindowBatch>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let rows = ds.split_values(split);
    let starts = window_starts(rows.nrows(), t, stride)?;
    Ok(starts
        .chunks(batch_size)
        .map(|chunk| WindowBatch::gather(rows, chunk, t))
        .collect())
}
