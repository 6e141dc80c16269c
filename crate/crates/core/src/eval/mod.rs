//! Frozen-encoder probes: ridge forecasting, SVM classification, rank tables.

mod ranks;
mod ridge;
mod svm;

pub use ranks::{aggregate_ranks, MethodSummary};
pub use ridge::{fit_ridge, mse_mae, select_ridge, RidgeModel};
pub use svm::{accuracy, fit_svm_selected, median_gamma, Svm};

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{compose_view, AugNet, MaskMode};
use crate::data::{SplitKind, Task, TimeSeriesDataset};
use crate::encoder::{Encoder, Pass};
use crate::error::{Error, Result};
use crate::nn::{tensor_from_f64, tensor_to_f64};

const ENCODE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Univariate,
    Multivariate,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Univariate => "univariate",
            Setting::Multivariate => "multivariate",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uni" | "univariate" => Ok(Setting::Univariate),
            "multi" | "multivariate" => Ok(Setting::Multivariate),
            other => Err(format!("unknown setting `{other}` (expected uni or multi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub n_test: usize,
    pub setting: Setting,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    pub dataset: String,
    pub accuracy: f64,
    pub n_test: usize,
    pub c: f64,
}

/// Pooled representations of the windows ending at each admissible timestamp of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// `(S − T + 1) x D`; row `i` belongs to the window ending at `T − 1 + i`.
    pub rows: Array2<f64>,
    pub window_len: usize,
    /// Leading timestamps with no complete window.
    pub skipped: usize,
}

fn encode_windows(encoder: &Encoder, windows: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
    let d = encoder.config().repr_dim;
    let mut out = Array2::zeros((windows.len(), d));
    // clean passes draw no randomness
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dtype = encoder.params().dtype();
    for (ci, chunk) in windows.chunks(ENCODE_BATCH).enumerate() {
        let (t, f) = chunk[0].dim();
        let flat: Vec<f64> = chunk.iter().flat_map(|w| w.iter().copied()).collect();
        let x = tensor_from_f64(flat, &[chunk.len(), t, f], dtype)?;
        let pooled = tensor_to_f64(&encoder.forward(&x, Pass::Clean, &mut rng)?.pooled)?;
        if pooled.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(None, "non-finite representation"));
        }
        let block = Array2::from_shape_vec((chunk.len(), d), pooled).expect("B x D");
        out.slice_mut(s![ci * ENCODE_BATCH..ci * ENCODE_BATCH + chunk.len(), ..]).assign(&block);
    }
    Ok(out)
}

/// Representations of every window of length `window_len` inside a split.
pub fn extract_features(encoder: &Encoder, ds: &TimeSeriesDataset, split: SplitKind, window_len: usize) -> Result<Features> {
    if window_len == 0 {
        return Err(Error::Validation("window length must be at least 1".into()));
    }
    let rows = ds.split_values(split);
    let s_len = rows.nrows();
    if s_len < window_len {
        return Ok(Features {
            rows: Array2::zeros((0, encoder.config().repr_dim)),
            window_len,
            skipped: s_len,
        });
    }
    let windows: Vec<_> = (0..=s_len - window_len)
        .map(|start| rows.slice(s![start..start + window_len, ..]))
        .collect();
    Ok(Features {
        rows: encode_windows(encoder, &windows)?,
        window_len,
        skipped: window_len - 1,
    })
}

/// Feature rows paired with the next `horizon` values of every column,
/// flattened time-major. Rows whose horizon runs past the split are dropped.
pub fn forecast_pairs(
    features: &Features,
    split_values: ArrayView2<'_, f64>,
    horizon: usize,
) -> (Array2<f64>, Array2<f64>) {
    let t = features.window_len;
    let s_len = split_values.nrows();
    let f = split_values.ncols();
    let n = (s_len + 1).saturating_sub(t + horizon).min(features.rows.nrows());
    let x = features.rows.slice(s![..n, ..]).to_owned();
    let y = Array2::from_shape_fn((n, horizon * f), |(i, k)| {
        let end = t - 1 + i;
        split_values[[end + 1 + k / f, k % f]]
    });
    (x, y)
}

/// Ridge probe per horizon: fit on train, choose `l2` on valid, score on test.
pub fn evaluate_forecast(
    encoder: &Encoder,
    ds: &TimeSeriesDataset,
    window_len: usize,
    horizons: &[usize],
    ridge_grid: &[f64],
) -> Result<Vec<ForecastResult>> {
    if ds.task != Task::Forecasting {
        return Err(Error::Validation(format!("{} is not a forecasting dataset", ds.name)));
    }
    let setting = if ds.n_features() == 1 { Setting::Univariate } else { Setting::Multivariate };
    let feats = [SplitKind::Train, SplitKind::Valid, SplitKind::Test]
        .map(|k| extract_features(encoder, ds, k, window_len));
    let [train, valid, test] = feats;
    let (train, valid, test) = (train?, valid?, test?);
    horizons
        .iter()
        .map(|&h| {
            let (xt, yt) = forecast_pairs(&train, ds.split_values(SplitKind::Train), h);
            let (xv, yv) = forecast_pairs(&valid, ds.split_values(SplitKind::Valid), h);
            let (xs, ys) = forecast_pairs(&test, ds.split_values(SplitKind::Test), h);
            if xs.nrows() == 0 {
                return Err(Error::Validation(format!(
                    "horizon {h} with window {window_len} exceeds the test split of {} rows",
                    ds.split.test.len()
                )));
            }
            if xt.nrows() == 0 {
                return Err(Error::Validation(format!("horizon {h} leaves no training rows")));
            }
            let model = select_ridge((xt.view(), yt.view()), (xv.view(), yv.view()), ridge_grid)?;
            let (mse, mae) = mse_mae(model.predict(xs.view()).view(), ys.view());
            Ok(ForecastResult {
                horizon: h,
                mse,
                mae,
                n_test: xs.nrows(),
                setting,
                l2: model.l2,
            })
        })
        .collect()
}

/// Pooled embeddings and labels of the instances of one split.
pub fn instance_embeddings(encoder: &Encoder, ds: &TimeSeriesDataset, split: SplitKind) -> Result<(Array2<f64>, Vec<usize>)> {
    let t = ds
        .instance_len
        .ok_or_else(|| Error::Validation(format!("{} is not a classification dataset", ds.name)))?;
    let labels = ds.labels.as_ref().expect("classification data has labels");
    let inst = ds.split_instances(split)?;
    let windows: Vec<_> = inst.clone().map(|i| ds.values.slice(s![i * t..(i + 1) * t, ..])).collect();
    if windows.is_empty() {
        return Ok((Array2::zeros((0, encoder.config().repr_dim)), Vec::new()));
    }
    Ok((encode_windows(encoder, &windows)?, inst.map(|i| labels[i]).collect()))
}

/// RBF-SVM probe on pooled instance embeddings.
pub fn evaluate_classification(encoder: &Encoder, ds: &TimeSeriesDataset, c_grid: &[f64]) -> Result<ClassifyResult> {
    let (xtr, ytr) = instance_embeddings(encoder, ds, SplitKind::Train)?;
    let (xte, yte) = instance_embeddings(encoder, ds, SplitKind::Test)?;
    if yte.is_empty() {
        return Err(Error::Validation(format!("{} has no test instances", ds.name)));
    }
    let svm = fit_svm_selected(xtr.view(), &ytr, c_grid)?;
    Ok(ClassifyResult {
        dataset: ds.name.clone(),
        accuracy: accuracy(&svm.predict(xte.view()), &yte),
        n_test: yte.len(),
        c: svm.c,
    })
}

/// One row of the forecasting results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub method: String,
    pub dataset: String,
    pub setting: String,
    /// Horizon, or `avg` for the mean over horizons.
    pub horizon: String,
    pub mse: f64,
    pub mae: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// One row of the classification results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRow {
    pub method: String,
    pub dataset: String,
    pub accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Per-horizon rows followed by the `avg` row.
pub fn forecast_rows(
    method: &str,
    dataset: &str,
    results: &[ForecastResult],
    seed: u64,
    config_hash: &str,
) -> Vec<ForecastRow> {
    let row = |setting: Setting, horizon: String, mse: f64, mae: f64| ForecastRow {
        method: method.into(),
        dataset: dataset.into(),
        setting: setting.name().into(),
        horizon,
        mse,
        mae,
        seed,
        config_hash: config_hash.into(),
    };
    let mut rows: Vec<_> = results
        .iter()
        .map(|r| row(r.setting, r.horizon.to_string(), r.mse, r.mae))
        .collect();
    if let Some(first) = results.first() {
        let n = results.len() as f64;
        rows.push(row(
            first.setting,
            "avg".into(),
            results.iter().map(|r| r.mse).sum::<f64>() / n,
            results.iter().map(|r| r.mae).sum::<f64>() / n,
        ));
    }
    rows
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 2,
                column: 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Test-split series used for mask export: the first `n` test instances, or
/// the first `n` non-overlapping windows of the test split.
pub fn export_instances(ds: &TimeSeriesDataset, window_len: usize, n: usize) -> Result<Vec<Array2<f64>>> {
    let (len, starts): (usize, Vec<usize>) = match ds.task {
        Task::Classification => {
            let t = ds.instance_len.expect("classification data has an instance length");
            (t, ds.split_instances(SplitKind::Test)?.map(|i| i * t - ds.split.test.start).collect())
        }
        Task::Forecasting => {
            let s_len = ds.split.test.len();
            if s_len < window_len {
                return Err(Error::Validation(format!(
                    "test split of {s_len} rows is shorter than the window length {window_len}"
                )));
            }
            (window_len, (0..=s_len - window_len).step_by(window_len).collect())
        }
    };
    let rows = ds.split_values(SplitKind::Test);
    Ok(starts
        .into_iter()
        .take(n)
        .map(|s0| rows.slice(s![s0..s0 + len, ..]).to_owned())
        .collect())
}

/// One timestamp of an exported mask table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub t: usize,
    pub x: f64,
    pub pi: f64,
    pub h: f64,
    pub g: f64,
    pub v_star: f64,
}

/// Eval-mode masks of one series, reporting channel `channel` of `x` and `v*`.
pub fn mask_table(aug: &AugNet, x: &Array2<f64>, channel: usize) -> Result<Vec<MaskRow>> {
    if channel >= x.ncols() {
        return Err(Error::Validation(format!("channel {channel} out of range for {} features", x.ncols())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let masks = aug.aug_forward(x, MaskMode::Eval, &mut rng)?;
    let view = compose_view(x, masks)?;
    Ok((0..x.nrows())
        .map(|t| MaskRow {
            t,
            x: x[[t, channel]],
            pi: view.masks.pi[t],
            h: view.masks.h[t],
            g: view.masks.g[t],
            v_star: view.v_star[[t, channel]],
        })
        .collect())
}
