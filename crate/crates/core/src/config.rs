//! Experiment configuration: a TOML file with one table per subsystem.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugConfig;
use crate::data::Format;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Training variants, including the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// `h ≡ 1`.
    WoH,
    /// `g ≡ 1`.
    WoG,
    /// No random timestamp masking.
    WoDv,
    /// No augmentation network: the view is the input itself.
    WoAug,
    Cutout,
    Jitter,
    RandomAug,
    /// Augmentation network trained to minimize InfoNCE between `x` and `v`.
    Adversarial,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::WoH,
        Variant::WoG,
        Variant::WoDv,
        Variant::WoAug,
        Variant::Cutout,
        Variant::Jitter,
        Variant::RandomAug,
        Variant::Adversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoH => "wo_h",
            Variant::WoG => "wo_g",
            Variant::WoDv => "wo_dv",
            Variant::WoAug => "wo_aug",
            Variant::Cutout => "cutout",
            Variant::Jitter => "jitter",
            Variant::RandomAug => "random_aug",
            Variant::Adversarial => "adversarial",
        }
    }

    /// Whether the learned augmentation network produces the views.
    pub fn uses_aug_net(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::WoH | Variant::WoG | Variant::WoDv | Variant::Adversarial
        )
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}` (expected one of {})", names.join(", "))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset name (resolved under the data directory) or a path.
    pub dataset: String,
    /// Inferred from the dataset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    /// Keep only the target (last) column.
    pub univariate: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: "ETTh1".into(),
            format: None,
            univariate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub ridge_grid: Vec<f64>,
    pub svm_c_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![24, 48, 168, 336, 720],
            ridge_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            svm_c_grid: vec![0.1, 1.0, 10.0, 100.0],
        }
    }
}

/// Parameters of the static baseline variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub cutout_frac: f64,
    pub jitter_sigma: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            cutout_frac: 0.5,
            jitter_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    /// Alternation period: the augmentation network trains on epochs with `epoch % m == 0`.
    pub m: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_aug: f64,
    pub seed: u64,
    /// Training window length for forecasting data; classification trains on whole instances.
    pub window_len: usize,
    pub stride: usize,
    /// Local contrast segment length.
    pub segment_len: usize,
    pub temperature: f64,
    /// Checkpoint period in epochs; 0 saves only the final state.
    pub checkpoint_every: usize,
    /// Cap on batches per epoch (windows are shuffled first).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_batches_per_epoch: Option<usize>,
    pub variant: Variant,
    /// Never update the augmentation network and force identity masks.
    pub freeze_aug_identity: bool,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub aug: AugConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda: 0.1,
            alpha: 0.1,
            m: 2,
            epochs: 40,
            batch_size: 8,
            lr_encoder: 0.001,
            lr_aug: 0.001,
            seed: 0,
            window_len: 200,
            stride: 1,
            segment_len: 20,
            temperature: 1.0,
            checkpoint_every: 10,
            max_batches_per_epoch: None,
            variant: Variant::Full,
            freeze_aug_identity: false,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            aug: AugConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} must be a finite non-negative number")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} must be a finite positive number")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(key, "must be at least 1"))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(s).map_err(|e| Error::config("<root>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            Error::config(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        non_negative("beta", self.beta)?;
        non_negative("lambda", self.lambda)?;
        non_negative("alpha", self.alpha)?;
        at_least_one("m", self.m)?;
        at_least_one("epochs", self.epochs)?;
        at_least_one("batch_size", self.batch_size)?;
        positive("lr_encoder", self.lr_encoder)?;
        positive("lr_aug", self.lr_aug)?;
        at_least_one("window_len", self.window_len)?;
        at_least_one("stride", self.stride)?;
        at_least_one("segment_len", self.segment_len)?;
        positive("temperature", self.temperature)?;
        if let Some(n) = self.max_batches_per_epoch {
            at_least_one("max_batches_per_epoch", n)?;
        }
        if self.window_len < 3 * self.segment_len {
            return Err(Error::config(
                "segment_len",
                format!(
                    "window_len {} must be at least three segments of length {}",
                    self.window_len, self.segment_len
                ),
            ));
        }
        if self.data.dataset.trim().is_empty() {
            return Err(Error::config("data.dataset", "must not be empty"));
        }
        self.encoder.validate()?;
        if self.aug.depth == 0 {
            return Err(Error::config("aug.depth", "must be at least 1"));
        }
        if self.aug.hidden_dim == 0 {
            return Err(Error::config("aug.hidden_dim", "must be at least 1"));
        }
        self.aug
            .hard_concrete
            .validate()
            .map_err(|e| Error::config("aug.hard_concrete", e.to_string()))?;
        let b = &self.baseline;
        if !(b.cutout_frac > 0.0 && b.cutout_frac < 1.0) {
            return Err(Error::config("baseline.cutout_frac", "must lie in (0, 1)"));
        }
        non_negative("baseline.jitter_sigma", b.jitter_sigma)?;
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            return Err(Error::config("eval.horizons", "must be a non-empty list of positive integers"));
        }
        if self.eval.ridge_grid.is_empty() {
            return Err(Error::config("eval.ridge_grid", "must not be empty"));
        }
        for &l2 in &self.eval.ridge_grid {
            non_negative("eval.ridge_grid", l2)?;
        }
        if self.eval.svm_c_grid.is_empty() {
            return Err(Error::config("eval.svm_c_grid", "must not be empty"));
        }
        for &c in &self.eval.svm_c_grid {
            positive("eval.svm_c_grid", c)?;
        }
        Ok(())
    }

    /// Content hash of the canonical JSON form; independent of key order in the source file.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
