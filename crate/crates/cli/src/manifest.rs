use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use autotcl::data::TimeSeriesDataset;
use autotcl::{Error, ExperimentConfig};

const FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    /// Paths relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    /// Protocol choices that affect how results should be read.
    pub metadata: BTreeMap<String, String>,
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, out: &Path, command: &str, checkpoint: Option<&Path>) -> Self {
        let config_hash = cfg.hash();
        let fingerprint = ds.fingerprint();
        let abs = std::fs::canonicalize(out).unwrap_or_else(|_| out.to_path_buf());
        let digest = Sha256::digest(format!("{config_hash}:{fingerprint}:{}:{}", cfg.seed, abs.display()));
        let run_id: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        let mut outputs = BTreeMap::new();
        for (k, v) in [
            ("config", "config.toml"),
            ("train_log", "train_log.jsonl"),
            ("mask_log", "masks.jsonl"),
            ("history", "history.json"),
        ] {
            outputs.insert(k.to_string(), v.to_string());
        }
        if let Some(ck) = checkpoint {
            outputs.insert("checkpoint".into(), relative(ck, out));
        }
        let metadata = [
            ("forecast_split", "chronological 60/20/20 train/valid/test"),
            ("metric_scale", "standardized with train-split statistics"),
            ("l0_normalization", "expected L0 divided by window length"),
            ("similarity", "cosine / temperature"),
            ("alternation", "augmentation steps on every batch of epochs with epoch % m == 0"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            run_id,
            command: command.into(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            config_hash,
            dataset: ds.name.clone(),
            dataset_fingerprint: fingerprint,
            seed: cfg.seed,
            outputs,
            metadata,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let path = dir.join(FILE);
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, body).map_err(|e| Error::Io { path, source: e })
    }

    pub fn read(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}
