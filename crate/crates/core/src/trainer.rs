//! Alternating training of the augmentation network and the encoder.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{compose_tensor, static_augment, AugNet, MaskMode, StaticPolicy};
use crate::config::{ExperimentConfig, Variant};
use crate::data::{window_starts, SplitKind, Task, TimeSeriesDataset};
use crate::encoder::{Encoder, Pass};
use crate::error::{Error, Result};
use crate::nn::{tensor_from_f64, tensor_to_f64, Adam, AdamState, NamedArray};
use crate::objectives::{
    aug_loss, contrastive_loss, global_contrast_loss, local_contrast_loss, pri_loss, sample_triplets,
    temporal_triplet_loss, to_f64, LossReport,
};
use crate::rng::{RngStreams, StreamState};

pub const SCHEMA_VERSION: u32 = 1;

/// Weights and activations are kept in single precision during training.
pub const TRAIN_DTYPE: DType = DType::F32;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Masks of the first instance of the first batch of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub epoch: usize,
    pub step: u64,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step-averaged losses; augmentation terms average over the steps that computed them.
    pub losses: LossReport,
    pub wall_clock_secs: f64,
    pub batches: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingHistory {
    /// Per-epoch `(l_aug, l_con)` pairs, without timing information.
    pub fn loss_sequence(&self) -> Vec<(Option<f64>, f64)> {
        self.epochs.iter().map(|e| (e.losses.l_aug, e.losses.l_con)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub aug_updates: u64,
    pub encoder_updates: u64,
    /// Steps whose parameter isolation was verified by checksums.
    pub isolation_checks: u64,
}

/// Complete resumable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub dataset_fingerprint: String,
    pub n_features: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub encoder: Vec<NamedArray>,
    pub aug: Option<Vec<NamedArray>>,
    pub encoder_opt: AdamState,
    pub aug_opt: Option<AdamState>,
    pub rng: Vec<StreamState>,
    pub counters: UpdateCounters,
    pub history: TrainingHistory,
    pub steps: Vec<StepRecord>,
    pub masks: Vec<MaskRecord>,
}

fn schema_err(found: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        expected: SCHEMA_VERSION.to_string(),
        found: found.into(),
        message: message.into(),
    }
}

/// Writes a checkpoint through a temporary file so readers never see a partial write.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_vec(ck).expect("checkpoint serializes");
    std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| schema_err("unreadable", format!("{}: {e}", path.display())))?;
    let found = value.get("schema_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(schema_err(v.to_string(), format!("{}: unsupported schema version", path.display()))),
        None => return Err(schema_err("missing", format!("{}: no schema_version field", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| schema_err(SCHEMA_VERSION.to_string(), format!("{}: {e}", path.display())))
}

/// Rebuilds the encoder stored in a checkpoint.
pub fn restore_encoder(ck: &Checkpoint) -> Result<Encoder> {
    let mut rng = RngStreams::new(ck.config.seed).init;
    let enc = Encoder::new(&ck.config.encoder, ck.n_features, TRAIN_DTYPE, &mut rng)?;
    enc.params().import(&ck.encoder)?;
    Ok(enc)
}

/// Rebuilds the augmentation network stored in a checkpoint, if the variant has one.
pub fn restore_aug(ck: &Checkpoint) -> Result<Option<AugNet>> {
    let Some(arrays) = &ck.aug else { return Ok(None) };
    let mut rng = RngStreams::new(ck.config.seed).init;
    let aug = AugNet::new(&ck.config.aug, ck.n_features, TRAIN_DTYPE, &mut rng)?;
    aug.params().import(arrays)?;
    Ok(Some(aug))
}

/// Source rows and window starts used for training.
#[derive(Debug, Clone)]
struct TrainingSet {
    rows: Array2<f64>,
    starts: Vec<usize>,
    t: usize,
}

fn training_set(cfg: &ExperimentConfig, ds: &TimeSeriesDataset) -> Result<TrainingSet> {
    ds.validate()?;
    match ds.task {
        Task::Forecasting => {
            let rows = ds.split_values(SplitKind::Train).to_owned();
            let starts = window_starts(rows.nrows(), cfg.window_len, cfg.stride)?;
            Ok(TrainingSet {
                rows,
                starts,
                t: cfg.window_len,
            })
        }
        Task::Classification => {
            let t = ds.instance_len.ok_or_else(|| Error::Validation("classification data without instance length".into()))?;
            let inst = ds.split_instances(SplitKind::Train)?;
            if inst.is_empty() {
                return Err(Error::Validation("empty training split".into()));
            }
            Ok(TrainingSet {
                rows: ds.values.clone(),
                starts: inst.map(|i| i * t).collect(),
                t,
            })
        }
    }
}

fn static_policy(cfg: &ExperimentConfig) -> Option<StaticPolicy> {
    match cfg.variant {
        Variant::Cutout => Some(StaticPolicy::Cutout {
            l_frac: cfg.baseline.cutout_frac,
        }),
        Variant::Jitter => Some(StaticPolicy::Jitter {
            sigma: cfg.baseline.jitter_sigma,
        }),
        Variant::RandomAug => Some(StaticPolicy::RandomAug),
        _ => None,
    }
}

fn finite_or_abort(name: &str, v: f64, last: &Option<PathBuf>) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            layer: None,
            message: format!("non-finite {name} = {v}"),
            last_checkpoint: last.clone(),
        })
    }
}

#[derive(Default)]
struct EpochAccumulator {
    n: usize,
    n_aug: usize,
    l_pri: f64,
    l_t: f64,
    l_aug: f64,
    have_pri: bool,
    l_g: f64,
    l_l: f64,
    l_con: f64,
    batch: usize,
}

impl EpochAccumulator {
    fn add(&mut self, r: &LossReport) {
        self.n += 1;
        self.batch += r.batch_size;
        self.l_g += r.l_g;
        self.l_l += r.l_l;
        self.l_con += r.l_con;
        if let Some(a) = r.l_aug {
            self.n_aug += 1;
            self.l_aug += a;
        }
        if let (Some(p), Some(t)) = (r.l_pri, r.l_t) {
            self.have_pri = true;
            self.l_pri += p;
            self.l_t += t;
        }
    }

    fn mean(&self) -> LossReport {
        let n = self.n.max(1) as f64;
        let na = self.n_aug.max(1) as f64;
        LossReport {
            l_pri: self.have_pri.then(|| self.l_pri / na),
            l_t: self.have_pri.then(|| self.l_t / na),
            l_aug: (self.n_aug > 0).then(|| self.l_aug / na),
            l_g: self.l_g / n,
            l_l: self.l_l / n,
            l_con: self.l_con / n,
            batch_size: self.batch / self.n.max(1),
        }
    }
}

/// Training state for one run.
pub struct Trainer {
    cfg: ExperimentConfig,
    encoder: Encoder,
    aug: Option<AugNet>,
    enc_opt: Adam,
    aug_opt: Option<Adam>,
    rngs: RngStreams,
    set: TrainingSet,
    n_features: usize,
    fingerprint: String,
    epoch: usize,
    step: u64,
    counters: UpdateCounters,
    history: TrainingHistory,
    steps: Vec<StepRecord>,
    masks: Vec<MaskRecord>,
    checkpoint_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
    verify_isolation: bool,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, ds: &TimeSeriesDataset) -> Result<Self> {
        cfg.validate()?;
        let set = training_set(cfg, ds)?;
        if set.t < 3 * cfg.segment_len {
            return Err(Error::Validation(format!(
                "training windows of length {} are shorter than three segments of length {}",
                set.t, cfg.segment_len
            )));
        }
        let n_features = ds.n_features();
        let mut rngs = RngStreams::new(cfg.seed);
        let encoder = Encoder::new(&cfg.encoder, n_features, TRAIN_DTYPE, &mut rngs.init)?;
        let aug = if cfg.variant.uses_aug_net() {
            Some(AugNet::new(&cfg.aug, n_features, TRAIN_DTYPE, &mut rngs.init)?)
        } else {
            None
        };
        let enc_opt = Adam::new(encoder.params().vars(), cfg.lr_encoder);
        let aug_opt = aug.as_ref().map(|a| Adam::new(a.params().vars(), cfg.lr_aug));
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            aug,
            enc_opt,
            aug_opt,
            rngs,
            set,
            n_features,
            fingerprint: ds.fingerprint(),
            epoch: 0,
            step: 0,
            counters: UpdateCounters::default(),
            history: TrainingHistory::default(),
            steps: Vec::new(),
            masks: Vec::new(),
            checkpoint_dir: None,
            last_checkpoint: None,
            verify_isolation: false,
        })
    }

    /// Continues a run from a checkpoint taken on the same dataset.
    pub fn resume(ck: &Checkpoint, ds: &TimeSeriesDataset) -> Result<Self> {
        if ck.dataset_fingerprint != ds.fingerprint() {
            return Err(Error::Validation(format!(
                "checkpoint was taken on dataset {} but {} was given",
                ck.dataset_fingerprint,
                ds.fingerprint()
            )));
        }
        let mut tr = Self::new(&ck.config, ds)?;
        tr.encoder.params().import(&ck.encoder)?;
        tr.enc_opt.restore(&ck.encoder_opt)?;
        match (&tr.aug, &ck.aug) {
            (Some(a), Some(w)) => a.params().import(w)?,
            (None, None) => {}
            _ => return Err(schema_err(SCHEMA_VERSION.to_string(), "augmentation weights do not match the variant")),
        }
        match (&mut tr.aug_opt, &ck.aug_opt) {
            (Some(o), Some(s)) => o.restore(s)?,
            (None, None) => {}
            _ => return Err(schema_err(SCHEMA_VERSION.to_string(), "augmentation optimizer does not match the variant")),
        }
        tr.rngs = RngStreams::restore(ck.config.seed, &ck.rng).map_err(|m| schema_err(SCHEMA_VERSION.to_string(), m))?;
        tr.epoch = ck.epoch;
        tr.step = ck.step;
        tr.counters = ck.counters;
        tr.history = ck.history.clone();
        tr.steps = ck.steps.clone();
        tr.masks = ck.masks.clone();
        tr.last_checkpoint = ck.history.checkpoints.last().cloned();
        Ok(tr)
    }

    /// Directory for periodic and final checkpoints.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Check after every optimizer step that the other network was left untouched.
    pub fn with_isolation_checks(mut self, on: bool) -> Self {
        self.verify_isolation = on;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn aug(&self) -> Option<&AugNet> {
        self.aug.as_ref()
    }

    pub fn history(&self) -> &TrainingHistory {
        &self.history
    }

    pub fn step_log(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn mask_log(&self) -> &[MaskRecord] {
        &self.masks
    }

    pub fn counters(&self) -> UpdateCounters {
        self.counters
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        let n = self.set.starts.len().div_ceil(self.cfg.batch_size);
        self.cfg.max_batches_per_epoch.map_or(n, |m| n.min(m))
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn aug_trainable(&self) -> bool {
        self.aug.is_some() && !self.cfg.freeze_aug_identity
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            schema_version: SCHEMA_VERSION,
            config: self.cfg.clone(),
            dataset_fingerprint: self.fingerprint.clone(),
            n_features: self.n_features,
            epoch: self.epoch,
            step: self.step,
            encoder: self.encoder.params().export()?,
            aug: self.aug.as_ref().map(|a| a.params().export()).transpose()?,
            encoder_opt: self.enc_opt.state()?,
            aug_opt: self.aug_opt.as_ref().map(|o| o.state()).transpose()?,
            rng: self.rngs.snapshot(),
            counters: self.counters,
            history: self.history.clone(),
            steps: self.steps.clone(),
            masks: self.masks.clone(),
        })
    }

    /// Runs the remaining epochs.
    pub fn fit(&mut self) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    fn batch_tensor(&self, starts: &[usize]) -> Result<(Tensor, Vec<Array2<f64>>)> {
        let (t, f) = (self.set.t, self.n_features);
        let instances: Vec<Array2<f64>> = starts
            .iter()
            .map(|&s0| self.set.rows.slice(s![s0..s0 + t, ..]).to_owned())
            .collect();
        let flat: Vec<f64> = instances.iter().flat_map(|a| a.iter().copied()).collect();
        Ok((tensor_from_f64(flat, &[starts.len(), t, f], TRAIN_DTYPE)?, instances))
    }

    /// Runs one epoch: encoder steps on every batch, plus augmentation steps when `epoch % m == 0`.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.epoch;
        let aug_epoch = epoch % self.cfg.m == 0;
        let mut order = self.set.starts.clone();
        order.shuffle(&mut self.rngs.data);
        let n_batches = self.batches_per_epoch();
        let mut acc = EpochAccumulator::default();
        for (bi, chunk) in order.chunks(self.cfg.batch_size).take(n_batches).enumerate() {
            let report = self.train_step(chunk, aug_epoch, bi == 0)?;
            acc.add(&report);
            self.steps.push(StepRecord {
                step: self.step,
                epoch,
                losses: report,
            });
            self.step += 1;
        }
        self.epoch += 1;
        let mut record = EpochRecord {
            epoch,
            losses: acc.mean(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            batches: n_batches,
            checkpoint: None,
        };
        let every = self.cfg.checkpoint_every;
        let due = (every > 0 && self.epoch % every == 0) || self.epoch == self.cfg.epochs;
        if let (Some(dir), true) = (&self.checkpoint_dir, due) {
            let path = dir.join(format!("epoch_{:04}.json", self.epoch));
            record.checkpoint = Some(path.clone());
            self.history.checkpoints.push(path.clone());
            self.history.epochs.push(record.clone());
            save_checkpoint(&self.checkpoint()?, &path)?;
            self.last_checkpoint = Some(path);
        } else {
            self.history.epochs.push(record.clone());
        }
        Ok(record)
    }

    fn train_step(&mut self, starts: &[usize], aug_epoch: bool, log_masks: bool) -> Result<LossReport> {
        let b = starts.len();
        let t = self.set.t;
        let (x, instances) = self.batch_tensor(starts)?;
        let hc = self.cfg.aug.hard_concrete;
        let mut report = LossReport {
            batch_size: b,
            ..Default::default()
        };

        // views
        let mut aug_parts = None;
        let view = if self.cfg.freeze_aug_identity && self.aug.is_some() {
            if log_masks {
                self.push_masks(vec![1.0; t], vec![1.0; t]);
            }
            x.clone()
        } else if let Some(aug) = &self.aug {
            let masks = aug.forward(&x, MaskMode::Train, &mut self.rngs.concrete)?;
            let h = if self.cfg.variant == Variant::WoH { masks.h.ones_like()? } else { masks.h.clone() };
            let g = if self.cfg.variant == Variant::WoG { masks.g.ones_like()? } else { masks.g.clone() };
            let v_star = compose_tensor(&x, &h, &g)?;
            if log_masks {
                let hv = tensor_to_f64(&h.narrow(0, 0, 1)?)?;
                let gv = tensor_to_f64(&g.narrow(0, 0, 1)?)?;
                self.push_masks(hv, gv);
            }
            aug_parts = Some((v_star.clone(), masks.alpha, h));
            v_star
        } else if let Some(policy) = static_policy(&self.cfg) {
            let mut flat = Vec::with_capacity(x.elem_count());
            for (i, inst) in instances.iter().enumerate() {
                let view = static_augment(inst, policy, &mut self.rngs.statics)?;
                if log_masks && i == 0 {
                    self.push_masks(view.masks.h.clone(), view.masks.g.clone());
                }
                flat.extend(view.v.iter().copied());
            }
            tensor_from_f64(flat, x.dims(), TRAIN_DTYPE)?
        } else {
            x.clone()
        };

        // augmentation step
        if aug_epoch && self.aug_trainable() {
            let (v_star, alpha, h) = aug_parts.as_ref().expect("augmentation network produced the view");
            let l_aug = if self.cfg.variant == Variant::Adversarial {
                let z_x = self.encoder.forward(&x, Pass::Clean, &mut self.rngs.eta)?.pooled;
                let z_v = self.encoder.forward(v_star, Pass::Clean, &mut self.rngs.eta)?.pooled;
                global_contrast_loss(&z_x, &z_v, self.cfg.temperature)?.neg()?
            } else {
                let l_pri = pri_loss(&self.encoder, &x, v_star, alpha, self.cfg.beta, &hc, &mut self.rngs.eta)?;
                let triplets = sample_triplets(b, t, &mut self.rngs.triplet)?;
                let l_t = temporal_triplet_loss(h, &triplets)?;
                report.l_pri = Some(to_f64(&l_pri)?);
                report.l_t = Some(to_f64(&l_t)?);
                aug_loss(&l_pri, &l_t, self.cfg.lambda)?
            };
            let value = to_f64(&l_aug)?;
            finite_or_abort("l_aug", value, &self.last_checkpoint)?;
            report.l_aug = Some(value);
            let grads = l_aug.backward()?;
            let before = self.isolation_checksum(true)?;
            self.aug_opt.as_mut().expect("trainable augmentation has an optimizer").step(&grads)?;
            self.check_isolation(true, before)?;
            self.counters.aug_updates += 1;
        }

        // encoder step
        let view = view.detach();
        let pass = Pass::Train {
            eta: self.cfg.variant != Variant::WoDv,
        };
        let ex = self.encoder.forward(&x, pass, &mut self.rngs.eta)?;
        let ev = self.encoder.forward(&view, pass, &mut self.rngs.eta)?;
        let l_g = global_contrast_loss(&ex.pooled, &ev.pooled, self.cfg.temperature)?;
        let l_l = local_contrast_loss(&ev.per_step, self.cfg.segment_len, self.cfg.temperature)?;
        let l_con = contrastive_loss(&l_g, &l_l, self.cfg.alpha)?;
        report.l_g = to_f64(&l_g)?;
        report.l_l = to_f64(&l_l)?;
        report.l_con = to_f64(&l_con)?;
        finite_or_abort("l_con", report.l_con, &self.last_checkpoint)?;
        let grads = l_con.backward()?;
        let before = self.isolation_checksum(false)?;
        self.enc_opt.step(&grads)?;
        self.check_isolation(false, before)?;
        self.counters.encoder_updates += 1;
        Ok(report)
    }

    fn push_masks(&mut self, h: Vec<f64>, g: Vec<f64>) {
        self.masks.push(MaskRecord {
            epoch: self.epoch,
            step: self.step,
            h,
            g,
        });
    }

    /// Checksum of the network that must stay fixed during the coming step.
    fn isolation_checksum(&self, aug_step: bool) -> Result<Option<String>> {
        if !self.verify_isolation {
            return Ok(None);
        }
        if aug_step {
            Ok(Some(self.encoder.params().checksum()?))
        } else {
            self.aug.as_ref().map(|a| a.params().checksum()).transpose()
        }
    }

    fn check_isolation(&mut self, aug_step: bool, before: Option<String>) -> Result<()> {
        let Some(before) = before else { return Ok(()) };
        let after = self.isolation_checksum(aug_step)?.expect("checks enabled");
        if before != after {
            let (stepped, moved) = if aug_step { ("augmentation", "encoder") } else { ("encoder", "augmentation") };
            return Err(Error::Invariant(format!(
                "{stepped} optimizer step changed {moved} weights at step {}",
                self.step
            )));
        }
        self.counters.isolation_checks += 1;
        Ok(())
    }
}

/// Trains from scratch without checkpoints.
pub fn train(cfg: &ExperimentConfig, ds: &TimeSeriesDataset) -> Result<Trainer> {
    let mut tr = Trainer::new(cfg, ds)?;
    tr.fit()?;
    Ok(tr)
}

/// Writes records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSON lines written by [`write_jsonl`].
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}
