mod manifest;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use autotcl::data::{prepare_dataset, Task, TimeSeriesDataset};
use autotcl::eval::{
    aggregate_ranks, evaluate_classification, evaluate_forecast, export_instances, forecast_rows, mask_table,
    read_csv, write_csv, ClassifyRow, Setting,
};
use autotcl::trainer::{load_checkpoint, restore_aug, restore_encoder, write_jsonl, Checkpoint, StepRecord, Trainer};
use autotcl::{Error, ExperimentConfig, Variant};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "autotcl", version, about = "Contrastive time-series representation learning with learned augmentations")]
struct Cli {
    /// Dataset root searched before $AUTOTCL_DATA_DIR.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and augmentation network.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Ridge-probe forecasting evaluation of a trained run.
    EvalForecast {
        run_dir: PathBuf,
        /// Defaults to the training dataset.
        dataset: Option<String>,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[arg(long)]
        setting: Option<Setting>,
        /// Defaults to `<run_dir>/forecast_<dataset>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// SVM-probe classification evaluation of a trained run.
    EvalClassify {
        run_dir: PathBuf,
        dataset: Option<String>,
        /// Defaults to `<run_dir>/classify_<dataset>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one ablation variant and evaluate it.
    Ablate {
        config: PathBuf,
        variant: Variant,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write eval-mode masks of test instances, one CSV per instance.
    ExportMasks {
        run_dir: PathBuf,
        dataset: Option<String>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Channel reported in the `x` and `v_star` columns (default: last).
        #[arg(long)]
        channel: Option<usize>,
        /// Defaults to `<run_dir>/masks`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Plot per-epoch augmentation and contrastive losses.
    PlotLosses {
        run_dir: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean accuracy and mean rank over classification result files.
    Rank {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => 2,
            Error::Format { .. } | Error::Validation(_) | Error::Domain(_) | Error::Schema { .. } | Error::Io { .. } => 3,
            Error::Numerical { .. } => 4,
            Error::Invariant(_) | Error::Tensor(_) => 1,
        };
        let mut message = e.to_string();
        if let Error::Numerical {
            last_checkpoint: Some(p),
            ..
        } = &e
        {
            message.push_str(&format!(" (last good checkpoint: {})", p.display()));
        }
        Self { code, message }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn fresh_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let occupied = !dir.is_dir() || std::fs::read_dir(dir).map_err(|e| io_fail(dir, e))?.next().is_some();
        if occupied && !force {
            return Err(Failure::config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        if dir.is_dir() {
            std::fs::remove_dir_all(dir).map_err(|e| io_fail(dir, e))?;
        } else {
            std::fs::remove_file(dir).map_err(|e| io_fail(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn fresh_file(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(Failure::config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    }
    Ok(())
}

fn method_name(v: Variant) -> String {
    match v {
        Variant::Full => "AutoTCL".into(),
        other => other.name().into(),
    }
}

fn load_dataset(cfg: &ExperimentConfig, name: Option<&str>, univariate: bool, data_dir: Option<&Path>) -> CliResult<TimeSeriesDataset> {
    let name = name.unwrap_or(&cfg.data.dataset);
    let format = if name == cfg.data.dataset { cfg.data.format } else { None };
    Ok(prepare_dataset(name, format, univariate, data_dir)?)
}

/// Trains into `out` and writes logs, config echo and manifest.
fn run_training(cfg: &ExperimentConfig, out: &Path, force: bool, data_dir: Option<&Path>, command: &str) -> CliResult<(RunManifest, Trainer, TimeSeriesDataset)> {
    let ds = load_dataset(cfg, None, cfg.data.univariate, data_dir)?;
    fresh_dir(out, force)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()).map_err(|e| io_fail(out, e))?;
    let mut trainer = Trainer::new(cfg, &ds)?.with_checkpoint_dir(out.join("checkpoints"));
    let outcome = trainer.fit();
    write_jsonl(out.join("train_log.jsonl"), trainer.step_log())?;
    write_jsonl(out.join("masks.jsonl"), trainer.mask_log())?;
    let history = serde_json::to_string_pretty(trainer.history()).expect("history serializes");
    std::fs::write(out.join("history.json"), history).map_err(|e| io_fail(out, e))?;
    outcome?;
    let manifest = RunManifest::new(cfg, &ds, out, command, trainer.last_checkpoint());
    manifest.write(out)?;
    Ok((manifest, trainer, ds))
}

fn load_run(run_dir: &Path) -> CliResult<(RunManifest, Checkpoint)> {
    let manifest = RunManifest::read(run_dir)?;
    let ck_path = manifest
        .outputs
        .get("checkpoint")
        .ok_or_else(|| Failure::data(format!("{} has no final checkpoint", run_dir.display())))?;
    let ck = load_checkpoint(run_dir.join(ck_path))?;
    Ok((manifest, ck))
}

fn check_features(ds: &TimeSeriesDataset, ck: &Checkpoint) -> CliResult<()> {
    if ds.n_features() != ck.n_features {
        return Err(Failure::config(format!(
            "dataset {} has {} channels but the encoder was trained on {}",
            ds.name,
            ds.n_features(),
            ck.n_features
        )));
    }
    Ok(())
}

fn forecast_csv(
    ck: &Checkpoint,
    ds: &TimeSeriesDataset,
    horizons: &[usize],
    out: &Path,
) -> CliResult<()> {
    let encoder = restore_encoder(ck)?;
    let cfg = &ck.config;
    let results = evaluate_forecast(&encoder, ds, cfg.window_len, horizons, &cfg.eval.ridge_grid)?;
    let rows = forecast_rows(&method_name(cfg.variant), &ds.name, &results, cfg.seed, &cfg.hash());
    write_csv(out, &rows)?;
    Ok(())
}

fn classify_csv(ck: &Checkpoint, ds: &TimeSeriesDataset, out: &Path) -> CliResult<()> {
    let encoder = restore_encoder(ck)?;
    let cfg = &ck.config;
    let r = evaluate_classification(&encoder, ds, &cfg.eval.svm_c_grid)?;
    let row = ClassifyRow {
        method: method_name(cfg.variant),
        dataset: ds.name.clone(),
        accuracy: r.accuracy,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    write_csv(out, &[row])?;
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Failure::config(e.to_string()),
        other => Failure::from(other),
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let data_dir = cli.data_dir.as_deref();
    match cli.command {
        Command::Train { config, seed, out, force } => {
            let cfg = load_config(&config, seed)?;
            let (manifest, trainer, _) = run_training(&cfg, &out, force, data_dir, "train")?;
            let last = trainer.history().epochs.last().map(|e| e.losses.l_con).unwrap_or(f64::NAN);
            println!("run {} finished: {} epochs, final l_con {last}", manifest.run_id, trainer.epochs_done());
        }
        Command::EvalForecast {
            run_dir,
            dataset,
            horizons,
            setting,
            out,
            force,
        } => {
            let (_, ck) = load_run(&run_dir)?;
            let cfg = &ck.config;
            let univariate = match setting {
                Some(s) => s == Setting::Univariate,
                None => cfg.data.univariate,
            };
            let ds = load_dataset(cfg, dataset.as_deref(), univariate, data_dir)?;
            if ds.task != Task::Forecasting {
                return Err(Failure::data(format!("{} is not a forecasting dataset", ds.name)));
            }
            check_features(&ds, &ck)?;
            let out = out.unwrap_or_else(|| run_dir.join(format!("forecast_{}.csv", ds.name)));
            fresh_file(&out, force)?;
            let horizons = horizons.unwrap_or_else(|| cfg.eval.horizons.clone());
            forecast_csv(&ck, &ds, &horizons, &out)?;
            println!("wrote {}", out.display());
        }
        Command::EvalClassify { run_dir, dataset, out, force } => {
            let (_, ck) = load_run(&run_dir)?;
            let ds = load_dataset(&ck.config, dataset.as_deref(), false, data_dir)?;
            if ds.task != Task::Classification {
                return Err(Failure::data(format!("{} is not a classification dataset", ds.name)));
            }
            check_features(&ds, &ck)?;
            let out = out.unwrap_or_else(|| run_dir.join(format!("classify_{}.csv", ds.name)));
            fresh_file(&out, force)?;
            classify_csv(&ck, &ds, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Ablate {
            config,
            variant,
            seed,
            out,
            force,
        } => {
            let mut cfg = load_config(&config, seed)?;
            cfg.variant = variant;
            let (manifest, _, ds) = run_training(&cfg, &out, force, data_dir, &format!("ablate {variant}"))?;
            let ck = load_checkpoint(out.join(&manifest.outputs["checkpoint"]))?;
            let results = out.join("results.csv");
            match ds.task {
                Task::Forecasting => forecast_csv(&ck, &ds, &cfg.eval.horizons, &results)?,
                Task::Classification => classify_csv(&ck, &ds, &results)?,
            }
            println!("wrote {}", results.display());
        }
        Command::ExportMasks {
            run_dir,
            dataset,
            n,
            channel,
            out,
            force,
        } => {
            let (_, ck) = load_run(&run_dir)?;
            let aug = restore_aug(&ck)?.ok_or_else(|| {
                Failure::config(format!("variant {} has no augmentation network", ck.config.variant))
            })?;
            let ds = load_dataset(&ck.config, dataset.as_deref(), ck.config.data.univariate, data_dir)?;
            check_features(&ds, &ck)?;
            let out = out.unwrap_or_else(|| run_dir.join("masks"));
            fresh_dir(&out, force)?;
            let channel = channel.unwrap_or(ds.n_features() - 1);
            let instances = export_instances(&ds, ck.config.window_len, n)?;
            for (i, x) in instances.iter().enumerate() {
                let rows = mask_table(&aug, x, channel)?;
                write_csv(out.join(format!("instance_{i:04}.csv")), &rows)?;
            }
            println!("wrote {} mask tables to {}", instances.len(), out.display());
        }
        Command::PlotLosses { run_dir, out } => {
            let log = run_dir.join("train_log.jsonl");
            let steps: Vec<StepRecord> = autotcl::trainer::read_jsonl(&log)?;
            if steps.is_empty() {
                return Err(Failure::data(format!("{} is empty", log.display())));
            }
            let out = out.unwrap_or(run_dir);
            std::fs::create_dir_all(&out).map_err(|e| io_fail(&out, e))?;
            let curves = plot::epoch_curves(&steps);
            write_csv(out.join("losses.csv"), &curves)?;
            plot::draw(&curves, &out.join("losses.svg")).map_err(|e| Failure {
                code: 1,
                message: format!("plotting failed: {e}"),
            })?;
            println!("wrote {}", out.join("losses.svg").display());
        }
        Command::Rank { results, out, force } => {
            let mut rows = Vec::new();
            for path in &results {
                let file: Vec<ClassifyRow> = read_csv(path)?;
                rows.extend(file.into_iter().map(|r| (r.method, r.dataset, r.accuracy)));
            }
            let table = aggregate_ranks(&rows);
            for s in &table {
                println!("{:<16} acc {:.4}  rank {:.3}  ({} datasets)", s.method, s.mean_accuracy, s.mean_rank, s.datasets);
            }
            if let Some(out) = out {
                fresh_file(&out, force)?;
                write_csv(&out, &table)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
