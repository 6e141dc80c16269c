use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_autotcl"));
    c.env_remove("AUTOTCL_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_series(path: &Path, n: usize) {
    let mut body = String::from("a,b\n");
    for t in 0..n {
        let t = t as f64;
        body.push_str(&format!("{:.6},{:.6}\n", (t / 7.0).sin() + 0.05 * (t * 1.3).cos(), (t / 11.0).cos()));
    }
    std::fs::write(path, body).unwrap();
}

const BASE: &str = r#"
epochs = 4
batch_size = 4
window_len = 30
segment_len = 5
checkpoint_every = 2
max_batches_per_epoch = 3
seed = 3
[encoder]
depth = 2
hidden_dim = 8
repr_dim = 16
[aug]
hidden_dim = 8
depth = 2
[eval]
horizons = [1, 4]
"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self::with_extra("")
    }

    fn with_extra(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_series(&dir.path().join("toy.csv"), 300);
        let cfg = format!(
            "{extra}\n{BASE}\n[data]\ndataset = \"{}\"\nunivariate = false\n",
            dir.path().join("toy.csv").display()
        );
        std::fs::write(dir.path().join("cfg.toml"), cfg).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let cfg = self.path("cfg.toml");
        let out = self.path(out);
        let mut args = vec!["train", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        run(&args)
    }
}

#[test]
fn train_writes_run_directory() {
    let f = Fixture::new();
    let o = f.train("run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = f.path("run");
    for name in ["config.toml", "manifest.json", "train_log.jsonl", "masks.jsonl", "history.json"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let ck = manifest["outputs"]["checkpoint"].as_str().unwrap();
    assert!(run.join(ck).is_file());
    assert_eq!(manifest["config"]["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 16);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4 * 3);
}

#[test]
fn same_seed_gives_identical_logs() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("a", &["--seed", "1"])), 0);
    assert_eq!(code(&f.train("b", &["--seed", "1"])), 0);
    let a = std::fs::read(f.path("a/train_log.jsonl")).unwrap();
    let b = std::fs::read(f.path("b/train_log.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(code(&f.train("c", &["--seed", "2"])), 0);
    assert_ne!(a, std::fs::read(f.path("c/train_log.jsonl")).unwrap());
}

#[test]
fn unknown_config_key_exits_2_with_key_path() {
    let f = Fixture::with_extra("");
    let cfg = std::fs::read_to_string(f.path("cfg.toml")).unwrap().replace("[encoder]", "[encoder]\nwidht = 3");
    std::fs::write(f.path("cfg.toml"), cfg).unwrap();
    let o = f.train("run", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("encoder.widht"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2() {
    let f = Fixture::with_extra("beta = -1.0");
    let o = f.train("run", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
}

#[test]
fn out_collision_requires_force() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let o = f.train("run", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    assert_eq!(code(&f.train("run", &["--force"])), 0);
}

#[test]
fn missing_dataset_exits_3() {
    let f = Fixture::new();
    std::fs::remove_file(f.path("toy.csv")).unwrap();
    assert_eq!(code(&f.train("run", &[])), 3);
}

#[test]
fn malformed_dataset_exits_3() {
    let f = Fixture::new();
    std::fs::write(f.path("toy.csv"), "a,b\n1,2\n3,oops\n").unwrap();
    let o = f.train("run", &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn data_dir_env_fallback() {
    let f = Fixture::new();
    let cfg = std::fs::read_to_string(f.path("cfg.toml")).unwrap();
    let cfg = cfg.replace(&format!("\"{}\"", f.path("toy.csv").display()), "\"toy\"");
    std::fs::write(f.path("cfg.toml"), cfg).unwrap();
    assert_eq!(code(&f.train("a", &[])), 3);
    let o = bin()
        .env("AUTOTCL_DATA_DIR", f.dir.path())
        .args(["train", s(&f.path("cfg.toml")), "--out", s(&f.path("b"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn eval_forecast_writes_schema_and_avg_row() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let out = f.path("res.csv");
    let o = run(&["eval-forecast", s(&f.path("run")), "--setting", "multi", "--horizons", "1,2,4", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,dataset,setting,horizon,mse,mae,seed,config_hash");
    assert_eq!(lines.len(), 5);
    let horizons: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(horizons, ["1", "2", "4", "avg"]);
    assert!(lines[1].starts_with("AutoTCL,toy,multivariate,"));
    let mses: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert!(((mses[0] + mses[1] + mses[2]) / 3.0 - mses[3]).abs() < 1e-12);
    assert_eq!(code(&run(&["eval-forecast", s(&f.path("run")), "--setting", "multi", "--out", s(&out)])), 2);
}

#[test]
fn eval_forecast_rejects_channel_mismatch() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let o = run(&["eval-forecast", s(&f.path("run")), "--setting", "uni"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_forecast_horizon_too_long_exits_3() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let o = run(&["eval-forecast", s(&f.path("run")), "--setting", "multi", "--horizons", "500"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn ablate_wo_g_logs_unit_g() {
    let f = Fixture::new();
    let out = f.path("abl");
    let o = run(&["ablate", s(&f.path("cfg.toml")), "wo_g", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let masks = std::fs::read_to_string(out.join("masks.jsonl")).unwrap();
    assert!(masks.lines().count() > 0);
    for line in masks.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["g"].as_array().unwrap().iter().all(|g| g.as_f64() == Some(1.0)));
    }
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.lines().nth(1).unwrap().starts_with("wo_g,"));
}

#[test]
fn ablate_wo_aug_never_computes_l_aug() {
    let f = Fixture::new();
    let out = f.path("abl");
    assert_eq!(code(&run(&["ablate", s(&f.path("cfg.toml")), "wo_aug", "--out", s(&out)])), 0);
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() > 0);
    assert!(!log.contains("l_aug"));
}

#[test]
fn ablate_rejects_unknown_variant() {
    let f = Fixture::new();
    let o = run(&["ablate", s(&f.path("cfg.toml")), "adversarial_off", "--out", s(&f.path("x"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn export_masks_schema_and_binary_h() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let out = f.path("masks");
    let o = run(&["export-masks", s(&f.path("run")), "--n", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().collect();
    assert_eq!(files.len(), 1);
    let text = std::fs::read_to_string(out.join("instance_0000.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x,pi,h,g,v_star");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 30);
    for r in &rows {
        assert!(r[3] == 0.0 || r[3] == 1.0);
        assert!((r[5] - r[3] * r[4] * r[1]).abs() < 1e-6);
    }
}

#[test]
fn export_masks_without_aug_net_exits_2() {
    let f = Fixture::new();
    let out = f.path("abl");
    assert_eq!(code(&run(&["ablate", s(&f.path("cfg.toml")), "cutout", "--out", s(&out)])), 0);
    assert_eq!(code(&run(&["export-masks", s(&out), "--n", "1"])), 2);
}

#[test]
fn plot_losses_writes_labeled_svg() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let o = run(&["plot-losses", s(&f.path("run"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = std::fs::read_to_string(f.path("run/losses.svg")).unwrap();
    let texts: Vec<&str> = svg.lines().map(str::trim).collect();
    assert!(texts.contains(&"epoch"));
    assert!(texts.contains(&"loss"));
    assert!(svg.contains("contrastive loss") && svg.contains("augmentation loss"));
    let csv = std::fs::read_to_string(f.path("run/losses.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 4);
}

#[test]
fn plot_losses_empty_log_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train_log.jsonl"), "").unwrap();
    assert_eq!(code(&run(&["plot-losses", s(dir.path())])), 3);
}

#[test]
fn rank_aggregates_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "method,dataset,accuracy,seed,config_hash\nA,x,0.9,0,h\nA,y,0.8,0,h\n").unwrap();
    std::fs::write(&b, "method,dataset,accuracy,seed,config_hash\nB,x,0.9,0,h\nB,y,0.7,0,h\n").unwrap();
    let out = dir.path().join("ranks.csv");
    let o = run(&["rank", s(&a), s(&b), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "method,mean_accuracy,mean_rank,datasets");
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][0], "A");
    assert!((rows[0][1].parse::<f64>().unwrap() - 0.85).abs() < 1e-12);
    assert_eq!(rows[0][2], "1.25");
    assert_eq!(rows[1][0], "B");
    assert_eq!(rows[1][2], "1.75");
}

#[test]
fn divergence_exits_4_and_names_checkpoint() {
    let f = Fixture::with_extra("lr_encoder = 1e30\nlr_aug = 1e30");
    let cfg = std::fs::read_to_string(f.path("cfg.toml")).unwrap().replace("checkpoint_every = 2", "checkpoint_every = 1");
    std::fs::write(f.path("cfg.toml"), cfg).unwrap();
    let o = f.train("run", &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(f.path("run/train_log.jsonl").is_file());
}
