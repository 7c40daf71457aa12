use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alt_core::dataset::{HOLDING_DIM, TABULAR_DIM};
use alt_core::model::{Activation, BackboneConfig, HeadConfig, ModelConfig, Stage};
use alt_core::pipeline::{PipelineConfig, Precision};
use sha2::{Digest, Sha256};

fn tiny_model() -> ModelConfig {
    let backbone = |act| BackboneConfig {
        stem_channels: 3,
        stages: vec![Stage::new(1, 4, 1, 2, 3), Stage::new(2, 6, 1, 2, 3)],
        head_channels: 6,
        act,
        norm: true,
    };
    ModelConfig {
        image_size: 16,
        main: backbone(Activation::Relu6),
        holding: backbone(Activation::Silu),
        heads: HeadConfig {
            main_embed: 6,
            holding_embed: 5,
            n1_in: HOLDING_DIM,
            n1_out: 3,
            n2_in: 8,
            n2_hidden: 4,
            n2_out: 2,
            n3_in: TABULAR_DIM,
            n3_out: 4,
            n4_in: 10,
            n4_out: 5,
            final_in: 7,
            ..HeadConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Scratch directory with a small-scenario, tiny-model config file.
struct Workdir {
    tmp: tempfile::TempDir,
}

impl Workdir {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig { image_size: 16, precision: Precision::F32, model: tiny_model(), ..Default::default() };
        cfg.scenario.duration_hours = 2.0;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 16;
        fs::write(tmp.path().join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Self { tmp }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("config.json");
        Command::new(env!("CARGO_BIN_EXE_altpred"))
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .current_dir(self.tmp.path())
            .env_remove("ALTPRED_THREADS")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn simulate(&self, dir: &str) {
        self.ok(&["simulate", "--out-dir", dir]);
    }

    fn inputs(&self, sim: &str) -> Vec<String> {
        ["adsb", "metar", "fpl", "recat"]
            .iter()
            .flat_map(|k| [format!("--{k}"), format!("{sim}/{k}.csv")])
            .collect()
    }

    fn build(&self, sim: &str, out: &str) {
        let mut args = vec!["build-dataset".to_string(), "--out-dir".into(), out.into()];
        args.extend(self.inputs(sim));
        self.ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
}

fn digest_dir(dir: &Path) -> String {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn resolved(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("config.resolved.json")).unwrap()).unwrap()
}

#[test]
fn full_workflow_writes_every_artifact() {
    let w = Workdir::new();
    w.simulate("sim");
    for f in ["adsb.csv", "metar.csv", "fpl.csv", "recat.csv", "truth.csv", "runways.json", "config.resolved.json"] {
        assert!(w.path("sim").join(f).exists(), "{f}");
    }
    let mut ingest = vec!["ingest".to_string(), "--out-dir".into(), "ing".into()];
    ingest.extend(w.inputs("sim"));
    w.ok(&ingest.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(w.path("ing/arrivals.csv").exists());

    w.build("sim", "ds");
    assert!(w.path("ds/manifest.jsonl").exists() && w.path("ds/holdings.csv").exists());
    assert!(fs::read_dir(w.path("ds/images")).unwrap().count() > 10);

    w.ok(&["train", "--dataset", "ds", "--out-dir", "run"]);
    w.ok(&["train", "--dataset", "ds", "--out-dir", "base", "--ablate-holding"]);
    for f in ["checkpoint.json", "history.csv", "predictions.csv", "metrics.csv", "normalizer.json", "split.json"] {
        assert!(w.path("run").join(f).exists(), "{f}");
    }
    assert_eq!(resolved(&w.path("base"))["model"]["heads"]["final_in"], 5);

    w.ok(&["evaluate", "--pred", "run/predictions.csv", "--truth", "run/predictions.csv", "--out-dir", "ev"]);
    assert!(w.path("ev/ape_cdf.csv").exists());

    w.ok(&["report", "--dataset", "ds", "--run", "run", "--baseline", "base", "--out-dir", "rep"]);
    for f in ["metrics.csv", "ape_cdf.csv", "training.svg", "ape_cdf.svg", "comparison.csv", "config.resolved.json"] {
        assert!(w.path("rep").join(f).exists(), "{f}");
    }

    w.ok(&["rasterize", "--adsb", "sim/adsb.csv", "--out-dir", "img"]);
    assert!(fs::read_to_string(w.path("img/hashes.csv")).unwrap().lines().count() > 10);
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let w = Workdir::new();
    for tag in ["a", "b"] {
        w.simulate(&format!("sim_{tag}"));
        w.build(&format!("sim_{tag}"), &format!("ds_{tag}"));
        w.ok(&["train", "--dataset", &format!("ds_{tag}"), "--out-dir", &format!("run_{tag}")]);
    }
    // config.resolved.json names the output dir, so compare the rest
    let strip = |d: &str| {
        fs::remove_file(w.path(d).join("config.resolved.json")).unwrap();
        digest_dir(&w.path(d))
    };
    assert_eq!(strip("sim_a"), strip("sim_b"));
    assert_eq!(strip("ds_a"), strip("ds_b"));
    assert_eq!(strip("run_a"), strip("run_b"));

    w.ok(&["--seed", "99", "simulate", "--out-dir", "sim_c"]);
    assert_ne!(fs::read(w.path("sim_a/adsb.csv")).unwrap(), fs::read(w.path("sim_c/adsb.csv")).unwrap());
}

#[test]
fn threads_come_from_the_environment() {
    let w = Workdir::new();
    let out = Command::new(env!("CARGO_BIN_EXE_altpred"))
        .args(["--config", "config.json", "simulate", "--out-dir", "sim"])
        .current_dir(w.tmp.path())
        .env("ALTPRED_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(resolved(&w.path("sim"))["threads"], 3);
    assert_eq!(resolved(&w.path("sim"))["seed"], 7);
}

#[test]
fn exit_codes_follow_failure_class() {
    let w = Workdir::new();
    fs::write(w.path("broken.json"), "{ not json").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_altpred"))
        .args(["--config", "broken.json", "simulate"])
        .current_dir(w.tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(w.run(&["build-dataset", "--out-dir", "x"]).status.code(), Some(2), "missing inputs");
    assert_eq!(w.run(&["simulate", "--hours", "-1"]).status.code(), Some(2));
    assert_eq!(w.run(&["ingest", "--adsb", "nowhere.csv"]).status.code(), Some(3));
    fs::write(w.path("bad.csv"), "foo,bar\n1,2\n").unwrap();
    assert_eq!(w.run(&["ingest", "--adsb", "bad.csv"]).status.code(), Some(3));

    w.simulate("sim");
    w.build("sim", "ds");
    let out = w.run(&["train", "--dataset", "ds", "--lr", "1e30", "--out-dir", "div"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!w.path("div").exists());
}

#[test]
fn report_on_empty_dataset_leaves_nothing_behind() {
    let w = Workdir::new();
    fs::create_dir(w.path("empty")).unwrap();
    fs::write(w.path("empty/manifest.jsonl"), "").unwrap();
    fs::create_dir(w.path("run")).unwrap();
    let out = w.run(&["report", "--dataset", "empty", "--run", "run", "--out-dir", "rep"]);
    assert!(!out.status.success());
    assert!(!w.path("rep").exists());
}

#[test]
fn grid_emits_tau_by_delta_matrix() {
    let w = Workdir::new();
    w.simulate("sim");
    let mut args = vec!["grid", "--taus", "60,90", "--deltas", "10,15", "--epochs", "1", "--out-dir", "grid"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    args.extend(w.inputs("sim"));
    w.ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let m = fs::read_to_string(w.path("grid/grid_mae.csv")).unwrap();
    let rows: Vec<Vec<&str>> = m.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][1..], ["10", "15"]);
    assert_eq!((rows[1][0], rows[2][0]), ("60", "90"));
    for r in &rows[1..] {
        assert_eq!(r.len(), 3);
        assert!(r[1..].iter().all(|v| v.parse::<f64>().unwrap() > 0.0));
    }
    assert_eq!(fs::read_to_string(w.path("grid/grid_metrics.csv")).unwrap().lines().count(), 5);
}
