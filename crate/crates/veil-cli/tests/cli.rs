//! End-to-end tests of the `veil` binary and the command-layer library
//! functions: exit codes, artifact hygiene, seeding precedence, and the
//! save/load predictive round trip.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

use veil_cli::commands::{cmd_fit, load_fitted, predict_with, run_fit};
use veil_cli::config::{DataSpec, Method, Model, RunConfig};

fn veil() -> Command {
    Command::new(env!("CARGO_BIN_EXE_veil"))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn quick_linreg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = Model::Linreg;
    cfg.method = Method::Vi;
    cfg.seed = seed;
    cfg.steps = 200;
    cfg.synthetic("n=60");
    cfg
}

trait SyntheticExt {
    fn synthetic(&mut self, spec: &str);
}

impl SyntheticExt for RunConfig {
    fn synthetic(&mut self, spec: &str) {
        self.data = DataSpec::Synthetic(spec.to_string());
    }
}

#[test]
fn missing_data_file_exits_3_without_artifacts() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = veil()
        .args(["fit", "--model", "linreg", "--data", "/no/such/file.csv"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("data error:"));
    assert!(!out_dir.exists(), "failed fit must not leave partial artifacts");
}

#[test]
fn config_problems_exit_2() {
    let out = veil().args(["fit", "--model", "nosuch"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown model"));

    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "model=linreg\nsteps=abc\n").unwrap();
    let out = veil().arg("fit").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 2"), "error should name the config line: {err}");

    // Method/model combinations that have no sensible engine are refused.
    let out = veil()
        .args(["fit", "--model", "branching", "--method", "map"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_optimization_exits_4_without_artifacts() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = veil()
        .args([
            "fit", "--model", "linreg", "--method", "vi", "--lr", "1e9", "--steps", "30",
            "--synthetic", "n=40",
        ])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("numerical error:"));
    assert!(!out_dir.exists());
}

#[test]
fn malformed_csv_rows_are_rejected_with_line_numbers() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "x,y\n1.0,2.0\n3.0,oops\n").unwrap();
    let out = veil()
        .arg("fit")
        .args(["--model", "linreg"])
        .arg("--data")
        .arg(&csv)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.contains("line 3"), "expected the offending line number: {err}");

    let missing = dir.path().join("cols.csv");
    fs::write(&missing, "a,b\n1,2\n").unwrap();
    let out = veil()
        .arg("fit")
        .args(["--model", "linreg"])
        .arg("--data")
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("x"), "should name the missing column");
}

#[test]
fn seed_precedence_is_env_then_config_then_flags() {
    let dir = TempDir::new().unwrap();
    let read_seed = |out_dir: &Path| -> u64 {
        let doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
        doc["seed"].as_u64().unwrap()
    };

    let env_out = dir.path().join("env");
    let st = veil()
        .args(["fit", "--model", "linreg", "--steps", "30", "--synthetic", "n=20"])
        .arg("--out")
        .arg(&env_out)
        .env("VEIL_SEED", "77")
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(read_seed(&env_out), 77);

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed=9\n").unwrap();
    let cfg_out = dir.path().join("cfg");
    let st = veil()
        .args(["fit", "--model", "linreg", "--steps", "30", "--synthetic", "n=20"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&cfg_out)
        .env("VEIL_SEED", "77")
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(read_seed(&cfg_out), 9, "config file overrides the environment");

    let flag_out = dir.path().join("flag");
    let st = veil()
        .args(["fit", "--model", "linreg", "--steps", "30", "--synthetic", "n=20", "--seed", "5"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&flag_out)
        .env("VEIL_SEED", "77")
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(read_seed(&flag_out), 5, "flags override the config file");

    let out = veil()
        .args(["fit", "--model", "linreg", "--steps", "1"])
        .env("VEIL_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "malformed VEIL_SEED is a config error");
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn reruns_with_the_same_seed_reproduce_artifacts_bitwise() {
    let dir = TempDir::new().unwrap();
    let fit = |out: &Path| {
        let st = veil()
            .args([
                "fit", "--model", "linreg", "--method", "vi", "--seed", "42", "--steps", "150",
                "--synthetic", "n=50",
            ])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fit(&a);
    fit(&b);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let predict = |manifest: &Path, out: &Path| {
        let st = veil()
            .arg("predict")
            .arg("--manifest")
            .arg(manifest)
            .args(["--seed", "3", "--n-draws", "40", "--synthetic", "n=10"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    };
    let (pa, pb) = (dir.path().join("pa"), dir.path().join("pb"));
    predict(&a, &pa);
    predict(&b, &pb);
    assert_eq!(tree_bytes(&pa), tree_bytes(&pb));
}

#[test]
fn loaded_predictions_match_in_process_predictions_bitwise() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quick_linreg(8);
    cfg.out = dir.path().join("fit");
    let mut outcome = cmd_fit(&cfg).unwrap();

    let eval = veil_cli::data::load_frame(Model::Linreg, &DataSpec::Synthetic("n=15".into()), 4, "synthetic-eval", false)
        .unwrap();
    let in_process =
        predict_with(&mut outcome.module, Model::Linreg, &eval, 60, 0.9, 4).unwrap();

    let mut loaded = load_fitted(&cfg.out).unwrap();
    let reloaded = predict_with(&mut loaded.module, Model::Linreg, &eval, 60, 0.9, 4).unwrap();

    let a = serde_json::to_string(&in_process.rows).unwrap();
    let b = serde_json::to_string(&reloaded.rows).unwrap();
    assert_eq!(a, b, "save/load must not perturb the predictive stream");
    assert_eq!(in_process.draws, reloaded.draws);
}

#[test]
fn map_and_mcmc_log_the_point_mass_swap() {
    let mut cfg = quick_linreg(3);
    cfg.method = Method::Mcmc;
    cfg.steps = 150;
    cfg.burn_in = 80;
    let outcome = run_fit(&cfg).unwrap();
    assert!(
        outcome.rundoc.events.iter().any(|e| e.contains("PointMass")),
        "events: {:?}",
        outcome.rundoc.events
    );
    let fit = &outcome.fitdoc;
    assert_eq!(fit.engine, "mcmc");
    assert!(fit.acceptance.is_some());
    let ess = fit.ess.as_ref().unwrap();
    assert!(ess.contains_key("model.a"), "ess sites: {:?}", ess.keys());

    let mut cfg = quick_linreg(3);
    cfg.method = Method::Map;
    let outcome = run_fit(&cfg).unwrap();
    assert!(outcome.rundoc.events.iter().any(|e| e.contains("PointMass")));
    for s in outcome.fitdoc.latents.values() {
        assert!(s.sd < 1e-12, "map summaries are point masses, got sd {}", s.sd);
    }
}

#[test]
fn hetreg_aleatoric_tracks_the_noise_law_at_x2() {
    let dir = TempDir::new().unwrap();
    let fit_dir = dir.path().join("fit");
    let st = veil()
        .args([
            "fit", "--model", "hetreg", "--method", "vi", "--seed", "3", "--steps", "1500",
            "--synthetic", "n=400",
        ])
        .arg("--out")
        .arg(&fit_dir)
        .status()
        .unwrap();
    assert!(st.success());

    let csv = dir.path().join("x2.csv");
    fs::write(&csv, "x\n2.0\n2.0\n").unwrap();
    let pred_dir = dir.path().join("pred");
    let st = veil()
        .arg("predict")
        .arg("--manifest")
        .arg(&fit_dir)
        .arg("--data")
        .arg(&csv)
        .args(["--n-draws", "200", "--seed", "1"])
        .arg("--out")
        .arg(&pred_dir)
        .status()
        .unwrap();
    assert!(st.success());

    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pred_dir.join("predictions.json")).unwrap())
            .unwrap();
    let aleatoric = doc["rows"][0]["aleatoric"].as_f64().unwrap();
    // noise law 0.1 + 0.5|x| evaluated at x = 2
    assert!(
        (aleatoric - 1.1).abs() <= 0.22,
        "aleatoric at x=2 should be near 1.1, got {aleatoric}"
    );
}

#[test]
fn branching_manifest_has_no_predictive_head() {
    let dir = TempDir::new().unwrap();
    let fit_dir = dir.path().join("fit");
    let st = veil()
        .args(["fit", "--model", "branching", "--method", "vi", "--steps", "50", "--seed", "2"])
        .arg("--out")
        .arg(&fit_dir)
        .status()
        .unwrap();
    assert!(st.success());
    let out = veil()
        .arg("predict")
        .arg("--manifest")
        .arg(&fit_dir)
        .arg("--out")
        .arg(dir.path().join("pred"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("demo-branching"));
}

#[test]
fn lift_rejects_unsuitable_manifests() {
    let dir = TempDir::new().unwrap();
    let linreg_dir = dir.path().join("linreg");
    let mut cfg = quick_linreg(6);
    cfg.out = linreg_dir.clone();
    cmd_fit(&cfg).unwrap();
    let out = veil()
        .arg("lift")
        .arg("--manifest")
        .arg(&linreg_dir)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no deterministic layers"));

    // A vi fit of lifted-mlp is already lifted; lifting it twice is an error.
    let vi_dir = dir.path().join("vi");
    let st = veil()
        .args([
            "fit", "--model", "lifted-mlp", "--method", "vi", "--seed", "2", "--steps", "60",
            "--pretrain-steps", "60", "--synthetic", "n=40",
        ])
        .arg("--out")
        .arg(&vi_dir)
        .status()
        .unwrap();
    assert!(st.success());
    let out = veil()
        .arg("lift")
        .arg("--manifest")
        .arg(&vi_dir)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("already lifted"));
}

#[test]
fn lift_then_predict_round_trips_through_the_manifest() {
    let dir = TempDir::new().unwrap();
    let det = dir.path().join("det");
    let st = veil()
        .args([
            "fit", "--model", "lifted-mlp", "--method", "map", "--seed", "9", "--steps", "300",
            "--synthetic", "n=80",
        ])
        .arg("--out")
        .arg(&det)
        .status()
        .unwrap();
    assert!(st.success());

    let lifted = dir.path().join("lifted");
    let st = veil()
        .arg("lift")
        .arg("--manifest")
        .arg(&det)
        .args(["--scale", "0.1", "--layer", "net"])
        .arg("--out")
        .arg(&lifted)
        .status()
        .unwrap();
    assert!(st.success());

    let pred = dir.path().join("pred");
    let st = veil()
        .arg("predict")
        .arg("--manifest")
        .arg(&lifted)
        .args(["--synthetic", "n=10", "--n-draws", "30", "--seed", "4"])
        .arg("--out")
        .arg(&pred)
        .status()
        .unwrap();
    assert!(st.success());
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pred.join("predictions.json")).unwrap()).unwrap();
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    for r in rows {
        let epi = r["epistemic"].as_f64().unwrap();
        assert!(epi > 0.0, "a lifted network must carry parameter uncertainty");
    }
}
