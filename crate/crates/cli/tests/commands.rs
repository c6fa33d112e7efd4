use std::path::Path;
use std::process::{Command, Output};

use myoschema::harness::{read_dataset, SweepMethod, SweepResult};
use myoschema::{BodySchemaNet, SamplerRanges};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_myoschema"))
        .args(args)
        .current_dir(dir)
        .env_remove("MYOSCHEMA_RESULTS_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "{args:?}: {}\n{stdout}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn tiny_pretrain(dir: &Path, out: &str, seed: &str) {
    ok(dir, &["pretrain", "--samples", "20", "--epochs", "50", "--seed", seed, "--out", out]);
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["pretrain", "--config", "nowhere/pretrain.toml", "--out", "m.model"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/pretrain.toml"));
    let out = run(dir.path(), &["sweep", "--config", "absent.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn bad_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.toml"), "[collection]\ncount = 0\n").unwrap();
    let out = run(dir.path(), &["pretrain", "--config", "p.toml", "--out", "m.model"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_pretrain_is_loadable_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    tiny_pretrain(dir.path(), "a.model", "7");
    tiny_pretrain(dir.path(), "b.model", "7");
    let net = BodySchemaNet::load(dir.path().join("a.model")).unwrap();
    assert_eq!(net.n_muscles(), 3);
    assert_eq!(net.metadata.get("seed").map(String::as_str), Some("7"));
    SamplerRanges::load(SamplerRanges::sidecar_path(&dir.path().join("a.model"))).unwrap();
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a.model"), read("b.model"));
    tiny_pretrain(dir.path(), "c.model", "8");
    assert_ne!(read("a.model"), read("c.model"));
}

#[test]
fn results_dir_env_roots_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("results");
    let out = Command::new(env!("CARGO_BIN_EXE_myoschema"))
        .args(["pretrain", "--samples", "20", "--epochs", "5", "--out", "m/x.model"])
        .current_dir(dir.path())
        .env("MYOSCHEMA_RESULTS_DIR", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("m/x.model").exists());
    assert!(!dir.path().join("m/x.model").exists());
}

#[test]
fn grow_retrain_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_pretrain(d, "old.model", "1");

    let stdout = ok(d, &["grow", "--model", "old.model", "--n-new", "3", "--seed", "2", "--out", "grown.model"]);
    assert!(stdout.contains("self-check"));
    let grown = BodySchemaNet::load(d.join("grown.model")).unwrap();
    assert_eq!(grown.n_muscles(), 4);
    assert_eq!(grown.metadata.get("tag").map(String::as_str), Some("transplant-untrained"));
    let d_new = read_dataset(d.join("grown.model.dnew.csv")).unwrap();
    assert_eq!(d_new.len(), 3);
    assert!(d_new.iter().all(|s| s.n_muscles() == 4));

    // a saved dataset gives the same grown model as inline collection
    ok(d, &["grow", "--model", "old.model", "--data", "grown.model.dnew.csv", "--seed", "2", "--out", "again.model"]);
    let again = BodySchemaNet::load(d.join("again.model")).unwrap();
    assert_eq!(again.encoder(), grown.encoder());
    assert_eq!(again.normalizer(), grown.normalizer());

    // 4 -> 3 is rejected as a configuration error
    for (model, m) in [("grown.model", "3"), ("old.model", "3")] {
        let out = run(d, &["grow", "--model", model, "--muscles", m, "--out", "bad.model"]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("more muscles"));
    }
    assert!(!d.join("bad.model").exists());

    for method in ["i", "iii", "nocopy"] {
        let out = format!("{method}.model");
        ok(d, &[
            "retrain", "--model", "grown.model", "--old", "old.model", "--data", "grown.model.dnew.csv",
            "--method", method, "--epochs", "20", "--seed", "3", "--out", &out,
        ]);
        let net = BodySchemaNet::load(d.join(&out)).unwrap();
        assert_eq!(net.n_muscles(), 4);
        assert!(d.join(format!("{out}.loss.csv")).exists());
    }
    let out = run(d, &["retrain", "--model", "grown.model", "--old", "old.model", "--data", "grown.model.dnew.csv", "--method", "iv", "--out", "x.model"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(d, &["evaluate", "--model", "old.model", "--out", "eval"]);
    // a 50-epoch model may miss too many targets; that is a runtime fault, not a crash
    assert!(matches!(out.status.code(), Some(0) | Some(3)), "{}", String::from_utf8_lossy(&out.stderr));
    if out.status.success() {
        assert!(String::from_utf8_lossy(&out.stdout).contains("E_theta"));
        assert!(d.join("eval/targets.csv").exists());
        assert!(d.join("eval/trajectory.csv").exists());
    }
}

#[test]
fn evaluate_matches_sweep_transplant_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["pretrain", "--samples", "60", "--epochs", "300", "--seed", "4", "--out", "old.model"]);
    ok(d, &["grow", "--model", "old.model", "--n-new", "2", "--seed", "0", "--out", "grown.model"]);
    std::fs::write(
        d.join("sweep.toml"),
        "methods = [\"i\"]\nn_new = [2]\nseeds = [0]\nold_model = \"old.model\"\n[retrain]\nepochs = 2\n",
    )
    .unwrap();
    ok(d, &["sweep", "--config", "sweep.toml", "--out", "sw", "--plot"]);
    let result = SweepResult::load(d.join("sw/sweep.csv")).unwrap();
    assert!(d.join("sw/e_theta.svg").exists() && d.join("sw/sigma_f.svg").exists());
    let row = result.rows.iter().find(|r| r.key.method == SweepMethod::Transplant).unwrap();
    let eval = run(d, &["evaluate", "--model", "grown.model"]);
    if row.ok() {
        let stdout = String::from_utf8_lossy(&eval.stdout).to_string();
        assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
        assert!(stdout.contains(&format!("E_theta {:.5} rad", row.e_theta)), "{stdout} vs {}", row.e_theta);
    } else {
        assert_eq!(eval.status.code(), Some(3));
    }
}

#[test]
fn shipped_configs_parse_to_the_defaults() {
    use myoschema::harness::{load_config, EvaluationConfig, PretrainConfig, SweepConfig};
    use myoschema::{PlantConfig, RetrainConfig};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(load_config::<PretrainConfig>(dir.join("pretrain.toml")).unwrap(), PretrainConfig::default());
    assert_eq!(load_config::<RetrainConfig>(dir.join("retrain.toml")).unwrap(), RetrainConfig::default());
    assert_eq!(load_config::<EvaluationConfig>(dir.join("evaluation.toml")).unwrap(), EvaluationConfig::default());
    assert_eq!(PlantConfig::load(dir.join("plant_old.toml")).unwrap(), PlantConfig::old_arrangement());
    assert_eq!(PlantConfig::load(dir.join("plant_new.toml")).unwrap(), PlantConfig::new_arrangement());
    let sweep = SweepConfig::load(dir.join("sweep.toml")).unwrap();
    assert_eq!(sweep.plant_new.as_deref(), Some(dir.join("plant_new.toml").as_path()));
    let defaults = SweepConfig { plant_old: sweep.plant_old.clone(), plant_new: sweep.plant_new.clone(), ..Default::default() };
    assert_eq!(sweep, defaults);
}
