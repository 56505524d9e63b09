use std::path::Path;
use std::process::{Command, Output};

use brainvis_core::checkpoint::{save_checkpoint, CheckpointArchive, Stage};
use brainvis_core::optim::ParamStore;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.json");

fn forge(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainvis-forge"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn grad_check_passes_and_fails_on_an_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = forge(dir.path(), &["grad-check", "--probes", "1"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let out = String::from_utf8_lossy(&ok.stdout);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 30);
    assert!(!out.contains("FAIL"));

    let bad = forge(dir.path(), &["grad-check", "--probes", "1", "--tolerance", "0"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn missing_prerequisites_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = forge(dir.path(), &["--config", TINY, "generate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));

    let o = forge(dir.path(), &["--config", TINY, "gen-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = forge(dir.path(), &["--config", TINY, "train-align"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("joint_ft"), "{}", stderr(&o));
}

#[test]
fn wrong_stage_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(forge(dir.path(), &["--config", TINY, "gen-data"]).status.success());
    let fake = CheckpointArchive::from_store(Stage::JointFt, &ParamStore::new(), serde_json::Value::Null);
    save_checkpoint(&dir.path().join("tiny/lmm/checkpoint.bvc"), &fake).unwrap();
    let o = forge(dir.path(), &["--config", TINY, "finetune-tfe"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("lmm") && err.contains("joint_ft"), "{err}");
}

#[test]
fn config_violations_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(TINY).unwrap()).unwrap();
    cfg["model"]["mask_ratio"] = 1.5.into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let o = forge(dir.path(), &["--config", path.to_str().unwrap(), "gen-data"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("model.mask_ratio"), "{}", stderr(&o));

    let o = forge(dir.path(), &["--config", TINY, "--ablate", "no-everything", "gen-data"]);
    assert!(!o.status.success());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = |sub: &str, seed: &str| {
        let root = dir.path().join(sub);
        let o = forge(&root, &["--config", TINY, "--seed", seed, "gen-data"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(root.join("tiny/data/dataset.bvd")).unwrap()
    };
    let a = data("a", "1");
    assert_eq!(a, data("b", "1"));
    assert_ne!(a, data("c", "2"));
}
