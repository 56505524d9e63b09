use std::path::{Path, PathBuf};

use brainvis_core::config::{Ablation, PipelineConfig};
use brainvis_core::pipeline::{Command, Run};
use brainvis_core::Error;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny() -> PipelineConfig {
    PipelineConfig::load(&configs().join("tiny.json")).unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn shipped_default_matches_the_built_in_default() {
    let file = PipelineConfig::load(&configs().join("default.json")).unwrap();
    assert_eq!(file, PipelineConfig::default());
    file.validate().unwrap();
    tiny().validate().unwrap();
}

#[test]
fn every_stage_refuses_to_run_without_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), tiny()).unwrap();
    for c in &Command::CHAIN[1..] {
        match run.run(*c) {
            Err(Error::MissingStage { needed, .. }) => assert_eq!(needed, "gen-data", "{}", c.name()),
            other => panic!("{} ran without data: {other:?}", c.name()),
        }
    }
    run.run(Command::GenData).unwrap();
    let expect = [
        (Command::FinetuneTfe, "lmm"),
        (Command::TrainAlign, "joint_ft"),
        (Command::TrainDiffusion, "align"),
        (Command::Generate, "diffusion"),
        (Command::Evaluate, "generate"),
    ];
    for (c, needed) in expect {
        match run.run(c) {
            Err(Error::MissingStage { needed: n, .. }) => assert_eq!(n, needed, "{}", c.name()),
            other => panic!("{} ran without {needed}: {other:?}", c.name()),
        }
    }
}

#[test]
fn early_stages_are_byte_reproducible() {
    let go = |root: &Path| {
        let run = Run::new(root, tiny()).unwrap();
        for c in [Command::GenData, Command::TrainLmm, Command::TrainFreq] {
            run.run(c).unwrap();
        }
        files(root)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = go(a.path());
    assert!(fa.iter().any(|(p, _)| p.ends_with("lmm/checkpoint.bvc")));
    assert_eq!(fa, go(b.path()));
}

#[test]
fn ablations_skip_the_disabled_pretraining() {
    let cfg = PipelineConfig {
        ablation: Some(Ablation::parse("no-pretrain").unwrap()),
        ..tiny()
    };
    let run = Run::new("unused", cfg).unwrap();
    assert!(!run.enabled(Command::TrainLmm) && !run.enabled(Command::TrainFreq));
    for (tag, lmm, freq) in [("no-time", false, true), ("no-freq", true, false), ("no-finetune", true, true)] {
        let cfg = PipelineConfig {
            ablation: Some(Ablation::parse(tag).unwrap()),
            ..tiny()
        };
        let run = Run::new("unused", cfg).unwrap();
        assert_eq!(run.enabled(Command::TrainLmm), lmm, "{tag}");
        assert_eq!(run.enabled(Command::TrainFreq), freq, "{tag}");
    }
}
