//! `brainvis-forge`: one pipeline stage per invocation, plus the gradient
//! sweep and the ablation harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use brainvis_core::autodiff::suite;
use brainvis_core::config::{Ablation, PipelineConfig};
use brainvis_core::metrics::MetricsReport;
use brainvis_core::par;
use brainvis_core::pipeline::{self, Command, Run};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "brainvis-forge", version, about = "EEG-to-image training, generation and evaluation pipeline")]
struct Cli {
    /// Pipeline config (JSON). Without it the full-scale defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Runs live under `<run-dir>/<config name>/`.
    #[arg(long, global = true, default_value = "runs")]
    run_dir: PathBuf,
    /// Disable one component.
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablate: Option<Ablation>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Synthetic dataset, split, fixture embeddings and target images.
    GenData,
    /// Masked latent pre-training of the time encoder.
    TrainLmm,
    /// Classification pre-training of the frequency encoder.
    TrainFreq,
    /// Time-branch then joint fine-tuning of the fused classifier.
    FinetuneTfe,
    /// Alignment network on the fused embeddings.
    TrainAlign,
    /// Conditional denoiser.
    TrainDiffusion,
    /// Two-stage cascade sampling for every test record.
    Generate,
    /// Classification and generation metrics.
    Evaluate,
    /// Every stage in order.
    All,
    /// Finite-difference check of every op and model component.
    GradCheck {
        #[arg(long, default_value_t = suite::DEFAULT_PROBES)]
        probes: usize,
        #[arg(long, default_value_t = suite::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
    /// Full chain with `--ablate` disabled, or every mode when it is absent.
    Ablate,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

fn stage(c: &Cmd) -> Option<Command> {
    Some(match c {
        Cmd::GenData => Command::GenData,
        Cmd::TrainLmm => Command::TrainLmm,
        Cmd::TrainFreq => Command::TrainFreq,
        Cmd::FinetuneTfe => Command::FinetuneTfe,
        Cmd::TrainAlign => Command::TrainAlign,
        Cmd::TrainDiffusion => Command::TrainDiffusion,
        Cmd::Generate => Command::Generate,
        Cmd::Evaluate => Command::Evaluate,
        _ => return None,
    })
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Stage commands under `--ablate` share the directory the harness uses.
fn run_root(base: &Path, cfg: &PipelineConfig) -> PathBuf {
    let root = base.join(&cfg.name);
    match cfg.ablation {
        Some(a) => root.join("ablate").join(a.tag()),
        None => root,
    }
}

fn print_report(label: &str, r: &MetricsReport) {
    println!(
        "{label}: top1 {:.4} top3 {:.4} top5 {:.4} f1 {:.4} ga {:.4} is {:.4}±{:.4} fid {:.4} ssim {:.4}",
        r.top1_ca, r.top3_ca, r.top5_ca, r.f1_macro, r.ga, r.is_mean, r.is_std, r.fid, r.ssim_mean
    );
}

fn grad_check(probes: usize, tolerance: f64, seed: u64) -> Result<bool> {
    let results = suite::run(probes, tolerance, seed)?;
    let mut ok = true;
    for r in &results {
        println!("{} {:<28} probes {:>3} worst {:.3e}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.probes, r.worst);
        ok &= r.passed;
    }
    println!("{} of {} cases passed", results.iter().filter(|r| r.passed).count(), results.len());
    Ok(ok)
}

fn main_inner(cli: Cli) -> Result<bool> {
    par::init_threads(None);
    if let Cmd::GradCheck {
        probes,
        tolerance,
        probe_seed,
    } = cli.command
    {
        return grad_check(probes, tolerance, probe_seed);
    }
    let mut cfg = load_config(&cli)?;
    if let Cmd::Ablate = cli.command {
        let root = cli.run_dir.join(&cfg.name);
        let modes = match cli.ablate {
            Some(a) => vec![a],
            None => Ablation::ALL.to_vec(),
        };
        for m in modes {
            let r = pipeline::ablate(&root, &cfg, m)?;
            print_report(m.tag(), &r);
        }
        return Ok(true);
    }
    if cli.ablate.is_some() {
        cfg.ablation = cli.ablate;
    }
    let run = Run::new(run_root(&cli.run_dir, &cfg), cfg)?;
    match stage(&cli.command) {
        Some(Command::Evaluate) => print_report("evaluate", &run.evaluate()?),
        Some(c) => run.run(c)?,
        None => print_report("all", &run.run_all()?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
