use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairmech::datagen::{sample_batch, BatchFile, DataSpec};
use fairmech::experiments::{run, stream, write_outputs, ExperimentKind, ExperimentSpec};
use fairmech::train::{train, LearnedKind, TrainConfig};
use fairmech::ProblemDims;

#[derive(Parser)]
#[command(name = "fairmech", version, about = "Proportional-fairness mechanisms: experiments, training and data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment spec; fields left out take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Runs are sequential, so only 1 is honored.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Learned-mechanism checkpoint to load instead of training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    ExsNet,
    ExpfNet,
}

#[derive(Subcommand)]
enum Command {
    /// Agent 1's PF utility as it varies its reported value ratio.
    GamingCurve(Common),
    /// NSW, exploitability and efficiency of every mechanism on one batch.
    Compare(Common),
    /// ExS-Net trained over a sweep of alpha, against the PF/PA interpolation.
    Frontier(Common),
    /// Metrics as the per-resource budget grows.
    BudgetSweep(Common),
    /// A uniform-trained mechanism on scaled-beta test sets.
    Mismatch(Common),
    /// Allocation to agent 1 over a grid of its two values.
    Heatmap(Common),
    /// Train one learned mechanism into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "exs-net")]
        kind: Kind,
        /// System size as NxM.
        #[arg(long, default_value = "2x2")]
        dims: String,
    },
    /// Write a batch of sampled profiles to a JSON file.
    Sample {
        #[arg(long, default_value = "2x2")]
        dims: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// JSON data spec; defaults to the uniform spec for `dims`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims(s: &str) -> Result<ProblemDims> {
    let (n, m) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("dimensions must look like 2x3, got {s:?}"))?;
    Ok(ProblemDims::new(n.trim().parse()?, m.trim().parse()?)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn check_threads(threads: usize) {
    if threads > 1 {
        log::warn!("--threads {threads} requested; this build runs every experiment on one thread");
    }
}

fn experiment(kind: ExperimentKind, common: Common) -> Result<()> {
    check_threads(common.threads);
    let mut spec = match &common.spec {
        Some(path) => {
            let overrides: serde_json::Value = read_json(path)?;
            if let Some(named) = overrides.get("kind").and_then(|k| k.as_str()) {
                if named != kind.name() {
                    log::info!("spec names {named}, running {}", kind.name());
                }
            }
            ExperimentSpec::with_overrides(kind, &overrides)?
        }
        None => ExperimentSpec::new(kind),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    if common.checkpoint.is_some() {
        spec.checkpoint = common.checkpoint.clone();
    }
    spec.out_dir = Some(common.out.clone());
    let out = run(&spec)?;
    write_outputs(&common.out, &out)?;
    for t in &out.tables {
        println!("wrote {}", common.out.join(format!("{}.csv", t.name)).display());
    }
    println!("total {:.1}s", out.manifest.wall_seconds.get("total").copied().unwrap_or(0.0));
    Ok(())
}

fn train_command(common: Common, kind: Kind, dims: &str) -> Result<()> {
    check_threads(common.threads);
    if common.checkpoint.is_some() {
        bail!("train starts from a fresh initialization; --checkpoint is not used here");
    }
    let dims = parse_dims(dims)?;
    let mut cfg: TrainConfig = match &common.spec {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.run_dir = Some(common.out.clone());
    let kind = match kind {
        Kind::ExsNet => LearnedKind::ExsNet,
        Kind::ExpfNet => LearnedKind::ExpfNet,
    };
    let mut rng = stream(cfg.seed, 1);
    let (_, state) = train(kind, dims, &cfg, &mut rng)?;
    if let Some(last) = state.history.last() {
        println!(
            "step {}: logNSW {:.5}, exploitability {:?}, multipliers {:?}",
            last.iteration, last.log_nsw, last.exploitability, last.multipliers
        );
    }
    println!("wrote {}", common.out.join("final.json").display());
    Ok(())
}

fn sample_command(dims: &str, count: usize, spec: Option<PathBuf>, seed: u64, out: &Path) -> Result<()> {
    let dims = parse_dims(dims)?;
    let mut data = match spec {
        Some(path) => read_json::<DataSpec>(&path)?,
        None => DataSpec::new(dims),
    };
    if data.dims != dims {
        bail!("data spec is {} but --dims is {dims}", data.dims);
    }
    data.seed = seed;
    let mut rng = stream(seed, 2);
    let profiles = sample_batch(&data, count, &mut rng)?;
    BatchFile {
        spec: data,
        seed,
        profiles,
    }
    .save(out)?;
    println!("wrote {count} profiles to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GamingCurve(c) => experiment(ExperimentKind::GamingCurve, c),
        Command::Compare(c) => experiment(ExperimentKind::Compare, c),
        Command::Frontier(c) => experiment(ExperimentKind::Frontier, c),
        Command::BudgetSweep(c) => experiment(ExperimentKind::BudgetSweep, c),
        Command::Mismatch(c) => experiment(ExperimentKind::Mismatch, c),
        Command::Heatmap(c) => experiment(ExperimentKind::Heatmap, c),
        Command::Train { common, kind, dims } => train_command(common, kind, &dims),
        Command::Sample {
            dims,
            count,
            spec,
            seed,
            out,
        } => sample_command(&dims, count, spec, seed, &out),
    }
}
