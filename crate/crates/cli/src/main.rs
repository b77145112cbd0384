use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use autocal::pipeline::{Pipeline, RunConfig, Stage, StageOutcome};
use clap::{Parser, Subcommand};

/// Automatic qubit calibration against the simulated device.
#[derive(Debug, Parser)]
#[command(name = "autocal", version)]
struct Cli {
    /// Run configuration, TOML or JSON (by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record store; defaults to records.jsonl in the output directory.
    #[arg(long, global = true, env = "AUTOCAL_STORE")]
    store: Option<PathBuf>,
    /// Extra RB noise, `name=value` or `clifford:name=value`, with name one
    /// of depolarizing, over_rotation, amplitude_damping. Repeatable.
    #[arg(long, global = true)]
    inject: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search drive frequency, readout frequency and drive amplitude.
    Autorabi,
    /// Drive frequency echo scans, X90/X180 stacking and readout error.
    Finetune,
    /// Cross-resonance amplitude sweep.
    Crsweep,
    /// CNOT correction angles from full-XY measurements.
    Xyfit,
    /// Randomized benchmarking (SRB, IRB, XRB).
    Rb,
    /// Every stage in order.
    Pipeline,
}

fn config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), seed) => {
            let mut c = RunConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            if let Some(s) = seed {
                c.seed = s;
            }
            c
        }
        (None, Some(seed)) => RunConfig::with_seed(seed),
        (None, None) => bail!("a seed is required: pass --seed or a --config with `seed`"),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(store) = &cli.store {
        cfg.store = Some(store.clone());
    }
    cfg.rb.inject.extend(cli.inject.iter().cloned());
    Ok(cfg)
}

fn report(o: &StageOutcome) {
    println!("[{}] record v{}", o.stage, o.envelope.record.version);
    for line in o.summary.lines() {
        println!("  {line}");
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let pipeline = Pipeline::new(config(cli)?)?;
    let stages: Vec<Stage> = match cli.command {
        Command::Autorabi => vec![Stage::Autorabi],
        Command::Finetune => vec![Stage::Finetune],
        Command::Crsweep => vec![Stage::Crsweep],
        Command::Xyfit => vec![Stage::Xyfit],
        Command::Rb => vec![Stage::Rb],
        Command::Pipeline => Stage::ALL.to_vec(),
    };
    for stage in stages {
        let outcome = pipeline
            .run(stage)
            .with_context(|| format!("stage {stage} failed"))?;
        report(&outcome);
    }
    println!(
        "artifacts in {}, records in {}",
        pipeline.config().output_dir.display(),
        pipeline.store().path().display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
