use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mmu_sim_core::config::{ExperimentConfig, Workload};
use mmu_sim_core::engine::emit_report;
use mmu_sim_core::sweep::{run_experiment, run_sweep};
use mmu_sim_core::Error;

/// Trace-driven address translation and cache hierarchy simulator.
#[derive(Debug, Parser)]
#[command(name = "mmu-sim", version)]
struct Args {
    /// Experiment file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replay this trace instead of the synthetic workload.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run the L4 size x block x ideal-TLB sweep.
    #[arg(long)]
    sweep: bool,
    /// Treat every translation as a TLB hit.
    #[arg(long)]
    ideal_tlb: bool,
    /// Seed for the synthetic workload and frame shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_events: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn load(args: &Args) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::parse("")?,
    };
    if let Some(trace) = &args.trace {
        cfg.workload = Workload::Trace(trace.clone());
    }
    if let Some(seed) = args.seed {
        cfg.engine.seed = seed;
    }
    if let Some(n) = args.max_events {
        cfg.engine.max_events = n;
    }
    if args.ideal_tlb {
        cfg.engine.ideal_tlb = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &Args) -> Result<Vec<PathBuf>, Error> {
    let cfg = load(args)?;
    if args.sweep {
        run_sweep(&cfg, args.jobs)?.write(&args.out)
    } else {
        let report = run_experiment(&cfg)?;
        emit_report(&report, &args.out)
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mmu-sim: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Geometry(_) => 1,
                Error::Trace(_) => 2,
                _ => 3,
            })
        }
    }
}
