use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxsim::cli;
use voxsim::config::RunConfig;
use voxsim::engine::TransportKind;
use voxsim::experiment::ExperimentKind;
use voxsim::{Error, Result};

/// Voxel-structured spiking network simulator.
///
/// Log verbosity follows RUST_LOG (default `info`).
#[derive(Parser)]
#[command(name = "voxsim", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply without it.
    #[arg(long, short, global = true, env = "VOXSIM_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker count; `experiment` and `verify` take a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    workers: Vec<usize>,
    /// `threads` or `loopback`.
    #[arg(long, global = true, value_parser = parse_transport)]
    transport: Option<TransportKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-worker connection tables and a manifest.
    Generate,
    /// Partition the network and write the synapse histograms.
    Partition,
    /// Simulate on the manifest's tables, generating them when stale.
    Simulate,
    /// Run a scaling, sweep or topology experiment grid.
    Experiment {
        /// weak_scaling, strong_scaling, rate_sweep or topology_compare.
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ExperimentKind>,
    },
    /// Fit conductance offsets to observed BOLD, or run a twin experiment.
    Assimilate {
        /// Observed BOLD CSV (`window,voxel_id,value`).
        #[arg(long)]
        observed: Option<PathBuf>,
    },
    /// Aggregate timings.csv and write the synapse histograms.
    Report,
    /// Check that spike rasters agree across worker counts or earlier runs.
    Verify {
        /// Output directories of earlier runs compared with --out.
        #[arg(long = "against")]
        against: Vec<PathBuf>,
    },
}

fn parse_transport(s: &str) -> std::result::Result<TransportKind, String> {
    TransportKind::parse(s).ok_or_else(|| format!("unknown transport `{s}`"))
}

fn parse_kind(s: &str) -> std::result::Result<ExperimentKind, String> {
    ExperimentKind::parse(s).ok_or_else(|| format!("unknown experiment `{s}`"))
}

fn configure(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(t) = common.transport {
        cfg.engine.transport = t;
        cfg.experiment.engine.transport = t;
    }
    match (command, common.workers.as_slice()) {
        (_, []) => {}
        (Command::Experiment { .. }, list) => cfg.experiment.workers = list.to_vec(),
        (Command::Verify { .. }, _) => {}
        (_, [w]) => cfg.workers = *w,
        (_, _) => return Err(Error::config("this subcommand takes a single --workers value")),
    }
    if let Command::Assimilate { observed: Some(p) } = command {
        cfg.assimilation.observed = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = configure(&cli.common, &cli.command)?;
    match &cli.command {
        Command::Generate => {
            let m = cli::cmd_generate(&cfg)?;
            println!("{} tables, {} neurons, {} synapses", m.tables.len(), m.neurons, m.synapses);
        }
        Command::Partition => {
            let p = cli::cmd_partition(&cfg)?;
            println!("F = {} ub over {} workers", p.objective, p.workers);
        }
        Command::Simulate => {
            let out = cli::cmd_simulate(&cfg)?;
            println!("{} steps, {} spikes", out.steps, out.raster.len());
        }
        Command::Experiment { kind } => {
            let rows = cli::cmd_experiment(&cfg, *kind)?;
            println!("{} grid points", rows.len());
        }
        Command::Assimilate { .. } => {
            let r = cli::cmd_assimilate(&cfg)?;
            match r.final_correlation() {
                Some(c) => println!("final correlation {c:.4}"),
                None => println!("final correlation undefined"),
            }
        }
        Command::Report => {
            let r = cli::cmd_report(&cfg)?;
            println!(
                "T_sim {:.6e} s, T_com {:.6e} s, T_tos {:.4} s",
                r.t_sim,
                r.t_com,
                r.time_to_solution(cfg.engine.dt as f64)
            );
        }
        Command::Verify { against } => {
            let counts = if cli.common.workers.is_empty() {
                vec![1, cfg.workers.max(2)]
            } else {
                cli.common.workers.clone()
            };
            let v = cli::cmd_verify(&cfg, &counts, against)?;
            for (label, spikes) in v.runs {
                println!("{label}: {spikes} spikes");
            }
            println!("rasters identical");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
