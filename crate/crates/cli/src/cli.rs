use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{split_list, Overrides, RunConfig};
use crate::synth::SynthParams;

#[derive(Parser, Debug)]
#[command(name = "uragc", version, about = "Conformal uncertainty evaluation for retrieval-augmented MCQA")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for every artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Mock script replacing all providers.
    #[arg(long, global = true)]
    pub mock: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Comma-separated strategy names.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Retrieval depth.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Saved calibration/test split.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Evaluate strategies under a protocol.
    Run(RunArgs),
    /// One run per retrieval depth.
    DepthSweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated depths.
        #[arg(long)]
        k_list: Option<String>,
    },
    /// Save calibration thresholds.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        /// Take thresholds from this report instead of running.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render tables from report files or directories.
    Report { paths: Vec<PathBuf> },
    /// Write a synthetic dataset with a matching mock script.
    Synth {
        #[arg(long, default_value_t = 11_000)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        concentration: f64,
        /// Calibration size of the emitted split.
        #[arg(long)]
        calibration: Option<usize>,
    },
    /// Forge distractors for seed question/answer pairs.
    Forge {
        #[arg(long)]
        seeds: Option<PathBuf>,
    },
}

fn overrides(cli: &Cli, run: &RunArgs) -> Result<Overrides> {
    Ok(Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        mock: cli.mock.clone(),
        alpha: run.alpha,
        strategies: run.strategy.as_deref().map(split_list),
        protocol: run.protocol.clone(),
        k: run.k,
        dataset: run.dataset.clone(),
        split: run.split.clone(),
        seeds: None,
        k_list: None,
    })
}

fn parse_k_list(s: &str) -> Result<Vec<usize>> {
    split_list(s)
        .iter()
        .map(|x| x.parse::<usize>().map_err(|e| anyhow::anyhow!("k_list: {x:?}: {e}")))
        .collect()
}

pub fn execute(cli: Cli, env: &dyn Fn(&str) -> Option<String>) -> Result<i32> {
    let resolve = |o: Overrides| RunConfig::resolve(cli.config.as_deref(), env, &o);
    match &cli.command {
        Command::Run(run) => commands::cmd_run(&resolve(overrides(&cli, run)?)?, env),
        Command::DepthSweep { run, k_list } => {
            let mut o = overrides(&cli, run)?;
            o.k_list = k_list.as_deref().map(parse_k_list).transpose()?;
            let mut cfg = resolve(o)?;
            cfg.protocol.kind = uragc_engine::evaluation::ProtocolKind::DepthSweep;
            cfg.validate()?;
            commands::cmd_depth_sweep(&cfg, env)
        }
        Command::Calibrate { run, report } => {
            commands::cmd_calibrate(&resolve(overrides(&cli, run)?)?, report.as_deref(), env)
        }
        Command::Report { paths } => {
            let cfg = resolve(overrides(&cli, &RunArgs::default())?)?;
            commands::cmd_report(paths, &cfg.out)
        }
        Command::Synth {
            n,
            k,
            concentration,
            calibration,
        } => {
            let cfg = resolve(overrides(&cli, &RunArgs::default())?)?;
            let params = SynthParams {
                n: *n,
                k: *k,
                concentration: *concentration,
                seed: cfg.seed,
                calibration: *calibration,
            };
            commands::cmd_synth(&params, &cfg.out)
        }
        Command::Forge { seeds } => {
            let mut o = overrides(&cli, &RunArgs::default())?;
            o.seeds = seeds.clone();
            commands::cmd_forge(&resolve(o)?, env)
        }
    }
}

/// Parses `args` and runs the command, mapping every failure to exit 1.
pub fn main_with<I, T>(args: I, env: &dyn Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli, env) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
