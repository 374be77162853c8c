use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mct_bench::cell::Stage;
use mct_bench::config::{parse_families, parse_seeds, Preset, RunConfig};
use mct_bench::grid::run_grid;
use mct_bench::{report, validate};

#[derive(Parser)]
#[command(name = "mct", version, about = "Synthetic-HMM state-tracing benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and record the HMM specs for each cell.
    Generate(GridArgs),
    /// Train one model per cell.
    Train(GridArgs),
    /// Capture activations and compute state-recovery metrics.
    Analyze(GridArgs),
    /// Run the state-forcing interventions.
    Force(GridArgs),
    /// Every stage, then the report tables.
    Run(GridArgs),
    /// Aggregate cell artifacts into tables and plot data.
    Report(OutArgs),
    /// Check the report tables against the acceptance thresholds.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Artifact directory.
    #[arg(long, env = "MCT_OUT", default_value = "mct-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Comma-separated family names, or "all".
    #[arg(long, default_value = "all")]
    families: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long, default_value_t = 0)]
    global_seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Skip stages already completed under the same configuration.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ValidateArgs {
    /// Threshold set; defaults to the preset recorded with the run.
    #[arg(long)]
    preset: Option<Preset>,
    #[command(flatten)]
    out: OutArgs,
}

impl GridArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(self.preset);
        cfg.families = parse_families(&self.families)?;
        cfg.seeds = parse_seeds(&self.seeds)?;
        cfg.global_seed = self.global_seed;
        Ok(cfg)
    }
}

fn grid(args: &GridArgs, stages: &[Stage]) -> Result<bool> {
    let cfg = args.config()?;
    let manifest = run_grid(&cfg, &args.out.out, stages, args.workers, args.resume)?;
    let failed: Vec<_> = manifest.failed().collect();
    for c in &failed {
        eprintln!("cell {}_s{} failed: {}", c.family, c.seed, c.failed.as_deref().unwrap_or(""));
    }
    Ok(failed.is_empty())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(a) => grid(&a, &[Stage::Generate]),
        Command::Train(a) => grid(&a, &[Stage::Train]),
        Command::Analyze(a) => grid(&a, &[Stage::Analyze]),
        Command::Force(a) => grid(&a, &[Stage::Force]),
        Command::Run(a) => {
            let ok = grid(&a, &Stage::ALL)?;
            report::report(&a.out.out)?;
            println!("tables written to {}", a.out.out.join("tables").display());
            Ok(ok)
        }
        Command::Report(a) => {
            report::report(&a.out)?;
            println!("tables written to {}", a.out.join("tables").display());
            Ok(true)
        }
        Command::Validate(a) => {
            let v = validate::validate(&a.out.out, a.preset)?;
            v.print();
            Ok(v.all_pass())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
