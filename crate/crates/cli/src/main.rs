//! `hcflab`: batch runner for curvature-cone certification, ODE invariance experiments,
//! Hermitian curvature flow runs and geometric identity checks.

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Kind};
use output::OutDir;
use run::{Failure, Summary};

/// Environment variable holding the number of worker threads.
const WORKERS_ENV: &str = "HCF_WORKERS";

#[derive(Parser)]
#[command(name = "hcflab", version, about = "Curvature cones and the Hermitian curvature flow on complex tori")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify cone membership of curvature operators or of a metric field.
    Certify(Common),
    /// Cone invariance experiments for the pointwise curvature ODE.
    OdeRun(Common),
    /// Run the flow on a torus chart with monitors.
    PdeRun(Common),
    /// Check Bianchi, trace, Lee-form and evolution identities for a metric.
    VerifyIdentities(Common),
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

const EXIT_TOLERANCE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn init_workers() -> Result<(), String> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn execute(kind: Kind, args: &Common) -> Result<(Summary, OutDir), Failure> {
    let cfg: ExperimentConfig = config::load(&args.config).map_err(Failure::Config)?;
    if let Some(k) = cfg.kind {
        if k != kind {
            return Err(Failure::Config(format!(
                "{}: field `kind`: config is `{}` but the subcommand runs `{}`",
                args.config.display(),
                k.name(),
                kind.name()
            )));
        }
    }
    let missing = || Failure::Config(format!("{}: missing field `{}`", args.config.display(), kind.name()));
    let seed = args.seed.unwrap_or(cfg.seed);
    let dir = args.out.clone().or(cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("hcflab-out"));
    let mut out = OutDir::create(&dir).map_err(|e| Failure::Numerical(format!("{}: {e}", dir.display())))?;
    let summary = match kind {
        Kind::OdeInvariance => {
            run::ode_invariance(cfg.ode_invariance.as_ref().ok_or_else(missing)?, seed, &mut out, true)?
        }
        Kind::PdeRun => run::pde_run(cfg.pde_run.as_ref().ok_or_else(missing)?, seed, &mut out)?,
        Kind::Certify => run::certify(cfg.certify.as_ref().ok_or_else(missing)?, seed, &mut out)?,
        Kind::VerifyIdentities => {
            run::verify_identities(cfg.verify_identities.as_ref().ok_or_else(missing)?, seed, &mut out)?
        }
    };
    out.json("summary.json", &summary).map_err(|e| Failure::Numerical(format!("writing output: {e}")))?;
    Ok((summary, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Certify(a) => (Kind::Certify, a),
        Command::OdeRun(a) => (Kind::OdeInvariance, a),
        Command::PdeRun(a) => (Kind::PdeRun, a),
        Command::VerifyIdentities(a) => (Kind::VerifyIdentities, a),
    };
    if let Err(e) = init_workers() {
        eprintln!("config error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let started = std::time::Instant::now();
    match execute(kind, args) {
        Ok((summary, out)) => {
            if !args.quiet {
                println!("{}: {}", summary.kind, if summary.pass { "all tolerances met" } else { "tolerance failure" });
                println!("{}", serde_json::to_string_pretty(&summary.results).unwrap_or_default());
                for p in &out.written {
                    println!("wrote {}", p.display());
                }
                println!("elapsed {:.1} s", started.elapsed().as_secs_f64());
            }
            if summary.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_TOLERANCE)
            }
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
