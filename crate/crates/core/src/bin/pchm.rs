use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pchm::cli::{self, exit, Overrides};
use pchm::config::{ExperimentConfig, ExperimentKind};
use pchm::Error;

#[derive(Parser)]
#[command(name = "pchm", version, about = "Random conductance model experiments")]
struct Cli {
    /// Worker threads for parallel replicas.
    #[arg(long, global = true, env = "PCHM_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Conjugate gradient tolerance override.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample conductance fields and write binary dumps.
    GenEnv(RunArgs),
    /// Giant-cluster statistics.
    ClusterStats(RunArgs),
    /// Effective diffusion matrix from the corrector problem.
    Corrector(RunArgs),
    /// Discrete versus homogenized resolvent.
    Resolvent(RunArgs),
    /// Monte Carlo walk semigroup versus the heat flow.
    Walk(RunArgs),
    /// Exclusion pairing identity check.
    Exclusion(RunArgs),
    /// Hydrodynamic-limit experiment.
    Hydro(RunArgs),
    /// Run whatever experiment the config names.
    Run(RunArgs),
    /// Re-check an output directory against its manifest.
    Verify {
        /// Path to manifest.json.
        manifest: PathBuf,
    },
}

fn emit_error(err: &Error) -> ExitCode {
    eprintln!("{}", cli::diagnostic(err));
    ExitCode::from(cli::exit_code(err) as u8)
}

fn run(args: &RunArgs, expected: Option<ExperimentKind>) -> ExitCode {
    if let Some(kind) = expected {
        match ExperimentConfig::load(&args.config) {
            Ok(cfg) if cfg.kind != kind => {
                return emit_error(&Error::Validation(format!(
                    "config kind {} does not match subcommand {}",
                    cfg.kind.name(),
                    kind.name()
                )))
            }
            Err(e) => return emit_error(&e),
            Ok(_) => {}
        }
    }
    let overrides = Overrides {
        out: args.out.clone(),
        seed: args.seed,
        tol: args.tol,
    };
    match cli::run(&args.config, &overrides) {
        Ok((manifest, path)) => {
            println!(
                "{}",
                json!({
                    "status": "ok",
                    "kind": manifest.config.kind.name(),
                    "manifest": path.display().to_string(),
                    "invariants_hold": manifest.invariants_hold(),
                    "summary": manifest.summary,
                })
            );
            ExitCode::SUCCESS
        }
        Err(e) => emit_error(&e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            return emit_error(&Error::Validation("--workers must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not configure worker pool: {e}");
        }
    }
    match &cli.command {
        Command::GenEnv(a) => run(a, Some(ExperimentKind::GenEnv)),
        Command::ClusterStats(a) => run(a, Some(ExperimentKind::ClusterStats)),
        Command::Corrector(a) => run(a, Some(ExperimentKind::Corrector)),
        Command::Resolvent(a) => run(a, Some(ExperimentKind::Resolvent)),
        Command::Walk(a) => run(a, Some(ExperimentKind::Walk)),
        Command::Exclusion(a) => run(a, Some(ExperimentKind::Exclusion)),
        Command::Hydro(a) => run(a, Some(ExperimentKind::Hydro)),
        Command::Run(a) => run(a, None),
        Command::Verify { manifest } => match cli::verify(manifest) {
            Ok(report) => {
                println!("{}", serde_json::to_string(&report).unwrap_or_default());
                if report.pass {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(exit::VERIFY_FAILED as u8)
                }
            }
            Err(e) => {
                let code = if matches!(e, Error::Io { .. }) {
                    exit::VERIFY_FAILED
                } else {
                    cli::exit_code(&e)
                };
                eprintln!("{}", cli::diagnostic(&e));
                ExitCode::from(code as u8)
            }
        },
    }
}
