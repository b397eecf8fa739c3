use clap::{Args, Parser, Subcommand};
use evolab_cli::config::{EngineKind, LoadedConfig};
use evolab_cli::run::{execute, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Particle and finite-difference laboratory for nonautonomous Kolmogorov evolution operators.
#[derive(Parser)]
#[command(name = "evolab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// experiment configuration (TOML)
    #[arg(long, short)]
    config: PathBuf,
    /// overrides the root seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// overrides the output directory in the config
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// overrides every experiment's engine choice
    #[arg(long, value_enum)]
    engine: Option<EngineKind>,
    /// run experiments concurrently (worker count from EVOLAB_WORKERS)
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every enabled experiment in the config
    Run(Common),
    /// Run only the check-hypotheses experiments
    CheckHypotheses(Common),
    /// Run only the measures experiments
    Measures(Common),
    /// Run only the convergence experiments
    Convergence(Common),
    /// Run only the gradient-probe experiments
    GradientProbe(Common),
    /// Run only the semigroup-decay experiments
    SemigroupDecay(Common),
    /// Run only the uniqueness experiments
    Uniqueness(Common),
    /// Run only the limit-compare experiments
    LimitCompare(Common),
    /// Run only the cross-validate experiments
    CrossValidate(Common),
}

impl Command {
    fn split(self) -> (Option<&'static str>, Common) {
        match self {
            Command::Run(c) => (None, c),
            Command::CheckHypotheses(c) => (Some("check-hypotheses"), c),
            Command::Measures(c) => (Some("measures"), c),
            Command::Convergence(c) => (Some("convergence"), c),
            Command::GradientProbe(c) => (Some("gradient-probe"), c),
            Command::SemigroupDecay(c) => (Some("semigroup-decay"), c),
            Command::Uniqueness(c) => (Some("uniqueness"), c),
            Command::LimitCompare(c) => (Some("limit-compare"), c),
            Command::CrossValidate(c) => (Some("cross-validate"), c),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (kind, common) = Cli::parse().command.split();
    if let Some(n) = std::env::var("EVOLAB_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let opts = RunOptions {
        seed: common.seed,
        out_dir: common.out_dir,
        engine: common.engine,
        parallel: common.parallel,
        only_kind: kind.map(String::from),
    };
    let result = LoadedConfig::load(&common.config).and_then(|cfg| execute(&cfg, &opts));
    match result {
        Ok(m) => {
            for e in &m.experiments {
                let status = match (&e.error, e.pass) {
                    (Some(_), _) => "ERROR",
                    (None, true) => "PASS",
                    (None, false) => "FAIL",
                };
                println!("{status:5} {} ({})", e.name, e.kind);
                if let Some(err) = &e.error {
                    println!("      {err}");
                }
            }
            ExitCode::from(m.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
