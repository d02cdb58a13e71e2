mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use milo::MiloError;

use crate::commands::Ctx;
use crate::config::RunConfig;

/// Low-rank compensated INT3 compression pipeline for mixture-of-experts weights.
#[derive(Debug, Parser)]
#[command(name = "milo", version)]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthetic generation; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for matrix-level parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (default `milo-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write a synthetic MoE model to `<out>/model`.
    Synth,
    /// Per-matrix kurtosis, residual rank and quantization error.
    Analyze,
    /// Assign compensator ranks under a policy such as `Dense-64+Kurtosis-8`.
    PlanRanks {
        #[arg(long)]
        policy: Option<String>,
    },
    /// Compress every matrix with its planned rank.
    Quantize,
    /// Pack compressed codes into the INT3 word format.
    Pack,
    /// Run the W3A16 GeMM correctness, error and boundary suites.
    GemmCheck,
    /// Aggregate all artifacts into `report.json` and CSV tables.
    Report,
}

enum Failure {
    Milo(MiloError),
    Acceptance(String),
}

impl From<MiloError> for Failure {
    fn from(e: MiloError) -> Self {
        Failure::Milo(e)
    }
}

impl Failure {
    fn code(&self) -> &'static str {
        match self {
            Failure::Milo(e) => e.code(),
            Failure::Acceptance(_) => "ACCEPTANCE",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.code() {
            "CONFIG" | "PLAN" | "RANK" => 2,
            "NUMERIC" | "STAT" => 4,
            "ACCEPTANCE" => 5,
            _ => 3,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Milo(e) => e.to_string(),
            Failure::Acceptance(s) => s.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(MiloError::Config("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MiloError::Config(format!("thread pool: {e}")))?;
    }
    let out = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("milo-out"));
    let ctx = Ctx::new(cfg, out);
    match cli.verb {
        Verb::Synth => commands::synth(&ctx)?,
        Verb::Analyze => commands::analyze(&ctx)?,
        Verb::PlanRanks { policy } => commands::plan_ranks(&ctx, policy.as_deref())?,
        Verb::Quantize => commands::quantize(&ctx)?,
        Verb::Pack => commands::pack(&ctx)?,
        Verb::GemmCheck => {
            if !commands::gemm_check(&ctx)? {
                return Err(Failure::Acceptance("GeMM suites failed, see gemm_check.json".into()));
            }
        }
        Verb::Report => commands::report(&ctx)?,
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[CONFIG]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code(), one_line(&f.message()));
            ExitCode::from(f.exit_code())
        }
    }
}
