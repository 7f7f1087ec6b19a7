use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hybridstat::diagnostics::SummaryKind;
use hybridstat::harness::{
    cmd_ablate, cmd_coverage, cmd_evaluate, cmd_simulate, cmd_train, Evaluation, HarnessError, Options, RunConfig,
    Stage,
};

#[derive(Parser)]
#[command(name = "hybridstat", version, about = "Hybrid neural plus power-spectrum summaries for simulation-based inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Kind {
    PsOnly,
    HybridEpe,
    HybridCe,
    ConcatSeparate,
}

impl From<Kind> for SummaryKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::PsOnly => SummaryKind::PsOnly,
            Kind::HybridEpe => SummaryKind::HybridEpe,
            Kind::HybridCe => SummaryKind::HybridCe,
            Kind::ConcatSeparate => SummaryKind::ConcatSeparate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Compressor,
    Posterior,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overwrite existing artifacts instead of reusing them.
    #[arg(long)]
    force: bool,
    /// Run root; defaults to $HYBRIDSTAT_RUNS, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel jobs (overrides the config; results do not change).
    #[arg(long)]
    workers: Option<usize>,
    /// Echo training progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training pool and the held-out test set.
    Simulate(Common),
    /// Train compressors and posteriors at the full budget.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
    },
    /// Test-set metrics, coverage and posterior dumps for trained runs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Retrain and evaluate every kind at every simulation budget.
    Ablate(Common),
    /// Coverage calibration reports only.
    Coverage {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
}

fn options(c: &Common, kind: Option<Kind>, stage: Option<StageArg>) -> Options {
    Options {
        out: c.out.clone(),
        force: c.force,
        workers: c.workers,
        kind: kind.map(Into::into),
        stage: stage.map(|s| match s {
            StageArg::Compressor => Stage::Compressor,
            StageArg::Posterior => Stage::Posterior,
        }),
        verbose: c.verbose,
    }
}

fn print_evals(evals: &[Evaluation]) {
    for e in evals {
        let r = &e.record;
        println!(
            "{} n={} mean_log_prob={:.4}±{:.4} hpd_area_68={:.6} mi_bound={:.4}±{:.4} coverage_max_dev={:.4} ({:.2} se)",
            r.summary_kind,
            r.n_train,
            r.mean_log_prob,
            r.se_log_prob,
            r.hpd_area,
            r.mi_bound,
            e.mi_se,
            r.coverage_max_dev,
            r.coverage_max_dev_se
        );
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let (common, kind, stage) = match &cli.command {
        Command::Simulate(c) | Command::Ablate(c) => (c, None, None),
        Command::Train { common, kind, stage } => (common, *kind, *stage),
        Command::Evaluate { common, kind } | Command::Coverage { common, kind } => (common, *kind, None),
    };
    let cfg = RunConfig::load(&common.config)?;
    let opts = options(common, kind, stage);
    match cli.command {
        Command::Simulate(_) => {
            let out = cmd_simulate(&cfg, &opts)?;
            let verb = if out.reused { "up to date" } else { "wrote" };
            println!("{verb} {} sha256={}", out.path.display(), out.hash);
        }
        Command::Train { .. } => {
            for d in cmd_train(&cfg, &opts)? {
                println!("trained {}", d.display());
            }
        }
        Command::Evaluate { .. } => print_evals(&cmd_evaluate(&cfg, &opts)?),
        Command::Ablate(_) => print_evals(&cmd_ablate(&cfg, &opts)?),
        Command::Coverage { .. } => {
            for (kind, rep) in cmd_coverage(&cfg, &opts)? {
                println!(
                    "{kind} n_test={} max_dev={:.4} max_dev_se={:.2} ks={:?}",
                    rep.n_test,
                    rep.max_abs_deviation(),
                    rep.max_deviation_in_se(),
                    rep.ks
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
