//! `qfin`: runs the classification, trading and volatility studies from a
//! TOML config, the runtime self-test, and the synthetic data generator.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qfin_core::bench::{self, RunConfig, Study};
use qfin_core::marketdata::write_price_csv;
use qfin_core::selftest::{self, Level};
use qfin_core::synth::{self, SynthConfig};
use qfin_core::Error;

#[derive(Parser)]
#[command(name = "qfin", version, about = "Quantum vs classical forecasting benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Next-day direction classification, QNN vs ANN.
    Classify(StudyArgs),
    /// Threshold trading backtests, QLSTM vs LSTM.
    Trade(StudyArgs),
    /// One-step realized-variance forecasts, QSVR vs SVR and GARCH.
    Volatility(StudyArgs),
    /// Runs the randomized property checks.
    Selftest {
        /// Include the slower GARCH recovery and DM size checks.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Writes seeded synthetic price CSVs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// AR(1) coefficient of the planted return signal.
        #[arg(long)]
        phi: Option<f64>,
    },
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate, audit and print the plan without training.
    #[arg(long)]
    dry_run: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Csv(_) | Error::TooShort { .. } => 3,
        _ => 1,
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<(), Error> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run_study(study: Study, args: StudyArgs) -> Result<(), Error> {
    set_jobs(args.jobs)?;
    let mut cfg = RunConfig::load(&args.config)?;
    if cfg.study != study {
        log::warn!("config declares study `{}`; running `{study}`", cfg.study);
        cfg.study = study;
    }
    if let Some(out) = args.out {
        cfg.output = std::env::current_dir().map(|d| d.join(&out)).unwrap_or(out);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let plan = bench::plan(&cfg)?;
    println!("{plan}");
    if args.dry_run {
        return Ok(());
    }
    let outcome = bench::run_study(&cfg)?;
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Classify(a) => run_study(Study::Classify, a),
        Command::Trade(a) => run_study(Study::Trade, a),
        Command::Volatility(a) => run_study(Study::Volatility, a),
        Command::Selftest { full, seed, jobs } => {
            set_jobs(jobs)?;
            let level = if full { Level::Full } else { Level::Quick };
            let results = selftest::run(level, seed);
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<32} {:>7.2}s  {}", r.name, r.seconds, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::NotConverged(format!("{failed} self-test check(s) failed")));
            }
            Ok(())
        }
        Command::Synth { out, days, seed, phi } => {
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                days: days.unwrap_or(d.days),
                seed: seed.unwrap_or(d.seed),
                phi: phi.unwrap_or(d.phi),
                ..d
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
            for s in synth::generate(&cfg)? {
                let path = out.join(format!("{}.csv", s.ticker));
                write_price_csv(&path, &s)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
