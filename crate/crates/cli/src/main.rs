use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fru_core::experiment::{self, ExperimentConfig, LoadedRun, Targets, UnlearnSpec};
use fru_core::{AttackConfig, UnlearnMode};

/// Federated recommendation with on-device update logs and fast unlearning.
#[derive(Debug, Parser)]
#[command(name = "fru", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train without the poisoning attack and write a run directory.
    Train(TrainArgs),
    /// Train with malicious clients poisoning their updates.
    AttackTrain(TrainArgs),
    /// Remove clients from a finished run.
    Unlearn(UnlearnArgs),
    /// Re-evaluate the final model of a run.
    Evaluate { run_dir: PathBuf },
    /// Collect evaluation and timing rows from several runs into CSV tables.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Directory for table.csv and timing.csv; the table goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form per-client storage estimate, optionally checked against a run's logs.
    PredictStorage {
        #[arg(long)]
        config: PathBuf,
        /// Run directory whose logs are compared with the bound.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run clients one at a time for bit-exact reproducibility.
    #[arg(long)]
    serial: bool,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct UnlearnArgs {
    run_dir: PathBuf,
    #[arg(long, default_value = "fru")]
    mode: UnlearnMode,
    /// Fraction of the original local epochs used during reconstruction.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// `auto` (the run's malicious clients) or a comma-separated id list.
    #[arg(long, default_value = "auto")]
    targets: Targets,
    #[arg(long)]
    serial: bool,
    #[arg(long)]
    force: bool,
}

fn load_config(args: &TrainArgs, attack: bool) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if attack {
        config.attack.get_or_insert_with(AttackConfig::default);
    } else {
        config.attack = None;
    }
    config.serial |= args.serial;
    let out = args
        .out
        .clone()
        .or_else(|| config.output.clone())
        .ok_or_else(|| {
            fru_core::Error::Config("no output directory: pass --out or set `output`".into())
        })?;
    Ok((config, out))
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn train(args: &TrainArgs, attack: bool) -> anyhow::Result<()> {
    let (config, out) = load_config(args, attack)?;
    let summary = experiment::run_train(&config, &out, args.force)?;
    log::info!("wrote {}", summary.run_dir.display());
    print_json(&summary.evaluation)
}

fn unlearn(args: &UnlearnArgs) -> anyhow::Result<()> {
    let spec = UnlearnSpec {
        mode: args.mode,
        speedup_factor: args.lambda,
        targets: args.targets.clone(),
    };
    let summary = experiment::run_unlearn(&args.run_dir, &spec, args.serial, args.force)?;
    log::info!("wrote {}", summary.out_dir.display());
    print_json(&summary.evaluation)
}

fn report(run_dirs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let (table, timings) = experiment::collect_report(run_dirs)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            table.save_csv(&dir.join("table.csv"))?;
            let f = fs::File::create(dir.join("timing.csv"))
                .with_context(|| format!("writing {}", dir.display()))?;
            experiment::write_timing_csv(&timings, f)?;
        }
        None => table.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn predict_storage(config: &Path, run: Option<&Path>) -> anyhow::Result<()> {
    let config = ExperimentConfig::load(config)?;
    config.validate()?;
    let fed = config.federation();
    match run {
        None => {
            let data = config.dataset.load(config.train.seed)?;
            print_json(&fru_core::devicelog::predict_storage(
                &experiment::storage_inputs(&fed, &data),
            ))
        }
        Some(dir) => {
            let run = LoadedRun::open(dir)?;
            let fed = run.manifest.config.federation();
            let report = experiment::storage_report(
                &fed,
                &run.dataset,
                &run.trace,
                &dir.join(experiment::LOGS),
            )?;
            let violations = report.violations().count();
            if violations > 0 {
                log::warn!("{violations} clients exceed the storage bound");
            }
            print_json(&report)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fru_core::Error>() {
        Some(e) if e.is_config_error() => 2,
        Some(e) if e.is_data_error() => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train(args, false),
        Command::AttackTrain(args) => train(args, true),
        Command::Unlearn(args) => unlearn(args),
        Command::Evaluate { run_dir } => experiment::run_evaluate(run_dir)
            .map_err(Into::into)
            .and_then(|r| print_json(&r)),
        Command::Report { run_dirs, out } => report(run_dirs, out.as_deref()),
        Command::PredictStorage { config, run } => predict_storage(config, run.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
