use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lmbench_cli::commands::{self, Context, ReportOptions};
use lmbench_cli::config::{ExperimentConfig, DATA_ROOT_ENV};
use lmbench_cli::report::Template;
use lmbench_cli::{CliError, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "lmbench", version, about = "Landmark detection benchmark on hand, head and chest x-rays")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rerun even if the results store already holds this config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset root and write its index.
    Prepare {
        dataset: String,
        /// Dataset root; defaults to the config entry or $LMBENCH_DATA_ROOT/<dataset>.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Train on a dataset and score its test split.
    Train,
    /// Run transfer chains.
    Chain,
    /// K-fold cross-validation.
    Crossval,
    /// Score a checkpoint.
    Eval,
    /// Render result tables and plots.
    Report {
        #[arg(long = "template", value_enum, default_values_t = [Template::Table1, Template::Table2, Template::Table3])]
        templates: Vec<Template>,
        /// Results store; defaults to `<out>/results.jsonl`.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Dataset of the architecture/encoder table.
        #[arg(long, default_value = "hand")]
        dataset: String,
        /// Check full-scale baselines and chain gains against published values.
        #[arg(long)]
        check: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let config = config.with_overrides(cli.seed, cli.out.as_deref());
    let ctx = Context::new(config, cli.force)?;
    log::debug!("config hash {}, {DATA_ROOT_ENV}={:?}", ctx.config_hash, std::env::var_os(DATA_ROOT_ENV));
    match cli.command {
        Command::Prepare { dataset, root } => commands::prepare(&ctx, &dataset, root.as_deref()).map(drop),
        Command::Train => commands::train(&ctx).map(drop),
        Command::Chain => commands::chain(&ctx).map(drop),
        Command::Crossval => commands::crossval_cmd(&ctx).map(drop),
        Command::Eval => commands::eval(&ctx).map(drop),
        Command::Report {
            templates,
            store,
            dataset,
            check,
        } => commands::report_cmd(
            &ctx,
            &ReportOptions {
                templates,
                store,
                table1_dataset: dataset,
                check,
            },
        )
        .map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
