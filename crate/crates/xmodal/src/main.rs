//! Command-line front end. All logic lives in the library; this file only
//! parses flags, resolves the effective configuration, and maps errors to
//! exit codes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xmodal::crossmodal::StrategyKind;
use xmodal::density::LayerId;
use xmodal::runner::{
    aggregate, run_gradcheck, stage_eval, stage_export, stage_gen_data, stage_train,
    stage_units, stage_zeroshot, Overrides, RunConfig, RunDir,
};
use xmodal::{Error, Result};

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modal representation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every stage that operates on a run directory.
#[derive(Args)]
struct StageArgs {
    /// Run directory; holds the dataset, checkpoints, and reports.
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
    /// Key=value config file; defaults to the directory's stored snapshot,
    /// or to the built-in desk configuration for a fresh directory.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set every section's seed to this value.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Redo the stage even if its outputs are current.
    #[arg(long)]
    force: bool,
    /// Training strategy (e.g. c_joint, b_gmm, a_tune_free).
    #[arg(long, value_name = "NAME")]
    strategy: Option<String>,
    /// Feature layer for reports: shared_in, fc6, or fc7.
    #[arg(long, value_name = "LAYER")]
    layer: Option<String>,
    /// Retrieval queries per modality pair.
    #[arg(long, value_name = "N")]
    n_queries: Option<usize>,
    /// Examples per unit in the consistency report.
    #[arg(long, value_name = "K")]
    top_k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the run directory.
    GenData {
        #[command(flatten)]
        stage: StageArgs,
        /// Fraction of classes to hold out of non-anchor training splits.
        #[arg(long, value_name = "F")]
        holdout_frac: Option<f64>,
    },
    /// Train the configured strategy (and its anchor/density prerequisites).
    Train {
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Cross-modal retrieval report at every feature layer.
    Eval {
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Accuracy and retrieval on held-out classes.
    Zeroshot {
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Per-unit class consistency across modalities.
    Units {
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Dump embeddings to CSV for external projection tools.
    Export {
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-5, value_name = "TOL")]
        tolerance: f64,
        /// Fixture seed.
        #[arg(long, default_value_t = 1234, value_name = "N")]
        seed: u64,
    },
    /// Read-only comparison across completed run directories.
    Aggregate {
        /// Run directories to summarize.
        #[arg(required = true, value_name = "DIR")]
        dirs: Vec<PathBuf>,
    },
}

fn overrides(stage: &StageArgs, holdout_frac: Option<f64>) -> Result<Overrides> {
    Ok(Overrides {
        seed: stage.seed,
        holdout_frac,
        strategy: stage.strategy.as_deref().map(StrategyKind::parse).transpose()?,
        layer: stage.layer.as_deref().map(LayerId::parse).transpose()?,
        n_queries: stage.n_queries,
        top_k: stage.top_k,
    })
}

/// Effective configuration: explicit file, else the directory's stored
/// snapshot, else the built-in defaults; command-line overrides last.
fn effective_config(dir: &RunDir, stage: &StageArgs, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = if let Some(path) = &stage.config {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse_str(&text)?
    } else if let Some(stored) = dir.load_config()? {
        stored
    } else {
        RunConfig::default_desk()
    };
    cfg.apply_overrides(ov);
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(
    stage: StageArgs,
    holdout_frac: Option<f64>,
    f: fn(&RunDir, &RunConfig, bool) -> Result<String>,
) -> Result<String> {
    let dir = RunDir::new(&stage.run_dir);
    let ov = overrides(&stage, holdout_frac)?;
    let cfg = effective_config(&dir, &stage, &ov)?;
    f(&dir, &cfg, stage.force)
}

fn dispatch(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { stage, holdout_frac } => {
            run_stage(stage, holdout_frac, stage_gen_data)
        }
        Command::Train { stage } => run_stage(stage, None, stage_train),
        Command::Eval { stage } => run_stage(stage, None, stage_eval),
        Command::Zeroshot { stage } => run_stage(stage, None, stage_zeroshot),
        Command::Units { stage } => run_stage(stage, None, stage_units),
        Command::Export { stage } => run_stage(stage, None, stage_export),
        Command::Gradcheck { tolerance, seed } => {
            let out = run_gradcheck(tolerance, seed)?;
            if out.passed {
                Ok(out.text)
            } else {
                print!("{}", out.text);
                Err(Error::GradCheckFailed {
                    max_rel_err: out.max_rel_err,
                    tolerance: out.tolerance,
                })
            }
        }
        Command::Aggregate { dirs } => aggregate(&dirs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(text) => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
