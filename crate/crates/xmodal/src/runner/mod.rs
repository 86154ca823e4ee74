//! The run-directory pipeline behind the `xmodal` binary: resolved key=value
//! configs, a fixed directory layout, and idempotent stages (generate, train,
//! evaluate, zero-shot, units, export) plus the gradient-check driver.

mod config;
mod gradcheck;
mod rundir;
mod stages;

pub use config::{EvalSection, Overrides, RunConfig, ZeroShotSection};
pub use gradcheck::{run_gradcheck, GradCheckOutcome};
pub use rundir::RunDir;
pub use stages::{
    aggregate, stage_eval, stage_export, stage_gen_data, stage_train, stage_units,
    stage_zeroshot, LayerLine, LayerSummaryFile, RetrievalFile, UnitsFile, ZeroShotFile,
};
