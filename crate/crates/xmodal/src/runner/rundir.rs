//! Layout of a run directory. One directory holds one dataset and one
//! trained strategy plus everything derived from them:
//!
//! ```text
//! run/
//!   config.resolved          full key=value snapshot, refreshed per stage
//!   dataset.xmds
//!   checkpoints/anchor.xmck
//!   checkpoints/<strategy>.xmck
//!   densities/<layer>.xmdm
//!   logs/anchor.jsonl
//!   logs/<strategy>.jsonl
//!   reports/...              json + txt + csv outputs
//! ```

use std::path::{Path, PathBuf};

use super::RunConfig;
use crate::crossmodal::StrategyKind;
use crate::density::LayerId;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("dataset.xmds")
    }

    pub fn anchor_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("anchor.xmck")
    }

    pub fn strategy_checkpoint(&self, kind: StrategyKind) -> PathBuf {
        self.root.join("checkpoints").join(format!("{kind}.xmck"))
    }

    pub fn densities_dir(&self) -> PathBuf {
        self.root.join("densities")
    }

    pub fn density_path(&self, layer: LayerId) -> PathBuf {
        self.densities_dir().join(format!("{layer}.xmdm"))
    }

    pub fn anchor_log(&self) -> PathBuf {
        self.root.join("logs").join("anchor.jsonl")
    }

    pub fn strategy_log(&self, kind: StrategyKind) -> PathBuf {
        self.root.join("logs").join(format!("{kind}.jsonl"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn retrieval_report(&self, layer: LayerId, ext: &str) -> PathBuf {
        self.reports_dir().join(format!("retrieval_{layer}.{ext}"))
    }

    pub fn layer_summary(&self, ext: &str) -> PathBuf {
        self.reports_dir().join(format!("layer_summary.{ext}"))
    }

    pub fn zeroshot_report(&self, ext: &str) -> PathBuf {
        self.reports_dir().join(format!("zeroshot.{ext}"))
    }

    pub fn units_report(&self, layer: LayerId, ext: &str) -> PathBuf {
        self.reports_dir().join(format!("units_{layer}.{ext}"))
    }

    pub fn embeddings_csv(&self, layer: LayerId) -> PathBuf {
        self.reports_dir().join(format!("embeddings_{layer}.csv"))
    }

    /// Create the directory tree. Idempotent.
    pub fn ensure_layout(&self) -> Result<()> {
        for dir in [
            self.root.clone(),
            self.root.join("checkpoints"),
            self.densities_dir(),
            self.root.join("logs"),
            self.reports_dir(),
        ] {
            std::fs::create_dir_all(&dir)?;
        }
        Ok(())
    }

    /// The stored snapshot, if any.
    pub fn load_config(&self) -> Result<Option<RunConfig>> {
        let path = self.config_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        RunConfig::parse_str(&text).map(Some).map_err(|e| {
            Error::Config(format!("{}: stored snapshot is invalid: {e}", path.display()))
        })
    }

    pub fn store_config(&self, cfg: &RunConfig) -> Result<()> {
        self.ensure_layout()?;
        std::fs::write(self.config_path(), cfg.render())?;
        Ok(())
    }

    /// Refuse to mix configurations: if the directory already has a snapshot,
    /// its identity sections must match `cfg` exactly.
    pub fn reconcile(&self, cfg: &RunConfig) -> Result<Option<RunConfig>> {
        let stored = self.load_config()?;
        if let Some(stored) = &stored {
            if stored.render_identity() != cfg.render_identity() {
                return Err(Error::Config(format!(
                    "{} was created with a different [data]/[arch]/[train]/[reg] \
                     configuration; use a fresh --run-dir",
                    self.root.display()
                )));
            }
        }
        Ok(stored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconcile_accepts_matching_and_rejects_divergent_identity() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let cfg = RunConfig::default_desk();
        assert!(run.reconcile(&cfg).unwrap().is_none());
        run.store_config(&cfg).unwrap();

        // Report knobs may drift freely.
        let mut knobs = cfg.clone();
        knobs.eval.n_queries = 5;
        assert!(run.reconcile(&knobs).unwrap().is_some());

        // Identity drift is an error.
        let mut drifted = cfg.clone();
        drifted.train_seed = 1234;
        let err = run.reconcile(&drifted).unwrap_err();
        assert!(err.to_string().contains("different"), "{err}");
    }

    #[test]
    fn stored_snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let cfg = RunConfig::default_desk();
        run.store_config(&cfg).unwrap();
        assert_eq!(run.load_config().unwrap().unwrap(), cfg);
    }
}
