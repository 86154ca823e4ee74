//! Training strategies: three baselines, modality tuning with a frozen or
//! eventually-free trunk, activation-statistics regularization, and the
//! combination of the two.

use std::collections::BTreeMap;

use super::CrossModalNet;
use crate::density::{DensityKind, LayerId};
use crate::error::{Error, Result};
use crate::synthdata::ModalityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StrategyKind {
    /// One private network per modality, no sharing.
    BlIndividual,
    /// Shared trunk from random init, everything free from iteration 0.
    BlSharedScratch,
    /// Shared trunk from the anchor net, everything free from iteration 0.
    BlSharedUpper,
    /// Trunk from the anchor net, frozen for the whole run.
    ATuneFrozen,
    /// Trunk frozen for `freeze_iters`, then everything free.
    ATuneFree,
    /// Diagonal-Gaussian activation penalty, nothing frozen.
    BGauss,
    /// Diagonal-GMM activation penalty, nothing frozen.
    BGmm,
    /// Freeze phase followed by a free phase with the GMM penalty active.
    CJoint,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::BlIndividual,
        StrategyKind::BlSharedScratch,
        StrategyKind::BlSharedUpper,
        StrategyKind::ATuneFrozen,
        StrategyKind::ATuneFree,
        StrategyKind::BGauss,
        StrategyKind::BGmm,
        StrategyKind::CJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::BlIndividual => "bl_individual",
            StrategyKind::BlSharedScratch => "bl_shared_scratch",
            StrategyKind::BlSharedUpper => "bl_shared_upper",
            StrategyKind::ATuneFrozen => "a_tune_frozen",
            StrategyKind::ATuneFree => "a_tune_free",
            StrategyKind::BGauss => "b_gauss",
            StrategyKind::BGmm => "b_gmm",
            StrategyKind::CJoint => "c_joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown strategy '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    /// True when the trunk starts as a copy of the anchor trunk.
    /// BlIndividual also clones the anchor where dims permit.
    pub fn uses_anchor_init(self) -> bool {
        !matches!(self, StrategyKind::BlSharedScratch)
    }

    pub fn regularizer_active(self) -> bool {
        matches!(
            self,
            StrategyKind::BGauss | StrategyKind::BGmm | StrategyKind::CJoint
        )
    }

    /// The density family this strategy penalizes against, if any.
    pub fn density_kind(self) -> Option<DensityKind> {
        match self {
            StrategyKind::BGauss => Some(DensityKind::Gaussian),
            StrategyKind::BGmm | StrategyKind::CJoint => Some(DensityKind::Gmm),
            _ => None,
        }
    }

    pub fn phase(self, iteration: usize, freeze_iters: usize) -> Phase {
        match self {
            StrategyKind::ATuneFrozen => Phase::Frozen,
            StrategyKind::ATuneFree | StrategyKind::CJoint => {
                if iteration < freeze_iters {
                    Phase::Frozen
                } else {
                    Phase::Free
                }
            }
            _ => Phase::Free,
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Frozen,
    Free,
}

/// Which parameter groups the optimizer may touch on a given step.
/// The encoder group always refers to the current batch's modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainScope {
    pub encoder: bool,
    pub trunk: bool,
}

/// Frozen phases update only the current modality's encoder; free phases
/// update everything reachable by the batch.
pub fn trainable_set(kind: StrategyKind, phase: Phase) -> TrainScope {
    let _ = kind;
    match phase {
        Phase::Frozen => TrainScope { encoder: true, trunk: false },
        Phase::Free => TrainScope { encoder: true, trunk: true },
    }
}

/// Expand a scope into explicit parameter ids for one modality's step.
pub fn trainable_param_ids(
    net: &CrossModalNet,
    modality: ModalityId,
    scope: TrainScope,
) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    if scope.encoder {
        let branch = net.branch(modality)?;
        for j in 0..branch.encoder.layer_count() {
            ids.push(format!("branch.{modality}.enc{j}.weight"));
            ids.push(format!("branch.{modality}.enc{j}.bias"));
        }
    }
    if scope.trunk {
        for part in ["fc6", "fc7", "classifier"] {
            ids.push(format!("trunk.{part}.weight"));
            ids.push(format!("trunk.{part}.bias"));
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    /// Length of the frozen phase where a strategy has one.
    pub freeze_iters: usize,
    pub total_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl CurriculumSchedule {
    pub fn default_desk() -> Self {
        // Plain SGD at lr 1e-3 from a std-0.1 init spends its first ~10k
        // iterations on the uniform-logits plateau; the counts below leave
        // room to cross it and converge after.
        CurriculumSchedule {
            freeze_iters: 10_000,
            total_iters: 20_000,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 5e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.freeze_iters > self.total_iters {
            return Err(Error::Config(format!(
                "freeze_iters {} exceeds total_iters {}",
                self.freeze_iters, self.total_iters
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    /// Per-layer penalty strengths; only shared_in, fc6, fc7 are legal keys.
    pub lambdas: BTreeMap<LayerId, f64>,
    pub density_kind: DensityKind,
    /// Mixture size for GMM densities.
    pub k: usize,
    /// Cap on anchor activations used to fit each density.
    pub max_fit_samples: usize,
    /// Variance floor used when fitting penalty densities. Deliberately much
    /// looser than the generic fitting floor: a unit that is nearly constant
    /// in the anchor net would otherwise get a near-zero variance, and the
    /// penalty gradient 1/sigma^2 would blow training up.
    pub fit_floor: f64,
    /// Also penalize the anchor modality's own batches. Off by default: the
    /// anchor defines the target statistics, so the penalty would mostly
    /// push against noise in its own fit.
    pub include_anchor: bool,
    /// EM stop once the per-sample mean log-likelihood improves by less.
    pub em_tol: f64,
    pub em_max_iters: usize,
}

impl RegConfig {
    pub fn default_desk() -> Self {
        let mut lambdas = BTreeMap::new();
        for id in LayerId::REGULARIZABLE {
            lambdas.insert(id, 0.1);
        }
        RegConfig {
            lambdas,
            density_kind: DensityKind::Gmm,
            k: 8,
            max_fit_samples: 1000,
            fit_floor: 1e-2,
            include_anchor: false,
            em_tol: 1e-6,
            em_max_iters: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (&layer, &lambda) in &self.lambdas {
            if !layer.is_regularizable() {
                return Err(Error::Config(format!(
                    "layer '{layer}' cannot carry an activation penalty"
                )));
            }
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::Config(format!(
                    "lambda for '{layer}' must be >= 0, got {lambda}"
                )));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("mixture size k must be >= 1".into()));
        }
        if self.max_fit_samples < 2 {
            return Err(Error::Config("max_fit_samples must be >= 2".into()));
        }
        if !(self.fit_floor.is_finite() && self.fit_floor > 0.0) {
            return Err(Error::Config(format!(
                "fit_floor must be positive, got {}",
                self.fit_floor
            )));
        }
        if !(self.em_tol.is_finite() && self.em_tol > 0.0) {
            return Err(Error::Config(format!(
                "em_tol must be positive, got {}",
                self.em_tol
            )));
        }
        if self.em_max_iters == 0 {
            return Err(Error::Config("em_max_iters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_lambda(&self) -> f64 {
        self.lambdas.values().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub curriculum: CurriculumSchedule,
    pub reg: RegConfig,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, curriculum: CurriculumSchedule, reg: RegConfig) -> Self {
        StrategySpec { kind, curriculum, reg }
    }

    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        self.reg.validate()?;
        let needs_freeze = matches!(
            self.kind,
            StrategyKind::ATuneFrozen | StrategyKind::ATuneFree | StrategyKind::CJoint
        );
        if needs_freeze && self.curriculum.freeze_iters == 0 && self.curriculum.total_iters > 0 {
            return Err(Error::Config(format!(
                "strategy {} requires freeze_iters > 0",
                self.kind
            )));
        }
        Ok(())
    }

    /// The regularizer applies to this modality's batches under this spec.
    pub fn penalizes(&self, modality: ModalityId, anchor: ModalityId) -> bool {
        self.kind.regularizer_active() && (self.reg.include_anchor || modality != anchor)
    }
}
