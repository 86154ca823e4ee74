//! Density models over intermediate activations.
//!
//! A [`LayerDensitySet`] holds one fitted model per tapped layer of the
//! shared network. During regularized training the penalty is the negative
//! log density of the current activations under the corresponding model (for
//! the Gaussian case with its constant dropped), pulling every modality's
//! activation statistics toward the anchor modality's.

mod gaussian;
mod gmm;
mod io;

pub use gaussian::DiagonalGaussian;
pub use gmm::{fit_gmm_em, DiagonalGmm, EmConfig, GmmFit};
pub use io::{read_density, write_density};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Named taps of the per-modality network stack.
///
/// `shared_in` is the encoder output entering the trunk, `fc6` and `fc7` the
/// two rectified trunk layers, `logits` the classifier output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    SharedIn,
    Fc6,
    Fc7,
    Logits,
}

impl LayerId {
    pub const ALL: [LayerId; 4] = [LayerId::SharedIn, LayerId::Fc6, LayerId::Fc7, LayerId::Logits];

    /// Layers that may carry an activation penalty. Logits are excluded:
    /// penalizing them would fight the classification loss directly.
    pub const REGULARIZABLE: [LayerId; 3] = [LayerId::SharedIn, LayerId::Fc6, LayerId::Fc7];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::SharedIn => "shared_in",
            LayerId::Fc6 => "fc6",
            LayerId::Fc7 => "fc7",
            LayerId::Logits => "logits",
        }
    }

    pub fn parse(s: &str) -> Result<LayerId> {
        match s {
            "shared_in" => Ok(LayerId::SharedIn),
            "fc6" => Ok(LayerId::Fc6),
            "fc7" => Ok(LayerId::Fc7),
            "logits" => Ok(LayerId::Logits),
            other => Err(Error::UnknownLayer(other.into())),
        }
    }

    pub fn is_regularizable(self) -> bool {
        !matches!(self, LayerId::Logits)
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which family of density model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityKind {
    Gaussian,
    Gmm,
}

impl DensityKind {
    pub fn name(self) -> &'static str {
        match self {
            DensityKind::Gaussian => "gaussian",
            DensityKind::Gmm => "gmm",
        }
    }
}

/// A fitted density over one layer's activation vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum DensityModel {
    Gaussian(DiagonalGaussian),
    Gmm(DiagonalGmm),
}

impl DensityModel {
    pub fn dim(&self) -> usize {
        match self {
            DensityModel::Gaussian(g) => g.dim(),
            DensityModel::Gmm(g) => g.dim(),
        }
    }

    pub fn kind(&self) -> DensityKind {
        match self {
            DensityModel::Gaussian(_) => DensityKind::Gaussian,
            DensityModel::Gmm(_) => DensityKind::Gmm,
        }
    }

    pub fn penalty(&self, h: &[f64]) -> f64 {
        match self {
            DensityModel::Gaussian(g) => g.penalty(h),
            DensityModel::Gmm(g) => g.penalty(h),
        }
    }

    pub fn penalty_grad_into(&self, h: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            DensityModel::Gaussian(g) => g.penalty_grad_into(h, scale, out),
            DensityModel::Gmm(g) => g.penalty_grad_into(h, scale, out),
        }
    }
}

/// One density model per tapped layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerDensitySet {
    models: BTreeMap<LayerId, DensityModel>,
}

impl LayerDensitySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: LayerId, model: DensityModel) {
        self.models.insert(layer, model);
    }

    pub fn get(&self, layer: LayerId) -> Option<&DensityModel> {
        self.models.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.models.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Writes one `<layer>.xmdm` blob per model into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (layer, model) in &self.models {
            write_density(&dir.join(format!("{layer}.xmdm")), model)?;
        }
        Ok(())
    }

    /// Loads the given layers from `dir`, expecting one blob per layer.
    pub fn load(dir: &Path, layers: &[LayerId]) -> Result<Self> {
        let mut set = LayerDensitySet::new();
        for &layer in layers {
            let model = read_density(&dir.join(format!("{layer}.xmdm")))?;
            set.insert(layer, model);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_ids_round_trip_through_names() {
        for id in LayerId::ALL {
            assert_eq!(LayerId::parse(id.name()).unwrap(), id);
        }
        assert!(matches!(
            LayerId::parse("fc9"),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn logits_are_not_regularizable() {
        assert!(!LayerId::Logits.is_regularizable());
        assert!(LayerId::REGULARIZABLE.iter().all(|l| l.is_regularizable()));
    }
}
