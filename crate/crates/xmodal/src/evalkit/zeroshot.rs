//! Zero-shot measurement on held-out classes: classification accuracy for
//! the modalities whose training split never saw those classes, and
//! retrieval restricted to held-out items with the anchor modality excluded
//! on both sides (it saw everything, so it has nothing to prove).

use serde::{Deserialize, Serialize};

use super::retrieval::{retrieval_eval, RetrievalProtocol, RetrievalReport};
use super::{FeatureMap, ModalityFeatures};
use crate::crossmodal::TrainedModel;
use crate::density::LayerId;
use crate::error::{Error, Result};
use crate::synthdata::{CrossModalDataset, HoldoutSpec, ModalityId, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotAccuracy {
    pub modality: ModalityId,
    pub name: String,
    /// Held-out-class validation examples scored.
    pub examples: usize,
    /// Argmax over the full class range, not just the held-out classes.
    pub accuracy: f64,
}

fn holdout_of(data: &CrossModalDataset) -> Result<&HoldoutSpec> {
    data.holdout.as_ref().ok_or(Error::NoHoldout)
}

/// Validation row indices of `modality` whose class was held out.
fn held_val_indices(data: &CrossModalDataset, holdout: &HoldoutSpec, m: ModalityId) -> Vec<usize> {
    data.examples
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            e.modality == m && e.split == Split::Val && holdout.classes.contains(&e.class)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Full C-way classification accuracy on held-out-class validation examples,
/// one entry per affected modality.
pub fn zero_shot_classify(
    model: &TrainedModel,
    data: &CrossModalDataset,
) -> Result<Vec<ZeroShotAccuracy>> {
    let holdout = holdout_of(data)?;
    let mut out = Vec::new();
    for &m in &holdout.affected {
        let idx = held_val_indices(data, holdout, m);
        if idx.is_empty() {
            return Err(Error::InsufficientData {
                context: format!(
                    "held-out validation examples of modality '{}'",
                    data.modality_name(m)
                ),
                needed: 1,
                got: 0,
            });
        }
        let (x, labels) = data.gather(&idx)?;
        let logits = model.extract(m, &x, LayerId::Logits)?;
        let mut hits = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .expect("classifier has at least one class")
                .0;
            if pred == usize::from(label) {
                hits += 1;
            }
        }
        out.push(ZeroShotAccuracy {
            modality: m,
            name: data.modality_name(m).to_string(),
            examples: idx.len(),
            accuracy: hits as f64 / idx.len() as f64,
        });
    }
    Ok(out)
}

/// Retrieval over held-out-class validation items only, between every pair
/// of non-anchor modalities.
pub fn zero_shot_retrieval(
    model: &TrainedModel,
    data: &CrossModalDataset,
    layer: LayerId,
    protocol: &RetrievalProtocol,
) -> Result<RetrievalReport> {
    let holdout = holdout_of(data)?;
    let mut features = FeatureMap::new();
    for m in 0..data.modality_count() as ModalityId {
        if m == data.anchor {
            continue;
        }
        let idx = held_val_indices(data, holdout, m);
        if idx.is_empty() {
            return Err(Error::InsufficientData {
                context: format!(
                    "held-out validation examples of modality '{}'",
                    data.modality_name(m)
                ),
                needed: 1,
                got: 0,
            });
        }
        let (x, labels) = data.gather(&idx)?;
        let vectors = model.extract(m, &x, layer)?;
        features.insert(
            m,
            ModalityFeatures {
                name: data.modality_name(m).to_string(),
                vectors,
                labels,
            },
        );
    }
    if features.len() < 2 {
        return Err(Error::Config(
            "zero-shot retrieval needs at least 2 non-anchor modalities".into(),
        ));
    }
    retrieval_eval(&features, protocol)
}
