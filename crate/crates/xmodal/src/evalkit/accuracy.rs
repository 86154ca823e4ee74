//! Plain classification accuracy, per modality, on one split.

use serde::{Deserialize, Serialize};

use crate::crossmodal::TrainedModel;
use crate::density::LayerId;
use crate::error::{Error, Result};
use crate::synthdata::{CrossModalDataset, ModalityId, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityAccuracy {
    pub modality: ModalityId,
    pub name: String,
    pub examples: usize,
    pub accuracy: f64,
}

/// Ties go to the smallest class index, so results cannot depend on float
/// traversal order.
pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .expect("at least one class")
        .0
}

/// Argmax accuracy over every modality's examples in `split`.
pub fn classification_accuracy(
    model: &TrainedModel,
    data: &CrossModalDataset,
    split: Split,
) -> Result<Vec<ModalityAccuracy>> {
    let mut out = Vec::new();
    for m in 0..data.modality_count() as ModalityId {
        let idx = data.indices(m, split);
        if idx.is_empty() {
            return Err(Error::InsufficientData {
                context: format!("examples of modality '{}'", data.modality_name(m)),
                needed: 1,
                got: 0,
            });
        }
        let (x, labels) = data.gather(&idx)?;
        let logits = model.extract(m, &x, LayerId::Logits)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(r, &label)| argmax(logits.row(r)) == usize::from(label))
            .count();
        out.push(ModalityAccuracy {
            modality: m,
            name: data.modality_name(m).to_string(),
            examples: idx.len(),
            accuracy: hits as f64 / idx.len() as f64,
        });
    }
    Ok(out)
}
