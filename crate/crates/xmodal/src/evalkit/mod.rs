//! Measurement of trained models: cross-modal retrieval, zero-shot transfer
//! to held-out classes, per-unit activation consistency, and embedding
//! export for external projection tools.
//!
//! Everything here is read-only over models and datasets, seed-deterministic,
//! and reported in [0,1]; renderers format percentages at the end.

mod accuracy;
mod export;
mod metrics;
mod report;
mod retrieval;
mod units;
mod zeroshot;

pub use accuracy::{classification_accuracy, ModalityAccuracy};
pub use export::{collect_export_rows, export_embeddings, ExportRow};
pub use metrics::{average_precision, precision_at_k};
pub use report::{render_retrieval_table, render_unit_report, render_zero_shot};
pub(crate) use report::align;
pub use retrieval::{
    chance_map_estimate, retrieval_eval, PairResult, RetrievalProtocol, RetrievalReport,
};
pub use units::{
    unit_activation_report, unit_report_from_features, UnitConsistencyReport, UnitEntry, UnitTop,
};
pub use zeroshot::{zero_shot_classify, zero_shot_retrieval, ZeroShotAccuracy};

use std::collections::BTreeMap;

use crate::crossmodal::TrainedModel;
use crate::density::LayerId;
use crate::error::{Error, Result};
use crate::synthdata::{CrossModalDataset, ModalityId, Split};
use crate::tensor::Tensor;

/// One modality's extracted feature matrix with aligned labels.
#[derive(Debug, Clone)]
pub struct ModalityFeatures {
    pub name: String,
    /// `[N, D]`, one row per example.
    pub vectors: Tensor,
    pub labels: Vec<u16>,
}

pub type FeatureMap = BTreeMap<ModalityId, ModalityFeatures>;

/// Extract `layer` features for every modality over one split.
pub fn extract_feature_map(
    model: &TrainedModel,
    data: &CrossModalDataset,
    layer: LayerId,
    split: Split,
) -> Result<FeatureMap> {
    let mut out = BTreeMap::new();
    for m in 0..data.modality_count() as ModalityId {
        let idx = data.indices(m, split);
        if idx.is_empty() {
            return Err(Error::InsufficientData {
                context: format!("{split:?} split of modality '{}'", data.modality_name(m)),
                needed: 1,
                got: 0,
            });
        }
        let (x, labels) = data.gather(&idx)?;
        let vectors = model.extract(m, &x, layer)?;
        out.insert(
            m,
            ModalityFeatures {
                name: data.modality_name(m).to_string(),
                vectors,
                labels,
            },
        );
    }
    Ok(out)
}
