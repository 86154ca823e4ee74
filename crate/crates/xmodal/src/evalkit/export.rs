//! CSV export of embeddings for external visualization tools.
//!
//! Layout: header `modality,class,f0..f{D-1}`, one row per embedded example.
//! Rows are ordered by modality id, then by dataset example index, so the
//! same model and seed always produce byte-identical files.

use std::io::Write as _;
use std::path::Path;

use crate::crossmodal::TrainedModel;
use crate::density::LayerId;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::synthdata::{CrossModalDataset, ModalityId, Split};

/// One exported embedding with its provenance columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportRow {
    pub modality: ModalityId,
    pub class: u16,
    pub features: Vec<f64>,
}

/// Embed up to `cap_per_modality` validation examples of every modality.
/// The subsample is drawn without replacement from `rng` and emitted in
/// ascending example order.
pub fn collect_export_rows(
    model: &TrainedModel,
    data: &CrossModalDataset,
    layer: LayerId,
    cap_per_modality: usize,
    rng: &mut RngState,
) -> Result<Vec<ExportRow>> {
    if cap_per_modality == 0 {
        return Err(Error::Config("export cap must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for m in 0..data.modality_count() as ModalityId {
        let idx = data.indices(m, Split::Val);
        if idx.is_empty() {
            return Err(Error::InsufficientData {
                context: format!("validation examples of modality '{}'", data.modality_name(m)),
                needed: 1,
                got: 0,
            });
        }
        let take = cap_per_modality.min(idx.len());
        let mut picked = rng.choose_distinct(idx.len(), take);
        picked.sort_unstable();
        let chosen: Vec<usize> = picked.into_iter().map(|i| idx[i]).collect();
        let (inputs, labels) = data.gather(&chosen)?;
        let features = model.extract(m, &inputs, layer)?;
        for (r, &class) in labels.iter().enumerate() {
            let features = (0..features.cols()).map(|c| features.at(r, c)).collect();
            rows.push(ExportRow { modality: m, class, features });
        }
    }
    Ok(rows)
}

/// Write rows as CSV. All rows must share one feature width.
pub fn export_embeddings(rows: &[ExportRow], path: &Path) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::Config("nothing to export".into()));
    };
    let dim = first.features.len();
    if dim == 0 {
        return Err(Error::Config("export rows have no features".into()));
    }
    for row in rows {
        if row.features.len() != dim {
            return Err(Error::ShapeMismatch {
                context: "export feature width".into(),
                expected: format!("{dim}"),
                got: format!("{}", row.features.len()),
            });
        }
    }

    let io = Error::Io;
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let mut line = String::from("modality,class");
    for d in 0..dim {
        line.push_str(&format!(",f{d}"));
    }
    writeln!(w, "{line}").map_err(io)?;
    for row in rows {
        line.clear();
        line.push_str(&format!("{},{}", row.modality, row.class));
        for v in &row.features {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
