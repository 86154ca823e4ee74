//! Per-unit activation consistency: does the same hidden unit fire for the
//! same concept in every modality? For each unit the top-k activating
//! validation examples are collected per modality; the unit counts as
//! consistent when the majority class of those top-k sets agrees across all
//! modalities. This is the computable stand-in for eyeballing what a unit
//! responds to.

use serde::{Deserialize, Serialize};

use super::{extract_feature_map, FeatureMap};
use crate::crossmodal::TrainedModel;
use crate::density::LayerId;
use crate::error::{Error, Result};
use crate::synthdata::{CrossModalDataset, ModalityId, Split};

/// One modality's view of one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTop {
    pub modality: ModalityId,
    pub name: String,
    /// Row indices into that modality's feature matrix, strongest first.
    pub top_rows: Vec<usize>,
    pub top_classes: Vec<u16>,
    /// Most frequent class among the top rows; ties to the smallest id.
    pub majority_class: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEntry {
    pub unit: usize,
    pub per_modality: Vec<UnitTop>,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitConsistencyReport {
    pub layer: String,
    pub top_k: usize,
    pub units: Vec<UnitEntry>,
    /// Fraction of units whose majority class agrees across all modalities.
    pub consistency_rate: f64,
}

fn majority_class(classes: &[u16]) -> u16 {
    let mut counts = std::collections::BTreeMap::new();
    for &c in classes {
        *counts.entry(c).or_insert(0usize) += 1;
    }
    // BTreeMap iterates ascending, so on equal counts the smallest id wins.
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("top-k is never empty")
        .0
}

/// Consistency report over already-extracted features. Every modality must
/// expose the same unit count.
pub fn unit_report_from_features(
    features: &FeatureMap,
    layer: &str,
    top_k: usize,
) -> Result<UnitConsistencyReport> {
    if features.len() < 2 {
        return Err(Error::Config(format!(
            "unit consistency needs at least 2 modalities, got {}",
            features.len()
        )));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be >= 1".into()));
    }
    let dim = features.values().next().expect("nonempty").vectors.cols();
    for (&m, f) in features {
        if f.vectors.cols() != dim {
            return Err(Error::ShapeMismatch {
                context: format!("unit activations of modality {m}"),
                expected: format!("{dim} units"),
                got: format!("{}", f.vectors.cols()),
            });
        }
        if f.vectors.rows() < top_k {
            return Err(Error::InsufficientData {
                context: format!("examples of modality '{}'", f.name),
                needed: top_k,
                got: f.vectors.rows(),
            });
        }
        if f.vectors.rows() != f.labels.len() {
            return Err(Error::ShapeMismatch {
                context: format!("labels of modality {m}"),
                expected: format!("{}", f.vectors.rows()),
                got: format!("{}", f.labels.len()),
            });
        }
    }

    let mut units = Vec::with_capacity(dim);
    let mut consistent_count = 0usize;
    for unit in 0..dim {
        let mut per_modality = Vec::with_capacity(features.len());
        for (&m, f) in features {
            let mut order: Vec<usize> = (0..f.vectors.rows()).collect();
            order.sort_by(|&a, &b| {
                f.vectors
                    .at(b, unit)
                    .partial_cmp(&f.vectors.at(a, unit))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order.truncate(top_k);
            let top_classes: Vec<u16> = order.iter().map(|&r| f.labels[r]).collect();
            let majority = majority_class(&top_classes);
            per_modality.push(UnitTop {
                modality: m,
                name: f.name.clone(),
                top_rows: order,
                top_classes,
                majority_class: majority,
            });
        }
        let first = per_modality[0].majority_class;
        let consistent = per_modality.iter().all(|t| t.majority_class == first);
        if consistent {
            consistent_count += 1;
        }
        units.push(UnitEntry { unit, per_modality, consistent });
    }
    Ok(UnitConsistencyReport {
        layer: layer.to_string(),
        top_k,
        units,
        consistency_rate: consistent_count as f64 / dim as f64,
    })
}

/// Extract `layer` activations on the validation split and score consistency.
pub fn unit_activation_report(
    model: &TrainedModel,
    data: &CrossModalDataset,
    layer: LayerId,
    top_k: usize,
) -> Result<UnitConsistencyReport> {
    let features = extract_feature_map(model, data, layer, Split::Val)?;
    unit_report_from_features(&features, layer.name(), top_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::ModalityFeatures;
    use crate::rng::RngState;
    use crate::tensor::Tensor;

    fn one_hot_map(classes: u16, per_class: usize, modalities: u16) -> FeatureMap {
        let mut map = FeatureMap::new();
        for m in 0..modalities {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for c in 0..classes {
                for _ in 0..per_class {
                    let mut row = vec![0.0; usize::from(classes)];
                    row[usize::from(c)] = 1.0;
                    rows.push(row);
                    labels.push(c);
                }
            }
            map.insert(
                m,
                ModalityFeatures {
                    name: format!("m{m}"),
                    vectors: Tensor::from_rows(&rows).unwrap(),
                    labels,
                },
            );
        }
        map
    }

    #[test]
    fn one_hot_class_code_is_fully_consistent() {
        let map = one_hot_map(4, 3, 3);
        let report = unit_report_from_features(&map, "fc7", 3).unwrap();
        assert_eq!(report.units.len(), 4);
        assert_eq!(report.consistency_rate, 1.0);
        for entry in &report.units {
            assert!(entry.consistent);
            for top in &entry.per_modality {
                assert!(top.top_classes.iter().all(|&c| usize::from(c) == entry.unit));
            }
        }
    }

    #[test]
    fn majority_tie_goes_to_the_smallest_class_id() {
        assert_eq!(majority_class(&[2, 0, 2, 0]), 0);
        assert_eq!(majority_class(&[3, 3, 1]), 3);
        assert_eq!(majority_class(&[5]), 5);
    }

    #[test]
    fn activation_ties_resolve_by_row_index() {
        // Two rows with identical activation on unit 0; the earlier row must
        // be selected and its class decides the majority.
        let mut map = FeatureMap::new();
        for m in 0..2u16 {
            map.insert(
                m,
                ModalityFeatures {
                    name: format!("m{m}"),
                    vectors: Tensor::from_rows(&[
                        vec![1.0, 0.0],
                        vec![1.0, 0.0],
                        vec![0.5, 1.0],
                    ])
                    .unwrap(),
                    labels: vec![1, 2, 0],
                },
            );
        }
        let report = unit_report_from_features(&map, "fc6", 1).unwrap();
        let unit0 = &report.units[0];
        for top in &unit0.per_modality {
            assert_eq!(top.top_rows, vec![0]);
            assert_eq!(top.majority_class, 1);
        }
    }

    #[test]
    fn preconditions_are_enforced() {
        let map = one_hot_map(3, 2, 2);
        assert!(unit_report_from_features(&map, "fc7", 0).is_err());
        assert!(unit_report_from_features(&map, "fc7", 7).is_err());
        let mut one = FeatureMap::new();
        one.insert(0, map[&0].clone());
        assert!(unit_report_from_features(&one, "fc7", 1).is_err());
    }

    #[test]
    fn random_features_sit_at_the_permutation_null() {
        // Independent random activations per modality: the observed rate must
        // be statistically indistinguishable from shuffling each modality's
        // per-unit majority classes against each other.
        let classes = 4u16;
        let per_class = 6usize;
        let dim = 40usize;
        let mut rng = RngState::new(91);
        let mut map = FeatureMap::new();
        for m in 0..3u16 {
            let n = usize::from(classes) * per_class;
            let mut t = Tensor::zeros(vec![n, dim]);
            for v in t.as_mut_slice() {
                *v = rng.normal(0.0, 1.0);
            }
            let labels: Vec<u16> = (0..n).map(|i| (i / per_class) as u16).collect();
            map.insert(
                m,
                ModalityFeatures {
                    name: format!("m{m}"),
                    vectors: t,
                    labels,
                },
            );
        }
        let report = unit_report_from_features(&map, "fc7", 5).unwrap();

        // Permutation oracle over the majority-class table.
        let table: Vec<Vec<u16>> = report
            .units
            .iter()
            .map(|u| u.per_modality.iter().map(|t| t.majority_class).collect())
            .collect();
        let modalities = table[0].len();
        let trials = 400;
        let mut rates = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut columns: Vec<Vec<u16>> = (0..modalities)
                .map(|m| table.iter().map(|row| row[m]).collect())
                .collect();
            for col in columns.iter_mut().skip(1) {
                rng.shuffle(col);
            }
            let agree = (0..dim)
                .filter(|&u| (1..modalities).all(|m| columns[m][u] == columns[0][u]))
                .count();
            rates.push(agree as f64 / dim as f64);
        }
        let mean = rates.iter().sum::<f64>() / trials as f64;
        let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (trials - 1) as f64;
        let spread = var.sqrt().max(1.0 / dim as f64);
        assert!(
            (report.consistency_rate - mean).abs() <= 4.0 * spread,
            "rate {} vs permutation null {mean} (spread {spread})",
            report.consistency_rate
        );
    }
}
