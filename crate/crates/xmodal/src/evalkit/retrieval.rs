//! Cross-modal retrieval: cosine ranking of one modality's items from
//! another modality's queries, scored by mean average precision and mean
//! precision at 10.
//!
//! Determinism: the set of query rows for an ordered pair (q, t) comes from
//! the fork "pair/{q}/{t}" of the protocol seed, so adding or removing other
//! pairs never shifts a pair's queries. Per-query AP computation is pure and
//! parallelized over query chunks; results are reduced in query order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, precision_at_k};
use super::FeatureMap;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::synthdata::ModalityId;
use crate::tensor::Tensor;

/// Rank depth for the precision metric.
pub const PRECISION_DEPTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalProtocol {
    /// Query repetitions per ordered (query, target) modality pair.
    pub n_queries: usize,
    /// Tap the features were extracted at; carried into the report.
    pub layer: String,
    pub seed: u64,
}

impl RetrievalProtocol {
    pub fn new(layer: &str, seed: u64) -> Self {
        RetrievalProtocol {
            n_queries: 1000,
            layer: layer.to_string(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::Config("n_queries must be >= 1".into()));
        }
        Ok(())
    }
}

/// One ordered (query, target) modality pair's scores, both in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub query: ModalityId,
    pub query_name: String,
    pub target: ModalityId,
    pub target_name: String,
    pub map: f64,
    pub pr_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub layer: String,
    /// Filled by callers that know which training run produced the features.
    pub strategy: String,
    pub pairs: Vec<PairResult>,
    /// Mean mAP over every pair sharing the query modality.
    pub row_means: BTreeMap<ModalityId, f64>,
    pub grand_mean_map: f64,
    pub grand_mean_pr: f64,
    /// Items whose feature vector had zero norm; they rank last everywhere.
    pub zero_norm_items: usize,
}

impl RetrievalReport {
    pub fn pair(&self, query: ModalityId, target: ModalityId) -> Option<&PairResult> {
        self.pairs
            .iter()
            .find(|p| p.query == query && p.target == target)
    }
}

fn normalized_rows(x: &Tensor) -> (Vec<Vec<f64>>, usize) {
    let mut rows = Vec::with_capacity(x.rows());
    let mut zero_norm = 0usize;
    for r in 0..x.rows() {
        let row = x.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_norm += 1;
            rows.push(Vec::new());
        } else {
            rows.push(row.iter().map(|v| v / norm).collect());
        }
    }
    (rows, zero_norm)
}

/// Cosine similarity given pre-normalized rows; an empty row means the
/// original had zero norm and sits below every real similarity.
fn similarity(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return -1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank target rows for one query and score them. Ties and the zero-norm
/// sentinel resolve by ascending target index, making the ranking total.
fn score_query(
    query_row: &[f64],
    query_label: u16,
    targets: &[Vec<f64>],
    target_labels: &[u16],
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let sims: Vec<f64> = targets.iter().map(|t| similarity(query_row, t)).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    let relevance: Vec<bool> = order.iter().map(|&i| target_labels[i] == query_label).collect();
    let ap = average_precision(&relevance)?;
    let pr = precision_at_k(&relevance, PRECISION_DEPTH)?;
    Ok((ap, pr))
}

/// Scoring threads: the `XMODAL_THREADS` env var when set to a positive
/// number, otherwise whatever the machine offers. Thread count never affects
/// results, only wall time; the reduction order is fixed.
fn worker_count() -> usize {
    if let Ok(v) = std::env::var("XMODAL_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Mean of per-query scores for one ordered pair, parallelized over queries.
fn eval_pair(
    queries: &[usize],
    query_rows: &[Vec<f64>],
    query_labels: &[u16],
    target_rows: &[Vec<f64>],
    target_labels: &[u16],
) -> Result<(f64, f64)> {
    let threads = worker_count().min(queries.len());
    let chunk = queries.len().div_ceil(threads);
    let mut scores: Vec<Result<(f64, f64)>> = Vec::with_capacity(queries.len());
    std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|qs| {
                s.spawn(move || {
                    qs.iter()
                        .map(|&q| {
                            score_query(&query_rows[q], query_labels[q], target_rows, target_labels)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            scores.extend(h.join().expect("scoring thread panicked"));
        }
    });
    let mut map = 0.0;
    let mut pr = 0.0;
    for s in scores {
        let (ap, p) = s?;
        map += ap;
        pr += p;
    }
    let n = queries.len() as f64;
    Ok((map / n, pr / n))
}

/// Evaluate every ordered modality pair in `features`.
pub fn retrieval_eval(features: &FeatureMap, protocol: &RetrievalProtocol) -> Result<RetrievalReport> {
    protocol.validate()?;
    if features.len() < 2 {
        return Err(Error::Config(format!(
            "retrieval needs at least 2 modalities, got {}",
            features.len()
        )));
    }
    for (&m, f) in features {
        if f.vectors.rows() != f.labels.len() {
            return Err(Error::ShapeMismatch {
                context: format!("features of modality {m}"),
                expected: format!("{} labels", f.vectors.rows()),
                got: format!("{}", f.labels.len()),
            });
        }
        if f.vectors.rows() < PRECISION_DEPTH {
            return Err(Error::InsufficientData {
                context: format!("retrieval targets in modality '{}'", f.name),
                needed: PRECISION_DEPTH,
                got: f.vectors.rows(),
            });
        }
    }
    // Every query class must exist in every target modality or AP is undefined.
    let class_sets: BTreeMap<ModalityId, BTreeSet<u16>> = features
        .iter()
        .map(|(&m, f)| (m, f.labels.iter().copied().collect()))
        .collect();
    for (&qm, qs) in &class_sets {
        for (&tm, ts) in &class_sets {
            if qm == tm {
                continue;
            }
            if let Some(&missing) = qs.difference(ts).next() {
                return Err(Error::MissingClass {
                    class: missing,
                    context: format!(
                        "target modality '{}' lacks a class queried from '{}'",
                        features[&tm].name, features[&qm].name
                    ),
                });
            }
        }
    }

    let normalized: BTreeMap<ModalityId, (Vec<Vec<f64>>, usize)> = features
        .iter()
        .map(|(&m, f)| (m, normalized_rows(&f.vectors)))
        .collect();
    let zero_norm_items = normalized.values().map(|(_, z)| z).sum();

    let rng = RngState::new(protocol.seed);
    let mut pairs = Vec::new();
    for (&qm, qf) in features {
        for (&tm, tf) in features {
            if qm == tm {
                continue;
            }
            let mut prng = rng.fork(&format!("pair/{qm}/{tm}"));
            let queries: Vec<usize> = (0..protocol.n_queries)
                .map(|_| prng.index(qf.labels.len()))
                .collect();
            let (map, pr_at_10) = eval_pair(
                &queries,
                &normalized[&qm].0,
                &qf.labels,
                &normalized[&tm].0,
                &tf.labels,
            )?;
            pairs.push(PairResult {
                query: qm,
                query_name: qf.name.clone(),
                target: tm,
                target_name: tf.name.clone(),
                map,
                pr_at_10,
            });
        }
    }

    let mut row_means = BTreeMap::new();
    for &qm in features.keys() {
        let row: Vec<f64> = pairs.iter().filter(|p| p.query == qm).map(|p| p.map).collect();
        row_means.insert(qm, row.iter().sum::<f64>() / row.len() as f64);
    }
    let grand_mean_map = pairs.iter().map(|p| p.map).sum::<f64>() / pairs.len() as f64;
    let grand_mean_pr = pairs.iter().map(|p| p.pr_at_10).sum::<f64>() / pairs.len() as f64;
    Ok(RetrievalReport {
        layer: protocol.layer.clone(),
        strategy: String::new(),
        pairs,
        row_means,
        grand_mean_map,
        grand_mean_pr,
        zero_norm_items,
    })
}

/// Monte-Carlo estimate of chance-level mAP for a target set with the given
/// per-class counts: queries drawn with class probability proportional to
/// count, targets ranked by a fresh random permutation each time. Returns
/// the mean and standard deviation over `n_trials` independent estimates,
/// each itself a mean over `n_queries` permutations.
pub fn chance_map_estimate(
    class_counts: &[usize],
    n_queries: usize,
    n_trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if class_counts.is_empty() || class_counts.contains(&0) {
        return Err(Error::Config("class counts must all be positive".into()));
    }
    if n_queries == 0 || n_trials == 0 {
        return Err(Error::Config("n_queries and n_trials must be >= 1".into()));
    }
    let labels: Vec<u16> = class_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u16, n))
        .collect();
    let rng = RngState::new(seed);
    let mut trial_means = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let mut trng = rng.fork(&format!("trial/{t}"));
        let mut sum = 0.0;
        for _ in 0..n_queries {
            let query_label = labels[trng.index(labels.len())];
            let mut order: Vec<usize> = (0..labels.len()).collect();
            trng.shuffle(&mut order);
            let relevance: Vec<bool> = order.iter().map(|&i| labels[i] == query_label).collect();
            sum += average_precision(&relevance)?;
        }
        trial_means.push(sum / n_queries as f64);
    }
    let mean = trial_means.iter().sum::<f64>() / n_trials as f64;
    let var = trial_means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
        / (n_trials as f64 - 1.0).max(1.0);
    Ok((mean, var.sqrt()))
}
