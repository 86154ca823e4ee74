//! Ranking metrics over boolean relevance lists. Score ties are resolved
//! before these run; the lists are already in final rank order.

use crate::error::{Error, Result};

/// Average precision: the mean, over relevant positions, of the precision
/// at that position.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let relevant = relevance.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return Err(Error::Config(
            "average precision needs at least one relevant item".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant as f64)
}

/// Fraction of relevant items among the first `k`.
pub fn precision_at_k(relevance: &[bool], k: usize) -> Result<f64> {
    if k == 0 || k > relevance.len() {
        return Err(Error::Config(format!(
            "precision@k needs 1 <= k <= {} items, got k={k}",
            relevance.len()
        )));
    }
    let hits = relevance[..k].iter().filter(|&&r| r).count();
    Ok(hits as f64 / k as f64)
}
