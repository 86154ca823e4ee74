use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss and dLoss/dlogits, shaped like `logits`. Stable for
/// extreme logits via the max-shift trick. The gradient already carries the
/// 1/batch factor, so it can be fed straight into the backward pass.
#[allow(clippy::needless_range_loop)]
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u16]) -> Result<(f64, Tensor)> {
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy".into(),
            expected: format!("{batch} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let mut grad = Tensor::zeros(vec![batch, classes]);
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for r in 0..batch {
        let label = labels[r] as usize;
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label: labels[r],
                classes,
            });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_norm = max + sum.ln();
        loss += (log_norm - row[label]) * inv_batch;
        let grow = grad.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            let p = (v - log_norm).exp();
            grow[c] = (p - if c == label { 1.0 } else { 0.0 }) * inv_batch;
        }
    }
    Ok((loss, grad))
}
