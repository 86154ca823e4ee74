use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagonal Gaussian over activation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn from_parts(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() || mean.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "DiagonalGaussian".into(),
                expected: format!("matching non-empty mean/variance, mean has {}", mean.len()),
                got: format!("variance has {}", variance.len()),
            });
        }
        if !mean.iter().all(|v| v.is_finite())
            || !variance.iter().all(|v| v.is_finite() && *v > 0.0)
        {
            return Err(Error::NonFinite(
                "DiagonalGaussian parameters (variances must be positive)".into(),
            ));
        }
        Ok(DiagonalGaussian { mean, variance })
    }

    /// Maximum-likelihood fit: sample mean and population variance (divide by
    /// N), each variance clamped up to `variance_floor`.
    pub fn fit(samples: &Tensor, variance_floor: f64) -> Result<Self> {
        let (n, d) = (samples.rows(), samples.cols());
        if n < 2 {
            return Err(Error::InsufficientData {
                context: "DiagonalGaussian::fit".into(),
                needed: 2,
                got: n,
            });
        }
        samples.ensure_finite("DiagonalGaussian::fit samples")?;
        let inv_n = 1.0 / n as f64;
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(samples.row(r)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m *= inv_n;
        }
        let mut variance = vec![0.0; d];
        for r in 0..n {
            for ((v, &m), &x) in variance.iter_mut().zip(&mean).zip(samples.row(r)) {
                let c = x - m;
                *v += c * c;
            }
        }
        for v in &mut variance {
            *v = (*v * inv_n).max(variance_floor);
        }
        DiagonalGaussian::from_parts(mean, variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// Quadratic negative-log-density with the normalizing constant dropped:
    /// `0.5 * sum_d (h_d - mean_d)^2 / variance_d`. The constant does not
    /// affect gradients, which is all training consumes.
    pub fn penalty(&self, h: &[f64]) -> f64 {
        debug_assert_eq!(h.len(), self.dim());
        let mut acc = 0.0;
        for ((&x, &m), &v) in h.iter().zip(&self.mean).zip(&self.variance) {
            let c = x - m;
            acc += c * c / v;
        }
        0.5 * acc
    }

    /// d penalty / dh = (h - mean) / variance, accumulated into `out` scaled
    /// by `scale`.
    pub fn penalty_grad_into(&self, h: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(h.len(), self.dim());
        debug_assert_eq!(out.len(), self.dim());
        for (((o, &x), &m), &v) in out.iter_mut().zip(h).zip(&self.mean).zip(&self.variance) {
            *o += scale * (x - m) / v;
        }
    }
}
