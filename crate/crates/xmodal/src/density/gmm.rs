//! Diagonal-covariance Gaussian mixtures and their EM fit.
//!
//! The density is `P(h) = sum_k w_k N(h; mean_k, diag(var_k))`. Training uses
//! the negative log density as an activation penalty, so this module exposes
//! both the value and its gradient with respect to `h`:
//!
//! `d(-log P)/dh = sum_k resp_k(h) * (h - mean_k) / var_k`
//!
//! where `resp_k` are the posterior responsibilities, always computed in log
//! space through log-sum-exp so widely separated components cannot underflow
//! to 0/0.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    weights: Vec<f64>,
    means: Tensor,    // [k, d]
    variances: Tensor, // [k, d], strictly positive
}

impl DiagonalGmm {
    pub fn from_parts(weights: Vec<f64>, means: Tensor, variances: Tensor) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.shape() != [k, means.cols()] || means.shape() != variances.shape() {
            return Err(Error::ShapeMismatch {
                context: "DiagonalGmm".into(),
                expected: format!("means/variances shaped [{k}, d]"),
                got: format!("{:?} and {:?}", means.shape(), variances.shape()),
            });
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::NonFinite("DiagonalGmm weights".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::ShapeMismatch {
                context: "DiagonalGmm weights".into(),
                expected: "sum 1".into(),
                got: format!("{total}"),
            });
        }
        if !variances.as_slice().iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::NonFinite(
                "DiagonalGmm variances (must be positive)".into(),
            ));
        }
        means.ensure_finite("DiagonalGmm means")?;
        Ok(DiagonalGmm {
            weights,
            means,
            variances,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn variances(&self) -> &Tensor {
        &self.variances
    }

    fn log_component(&self, k: usize, h: &[f64]) -> f64 {
        let mean = self.means.row(k);
        let var = self.variances.row(k);
        let mut acc = 0.0;
        for ((&x, &m), &v) in h.iter().zip(mean).zip(var) {
            let c = x - m;
            acc += LN_2PI + v.ln() + c * c / v;
        }
        -0.5 * acc
    }

    /// Per-component `ln w_k + ln N_k(h)`; zero-weight components give -inf.
    fn log_joint(&self, h: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for k in 0..self.k() {
            if self.weights[k] == 0.0 {
                out.push(f64::NEG_INFINITY);
            } else {
                out.push(self.weights[k].ln() + self.log_component(k, h));
            }
        }
    }

    pub fn log_density(&self, h: &[f64]) -> f64 {
        debug_assert_eq!(h.len(), self.dim());
        let mut lj = Vec::new();
        self.log_joint(h, &mut lj);
        log_sum_exp(&lj)
    }

    /// Negative log density, the training penalty.
    pub fn penalty(&self, h: &[f64]) -> f64 {
        -self.log_density(h)
    }

    /// Accumulates `scale * d penalty/dh` into `out`.
    #[allow(clippy::needless_range_loop)]
    pub fn penalty_grad_into(&self, h: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(h.len(), self.dim());
        debug_assert_eq!(out.len(), self.dim());
        let mut lj = Vec::new();
        self.log_joint(h, &mut lj);
        let lse = log_sum_exp(&lj);
        for k in 0..self.k() {
            if lj[k] == f64::NEG_INFINITY {
                continue;
            }
            let resp = (lj[k] - lse).exp();
            if resp == 0.0 {
                continue;
            }
            let mean = self.means.row(k);
            let var = self.variances.row(k);
            for (((o, &x), &m), &v) in out.iter_mut().zip(h).zip(mean).zip(var) {
                *o += scale * resp * (x - m) / v;
            }
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the per-sample mean log-likelihood improves by less than this.
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            tol: 1e-6,
            variance_floor: 1e-6,
        }
    }
}

/// EM result: the model plus the per-iteration mean log-likelihood trace
/// (evaluated before each M-step, so the sequence is the classic
/// non-decreasing EM objective, up to variance-floor slack).
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: DiagonalGmm,
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Fits a k-component diagonal GMM by expectation-maximization.
///
/// Means are seeded k-means++ style (squared-distance weighted sampling),
/// weights start uniform and variances start at the global per-dimension
/// variance. A component whose responsibility mass drops below 1e-8 is
/// re-seeded from a random sample with the global variance and a small
/// weight, then EM continues.
pub fn fit_gmm_em(
    samples: &Tensor,
    k: usize,
    cfg: &EmConfig,
    rng: &mut RngState,
) -> Result<GmmFit> {
    let (n, d) = (samples.rows(), samples.cols());
    if k == 0 {
        return Err(Error::InsufficientData {
            context: "fit_gmm_em: k must be at least 1".into(),
            needed: 1,
            got: 0,
        });
    }
    if n < k.max(2) {
        return Err(Error::InsufficientData {
            context: format!("fit_gmm_em with k={k}"),
            needed: k.max(2),
            got: n,
        });
    }
    samples.ensure_finite("fit_gmm_em samples")?;

    let global_var = global_variance(samples, cfg.variance_floor);
    let mut means = seed_means_kmeanspp(samples, k, rng);
    let mut variances = Tensor::zeros(vec![k, d]);
    for ki in 0..k {
        variances.row_mut(ki).copy_from_slice(&global_var);
    }
    let mut weights = vec![1.0 / k as f64; k];

    let mut resp = vec![0.0; n * k]; // [n, k]
    let mut trace = Vec::new();
    let mut converged = false;

    for _iter in 0..cfg.max_iters {
        // E-step, in log space
        let model = DiagonalGmm {
            weights: weights.clone(),
            means: means.clone(),
            variances: variances.clone(),
        };
        let mut ll_sum = 0.0;
        let mut lj = Vec::new();
        for i in 0..n {
            let h = samples.row(i);
            model.log_joint(h, &mut lj);
            let lse = log_sum_exp(&lj);
            ll_sum += lse;
            for ki in 0..k {
                resp[i * k + ki] = if lj[ki] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (lj[ki] - lse).exp()
                };
            }
        }
        let ll = ll_sum / n as f64;
        if let Some(&prev) = trace.last() {
            if ll - prev < cfg.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);

        // M-step
        for ki in 0..k {
            let mass: f64 = (0..n).map(|i| resp[i * k + ki]).sum();
            if mass < 1e-8 {
                // dead component: re-seed and keep going
                let pick = rng.index(n);
                means.row_mut(ki).copy_from_slice(samples.row(pick));
                variances.row_mut(ki).copy_from_slice(&global_var);
                weights[ki] = 1.0 / n as f64;
                continue;
            }
            weights[ki] = mass / n as f64;
            let mean_row = means.row_mut(ki);
            mean_row.fill(0.0);
            for i in 0..n {
                let r = resp[i * k + ki];
                for (m, &x) in mean_row.iter_mut().zip(samples.row(i)) {
                    *m += r * x;
                }
            }
            for m in mean_row.iter_mut() {
                *m /= mass;
            }
            let mean_copy: Vec<f64> = means.row(ki).to_vec();
            let var_row = variances.row_mut(ki);
            var_row.fill(0.0);
            for i in 0..n {
                let r = resp[i * k + ki];
                for ((v, &m), &x) in var_row.iter_mut().zip(&mean_copy).zip(samples.row(i)) {
                    let c = x - m;
                    *v += r * c * c;
                }
            }
            for v in var_row.iter_mut() {
                *v = (*v / mass).max(cfg.variance_floor);
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
    }

    let model = DiagonalGmm::from_parts(weights, means, variances)?;
    Ok(GmmFit {
        model,
        log_likelihood: trace,
        converged,
    })
}

fn global_variance(samples: &Tensor, floor: f64) -> Vec<f64> {
    let (n, d) = (samples.rows(), samples.cols());
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(samples.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(samples.row(i)) {
            let c = x - m;
            *v += c * c;
        }
    }
    for v in &mut var {
        *v = (*v * inv_n).max(floor);
    }
    var
}

/// k-means++ style seeding: first mean uniform, each further mean drawn with
/// probability proportional to its squared distance from the nearest mean
/// chosen so far. Falls back to uniform if every distance is zero.
#[allow(clippy::needless_range_loop)]
fn seed_means_kmeanspp(samples: &Tensor, k: usize, rng: &mut RngState) -> Tensor {
    let (n, d) = (samples.rows(), samples.cols());
    let mut means = Tensor::zeros(vec![k, d]);
    let first = rng.index(n);
    means.row_mut(0).copy_from_slice(samples.row(first));
    let mut d2 = vec![f64::INFINITY; n];
    for ki in 1..k {
        let prev = means.row(ki - 1).to_vec();
        let mut total = 0.0;
        for i in 0..n {
            let mut dist = 0.0;
            for (&x, &m) in samples.row(i).iter().zip(&prev) {
                let c = x - m;
                dist += c * c;
            }
            if dist < d2[i] {
                d2[i] = dist;
            }
            total += d2[i];
        }
        let pick = if total == 0.0 {
            rng.index(n)
        } else {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        means.row_mut(ki).copy_from_slice(samples.row(pick));
    }
    means
}
