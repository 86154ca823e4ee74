//! The training objective: mean cross-entropy plus per-layer activation
//! penalties, each weighted by its lambda and averaged over the batch.
//!
//! Penalty gradients reach the parameters by injection at the taps, so the
//! backward pass stays a single sweep. A lambda of exactly zero skips its
//! layer entirely; the all-zero case therefore runs the identical code path
//! as the unregularized objective, which is what makes the strategy
//! reduction identities bit-exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CrossModalNet, NetGrads};
use crate::density::{LayerDensitySet, LayerId};
use crate::error::{Error, Result};
use crate::nn::softmax_cross_entropy;
use crate::synthdata::ModalityId;
use crate::tensor::Tensor;

/// Loss components of one batch. `total = ce + sum(reg values)`; each reg
/// value is lambda times the batch-mean penalty of its layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: BTreeMap<String, f64>,
    pub total: f64,
}

pub fn regularized_objective(
    net: &CrossModalNet,
    modality: ModalityId,
    input: &Tensor,
    labels: &[u16],
    densities: Option<&LayerDensitySet>,
    lambdas: &BTreeMap<LayerId, f64>,
) -> Result<(LossBreakdown, NetGrads)> {
    let trace = net.forward(modality, input)?;
    let (ce, ce_grad) = softmax_cross_entropy(trace.logits(), labels)?;

    let batch = input.rows() as f64;
    let mut reg = BTreeMap::new();
    let mut injected: BTreeMap<LayerId, Tensor> = BTreeMap::new();
    let mut total = ce;
    for (&layer, &lambda) in lambdas {
        if lambda == 0.0 {
            continue;
        }
        if !layer.is_regularizable() {
            return Err(Error::Config(format!(
                "layer '{layer}' cannot carry an activation penalty"
            )));
        }
        let model = densities
            .and_then(|d| d.get(layer))
            .ok_or_else(|| Error::MissingDensity(layer.name().into()))?;
        let taps = trace.tap(layer);
        if taps.cols() != model.dim() {
            return Err(Error::ShapeMismatch {
                context: format!("density for '{layer}'"),
                expected: format!("dim {}", taps.cols()),
                got: format!("dim {}", model.dim()),
            });
        }
        let mut grad = Tensor::zeros(taps.shape().to_vec());
        let mut penalty_sum = 0.0;
        for r in 0..taps.rows() {
            let h = taps.row(r);
            penalty_sum += model.penalty(h);
            model.penalty_grad_into(h, lambda / batch, grad.row_mut(r));
        }
        let term = lambda * penalty_sum / batch;
        if !term.is_finite() {
            return Err(Error::NonFinite(format!("penalty at '{layer}'")));
        }
        total += term;
        reg.insert(layer.name().to_string(), term);
        injected.insert(layer, grad);
    }

    let grads = net.backward(modality, input, &trace, &ce_grad, &injected)?;
    Ok((LossBreakdown { ce, reg, total }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossmodal::ArchConfig;
    use crate::density::{fit_gmm_em, DensityModel, DiagonalGaussian, EmConfig};
    use crate::nn::finite_diff_check;
    use crate::rng::RngState;

    fn tiny_net() -> CrossModalNet {
        let arch = ArchConfig {
            shared_dim: 5,
            hidden_dim: 6,
            classes: 3,
            encoder_widths: vec![7],
            init_std: 0.3,
        };
        let dims: BTreeMap<ModalityId, usize> = [(0u16, 4usize)].into();
        CrossModalNet::init_gaussian(&arch, &dims, &RngState::new(7)).unwrap()
    }

    fn random_batch(dim: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        let mut t = Tensor::zeros(vec![n, dim]);
        for v in t.as_mut_slice() {
            *v = rng.normal(0.0, 1.0);
        }
        t
    }

    fn no_lambdas() -> BTreeMap<LayerId, f64> {
        let mut l = BTreeMap::new();
        for id in LayerId::REGULARIZABLE {
            l.insert(id, 0.0);
        }
        l
    }

    /// GMM densities fitted to the net's own activations on random data.
    fn fitted_densities(net: &CrossModalNet, seed: u64) -> LayerDensitySet {
        let x = random_batch(4, 60, seed);
        let trace = net.forward(0, &x).unwrap();
        let mut set = LayerDensitySet::new();
        for id in LayerId::REGULARIZABLE {
            let mut rng = RngState::new(seed ^ 0x5eed).fork(id.name());
            let fit = fit_gmm_em(trace.tap(id), 2, &EmConfig::default(), &mut rng).unwrap();
            set.insert(id, DensityModel::Gmm(fit.model));
        }
        set
    }

    #[test]
    fn zero_lambda_reduces_to_plain_cross_entropy_exactly() {
        let net = tiny_net();
        let x = random_batch(4, 8, 1);
        let labels = vec![0u16, 1, 2, 0, 1, 2, 0, 1];
        let densities = fitted_densities(&net, 5);

        let (breakdown, grads) =
            regularized_objective(&net, 0, &x, &labels, Some(&densities), &no_lambdas()).unwrap();
        let trace = net.forward(0, &x).unwrap();
        let (ce, ce_grad) = softmax_cross_entropy(trace.logits(), &labels).unwrap();
        let plain = net.backward(0, &x, &trace, &ce_grad, &BTreeMap::new()).unwrap();

        assert_eq!(breakdown.total.to_bits(), ce.to_bits());
        assert!(breakdown.reg.is_empty());
        let a = net.flat_grads(&grads);
        let b = net.flat_grads(&plain);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn penalty_vanishes_at_the_density_mean() {
        let net = tiny_net();
        let x = random_batch(4, 1, 2);
        let labels = vec![1u16];
        // Gaussians centered exactly on this batch's own taps.
        let trace = net.forward(0, &x).unwrap();
        let mut set = LayerDensitySet::new();
        for id in LayerId::REGULARIZABLE {
            let mean = trace.tap(id).row(0).to_vec();
            let variance = vec![1.0; mean.len()];
            set.insert(
                id,
                DensityModel::Gaussian(DiagonalGaussian::from_parts(mean, variance).unwrap()),
            );
        }
        let mut lambdas = no_lambdas();
        for id in LayerId::REGULARIZABLE {
            lambdas.insert(id, 0.7);
        }
        let (breakdown, _) =
            regularized_objective(&net, 0, &x, &labels, Some(&set), &lambdas).unwrap();
        for term in breakdown.reg.values() {
            assert!(term.abs() < 1e-12, "reg term {term}");
        }
        assert!((breakdown.total - breakdown.ce).abs() < 1e-12);
    }

    #[test]
    fn missing_density_with_live_lambda_is_an_error() {
        let net = tiny_net();
        let x = random_batch(4, 2, 3);
        let labels = vec![0u16, 1];
        let mut lambdas = no_lambdas();
        lambdas.insert(LayerId::Fc7, 0.5);
        match regularized_objective(&net, 0, &x, &labels, None, &lambdas) {
            Err(Error::MissingDensity(layer)) => assert_eq!(layer, "fc7"),
            other => panic!("expected MissingDensity, got {other:?}"),
        }
    }

    #[test]
    fn breakdown_components_add_up() {
        let net = tiny_net();
        let x = random_batch(4, 8, 4);
        let labels = vec![0u16, 1, 2, 0, 1, 2, 0, 1];
        let densities = fitted_densities(&net, 6);
        let mut lambdas = no_lambdas();
        lambdas.insert(LayerId::SharedIn, 0.3);
        lambdas.insert(LayerId::Fc6, 0.1);
        lambdas.insert(LayerId::Fc7, 0.2);
        let (b, _) =
            regularized_objective(&net, 0, &x, &labels, Some(&densities), &lambdas).unwrap();
        assert_eq!(b.reg.len(), 3);
        let sum: f64 = b.ce + b.reg.values().sum::<f64>();
        assert!((b.total - sum).abs() < 1e-9, "total {} vs parts {sum}", b.total);
        // A mixture penalty is a negative log density, so its sign is free;
        // it just has to be finite and genuinely present.
        assert!(b.reg.values().all(|v| v.is_finite() && *v != 0.0));
    }

    #[test]
    fn full_regularized_gradient_matches_finite_differences() {
        let net = tiny_net();
        let x = random_batch(4, 6, 5);
        let labels = vec![0u16, 1, 2, 0, 1, 2];
        let densities = fitted_densities(&net, 7);
        let mut lambdas = no_lambdas();
        lambdas.insert(LayerId::SharedIn, 0.3);
        lambdas.insert(LayerId::Fc6, 0.1);
        lambdas.insert(LayerId::Fc7, 0.2);

        let (_, grads) =
            regularized_objective(&net, 0, &x, &labels, Some(&densities), &lambdas).unwrap();
        let analytic = net.flat_grads(&grads);
        let params = net.flat_params();

        let mut scratch = net.clone();
        let loss = |p: &[f64]| {
            scratch.load_flat_params(p).unwrap();
            regularized_objective(&scratch, 0, &x, &labels, Some(&densities), &lambdas)
                .unwrap()
                .0
                .total
        };
        let mut rng = RngState::new(11);
        let report = finite_diff_check(loss, &params, &analytic, 1e-6, 200, &mut rng);
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }
}
