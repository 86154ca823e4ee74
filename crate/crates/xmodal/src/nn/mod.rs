//! Plain fully-connected network machinery.
//!
//! Networks here are stacks of [`LinearLayer`]s with an optional rectifier
//! after each layer. A forward pass records one "tap" per layer: the
//! post-activation output. Taps are what the rest of the crate hangs onto,
//! both for feature extraction and for injecting extra gradient terms
//! (penalties on intermediate activations) during the backward pass.
//!
//! The backward pass takes the recorded taps plus an optional injected
//! gradient per tap and produces parameter gradients and the input gradient.
//! Rectifier masks are recovered from the taps themselves: a post-activation
//! value of exactly zero gets derivative zero.

mod gradcheck;
mod loss;
mod sgd;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use loss::softmax_cross_entropy;
pub use sgd::{sgd_step, ParamUpdate};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// One affine layer. `weight` is `[out_dim, in_dim]` row-major, `bias` is `[out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Weights drawn i.i.d. from N(0, std^2) in row-major order, biases zero.
    pub fn init_gaussian(in_dim: usize, out_dim: usize, std: f64, rng: &mut RngState) -> Self {
        let mut layer = LinearLayer::zeros(in_dim, out_dim);
        for w in layer.weight.as_mut_slice() {
            *w = rng.normal(0.0, std);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Multi-layer perceptron: rectifiers between layers, identity after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    rectify: Vec<bool>,
}

impl Mlp {
    pub fn new(layers: Vec<LinearLayer>) -> Result<Self> {
        let n = layers.len();
        let mut rectify = vec![true; n];
        if let Some(last) = rectify.last_mut() {
            *last = false;
        }
        Mlp::with_rectifiers(layers, rectify)
    }

    /// Explicit per-layer rectifier flags, for stacks that deviate from the
    /// between-layers default.
    pub fn with_rectifiers(layers: Vec<LinearLayer>, rectify: Vec<bool>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "Mlp::new".into(),
                expected: "at least one layer".into(),
                got: "0".into(),
            });
        }
        if layers.len() != rectify.len() {
            return Err(Error::ShapeMismatch {
                context: "Mlp::new".into(),
                expected: format!("{} rectifier flags", layers.len()),
                got: format!("{}", rectify.len()),
            });
        }
        for i in 1..layers.len() {
            if layers[i].in_dim() != layers[i - 1].out_dim() {
                return Err(Error::ShapeMismatch {
                    context: format!("Mlp::new layer {i}"),
                    expected: format!("in_dim {}", layers[i - 1].out_dim()),
                    got: format!("in_dim {}", layers[i].in_dim()),
                });
            }
        }
        Ok(Mlp { layers, rectify })
    }

    /// Chain `dims[0] -> dims[1] -> ...` with Gaussian init.
    pub fn init_gaussian(dims: &[usize], std: f64, rng: &mut RngState) -> Result<Self> {
        assert!(dims.len() >= 2, "need input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init_gaussian(w[0], w[1], std, rng))
            .collect();
        Mlp::new(layers)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &LinearLayer {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LinearLayer {
        &mut self.layers[i]
    }

    pub fn layers_mut(&mut self) -> std::slice::IterMut<'_, LinearLayer> {
        self.layers.iter_mut()
    }

    pub fn rectify(&self) -> &[bool] {
        &self.rectify
    }

    pub fn layer_refs(&self) -> Vec<&LinearLayer> {
        self.layers.iter().collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        forward_stack(&self.layer_refs(), &self.rectify, input)
    }
}

/// Gradients for one layer, same shapes as the layer itself.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Runs `input [batch, in]` through the stack, returning the post-activation
/// output of every layer. Dimension mismatches name the offending layer.
pub fn forward_stack(
    layers: &[&LinearLayer],
    rectify: &[bool],
    input: &Tensor,
) -> Result<Vec<Tensor>> {
    assert_eq!(layers.len(), rectify.len());
    if input.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "forward input".into(),
            expected: "rank-2 [batch, features]".into(),
            got: format!("rank-{}", input.shape().len()),
        });
    }
    let mut taps: Vec<Tensor> = Vec::with_capacity(layers.len());
    for (i, (layer, &rect)) in layers.iter().zip(rectify).enumerate() {
        let x = if i == 0 { input } else { &taps[i - 1] };
        if x.cols() != layer.in_dim() {
            return Err(Error::ShapeMismatch {
                context: format!("layer {i}"),
                expected: format!("{} input features", layer.in_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let mut pre = x.matmul_nt(&layer.weight);
        let bias = layer.bias.as_slice();
        for r in 0..pre.rows() {
            let row = pre.row_mut(r);
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
                if rect && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        taps.push(pre);
    }
    Ok(taps)
}

/// Backpropagates `output_grad` (dLoss/d last tap) through the stack.
///
/// `injected[j]`, when present, is an extra dLoss/d(tap j) term added before
/// layer j's rectifier mask is applied; this is how activation penalties
/// enter the chain without the stack knowing anything about them.
pub fn backward_stack(
    layers: &[&LinearLayer],
    rectify: &[bool],
    input: &Tensor,
    taps: &[Tensor],
    output_grad: &Tensor,
    injected: &[Option<&Tensor>],
) -> Result<(Vec<LayerGrads>, Tensor)> {
    let n = layers.len();
    assert_eq!(taps.len(), n);
    assert_eq!(injected.len(), n, "one injection slot per layer tap");
    if output_grad.shape() != taps[n - 1].shape() {
        return Err(Error::ShapeMismatch {
            context: "output_grad".into(),
            expected: format!("{:?}", taps[n - 1].shape()),
            got: format!("{:?}", output_grad.shape()),
        });
    }

    let mut grads: Vec<Option<LayerGrads>> = (0..n).map(|_| None).collect();
    let mut d = output_grad.clone();
    for j in (0..n).rev() {
        if let Some(inj) = injected[j] {
            if inj.shape() != taps[j].shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("injected gradient at tap {j}"),
                    expected: format!("{:?}", taps[j].shape()),
                    got: format!("{:?}", inj.shape()),
                });
            }
            d.add_assign(inj);
        }
        if rectify[j] {
            // taps are post-rectifier: zero marks a clamped unit
            let mask = &taps[j];
            let dd = d.as_mut_slice();
            for (v, &t) in dd.iter_mut().zip(mask.as_slice()) {
                if t <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        let below = if j == 0 { input } else { &taps[j - 1] };
        let weight_grad = d.matmul_tn(below);
        let mut bias_grad = Tensor::zeros(vec![layers[j].out_dim()]);
        {
            let bg = bias_grad.as_mut_slice();
            for r in 0..d.rows() {
                for (b, &v) in bg.iter_mut().zip(d.row(r)) {
                    *b += v;
                }
            }
        }
        grads[j] = Some(LayerGrads {
            weight: weight_grad,
            bias: bias_grad,
        });
        d = d.matmul(&layers[j].weight);
    }
    let grads = grads.into_iter().map(|g| g.unwrap()).collect();
    Ok((grads, d))
}

/// Smallest |pre-activation| over all rectified layers for `input`.
///
/// Finite-difference checks are only meaningful away from rectifier kinks;
/// callers use this to re-draw inputs that land too close to one.
pub fn min_abs_preactivation(
    layers: &[&LinearLayer],
    rectify: &[bool],
    input: &Tensor,
) -> Result<f64> {
    let mut min_abs = f64::INFINITY;
    let mut x = input.clone();
    for (i, (layer, &rect)) in layers.iter().zip(rectify).enumerate() {
        if x.cols() != layer.in_dim() {
            return Err(Error::ShapeMismatch {
                context: format!("layer {i}"),
                expected: format!("{} input features", layer.in_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let mut pre = x.matmul_nt(&layer.weight);
        let bias = layer.bias.as_slice();
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        if rect {
            for &v in pre.as_slice() {
                min_abs = min_abs.min(v.abs());
            }
            for v in pre.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        x = pre;
    }
    Ok(min_abs)
}
