use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One parameter update: `value -= lr * (grad + weight_decay * value)` when
/// `decay` is set, plain `value -= lr * grad` otherwise. Biases are the usual
/// reason to clear `decay`.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
    pub decay: bool,
}

/// Applies one SGD step to every listed parameter.
///
/// Rejects non-finite gradients, naming the offending parameter, before
/// touching anything: a step either applies completely or not at all.
pub fn sgd_step(updates: &mut [ParamUpdate<'_>], lr: f64, weight_decay: f64) -> Result<()> {
    for u in updates.iter() {
        if u.value.shape() != u.grad.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient for {}", u.name),
                expected: format!("{:?}", u.value.shape()),
                got: format!("{:?}", u.grad.shape()),
            });
        }
        u.grad
            .ensure_finite(&format!("gradient for {}", u.name))?;
    }
    for u in updates.iter_mut() {
        let wd = if u.decay { weight_decay } else { 0.0 };
        let vs = u.value.as_mut_slice();
        for (v, &g) in vs.iter_mut().zip(u.grad.as_slice()) {
            *v -= lr * (g + wd * *v);
        }
    }
    Ok(())
}
