use super::{Real, Tensor};
use crate::error::{contract, numeric, Result};

/// Classical momentum SGD with an L2 term folded into the gradient.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
    labels: Vec<String>,
}

impl<T: Real> SgdState<T> {
    /// Zero velocity for parameters of the given shapes.
    pub fn new<'a>(
        learning_rate: T,
        momentum: T,
        weight_decay: T,
        shapes: impl IntoIterator<Item = &'a [usize]>,
    ) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(contract("learning rate must be positive"));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(contract("momentum must lie in [0, 1)"));
        }
        if !(weight_decay >= T::zero()) {
            return Err(contract("weight decay must be nonnegative"));
        }
        let velocity: Vec<_> = shapes.into_iter().map(Tensor::zeros).collect();
        let labels = (0..velocity.len()).map(|i| format!("#{i}")).collect();
        Ok(Self { learning_rate, momentum, weight_decay, velocity, labels })
    }

    /// Names used in error messages, one per parameter.
    pub fn with_labels(mut self, labels: impl IntoIterator<Item = String>) -> Self {
        let labels: Vec<String> = labels.into_iter().collect();
        if labels.len() == self.velocity.len() {
            self.labels = labels;
        }
        self
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// One update: `v ← μ·v + g + λ·p`, `p ← p − η·v`.
///
/// All gradients are validated before any parameter is touched.
pub fn sgd_update<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut SgdState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(contract(format!(
            "sgd_update: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.velocity[i].shape() {
            return Err(contract(format!(
                "sgd_update: shape mismatch for parameter {}: {:?} / {:?} / {:?}",
                state.labels[i],
                p.shape(),
                g.shape(),
                state.velocity[i].shape()
            )));
        }
        if !g.is_finite() {
            return Err(numeric(format!("non-finite gradient for parameter {}", state.labels[i])));
        }
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}
