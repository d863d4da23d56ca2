//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let state = Self {
            first_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps,
        };
        state.validate()?;
        Ok(state)
    }

    /// Defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn with_lr(param_sizes: &[usize], lr: f64) -> Result<Self> {
        Self::new(param_sizes, lr, 0.9, 0.999, 1e-8)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "Adam needs lr > 0 and eps > 0, got lr={} eps={}",
                self.lr, self.eps
            )));
        }
        if self.first_moment.len() != self.second_moment.len()
            || self
                .first_moment
                .iter()
                .zip(&self.second_moment)
                .any(|(m, v)| m.len() != v.len())
        {
            return Err(Error::Shape("Adam moment arrays disagree".into()));
        }
        Ok(())
    }
}

/// One Adam update of `params` in place.
///
/// `lr` overrides the stored learning rate for this step (warmup schedules);
/// pass `None` to use `state.lr`. Gradients are checked for NaN before any
/// parameter is touched.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[&str],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: Option<f64>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[k].len() {
            return Err(Error::Shape(format!(
                "parameter `{}` has {} elements, gradient {}, moments {}",
                names.get(k).copied().unwrap_or("?"),
                p.len(),
                g.len(),
                state.first_moment[k].len()
            )));
        }
        if let Some(index) = g.iter().position(|v| v.is_nan()) {
            return Err(Error::PoisonedGradient {
                name: names.get(k).copied().unwrap_or("?").to_string(),
                index,
            });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let lr = lr.unwrap_or(state.lr);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[k][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
