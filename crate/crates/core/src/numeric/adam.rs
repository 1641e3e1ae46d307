use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(numel: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `param` from its accumulated gradient. The caller
/// clears the gradient afterwards.
pub fn adam_step(param: &Tensor, state: &mut AdamState) -> Result<()> {
    let grad = param.grad_ref();
    let grad = grad
        .as_ref()
        .ok_or_else(|| Error::Contract("adam_step on a parameter without a gradient".into()))?;
    if state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::shape("adam_step", param.shape(), &[state.m.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let (m, v) = (&mut state.m, &mut state.v);
    param.update_data(|p| {
        for i in 0..p.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    Ok(())
}

/// Adam over an ordered parameter list.
pub struct Adam {
    params: Vec<Tensor>,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Self {
        let states = params.iter().map(|p| AdamState::new(p.numel(), lr)).collect();
        Adam { params, states }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.states.iter_mut().for_each(|s| s.lr = lr);
    }

    /// Updates every parameter that received a gradient, then clears all
    /// gradients.
    pub fn step(&mut self) -> Result<()> {
        for (p, s) in self.params.iter().zip(&mut self.states) {
            if p.grad_ref().is_some() {
                adam_step(p, s)?;
            }
        }
        self.zero_grad();
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }
}
