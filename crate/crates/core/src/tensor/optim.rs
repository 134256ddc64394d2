use super::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments for each parameter tensor plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn for_params(params: &[Tensor<F>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub state: AdamState<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        Self { config, state: AdamState::for_params(params) }
    }

    /// Applies one update at learning rate `lr` (the schedule owns the rate;
    /// `config.lr` is only the default).
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(dim_err("adam: parameter/gradient/state count mismatch"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.state.m[i].shape() {
                return Err(dim_err(format!("adam: shape mismatch on parameter {i}")));
            }
            if !g.all_finite() {
                return Err(Error::Diverged {
                    step: self.state.t + 1,
                    reason: format!("non-finite gradient for parameter {i}"),
                });
            }
        }
        if lr <= 0.0 && self.config.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.state.t += 1;
        let c = &self.config;
        let t = self.state.t as i32;
        let bc1 = F::c(1.0 - c.beta1.powi(t));
        let bc2 = F::c(1.0 - c.beta2.powi(t));
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let (one_b1, one_b2) = (F::c(1.0 - c.beta1), F::c(1.0 - c.beta2));
        let (lr_f, eps, wd) = (F::c(lr), F::c(c.eps), F::c(c.weight_decay));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + one_b1 * gj;
                vd[j] = b2 * vd[j] + one_b2 * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                if wd > F::zero() {
                    pd[j] -= lr_f * wd * pd[j];
                }
                pd[j] -= lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
