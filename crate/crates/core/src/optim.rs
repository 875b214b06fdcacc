//! SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum `μ`.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Sgd, lr: 1e-5, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 10.0 }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, momentum, ..Self::default() }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum and beta coefficients must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("eps must be positive and clip_norm non-negative".into()));
        }
        Ok(())
    }
}

/// `v <- μ v - η g; p <- p + v`.
pub fn sgd_step<S: Real>(p: &mut [S], g: &[S], velocity: &mut [S], lr: f64, momentum: f64) {
    let (lr, mu) = (S::lit(lr), S::lit(momentum));
    for ((p, &g), v) in p.iter_mut().zip(g).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * g;
        *p += *v;
    }
}

/// Bias-corrected Adam update for step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<S: Real>(p: &mut [S], g: &[S], m: &mut [S], v: &mut [S], lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64) {
    let (b1, b2) = (S::lit(beta1), S::lit(beta2));
    let c1 = S::lit(1.0 - beta1.powf(t as f64));
    let c2 = S::lit(1.0 - beta2.powf(t as f64));
    let (lr, eps) = (S::lit(lr), S::lit(eps));
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (S::one() - b1) * g;
        *v = b2 * *v + (S::one() - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Optimizer hyperparameters, step counter and moment buffers, one buffer
/// per parameter tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S: Real = f32> {
    pub config: OptimizerConfig,
    pub step: u64,
    /// SGD velocity or Adam first moment.
    pub first: Vec<Tensor<S>>,
    /// Adam second moment; empty for SGD.
    pub second: Vec<Tensor<S>>,
}

impl<S: Real> OptimizerState<S> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        let second = if config.kind == OptimizerKind::Adam { zeros() } else { Vec::new() };
        Ok(Self { config, step: 0, first: zeros(), second })
    }

    /// Checks gradients, clips their global norm and updates `params`.
    /// Returns the gradient norm before clipping.
    pub fn apply(&mut self, params: &mut ParamStore<S>, grads: &mut [Tensor<S>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::dim(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let mut sq = 0.0;
        for (id, g) in params.ids().zip(grads.iter()) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::dim(format!("gradient shape mismatch for `{}`", params.name(id))));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
            sq += g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
        let norm = sq.sqrt();
        let c = &self.config;
        if c.clip_norm > 0.0 && norm > c.clip_norm {
            let f = S::lit(c.clip_norm / norm);
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
        self.step += 1;
        for (i, id) in params.ids().enumerate() {
            let p = params.get_mut(id).data_mut();
            let g = grads[i].data();
            match c.kind {
                OptimizerKind::Sgd => sgd_step(p, g, self.first[i].data_mut(), c.lr, c.momentum),
                OptimizerKind::Adam => {
                    let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
                    adam_step(p, g, m, v, c.lr, c.beta1, c.beta2, c.eps, self.step)
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_sgd_definition() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let (mut p, mut m, mut v) = ([0.3f64], [0.0], [0.0]);
        adam_step(&mut p, &[0.0], &mut m, &mut v, 0.1, 0.9, 0.999, 1e-8, 1);
        assert_eq!(p[0], 0.3);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2]));
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.9), &store).unwrap();
        let mut g = vec![Tensor::new(&[2], vec![1.0, f32::NAN]).unwrap()];
        match opt.apply(&mut store, &mut g) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[1]));
        let cfg = OptimizerConfig { clip_norm: 10.0, ..OptimizerConfig::sgd(1.0, 0.0) };
        let mut opt = OptimizerState::new(cfg, &store).unwrap();
        let norm = opt.apply(&mut store, &mut [Tensor::full(&[1], 1000.0)]).unwrap();
        assert_eq!(norm, 1000.0);
        assert!((store.get(id).data()[0] + 10.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_rate() {
        assert!(OptimizerConfig::sgd(0.0, 0.9).validate().is_err());
    }
}
