use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment estimates for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |p: &ParamStore<T>| p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, m: zeros(params), v: zeros(params), step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "adam: gradient shape {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    let cfg = state.config;
    let mut scale = 1.0;
    if let Some(max) = cfg.clip_norm {
        let norm: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x.f() * x.f()).sum::<f64>().sqrt();
        if norm > max {
            scale = max / norm;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].f() * scale;
            let mj = cfg.beta1 * m[j].f() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].f() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = T::c(mj);
            v[j] = T::c(vj);
            let update = cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *w = T::c(w.f() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_f64(&[1], &[x]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_store(3.0);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st).unwrap();
        }
        assert_eq!(p.tensors()[0].data()[0], 3.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g|+ε).
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p, AdamConfig { clip_norm: None, ..AdamConfig::with_lr(0.1) });
        adam_step(&mut p, &[Tensor::from_f64(&[1], &[1.0]).unwrap()], &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
