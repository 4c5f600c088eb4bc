use crate::error::{param, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

use super::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// Moment estimates mirroring a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Mat<T>> = params.values().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        AdamState { config, step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, grads: &[Mat<T>], state: &mut AdamState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return param(format!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for ((p, g), m) in params.values().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return param(format!("gradient shape {:?} does not match parameter {:?}", g.shape(), p.shape()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let bc1 = T::lit(1.0 - c.beta1.powf(t));
    let bc2 = T::lit(1.0 - c.beta2.powf(t));
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    for (((p, g), m), v) in params.values_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + one_b1 * gi;
            vd[i] = b2 * vd[i] + one_b2 * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the norm before
/// clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Mat<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
