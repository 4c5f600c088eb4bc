//! DDPM machinery with an x0-predicting denoiser.
//!
//! Timesteps are 1-based; `alpha_bar(0) == 1` so that `t = 0` is the clean sample.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{param, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainkit::{randn, Rng};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
/// With 100 steps an end value of 0.05 leaves ᾱ_T near 0.08; 0.1 brings it under 0.01.
pub const DEFAULT_BETA_END: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    /// Index 0 holds the `t = 0` convention value 1.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        NoiseSchedule::linear(c.steps, c.beta_start, c.beta_end)
    }

    /// `steps` betas spaced linearly from `start` to `end` inclusive.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return param("schedule needs at least one step");
        }
        let beta = if steps == 1 {
            vec![start]
        } else {
            (0..steps).map(|i| start + (end - start) * i as f64 / (steps - 1) as f64).collect()
        };
        NoiseSchedule::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return param("every beta must lie in (0, 1)");
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return param("betas must be nondecreasing");
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let last = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return param(format!("timestep {t} outside [{lo}, {}]", self.steps()));
        }
        Ok(())
    }

    /// Coefficients `(on x̂0, on x_t)` of the posterior mean at step `t`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        if t == 1 {
            // β_1 / (1 − ᾱ_1) is exactly 1 but rounds away from it in floating point
            return (1.0, 0.0);
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let b = self.beta(t);
        (ab_prev.sqrt() * b / (1.0 - ab), self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::from_config(&ScheduleConfig::default()).expect("default schedule is valid")
    }
}

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return param(format!("length {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

/// One forward noising step `x_{t-1} → x_t`.
pub fn forward_step<T: Scalar>(x_prev: &[T], t: usize, noise: &[T], s: &NoiseSchedule) -> Result<Vec<T>> {
    s.check(t, false)?;
    check_len(x_prev, noise)?;
    let a = T::lit((1.0 - s.beta(t)).sqrt());
    let b = T::lit(s.beta(t).sqrt());
    Ok(x_prev.iter().zip(noise).map(|(&x, &n)| a * x + b * n).collect())
}

/// Closed-form jump `x_0 → x_t`.
pub fn forward_marginal<T: Scalar>(x0: &[T], t: usize, noise: &[T], s: &NoiseSchedule) -> Result<Vec<T>> {
    s.check(t, true)?;
    check_len(x0, noise)?;
    if t == 0 {
        return Ok(x0.to_vec());
    }
    let ab = s.alpha_bar(t);
    let a = T::lit(ab.sqrt());
    let b = T::lit((1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(&x, &n)| a * x + b * n).collect())
}

/// One reverse step `x_t → x_{t-1}` from a predicted clean sample. Noise is ignored at `t = 1`.
pub fn reverse_step<T: Scalar>(x_t: &[T], t: usize, x0_hat: &[T], noise: &[T], s: &NoiseSchedule) -> Result<Vec<T>> {
    s.check(t, false)?;
    check_len(x_t, x0_hat)?;
    check_len(x_t, noise)?;
    let (c0, ct) = s.posterior_coefs(t);
    let (c0, ct) = (T::lit(c0), T::lit(ct));
    let sigma = if t > 1 { T::lit(s.beta(t).sqrt()) } else { T::zero() };
    Ok(x_t.iter().zip(x0_hat).zip(noise).map(|((&x, &x0), &n)| c0 * x0 + ct * x + sigma * n).collect())
}

/// A model predicting the clean sample from `(x_t, t, cond)`.
pub trait Denoiser<T> {
    fn dim(&self) -> usize;
    fn predict(&self, x_t: &[T], t: usize, cond: &[T]) -> Result<Vec<T>>;
}

/// Ancestral sampling from `x_T ~ N(0, I)` with noise drawn from `noise`.
pub fn sample_with<T: Scalar, M: Denoiser<T> + ?Sized>(
    model: &M,
    cond: &[T],
    s: &NoiseSchedule,
    mut noise: impl FnMut() -> f64,
) -> Result<Vec<T>> {
    let d = model.dim();
    let mut x: Vec<T> = (0..d).map(|_| T::lit(noise())).collect();
    for t in (1..=s.steps()).rev() {
        let x0 = model.predict(&x, t, cond)?;
        if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("denoiser output invalid at t={t}")));
        }
        let z: Vec<T> = if t > 1 { (0..d).map(|_| T::lit(noise())).collect() } else { vec![T::zero(); d] };
        x = reverse_step(&x, t, &x0, &z, s)?;
    }
    Ok(x)
}

pub fn sample<T: Scalar, M: Denoiser<T> + ?Sized>(model: &M, cond: &[T], s: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<T>> {
    sample_with(model, cond, s, || randn(rng))
}

/// Draws per-row timesteps uniform in `[1, T]` and standard normal noise.
pub fn draw_t_eps(rows: usize, cols: usize, s: &NoiseSchedule, rng: &mut Rng) -> (Vec<usize>, Mat<f64>) {
    let ts = (0..rows).map(|_| rng.random_range(1..=s.steps())).collect();
    let eps = Mat::from_fn(rows, cols, |_, _| randn(rng));
    (ts, eps)
}

/// Row-wise forward marginal of a batch.
pub fn noise_batch<T: Scalar>(x0: &Mat<T>, ts: &[usize], eps: &Mat<f64>, s: &NoiseSchedule) -> Result<Mat<T>> {
    if ts.len() != x0.rows() || eps.shape() != x0.shape() {
        return param("timestep or noise batch does not match x0");
    }
    let mut out = Mat::zeros(x0.rows(), x0.cols());
    for r in 0..x0.rows() {
        let e: Vec<T> = eps.row(r).iter().map(|&v| T::lit(v)).collect();
        out.row_mut(r).copy_from_slice(&forward_marginal(x0.row(r), ts[r], &e, s)?);
    }
    Ok(out)
}

/// x0-prediction loss on a graph with fixed timesteps and noise:
/// `mean_b ‖x0_b − model(x_t_b, t_b)‖²`. `model` receives the noised batch as a constant.
pub fn diffusion_loss_fixed<T: Scalar>(
    g: &mut Graph<T>,
    x0: &Mat<T>,
    ts: &[usize],
    eps: &Mat<f64>,
    s: &NoiseSchedule,
    mut model: impl FnMut(&mut Graph<T>, Var, &[usize]) -> Var,
) -> Result<Var> {
    let xt = noise_batch(x0, ts, eps, s)?;
    let xt = g.constant(xt);
    let pred = model(g, xt, ts);
    if g.value(pred).shape() != x0.shape() {
        return param("denoiser output shape does not match x0");
    }
    if !g.value(pred).is_finite() {
        return Err(Error::Numeric("non-finite denoiser output".into()));
    }
    let target = g.constant(x0.clone());
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let total = g.sum_all(sq);
    Ok(g.scale(total, T::one() / T::lit(x0.rows() as f64)))
}

/// [`diffusion_loss_fixed`] with timesteps and noise drawn from `rng`.
pub fn diffusion_loss<T: Scalar>(
    g: &mut Graph<T>,
    x0: &Mat<T>,
    s: &NoiseSchedule,
    rng: &mut Rng,
    model: impl FnMut(&mut Graph<T>, Var, &[usize]) -> Var,
) -> Result<Var> {
    let (ts, eps) = draw_t_eps(x0.rows(), x0.cols(), s, rng);
    diffusion_loss_fixed(g, x0, &ts, &eps, s, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainkit::rng_from;
    use std::cell::RefCell;

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((1..=100).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!(s.alpha_bar(100) < 0.01);
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(100) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn forward_step_hand_value() {
        let s = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let y = forward_step(&[2.0f64], 1, &[1.0], &s).unwrap();
        assert!((y[0] - 2.23589).abs() < 1e-5);
        let s = NoiseSchedule::from_betas(vec![0.04]).unwrap();
        let y = forward_step(&[3.0f64], 1, &[0.0], &s).unwrap();
        assert!((y[0] - 0.96f64.sqrt() * 3.0).abs() < 1e-15);
        assert!(forward_step(&[0.0f64], 2, &[0.0], &s).is_err());
        assert!(forward_step(&[0.0f64], 0, &[0.0], &s).is_err());
    }

    #[test]
    fn marginal_at_zero_is_identity() {
        let s = NoiseSchedule::default();
        assert_eq!(forward_marginal(&[1.5f64, -2.0], 0, &[9.0, 9.0], &s).unwrap(), vec![1.5, -2.0]);
        assert!(forward_marginal(&[1.0f64], 101, &[0.0], &s).is_err());
    }

    #[test]
    fn reverse_step_hand_value() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12 && (s.alpha_bar(3) - 0.504).abs() < 1e-12);
        let y = reverse_step(&[1.0f64], 2, &[0.5], &[0.0], &s).unwrap();
        assert!((y[0] - 0.65825).abs() < 1e-4, "{}", y[0]);
        let y = reverse_step(&[7.0f64], 1, &[0.25], &[3.0], &s).unwrap();
        assert!((y[0] - 0.25).abs() < 1e-12);
    }

    struct Constant(Vec<f64>, RefCell<Vec<usize>>);
    impl Denoiser<f64> for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn predict(&self, _: &[f64], t: usize, _: &[f64]) -> Result<Vec<f64>> {
            self.1.borrow_mut().push(t);
            Ok(self.0.clone())
        }
    }

    #[test]
    fn constant_stub_is_recovered_and_every_step_visited() {
        let s = NoiseSchedule::default();
        let m = Constant(vec![0.3, -1.2, 2.0], RefCell::new(Vec::new()));
        let out = sample_with(&m, &[], &s, || 0.0).unwrap();
        assert_eq!(out, m.0);
        assert_eq!(*m.1.borrow(), (1..=100).rev().collect::<Vec<_>>());
    }

    #[test]
    fn sampling_is_seeded() {
        let s = NoiseSchedule::default();
        struct Half;
        impl Denoiser<f64> for Half {
            fn dim(&self) -> usize {
                4
            }
            fn predict(&self, x: &[f64], _: usize, _: &[f64]) -> Result<Vec<f64>> {
                Ok(x.iter().map(|v| 0.5 * v).collect())
            }
        }
        let a = sample(&Half, &[], &s, &mut rng_from(1)).unwrap();
        assert_eq!(a, sample(&Half, &[], &s, &mut rng_from(1)).unwrap());
        assert_ne!(a, sample(&Half, &[], &s, &mut rng_from(2)).unwrap());
    }

    #[test]
    fn loss_of_oracle_and_zero_models() {
        let s = NoiseSchedule::default();
        let x0 = Mat::from_rows(&[vec![1.0f64, 0.0], vec![0.0, -1.0], vec![0.6, 0.8]]).unwrap();
        let mut g = Graph::new();
        let l = diffusion_loss(&mut g, &x0, &s, &mut rng_from(0), |g, _, _| g.constant(x0.clone())).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let mut g = Graph::new();
        let l = diffusion_loss(&mut g, &x0, &s, &mut rng_from(0), |g, _, _| g.constant(Mat::zeros(3, 2))).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_with_fixed_draws_matches_arithmetic() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        let x0 = Mat::from_rows(&[vec![1.0f64, 2.0]]).unwrap();
        let eps = Mat::from_rows(&[vec![0.5, -1.0]]).unwrap();
        // linear model: x̂0 = 2·x_t
        let mut g = Graph::new();
        let l = diffusion_loss_fixed(&mut g, &x0, &[2], &eps, &s, |g, x, _| g.scale(x, 2.0)).unwrap();
        let (a, b) = (0.72f64.sqrt(), 0.28f64.sqrt());
        let xt = [a * 1.0 + b * 0.5, a * 2.0 - b * 1.0];
        let want = (1.0 - 2.0 * xt[0]).powi(2) + (2.0 - 2.0 * xt[1]).powi(2);
        assert!((g.scalar(l) - want).abs() < 1e-9);
    }

    #[test]
    fn non_finite_prediction_is_a_numeric_error() {
        let s = NoiseSchedule::default();
        let x0 = Mat::from_rows(&[vec![1.0f64]]).unwrap();
        let mut g = Graph::new();
        let r = diffusion_loss(&mut g, &x0, &s, &mut rng_from(0), |g, _, _| g.constant(Mat::scalar(f64::NAN)));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
