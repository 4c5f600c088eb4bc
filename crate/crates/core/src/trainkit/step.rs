use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

use super::{adam_step, clip_grad_norm, grad_check, AdamState, Bound, ParamSet};

/// Builds a loss graph over `params` and returns the loss with one gradient per parameter.
pub fn loss_and_grads<T: Scalar>(
    params: &ParamSet<T>,
    build: impl FnOnce(&mut Graph<T>, &Bound) -> Result<Var>,
) -> Result<(T, Vec<Mat<T>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let loss = build(&mut g, &p)?;
    let l = g.scalar(loss);
    if !l.is_finite() {
        return Err(Error::Numeric(format!("loss became {l}")));
    }
    let mut grads = g.backward(loss);
    Ok((l, params.collect_grads(&p, &mut grads)))
}

/// One clipped Adam step on the loss built by `build`. Returns the pre-step loss.
pub fn train_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    clip: f64,
    build: impl FnOnce(&mut Graph<T>, &Bound) -> Result<Var>,
) -> Result<f64> {
    let (l, mut grads) = loss_and_grads(params, build)?;
    if clip > 0.0 {
        clip_grad_norm(&mut grads, clip);
    }
    adam_step(params, &grads, state)?;
    Ok(l.as_f64())
}

/// [`grad_check`] for a loss expressed as a graph builder.
pub fn grad_check_graph(
    params: &ParamSet<f64>,
    eps: f64,
    build: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> Result<f64> {
    grad_check(|ps| loss_and_grads(ps, &build), params, eps)
}

/// Like [`train_step`] for a model split across two parameter sets that train together.
/// The gradient norm is clipped over both sets at once.
pub fn train_step_pair<T: Scalar>(
    a: (&mut ParamSet<T>, &mut AdamState<T>),
    b: (&mut ParamSet<T>, &mut AdamState<T>),
    clip: f64,
    build: impl FnOnce(&mut Graph<T>, &Bound, &Bound) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let pa = a.0.bind(&mut g, true);
    let pb = b.0.bind(&mut g, true);
    let loss = build(&mut g, &pa, &pb)?;
    let l = g.scalar(loss);
    if !l.is_finite() {
        return Err(Error::Numeric(format!("loss became {l}")));
    }
    let mut grads = g.backward(loss);
    let mut all = a.0.collect_grads(&pa, &mut grads);
    let n_a = all.len();
    all.extend(b.0.collect_grads(&pb, &mut grads));
    if clip > 0.0 {
        clip_grad_norm(&mut all, clip);
    }
    let gb = all.split_off(n_a);
    adam_step(a.0, &all, a.1)?;
    adam_step(b.0, &gb, b.1)?;
    Ok(l.as_f64())
}
