use crate::error::{param, Error, Result};
use crate::tensor::Mat;

use super::ParamSet;

/// `|a - n| / max(1, |a|, |n|)`
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` returns the loss and its gradient (one matrix per parameter, in registration
/// order). Only the loss is used at perturbed points. Returns the worst relative error
/// over all coordinates.
pub fn grad_check<F>(loss_fn: F, params: &ParamSet<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, Vec<Mat<f64>>)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return param(format!("finite-difference step {eps} outside [1e-6, 1e-3]"));
    }
    let (loss, grads) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let base = params.flat();
    if analytic.len() != base.len() {
        return param("gradient does not cover every parameter");
    }
    let mut probe = params.clone();
    let mut worst = 0f64;
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + eps;
        probe.set_flat(&x)?;
        let (lp, _) = loss_fn(&probe)?;
        x[i] = base[i] - eps;
        probe.set_flat(&x)?;
        let (lm, _) = loss_fn(&probe)?;
        x[i] = base[i];
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let numeric = (lp - lm) / (2.0 * eps);
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn params(vals: &[f64]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.register("p", Mat::row_vector(vals.to_vec()));
        ps
    }

    fn graph_loss(ps: &ParamSet<f64>, f: impl Fn(&mut Graph<f64>, crate::autodiff::Var) -> crate::autodiff::Var) -> (f64, Vec<Mat<f64>>) {
        let mut g = Graph::new();
        let b = ps.bind(&mut g, true);
        let v = b.var(ps.ids().next().unwrap());
        let out = f(&mut g, v);
        let mut grads = g.backward(out);
        (g.scalar(out), ps.collect_grads(&b, &mut grads))
    }

    #[test]
    fn quadratic_is_exact() {
        let ps = params(&[0.3, -1.2, 2.5, 0.0]);
        let err = grad_check(
            |p| {
                Ok(graph_loss(p, |g, v| {
                    let s = g.square(v);
                    let s = g.sum_all(s);
                    g.scale(s, 0.5)
                }))
            },
            &ps,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sine_sum_within_tolerance() {
        let ps = params(&[0.1, 0.9, -2.0, 3.0, 1.3]);
        let err = grad_check(
            |p| {
                let x = p.flat();
                let loss: f64 = x.iter().map(|v| v.sin()).sum();
                let grad = Mat::row_vector(x.iter().map(|v| v.cos()).collect());
                Ok((loss, vec![grad]))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn doubled_gradient_is_detected() {
        // d/dp of p²/2 is p; reporting 2p gives |2p - p| / max(1, 2p, p) = 0.5 once |p| ≥ 1.
        let ps = params(&[2.0, -3.0]);
        let err = grad_check(
            |p| {
                let x = p.flat();
                let loss = x.iter().map(|v| 0.5 * v * v).sum();
                Ok((loss, vec![Mat::row_vector(x.iter().map(|v| 2.0 * v).collect())]))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        let ps = params(&[1.0]);
        assert!(grad_check(|_| Ok((0.0, vec![Mat::scalar(0.0)])), &ps, 1e-1).is_err());
        assert!(matches!(
            grad_check(|_| Ok((f64::NAN, vec![Mat::scalar(0.0)])), &ps, 1e-5),
            Err(Error::Numeric(_))
        ));
    }
}
