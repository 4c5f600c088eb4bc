use crate::autodiff::{Graph, Var};
use crate::error::{param, Error, Result};
use crate::scalar::Scalar;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return param("vectors differ in length");
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// `[B, B]` cosine similarities between rows of `a` and rows of `b`.
pub fn cosine_matrix<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let a = g.l2_normalize_rows(a);
    let b = g.l2_normalize_rows(b);
    g.matmul_bt(a, b)
}

/// Audio-anchored InfoNCE over cosine similarities: row `i` of `audio` must pick row `i`
/// of `instr` against the other in-batch instructions. `symmetric` adds the
/// instruction-anchored direction and averages the two.
pub fn contrastive_a2i_loss<T: Scalar>(g: &mut Graph<T>, audio: Var, instr: Var, tau: f64, symmetric: bool) -> Result<Var> {
    let b = g.value(audio).rows();
    if b == 0 {
        return param("contrastive loss needs a non-empty batch");
    }
    if g.value(instr).rows() != b {
        return param("audio and instruction batches differ in size");
    }
    if !(tau > 0.0) {
        return param("temperature must be positive");
    }
    let s = cosine_matrix(g, audio, instr);
    let logits = g.scale(s, T::lit(1.0 / tau));
    let diag: Vec<usize> = (0..b).collect();
    let fwd = g.cross_entropy(logits, &diag);
    if !symmetric {
        return Ok(fwd);
    }
    let t = g.transpose(logits);
    let bwd = g.cross_entropy(t, &diag);
    let sum = g.add(fwd, bwd);
    Ok(g.scale(sum, T::lit(0.5)))
}
