//! Layer building blocks shared by the models.
//!
//! A layer owns only [`ParamId`]s; values live in the model's [`ParamSet`] and are placed
//! on a graph through a [`Bound`].

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainkit::{randn, Bound, ParamId, ParamSet, Rng};

const LN_EPS: f64 = 1e-5;

fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| T::lit(randn(rng) * std))
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = ps.register(format!("{name}.w"), gaussian(in_dim, out_dim, 1.0 / (in_dim as f64).sqrt(), rng));
        let b = ps.register(format!("{name}.b"), Mat::zeros(1, out_dim));
        Linear { w, b: Some(b), in_dim, out_dim }
    }

    pub fn no_bias<T: Scalar>(ps: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = ps.register(format!("{name}.w"), gaussian(in_dim, out_dim, 1.0 / (in_dim as f64).sqrt(), rng));
        Linear { w, b: None, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gain = ps.register(format!("{name}.g"), Mat::filled(1, dim, T::one()));
        let bias = ps.register(format!("{name}.b"), Mat::zeros(1, dim));
        LayerNorm { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), T::lit(LN_EPS))
    }
}

/// Linear layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims.windows(2).enumerate().map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, p, x);
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize, ctx_dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Attention {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), ctx_dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), ctx_dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Multi-head scaled dot-product attention of `queries` over `context`. `mask` is added
    /// to the `[queries, context]` score matrix of every head.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, queries: Var, context: Var, mask: Option<Var>) -> Var {
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let dh = self.dim / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let s = g.matmul_bt(qh, kh);
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, p, o)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize, heads: usize, ff_mult: usize, rng: &mut Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: Attention::new(ps, &format!("{name}.attn"), dim, dim, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ff: Mlp::new(ps, &format!("{name}.ff"), &[dim, dim * ff_mult, dim], rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Option<Var>) -> Var {
        let h = self.ln1.forward(g, p, x);
        let a = self.attn.forward(g, p, h, h, mask);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, p, x);
        let f = self.ff.forward(g, p, h);
        g.add(x, f)
    }
}

/// Query block: self-attention among queries, then cross-attention into a context.
#[derive(Clone, Debug)]
pub struct QueryBlock {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    ln_ctx: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff: Mlp,
}

impl QueryBlock {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        QueryBlock {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), dim),
            self_attn: Attention::new(ps, &format!("{name}.self"), dim, dim, heads, rng),
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), dim),
            ln_ctx: LayerNorm::new(ps, &format!("{name}.ln_ctx"), dim),
            cross_attn: Attention::new(ps, &format!("{name}.cross"), dim, dim, heads, rng),
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), dim),
            ff: Mlp::new(ps, &format!("{name}.ff"), &[dim, dim * 2, dim], rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, ctx: Var) -> Var {
        let h = self.ln_self.forward(g, p, x);
        let a = self.self_attn.forward(g, p, h, h, None);
        let x = g.add(x, a);
        let h = self.ln_cross.forward(g, p, x);
        let c = self.ln_ctx.forward(g, p, ctx);
        let a = self.cross_attn.forward(g, p, h, c, None);
        let x = g.add(x, a);
        let h = self.ln_ff.forward(g, p, x);
        let f = self.ff.forward(g, p, h);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, count: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = ps.register(format!("{name}.table"), gaussian(count, dim, 0.5, rng));
        Embedding { table, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, idx: &[usize]) -> Var {
        g.gather_rows(p.var(self.table), idx)
    }
}

/// `[n, n]` additive mask that hides future positions.
pub fn causal_mask<T: Scalar>(n: usize) -> Mat<T> {
    Mat::from_fn(n, n, |r, c| if c > r { T::lit(-1e9) } else { T::zero() })
}

/// Standard sinusoidal embedding of an integer position.
pub fn sinusoidal<T: Scalar>(pos: usize, dim: usize) -> Vec<T> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            T::lit(if i % 2 == 0 { a.sin() } else { a.cos() })
        })
        .collect()
}
