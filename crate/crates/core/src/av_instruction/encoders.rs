use crate::autodiff::{Graph, Var};
use crate::nn::{Embedding, LayerNorm, Linear, QueryBlock, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainkit::{randn, Bound, ParamId, ParamSet, Rng};

/// Learnable queries cross-attending into a variable-length feature sequence.
///
/// No positional encoding is applied over the feature axis, so duplicating every frame
/// leaves the output unchanged.
#[derive(Clone, Debug)]
pub struct QFormer {
    proj: Linear,
    queries: ParamId,
    blocks: Vec<QueryBlock>,
    ln: LayerNorm,
    out: Linear,
    pub n_queries: usize,
}

impl QFormer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        d_a: usize,
        d_q: usize,
        n_queries: usize,
        l: usize,
        heads: usize,
        blocks: usize,
        rng: &mut Rng,
    ) -> Self {
        let queries = ps.register("qformer.queries", Mat::from_fn(n_queries, d_q, |_, _| T::lit(randn(rng) * 0.5)));
        QFormer {
            proj: Linear::new(ps, "qformer.proj", d_a, d_q, rng),
            queries,
            blocks: (0..blocks).map(|i| QueryBlock::new(ps, &format!("qformer.block{i}"), d_q, heads, rng)).collect(),
            ln: LayerNorm::new(ps, "qformer.ln", d_q),
            out: Linear::new(ps, "qformer.out", d_q, l, rng),
            n_queries,
        }
    }

    /// `[T, d_a] → [q_a, l]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, feats: Var) -> Var {
        let ctx = self.proj.forward(g, p, feats);
        let mut q = p.var(self.queries);
        for b in &self.blocks {
            q = b.forward(g, p, q, ctx);
        }
        let q = self.ln.forward(g, p, q);
        self.out.forward(g, p, q)
    }
}

/// Bidirectional text transformer read out at a prepended classification slot.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    emb: Embedding,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    out: Linear,
    pub max_len: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        vocab: usize,
        d: usize,
        l: usize,
        heads: usize,
        blocks: usize,
        max_len: usize,
        rng: &mut Rng,
    ) -> Self {
        let emb = Embedding::new(ps, "text.tok", vocab, d, rng);
        let pos = ps.register("text.pos", Mat::from_fn(max_len + 1, d, |_, _| T::lit(randn(rng) * 0.1)));
        let cls = ps.register("text.cls", Mat::from_fn(1, d, |_, _| T::lit(randn(rng) * 0.5)));
        TextEncoder {
            emb,
            pos,
            cls,
            blocks: (0..blocks).map(|i| TransformerBlock::new(ps, &format!("text.block{i}"), d, heads, 2, rng)).collect(),
            ln: LayerNorm::new(ps, "text.ln", d),
            out: Linear::new(ps, "text.out", d, l, rng),
            max_len,
        }
    }

    /// Token ids (at most `max_len`, longer inputs are cut) → `[1, l]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, tokens: &[usize]) -> Var {
        let toks = &tokens[..tokens.len().min(self.max_len)];
        let mut rows = vec![p.var(self.cls)];
        if !toks.is_empty() {
            rows.push(self.emb.forward(g, p, toks));
        }
        let x = g.concat_rows(&rows);
        let pos = g.slice_rows(p.var(self.pos), 0, toks.len() + 1);
        let mut h = g.add(x, pos);
        for b in &self.blocks {
            h = b.forward(g, p, h, None);
        }
        let h = self.ln.forward(g, p, h);
        let cls = g.slice_rows(h, 0, 1);
        self.out.forward(g, p, cls)
    }
}
