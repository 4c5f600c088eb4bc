use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::vocab::{BOS, EOS};
use crate::corpus::grammar::detokenize;
use crate::corpus::{gen_instruction, CorpusRecord, Vocab};
use crate::error::{format, param, Result};
use crate::nn::{causal_mask, Embedding, LayerNorm, Linear, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainkit::{
    derive_seed, randn, rng_from, train_step, train_step_pair, AdamConfig, AdamState, Bound, ParamId, ParamSet, Rng,
};

use super::align::AvAlign;
use super::templates::PromptTemplates;

pub const TAG: &str = "avi_lm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub l: usize,
    pub q_a: usize,
    pub d_lm: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub max_positions: usize,
    /// Text-only steps that teach the LM to decode instruction embeddings.
    pub pretrain_steps: usize,
    /// Steps fitting the projection onto speech query rows.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    /// Train the LM together with the projection in the second phase.
    pub joint: bool,
    pub no_aug: bool,
    pub seed: u64,
    pub vocab_size: usize,
    pub vocab_hash: String,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            l: 64,
            q_a: 8,
            d_lm: 64,
            heads: 4,
            blocks: 2,
            max_len: 48,
            max_positions: 128,
            pretrain_steps: 500,
            steps: 500,
            batch: 16,
            lr: 2e-3,
            clip: 1.0,
            joint: false,
            no_aug: false,
            seed: 0,
            vocab_size: 0,
            vocab_hash: String::new(),
        }
    }
}

impl LmConfig {
    pub fn for_vocab(mut self, v: &Vocab) -> Self {
        self.vocab_size = v.len();
        self.vocab_hash = v.hash();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return param("language model config has no vocabulary");
        }
        if self.d_lm % self.heads != 0 {
            return param("d_lm must divide into heads");
        }
        if self.max_len == 0 || self.batch == 0 {
            return param("max_len and batch must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub k: usize,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { mode: DecodeMode::Greedy, k: 5, seed: 0, max_len: 48 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedInstruction {
    pub text: String,
    pub tokens: Vec<usize>,
    /// No EOS was produced within `max_len` tokens.
    pub truncated: bool,
}

/// Small causal transformer plus the input projection `P` from query rows into its
/// embedding space. The two live in separate parameter sets so either can be frozen.
#[derive(Clone, Debug)]
pub struct TinyLm<T> {
    pub config: LmConfig,
    pub net: LmNet,
    pub lm_params: ParamSet<T>,
    pub proj_params: ParamSet<T>,
}

/// Layer layout of [`TinyLm`].
#[derive(Clone, Debug)]
pub struct LmNet {
    max_len: usize,
    max_positions: usize,
    tok: Embedding,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    head: Linear,
    proj: Linear,
}

impl<T: Scalar> TinyLm<T> {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = rng_from(derive_seed(c.seed, "avi_lm.init", 0));
        let mut lm = ParamSet::new();
        let tok = Embedding::new(&mut lm, "lm.tok", c.vocab_size, c.d_lm, &mut rng);
        let pos = lm.register("lm.pos", Mat::from_fn(c.max_positions, c.d_lm, |_, _| T::lit(randn(&mut rng) * 0.1)));
        let blocks = (0..c.blocks).map(|i| TransformerBlock::new(&mut lm, &format!("lm.block{i}"), c.d_lm, c.heads, 2, &mut rng)).collect();
        let ln = LayerNorm::new(&mut lm, "lm.ln", c.d_lm);
        let head = Linear::new(&mut lm, "lm.head", c.d_lm, c.vocab_size, &mut rng);
        let mut pp = ParamSet::new();
        let proj = Linear::new(&mut pp, "proj", c.l, c.d_lm, &mut rng);
        let net = LmNet { max_len: c.max_len, max_positions: c.max_positions, tok, pos, blocks, ln, head, proj };
        Ok(TinyLm { config, net, lm_params: lm, proj_params: pp })
    }

    fn frozen(&self) -> (Graph<T>, Bound, Bound) {
        let mut g = Graph::new();
        let lp = self.lm_params.bind(&mut g, false);
        let pp = self.proj_params.bind(&mut g, false);
        (g, lp, pp)
    }

    /// Decodes an instruction from query rows `[q, l]` following the template tokens.
    pub fn generate(&self, rows: &Mat<T>, template: &[usize], vocab: &Vocab, dc: &DecodeConfig) -> Result<GeneratedInstruction> {
        if rows.cols() != self.config.l {
            return param(format!("prompt rows have width {}, expected {}", rows.cols(), self.config.l));
        }
        let mut rng = rng_from(derive_seed(dc.seed, "avi_lm.decode", 0));
        let limit = dc.max_len.min(self.config.max_len);
        let mut out: Vec<usize> = Vec::new();
        let mut truncated = true;
        while out.len() < limit {
            let (mut g, lp, pp) = self.frozen();
            let prefix = g.constant(rows.clone());
            let mut toks = template.to_vec();
            toks.extend_from_slice(&out);
            let logits = self.net.logits(&mut g, &lp, &pp, prefix, &toks)?;
            let v = g.value(logits);
            let last: Vec<f64> = v.row(v.rows() - 1).iter().map(|x| x.as_f64()).collect();
            let next = match dc.mode {
                DecodeMode::Greedy => argmax(&last),
                DecodeMode::TopK => sample_top_k(&last, dc.k.max(1), &mut rng),
            };
            if next == EOS {
                truncated = false;
                break;
            }
            out.push(next);
        }
        let words = vocab.decode_tokens(&out);
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        Ok(GeneratedInstruction { text: detokenize(&refs), tokens: out, truncated })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(TAG, &self.config)?;
        c.put_params("", &self.lm_params);
        c.put_params("", &self.proj_params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.tag() != TAG {
            return format(format!("expected a {TAG} checkpoint, got {}", c.tag()));
        }
        let mut m = TinyLm::new(c.config()?)?;
        c.load_params("", &mut m.lm_params)?;
        c.load_params("", &mut m.proj_params)?;
        Ok(m)
    }
}

impl LmNet {
    /// Next-token logits `[n, V]` for the sequence `BOS ⊕ P(prefix) ⊕ tokens`, where row
    /// `k` predicts the item after position `k`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, lp: &Bound, pp: &Bound, prefix: Var, tokens: &[usize]) -> Result<Var> {
        let k = g.value(prefix).rows();
        let n = 1 + k + tokens.len();
        if n > self.max_positions {
            return param(format!("sequence of {n} positions exceeds {}", self.max_positions));
        }
        let mut rows = vec![self.tok.forward(g, lp, &[BOS])];
        if k > 0 {
            rows.push(self.proj.forward(g, pp, prefix));
        }
        if !tokens.is_empty() {
            rows.push(self.tok.forward(g, lp, tokens));
        }
        let x = g.concat_rows(&rows);
        let pos = g.slice_rows(lp.var(self.pos), 0, n);
        let mut h = g.add(x, pos);
        let mask = g.constant(causal_mask(n));
        for b in &self.blocks {
            h = b.forward(g, lp, h, Some(mask));
        }
        let h = self.ln.forward(g, lp, h);
        Ok(self.head.forward(g, lp, h))
    }

    /// Summed cross-entropy over the instruction tokens and the closing EOS.
    pub fn sequence_nll<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        lp: &Bound,
        pp: &Bound,
        prefix: Var,
        template: &[usize],
        instr: &[usize],
    ) -> Result<Var> {
        let instr = &instr[..instr.len().min(self.max_len - 1)];
        let mut toks = template.to_vec();
        toks.extend_from_slice(instr);
        let logits = self.logits(g, lp, pp, prefix, &toks)?;
        let start = g.value(prefix).rows() + template.len();
        let pred = g.slice_rows(logits, start, instr.len() + 1);
        let mut targets = instr.to_vec();
        targets.push(EOS);
        let ce = g.cross_entropy(pred, &targets);
        Ok(g.scale(ce, T::lit(targets.len() as f64)))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], k: usize, rng: &mut Rng) -> usize {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let m = logits[idx[0]];
    let w: Vec<f64> = idx.iter().map(|&i| (logits[i] - m).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (j, &wi) in w.iter().enumerate() {
        if u < wi {
            return idx[j];
        }
        u -= wi;
    }
    idx[idx.len() - 1]
}

/// Token ids of every template, in order.
pub fn template_tokens(templates: &PromptTemplates, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    templates.iter().map(|t| vocab.encode(t)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub pretrain_losses: Vec<f64>,
    pub losses: Vec<f64>,
}

struct Example<T> {
    prefix: Mat<T>,
    template: usize,
    instr: Vec<usize>,
}

fn batch_loss<T: Scalar>(net: &LmNet, g: &mut Graph<T>, lp: &Bound, pp: &Bound, batch: &[Example<T>], tmpl: &[Vec<usize>]) -> Result<Var> {
    let mut total = None;
    let mut count = 0usize;
    for ex in batch {
        let prefix = g.constant(ex.prefix.clone());
        let nll = net.sequence_nll(g, lp, pp, prefix, &tmpl[ex.template], &ex.instr)?;
        count += ex.instr.len().min(net.max_len - 1) + 1;
        total = Some(match total {
            None => nll,
            Some(t) => g.add(t, nll),
        });
    }
    let Some(total) = total else { return param("empty batch") };
    Ok(g.scale(total, T::lit(1.0 / count as f64)))
}

fn instruction_for(r: &CorpusRecord, vocab: &Vocab, no_aug: bool, rng: &mut Rng) -> Vec<usize> {
    if no_aug {
        r.instruction.tokens.clone()
    } else {
        gen_instruction(vocab, r.state.emotion, r.state.intensity, rng).tokens
    }
}

/// Speech query rows for each clip under the frozen alignment model.
pub fn query_rows<T: Scalar>(align: &AvAlign<T>, clips: &[&CorpusRecord]) -> Result<Vec<Mat<T>>> {
    clips.iter().map(|r| Ok(align.compress_speech(&r.features.cast())?.rows)).collect()
}

/// Two-phase training. Phase one fits the LM and `P` to decode text embeddings of the
/// instructions themselves, replicated once per query row. Phase two freezes the LM
/// (unless `joint`) and fits `P` on the speech query rows. The alignment model is never
/// modified.
pub fn train_lm<T: Scalar>(
    train: &[&CorpusRecord],
    align: &AvAlign<T>,
    vocab: &Vocab,
    templates: &PromptTemplates,
    cfg: &LmConfig,
) -> Result<(TinyLm<T>, LmReport)> {
    if train.is_empty() {
        return param("language model training needs clips");
    }
    if cfg.vocab_hash != vocab.hash() || align.config.vocab_hash != cfg.vocab_hash {
        return format("language model, alignment model and vocabulary disagree");
    }
    if align.config.l != cfg.l || align.config.q_a != cfg.q_a {
        return format("alignment embedding sizes do not match the language model config");
    }
    let tmpl = template_tokens(templates, vocab)?;
    let mut lm = TinyLm::<T>::new(cfg.clone())?;
    let mut rng = rng_from(derive_seed(cfg.seed, "avi_lm.train", 0));
    let mut report = LmReport::default();

    let mut s_lm = AdamState::new(&lm.lm_params, AdamConfig::with_lr(cfg.lr));
    let mut s_p = AdamState::new(&lm.proj_params, AdamConfig::with_lr(cfg.lr));
    for _ in 0..cfg.pretrain_steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let r = train[rng.random_range(0..train.len())];
            let instr = instruction_for(r, vocab, cfg.no_aug, &mut rng);
            let f_i = align.encode_tokens(&instr)?;
            let prefix = Mat::from_fn(cfg.q_a, cfg.l, |_, c| f_i[c]);
            batch.push(Example { prefix, template: rng.random_range(0..tmpl.len()), instr });
        }
        let net = &lm.net;
        let l = train_step_pair((&mut lm.lm_params, &mut s_lm), (&mut lm.proj_params, &mut s_p), cfg.clip, |g, lp, pp| {
            batch_loss(net, g, lp, pp, &batch, &tmpl)
        })?;
        report.pretrain_losses.push(l);
    }

    let rows = query_rows(align, train)?;
    let mut s_p = AdamState::new(&lm.proj_params, AdamConfig::with_lr(cfg.lr));
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let k = rng.random_range(0..train.len());
            let instr = instruction_for(train[k], vocab, cfg.no_aug, &mut rng);
            batch.push(Example { prefix: rows[k].clone(), template: rng.random_range(0..tmpl.len()), instr });
        }
        let net = &lm.net;
        let l = if cfg.joint {
            train_step_pair((&mut lm.lm_params, &mut s_lm), (&mut lm.proj_params, &mut s_p), cfg.clip, |g, lp, pp| {
                batch_loss(net, g, lp, pp, &batch, &tmpl)
            })?
        } else {
            let frozen = &lm.lm_params;
            train_step(&mut lm.proj_params, &mut s_p, cfg.clip, |g, pp| {
                let lp = frozen.bind(g, false);
                batch_loss(net, g, &lp, pp, &batch, &tmpl)
            })?
        };
        report.losses.push(l);
    }
    Ok((lm, report))
}

/// Teacher-forced per-token perplexity of the clips' stored instructions given their
/// speech prompts and template 0.
pub fn perplexity<T: Scalar>(lm: &TinyLm<T>, align: &AvAlign<T>, clips: &[&CorpusRecord], vocab: &Vocab) -> Result<f64> {
    let tmpl = template_tokens(&PromptTemplates::builtin(), vocab)?;
    let mut nll = 0.0;
    let mut count = 0usize;
    for (r, rows) in clips.iter().zip(query_rows(align, clips)?) {
        let (mut g, lp, pp) = lm.frozen();
        let prefix = g.constant(rows);
        let v = lm.net.sequence_nll(&mut g, &lp, &pp, prefix, &tmpl[0], &r.instruction.tokens)?;
        nll += g.scalar(v).as_f64();
        count += r.instruction.tokens.len().min(lm.config.max_len - 1) + 1;
    }
    if count == 0 {
        return param("perplexity needs clips");
    }
    Ok((nll / count as f64).exp())
}

/// Greedy instruction for one clip.
pub fn generate_instruction<T: Scalar>(
    lm: &TinyLm<T>,
    align: &AvAlign<T>,
    features: &Mat<T>,
    template_id: usize,
    vocab: &Vocab,
    dc: &DecodeConfig,
) -> Result<GeneratedInstruction> {
    let tmpl = template_tokens(&PromptTemplates::builtin(), vocab)?;
    let Some(t) = tmpl.get(template_id) else {
        return param(format!("template {template_id} does not exist"));
    };
    let rows = align.compress_speech(features)?.rows;
    lm.generate(&rows, t, vocab, dc)
}
