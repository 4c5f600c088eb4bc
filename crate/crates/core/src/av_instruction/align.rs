use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::{gen_instruction, CorpusRecord, Vocab};
use crate::error::{format, param, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainkit::{derive_seed, rng_from, shuffled, train_step, AdamConfig, AdamState, Bound, ParamSet};

use super::encoders::{QFormer, TextEncoder};
use super::losses::{contrastive_a2i_loss, cosine_similarity};

pub const TAG: &str = "avi_align";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub d_a: usize,
    pub d_q: usize,
    pub q_a: usize,
    pub l: usize,
    pub text_width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub tau: f64,
    pub symmetric: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub clip: f64,
    pub no_aug: bool,
    pub seed: u64,
    pub vocab_size: usize,
    pub vocab_hash: String,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            d_a: 32,
            d_q: 32,
            q_a: 8,
            l: 64,
            text_width: 32,
            heads: 4,
            blocks: 2,
            max_len: 48,
            tau: 1.0,
            symmetric: false,
            lr: 1e-3,
            steps: 600,
            batch: 32,
            clip: 1.0,
            no_aug: false,
            seed: 0,
            vocab_size: 0,
            vocab_hash: String::new(),
        }
    }
}

impl AlignConfig {
    pub fn for_vocab(mut self, v: &Vocab) -> Self {
        self.vocab_size = v.len();
        self.vocab_hash = v.hash();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return param("alignment config has no vocabulary");
        }
        if self.q_a == 0 || self.l == 0 || self.batch == 0 {
            return param("query count, embedding width and batch must be positive");
        }
        if self.d_q % self.heads != 0 || self.text_width % self.heads != 0 {
            return param("widths must divide into heads");
        }
        if !(self.tau > 0.0) {
            return param("temperature must be positive");
        }
        Ok(())
    }
}

/// Stage A: query compression of speech features plus the instruction text encoder.
#[derive(Clone, Debug)]
pub struct AvAlign<T> {
    pub config: AlignConfig,
    pub qformer: QFormer,
    pub text: TextEncoder,
    pub params: ParamSet<T>,
}

/// Compressed speech: one row per query and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioQueryEmbedding<T> {
    pub rows: Mat<T>,
    pub pooled: Vec<T>,
}

impl<T: Scalar> AvAlign<T> {
    pub fn new(config: AlignConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = ParamSet::new();
        let mut rng = rng_from(derive_seed(c.seed, "avi_align.init", 0));
        let qformer = QFormer::new(&mut params, c.d_a, c.d_q, c.q_a, c.l, c.heads, c.blocks, &mut rng);
        let text = TextEncoder::new(&mut params, c.vocab_size, c.text_width, c.l, c.heads, c.blocks, c.max_len, &mut rng);
        Ok(AvAlign { config, qformer, text, params })
    }

    fn frozen(&self) -> (Graph<T>, Bound) {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        (g, p)
    }

    pub fn compress_speech(&self, feats: &Mat<T>) -> Result<AudioQueryEmbedding<T>> {
        if feats.rows() == 0 || feats.cols() != self.config.d_a {
            return param(format!("features {:?} do not match d_a={}", feats.shape(), self.config.d_a));
        }
        let (mut g, p) = self.frozen();
        let x = g.constant(feats.clone());
        let q = self.qformer.forward(&mut g, &p, x);
        let rows = g.value(q).clone();
        let pooled = rows.mean_rows().into_vec();
        Ok(AudioQueryEmbedding { rows, pooled })
    }

    pub fn encode_tokens(&self, tokens: &[usize]) -> Result<Vec<T>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return param(format!("token id {bad} outside the vocabulary"));
        }
        let (mut g, p) = self.frozen();
        let e = self.text.forward(&mut g, &p, tokens);
        Ok(g.value(e).data().to_vec())
    }

    /// Embeds text whose every word is in the vocabulary.
    pub fn encode_instruction(&self, text: &str, vocab: &Vocab) -> Result<Vec<T>> {
        self.encode_tokens(&vocab.encode(text)?)
    }

    /// Embeds arbitrary text with unknown words mapped to UNK; returns the unknown words.
    pub fn encode_instruction_lenient(&self, text: &str, vocab: &Vocab) -> Result<(Vec<T>, Vec<String>)> {
        let (ids, unknown) = vocab.encode_lenient(text);
        Ok((self.encode_tokens(&ids)?, unknown))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(TAG, &self.config)?;
        c.put_params("", &self.params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.tag() != TAG {
            return format(format!("expected a {TAG} checkpoint, got {}", c.tag()));
        }
        let mut m = AvAlign::new(c.config()?)?;
        c.load_params("", &mut m.params)?;
        Ok(m)
    }
}

/// One contrastive batch: features and instruction tokens per item.
pub struct AlignBatch<T> {
    pub feats: Vec<Mat<T>>,
    pub tokens: Vec<Vec<usize>>,
}

pub fn align_loss<T: Scalar>(
    qformer: &QFormer,
    text: &TextEncoder,
    cfg: &AlignConfig,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &AlignBatch<T>,
) -> Result<Var> {
    let mut audio = Vec::with_capacity(batch.feats.len());
    let mut instr = Vec::with_capacity(batch.feats.len());
    for (f, t) in batch.feats.iter().zip(&batch.tokens) {
        let x = g.constant(f.clone());
        let q = qformer.forward(g, p, x);
        audio.push(g.mean_rows(q));
        instr.push(text.forward(g, p, t));
    }
    let a = g.concat_rows(&audio);
    let b = g.concat_rows(&instr);
    contrastive_a2i_loss(g, a, b, cfg.tau, cfg.symmetric)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn draw_batch<T: Scalar>(
    clips: &[&CorpusRecord],
    vocab: &Vocab,
    cfg: &AlignConfig,
    rng: &mut crate::trainkit::Rng,
) -> AlignBatch<T> {
    let b = cfg.batch.min(clips.len());
    let order = shuffled(clips.len(), rng);
    let mut feats = Vec::with_capacity(b);
    let mut tokens = Vec::with_capacity(b);
    for &k in &order[..b] {
        let r = clips[k];
        feats.push(r.features.cast());
        tokens.push(if cfg.no_aug {
            r.instruction.tokens.clone()
        } else {
            gen_instruction(vocab, r.state.emotion, r.state.intensity, rng).tokens
        });
    }
    AlignBatch { feats, tokens }
}

/// Contrastive pretraining of the query bank, its attention stack and the text encoder.
pub fn train_align<T: Scalar>(train: &[&CorpusRecord], vocab: &Vocab, cfg: &AlignConfig) -> Result<(AvAlign<T>, AlignReport)> {
    if train.len() < 2 {
        return param("alignment needs at least two training clips");
    }
    if cfg.vocab_hash != vocab.hash() {
        return format("alignment config was built for another vocabulary");
    }
    if train[0].features.cols() != cfg.d_a {
        return format(format!("corpus feature width {} does not match d_a={}", train[0].features.cols(), cfg.d_a));
    }
    let mut m = AvAlign::<T>::new(cfg.clone())?;
    let mut state = AdamState::new(&m.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = rng_from(derive_seed(cfg.seed, "avi_align.train", 0));
    let mut report = AlignReport::default();
    for _ in 0..cfg.steps {
        let batch = draw_batch::<T>(train, vocab, cfg, &mut rng);
        let (qf, te) = (&m.qformer, &m.text);
        let l = train_step(&mut m.params, &mut state, cfg.clip, |g, p| align_loss(qf, te, cfg, g, p, &batch))?;
        report.losses.push(l);
    }
    let window = report.losses.len().clamp(1, 20);
    report.initial_loss = report.losses.first().copied().unwrap_or(f64::NAN);
    report.final_loss = report.losses.iter().rev().take(window).sum::<f64>() / window as f64;
    Ok((m, report))
}

/// Audio→instruction top-1 retrieval within consecutive batches. A retrieval counts as
/// correct when the chosen instruction describes the same emotion and intensity.
pub fn retrieval_accuracy<T: Scalar>(m: &AvAlign<T>, clips: &[&CorpusRecord], batch: usize) -> Result<f64> {
    let (audio, instr) = embed_pairs(m, clips)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for start in (0..clips.len()).step_by(batch.max(1)) {
        let end = (start + batch).min(clips.len());
        if end - start < 2 {
            continue;
        }
        for i in start..end {
            let mut best = (f64::NEG_INFINITY, start);
            for j in start..end {
                let s = cosine_similarity(&audio[i], &instr[j])?;
                if s > best.0 {
                    best = (s, j);
                }
            }
            let (a, b) = (&clips[i].state, &clips[best.1].state);
            hits += usize::from(a.emotion == b.emotion && a.intensity == b.intensity);
            total += 1;
        }
    }
    if total == 0 {
        return param("retrieval needs batches of at least two clips");
    }
    Ok(hits as f64 / total as f64)
}

/// Mean paired cosine minus mean cosine to instructions of other clips.
pub fn paired_similarity_gap<T: Scalar>(m: &AvAlign<T>, clips: &[&CorpusRecord]) -> Result<f64> {
    let (audio, instr) = embed_pairs(m, clips)?;
    let n = clips.len();
    if n < 2 {
        return param("need at least two clips");
    }
    let mut paired = 0.0;
    let mut unpaired = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s = cosine_similarity(&audio[i], &instr[j])?;
            if i == j {
                paired += s;
            } else {
                unpaired += s;
            }
        }
    }
    Ok(paired / n as f64 - unpaired / (n * (n - 1)) as f64)
}

type Embeds = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn embed_pairs<T: Scalar>(m: &AvAlign<T>, clips: &[&CorpusRecord]) -> Result<Embeds> {
    let mut audio = Vec::with_capacity(clips.len());
    let mut instr = Vec::with_capacity(clips.len());
    for r in clips {
        audio.push(m.compress_speech(&r.features.cast())?.pooled.iter().map(|x| x.as_f64()).collect());
        instr.push(m.encode_tokens(&r.instruction.tokens)?.iter().map(|x| x.as_f64()).collect());
    }
    Ok((audio, instr))
}
