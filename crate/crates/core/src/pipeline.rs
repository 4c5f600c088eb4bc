//! Orchestration: run configuration, the artifact directory, synthesis and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::av_instruction::{self, AlignConfig, AvAlign, DecodeConfig, LmConfig, PromptTemplates, TinyLm};
use crate::bridge::{self, Bridge, BridgeConfig};
use crate::checkpoint::Checkpoint;
use crate::corpus::grammar::{parse_instruction, render_instruction, ActionPhrase, Emotion, ParsedInstruction};
use crate::corpus::{
    gen_corpus, read_corpus, shuffle_runs, synth_features, tokenize, write_corpus, Corpus, CorpusConfig, CorpusRecord, Split, World,
};
use crate::error::{format, param, Error, Result};
use crate::face_model::{
    flame_forward, template_from_checkpoint, template_to_checkpoint, ExpressionParams, HeadTemplate, Mesh, PoseParams, Region,
    ShapeParams, TemplateConfig, FPS, POSE_DIM, TEMPLATE_TAG,
};
use crate::metrics::{corpus_bleu, diversity, lip_vertex_error_mat, probe_accuracy, probe_ready, rouge_l, BleuOptions, LinearProbe, MetricReport};
use crate::motion_prior::{self, train_prior, MotionPrior, MotionPriorConfig};
use crate::tensor::Mat;
use crate::trainkit::{derive_seed, rng_from};

pub const CONFIG_FILE: &str = "run_config.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TEMPLATE_FILE: &str = "template.avit";
pub const PRIOR_FILE: &str = "motion_prior.avit";
pub const ALIGN_FILE: &str = "avi_align.avit";
pub const LM_FILE: &str = "avi_lm.avit";
pub const BRIDGE_FILE: &str = "bridge.avit";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-stage settings of one run. Stage seeds are mixed with the master seed, so a
/// single `seed` change moves every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub template: TemplateConfig,
    pub corpus: CorpusConfig,
    pub prior: MotionPriorConfig,
    pub align: AlignConfig,
    pub lm: LmConfig,
    pub bridge: BridgeConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Grammar renders of the true factors used as BLEU references per clip.
    pub bleu_references: usize,
    /// Samples per instruction for the diversity metric.
    pub diversity_samples: usize,
    /// Instructions averaged for the diversity metric.
    pub diversity_instructions: usize,
    /// Seeds per action phrase in the instruction-following check.
    pub action_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bleu_references: 10, diversity_samples: 8, diversity_instructions: 8, action_seeds: 20 }
    }
}

impl Default for RunConfig {
    /// The desk-scale run: 2000 clips and training lengths that fit a laptop CPU.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            template: TemplateConfig::default(),
            corpus: CorpusConfig { n_records: 2000, ..CorpusConfig::default() },
            // viseme leakage into the style space keeps shrinking well past the point
            // where reconstruction loss flattens
            prior: MotionPriorConfig { steps: 4800, ..MotionPriorConfig::default() },
            align: AlignConfig { tau: 0.1, steps: 600, ..AlignConfig::default() },
            lm: LmConfig { pretrain_steps: 300, steps: 300, ..LmConfig::default() },
            bridge: BridgeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// A few-second run used by determinism and wiring tests.
    pub fn miniature() -> Self {
        let mut c = RunConfig {
            template: TemplateConfig { n_v: 240, ..TemplateConfig::default() },
            corpus: CorpusConfig { n_records: 120, t_min: 16, t_max: 24, ..CorpusConfig::default() },
            ..RunConfig::default()
        };
        c.prior = MotionPriorConfig { width: 16, s_ref: 8, window: 8, steps: 20, batch: 4, ..c.prior };
        c.align = AlignConfig { d_q: 16, l: 16, text_width: 16, q_a: 4, steps: 10, batch: 8, ..c.align };
        c.lm = LmConfig { l: 16, q_a: 4, d_lm: 16, pretrain_steps: 5, steps: 5, batch: 4, ..c.lm };
        c.bridge = BridgeConfig { l: 16, hidden: 32, width: 16, steps: 10, batch: 8, ..c.bridge };
        c.eval = EvalConfig { bleu_references: 3, diversity_samples: 3, diversity_instructions: 2, action_seeds: 2 };
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every stage on its own and the dimensions shared between stages.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.corpus.validate().map_err(cfg)?;
        self.prior.validate().map_err(cfg)?;
        self.bridge.validate().map_err(cfg)?;
        let checks = [
            (self.corpus.d_a == self.prior.d_a, "corpus.d_a must equal prior.d_a"),
            (self.corpus.d_a == self.align.d_a, "corpus.d_a must equal align.d_a"),
            (self.corpus.dim_psi == self.prior.dim_psi, "corpus.dim_psi must equal prior.dim_psi"),
            (self.corpus.dim_psi == self.template.dim_psi, "corpus.dim_psi must equal template.dim_psi"),
            (self.prior.d_s == self.bridge.d_s, "prior.d_s must equal bridge.d_s"),
            (self.align.l == self.lm.l, "align.l must equal lm.l"),
            (self.align.l == self.bridge.l, "align.l must equal bridge.l"),
            (self.align.q_a == self.lm.q_a, "align.q_a must equal lm.q_a"),
            (self.eval.diversity_samples >= 2, "eval.diversity_samples must be at least 2"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig { seed: derive_seed(self.seed, "corpus", self.corpus.seed), ..self.corpus.clone() }
    }

    pub fn template_config(&self) -> TemplateConfig {
        TemplateConfig { seed: derive_seed(self.seed, "template", self.template.seed), ..self.template.clone() }
    }

    pub fn prior_config(&self) -> MotionPriorConfig {
        MotionPriorConfig { seed: derive_seed(self.seed, "prior", self.prior.seed), ..self.prior.clone() }
    }

    pub fn align_config(&self, corpus: &Corpus) -> AlignConfig {
        AlignConfig { seed: derive_seed(self.seed, "align", self.align.seed), ..self.align.clone() }.for_vocab(&corpus.vocab)
    }

    pub fn lm_config(&self, corpus: &Corpus) -> LmConfig {
        LmConfig { seed: derive_seed(self.seed, "lm", self.lm.seed), ..self.lm.clone() }.for_vocab(&corpus.vocab)
    }

    pub fn bridge_config(&self) -> BridgeConfig {
        BridgeConfig { seed: derive_seed(self.seed, "bridge", self.bridge.seed), ..self.bridge.clone() }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Every artifact in a run directory with the sha256 of its bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    /// Hashes `rel` (relative to `dir`) and rewrites the manifest.
    pub fn record(dir: &Path, rel: &str) -> Result<String> {
        let mut m = Self::load(dir)?;
        let h = sha256_hex(&fs::read(dir.join(rel))?);
        m.artifacts.insert(rel.to_string(), h.clone());
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
        Ok(h)
    }

    /// Files whose bytes no longer match their recorded hash.
    pub fn stale(&self, dir: &Path) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for (rel, h) in &self.artifacts {
            let p = dir.join(rel);
            if !p.exists() || sha256_hex(&fs::read(p)?) != *h {
                out.push(rel.clone());
            }
        }
        Ok(out)
    }
}

/// Writes a file under `dir` and records its hash in the manifest.
pub fn write_artifact(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(rel);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(p, bytes)?;
    Manifest::record(dir, rel)?;
    Ok(())
}

fn save_checkpoint(dir: &Path, rel: &str, c: &Checkpoint) -> Result<()> {
    write_artifact(dir, rel, &c.to_bytes())
}

fn write_json<S: Serialize>(dir: &Path, rel: &str, v: &S) -> Result<()> {
    write_artifact(dir, rel, serde_json::to_string_pretty(v)?.as_bytes())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    read_corpus(&dir.join(CORPUS_FILE), &dir.join(VOCAB_FILE))
}

fn load_ckpt(dir: &Path, rel: &str, tag: &str) -> Result<Checkpoint> {
    let p = dir.join(rel);
    if !p.exists() {
        return format(format!("missing checkpoint {}", p.display()));
    }
    Checkpoint::load(&p, tag)
}

fn split_refs(c: &Corpus, s: Split) -> Vec<&CorpusRecord> {
    c.split(s).collect()
}

pub fn save_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    write_artifact(dir, CONFIG_FILE, cfg.to_json().as_bytes())
}

/// Writes the config, the head template and the corpus.
pub fn stage_gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_config(cfg, dir)?;
    let tc = cfg.template_config();
    save_checkpoint(dir, TEMPLATE_FILE, &template_to_checkpoint(&tc.build()?, &tc)?)?;
    let corpus = gen_corpus(&cfg.corpus_config())?;
    write_corpus(&corpus, dir)?;
    Manifest::record(dir, CORPUS_FILE)?;
    Manifest::record(dir, VOCAB_FILE)?;
    Ok(())
}

pub fn stage_train_prior(cfg: &RunConfig, dir: &Path) -> Result<motion_prior::TrainReport> {
    let corpus = load_corpus(dir)?;
    let (m, rep) = train_prior::<f32>(&split_refs(&corpus, Split::Train), &split_refs(&corpus, Split::Val), &cfg.prior_config())?;
    save_checkpoint(dir, PRIOR_FILE, &m.to_checkpoint()?)?;
    write_json(dir, "reports/train_prior.json", &rep)?;
    Ok(rep)
}

pub fn stage_train_align(cfg: &RunConfig, dir: &Path) -> Result<av_instruction::AlignReport> {
    let corpus = load_corpus(dir)?;
    let (m, rep) = av_instruction::train_align::<f32>(&split_refs(&corpus, Split::Train), &corpus.vocab, &cfg.align_config(&corpus))?;
    save_checkpoint(dir, ALIGN_FILE, &m.to_checkpoint()?)?;
    write_json(dir, "reports/train_align.json", &rep)?;
    Ok(rep)
}

pub fn stage_train_lm(cfg: &RunConfig, dir: &Path) -> Result<av_instruction::lm::LmReport> {
    let corpus = load_corpus(dir)?;
    let align = AvAlign::<f32>::from_checkpoint(&load_ckpt(dir, ALIGN_FILE, av_instruction::align::TAG)?)?;
    let (m, rep) = av_instruction::train_lm(
        &split_refs(&corpus, Split::Train),
        &align,
        &corpus.vocab,
        &PromptTemplates::builtin(),
        &cfg.lm_config(&corpus),
    )?;
    save_checkpoint(dir, LM_FILE, &m.to_checkpoint()?)?;
    write_json(dir, "reports/train_lm.json", &rep)?;
    Ok(rep)
}

fn bridge_file(variant: Option<&str>) -> String {
    match variant {
        None => BRIDGE_FILE.to_string(),
        Some(v) => format!("ablation/bridge_{v}.avit"),
    }
}

fn train_bridge_into(cfg: &BridgeConfig, dir: &Path, rel: &str) -> Result<bridge::BridgeReport> {
    let corpus = load_corpus(dir)?;
    let prior = MotionPrior::<f32>::from_checkpoint(&load_ckpt(dir, PRIOR_FILE, motion_prior::TAG)?)?;
    let align = AvAlign::<f32>::from_checkpoint(&load_ckpt(dir, ALIGN_FILE, av_instruction::align::TAG)?)?;
    let (b, rep) = bridge::train_bridge(
        &split_refs(&corpus, Split::Train),
        &split_refs(&corpus, Split::Val),
        &prior,
        &align,
        &corpus.vocab,
        cfg,
    )?;
    save_checkpoint(dir, rel, &b.to_checkpoint()?)?;
    Ok(rep)
}

pub fn stage_train_bridge(cfg: &RunConfig, dir: &Path) -> Result<bridge::BridgeReport> {
    let rep = train_bridge_into(&cfg.bridge_config(), dir, BRIDGE_FILE)?;
    write_json(dir, "reports/train_bridge.json", &rep)?;
    Ok(rep)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<()> {
    stage_gen_data(cfg, dir)?;
    stage_train_prior(cfg, dir)?;
    stage_train_align(cfg, dir)?;
    stage_train_lm(cfg, dir)?;
    stage_train_bridge(cfg, dir)?;
    Ok(())
}

/// All trained stages of a run directory, loaded and cross-checked.
pub struct Models {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub template: HeadTemplate<f64>,
    pub corpus: Corpus,
    pub prior: MotionPrior<f32>,
    pub align: AvAlign<f32>,
    pub lm: TinyLm<f32>,
    pub bridge: Bridge<f32>,
    /// Content hash of each checkpoint, keyed by module tag.
    pub hashes: BTreeMap<String, String>,
}

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_with_bridge(dir, BRIDGE_FILE)
    }

    pub fn load_with_bridge(dir: &Path, bridge_rel: &str) -> Result<Self> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let corpus = load_corpus(dir)?;
        let mut hashes = BTreeMap::new();
        let mut get = |rel: &str, tag: &str| -> Result<Checkpoint> {
            let c = load_ckpt(dir, rel, tag)?;
            hashes.insert(tag.to_string(), c.hash());
            Ok(c)
        };
        let template = template_from_checkpoint(&get(TEMPLATE_FILE, TEMPLATE_TAG)?)?;
        let prior = MotionPrior::<f32>::from_checkpoint(&get(PRIOR_FILE, motion_prior::TAG)?)?;
        let align = AvAlign::<f32>::from_checkpoint(&get(ALIGN_FILE, av_instruction::align::TAG)?)?;
        let lm = TinyLm::<f32>::from_checkpoint(&get(LM_FILE, av_instruction::lm::TAG)?)?;
        let bridge = Bridge::<f32>::from_checkpoint(&get(bridge_rel, bridge::TAG)?)?;
        let vh = corpus.vocab.hash();
        if align.config.vocab_hash != vh || lm.config.vocab_hash != vh {
            return format("checkpoints were trained with a different vocabulary");
        }
        if prior.config.d_s != bridge.config.d_s || align.config.l != bridge.config.l || align.config.l != lm.config.l {
            return format("checkpoint dimensions do not fit together");
        }
        if prior.config.dim_psi != template.dim_psi() || corpus.dim_psi() != template.dim_psi() {
            return format("expression width differs between template, corpus and motion prior");
        }
        Ok(Models { dir: dir.to_path_buf(), config, template, corpus, prior, align, lm, bridge, hashes })
    }

    pub fn clip(&self, id: &str) -> Result<&CorpusRecord> {
        self.corpus.get(id).ok_or_else(|| Error::Param(format!("unknown clip {id}")))
    }

    /// Greedy instruction for a clip with template 0.
    pub fn instruct(&self, clip: &CorpusRecord) -> Result<av_instruction::GeneratedInstruction> {
        av_instruction::generate_instruction(&self.lm, &self.align, &clip.features, 0, &self.corpus.vocab, &DecodeConfig::default())
    }

    /// Style samples for an instruction text.
    pub fn styles(&self, text: &str, n: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
        bridge::sample_style(&self.bridge, &self.align, &self.corpus.vocab, text, n, seed)
    }

    /// Coefficients `[T, 9 + dim_psi]` for a clip's speech under a style.
    pub fn animate(&self, clip: &CorpusRecord, z: &[f32]) -> Result<Mat<f32>> {
        let content = self.prior.encode_content(&clip.features)?;
        self.prior.generate(&content, z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimFrame {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub instruction: String,
    pub clip_id: String,
    pub seed: u64,
    pub sample_index: usize,
    pub checkpoints: BTreeMap<String, String>,
}

/// Coefficient animation at 25 frames per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimationFile {
    pub fps: u32,
    pub frames: Vec<AnimFrame>,
    pub provenance: Provenance,
}

impl AnimationFile {
    pub fn new(coeffs: &Mat<f32>, provenance: Provenance) -> Result<Self> {
        if coeffs.cols() <= POSE_DIM {
            return param("coefficient rows too narrow");
        }
        let frames = (0..coeffs.rows())
            .map(|r| {
                let row: Vec<f64> = coeffs.row(r).iter().map(|&x| x as f64).collect();
                AnimFrame { theta: row[..POSE_DIM].to_vec(), psi: row[POSE_DIM..].to_vec() }
            })
            .collect();
        Ok(AnimationFile { fps: FPS, frames, provenance })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("animation serializes")
    }

    pub fn from_json(text: &str, dim_psi: usize) -> Result<Self> {
        let a: AnimationFile = serde_json::from_str(text)?;
        if a.fps != FPS {
            return format(format!("animation at {} fps, expected {FPS}", a.fps));
        }
        if a.frames.iter().any(|f| f.theta.len() != POSE_DIM || f.psi.len() != dim_psi) {
            return format("animation frame dimensions do not match the template");
        }
        Ok(a)
    }

    pub fn coeffs(&self) -> Mat<f64> {
        let rows: Vec<Vec<f64>> = self.frames.iter().map(|f| f.theta.iter().chain(&f.psi).copied().collect()).collect();
        Mat::from_rows(&rows).unwrap_or_else(|_| Mat::zeros(0, 0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub instruction: String,
    /// The instruction came from the language model rather than the caller.
    pub generated: bool,
    pub truncated: bool,
    pub parsed: Option<ParsedInstruction>,
    pub unknown_words: Vec<String>,
    pub styles: Vec<Vec<f64>>,
    pub animations: Vec<AnimationFile>,
}

/// Instruction (given or generated) → style samples → one animation per sample.
pub fn synthesize(m: &Models, clip_id: &str, instruction: Option<&str>, n_samples: usize, seed: u64) -> Result<SynthOutput> {
    let clip = m.clip(clip_id)?;
    let (text, generated, truncated) = match instruction {
        Some(t) if t.trim().is_empty() => return param("instruction is empty"),
        Some(t) => (t.to_string(), false, false),
        None => {
            let g = m.instruct(clip)?;
            (g.text, true, g.truncated)
        }
    };
    let (_, unknown_words) = m.corpus.vocab.encode_lenient(&text);
    let styles = m.styles(&text, n_samples, seed)?;
    let mut animations = Vec::with_capacity(styles.len());
    for (k, z) in styles.iter().enumerate() {
        let coeffs = m.animate(clip, z)?;
        let prov = Provenance {
            instruction: text.clone(),
            clip_id: clip.id.clone(),
            seed,
            sample_index: k,
            checkpoints: m.hashes.clone(),
        };
        animations.push(AnimationFile::new(&coeffs, prov)?);
    }
    Ok(SynthOutput {
        parsed: parse_instruction(&text),
        instruction: text,
        generated,
        truncated,
        unknown_words,
        styles: styles.iter().map(|z| z.iter().map(|&x| x as f64).collect()).collect(),
        animations,
    })
}

/// Most frequent viseme of a clip, ties to the lower id.
pub fn majority_viseme(phonemes: &[u8]) -> usize {
    let mut c = [0usize; crate::corpus::N_VISEMES];
    for &p in phonemes {
        c[p as usize] += 1;
    }
    (0..c.len()).max_by_key(|&k| (c[k], usize::MAX - k)).unwrap_or(0)
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Emotion probe accuracy on clip style embeddings.
pub fn style_emotion_probe(m: &Models, clips: &[&CorpusRecord], seed: u64) -> Result<f64> {
    let z: Vec<Vec<f64>> = clips.iter().map(|r| Ok(to_f64(&m.prior.clip_style(&r.coeffs)?))).collect::<Result<_>>()?;
    let y: Vec<usize> = clips.iter().map(|r| r.state.emotion.index()).collect();
    probe_accuracy(&z, &y, seed)
}

/// Majority-viseme probe on clip style embeddings. Visemes with fewer than the probe's
/// minimum class size are left out.
pub fn style_phoneme_probe(m: &Models, clips: &[&CorpusRecord], seed: u64) -> Result<f64> {
    let labels: Vec<usize> = clips.iter().map(|r| majority_viseme(&r.phonemes)).collect();
    let mut count = BTreeMap::new();
    for &l in &labels {
        *count.entry(l).or_insert(0usize) += 1;
    }
    let keep: Vec<usize> = (0..clips.len()).filter(|&i| count[&labels[i]] >= crate::metrics::PROBE_MIN_PER_CLASS).collect();
    let z: Vec<Vec<f64>> = keep.iter().map(|&i| Ok(to_f64(&m.prior.clip_style(&clips[i].coeffs)?))).collect::<Result<_>>()?;
    let y: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    probe_accuracy(&z, &y, seed)
}

/// Two or more visemes with enough clips to survive the per-class filter.
fn visemes_ready(labels: &[usize]) -> bool {
    let mut count = BTreeMap::new();
    for &l in labels {
        *count.entry(l).or_insert(0usize) += 1;
    }
    count.values().filter(|&&n| n >= crate::metrics::PROBE_MIN_PER_CLASS).count() >= 2
}

/// Scores of the generated instructions against the grammar.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionScores {
    pub emotion_accuracy: f64,
    pub neutral_action_accuracy: f64,
    pub bleu_1: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
}

pub fn instruction_scores(m: &Models, clips: &[&CorpusRecord], n_refs: usize, seed: u64) -> Result<InstructionScores> {
    if clips.is_empty() || n_refs == 0 {
        return param("need clips and references");
    }
    let mut hits = 0usize;
    let (mut neutral, mut neutral_hits) = (0usize, 0usize);
    let mut cands = Vec::with_capacity(clips.len());
    let mut refs = Vec::with_capacity(clips.len());
    let mut rouge = 0.0;
    for (k, r) in clips.iter().enumerate() {
        let g = m.instruct(r)?;
        let parsed = parse_instruction(&g.text);
        if parsed.as_ref().is_some_and(|p| p.emotion == r.state.emotion) {
            hits += 1;
        }
        if r.state.emotion == Emotion::Neutral {
            neutral += 1;
            if parsed.as_ref().is_some_and(|p| p.actions == crate::corpus::grammar::expected_actions(Emotion::Neutral)) {
                neutral_hits += 1;
            }
        }
        let mut rng = rng_from(derive_seed(seed, "bleu.refs", k as u64));
        let rs: Vec<Vec<String>> =
            (0..n_refs).map(|_| tokenize(&render_instruction(r.state.emotion, r.state.intensity, &mut rng))).collect();
        let cand = tokenize(&g.text);
        let mut best = 0.0f64;
        for x in &rs {
            best = best.max(rouge_l(&cand, x)?);
        }
        rouge += best;
        cands.push(cand);
        refs.push(rs);
    }
    Ok(InstructionScores {
        emotion_accuracy: hits as f64 / clips.len() as f64,
        neutral_action_accuracy: if neutral == 0 { f64::NAN } else { neutral_hits as f64 / neutral as f64 },
        bleu_1: corpus_bleu(&cands, &refs, 1, BleuOptions::default())?,
        bleu_4: corpus_bleu(&cands, &refs, 4, BleuOptions::default())?,
        rouge_l: rouge / clips.len() as f64,
    })
}

/// Lip error of generations under each clip's own style, with matched speech and with
/// speech re-synthesized from the clip's viseme runs in shuffled order.
pub fn lip_errors(m: &Models, clips: &[&CorpusRecord], seed: u64) -> Result<(f64, f64)> {
    let cfg = &m.corpus.config;
    let world = World::new(cfg.seed, cfg.d_a);
    let (mut matched, mut shuffled) = (0.0, 0.0);
    for (k, r) in clips.iter().enumerate() {
        let z = m.prior.clip_style(&r.coeffs)?;
        let gt = r.coeffs.cast::<f64>();
        let pred = m.animate(r, &z)?.cast::<f64>();
        matched += lip_vertex_error_mat(&pred, &gt, &m.template)?;
        let mut rng = rng_from(derive_seed(seed, "lip.shuffle", k as u64));
        let track = shuffle_runs(&r.phonemes, &mut rng);
        let feats = synth_features(&world, &track, r.state.emotion, r.state.intensity, cfg.feature_noise, &mut rng).cast::<f32>();
        let content = m.prior.encode_content(&feats)?;
        let pred = m.prior.generate(&content, &z)?.cast::<f64>();
        shuffled += lip_vertex_error_mat(&pred, &gt, &m.template)?;
    }
    let n = clips.len().max(1) as f64;
    Ok((matched / n, shuffled / n))
}

/// Full-strength grammar instruction for the emotion that carries `a` furthest, naming all
/// of that emotion's actions.
pub fn action_instruction(a: ActionPhrase) -> String {
    let Some((ch, sign)) = a.channel() else {
        return neutral_instruction();
    };
    let slot = crate::corpus::grammar::EMOTION_CHANNELS.iter().position(|&c| c == ch).expect("emotion channel");
    let e = Emotion::ALL
        .iter()
        .copied()
        .filter(|e| e.actions().contains(&a))
        .max_by(|x, y| (x.channel_offsets()[slot] * sign).total_cmp(&(y.channel_offsets()[slot] * sign)))
        .expect("every channel action belongs to an emotion");
    // every clause of the emotion, in grammar order: dropping one leaves the training distribution
    let clauses: Vec<String> = e.actions().iter().map(|x| format!("; {} strongly", x.canonical())).collect();
    format!("The speaker sounds very {}{}.", e.name(), clauses.concat())
}

pub fn neutral_instruction() -> String {
    format!("The speaker sounds neutral; {}.", ActionPhrase::Relaxed.canonical())
}

/// Share of seeds for which an instruction naming `a` moves its channel in the named
/// direction relative to the neutral instruction at the same seed, on the same speech.
pub fn action_following_rate(m: &Models, a: ActionPhrase, clip: &CorpusRecord, seeds: usize) -> Result<f64> {
    let Some((ch, sign)) = a.channel() else {
        return param("the relaxed class names no channel");
    };
    if seeds == 0 {
        return param("need at least one seed");
    }
    let col = POSE_DIM + ch.channel();
    let mean_channel = |text: &str, seed: u64| -> Result<f64> {
        let z = m.styles(text, 1, seed)?;
        let c = m.animate(clip, &z[0])?;
        Ok((0..c.rows()).map(|r| c.get(r, col) as f64).sum::<f64>() / c.rows() as f64)
    };
    let (text, base) = (action_instruction(a), neutral_instruction());
    let mut ok = 0usize;
    for s in 0..seeds as u64 {
        if sign * (mean_channel(&text, s)? - mean_channel(&base, s)?) > 0.0 {
            ok += 1;
        }
    }
    Ok(ok as f64 / seeds as f64)
}

/// Mean diversity over the first test instructions.
pub fn mean_diversity(m: &Models, clips: &[&CorpusRecord], n_instr: usize, n_samples: usize, seed: u64) -> Result<f64> {
    let take = clips.len().min(n_instr).max(1);
    let mut total = 0.0;
    for (k, r) in clips.iter().take(take).enumerate() {
        let s = m.styles(&r.instruction.text, n_samples, derive_seed(seed, "diversity", k as u64))?;
        total += diversity(&s.iter().map(|z| to_f64(z)).collect::<Vec<_>>())?;
    }
    Ok(total / take as f64)
}

/// Emotion probe trained on true style embeddings of training clips and applied to
/// styles sampled from the test clips' instructions.
pub fn transfer_emotion_probe(m: &Models, train: &[&CorpusRecord], test: &[&CorpusRecord], seed: u64) -> Result<f64> {
    let z: Vec<Vec<f64>> = train.iter().map(|r| Ok(to_f64(&m.prior.clip_style(&r.coeffs)?))).collect::<Result<_>>()?;
    let y: Vec<usize> = train.iter().map(|r| r.state.emotion.index()).collect();
    let probe = LinearProbe::fit(&z, &y)?;
    let zs: Vec<Vec<f64>> = test
        .iter()
        .enumerate()
        .map(|(k, r)| Ok(to_f64(&m.styles(&r.instruction.text, 1, derive_seed(seed, "transfer", k as u64))?[0])))
        .collect::<Result<_>>()?;
    let ys: Vec<usize> = test.iter().map(|r| r.state.emotion.index()).collect();
    probe.accuracy(&zs, &ys)
}

/// Lip error of animations driven by styles sampled from each test clip's instruction.
pub fn sampled_lip_error(m: &Models, test: &[&CorpusRecord], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (k, r) in test.iter().enumerate() {
        let z = m.styles(&r.instruction.text, 1, derive_seed(seed, "sampled_lip", k as u64))?;
        let pred = m.animate(r, &z[0])?.cast::<f64>();
        total += lip_vertex_error_mat(&pred, &r.coeffs.cast(), &m.template)?;
    }
    Ok(total / test.len().max(1) as f64)
}

/// Full evaluation of a run directory on the test split.
pub fn evaluate(m: &Models) -> Result<MetricReport> {
    let cfg = &m.config;
    let seed = derive_seed(cfg.seed, "eval", 0);
    let test = split_refs(&m.corpus, Split::Test);
    let train = split_refs(&m.corpus, Split::Train);
    let mut rep = MetricReport::new("full", cfg.seed, "test", serde_json::to_value(cfg)?);
    // small splits cannot support the held-out probes
    let emotions: Vec<usize> = test.iter().map(|r| r.state.emotion.index()).collect();
    if probe_ready(&emotions) {
        rep.set("style_emotion_probe", style_emotion_probe(m, &test, seed)?)?;
    }
    let visemes: Vec<usize> = test.iter().map(|r| majority_viseme(&r.phonemes)).collect();
    if visemes_ready(&visemes) {
        rep.set("style_phoneme_probe", style_phoneme_probe(m, &test, seed)?)?;
    }
    let s = instruction_scores(m, &test, cfg.eval.bleu_references, seed)?;
    rep.set("instruction_emotion_accuracy", s.emotion_accuracy)?;
    if s.neutral_action_accuracy.is_finite() {
        rep.set("neutral_action_accuracy", s.neutral_action_accuracy)?;
    }
    rep.set("bleu_1", s.bleu_1)?;
    rep.set("bleu_4", s.bleu_4)?;
    rep.set("rouge_l", s.rouge_l)?;
    let (matched, shuffled) = lip_errors(m, &test, seed)?;
    rep.set("lip_error_matched", matched)?;
    rep.set("lip_error_shuffled", shuffled)?;
    rep.set("lip_error_ratio", matched / shuffled)?;
    rep.set("align_retrieval", av_instruction::retrieval_accuracy(&m.align, &test, 32)?)?;
    rep.set("align_pair_gap", av_instruction::paired_similarity_gap(&m.align, &test)?)?;
    rep.set("lm_perplexity", av_instruction::perplexity(&m.lm, &m.align, &test, &m.corpus.vocab)?)?;
    rep.set("bridge_anchor_gap", bridge::paired_anchor_gap(&m.bridge, &m.prior, &m.align, &test)?)?;
    rep.set("diversity", mean_diversity(m, &test, cfg.eval.diversity_instructions, cfg.eval.diversity_samples, seed)?)?;
    rep.set("transfer_emotion_probe", transfer_emotion_probe(m, &train, &test, seed)?)?;
    Ok(rep)
}

pub fn stage_eval(dir: &Path) -> Result<MetricReport> {
    let m = Models::load(dir)?;
    let rep = evaluate(&m)?;
    write_artifact(dir, "reports/eval.json", rep.to_json().as_bytes())?;
    Ok(rep)
}

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "no_diffusion", "no_cont_align", "no_aug"];

pub fn ablation_config(base: &BridgeConfig, variant: &str) -> Result<BridgeConfig> {
    let mut c = base.clone();
    match variant {
        "full" => {}
        "no_diffusion" => c.no_diffusion = true,
        "no_cont_align" => c.no_cont_align = true,
        "no_aug" => c.no_aug = true,
        other => return Err(Error::Config(format!("unknown ablation variant {other}"))),
    }
    Ok(c)
}

/// Trains the four bridge variants with a shared seed over the run's frozen stages and
/// reports diversity, the transfer emotion probe and lip error for each.
pub fn stage_ablate(dir: &Path) -> Result<Vec<MetricReport>> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let base = cfg.bridge_config();
    let seed = derive_seed(cfg.seed, "ablate", 0);
    let mut out = Vec::with_capacity(ABLATION_VARIANTS.len());
    for v in ABLATION_VARIANTS {
        let bc = ablation_config(&base, v)?;
        let rel = bridge_file(Some(v));
        train_bridge_into(&bc, dir, &rel)?;
        let m = Models::load_with_bridge(dir, &rel)?;
        let test = split_refs(&m.corpus, Split::Test);
        let train = split_refs(&m.corpus, Split::Train);
        let mut rep = MetricReport::new(v, cfg.seed, "test", serde_json::to_value(&bc)?);
        rep.set("diversity", mean_diversity(&m, &test, cfg.eval.diversity_instructions, cfg.eval.diversity_samples, seed)?)?;
        rep.set("emotion_probe", transfer_emotion_probe(&m, &train, &test, seed)?)?;
        rep.set("lip_vertex_error", sampled_lip_error(&m, &test, seed)?)?;
        write_artifact(dir, &format!("reports/ablation_{v}.json"), rep.to_json().as_bytes())?;
        out.push(rep);
    }
    Ok(out)
}

/// Regions whose per-frame centroids make up the compact landmark stream.
pub const LANDMARK_REGIONS: [Region; 3] = [Region::Lips, Region::Brows, Region::Cheeks];

/// Posed mesh of one animation frame with neutral identity.
pub fn frame_mesh(template: &HeadTemplate<f64>, frame: &AnimFrame) -> Result<Mesh<f64>> {
    if frame.theta.len() != POSE_DIM {
        return param("frame pose has the wrong width");
    }
    let pose = PoseParams::from_slice(&frame.theta);
    flame_forward(template, &ShapeParams::default(), &pose, &ExpressionParams { psi: frame.psi.clone() })
}

fn centroid(mesh: &Mesh<f64>, idx: &[usize]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for &v in idx {
        for (a, x) in c.iter_mut().enumerate() {
            *x += mesh.vertices.get(v, a);
        }
    }
    c.map(|x| x / idx.len().max(1) as f64)
}

/// Compact per-frame geometry of an animation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    /// `[T][LANDMARK_REGIONS][3]`
    pub frames: Vec<Vec<[f64; 3]>>,
    /// Vertical extent of the lip region per frame.
    pub lip_trajectory: Vec<f64>,
}

pub fn landmarks(template: &HeadTemplate<f64>, anim: &AnimationFile) -> Result<Landmarks> {
    let lips = template.region(Region::Lips);
    let mut frames = Vec::with_capacity(anim.frames.len());
    let mut lip = Vec::with_capacity(anim.frames.len());
    for f in &anim.frames {
        let mesh = frame_mesh(template, f)?;
        frames.push(LANDMARK_REGIONS.iter().map(|&r| centroid(&mesh, template.region(r))).collect());
        let ys = lips.iter().map(|&v| mesh.vertices.get(v, 1));
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
        lip.push(if lips.is_empty() { 0.0 } else { hi - lo });
    }
    Ok(Landmarks { frames, lip_trajectory: lip })
}

/// Template geometry for browser rendering. Coordinates are quantized to 1e-4 so the
/// payload is small and its hash is stable; topology is kept whole.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateGeometry {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub regions: BTreeMap<String, Vec<usize>>,
    pub hash: String,
}

pub fn template_geometry(template: &HeadTemplate<f64>) -> TemplateGeometry {
    let q = |x: f64| (x * 1e4).round() / 1e4;
    let vertices: Vec<[f64; 3]> =
        (0..template.n_v()).map(|v| [0, 1, 2].map(|a| q(template.base_vertices.get(v, a)))).collect();
    let regions: BTreeMap<String, Vec<usize>> = template.regions.iter().map(|(r, idx)| (r.name().to_string(), idx.clone())).collect();
    let mut g = TemplateGeometry { vertices, faces: template.faces.clone(), regions, hash: String::new() };
    g.hash = sha256_hex(serde_json::to_string(&g).expect("geometry serializes").as_bytes());
    g
}
