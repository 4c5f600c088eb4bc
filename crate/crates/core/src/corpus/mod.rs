//! Procedural training corpus with known latent factors.
//!
//! Each record pairs pseudo-audio features with ground-truth coefficient sequences and
//! an instruction sentence. Lip channels follow the viseme track, emotion channels follow
//! the speaking state, and the two never mix.

pub mod grammar;
mod io;
pub mod vocab;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::face_model::{CoeffSequence, POSE_DIM};
use crate::tensor::Mat;
use crate::trainkit::{derive_seed, randn, rng_from, shuffled, Rng};

pub use grammar::{
    expected_actions, parse_instruction, render_instruction, ActionPhrase, Emotion, ParsedInstruction, EMOTION_CHANNELS,
};
pub use io::{read_corpus, write_corpus, CorpusHeader, SCHEMA_VERSION};
pub use vocab::{tokenize, Vocab, BOS, EOS, PAD, UNK};

pub const N_VISEMES: usize = 8;
pub const N_EMOTIONS: usize = 8;
pub const N_CELLS: usize = N_EMOTIONS * 3;
pub const MIN_RUN: usize = 3;
pub const MAX_RUN: usize = 8;
/// ψ channels driven by the viseme track. Channels 6 and 7 are residual lip-shape fields.
pub const VISEME_CHANNELS: [usize; 3] = [0, 6, 7];
pub const MIN_CORPUS_DIM_PSI: usize = 8;

const VISEME_PROFILES: [[f64; 3]; N_VISEMES] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.2],
    [0.35, -0.3, 0.6],
    [0.5, 0.8, -0.2],
    [0.0, -0.2, -0.6],
    [0.15, 0.2, -0.4],
    [0.45, -0.6, 0.0],
    [0.2, 0.0, 0.7],
];
const JITTER: f64 = 0.04;
const WIGGLE: f64 = 0.025;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_records: usize,
    pub seed: u64,
    /// train, val, test
    pub split_fractions: [f64; 3],
    pub t_min: usize,
    pub t_max: usize,
    pub d_a: usize,
    pub dim_psi: usize,
    pub feature_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_records: 240,
            seed: 0,
            split_fractions: [0.7, 0.1, 0.2],
            t_min: 50,
            t_max: 100,
            d_a: 32,
            dim_psi: crate::face_model::DEFAULT_DIM_PSI,
            feature_noise: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_min < MIN_RUN || self.t_max < self.t_min {
            return param(format!("frame range {}..={} invalid", self.t_min, self.t_max));
        }
        if self.d_a == 0 {
            return param("feature width must be positive");
        }
        if self.dim_psi < MIN_CORPUS_DIM_PSI {
            return param(format!("corpus needs dim_psi >= {MIN_CORPUS_DIM_PSI}"));
        }
        let s: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (s - 1.0).abs() > 1e-9 {
            return param("split fractions must be in [0,1] and sum to 1");
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return param("feature noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakingState {
    pub emotion: Emotion,
    pub intensity: u8,
    pub style_jitter: [f64; 4],
}

impl SpeakingState {
    pub fn cell(&self) -> usize {
        (self.intensity as usize - 1) * N_EMOTIONS + self.emotion.index()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub text: String,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub split: Split,
    pub state: SpeakingState,
    pub phonemes: Vec<u8>,
    /// `[T_a, d_a]`
    pub features: Mat<f32>,
    /// `[T_a, POSE_DIM + dim_psi]`, pose columns first.
    pub coeffs: Mat<f32>,
    pub instruction: InstructionSample,
}

impl CorpusRecord {
    pub fn n_frames(&self) -> usize {
        self.phonemes.len()
    }

    pub fn coeff_sequence(&self) -> CoeffSequence<f32> {
        CoeffSequence::from_mat(&self.coeffs).expect("corpus coefficients are well formed")
    }

    pub fn psi_channel(&self, ch: usize) -> Vec<f32> {
        (0..self.coeffs.rows()).map(|r| self.coeffs.get(r, POSE_DIM + ch)).collect()
    }
}

/// Fixed random embeddings shared by every record of a corpus.
#[derive(Clone, Debug)]
pub struct World {
    pub phon: Mat<f64>,
    pub emo: Mat<f64>,
}

impl World {
    pub fn new(seed: u64, d_a: usize) -> Self {
        let mut rng = rng_from(derive_seed(seed, "world", 0));
        let phon = Mat::from_fn(N_VISEMES, d_a, |_, _| randn(&mut rng));
        let emo = Mat::from_fn(N_EMOTIONS, d_a, |_, _| randn(&mut rng));
        World { phon, emo }
    }
}

/// Random viseme track with every run between 3 and 8 frames.
pub fn gen_phonemes(n: usize, rng: &mut Rng) -> Vec<u8> {
    let mut out: Vec<u8> = Vec::with_capacity(n);
    let mut prev = u8::MAX;
    while out.len() < n {
        let remaining = n - out.len();
        let len = if remaining <= MAX_RUN { remaining } else { rng.random_range(MIN_RUN..=MAX_RUN.min(remaining - MIN_RUN)) };
        let mut v = rng.random_range(0..N_VISEMES as u8);
        while v == prev {
            v = rng.random_range(0..N_VISEMES as u8);
        }
        prev = v;
        out.extend(std::iter::repeat_n(v, len));
    }
    out
}

/// Run-length segments `(start, len)` of a track.
pub fn runs(track: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=track.len() {
        if i == track.len() || track[i] != track[start] {
            out.push((start, i - start));
            start = i;
        }
    }
    out
}

/// Viseme-driven lip channels, smoothed with a `[¼, ½, ¼]` kernel (edges replicated).
/// Returns `[T, 3]` for [`VISEME_CHANNELS`].
pub fn lip_trajectory(track: &[u8]) -> Vec<[f64; 3]> {
    let raw: Vec<[f64; 3]> = track.iter().map(|&v| VISEME_PROFILES[v as usize]).collect();
    let n = raw.len();
    (0..n)
        .map(|t| {
            let a = raw[t.saturating_sub(1)];
            let b = raw[t];
            let c = raw[(t + 1).min(n - 1)];
            [0, 1, 2].map(|k| 0.25 * a[k] + 0.5 * b[k] + 0.25 * c[k])
        })
        .collect()
}

/// Emotion channel offsets for a state, indexed like [`EMOTION_CHANNELS`].
pub fn emotion_offsets(emotion: Emotion, intensity: u8) -> [f64; 5] {
    emotion.channel_offsets().map(|o| o * intensity as f64 / 3.0)
}

/// Pseudo-audio features for a track under a speaking state.
pub fn synth_features(world: &World, track: &[u8], emotion: Emotion, intensity: u8, noise: f64, rng: &mut Rng) -> Mat<f64> {
    let d = world.phon.cols();
    let w = intensity as f64 / 3.0;
    let e = world.emo.row(emotion.index());
    Mat::from_fn(track.len(), d, |t, j| world.phon.get(track[t] as usize, j) + e[j] * w + noise * randn(rng))
}

/// Ground-truth coefficients `[T, POSE_DIM + dim_psi]`.
pub fn synth_coeffs(track: &[u8], state: &SpeakingState, dim_psi: usize, rng: &mut Rng) -> Mat<f64> {
    let lips = lip_trajectory(track);
    let offs = emotion_offsets(state.emotion, state.intensity);
    let waves: Vec<[f64; 4]> = (0..EMOTION_CHANNELS.len())
        .map(|_| {
            [
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let mut m = Mat::zeros(track.len(), POSE_DIM + dim_psi);
    for (t, lip) in lips.iter().enumerate() {
        for (k, &ch) in VISEME_CHANNELS.iter().enumerate() {
            m.set(t, POSE_DIM + ch, lip[k]);
        }
        for (k, action) in EMOTION_CHANNELS.iter().enumerate() {
            let [f1, p1, f2, p2] = waves[k];
            let tt = t as f64;
            let wiggle = WIGGLE * ((f1 * tt + p1).sin() + (f2 * tt + p2).sin());
            let jitter = state.style_jitter.get(k).copied().unwrap_or(0.0);
            m.set(t, POSE_DIM + action.channel(), offs[k] + jitter + wiggle);
        }
    }
    m
}

fn instruction_sample(vocab: &Vocab, emotion: Emotion, intensity: u8, rng: &mut Rng) -> InstructionSample {
    let text = render_instruction(emotion, intensity, rng);
    let tokens = vocab.encode(&text).expect("grammar output is in the vocabulary");
    InstructionSample { text, tokens }
}

/// Samples a fresh instruction for a state (the synonym augmentation path).
pub fn gen_instruction(vocab: &Vocab, emotion: Emotion, intensity: u8, rng: &mut Rng) -> InstructionSample {
    instruction_sample(vocab, emotion, intensity, rng)
}

struct RecordPlan {
    state_emotion: Emotion,
    intensity: u8,
    track: Vec<u8>,
}

fn build_record(id: String, plan: RecordPlan, seed: u64, cfg: &CorpusConfig, world: &World, vocab: &Vocab) -> CorpusRecord {
    let mut rng = rng_from(seed);
    let style_jitter = [(); 4].map(|_| rng.random_range(-JITTER..=JITTER));
    let state = SpeakingState { emotion: plan.state_emotion, intensity: plan.intensity, style_jitter };
    let features = synth_features(world, &plan.track, state.emotion, state.intensity, cfg.feature_noise, &mut rng);
    let coeffs = synth_coeffs(&plan.track, &state, cfg.dim_psi, &mut rng);
    let instruction = instruction_sample(vocab, state.emotion, state.intensity, &mut rng);
    CorpusRecord {
        id,
        split: Split::Train,
        state,
        phonemes: plan.track,
        features: features.cast(),
        coeffs: coeffs.cast(),
        instruction,
    }
}

/// A single record with a random state, drawn entirely from `seed`. Uses the corpus
/// world embeddings of `cfg.seed`.
pub fn gen_record(seed: u64, cfg: &CorpusConfig) -> Result<CorpusRecord> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(seed, "plan", 0));
    let emotion = Emotion::from_index(rng.random_range(0..N_EMOTIONS)).expect("in range");
    let intensity = rng.random_range(1..=3u8);
    let n = rng.random_range(cfg.t_min..=cfg.t_max);
    let track = gen_phonemes(n, &mut rng);
    let world = World::new(cfg.seed, cfg.d_a);
    let vocab = Vocab::build();
    let plan = RecordPlan { state_emotion: emotion, intensity, track };
    Ok(build_record(format!("s{seed}"), plan, derive_seed(seed, "record", 0), cfg, &world, &vocab))
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter().filter(move |r| r.split == s)
    }

    pub fn get(&self, id: &str) -> Option<&CorpusRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn dim_psi(&self) -> usize {
        self.config.dim_psi
    }
}

/// Generates a full corpus in memory.
///
/// Record `i` lands in cell `i mod 24`; each run of 8 consecutive records shares one
/// viseme track and covers all eight emotions, so lip content is independent of emotion
/// by construction. Splits are drawn per cell.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    if cfg.n_records < N_CELLS {
        return param(format!("need at least {N_CELLS} records to cover every cell"));
    }
    let world = World::new(cfg.seed, cfg.d_a);
    let vocab = Vocab::build();
    let mut tracks: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
    let mut records = Vec::with_capacity(cfg.n_records);
    for i in 0..cfg.n_records {
        let block = i / N_EMOTIONS;
        let track = tracks
            .entry(block)
            .or_insert_with(|| {
                let mut rng = rng_from(derive_seed(cfg.seed, "track", block as u64));
                let n = rng.random_range(cfg.t_min..=cfg.t_max);
                gen_phonemes(n, &mut rng)
            })
            .clone();
        let cell = i % N_CELLS;
        let plan = RecordPlan {
            state_emotion: Emotion::from_index(cell % N_EMOTIONS).expect("in range"),
            intensity: (cell / N_EMOTIONS + 1) as u8,
            track,
        };
        records.push(build_record(format!("r{i:05}"), plan, derive_seed(cfg.seed, "record", i as u64), cfg, &world, &vocab));
    }
    assign_splits(&mut records, cfg);
    Ok(Corpus { config: cfg.clone(), vocab, records })
}

fn assign_splits(records: &mut [CorpusRecord], cfg: &CorpusConfig) {
    let mut by_cell: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_cell.entry(r.state.cell()).or_default().push(i);
    }
    for (cell, idx) in by_cell {
        let n = idx.len();
        let n_test = (cfg.split_fractions[2] * n as f64).round() as usize;
        let n_val = ((cfg.split_fractions[1] * n as f64).round() as usize).min(n - n_test);
        let mut rng = rng_from(derive_seed(cfg.seed, "split", cell as u64));
        for (rank, k) in shuffled(n, &mut rng).into_iter().enumerate() {
            records[idx[k]].split = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
}

/// Shuffles the run segments of a track, keeping each run intact.
pub fn shuffle_runs(track: &[u8], rng: &mut Rng) -> Vec<u8> {
    let segs = runs(track);
    let order = shuffled(segs.len(), rng);
    order.into_iter().flat_map(|k| std::iter::repeat_n(track[segs[k].0], segs[k].1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::Action;

    fn small() -> CorpusConfig {
        CorpusConfig { n_records: 240, t_min: 20, t_max: 40, ..CorpusConfig::default() }
    }

    #[test]
    fn runs_respect_articulation_bounds() {
        let mut rng = rng_from(1);
        for n in [3, 7, 8, 9, 11, 50, 100] {
            let t = gen_phonemes(n, &mut rng);
            assert_eq!(t.len(), n);
            for (_, len) in runs(&t) {
                assert!((MIN_RUN..=MAX_RUN).contains(&len), "{len}");
            }
        }
    }

    #[test]
    fn neutral_has_no_emotion_offset() {
        for i in 1..=3 {
            assert_eq!(emotion_offsets(Emotion::Neutral, i), [0.0; 5]);
        }
    }

    #[test]
    fn strong_happy_raises_lip_corners() {
        let cfg = small();
        let mut rng = rng_from(3);
        let track = gen_phonemes(60, &mut rng);
        let state = SpeakingState { emotion: Emotion::Happy, intensity: 3, style_jitter: [-JITTER; 4] };
        let m = synth_coeffs(&track, &state, cfg.dim_psi, &mut rng);
        let ch = POSE_DIM + Action::LipCornerRaise.channel();
        let mean = (0..m.rows()).map(|r| m.get(r, ch)).sum::<f64>() / m.rows() as f64;
        // 1.0 offset, worst-case jitter -0.04, wiggle bounded by 0.05
        assert!(mean > 0.3 && mean > 1.0 - 0.04 - 0.05 - 1e-12, "{mean}");
    }

    #[test]
    fn lip_channels_ignore_emotion() {
        let mut rng = rng_from(5);
        let track = gen_phonemes(40, &mut rng);
        let a = synth_coeffs(&track, &SpeakingState { emotion: Emotion::Happy, intensity: 3, style_jitter: [0.0; 4] }, 16, &mut rng);
        let b = synth_coeffs(&track, &SpeakingState { emotion: Emotion::Sad, intensity: 1, style_jitter: [0.02; 4] }, 16, &mut rng);
        for ch in VISEME_CHANNELS {
            for t in 0..track.len() {
                assert_eq!(a.get(t, POSE_DIM + ch), b.get(t, POSE_DIM + ch));
            }
        }
        for t in 0..track.len() {
            assert!(a.row(t)[..POSE_DIM].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn corpus_is_stratified_and_splits_are_disjoint() {
        let c = gen_corpus(&small()).unwrap();
        let mut cells = [0usize; N_CELLS];
        for r in &c.records {
            cells[r.state.cell()] += 1;
            assert_eq!(r.coeffs.rows(), r.phonemes.len());
            assert_eq!(r.features.rows(), r.phonemes.len());
        }
        assert!(cells.iter().all(|&n| n == 10));
        assert_eq!(c.split(Split::Test).count(), 48);
        assert_eq!(c.split(Split::Val).count(), 24);
        let mut ids: Vec<&str> = c.records.iter().map(|r| r.id.as_str()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 240);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(gen_corpus(&CorpusConfig { n_records: 23, ..small() }).is_err());
        assert!(gen_corpus(&CorpusConfig { t_min: 2, ..small() }).is_err());
        assert!(gen_corpus(&CorpusConfig { split_fractions: [0.5, 0.5, 0.5], ..small() }).is_err());
        assert!(gen_record(1, &CorpusConfig { dim_psi: 6, ..small() }).is_err());
    }

    #[test]
    fn record_generation_is_deterministic() {
        let cfg = small();
        assert_eq!(gen_record(9, &cfg).unwrap(), gen_record(9, &cfg).unwrap());
        assert_ne!(gen_record(9, &cfg).unwrap().features, gen_record(10, &cfg).unwrap().features);
    }

    #[test]
    fn shuffled_runs_keep_the_multiset() {
        let mut rng = rng_from(2);
        let t = gen_phonemes(80, &mut rng);
        let s = shuffle_runs(&t, &mut rng);
        let mut a = t.clone();
        let mut b = s.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_ne!(t, s);
    }
}
