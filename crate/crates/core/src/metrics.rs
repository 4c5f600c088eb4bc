//! Evaluation metrics: sample diversity, BLEU, ROUGE-L, lip vertex error and linear probes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{param, Error, Result};
use crate::face_model::{flame_forward, CoeffSequence, ExpressionParams, HeadTemplate, Region, ShapeParams};
use crate::tensor::Mat;
use crate::trainkit::{derive_seed, rng_from, shuffled, train_step, AdamConfig, AdamState, ParamId, ParamSet};

/// Mean Euclidean distance over all unordered pairs.
pub fn diversity(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return param("diversity needs at least two samples");
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if samples[i].len() != samples[j].len() {
                return param("samples differ in dimension");
            }
            total += samples[i].iter().zip(&samples[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuOptions {
    /// Replaces zero matched counts with this value (0 disables smoothing).
    pub epsilon: f64,
}

/// Corpus-level BLEU with uniform weights over orders `1..=n`, clipped n-gram precision and
/// a brevity penalty against the closest reference length.
pub fn corpus_bleu<S: AsRef<str>>(cands: &[Vec<S>], refs: &[Vec<Vec<S>>], n: usize, opts: BleuOptions) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return param(format!("BLEU order {n} outside 1..=4"));
    }
    if cands.len() != refs.len() {
        return param("one reference set per candidate required");
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        if rs.is_empty() {
            return param("candidate without references");
        }
        c_len += cand.len();
        let closest = rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty");
        r_len += closest;
        for k in 1..=n {
            let cc = ngram_counts(cand, k);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cc {
                matched[k - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[k - 1] += cand.len().saturating_sub(k - 1);
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for k in 0..n {
        let m = if matched[k] == 0 { opts.epsilon } else { matched[k] as f64 };
        if m == 0.0 || total[k] == 0 {
            return Ok(0.0);
        }
        log_p += (m / total[k] as f64).ln() / n as f64;
    }
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

/// Single-candidate BLEU.
pub fn bleu_n<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>], n: usize) -> Result<f64>
where
    S: Clone,
{
    corpus_bleu(&[cand.to_vec()], &[refs.to_vec()], n, BleuOptions::default())
}

pub const ROUGE_BETA: f64 = 1.2;

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1+β²)PR / (R + β²P)` with β = 1.2.
pub fn rouge_l<S: AsRef<str>>(cand: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return param("ROUGE-L needs a non-empty reference");
    }
    let l = lcs(cand, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Mean over frames of the mean lip-vertex distance between two animations.
pub fn lip_vertex_error(pred: &CoeffSequence<f64>, gt: &CoeffSequence<f64>, template: &HeadTemplate<f64>) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return param(format!("sequence lengths {} and {} differ", pred.len(), gt.len()));
    }
    let lips = template.region(Region::Lips);
    let beta = ShapeParams::default();
    let mut total = 0.0;
    for (a, b) in pred.frames.iter().zip(&gt.frames) {
        let ma = flame_forward(template, &beta, &a.pose, &a.expr)?;
        let mb = flame_forward(template, &beta, &b.pose, &b.expr)?;
        let d: f64 = lips
            .iter()
            .map(|&v| (0..3).map(|k| (ma.vertices.get(v, k) - mb.vertices.get(v, k)).powi(2)).sum::<f64>().sqrt())
            .sum();
        total += d / lips.len() as f64;
    }
    Ok(total / pred.len() as f64)
}

/// Lip error for coefficient matrices `[T, POSE_DIM + dim_psi]` (zero pose assumed).
pub fn lip_vertex_error_mat(pred: &Mat<f64>, gt: &Mat<f64>, template: &HeadTemplate<f64>) -> Result<f64> {
    lip_vertex_error(&CoeffSequence::from_mat(pred)?, &CoeffSequence::from_mat(gt)?, template)
}

/// Neutral expression for a template.
pub fn neutral_expr(template: &HeadTemplate<f64>) -> ExpressionParams<f64> {
    ExpressionParams { psi: vec![0.0; template.dim_psi()] }
}

pub const PROBE_STEPS: usize = 300;
pub const PROBE_LR: f64 = 0.05;
pub const PROBE_MIN_PER_CLASS: usize = 10;

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    classes: Vec<usize>,
    mean: Vec<f64>,
    std: Vec<f64>,
    params: ParamSet<f64>,
    w: ParamId,
    b: ParamId,
}

impl LinearProbe {
    /// Full-batch Adam fit; needs at least two classes.
    pub fn fit(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        if embeddings.len() != labels.len() || embeddings.is_empty() {
            return param("one label per embedding required");
        }
        let d = embeddings[0].len();
        if d == 0 || embeddings.iter().any(|e| e.len() != d) {
            return param("embeddings must share a positive dimension");
        }
        let classes: Vec<usize> = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        if classes.len() < 2 {
            return param("probe needs at least two classes");
        }
        let n = embeddings.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| embeddings.iter().map(|e| e[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| {
                let v = embeddings.iter().map(|e| (e[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let x = Mat::from_fn(embeddings.len(), d, |r, j| (embeddings[r][j] - mean[j]) / std[j]);
        let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("known class")).collect();
        let mut params = ParamSet::<f64>::new();
        let w = params.register("w", Mat::zeros(d, classes.len()));
        let b = params.register("b", Mat::zeros(1, classes.len()));
        let mut state = AdamState::new(&params, AdamConfig::with_lr(PROBE_LR));
        for _ in 0..PROBE_STEPS {
            train_step(&mut params, &mut state, 0.0, |g, p| {
                let xv = g.constant(x.clone());
                let z = g.matmul(xv, p.var(w));
                let z = g.add_row(z, p.var(b));
                Ok(g.cross_entropy(z, &y))
            })?;
        }
        Ok(LinearProbe { classes, mean, std, params, w, b })
    }

    pub fn predict(&self, embeddings: &[Vec<f64>]) -> Result<Vec<usize>> {
        let d = self.mean.len();
        if embeddings.iter().any(|e| e.len() != d) {
            return param(format!("probe expects {d}-dimensional embeddings"));
        }
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        let x = Mat::from_fn(embeddings.len(), d, |r, j| (embeddings[r][j] - self.mean[j]) / self.std[j]);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let z = g.matmul(xv, p.var(self.w));
        let z = g.add_row(z, p.var(self.b));
        let logits = g.value(z);
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).expect("two classes");
                self.classes[best]
            })
            .collect())
    }

    pub fn accuracy(&self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if embeddings.len() != labels.len() || embeddings.is_empty() {
            return param("one label per embedding required");
        }
        let pred = self.predict(embeddings)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }
}

/// Whether [`probe_accuracy`] accepts these labels.
pub fn probe_ready(labels: &[usize]) -> bool {
    let mut count: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *count.entry(l).or_default() += 1;
    }
    count.len() >= 2 && count.values().all(|&n| n >= PROBE_MIN_PER_CLASS)
}

/// Held-out accuracy of a [`LinearProbe`].
///
/// Each class is split 80/20 after a seeded shuffle; features are standardized with
/// training statistics.
pub fn probe_accuracy(embeddings: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<f64> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return param("one label per embedding required");
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 || by_class.values().any(|v| v.len() < PROBE_MIN_PER_CLASS) {
        return param(format!("probe needs >= 2 classes with >= {PROBE_MIN_PER_CLASS} samples each"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&c, idx) in &by_class {
        let mut rng = rng_from(derive_seed(seed, "probe.split", c as u64));
        let order = shuffled(idx.len(), &mut rng);
        let n_test = (idx.len() as f64 * 0.2).round() as usize;
        for (rank, k) in order.into_iter().enumerate() {
            if rank < n_test {
                test.push(idx[k]);
            } else {
                train.push(idx[k]);
            }
        }
    }
    let pick = |rows: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (rows.iter().map(|&i| embeddings[i].clone()).collect(), rows.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    LinearProbe::fit(&xtr, &ytr)?.accuracy(&xte, &yte)
}

/// Named scalar results of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(variant: &str, seed: u64, split: &str, config: serde_json::Value) -> Self {
        MetricReport { variant: variant.into(), seed, split: split.into(), config, metrics: BTreeMap::new() }
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("metric {name} is {value}")));
        }
        self.metrics.insert(name.into(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: MetricReport = serde_json::from_str(s)?;
        if r.metrics.values().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite metric in report".into()));
        }
        Ok(r)
    }
}
