//! Disentangled motion prior: a local content encoder over pseudo-audio, an
//! order-invariant style encoder over reference coefficient frames, and a generator
//! fusing both into coefficient sequences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::CorpusRecord;
use crate::error::{format, param, Result};
use crate::face_model::POSE_DIM;
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainkit::{derive_seed, rng_from, train_step, AdamConfig, AdamState, Bound, ParamSet, Rng};

pub const TAG: &str = "motion_prior";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionPriorConfig {
    pub d_a: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub dim_psi: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub kernel: usize,
    /// Reference frames fed to the style encoder.
    pub s_ref: usize,
    pub window: usize,
    /// Frames on each side of the training window kept out of the reference set.
    pub exclusion: usize,
    pub vel_weight: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for MotionPriorConfig {
    fn default() -> Self {
        MotionPriorConfig {
            d_a: 32,
            d_c: 32,
            d_s: 16,
            dim_psi: crate::face_model::DEFAULT_DIM_PSI,
            width: 32,
            heads: 4,
            blocks: 2,
            kernel: 5,
            s_ref: 32,
            window: 32,
            exclusion: 2,
            vel_weight: 0.5,
            lr: 2e-3,
            steps: 1200,
            batch: 8,
            clip: 1.0,
            seed: 0,
        }
    }
}

impl MotionPriorConfig {
    pub fn coeff_dim(&self) -> usize {
        POSE_DIM + self.dim_psi
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return param("content kernel must be odd");
        }
        if self.s_ref < 2 {
            return param("style encoder needs at least 2 reference frames");
        }
        if self.width % self.heads != 0 {
            return param("width must divide into heads");
        }
        if self.window < 2 || self.batch == 0 {
            return param("window and batch must be positive");
        }
        Ok(())
    }
}

/// Layer layout; values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct MotionPriorNet {
    kernel: usize,
    conv1: Linear,
    conv2: Linear,
    style_in: Linear,
    style_blocks: Vec<TransformerBlock>,
    style_ln: LayerNorm,
    style_out: Linear,
    gen_content: Linear,
    gen_style: Linear,
    gen_blocks: Vec<TransformerBlock>,
    gen_ln: LayerNorm,
    gen_out: Linear,
}

impl MotionPriorNet {
    pub fn build<T: Scalar>(c: &MotionPriorConfig, ps: &mut ParamSet<T>, rng: &mut Rng) -> Self {
        let d = c.coeff_dim();
        MotionPriorNet {
            kernel: c.kernel,
            conv1: Linear::new(ps, "content.conv1", c.kernel * c.d_a, c.d_c, rng),
            conv2: Linear::new(ps, "content.conv2", c.kernel * c.d_c, c.d_c, rng),
            style_in: Linear::new(ps, "style.in", d, c.width, rng),
            style_blocks: (0..c.blocks)
                .map(|i| TransformerBlock::new(ps, &format!("style.block{i}"), c.width, c.heads, 2, rng))
                .collect(),
            style_ln: LayerNorm::new(ps, "style.ln", c.width),
            style_out: Linear::new(ps, "style.out", c.width, c.d_s, rng),
            gen_content: Linear::new(ps, "gen.content", c.d_c, c.width, rng),
            gen_style: Linear::new(ps, "gen.style", c.d_s, c.width, rng),
            gen_blocks: (0..c.blocks)
                .map(|i| TransformerBlock::new(ps, &format!("gen.block{i}"), c.width, c.heads, 2, rng))
                .collect(),
            gen_ln: LayerNorm::new(ps, "gen.ln", c.width),
            gen_out: Linear::new(ps, "gen.out", c.width, d, rng),
        }
    }

    /// `[T, d_a] → [T, d_c]`: two replicate-padded temporal convolutions.
    pub fn content<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, feats: Var) -> Var {
        let u = g.unfold(feats, self.kernel);
        let h = self.conv1.forward(g, p, u);
        let h = g.gelu(h);
        let u = g.unfold(h, self.kernel);
        self.conv2.forward(g, p, u)
    }

    /// `[S, coeff_dim] → [1, d_s]`, mean-pooled and without positions.
    pub fn style<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> Var {
        let mut h = self.style_in.forward(g, p, frames);
        for b in &self.style_blocks {
            h = b.forward(g, p, h, None);
        }
        let h = self.style_ln.forward(g, p, h);
        let pooled = g.mean_rows(h);
        self.style_out.forward(g, p, pooled)
    }

    /// `([T, d_c], [1, d_s]) → [T, coeff_dim]`
    pub fn generate<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, content: Var, z: Var) -> Var {
        let n = g.value(content).rows();
        let c = self.gen_content.forward(g, p, content);
        let s = self.gen_style.forward(g, p, z);
        let s = g.broadcast_rows(s, n);
        let mut h = g.add(c, s);
        for b in &self.gen_blocks {
            h = b.forward(g, p, h, None);
        }
        let h = self.gen_ln.forward(g, p, h);
        self.gen_out.forward(g, p, h)
    }
}

/// One training example: a window of a clip plus reference frames from elsewhere in it.
#[derive(Clone, Debug)]
pub struct WindowSample<T> {
    /// Features for the window plus up to `kernel - 1` context frames on each side.
    pub feats: Mat<T>,
    /// Row of `feats` where the window starts.
    pub offset: usize,
    pub target: Mat<T>,
    pub refs: Mat<T>,
}

/// Reconstruction loss `MSE + w·MSE(Δ)` averaged over the batch.
pub fn reconstruction_loss<T: Scalar>(
    net: &MotionPriorNet,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &[WindowSample<T>],
    vel_weight: f64,
) -> Var {
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let w = s.target.rows();
        let f = g.constant(s.feats.clone());
        let c = net.content(g, p, f);
        let c = g.slice_rows(c, s.offset, w);
        let r = g.constant(s.refs.clone());
        let z = net.style(g, p, r);
        let pred = net.generate(g, p, c, z);
        let tgt = g.constant(s.target.clone());
        let diff = g.sub(pred, tgt);
        let sq = g.square(diff);
        let mut loss = g.mean_all(sq);
        if w > 1 && vel_weight > 0.0 {
            let a = g.slice_rows(diff, 1, w - 1);
            let b = g.slice_rows(diff, 0, w - 1);
            let dv = g.sub(a, b);
            let sq = g.square(dv);
            let v = g.mean_all(sq);
            let v = g.scale(v, T::lit(vel_weight));
            loss = g.add(loss, v);
        }
        terms.push(loss);
    }
    let all = g.concat_rows(&terms);
    g.mean_all(all)
}

/// Draws a training window and reference set from one clip.
pub fn sample_window<T: Scalar>(feats: &Mat<T>, coeffs: &Mat<T>, cfg: &MotionPriorConfig, rng: &mut Rng) -> WindowSample<T> {
    let n = coeffs.rows();
    let w = cfg.window.min(n);
    let start = rng.random_range(0..=n - w);
    let ctx = cfg.kernel - 1;
    let lo = start.saturating_sub(ctx);
    let hi = (start + w + ctx).min(n);
    let feats = Mat::from_fn(hi - lo, feats.cols(), |r, c| feats.get(lo + r, c));
    let target = Mat::from_fn(w, coeffs.cols(), |r, c| coeffs.get(start + r, c));
    let ex_lo = start.saturating_sub(cfg.exclusion);
    let ex_hi = (start + w + cfg.exclusion).min(n);
    let mut pool: Vec<usize> = (0..n).filter(|&t| t < ex_lo || t >= ex_hi).collect();
    if pool.is_empty() {
        pool = (0..n).collect();
    }
    let refs = Mat::from_fn(cfg.s_ref, coeffs.cols(), |_, _| T::zero());
    let mut refs = refs;
    for r in 0..cfg.s_ref {
        let t = pool[rng.random_range(0..pool.len())];
        refs.row_mut(r).copy_from_slice(coeffs.row(t));
    }
    WindowSample { feats, offset: start - lo, target, refs }
}

/// `s` evenly spaced frames of a coefficient sequence (the inference reference set).
pub fn reference_frames<T: Scalar>(coeffs: &Mat<T>, s: usize) -> Mat<T> {
    let n = coeffs.rows();
    Mat::from_fn(s, coeffs.cols(), |r, c| coeffs.get(((2 * r + 1) * n) / (2 * s), c))
}

#[derive(Clone, Debug)]
pub struct MotionPrior<T> {
    pub config: MotionPriorConfig,
    pub net: MotionPriorNet,
    pub params: ParamSet<T>,
}

impl<T: Scalar> MotionPrior<T> {
    pub fn new(config: MotionPriorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng_from(derive_seed(config.seed, "motion_prior.init", 0));
        let net = MotionPriorNet::build(&config, &mut params, &mut rng);
        Ok(MotionPrior { config, net, params })
    }

    fn frozen(&self) -> (Graph<T>, Bound) {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        (g, p)
    }

    pub fn encode_content(&self, feats: &Mat<T>) -> Result<Mat<T>> {
        if feats.rows() == 0 || feats.cols() != self.config.d_a {
            return param(format!("features {:?} do not match d_a={}", feats.shape(), self.config.d_a));
        }
        let (mut g, p) = self.frozen();
        let x = g.constant(feats.clone());
        let c = self.net.content(&mut g, &p, x);
        Ok(g.value(c).clone())
    }

    pub fn encode_style(&self, frames: &Mat<T>) -> Result<Vec<T>> {
        if frames.rows() < 2 {
            return param("style encoder needs at least 2 reference frames");
        }
        if frames.cols() != self.config.coeff_dim() {
            return param(format!("reference frames have {} columns, expected {}", frames.cols(), self.config.coeff_dim()));
        }
        let (mut g, p) = self.frozen();
        let x = g.constant(frames.clone());
        let z = self.net.style(&mut g, &p, x);
        Ok(g.value(z).data().to_vec())
    }

    /// Style of a whole clip from evenly spaced reference frames.
    pub fn clip_style(&self, coeffs: &Mat<T>) -> Result<Vec<T>> {
        self.encode_style(&reference_frames(coeffs, self.config.s_ref))
    }

    /// Coefficients for a content stream under a style; pose columns are held at zero.
    pub fn generate(&self, content: &Mat<T>, z: &[T]) -> Result<Mat<T>> {
        if z.len() != self.config.d_s || content.cols() != self.config.d_c {
            return param("content or style width mismatch");
        }
        let (mut g, p) = self.frozen();
        let c = g.constant(content.clone());
        let zv = g.constant(Mat::row_vector(z.to_vec()));
        let out = self.net.generate(&mut g, &p, c, zv);
        let mut m = g.value(out).clone();
        for r in 0..m.rows() {
            m.row_mut(r)[..POSE_DIM].fill(T::zero());
        }
        Ok(m)
    }

    pub fn batch_loss(&self, batch: &[WindowSample<T>]) -> f64 {
        let (mut g, p) = self.frozen();
        let l = reconstruction_loss(&self.net, &mut g, &p, batch, self.config.vel_weight);
        g.scalar(l).as_f64()
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
        let mut m = MotionPrior::new(c.config()?)?;
        c.load_params("", &mut m.params)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub train_losses: Vec<f64>,
}

fn clip_mats<T: Scalar>(r: &CorpusRecord) -> (Mat<T>, Mat<T>) {
    (r.features.cast(), r.coeffs.cast())
}

/// Fixed validation windows so losses are comparable across training.
fn val_batch<T: Scalar>(val: &[&CorpusRecord], cfg: &MotionPriorConfig) -> Vec<WindowSample<T>> {
    let mut rng = rng_from(derive_seed(cfg.seed, "motion_prior.val", 0));
    val.iter()
        .take(64)
        .map(|r| {
            let (f, c) = clip_mats::<T>(r);
            sample_window(&f, &c, cfg, &mut rng)
        })
        .collect()
}

pub fn train_prior<T: Scalar>(
    train: &[&CorpusRecord],
    val: &[&CorpusRecord],
    cfg: &MotionPriorConfig,
) -> Result<(MotionPrior<T>, TrainReport)> {
    if train.is_empty() {
        return param("empty training split");
    }
    let first = train[0];
    if first.features.cols() != cfg.d_a || first.coeffs.cols() != cfg.coeff_dim() {
        return format(format!(
            "corpus shapes ({}, {}) do not match the prior config ({}, {})",
            first.features.cols(),
            first.coeffs.cols(),
            cfg.d_a,
            cfg.coeff_dim()
        ));
    }
    let mut model = MotionPrior::<T>::new(cfg.clone())?;
    let clips: Vec<(Mat<T>, Mat<T>)> = train.iter().map(|r| clip_mats(r)).collect();
    let vb = val_batch::<T>(if val.is_empty() { train } else { val }, cfg);
    let mut report = TrainReport { initial_val_loss: model.batch_loss(&vb), ..TrainReport::default() };
    let mut state = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = rng_from(derive_seed(cfg.seed, "motion_prior.train", 0));
    for _ in 0..cfg.steps {
        let batch: Vec<WindowSample<T>> = (0..cfg.batch)
            .map(|_| {
                let (f, c) = &clips[rng.random_range(0..clips.len())];
                sample_window(f, c, cfg, &mut rng)
            })
            .collect();
        let net = model.net.clone();
        let l = train_step(&mut model.params, &mut state, cfg.clip, |g, p| {
            Ok(reconstruction_loss(&net, g, p, &batch, cfg.vel_weight))
        })?;
        report.train_losses.push(l);
    }
    report.final_val_loss = model.batch_loss(&vb);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainkit::randn;

    fn mini() -> MotionPriorConfig {
        MotionPriorConfig { d_a: 4, d_c: 4, d_s: 3, dim_psi: 8, width: 8, heads: 2, blocks: 1, s_ref: 4, window: 6, ..Default::default() }
    }

    fn rand_mat(r: usize, c: usize, rng: &mut Rng) -> Mat<f64> {
        Mat::from_fn(r, c, |_, _| randn(rng))
    }

    #[test]
    fn content_encoder_is_local_and_length_preserving() {
        let m = MotionPrior::<f64>::new(MotionPriorConfig { steps: 0, ..Default::default() }).unwrap();
        let mut rng = rng_from(1);
        for n in [1, 50, 100] {
            assert_eq!(m.encode_content(&rand_mat(n, 32, &mut rng)).unwrap().rows(), n);
        }
        let row: Vec<f64> = (0..32).map(|_| randn(&mut rng)).collect();
        let flat = m.encode_content(&Mat::from_fn(20, 32, |_, c| row[c])).unwrap();
        for r in 1..20 {
            for c in 0..32 {
                assert!((flat.get(r, c) - flat.get(0, c)).abs() < 1e-12);
            }
        }
        let x = rand_mat(60, 32, &mut rng);
        let shifted = Mat::from_fn(70, 32, |r, c| if r < 10 { randn(&mut rng) } else { x.get(r - 10, c) });
        let a = m.encode_content(&x).unwrap();
        let b = m.encode_content(&shifted).unwrap();
        for t in 8..50 {
            for c in 0..32 {
                assert!((a.get(t, c) - b.get(t + 10, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn style_encoder_ignores_order_and_duplication() {
        let m = MotionPrior::<f64>::new(MotionPriorConfig::default()).unwrap();
        let mut rng = rng_from(2);
        let frames = rand_mat(12, 25, &mut rng);
        let z = m.encode_style(&frames).unwrap();
        let perm = crate::trainkit::shuffled(12, &mut rng);
        let permuted = Mat::from_fn(12, 25, |r, c| frames.get(perm[r], c));
        let doubled = Mat::from_fn(24, 25, |r, c| frames.get(r / 2, c));
        for (a, b) in z.iter().zip(m.encode_style(&permuted).unwrap()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in z.iter().zip(m.encode_style(&doubled).unwrap()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(m.encode_style(&rand_mat(1, 25, &mut rng)).is_err());
    }

    #[test]
    fn generate_zeroes_pose_and_matches_length() {
        let m = MotionPrior::<f64>::new(MotionPriorConfig::default()).unwrap();
        let mut rng = rng_from(3);
        let c = m.encode_content(&rand_mat(17, 32, &mut rng)).unwrap();
        let out = m.generate(&c, &vec![0.1; 16]).unwrap();
        assert_eq!(out.shape(), (17, 25));
        assert!((0..17).all(|r| out.row(r)[..POSE_DIM].iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn reconstruction_loss_gradients_match_differences() {
        let cfg = mini();
        let mut rng = rng_from(4);
        let m = MotionPrior::<f64>::new(cfg.clone()).unwrap();
        let batch: Vec<WindowSample<f64>> = (0..2)
            .map(|_| {
                let f = rand_mat(12, cfg.d_a, &mut rng);
                let c = rand_mat(12, cfg.coeff_dim(), &mut rng);
                sample_window(&f, &c, &cfg, &mut rng)
            })
            .collect();
        let err = crate::trainkit::grad_check_graph(&m.params, 1e-5, |g, p| {
            Ok(reconstruction_loss(&m.net, g, p, &batch, cfg.vel_weight))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn windows_exclude_their_neighbourhood_from_references() {
        let cfg = MotionPriorConfig { window: 10, s_ref: 64, ..mini() };
        let mut rng = rng_from(5);
        let coeffs = Mat::from_fn(40, cfg.coeff_dim(), |r, _| r as f64);
        let feats = Mat::from_fn(40, cfg.d_a, |r, _| r as f64);
        for _ in 0..20 {
            let s = sample_window(&feats, &coeffs, &cfg, &mut rng);
            let start = s.target.get(0, 0) as usize;
            assert_eq!(s.feats.get(s.offset, 0) as usize, start);
            for r in 0..s.refs.rows() {
                let t = s.refs.get(r, 0) as usize;
                assert!(t + cfg.exclusion < start || t >= start + 10 + cfg.exclusion, "{t} near {start}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MotionPrior::<f32>::new(mini()).unwrap();
        let c = m.to_checkpoint().unwrap();
        let back = MotionPrior::<f32>::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes(), TAG).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), c.to_bytes());
    }
}
