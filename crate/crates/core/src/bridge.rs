//! Instruction → style bridge: an MLP maps instruction embeddings next to the style
//! embeddings of the motion prior, and a conditional diffusion prior samples style
//! embeddings around that anchor.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::av_instruction::AvAlign;
use crate::checkpoint::Checkpoint;
use crate::corpus::{gen_instruction, CorpusRecord, Vocab, N_CELLS};
use crate::diffusion::{diffusion_loss_fixed, draw_t_eps, sample, Denoiser, NoiseSchedule, ScheduleConfig};
use crate::error::{format, param, Result};
use crate::motion_prior::MotionPrior;
use crate::nn::{sinusoidal, LayerNorm, Linear, Mlp, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainkit::{derive_seed, randn, rng_from, train_step, AdamConfig, AdamState, Bound, ParamId, ParamSet, Rng};

pub const TAG: &str = "bridge";
pub const DEFAULT_LAMBDA: f64 = 30.0;
/// Instruction renders kept per (emotion, intensity) cell for augmentation.
const AUG_POOL: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub l: usize,
    pub d_s: usize,
    pub hidden: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub lambda: f64,
    pub init_logit_scale: f64,
    pub schedule: ScheduleConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    /// Drop the diffusion prior: sampling returns the aligned anchor itself.
    pub no_diffusion: bool,
    /// Drop the contrastive term: the MLP learns only through the diffusion loss.
    pub no_cont_align: bool,
    pub no_aug: bool,
    pub seed: u64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            l: 64,
            d_s: 16,
            hidden: 128,
            width: 32,
            heads: 4,
            blocks: 2,
            lambda: DEFAULT_LAMBDA,
            init_logit_scale: (1.0f64 / 0.07).ln(),
            schedule: ScheduleConfig::default(),
            steps: 1500,
            batch: 32,
            lr: 1e-3,
            clip: 1.0,
            no_diffusion: false,
            no_cont_align: false,
            no_aug: false,
            seed: 0,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.no_diffusion && self.no_cont_align {
            return param("at least one bridge loss term must stay enabled");
        }
        if self.width % self.heads != 0 {
            return param("prior width must divide into heads");
        }
        if self.batch < 2 {
            return param("contrastive training needs batches of at least 2");
        }
        if !(self.lambda >= 0.0) {
            return param("lambda must be non-negative");
        }
        Ok(())
    }
}

/// `L_cont + λ·L_diff`.
pub fn compose_loss(l_cont: f64, l_diff: f64, lambda: f64) -> f64 {
    l_cont + lambda * l_diff
}

/// Symmetric InfoNCE over cosine logits scaled by `exp(log_scale)`.
pub fn contrastive_i2s_loss<T: Scalar>(g: &mut Graph<T>, c: Var, z: Var, log_scale: Var) -> Result<Var> {
    let b = g.value(c).rows();
    if b < 2 {
        return param("the i2s contrastive loss needs at least 2 pairs");
    }
    if g.value(z).rows() != b {
        return param("instruction and style batches differ in size");
    }
    let cn = g.l2_normalize_rows(c);
    let zn = g.l2_normalize_rows(z);
    let sim = g.matmul_bt(cn, zn);
    let scale = g.exp(log_scale);
    let logits = g.mul_scalar(sim, scale);
    let diag: Vec<usize> = (0..b).collect();
    let a = g.cross_entropy(logits, &diag);
    let t = g.transpose(logits);
    let bwd = g.cross_entropy(t, &diag);
    let sum = g.add(a, bwd);
    Ok(g.scale(sum, T::lit(0.5)))
}

/// Decoder-only transformer over `[c, t, z_t]` token triples, read at the `z_t` slot.
#[derive(Clone, Debug)]
pub struct PriorNet {
    c_in: Linear,
    t_in: Linear,
    z_in: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    out: Linear,
    width: usize,
}

impl PriorNet {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, d_s: usize, width: usize, heads: usize, blocks: usize, rng: &mut Rng) -> Self {
        PriorNet {
            c_in: Linear::new(ps, "prior.c_in", d_s, width, rng),
            t_in: Linear::new(ps, "prior.t_in", width, width, rng),
            z_in: Linear::new(ps, "prior.z_in", d_s, width, rng),
            pos: ps.register("prior.pos", Mat::from_fn(3, width, |_, _| T::lit(randn(rng) * 0.1))),
            blocks: (0..blocks).map(|i| TransformerBlock::new(ps, &format!("prior.block{i}"), width, heads, 2, rng)).collect(),
            ln: LayerNorm::new(ps, "prior.ln", width),
            out: Linear::new(ps, "prior.out", width, d_s, rng),
            width,
        }
    }

    /// Batched x0 prediction: `c`, `z_t` are `[B, d_s]`, one timestep per row.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, c: Var, z_t: Var, ts: &[usize]) -> Var {
        let b = ts.len();
        let mut temb = Mat::zeros(b, self.width);
        for (r, &t) in ts.iter().enumerate() {
            temb.row_mut(r).copy_from_slice(&sinusoidal::<T>(t, self.width));
        }
        let temb = g.constant(temb);
        let ct = self.c_in.forward(g, p, c);
        let tt = self.t_in.forward(g, p, temb);
        let zt = self.z_in.forward(g, p, z_t);
        let stacked = g.concat_rows(&[ct, tt, zt]);
        // interleave into per-item triples c_i, t_i, z_i
        let order: Vec<usize> = (0..b).flat_map(|i| [i, b + i, 2 * b + i]).collect();
        let x = g.gather_rows(stacked, &order);
        let pos_idx: Vec<usize> = (0..3 * b).map(|r| r % 3).collect();
        let pos = g.gather_rows(p.var(self.pos), &pos_idx);
        let mut h = g.add(x, pos);
        let mask = g.constant(Mat::from_fn(3 * b, 3 * b, |r, c| {
            if r / 3 == c / 3 && c <= r {
                T::zero()
            } else {
                T::lit(-1e9)
            }
        }));
        for blk in &self.blocks {
            h = blk.forward(g, p, h, Some(mask));
        }
        let h = self.ln.forward(g, p, h);
        let last: Vec<usize> = (0..b).map(|i| 3 * i + 2).collect();
        let h = g.gather_rows(h, &last);
        self.out.forward(g, p, h)
    }
}

/// Layer layout of a [`Bridge`].
#[derive(Clone, Debug)]
pub struct BridgeNet {
    pub mlp: Mlp,
    pub prior: PriorNet,
    pub log_scale: ParamId,
}

#[derive(Clone, Debug)]
pub struct Bridge<T> {
    pub config: BridgeConfig,
    pub net: BridgeNet,
    pub params: ParamSet<T>,
    /// Per-dimension statistics of the training style embeddings; the bridge works in
    /// the standardized space.
    pub z_mean: Vec<f64>,
    pub z_std: Vec<f64>,
}

impl<T: Scalar> Bridge<T> {
    pub fn new(config: BridgeConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = rng_from(derive_seed(c.seed, "bridge.init", 0));
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "bridge.mlp", &[c.l, c.hidden, c.hidden, c.d_s], &mut rng);
        let prior = PriorNet::new(&mut params, c.d_s, c.width, c.heads, c.blocks, &mut rng);
        let log_scale = params.register("bridge.log_scale", Mat::scalar(T::lit(c.init_logit_scale)));
        let (z_mean, z_std) = (vec![0.0; c.d_s], vec![1.0; c.d_s]);
        Ok(Bridge { config, net: BridgeNet { mlp, prior, log_scale }, params, z_mean, z_std })
    }

    fn frozen(&self) -> (Graph<T>, Bound) {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        (g, p)
    }

    /// Anchor `c` (standardized style space) for one instruction embedding.
    pub fn align_i2s(&self, f_i: &[T]) -> Result<Vec<T>> {
        if f_i.len() != self.config.l {
            return param(format!("instruction embedding has width {}, expected {}", f_i.len(), self.config.l));
        }
        let (mut g, p) = self.frozen();
        let x = g.constant(Mat::row_vector(f_i.to_vec()));
        let c = self.net.mlp.forward(&mut g, &p, x);
        Ok(g.value(c).data().to_vec())
    }

    pub fn standardize(&self, z: &[T]) -> Vec<T> {
        z.iter().zip(self.z_mean.iter().zip(&self.z_std)).map(|(&v, (m, s))| T::lit((v.as_f64() - m) / s)).collect()
    }

    pub fn destandardize(&self, z: &[T]) -> Vec<T> {
        z.iter().zip(self.z_mean.iter().zip(&self.z_std)).map(|(&v, (m, s))| T::lit(v.as_f64() * s + m)).collect()
    }

    /// Style embeddings for an instruction embedding, one per derived seed.
    pub fn sample_from_embedding(&self, f_i: &[T], n: usize, seed: u64) -> Result<Vec<Vec<T>>> {
        if n == 0 {
            return param("n_samples must be at least 1");
        }
        let c = self.align_i2s(f_i)?;
        if self.config.no_diffusion {
            return Ok(vec![self.destandardize(&c); n]);
        }
        let sched = NoiseSchedule::from_config(&self.config.schedule)?;
        let den = PriorDenoiser { bridge: self };
        (0..n)
            .map(|k| {
                let mut rng = rng_from(derive_seed(seed, "bridge.sample", k as u64));
                Ok(self.destandardize(&sample(&den, &c, &sched, &mut rng)?))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(TAG, &self.config)?;
        c.put_params("", &self.params);
        c.put::<f64>("stats.z_mean", &Mat::row_vector(self.z_mean.clone()));
        c.put::<f64>("stats.z_std", &Mat::row_vector(self.z_std.clone()));
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.tag() != TAG {
            return format(format!("expected a {TAG} checkpoint, got {}", c.tag()));
        }
        let mut b = Bridge::new(c.config()?)?;
        c.load_params("", &mut b.params)?;
        b.z_mean = c.get::<f64>("stats.z_mean")?.into_vec();
        b.z_std = c.get::<f64>("stats.z_std")?.into_vec();
        if b.z_mean.len() != b.config.d_s || b.z_std.len() != b.config.d_s {
            return format("style statistics do not match d_s");
        }
        Ok(b)
    }
}

struct PriorDenoiser<'a, T> {
    bridge: &'a Bridge<T>,
}

impl<T: Scalar> Denoiser<T> for PriorDenoiser<'_, T> {
    fn dim(&self) -> usize {
        self.bridge.config.d_s
    }

    fn predict(&self, x_t: &[T], t: usize, cond: &[T]) -> Result<Vec<T>> {
        let (mut g, p) = self.bridge.frozen();
        let c = g.constant(Mat::row_vector(cond.to_vec()));
        let x = g.constant(Mat::row_vector(x_t.to_vec()));
        let out = self.bridge.net.prior.forward(&mut g, &p, c, x, &[t]);
        Ok(g.value(out).data().to_vec())
    }
}

/// Instruction text → style embeddings. Unknown words map to UNK and sampling proceeds.
pub fn sample_style<T: Scalar>(
    bridge: &Bridge<T>,
    align: &AvAlign<T>,
    vocab: &Vocab,
    text: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    let (f_i, _) = align.encode_instruction_lenient(text, vocab)?;
    bridge.sample_from_embedding(&f_i, n, seed)
}

/// A bridge training batch in standardized style space.
pub struct BridgeBatch<T> {
    pub f_i: Mat<T>,
    pub z: Mat<T>,
    pub ts: Vec<usize>,
    pub eps: Mat<f64>,
}

/// Both loss terms for one batch; a disabled term is `None`.
pub fn bridge_terms<T: Scalar>(
    net: &BridgeNet,
    cfg: &BridgeConfig,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &BridgeBatch<T>,
    sched: &NoiseSchedule,
) -> Result<(Option<Var>, Option<Var>)> {
    let f = g.constant(batch.f_i.clone());
    let c = net.mlp.forward(g, p, f);
    let cont = if cfg.no_cont_align {
        None
    } else {
        let z = g.constant(batch.z.clone());
        Some(contrastive_i2s_loss(g, c, z, p.var(net.log_scale))?)
    };
    let diff = if cfg.no_diffusion {
        None
    } else {
        let prior = &net.prior;
        Some(diffusion_loss_fixed(g, &batch.z, &batch.ts, &batch.eps, sched, |g, xt, ts| prior.forward(g, p, c, xt, ts))?)
    };
    Ok((cont, diff))
}

/// `L_cont + λ·L_diff` with disabled terms left out.
pub fn bridge_loss<T: Scalar>(
    net: &BridgeNet,
    cfg: &BridgeConfig,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &BridgeBatch<T>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    match bridge_terms(net, cfg, g, p, batch, sched)? {
        (Some(c), Some(d)) => {
            let d = g.scale(d, T::lit(cfg.lambda));
            Ok(g.add(c, d))
        }
        (Some(c), None) => Ok(c),
        (None, Some(d)) => Ok(g.scale(d, T::lit(cfg.lambda))),
        (None, None) => param("no bridge loss term enabled"),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub losses: Vec<f64>,
    /// Validation diffusion loss at fixed draws, before and after training (NaN when
    /// diffusion is disabled).
    pub initial_val_diff: f64,
    pub final_val_diff: f64,
}

fn style_targets<T: Scalar>(prior: &MotionPrior<T>, clips: &[&CorpusRecord]) -> Result<Vec<Vec<T>>> {
    clips.iter().map(|r| prior.clip_style(&r.coeffs.cast())).collect()
}

fn rows_mat<T: Scalar>(rows: &[&Vec<T>]) -> Mat<T> {
    let cols = rows.first().map_or(0, |r| r.len());
    Mat::from_fn(rows.len(), cols, |r, c| rows[r][c])
}

fn val_diff<T: Scalar>(b: &Bridge<T>, batch: &BridgeBatch<T>, sched: &NoiseSchedule) -> Result<f64> {
    if b.config.no_diffusion {
        return Ok(f64::NAN);
    }
    let (mut g, p) = b.frozen();
    let (_, d) = bridge_terms(&b.net, &b.config, &mut g, &p, batch, sched)?;
    Ok(d.map_or(f64::NAN, |d| g.scalar(d).as_f64()))
}

/// Trains the MLP, the logit scale and the diffusion prior against frozen teachers: the
/// motion prior supplies style targets and the alignment text encoder supplies `F_i`.
pub fn train_bridge<T: Scalar>(
    train: &[&CorpusRecord],
    val: &[&CorpusRecord],
    prior: &MotionPrior<T>,
    align: &AvAlign<T>,
    vocab: &Vocab,
    cfg: &BridgeConfig,
) -> Result<(Bridge<T>, BridgeReport)> {
    if prior.config.d_s != cfg.d_s {
        return format(format!("motion prior has d_s={}, bridge expects {}", prior.config.d_s, cfg.d_s));
    }
    if align.config.l != cfg.l {
        return format(format!("alignment embeddings have width {}, bridge expects {}", align.config.l, cfg.l));
    }
    if train.len() < cfg.batch.min(2) || train.len() < 2 || val.is_empty() {
        return param("bridge training needs at least two training clips and one validation clip");
    }
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let mut bridge = Bridge::<T>::new(cfg.clone())?;

    let z_train = style_targets(prior, train)?;
    let d = cfg.d_s;
    for k in 0..d {
        let n = z_train.len() as f64;
        let m = z_train.iter().map(|z| z[k].as_f64()).sum::<f64>() / n;
        let v = z_train.iter().map(|z| (z[k].as_f64() - m).powi(2)).sum::<f64>() / n;
        bridge.z_mean[k] = m;
        bridge.z_std[k] = v.sqrt().max(1e-6);
    }
    let z_train: Vec<Vec<T>> = z_train.iter().map(|z| bridge.standardize(z)).collect();
    let stored: Vec<Vec<T>> = train.iter().map(|r| align.encode_tokens(&r.instruction.tokens)).collect::<Result<_>>()?;
    let mut pool_rng = rng_from(derive_seed(cfg.seed, "bridge.aug", 0));
    let mut pool: Vec<Vec<Vec<T>>> = vec![Vec::new(); N_CELLS];
    if !cfg.no_aug {
        for r in train {
            let cell = r.state.cell();
            if pool[cell].is_empty() {
                for _ in 0..AUG_POOL {
                    let s = gen_instruction(vocab, r.state.emotion, r.state.intensity, &mut pool_rng);
                    pool[cell].push(align.encode_tokens(&s.tokens)?);
                }
            }
        }
    }

    let z_val: Vec<Vec<T>> = style_targets(prior, val)?.iter().map(|z| bridge.standardize(z)).collect();
    let f_val: Vec<Vec<T>> = val.iter().map(|r| align.encode_tokens(&r.instruction.tokens)).collect::<Result<_>>()?;
    let mut vrng = rng_from(derive_seed(cfg.seed, "bridge.val", 0));
    let (vts, veps) = draw_t_eps(val.len(), d, &sched, &mut vrng);
    let val_batch = BridgeBatch {
        f_i: rows_mat(&f_val.iter().collect::<Vec<_>>()),
        z: rows_mat(&z_val.iter().collect::<Vec<_>>()),
        ts: vts,
        eps: veps,
    };
    let mut report = BridgeReport { initial_val_diff: val_diff(&bridge, &val_batch, &sched)?, ..Default::default() };

    let mut state = AdamState::new(&bridge.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = rng_from(derive_seed(cfg.seed, "bridge.train", 0));
    let bsz = cfg.batch.min(train.len());
    for _ in 0..cfg.steps {
        let idx = crate::trainkit::shuffled(train.len(), &mut rng);
        let idx = &idx[..bsz];
        let f: Vec<&Vec<T>> = idx
            .iter()
            .map(|&k| {
                let cell = &pool[train[k].state.cell()];
                if cfg.no_aug || cell.is_empty() {
                    &stored[k]
                } else {
                    &cell[rng.random_range(0..cell.len())]
                }
            })
            .collect();
        let z: Vec<&Vec<T>> = idx.iter().map(|&k| &z_train[k]).collect();
        let (ts, eps) = draw_t_eps(bsz, d, &sched, &mut rng);
        let batch = BridgeBatch { f_i: rows_mat(&f), z: rows_mat(&z), ts, eps };
        let net = &bridge.net;
        let l = train_step(&mut bridge.params, &mut state, cfg.clip, |g, p| bridge_loss(net, cfg, g, p, &batch, &sched))?;
        report.losses.push(l);
    }
    report.final_val_diff = val_diff(&bridge, &val_batch, &sched)?;
    Ok((bridge, report))
}

/// Mean paired cosine between anchors and style targets minus the mean unpaired cosine.
pub fn paired_anchor_gap<T: Scalar>(
    bridge: &Bridge<T>,
    prior: &MotionPrior<T>,
    align: &AvAlign<T>,
    clips: &[&CorpusRecord],
) -> Result<f64> {
    let n = clips.len();
    if n < 2 {
        return param("need at least two clips");
    }
    let mut cs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for r in clips {
        let f = align.encode_tokens(&r.instruction.tokens)?;
        cs.push(bridge.align_i2s(&f)?.iter().map(|v| v.as_f64()).collect::<Vec<f64>>());
        let z = bridge.standardize(&prior.clip_style(&r.coeffs.cast())?);
        zs.push(z.iter().map(|v| v.as_f64()).collect::<Vec<f64>>());
    }
    let (mut paired, mut unpaired) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let s = crate::av_instruction::cosine_similarity(&cs[i], &zs[j])?;
            if i == j {
                paired += s;
            } else {
                unpaired += s;
            }
        }
    }
    Ok(paired / n as f64 - unpaired / (n * (n - 1)) as f64)
}
