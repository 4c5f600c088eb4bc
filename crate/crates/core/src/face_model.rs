//! Parametric head: `(β, θ, ψ)` → triangle mesh, with labeled expression channels and
//! named vertex regions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{param, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainkit::{randn, rng_from, Rng};

/// Frame rate of every coefficient sequence.
pub const FPS: u32 = 25;
/// Pose layout: global rotation, jaw rotation, translation.
pub const POSE_DIM: usize = 9;
pub const DEFAULT_DIM_BETA: usize = 8;
pub const DEFAULT_DIM_PSI: usize = 16;
pub const DEFAULT_N_V: usize = 600;

/// Semantic expression channels; the discriminant is the `ψ` index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    JawOpen = 0,
    LipCornerRaise = 1,
    BrowRaise = 2,
    BrowFurrow = 3,
    EyeWiden = 4,
    CheekRaise = 5,
}

impl Action {
    pub const ALL: [Action; 6] =
        [Action::JawOpen, Action::LipCornerRaise, Action::BrowRaise, Action::BrowFurrow, Action::EyeWiden, Action::CheekRaise];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Action::JawOpen => "jaw_open",
            Action::LipCornerRaise => "lip_corner_raise",
            Action::BrowRaise => "brow_raise",
            Action::BrowFurrow => "brow_furrow",
            Action::EyeWiden => "eye_widen",
            Action::CheekRaise => "cheek_raise",
        }
    }
}

/// Number of labeled channels; `ψ` must be at least this long.
pub const LABELED_CHANNELS: usize = Action::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Lips,
    LipCorners,
    Brows,
    Cheeks,
    Jaw,
    Eyelids,
}

impl Region {
    pub const ALL: [Region; 6] = [Region::Lips, Region::LipCorners, Region::Brows, Region::Cheeks, Region::Jaw, Region::Eyelids];

    pub fn name(self) -> &'static str {
        match self {
            Region::Lips => "lips",
            Region::LipCorners => "lip_corners",
            Region::Brows => "brows",
            Region::Cheeks => "cheeks",
            Region::Jaw => "jaw",
            Region::Eyelids => "eyelids",
        }
    }

    pub fn parse(name: &str) -> Result<Region> {
        Region::ALL.into_iter().find(|r| r.name() == name).ok_or_else(|| crate::Error::Param(format!("unknown region {name}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTemplate<T> {
    /// `[n_v, 3]`
    pub base_vertices: Mat<T>,
    pub faces: Vec<[u32; 3]>,
    /// `[n_v * 3, dim_beta]`, row `3v + axis`.
    pub id_basis: Mat<T>,
    /// `[n_v * 3, dim_psi]`, row `3v + axis`.
    pub exp_basis: Mat<T>,
    pub regions: BTreeMap<Region, Vec<usize>>,
    pub jaw_pivot: [T; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams<T> {
    pub beta: Vec<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseParams<T> {
    pub global_rot: [T; 3],
    pub jaw_rot: [T; 3],
    pub translation: [T; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpressionParams<T> {
    pub psi: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh<T> {
    pub vertices: Mat<T>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffFrame<T> {
    pub pose: PoseParams<T>,
    pub expr: ExpressionParams<T>,
}

/// Animation currency: one frame per 1/25 s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffSequence<T> {
    pub frames: Vec<CoeffFrame<T>>,
}

impl<T: Scalar> PoseParams<T> {
    pub fn neutral() -> Self {
        PoseParams { global_rot: [T::zero(); 3], jaw_rot: [T::zero(); 3], translation: [T::zero(); 3] }
    }

    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(POSE_DIM);
        v.extend_from_slice(&self.global_rot);
        v.extend_from_slice(&self.jaw_rot);
        v.extend_from_slice(&self.translation);
        v
    }

    pub fn from_slice(s: &[T]) -> Self {
        PoseParams {
            global_rot: [s[0], s[1], s[2]],
            jaw_rot: [s[3], s[4], s[5]],
            translation: [s[6], s[7], s[8]],
        }
    }
}

impl<T: Scalar> CoeffSequence<T> {
    /// Builds a sequence from `[frames, POSE_DIM + dim_psi]` rows.
    pub fn from_mat(m: &Mat<T>) -> Result<Self> {
        if m.cols() <= POSE_DIM || m.rows() == 0 {
            return param(format!("coefficient matrix {:?} too small", m.shape()));
        }
        let frames = (0..m.rows())
            .map(|r| {
                let row = m.row(r);
                CoeffFrame { pose: PoseParams::from_slice(&row[..POSE_DIM]), expr: ExpressionParams { psi: row[POSE_DIM..].to_vec() } }
            })
            .collect();
        Ok(CoeffSequence { frames })
    }

    pub fn to_mat(&self) -> Mat<T> {
        let rows: Vec<Vec<T>> = self
            .frames
            .iter()
            .map(|f| {
                let mut r = f.pose.to_vec();
                r.extend_from_slice(&f.expr.psi);
                r
            })
            .collect();
        Mat::from_rows(&rows).expect("uniform frames")
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn psi_channel(&self, ch: usize) -> Vec<T> {
        self.frames.iter().map(|f| f.expr.psi[ch]).collect()
    }
}

/// Rodrigues rotation matrix for an axis-angle vector.
pub fn rotation_matrix<T: Scalar>(w: [T; 3]) -> [[T; 3]; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let mut r = [[T::zero(); 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = T::one();
    }
    if theta == T::zero() {
        return r;
    }
    let k = [w[0] / theta, w[1] / theta, w[2] / theta];
    let (s, c) = (theta.sin(), theta.cos());
    let kx = [[T::zero(), -k[2], k[1]], [k[2], T::zero(), -k[0]], [-k[1], k[0], T::zero()]];
    for i in 0..3 {
        for j in 0..3 {
            let kk: T = (0..3).map(|m| kx[i][m] * kx[m][j]).sum();
            r[i][j] = r[i][j] + s * kx[i][j] + (T::one() - c) * kk;
        }
    }
    r
}

fn apply<T: Scalar>(r: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

fn check_rot<T: Scalar>(w: [T; 3], what: &str) -> Result<()> {
    let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt().as_f64();
    if !n.is_finite() || n > std::f64::consts::PI + 1e-12 {
        return param(format!("{what} rotation magnitude {n} exceeds π"));
    }
    Ok(())
}

impl<T: Scalar> HeadTemplate<T> {
    pub fn n_v(&self) -> usize {
        self.base_vertices.rows()
    }

    pub fn dim_beta(&self) -> usize {
        self.id_basis.cols()
    }

    pub fn dim_psi(&self) -> usize {
        self.exp_basis.cols()
    }

    pub fn region(&self, r: Region) -> &[usize] {
        &self.regions[&r]
    }

    pub fn blendshape_semantics(&self) -> BTreeMap<usize, &'static str> {
        Action::ALL.iter().map(|a| (a.channel(), a.label())).collect()
    }

    /// Expression basis column `k` as `[n_v, 3]`.
    pub fn exp_column(&self, k: usize) -> Mat<T> {
        Mat::from_fn(self.n_v(), 3, |v, a| self.exp_basis.get(3 * v + a, k))
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n_v = self.n_v();
        if self.base_vertices.cols() != 3 || self.id_basis.rows() != 3 * n_v || self.exp_basis.rows() != 3 * n_v {
            return param("template basis dimensions disagree with vertex count");
        }
        if self.faces.iter().flatten().any(|&i| i as usize >= n_v) {
            return param("face index out of range");
        }
        let mut seen = vec![false; n_v];
        for r in Region::ALL {
            let idx = self.regions.get(&r).ok_or_else(|| crate::Error::Param(format!("region {} missing", r.name())))?;
            if idx.is_empty() {
                return param(format!("region {} empty", r.name()));
            }
            for &i in idx {
                if i >= n_v || seen[i] {
                    return param(format!("region {} overlaps another region or is out of range", r.name()));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Evaluates the parametric head.
///
/// `V = R_global · (base + id·β + exp·ψ + jaw(θ_jaw)) + t`, where the jaw term rigidly
/// rotates jaw-region vertices about the template's pivot.
pub fn flame_forward<T: Scalar>(
    template: &HeadTemplate<T>,
    beta: &ShapeParams<T>,
    pose: &PoseParams<T>,
    psi: &ExpressionParams<T>,
) -> Result<Mesh<T>> {
    if beta.beta.len() != template.dim_beta() && !beta.beta.is_empty() {
        return param(format!("β has {} entries, template expects {}", beta.beta.len(), template.dim_beta()));
    }
    if psi.psi.len() != template.dim_psi() {
        return param(format!("ψ has {} entries, template expects {}", psi.psi.len(), template.dim_psi()));
    }
    check_rot(pose.global_rot, "global")?;
    check_rot(pose.jaw_rot, "jaw")?;
    let n_v = template.n_v();
    let mut offs = vec![T::zero(); 3 * n_v];
    for (k, &b) in beta.beta.iter().enumerate() {
        if b != T::zero() {
            for (i, o) in offs.iter_mut().enumerate() {
                *o += template.id_basis.get(i, k) * b;
            }
        }
    }
    for (k, &e) in psi.psi.iter().enumerate() {
        if e != T::zero() {
            for (i, o) in offs.iter_mut().enumerate() {
                *o += template.exp_basis.get(i, k) * e;
            }
        }
    }
    let mut verts = Mat::zeros(n_v, 3);
    for v in 0..n_v {
        for a in 0..3 {
            verts.set(v, a, template.base_vertices.get(v, a) + offs[3 * v + a]);
        }
    }
    if pose.jaw_rot.iter().any(|&x| x != T::zero()) {
        let rj = rotation_matrix(pose.jaw_rot);
        let p = template.jaw_pivot;
        for &v in template.region(Region::Jaw) {
            let rel = [verts.get(v, 0) - p[0], verts.get(v, 1) - p[1], verts.get(v, 2) - p[2]];
            let q = apply(&rj, rel);
            for a in 0..3 {
                verts.set(v, a, q[a] + p[a]);
            }
        }
    }
    let rg = rotation_matrix(pose.global_rot);
    let t = pose.translation;
    let identity = pose.global_rot.iter().all(|&x| x == T::zero());
    for v in 0..n_v {
        let x = [verts.get(v, 0), verts.get(v, 1), verts.get(v, 2)];
        let y = if identity { x } else { apply(&rg, x) };
        for a in 0..3 {
            verts.set(v, a, y[a] + t[a]);
        }
    }
    Ok(Mesh { vertices: verts, faces: template.faces.clone() })
}

/// Vertex rows of a named region, in region order.
pub fn region_positions<T: Scalar>(mesh: &Mesh<T>, template: &HeadTemplate<T>, region: &str) -> Result<Mat<T>> {
    let r = Region::parse(region)?;
    let idx = template.region(r);
    Ok(Mat::from_fn(idx.len(), 3, |i, a| mesh.vertices.get(idx[i], a)))
}

/// Wavefront OBJ with six-decimal vertices and 1-based faces.
pub fn export_obj<T: Scalar>(mesh: &Mesh<T>) -> String {
    let mut s = String::with_capacity(mesh.vertices.rows() * 40 + mesh.faces.len() * 20);
    for v in 0..mesh.vertices.rows() {
        let r = mesh.vertices.row(v);
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", r[0].as_f64(), r[1].as_f64(), r[2].as_f64());
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Reads back the subset of OBJ written by [`export_obj`].
pub fn parse_obj(text: &str) -> Result<Mesh<f64>> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xs: Vec<f64> = it.map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| crate::Error::Format(format!("{e}")))?;
                if xs.len() != 3 {
                    return crate::error::format("vertex line needs 3 coordinates");
                }
                verts.push(xs);
            }
            Some("f") => {
                let xs: Vec<u32> = it.map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| crate::Error::Format(format!("{e}")))?;
                if xs.len() != 3 || xs.contains(&0) {
                    return crate::error::format("face line needs 3 one-based indices");
                }
                faces.push([xs[0] - 1, xs[1] - 1, xs[2] - 1]);
            }
            _ => {}
        }
    }
    Ok(Mesh { vertices: Mat::from_rows(&verts)?, faces })
}

// ---------------------------------------------------------------------------------------
// Synthetic template construction.

const AXES: [f64; 3] = [7.5, 10.0, 8.5];

/// Point on the front of the head at normalized `(x, y)`.
fn front_point(x: f64, y: f64) -> [f64; 3] {
    let z2 = (1.0 - x * x - y * y).max(0.0);
    [x * AXES[0], y * AXES[1], z2.sqrt() * AXES[2]]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Latitude rings with per-ring vertex counts that sum to `n - 2` (two poles).
fn ring_counts(n: usize) -> Vec<usize> {
    let body = n - 2;
    let rings = (((body as f64) / 2.0).sqrt().round() as usize).max(3);
    let weights: Vec<f64> = (0..rings).map(|i| (std::f64::consts::PI * (i as f64 + 1.0) / (rings as f64 + 1.0)).sin()).collect();
    let total: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| ((w / total) * body as f64).floor().max(3.0) as usize).collect();
    let mut sum: usize = counts.iter().sum();
    let mut i = rings / 2;
    while sum < body {
        counts[i % rings] += 1;
        sum += 1;
        i += 1;
    }
    while sum > body {
        let j = (0..rings).max_by_key(|&j| counts[j]).unwrap();
        counts[j] -= 1;
        sum -= 1;
    }
    counts
}

/// Triangulates the band between two rings by merging their angular orders.
fn zipper(a0: usize, a: usize, oa: f64, b0: usize, b: usize, ob: f64, faces: &mut Vec<[u32; 3]>) {
    let ang = |i: usize, n: usize, o: f64| (i as f64 + o) / n as f64;
    let (mut i, mut j) = (0, 0);
    while i < a || j < b {
        let next_a = ang(i + 1, a, oa);
        let next_b = ang(j + 1, b, ob);
        let (ai, bj) = (a0 + i % a, b0 + j % b);
        if j >= b || (i < a && next_a <= next_b) {
            faces.push([ai as u32, bj as u32, (a0 + (i + 1) % a) as u32]);
            i += 1;
        } else {
            faces.push([ai as u32, bj as u32, (b0 + (j + 1) % b) as u32]);
            j += 1;
        }
    }
}

/// Builds a deterministic ellipsoidal head with carved facial regions.
///
/// Labeled expression channels move only their own regions and have unit maximum vertex
/// displacement; the remaining channels are smooth random fields made orthogonal to the
/// labeled ones.
pub fn make_synthetic_template(seed: u64, n_v: usize, dim_beta: usize, dim_psi: usize) -> Result<HeadTemplate<f64>> {
    if n_v < 200 {
        return param(format!("n_v = {n_v} below minimum 200"));
    }
    if dim_psi < LABELED_CHANNELS {
        return param(format!("dim_psi = {dim_psi} cannot hold {LABELED_CHANNELS} labeled channels"));
    }
    if dim_beta == 0 {
        return param("dim_beta must be positive");
    }
    let mut rng = rng_from(seed);

    // Sphere directions: top pole, rings, bottom pole. y is up, z faces forward.
    let counts = ring_counts(n_v);
    let rings = counts.len();
    let mut unit = Vec::with_capacity(n_v);
    unit.push([0.0, 1.0, 0.0]);
    let mut offsets = Vec::with_capacity(rings);
    for (ri, &c) in counts.iter().enumerate() {
        let phi = std::f64::consts::PI * (ri as f64 + 1.0) / (rings as f64 + 1.0);
        let off = if ri % 2 == 0 { 0.0 } else { 0.5 };
        offsets.push(off);
        for k in 0..c {
            let th = 2.0 * std::f64::consts::PI * (k as f64 + off) / c as f64;
            unit.push([phi.sin() * th.sin(), phi.cos(), phi.sin() * th.cos()]);
        }
    }
    unit.push([0.0, -1.0, 0.0]);
    debug_assert_eq!(unit.len(), n_v);

    let mut faces = Vec::new();
    let first = 1;
    for k in 0..counts[0] {
        faces.push([0, (first + (k + 1) % counts[0]) as u32, (first + k) as u32]);
    }
    let mut start = first;
    for ri in 0..rings - 1 {
        let next = start + counts[ri];
        zipper(start, counts[ri], offsets[ri], next, counts[ri + 1], offsets[ri + 1], &mut faces);
        start = next;
    }
    let bottom = (n_v - 1) as u32;
    let last = counts[rings - 1];
    for k in 0..last {
        faces.push([bottom, (start + k) as u32, (start + (k + 1) % last) as u32]);
    }

    let mut base: Vec<[f64; 3]> = unit.iter().map(|u| [u[0] * AXES[0], u[1] * AXES[1], u[2] * AXES[2]]).collect();

    // Regions: nearest vertices to anchor points, assigned in a fixed order without overlap.
    let scale = n_v as f64 / 600.0;
    let k_of = |base_k: f64| ((base_k * scale).round() as usize).max(2);
    let anchors: [(Region, Vec<([f64; 3], usize)>); 6] = [
        (Region::Lips, vec![(front_point(0.0, -0.40), k_of(5.0)), (front_point(0.0, -0.52), k_of(5.0)), (front_point(-0.1, -0.46), k_of(3.0)), (front_point(0.1, -0.46), k_of(3.0))]),
        (Region::LipCorners, vec![(front_point(-0.24, -0.46), k_of(2.0)), (front_point(0.24, -0.46), k_of(2.0))]),
        (Region::Jaw, vec![(front_point(0.0, -0.78), k_of(12.0)), (front_point(-0.25, -0.72), k_of(5.0)), (front_point(0.25, -0.72), k_of(5.0))]),
        (Region::Eyelids, vec![(front_point(-0.32, 0.14), k_of(4.0)), (front_point(0.32, 0.14), k_of(4.0))]),
        (Region::Brows, vec![(front_point(-0.32, 0.36), k_of(4.0)), (front_point(0.32, 0.36), k_of(4.0))]),
        (Region::Cheeks, vec![(front_point(-0.45, -0.18), k_of(5.0)), (front_point(0.45, -0.18), k_of(5.0))]),
    ];
    let mut owner: Vec<Option<Region>> = vec![None; n_v];
    let mut regions = BTreeMap::new();
    for (region, pts) in &anchors {
        let mut members = Vec::new();
        for &(p, k) in pts {
            let mut order: Vec<usize> = (0..n_v).filter(|&v| owner[v].is_none() && base[v][2] > 0.0).collect();
            order.sort_by(|&a, &b| dist2(base[a], p).total_cmp(&dist2(base[b], p)).then(a.cmp(&b)));
            for &v in order.iter().take(k) {
                owner[v] = Some(*region);
                members.push(v);
            }
        }
        members.sort_unstable();
        regions.insert(*region, members);
    }

    // Carve: recess the mouth and eyes, raise the brows.
    for v in 0..n_v {
        let dz = match owner[v] {
            Some(Region::Lips) => -0.35,
            Some(Region::Eyelids) => -0.45,
            Some(Region::Brows) => 0.3,
            _ => 0.0,
        };
        base[v][2] += dz;
    }

    let centroid = |r: Region| -> [f64; 3] {
        let idx = &regions[&r];
        let mut c = [0.0; 3];
        for &v in idx {
            for a in 0..3 {
                c[a] += base[v][a] / idx.len() as f64;
            }
        }
        c
    };
    let mouth = centroid(Region::Lips);
    let eyes_y = centroid(Region::Eyelids)[1];
    let lip_half_width = regions[&Region::Lips].iter().map(|&v| base[v][0].abs()).fold(1e-9, f64::max);

    let mut exp = Mat::<f64>::zeros(3 * n_v, dim_psi);
    let mut put = |ch: usize, v: usize, d: [f64; 3]| {
        for a in 0..3 {
            exp.set(3 * v + a, ch, d[a]);
        }
    };
    for &v in &regions[&Region::Lips] {
        let lower = base[v][1] < mouth[1];
        put(Action::JawOpen.channel(), v, if lower { [0.0, -1.0, -0.15] } else { [0.0, 0.2, 0.0] });
        let side = base[v][0] / lip_half_width;
        put(Action::LipCornerRaise.channel(), v, [0.25 * side, 0.3 * side.abs(), -0.05 * side.abs()]);
    }
    for &v in &regions[&Region::Jaw] {
        put(Action::JawOpen.channel(), v, [0.0, -0.9, -0.25]);
    }
    for &v in &regions[&Region::LipCorners] {
        put(Action::LipCornerRaise.channel(), v, [0.45 * base[v][0].signum(), 1.0, -0.3]);
    }
    for &v in &regions[&Region::Brows] {
        put(Action::BrowRaise.channel(), v, [0.0, 1.0, 0.1]);
        put(Action::BrowFurrow.channel(), v, [-0.6 * base[v][0].signum(), -0.8, 0.2]);
    }
    for &v in &regions[&Region::Eyelids] {
        put(Action::EyeWiden.channel(), v, if base[v][1] >= eyes_y { [0.0, 1.0, 0.05] } else { [0.0, -0.5, 0.0] });
    }
    for &v in &regions[&Region::Cheeks] {
        put(Action::CheekRaise.channel(), v, [0.0, 0.8, 0.5]);
    }

    let smooth_field = |rng: &mut Rng| -> Vec<f64> {
        let bumps: Vec<([f64; 3], [f64; 3])> = (0..4)
            .map(|_| {
                let c = [randn(rng) * 4.0, randn(rng) * 5.0, randn(rng).abs() * 4.0 + 3.0];
                let d = [randn(rng), randn(rng), randn(rng)];
                (c, d)
            })
            .collect();
        let mut f = vec![0.0; 3 * n_v];
        for v in 0..n_v {
            for (c, d) in &bumps {
                let w = (-dist2(base[v], *c) / (2.0 * 16.0)).exp();
                for a in 0..3 {
                    f[3 * v + a] += w * d[a];
                }
            }
        }
        f
    };
    let normalize_max = |f: &mut [f64]| {
        let m = (0..n_v).map(|v| (f[3 * v].powi(2) + f[3 * v + 1].powi(2) + f[3 * v + 2].powi(2)).sqrt()).fold(0.0, f64::max);
        if m > 0.0 {
            for x in f.iter_mut() {
                *x /= m;
            }
        }
    };

    let mut cols: Vec<Vec<f64>> = (0..dim_psi).map(|k| (0..3 * n_v).map(|i| exp.get(i, k)).collect()).collect();
    for col in cols.iter_mut().take(LABELED_CHANNELS) {
        normalize_max(col);
    }
    // Orthonormal basis of everything placed so far; labeled channels overlap each other,
    // so residuals are projected against this basis rather than the raw columns.
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    let push_ortho = |f: &[f64], ortho: &mut Vec<Vec<f64>>| {
        let mut u = f.to_vec();
        for _ in 0..2 {
            for q in ortho.iter() {
                let d: f64 = q.iter().zip(&u).map(|(a, b)| a * b).sum();
                for (x, qq) in u.iter_mut().zip(q) {
                    *x -= d * qq;
                }
            }
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            ortho.push(u.into_iter().map(|x| x / n).collect());
        }
    };
    for col in cols.iter().take(LABELED_CHANNELS) {
        push_ortho(col, &mut ortho);
    }
    for k in LABELED_CHANNELS..dim_psi {
        let mut f = smooth_field(&mut rng);
        for _ in 0..2 {
            for q in &ortho {
                let d: f64 = q.iter().zip(&f).map(|(a, b)| a * b).sum();
                for (x, qq) in f.iter_mut().zip(q) {
                    *x -= d * qq;
                }
            }
        }
        normalize_max(&mut f);
        push_ortho(&f, &mut ortho);
        cols[k] = f;
    }
    let exp_basis = Mat::from_fn(3 * n_v, dim_psi, |i, k| cols[k][i]);

    let id_cols: Vec<Vec<f64>> = (0..dim_beta)
        .map(|_| {
            let mut f = smooth_field(&mut rng);
            normalize_max(&mut f);
            f
        })
        .collect();
    let id_basis = Mat::from_fn(3 * n_v, dim_beta, |i, k| id_cols[k][i]);

    let jaw_pivot = [0.0, mouth[1] + 0.5, 0.2 * AXES[2]];
    let base_vertices = Mat::from_fn(n_v, 3, |v, a| base[v][a]);
    let t = HeadTemplate { base_vertices, faces, id_basis, exp_basis, regions, jaw_pivot };
    t.validate()?;
    Ok(t)
}

impl HeadTemplate<f64> {
    pub fn cast<U: Scalar>(&self) -> HeadTemplate<U> {
        HeadTemplate {
            base_vertices: self.base_vertices.cast(),
            faces: self.faces.clone(),
            id_basis: self.id_basis.cast(),
            exp_basis: self.exp_basis.cast(),
            regions: self.regions.clone(),
            jaw_pivot: self.jaw_pivot.map(U::lit),
        }
    }
}

pub const TEMPLATE_TAG: &str = "template";

/// Generation parameters of a synthetic head template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub seed: u64,
    pub n_v: usize,
    pub dim_beta: usize,
    pub dim_psi: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig { seed: 0, n_v: DEFAULT_N_V, dim_beta: DEFAULT_DIM_BETA, dim_psi: DEFAULT_DIM_PSI }
    }
}

impl TemplateConfig {
    pub fn build(&self) -> Result<HeadTemplate<f64>> {
        make_synthetic_template(self.seed, self.n_v, self.dim_beta, self.dim_psi)
    }
}

/// Stores the full geometry so loading never depends on the generator.
pub fn template_to_checkpoint(t: &HeadTemplate<f64>, cfg: &TemplateConfig) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(TEMPLATE_TAG, cfg)?;
    c.put("base_vertices", &t.base_vertices);
    let faces = Mat::from_fn(t.faces.len(), 3, |r, k| t.faces[r][k] as f64);
    c.put("faces", &faces);
    c.put("id_basis", &t.id_basis);
    c.put("exp_basis", &t.exp_basis);
    for (r, idx) in &t.regions {
        c.put(&format!("region.{}", r.name()), &Mat::row_vector(idx.iter().map(|&v| v as f64).collect()));
    }
    c.put("jaw_pivot", &Mat::row_vector(t.jaw_pivot.to_vec()));
    Ok(c)
}

pub fn template_from_checkpoint(c: &Checkpoint) -> Result<HeadTemplate<f64>> {
    if c.tag() != TEMPLATE_TAG {
        return crate::error::format(format!("expected a {TEMPLATE_TAG} checkpoint, got {}", c.tag()));
    }
    let index = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
            Ok(x as usize)
        } else {
            crate::error::format(format!("bad index {x} in template"))
        }
    };
    let fm = c.get::<f64>("faces")?;
    let mut faces = Vec::with_capacity(fm.rows());
    for r in 0..fm.rows() {
        faces.push([index(fm.get(r, 0))? as u32, index(fm.get(r, 1))? as u32, index(fm.get(r, 2))? as u32]);
    }
    let mut regions = BTreeMap::new();
    for r in Region::ALL {
        let m = c.get::<f64>(&format!("region.{}", r.name()))?;
        regions.insert(r, m.data().iter().map(|&x| index(x)).collect::<Result<Vec<_>>>()?);
    }
    let pivot = c.get::<f64>("jaw_pivot")?;
    if pivot.len() != 3 {
        return crate::error::format("jaw pivot must have 3 entries");
    }
    let t = HeadTemplate {
        base_vertices: c.get("base_vertices")?,
        faces,
        id_basis: c.get("id_basis")?,
        exp_basis: c.get("exp_basis")?,
        regions,
        jaw_pivot: [pivot.data()[0], pivot.data()[1], pivot.data()[2]],
    };
    t.validate().map_err(|e| crate::Error::Format(e.to_string()))?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> HeadTemplate<f64> {
        make_synthetic_template(3, 400, DEFAULT_DIM_BETA, DEFAULT_DIM_PSI).unwrap()
    }

    fn neutral_psi(t: &HeadTemplate<f64>) -> ExpressionParams<f64> {
        ExpressionParams { psi: vec![0.0; t.dim_psi()] }
    }

    #[test]
    fn exact_vertex_count_and_valid_faces() {
        for n in [200, 257, 600, 1001] {
            let t = make_synthetic_template(1, n, 4, 6).unwrap();
            assert_eq!(t.n_v(), n);
            t.validate().unwrap();
            // closed genus-0 surface
            assert_eq!(t.faces.len(), 2 * n - 4);
        }
    }

    #[test]
    fn identity_pose_returns_base() {
        let t = template();
        let m = flame_forward(&t, &ShapeParams::default(), &PoseParams::neutral(), &neutral_psi(&t)).unwrap();
        assert_eq!(m.vertices, t.base_vertices);
        assert_eq!(m.faces, t.faces);
    }

    #[test]
    fn unit_expression_adds_its_column() {
        let t = template();
        for k in [0, 3, 9] {
            let mut psi = neutral_psi(&t);
            psi.psi[k] = 1.0;
            let m = flame_forward(&t, &ShapeParams::default(), &PoseParams::neutral(), &psi).unwrap();
            let col = t.exp_column(k);
            for v in 0..t.n_v() {
                for a in 0..3 {
                    assert_eq!(m.vertices.get(v, a), t.base_vertices.get(v, a) + col.get(v, a));
                }
            }
        }
    }

    #[test]
    fn half_turn_about_z_negates_x_and_y() {
        let t = template();
        let pose = PoseParams { global_rot: [0.0, 0.0, std::f64::consts::PI], ..PoseParams::neutral() };
        let m = flame_forward(&t, &ShapeParams::default(), &pose, &neutral_psi(&t)).unwrap();
        // independent oracle: explicit rotation matrix about z
        let (c, s) = (std::f64::consts::PI.cos(), std::f64::consts::PI.sin());
        for v in 0..t.n_v() {
            let (x, y, z) = (t.base_vertices.get(v, 0), t.base_vertices.get(v, 1), t.base_vertices.get(v, 2));
            let ex = [c * x - s * y, s * x + c * y, z];
            for a in 0..3 {
                assert!((m.vertices.get(v, a) - ex[a]).abs() < 1e-9);
            }
            assert!((m.vertices.get(v, 0) + x).abs() < 1e-9 && (m.vertices.get(v, 1) + y).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let t = template();
        let bad = ExpressionParams { psi: vec![0.0; 3] };
        assert!(flame_forward(&t, &ShapeParams::default(), &PoseParams::neutral(), &bad).is_err());
        let bad_beta = ShapeParams { beta: vec![0.0; 2] };
        assert!(flame_forward(&t, &bad_beta, &PoseParams::neutral(), &neutral_psi(&t)).is_err());
        let big = PoseParams { jaw_rot: [4.0, 0.0, 0.0], ..PoseParams::neutral() };
        assert!(flame_forward(&t, &ShapeParams::default(), &big, &neutral_psi(&t)).is_err());
    }

    #[test]
    fn template_minimums_enforced() {
        assert!(make_synthetic_template(0, 199, 8, 16).is_err());
        assert!(make_synthetic_template(0, 400, 8, 5).is_err());
    }

    #[test]
    fn same_seed_same_template() {
        let a = make_synthetic_template(11, 300, 8, 16).unwrap();
        let b = make_synthetic_template(11, 300, 8, 16).unwrap();
        assert_eq!(a, b);
        let bits = |t: &HeadTemplate<f64>| t.exp_basis.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn jaw_open_moves_lower_lip_down() {
        let t = template();
        let lips = t.region(Region::Lips);
        let mean_y = lips.iter().map(|&v| t.base_vertices.get(v, 1)).sum::<f64>() / lips.len() as f64;
        let lower: Vec<usize> = lips.iter().copied().filter(|&v| t.base_vertices.get(v, 1) < mean_y).collect();
        assert!(!lower.is_empty());
        let dy: f64 = lower.iter().map(|&v| t.exp_basis.get(3 * v + 1, Action::JawOpen.channel())).sum::<f64>() / lower.len() as f64;
        assert!(dy < 0.0, "{dy}");
    }

    #[test]
    fn labeled_channels_are_local_with_unit_max() {
        let t = template();
        let support = |a: Action| -> Vec<Region> {
            match a {
                Action::JawOpen => vec![Region::Jaw, Region::Lips],
                Action::LipCornerRaise => vec![Region::LipCorners, Region::Lips],
                Action::BrowRaise | Action::BrowFurrow => vec![Region::Brows],
                Action::EyeWiden => vec![Region::Eyelids],
                Action::CheekRaise => vec![Region::Cheeks],
            }
        };
        for a in Action::ALL {
            let allowed: Vec<usize> = support(a).iter().flat_map(|r| t.region(*r).iter().copied()).collect();
            let col = t.exp_column(a.channel());
            let mut max = 0f64;
            for v in 0..t.n_v() {
                let n = (0..3).map(|k| col.get(v, k).powi(2)).sum::<f64>().sqrt();
                if !allowed.contains(&v) {
                    assert_eq!(n, 0.0, "{} leaks to vertex {v}", a.label());
                }
                max = max.max(n);
            }
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_channels_orthogonal_to_labeled() {
        let t = template();
        for k in LABELED_CHANNELS..t.dim_psi() {
            for l in 0..LABELED_CHANNELS {
                let d: f64 = (0..3 * t.n_v()).map(|i| t.exp_basis.get(i, k) * t.exp_basis.get(i, l)).sum();
                assert!(d.abs() < 1e-9, "channel {k} vs {l}: {d}");
            }
        }
    }

    #[test]
    fn obj_export_small_and_roundtrip() {
        let mesh = Mesh { vertices: Mat::from_vec(3, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), faces: vec![[0, 1, 2]] };
        let text = export_obj(&mesh);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "f 1 2 3");
        assert_eq!(lines[1], "v 1.000000 0.000000 0.000000");

        let t = template();
        let m = flame_forward(&t, &ShapeParams::default(), &PoseParams::neutral(), &neutral_psi(&t)).unwrap();
        let text = export_obj(&m);
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), t.n_v());
        let back = parse_obj(&text).unwrap();
        assert_eq!(back.faces, m.faces);
        for (a, b) in back.vertices.data().iter().zip(m.vertices.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn region_positions_gather_rows() {
        let t = template();
        let m = flame_forward(&t, &ShapeParams::default(), &PoseParams::neutral(), &neutral_psi(&t)).unwrap();
        let lips = region_positions(&m, &t, "lips").unwrap();
        assert_eq!(lips.rows(), t.region(Region::Lips).len());
        for (i, &v) in t.region(Region::Lips).iter().enumerate() {
            assert_eq!(lips.row(i), t.base_vertices.row(v));
        }
        let mut psi = neutral_psi(&t);
        psi.psi[Action::JawOpen.channel()] = 1.0;
        let opened = flame_forward(&t, &ShapeParams::default(), &PoseParams::neutral(), &psi).unwrap();
        assert_ne!(region_positions(&opened, &t, "lips").unwrap(), lips);
        assert!(region_positions(&m, &t, "nose").is_err());
    }

    #[test]
    fn jaw_rotation_only_moves_jaw() {
        let t = template();
        let pose = PoseParams { jaw_rot: [0.3, 0.0, 0.0], ..PoseParams::neutral() };
        let m = flame_forward(&t, &ShapeParams::default(), &pose, &neutral_psi(&t)).unwrap();
        let jaw = t.region(Region::Jaw);
        for v in 0..t.n_v() {
            let moved = m.vertices.row(v) != t.base_vertices.row(v);
            assert_eq!(moved, jaw.contains(&v), "vertex {v}");
        }
    }

    #[test]
    fn template_checkpoint_round_trip() {
        let cfg = TemplateConfig { n_v: 240, ..TemplateConfig::default() };
        let t = cfg.build().unwrap();
        let bytes = template_to_checkpoint(&t, &cfg).unwrap().to_bytes();
        let back = template_from_checkpoint(&Checkpoint::from_bytes(&bytes, TEMPLATE_TAG).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(template_to_checkpoint(&back, &cfg).unwrap().to_bytes(), bytes);
    }
}
