//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the tape in
//! reverse. Nodes that do not depend on a parameter are never visited on the way back.

use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat<T>, rstd: Vec<T> },
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Unfold(Var, usize),
    MeanRows(Var),
    BroadcastRows(Var),
    SumAll(Var),
    L2NormRows(Var, Vec<T>),
    Pick(Var, Vec<usize>),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads[v.0].take()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit(0.797_884_560_802_865_4);
    let k = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = T::one() / s;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        softmax_row(y.row_mut(r));
    }
    y
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Inserts a value that gradients do not flow into.
    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Inserts a differentiable leaf.
    pub fn leaf(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatMulBt(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Mul(a, b), g)
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, ca), "add_row shape");
        let mut v = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for r in 0..ra {
            for (x, &b) in v.row_mut(r).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let g = self.g(a) || self.g(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let g = self.g(a);
        self.push(v, Op::Scale(a, s), g)
    }

    /// Multiplies `a` by the `[1, 1]` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "mul_scalar expects a scalar node");
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        let g = self.g(a) || self.g(s);
        self.push(v, Op::MulScalar(a, s), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        let g = self.g(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let g = self.g(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        let g = self.g(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        let g = self.g(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        let g = self.g(a);
        self.push(v, Op::Log(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let g = self.g(a);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let g = self.g(a);
        self.push(v, Op::LogSoftmaxRows(a), g)
    }

    /// Per-row normalization followed by an elementwise affine `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::lit(cols as f64);
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut y = xhat.clone();
        for r in 0..rows {
            for ((o, &gg), &bb) in y.row_mut(r).iter_mut().zip(gv).zip(bv) {
                *o = *o * gg + bb;
            }
        }
        let g = self.g(x) || self.g(gain) || self.g(bias);
        self.push(y, Op::LayerNorm { x, gain, bias, xhat, rstd }, g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let g = self.g(a);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let v = Mat::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        let g = self.g(a);
        self.push(v, Op::SliceCols(a, start), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let g = parts.iter().any(|&p| self.g(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let v = Mat::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec()).expect("slice");
        let g = self.g(a);
        self.push(v, Op::SliceRows(a, start), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let v = Mat::from_vec(rows, cols, data).expect("concat");
        let g = parts.iter().any(|&p| self.g(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Row lookup (embedding tables).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(tv.row(i));
        }
        let v = Mat::from_vec(idx.len(), c, data).expect("gather");
        let g = self.g(table);
        self.push(v, Op::GatherRows(table, idx.to_vec()), g)
    }

    /// Stacks a `k`-frame window around every row, clamping at the sequence edges.
    ///
    /// Output row `t` is `[x[t-k/2], .., x[t+k/2]]` with out-of-range frames replaced by
    /// the nearest edge frame. `k` must be odd.
    pub fn unfold(&mut self, a: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "unfold window must be odd");
        let av = self.value(a);
        let (t, c) = av.shape();
        let half = (k / 2) as isize;
        let mut v = Mat::zeros(t, k * c);
        for r in 0..t {
            for j in 0..k {
                let src = (r as isize + j as isize - half).clamp(0, t as isize - 1) as usize;
                v.row_mut(r)[j * c..(j + 1) * c].copy_from_slice(av.row(src));
            }
        }
        let g = self.g(a);
        self.push(v, Op::Unfold(a, k), g)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let g = self.g(a);
        self.push(v, Op::MeanRows(a), g)
    }

    /// Repeats a `[1, n]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "broadcast_rows expects a row vector");
        let v = Mat::from_fn(rows, av.cols(), |_, c| av.get(0, c));
        let g = self.g(a);
        self.push(v, Op::BroadcastRows(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let g = self.g(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Scales every row to unit Euclidean norm (norms floored at `1e-12`).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let floor = T::lit(1e-12);
        let mut norms = Vec::with_capacity(av.rows());
        let mut v = av.clone();
        for r in 0..av.rows() {
            let n = av.row(r).iter().map(|&x| x * x).sum::<T>().sqrt().max(floor);
            norms.push(n);
            for x in v.row_mut(r) {
                *x /= n;
            }
        }
        let g = self.g(a);
        self.push(v, Op::L2NormRows(a, norms), g)
    }

    /// Column `idx[r]` of each row `r`, as a `[rows, 1]` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows(), "pick needs one index per row");
        let v = Mat::from_fn(av.rows(), 1, |r, _| av.get(r, idx[r]));
        let g = self.g(a);
        self.push(v, Op::Pick(a, idx.to_vec()), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lp = self.log_softmax_rows(logits);
        let picked = self.pick(lp, targets);
        let m = self.mean_all(picked);
        self.scale(m, -T::one())
    }

    /// Reverse sweep from a `[1, 1]` output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::scalar(T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gout: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.g(*a) {
                    self.acc(grads, *a, gout.matmul_bt(self.value(*b)));
                }
                if self.g(*b) {
                    self.acc(grads, *b, self.value(*a).matmul_at(gout));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.g(*a) {
                    self.acc(grads, *a, gout.matmul(self.value(*b)));
                }
                if self.g(*b) {
                    self.acc(grads, *b, gout.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.g(*a) {
                    self.acc(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.g(*b) {
                    self.acc(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gout.clone());
                if self.g(*row) {
                    let mut s = Mat::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (o, &x) in s.data_mut().iter_mut().zip(gout.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *row, s);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, gout.scale(*s)),
            Op::MulScalar(a, s) => {
                if self.g(*a) {
                    self.acc(grads, *a, gout.scale(self.scalar(*s)));
                }
                if self.g(*s) {
                    let d = gout.data().iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).sum();
                    self.acc(grads, *s, Mat::scalar(d));
                }
            }
            Op::Gelu(a) => {
                let ga = gout.zip_map(self.value(*a), |g, x| g * gelu_parts(x).1);
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = gout.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = gout.zip_map(&node.value, |g, y| g * (T::one() - y * y));
                self.acc(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = gout.zip_map(&node.value, |g, y| g * y);
                self.acc(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = gout.zip_map(self.value(*a), |g, x| g / x);
                self.acc(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gout.row(r));
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - s);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gr = gout.row(r);
                    let s: T = gr.iter().copied().sum();
                    for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(gr) {
                        *o = gg - yy.exp() * s;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).data();
                if self.g(*x) {
                    let n = T::lit(cols as f64);
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = gout.row(r);
                        let xr = xhat.row(r);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            m1 += d;
                            m2 += d * xr[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (gr[c] * gv[c] - m1 - xr[c] * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.g(*gain) || self.g(*bias) {
                    let mut gg = Mat::zeros(1, cols);
                    let mut gb = Mat::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let d = gout.get(r, c);
                            gg.data_mut()[c] += d * xhat.get(r, c);
                            gb.data_mut()[c] += d;
                        }
                    }
                    self.acc(grads, *gain, gg);
                    self.acc(grads, *bias, gb);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, gout.transpose()),
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Mat::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r)[*start..*start + gout.cols()].copy_from_slice(gout.row(r));
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.g(p) {
                        let gp = Mat::from_fn(gout.rows(), c, |r, cc| gout.get(r, off + cc));
                        self.acc(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Mat::zeros(rows, cols);
                ga.data_mut()[start * cols..(start + gout.rows()) * cols].copy_from_slice(gout.data());
                self.acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let cols = gout.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.g(p) {
                        let gp = Mat::from_vec(r, cols, gout.data()[off * cols..(off + r) * cols].to_vec())
                            .expect("concat grad");
                        self.acc(grads, p, gp);
                    }
                    off += r;
                }
            }
            Op::GatherRows(table, idx) => {
                let (rows, cols) = self.value(*table).shape();
                let mut gt = Mat::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &x) in gt.row_mut(i).iter_mut().zip(gout.row(r)) {
                        *o += x;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::Unfold(a, k) => {
                let (t, c) = self.value(*a).shape();
                let half = (*k / 2) as isize;
                let mut ga = Mat::zeros(t, c);
                for r in 0..t {
                    for j in 0..*k {
                        let src = (r as isize + j as isize - half).clamp(0, t as isize - 1) as usize;
                        let g = &gout.row(r)[j * c..(j + 1) * c];
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let inv = T::one() / T::lit(rows as f64);
                let ga = Mat::from_fn(rows, gout.cols(), |_, c| gout.get(0, c) * inv);
                self.acc(grads, *a, ga);
            }
            Op::BroadcastRows(a) => {
                let mut ga = Mat::zeros(1, gout.cols());
                for r in 0..gout.rows() {
                    for (o, &x) in ga.data_mut().iter_mut().zip(gout.row(r)) {
                        *o += x;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Mat::filled(r, c, gout.data()[0]));
            }
            Op::L2NormRows(a, norms) => {
                let y = &node.value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gout.row(r));
                    let d: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gg - yy * d) / norms[r];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Pick(a, idx) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Mat::zeros(rows, cols);
                for (r, &c) in idx.iter().enumerate() {
                    ga.set(r, c, gout.get(r, 0));
                }
                self.acc(grads, *a, ga);
            }
        }
    }
}
