use crate::error::{Error, Result};
use crate::geometry::{chamfer_with_grad, PointCloud};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Matrix, Real};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2D convolution over a channels-last `[h * w, c_in]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Tanh(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Matrix<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix<T>> },
    MaxRows { x: Var, argmax: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Chamfer { pred: Var, grad: Matrix<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const RMS_EPS: f64 = 1e-6;

/// Reverse-mode tape. A graph lives for one forward pass; parameters are
/// read from the borrowed store.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    track: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            track: true,
        }
    }

    /// A graph that records no gradient state.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let track = self.track;
        let v = self.push(value, Op::Leaf, track);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn ensure_finite(&self, v: Var, stage: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::numerical(stage, "non-finite activation"))
        }
    }

    /// `x * w (+ b)` with `w: [in, out]` and a broadcast `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            add_row(&mut out, self.value(b));
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "shape mismatch in add");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.needs(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Row-wise RMS normalisation with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert_eq!(self.shape(gain), (1, c), "rms gain width mismatch");
        let g = self.value(gain).data();
        let eps = T::of(RMS_EPS);
        let inv_c = T::one() / T::of(c as f64);
        let mut out = Matrix::zeros(n, c);
        let mut inv_rms = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_c;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for (j, &v) in row.iter().enumerate() {
                out.set(i, j, v * r * g[j]);
            }
        }
        let ng = self.needs(x) || self.needs(gain);
        let inv_rms = if ng { inv_rms } else { Vec::new() };
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    /// Convolution over a channels-last map via im2col. `w` is
    /// `[kernel * kernel * c_in, c_out]`, rows ordered `(ky, kx, c)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        assert_eq!(
            self.shape(x),
            (geom.height * geom.width, geom.c_in),
            "conv input does not match its geometry"
        );
        let cols = im2col(self.value(x), &geom);
        let mut out = cols.matmul(self.value(w));
        if let Some(b) = b {
            add_row(&mut out, self.value(b));
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = if ng { cols } else { Matrix::zeros(0, 0) };
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, ng)
    }

    /// Multi-head scaled dot-product attention. `q: [n, d]`, `k, v: [m, d]`,
    /// heads split `d` into contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, d) = self.shape(q);
        let (m, dk) = self.shape(k);
        assert_eq!(dk, d, "key width differs from query width");
        assert_eq!(self.shape(v), (m, d), "value shape mismatch");
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::new();
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            // Without a backward pass the probabilities are not kept, so
            // query rows go in blocks to bound memory on long sequences.
            let block = if ng { n.max(1) } else { (ATTENTION_BLOCK / m.max(1)).clamp(1, n.max(1)) };
            for h in 0..heads {
                let off = h * dh;
                for r0 in (0..n).step_by(block) {
                    let rows = block.min(n - r0);
                    let p = softmax_scores(&qv[r0 * d + off..], &kv[off..], rows, m, dh, d, scale);
                    let dst = &mut out.data_mut()[r0 * d + off..];
                    gemm(false, false, rows, dh, m, T::one(), p.data(), m, &vv[off..], d, T::zero(), dst, d);
                    if ng {
                        probs.push(p);
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Column-wise maximum over rows, `[n, c] -> [1, c]`; ties pick the first row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert!(n > 0, "max over zero rows");
        let mut argmax = vec![0usize; c];
        let mut best = xv.row(0).to_vec();
        for i in 1..n {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let ng = self.needs(x);
        self.push(Matrix::new(1, c, best), Op::MaxRows { x, argmax }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "column mismatch in concat");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Matrix::new(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshaped(rows, cols);
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.needs(x);
        self.push(Matrix::new(1, 1, vec![s]), Op::Sum(x), ng)
    }

    /// Chamfer distance between the `[n, 3]` rows of `pred` and a constant
    /// target cloud, evaluated in `f64`.
    pub fn chamfer(&mut self, pred: Var, target: &PointCloud) -> Result<Var> {
        let pv = self.value(pred);
        assert_eq!(pv.cols(), 3, "chamfer expects [n, 3] points");
        let cloud = PointCloud::from_flat(&pv.to_f64())
            .map_err(|e| Error::numerical("chamfer", e.to_string()))?;
        let cg = chamfer_with_grad(&cloud, target);
        let grad = Matrix::new(
            pv.rows(),
            3,
            cg.grad_p1.iter().flatten().map(|&g| T::of(g)).collect(),
        );
        let ng = self.needs(pred);
        Ok(self.push(Matrix::new(1, 1, vec![T::of(cg.value)]), Op::Chamfer { pred, grad }, ng))
    }

    /// Attention weights of one head, recomputed from node values.
    pub fn attention_weights(&self, q: Var, k: Var, heads: usize, head: usize) -> Matrix<T> {
        let (n, d) = self.shape(q);
        let m = self.shape(k).0;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let off = head * dh;
        softmax_scores(&self.value(q).data()[off..], &self.value(k).data()[off..], n, m, dh, d, scale)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        let mut out = vec![None; self.params.len()];
        for (pid, slot) in self.param_nodes.iter().enumerate() {
            if let Some(v) = slot {
                out[pid] = grads[v.0].take();
            }
        }
        Gradients::from_vec(out)
    }

    fn accum(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                if self.needs(*x) {
                    self.accum(grads, *x, dy.matmul_t(false, self.value(*w), true));
                }
                if self.needs(*w) {
                    self.accum(grads, *w, self.value(*x).matmul_t(true, dy, false));
                }
                if let Some(b) = b {
                    self.accum(grads, *b, dy.col_sums());
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.clone());
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, dy.map(|v| v * s));
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let mut g = dy.clone();
                for (gv, &x) in g.data_mut().iter_mut().zip(xv.data()) {
                    let sig = T::one() / (T::one() + (-x).exp());
                    *gv = *gv * sig * (T::one() + x * (T::one() - sig));
                }
                self.accum(grads, *a, g);
            }
            Op::Tanh(a) => {
                let mut g = dy.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv = *gv * (T::one() - y * y);
                }
                self.accum(grads, *a, g);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let g = self.value(*gain).data();
                let (n, c) = xv.shape();
                let inv_c = T::one() / T::of(c as f64);
                let mut dx = Matrix::zeros(n, c);
                let mut dgain = vec![T::zero(); c];
                for i in 0..n {
                    let r = inv_rms[i];
                    let (row, drow) = (xv.row(i), dy.row(i));
                    let mut dot = T::zero();
                    for j in 0..c {
                        let xhat = row[j] * r;
                        dgain[j] = dgain[j] + drow[j] * xhat;
                        dot = dot + drow[j] * g[j] * xhat;
                    }
                    let mean = dot * inv_c;
                    for j in 0..c {
                        let xhat = row[j] * r;
                        dx.set(i, j, r * (drow[j] * g[j] - xhat * mean));
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *gain, Matrix::new(1, c, dgain));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                if self.needs(*w) {
                    self.accum(grads, *w, cols.matmul_t(true, dy, false));
                }
                if let Some(b) = b {
                    self.accum(grads, *b, dy.col_sums());
                }
                if self.needs(*x) {
                    let dcols = dy.matmul_t(false, self.value(*w), true);
                    self.accum(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, dy, grads),
            Op::MaxRows { x, argmax } => {
                let (n, c) = self.shape(*x);
                let mut dx = Matrix::zeros(n, c);
                for (j, &i) in argmax.iter().enumerate() {
                    dx.set(i, j, dy.get(0, j));
                }
                self.accum(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let slice = dy.data()[offset * c..(offset + r) * c].to_vec();
                    offset += r;
                    self.accum(grads, p, Matrix::new(r, c, slice));
                }
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                self.accum(grads, *x, dy.clone().reshaped(r, c));
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accum(grads, *x, Matrix::filled(r, c, dy.get(0, 0)));
            }
            Op::Chamfer { pred, grad } => {
                let s = dy.get(0, 0);
                self.accum(grads, *pred, grad.map(|g| g * s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Matrix<T>],
        dy: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let (n, d) = self.shape(q);
        let m = self.shape(k).0;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(m, d);
        let mut dv = Matrix::zeros(m, d);
        let mut ds = Matrix::zeros(n, m);
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            let dyh = &dy.data()[off..];
            // dP = dY_h V_h^T
            gemm(false, true, n, m, dh, T::one(), dyh, d, &vv[off..], d, T::zero(), ds.data_mut(), m);
            // dV_h = P^T dY_h
            gemm(true, false, m, dh, n, T::one(), p.data(), m, dyh, d, T::zero(), &mut dv.data_mut()[off..], d);
            // dS = P * (dP - rowsum(dP * P))
            for i in 0..n {
                let prow = p.row(i);
                let drow = &mut ds.data_mut()[i * m..(i + 1) * m];
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (dv_, &pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot);
                }
            }
            gemm(false, false, n, dh, m, scale, ds.data(), m, &kv[off..], d, T::zero(), &mut dq.data_mut()[off..], d);
            gemm(true, false, m, dh, n, scale, ds.data(), m, &qv[off..], d, T::zero(), &mut dk.data_mut()[off..], d);
        }
        self.accum(grads, q, dq);
        self.accum(grads, k, dk);
        self.accum(grads, v, dv);
    }
}

fn add_row<T: Real>(out: &mut Matrix<T>, bias: &Matrix<T>) {
    let c = out.cols();
    assert_eq!(bias.shape(), (1, c), "bias width mismatch");
    let b = bias.data();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o = *o + bv;
        }
    }
}

/// Row-softmax of `scale * Q_h K_h^T` for one head whose columns start at the
/// given slice offsets, with leading dimension `ld`.
/// Score-matrix elements per block in untracked attention.
const ATTENTION_BLOCK: usize = 1 << 22;

fn softmax_scores<T: Real>(q: &[T], k: &[T], n: usize, m: usize, dh: usize, ld: usize, scale: T) -> Matrix<T> {
    let mut s = Matrix::zeros(n, m);
    gemm(false, true, n, m, dh, scale, q, ld, k, ld, T::zero(), s.data_mut(), m);
    for row in s.data_mut().chunks_exact_mut(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        for v in row.iter_mut() {
            *v = *v - max;
        }
        T::exp_in_place(row);
        let inv = T::one() / row.iter().copied().sum::<T>();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    s
}

fn im2col<T: Real>(x: &Matrix<T>, g: &ConvGeom) -> Matrix<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let kk = g.kernel * g.kernel * g.c_in;
    let mut cols = Matrix::zeros(ho * wo, kk);
    let xd = x.data();
    let cd = cols.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cd[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let src = (iy as usize * g.width + ix as usize) * g.c_in;
                    let dst = (ky * g.kernel + kx) * g.c_in;
                    row[dst..dst + g.c_in].copy_from_slice(&xd[src..src + g.c_in]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &Matrix<T>, g: &ConvGeom) -> Matrix<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let kk = g.kernel * g.kernel * g.c_in;
    let mut dx = Matrix::zeros(g.height * g.width, g.c_in);
    let cd = dcols.data();
    let xd = dx.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cd[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.width + ix as usize) * g.c_in;
                    let src = (ky * g.kernel + kx) * g.c_in;
                    for c in 0..g.c_in {
                        xd[dst + c] = xd[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
    dx
}
