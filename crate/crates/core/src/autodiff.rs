//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records operations as they are applied; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every parameter that
//! took part. Parameters live in a [`ParamStore`] and are borrowed, not copied.

use std::collections::HashMap;

use crate::numeric::{log_sum_exp, sigmoid, softplus, GmmParams, HALF_LN_2PI, SCALE_FLOOR};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Tensor { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is stored row-major as `m x k` (or `k x m` when `ta`), `b` as `k x n`
/// (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized by the callers to hold the strided matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lr_scale: Vec<f64>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), lr_scale: Vec::new(), decay: Vec::new(), index: HashMap::new() }
    }

    /// Register a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor, lr_scale: f64, decay: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        self.lr_scale.push(lr_scale);
        self.decay.push(decay);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn lr_scale(&self, id: usize) -> f64 {
        self.lr_scale[id]
    }

    pub fn decays(&self, id: usize) -> bool {
        self.decay[id]
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.tensors[id].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flatten().flat_map(|t| &t.data).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.iter_mut().flatten() {
            for g in &mut t.data {
                *g *= s;
            }
        }
    }
}

pub type NodeId = usize;

/// Block layout of a fused attention call.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    /// Sequence length of every block.
    pub block: usize,
    pub heads: usize,
    pub causal: bool,
    /// Per-row flag: may this position be attended to as a key.
    pub key_valid: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Vec<f64>),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Glu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    Periodic { freqs: NodeId, x: Vec<f64> },
    Gru { gx: NodeId, gh: NodeId, h: NodeId, r: Vec<f64>, z: Vec<f64>, n: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, layout: AttnLayout, probs: Vec<f64> },
    /// Scalar loss with its gradient w.r.t. the input precomputed.
    Loss { input: NodeId, grad: Vec<f64> },
    SumScalars(Vec<NodeId>),
}

enum Val {
    Owned(Tensor),
    Param(usize),
}

struct Node {
    val: Val,
    op: Op,
}

/// A recording of one forward computation.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_nodes: vec![None; store.len()] }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id].val {
            Val::Owned(t) => t,
            Val::Param(p) => self.store.get(*p),
        }
    }

    fn push(&mut self, t: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { val: Val::Owned(t), op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: usize) -> NodeId {
        if let Some(n) = self.param_nodes[id] {
            return n;
        }
        self.nodes.push(Node { val: Val::Param(id), op: Op::Param(id) });
        let n = self.nodes.len() - 1;
        self.param_nodes[id] = Some(n);
        n
    }

    pub fn param_by_name(&mut self, name: &str) -> NodeId {
        let id = self.store.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    /// `x W + b` for `x: n x i`, `W: i x o`, `b: 1 x o`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: inner dimensions differ");
        let (n, i, o) = (xv.rows, xv.cols, wv.cols);
        let mut out = Tensor::zeros(n, o);
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..n {
                out.row_mut(r).copy_from_slice(&bv.data);
            }
        }
        gemm(n, i, o, &xv.data, false, &wv.data, false, &mut out.data, 1.0);
        self.push(out, Op::Linear { x, w, b })
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "elementwise op shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(t, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let av = self.value(a);
        let t = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|x| f(*x)).collect());
        self.push(t, op)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, c: Vec<f64>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.data.len(), c.len());
        let t = Tensor::from_vec(av.rows, av.cols, av.data.iter().zip(&c).map(|(x, m)| x * m).collect());
        self.push(t, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Gated linear unit over column halves: `a * sigmoid(b)`.
    pub fn glu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert!(xv.cols.is_multiple_of(2), "glu needs an even width");
        let h = xv.cols / 2;
        let mut out = Tensor::zeros(xv.rows, h);
        for r in 0..xv.rows {
            let row = xv.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = row[j] * sigmoid(row[h + j]);
            }
        }
        self.push(out, Op::Glu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, d) = (xv.rows, xv.cols);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out.data[r * d + j] = h * gv.data[j] + bv.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// `out` has `rows` rows, zero except `out[idx[r]] += a[r]`.
    pub fn scatter_rows(&mut self, a: NodeId, idx: Vec<usize>, rows: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows, idx.len());
        let mut out = Tensor::zeros(rows, av.cols);
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterRows(a, idx))
    }

    /// Periodic features `[sin(f_j x), cos(f_j x)]` for constant inputs `x`
    /// and learnable frequencies `freqs: 1 x k`.
    pub fn periodic(&mut self, freqs: NodeId, x: Vec<f64>) -> NodeId {
        let fv = self.value(freqs);
        let k = fv.cols;
        let mut out = Tensor::zeros(x.len(), 2 * k);
        for (r, xi) in x.iter().enumerate() {
            let row = out.row_mut(r);
            for j in 0..k {
                let a = fv.data[j] * xi;
                row[2 * j] = a.sin();
                row[2 * j + 1] = a.cos();
            }
        }
        self.push(out, Op::Periodic { freqs, x })
    }

    /// Gated recurrent update from precomputed gate inputs
    /// `gx = x W_x + b_x` and `gh = h W_h + b_h`, both `n x 3d` in
    /// `[reset | update | candidate]` order.
    pub fn gru(&mut self, gx: NodeId, gh: NodeId, h: NodeId) -> NodeId {
        let (gxv, ghv, hv) = (self.value(gx), self.value(gh), self.value(h));
        let (n, d) = (hv.rows, hv.cols);
        assert_eq!(gxv.cols, 3 * d);
        let mut r = vec![0.0; n * d];
        let mut z = vec![0.0; n * d];
        let mut nn = vec![0.0; n * d];
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let (a, b, hh) = (gxv.row(i), ghv.row(i), hv.row(i));
            for j in 0..d {
                let rj = sigmoid(a[j] + b[j]);
                let zj = sigmoid(a[d + j] + b[d + j]);
                let nj = (a[2 * d + j] + rj * b[2 * d + j]).tanh();
                r[i * d + j] = rj;
                z[i * d + j] = zj;
                nn[i * d + j] = nj;
                out.data[i * d + j] = (1.0 - zj) * nj + zj * hh[j];
            }
        }
        self.push(out, Op::Gru { gx, gh, h, r, z, n: nn })
    }

    /// Scaled dot-product attention over independent blocks of rows.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: AttnLayout) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (qv.rows, qv.cols);
        let s = layout.block;
        assert!(rows % s == 0 && layout.key_valid.len() == rows && d % layout.heads == 0);
        let nb = rows / s;
        let h = layout.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; nb * h * s * s];
        let mut out = Tensor::zeros(rows, d);
        let mut scores = vec![0.0; s];
        for b in 0..nb {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..s {
                    let qi = &qv.row(b * s + i)[off..off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..s {
                        let ok = layout.key_valid[b * s + j] && (!layout.causal || j <= i);
                        scores[j] = if ok {
                            let kj = &kv.row(b * s + j)[off..off + dh];
                            let sc = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                            max = max.max(sc);
                            sc
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let base = ((b * h + hd) * s + i) * s;
                    let mut total = 0.0;
                    for j in 0..s {
                        let e = if scores[j] == f64::NEG_INFINITY { 0.0 } else { (scores[j] - max).exp() };
                        probs[base + j] = e;
                        total += e;
                    }
                    let orow = &mut out.data[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                    for j in 0..s {
                        let p = probs[base + j] / total;
                        probs[base + j] = p;
                        if p != 0.0 {
                            let vj = &vv.row(b * s + j)[off..off + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, layout, probs })
    }

    /// `sum_i w_i * CE(logits_i, target_i)`; returns the scalar node and the
    /// per-row cross-entropies.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> (NodeId, Vec<f64>) {
        let lv = self.value(logits);
        let (n, k) = (lv.rows, lv.cols);
        assert_eq!(n, targets.len());
        let mut grad = vec![0.0; n * k];
        let mut per_row = Vec::with_capacity(n);
        let mut total = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            let ce = lse - row[targets[i]];
            per_row.push(ce);
            total += weights[i] * ce;
            for j in 0..k {
                grad[i * k + j] = weights[i] * ((row[j] - lse).exp() - if j == targets[i] { 1.0 } else { 0.0 });
            }
        }
        let id = self.push(Tensor::from_vec(1, 1, vec![total]), Op::Loss { input: logits, grad });
        (id, per_row)
    }

    /// `sum_i w_i * gmm_nll(head_i, x_i)` for raw head rows laid out as
    /// `[weight logits | means | scale pre-activations]`, or a single mean per
    /// row when `unit_scale` is set.
    pub fn gmm_nll(&mut self, raw: NodeId, targets: &[f64], weights: &[f64], m: usize, unit_scale: bool) -> (NodeId, Vec<f64>) {
        let rv = self.value(raw);
        let (n, c) = (rv.rows, rv.cols);
        assert_eq!(n, targets.len());
        assert_eq!(c, if unit_scale { 1 } else { 3 * m });
        let mut grad = vec![0.0; n * c];
        let mut per_row = Vec::with_capacity(n);
        let mut total = 0.0;
        let mut terms = vec![0.0; m];
        for i in 0..n {
            let row = rv.row(i);
            let x = targets[i];
            let g = &mut grad[i * c..(i + 1) * c];
            if unit_scale {
                let diff = row[0] - x;
                let nll = 0.5 * diff * diff + HALF_LN_2PI;
                per_row.push(nll);
                total += weights[i] * nll;
                g[0] = weights[i] * diff;
                continue;
            }
            let p = GmmParams::from_head(row, m, false);
            for k in 0..m {
                let z = (x - p.means[k]) / p.scale(k);
                terms[k] = p.weights[k].ln() - 0.5 * z * z - p.log_scales[k] - HALF_LN_2PI;
            }
            let lse = log_sum_exp(&terms);
            let nll = -lse;
            per_row.push(nll);
            total += weights[i] * nll;
            for k in 0..m {
                let resp = (terms[k] - lse).exp();
                let s = p.scale(k);
                let z = (x - p.means[k]) / s;
                g[k] = weights[i] * (p.weights[k] - resp);
                g[m + k] = weights[i] * (-resp * z / s);
                // d nll / d sigma, then through softplus + floor.
                let dsigma = -resp * (z * z - 1.0) / s;
                g[2 * m + k] = weights[i] * dsigma * sigmoid(row[2 * m + k]);
            }
        }
        debug_assert!(softplus(0.0) > 0.0 && SCALE_FLOOR > 0.0);
        let id = self.push(Tensor::from_vec(1, 1, vec![total]), Op::Loss { input: raw, grad });
        (id, per_row)
    }

    pub fn sum_scalars(&mut self, ids: Vec<NodeId>) -> NodeId {
        let total = ids.iter().map(|&i| self.value(i).scalar()).sum();
        self.push(Tensor::from_vec(1, 1, vec![total]), Op::SumScalars(ids))
    }

    /// Back-propagate from a scalar node and collect parameter gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut out = Gradients { tensors: (0..self.store.len()).map(|_| None).collect() };
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, g, &mut grads, &mut out);
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn shape_of(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows, v.cols)
    }

    fn backprop(&self, id: NodeId, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Param(p) => match &mut out.tensors[*p] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.rows, xv.cols, wv.cols);
                let mut dx = Tensor::zeros(n, i);
                gemm(n, o, i, &g.data, false, &wv.data, true, &mut dx.data, 0.0);
                let mut dw = Tensor::zeros(i, o);
                gemm(i, n, o, &xv.data, true, &g.data, false, &mut dw.data, 0.0);
                if let Some(b) = b {
                    let mut db = Tensor::zeros(1, o);
                    for r in 0..n {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                let neg = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = Tensor::from_vec(g.rows, g.cols, g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect());
                let db = Tensor::from_vec(g.rows, g.cols, g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let d = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * s).collect());
                self.accumulate(grads, *a, d);
            }
            Op::MulConst(a, c) => {
                let d = Tensor::from_vec(g.rows, g.cols, g.data.iter().zip(c).map(|(x, m)| x * m).collect());
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g.data.iter().zip(&av.data).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let y = self.value(id);
                let d = g.data.iter().zip(&y.data).map(|(x, s)| x * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Tanh(a) => {
                let y = self.value(id);
                let d = g.data.iter().zip(&y.data).map(|(x, t)| x * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Glu(x) => {
                let xv = self.value(*x);
                let h = xv.cols / 2;
                let mut d = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let dr = d.row_mut(r);
                    for j in 0..h {
                        let s = sigmoid(row[h + j]);
                        dr[j] = gr[j] * s;
                        dr[h + j] = gr[j] * row[j] * s * (1.0 - s);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let (n, d) = self.shape_of(*x);
                let mut dx = Tensor::zeros(n, d);
                let mut dg = Tensor::zeros(1, d);
                let mut db = Tensor::zeros(1, d);
                let mut dxh = vec![0.0; d];
                for r in 0..n {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..d {
                        dg.data[j] += gr[j] * xh[j];
                        db.data[j] += gr[j];
                        dxh[j] = gr[j] * gv.data[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xh[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::GatherRows(a, idx) => {
                let (n, c) = self.shape_of(*a);
                let mut d = Tensor::zeros(n, c);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterRows(a, idx) => {
                let mut d = Tensor::zeros(idx.len(), g.cols);
                for (r, &i) in idx.iter().enumerate() {
                    d.row_mut(r).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Periodic { freqs, x } => {
                let fv = self.value(*freqs);
                let k = fv.cols;
                let mut d = Tensor::zeros(1, k);
                for (r, xi) in x.iter().enumerate() {
                    let gr = g.row(r);
                    for j in 0..k {
                        let a = fv.data[j] * xi;
                        d.data[j] += xi * (gr[2 * j] * a.cos() - gr[2 * j + 1] * a.sin());
                    }
                }
                self.accumulate(grads, *freqs, d);
            }
            Op::Gru { gx, gh, h, r, z, n } => {
                let (hv, ghv) = (self.value(*h), self.value(*gh));
                let (rows, d) = (hv.rows, hv.cols);
                let mut dgx = Tensor::zeros(rows, 3 * d);
                let mut dgh = Tensor::zeros(rows, 3 * d);
                let mut dh = Tensor::zeros(rows, d);
                for i in 0..rows {
                    for j in 0..d {
                        let t = i * d + j;
                        let go = g.data[t];
                        let (rj, zj, nj) = (r[t], z[t], n[t]);
                        let dn = go * (1.0 - zj);
                        let dz = go * (hv.data[t] - nj);
                        dh.data[t] = go * zj;
                        let dan = dn * (1.0 - nj * nj);
                        let dr = dan * ghv.data[i * 3 * d + 2 * d + j];
                        let dar = dr * rj * (1.0 - rj);
                        let daz = dz * zj * (1.0 - zj);
                        let gxr = dgx.row_mut(i);
                        gxr[j] = dar;
                        gxr[d + j] = daz;
                        gxr[2 * d + j] = dan;
                        let ghr = dgh.row_mut(i);
                        ghr[j] = dar;
                        ghr[d + j] = daz;
                        ghr[2 * d + j] = dan * rj;
                    }
                }
                self.accumulate(grads, *gx, dgx);
                self.accumulate(grads, *gh, dgh);
                self.accumulate(grads, *h, dh);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = (qv.rows, qv.cols);
                let s = layout.block;
                let nb = rows / s;
                let h = layout.heads;
                let dh = d / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(rows, d);
                let mut dk = Tensor::zeros(rows, d);
                let mut dv = Tensor::zeros(rows, d);
                let mut dp = vec![0.0; s];
                for b in 0..nb {
                    for hd in 0..h {
                        let off = hd * dh;
                        for i in 0..s {
                            let base = ((b * h + hd) * s + i) * s;
                            let p = &probs[base..base + s];
                            let gi = &g.row(b * s + i)[off..off + dh];
                            let mut dot = 0.0;
                            for j in 0..s {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vv.row(b * s + j)[off..off + dh];
                                dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dot += p[j] * dp[j];
                                let dvj = &mut dv.data[(b * s + j) * d + off..(b * s + j) * d + off + dh];
                                for (o, x) in dvj.iter_mut().zip(gi) {
                                    *o += p[j] * x;
                                }
                            }
                            let qi = &qv.row(b * s + i)[off..off + dh];
                            for j in 0..s {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kj = &kv.row(b * s + j)[off..off + dh];
                                let dqi = &mut dq.data[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                                for (o, x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk.data[(b * s + j) * d + off..(b * s + j) * d + off + dh];
                                for (o, x) in dkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Loss { input, grad } => {
                let (n, c) = self.shape_of(*input);
                let up = g.scalar();
                let d = Tensor::from_vec(n, c, grad.iter().map(|x| x * up).collect());
                self.accumulate(grads, *input, d);
            }
            Op::SumScalars(ids) => {
                for &i in ids {
                    self.accumulate(grads, i, g.clone());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Compare analytic gradients of every parameter with central differences.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> NodeId, tol: f64) {
        let grads = {
            let mut g = Graph::new(store);
            let root = f(&mut g);
            g.backward(root)
        };
        let eps = 1e-6;
        for p in 0..store.len() {
            for e in 0..store.get(p).data.len() {
                let orig = store.get(p).data[e];
                store.get_mut(p).data[e] = orig + eps;
                let plus = {
                    let mut g = Graph::new(store);
                    let r = f(&mut g);
                    g.value(r).scalar()
                };
                store.get_mut(p).data[e] = orig - eps;
                let minus = {
                    let mut g = Graph::new(store);
                    let r = f(&mut g);
                    g.value(r).scalar()
                };
                store.get_mut(p).data[e] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let an = grads.get(p).map(|t| t.data[e]).unwrap_or(0.0);
                let err = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
                assert!(err < tol || (fd - an).abs() < 1e-8, "{} [{e}]: fd {fd} vs analytic {an}", store.name(p));
            }
        }
    }

    /// Reduce any node to a scalar through a fixed random projection.
    fn project(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
        let (r, c) = {
            let v = g.value(x);
            (v.rows, v.cols)
        };
        let w = g.constant(random(c, 2, &mut seeded(seed)));
        let y = g.linear(x, w, None);
        g.cross_entropy(y, &vec![0; r], &vec![1.0; r]).0
    }

    #[test]
    fn linear_glu_layernorm_gradients() {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        store.add("x", random(3, 4, &mut rng), 1.0, false);
        store.add("w", random(4, 6, &mut rng), 1.0, true);
        store.add("b", random(1, 6, &mut rng), 1.0, false);
        store.add("gamma", random(1, 3, &mut rng), 1.0, false);
        store.add("beta", random(1, 3, &mut rng), 1.0, false);
        check(
            &mut store,
            |g| {
                let (x, w, b) = (g.param(0), g.param(1), g.param(2));
                let y = g.linear(x, w, Some(b));
                let y = g.glu(y);
                let (ga, be) = (g.param(3), g.param(4));
                let y = g.layer_norm(y, ga, be);
                let t = g.tanh(y);
                let s = g.sigmoid(t);
                let y = g.mul(s, t);
                let y = g.sub(y, t);
                let y = g.relu(y);
                let y = g.scale(y, 1.7);
                let y = g.add(y, t);
                project(g, y, 9)
            },
            1e-5,
        );
    }

    #[test]
    fn gather_scatter_periodic_gradients() {
        let mut rng = seeded(2);
        let mut store = ParamStore::new();
        store.add("table", random(4, 3, &mut rng), 1.0, false);
        store.add("freqs", random(1, 3, &mut rng), 1.0, false);
        check(
            &mut store,
            |g| {
                let t = g.param(0);
                let rows = g.gather_rows(t, vec![2, 0, 2, 3]);
                let sc = g.scatter_rows(rows, vec![1, 0, 3, 2], 5);
                let f = g.param(1);
                let p = g.periodic(f, vec![0.3, -1.2, 0.7, 2.0, 0.1]);
                let half = g.constant(random(6, 3, &mut seeded(3)));
                let p = g.linear(p, half, None);
                let y = g.add(sc, p);
                let y = g.mul_const(y, [1.0, 0.0, 2.0].repeat(5));
                project(g, y, 4)
            },
            1e-5,
        );
    }

    #[test]
    fn gru_gradients() {
        let mut rng = seeded(5);
        let mut store = ParamStore::new();
        store.add("gx", random(2, 9, &mut rng), 1.0, false);
        store.add("gh", random(2, 9, &mut rng), 1.0, false);
        store.add("h", random(2, 3, &mut rng), 1.0, false);
        check(
            &mut store,
            |g| {
                let (a, b, h) = (g.param(0), g.param(1), g.param(2));
                let y = g.gru(a, b, h);
                project(g, y, 6)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_gradients_with_masks() {
        let mut rng = seeded(7);
        let mut store = ParamStore::new();
        for name in ["q", "k", "v"] {
            store.add(name, random(8, 4, &mut rng), 1.0, false);
        }
        for causal in [false, true] {
            let layout = AttnLayout {
                block: 4,
                heads: 2,
                causal,
                key_valid: vec![true, false, true, true, false, false, false, false],
            };
            check(
                &mut store,
                |g| {
                    let (q, k, v) = (g.param(0), g.param(1), g.param(2));
                    let y = g.attention(q, k, v, layout.clone());
                    project(g, y, 8)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn attention_rows_without_keys_are_zero() {
        let mut rng = seeded(9);
        let mut store = ParamStore::new();
        store.add("x", random(3, 4, &mut rng), 1.0, false);
        let mut g = Graph::new(&store);
        let x = g.param(0);
        let layout = AttnLayout { block: 3, heads: 1, causal: false, key_valid: vec![false; 3] };
        let y = g.attention(x, x, x, layout);
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_gradients() {
        let mut rng = seeded(10);
        let mut store = ParamStore::new();
        store.add("logits", random(3, 4, &mut rng), 1.0, false);
        store.add("gmm", random(3, 9, &mut rng), 1.0, false);
        store.add("mse", random(3, 1, &mut rng), 1.0, false);
        check(
            &mut store,
            |g| {
                let (l, m, u) = (g.param(0), g.param(1), g.param(2));
                let (a, _) = g.cross_entropy(l, &[0, 3, 1], &[1.0, 0.5, 2.0]);
                let (b, _) = g.gmm_nll(m, &[0.2, -0.4, 0.9], &[1.5, 1.0, 0.3], 3, false);
                let (c, _) = g.gmm_nll(u, &[0.2, -0.4, 0.9], &[1.0, 1.0, 1.0], 1, true);
                g.sum_scalars(vec![a, b, c])
            },
            1e-5,
        );
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(1, 1, vec![3.0]), 1.0, false);
        let mut g = Graph::new(&store);
        let a = g.param(0);
        let b = g.param(0);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.get(0).unwrap().data, vec![6.0]);
    }
}
