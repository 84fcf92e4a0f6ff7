//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Calling
//! [`Graph::backward`] on a `1x1` loss walks the nodes in reverse creation
//! order and accumulates gradients into every node that needs one. Parameters
//! enter through [`Graph::param`]; their gradients are read back by name.

use std::collections::{BTreeMap, HashMap};

use crate::attention::{self, AttnSegment, LseItem};
use crate::tensor::{gemm, Tensor};
use crate::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 3x3, padding-1 convolution over a channels-last batch laid
/// out as `(batch * h * w) x cin` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    fn im2col<F: Scalar>(&self, x: &Tensor<F>) -> Tensor<F> {
        let (ho, wo) = (self.out_h(), self.out_w());
        let k = 9 * self.cin;
        let mut cols = Tensor::zeros(self.batch * ho * wo, k);
        let data = cols.data_mut();
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (b * ho + oy) * wo + ox;
                    let dst = &mut data[r * k..(r + 1) * k];
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (b * self.h + iy as usize) * self.w + ix as usize;
                            let off = (ky * 3 + kx) * self.cin;
                            dst[off..off + self.cin].copy_from_slice(x.row(src));
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Scalar>(&self, cols: &Tensor<F>, dx: &mut Tensor<F>) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let k = 9 * self.cin;
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (b * ho + oy) * wo + ox;
                    let src = &cols.data()[r * k..(r + 1) * k];
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = (b * self.h + iy as usize) * self.w + ix as usize;
                            let off = (ky * 3 + kx) * self.cin;
                            for (d, &s) in dx.row_mut(dst).iter_mut().zip(&src[off..off + self.cin]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRowBias { a: Var, bias: Var },
    Scale { a: Var, s: F },
    Mul(Var, Var),
    MulConst { a: Var, mask: Tensor<F> },
    Relu(Var),
    LayerNorm { a: Var, gain: Var, bias: Var, group: usize, xhat: Tensor<F>, inv_std: Vec<F> },
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<usize> },
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Tensor<F> },
    SegmentMean { a: Var, seg: usize },
    SoftCrossEntropy { logits: Var, targets: Tensor<F>, probs: Tensor<F> },
    Sum(Var),
    Attention { r: Var, c: Var, v: Var, segs: Vec<AttnSegment>, heads: usize, scale: F, probs: Vec<Tensor<F>> },
    LseScores { w: Var, x: Var, items: Vec<LseItem>, cells: usize, heads: usize, scale: F },
    PoolRows { p: Var, x: Var, blocks: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    frozen_prefixes: Vec<String>,
    no_grad: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), frozen_prefixes: Vec::new(), no_grad: false }
    }

    /// A graph that never tracks gradients (inference).
    pub fn inference() -> Self {
        Graph { no_grad: true, ..Self::new() }
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    pub fn is_inference(&self) -> bool {
        self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Repeated binds of the same name return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor<F>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let trainable = !self.no_grad && !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        self.nodes.push(Node { value: value.clone(), grad: None, op: Op::Leaf, needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<F> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(0, 0))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradients of every trainable parameter bound in this graph.
    /// Parameters the loss does not depend on get an all-zero gradient.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<F>> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, v)| {
                let node = &self.nodes[v.0];
                let g = node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                (name.clone(), g)
            })
            .collect()
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)`, where `ta`/`tb` select transposition.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let v = self.value(a).matmul(ta, self.value(b), tb);
        self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), self.value(a).cols(), "bias width mismatch");
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for chunk in v.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRowBias { a, bias }, &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale { a, s }, &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor<F>) -> Var {
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(v, Op::MulConst { a, mask }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    /// Layer normalization over each row, or over each contiguous block of
    /// `group` columns when the row holds several independent heads.
    /// `gain` and `bias` are `1 x cols`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, group: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        assert!(group > 0 && cols % group == 0, "layer norm group must divide the row width");
        let (gv, bv) = (self.value(gain), self.value(bias));
        assert_eq!(gv.shape(), (1, cols), "layer norm gain shape");
        assert_eq!(bv.shape(), (1, cols), "layer norm bias shape");
        let n_groups = cols / group;
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows * n_groups);
        let gf = F::lit(group as f64);
        let eps = F::lit(LN_EPS);
        for r in 0..rows {
            let xr = x.row(r);
            for gi in 0..n_groups {
                let seg = &xr[gi * group..(gi + 1) * group];
                let mean = seg.iter().copied().sum::<F>() / gf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / gf;
                let is = F::one() / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..group {
                    let c = gi * group + j;
                    let h = (seg[j] - mean) * is;
                    xhat.set(r, c, h);
                    out.set(r, c, h * gv.data()[c] + bv.data()[c]);
                }
            }
        }
        self.push(out, Op::LayerNorm { a, gain, bias, group, xhat, inv_std }, &[a, gain, bias])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for chunk in v.data_mut().chunks_mut(cols) {
            crate::tensor::softmax_in_place(chunk);
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise stable log-sum-exp; `r x c -> r x 1`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| crate::tensor::log_sum_exp(x.row(r))).collect();
        let v = Tensor::from_vec(x.rows(), 1, data);
        self.push(v, Op::LogSumExpRows(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&refs);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&refs);
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols { a, start }, &[a])
    }

    /// Output row `i` is row `index[i]` of `a` (embedding lookup, row picking).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(index.len() * x.cols());
        for &i in index {
            data.extend_from_slice(x.row(i));
        }
        let v = Tensor::from_vec(index.len(), x.cols(), data);
        self.push(v, Op::GatherRows { a, index: index.to_vec() }, &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols);
        self.push(v, Op::Reshape(a), &[a])
    }

    /// 3x3 convolution, padding 1. `w` is `(9 * cin) x cout` with row index
    /// `(ky * 3 + kx) * cin + c`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), (geom.batch * geom.h * geom.w, geom.cin), "conv input shape");
        assert_eq!(self.value(w).shape(), (9 * geom.cin, geom.cout), "conv weight shape");
        let cols = geom.im2col(xv);
        let out = cols.matmul(false, self.value(w), false);
        let cols = if self.no_grad { Tensor::zeros(0, 0) } else { cols };
        self.push(out, Op::Conv2d { x, w, geom, cols }, &[x, w])
    }

    /// Mean over consecutive blocks of `seg` rows; `(n * seg) x c -> n x c`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Var {
        let x = self.value(a);
        assert!(seg > 0 && x.rows() % seg == 0, "segment length must divide row count");
        let n = x.rows() / seg;
        let mut out = Tensor::zeros(n, x.cols());
        let inv = F::one() / F::lit(seg as f64);
        for r in 0..x.rows() {
            let dst = out.row_mut(r / seg);
            for (d, &s) in dst.iter_mut().zip(x.row(r)) {
                *d += s * inv;
            }
        }
        self.push(out, Op::SegmentMean { a, seg }, &[a])
    }

    /// Mean over rows of `-sum_k targets[r,k] * log_softmax(logits[r])_k`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<F>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "cross entropy target shape");
        assert!(x.rows() > 0, "cross entropy over an empty batch");
        let mut probs = x.clone();
        let mut total = F::zero();
        for r in 0..x.rows() {
            let ls = crate::tensor::log_softmax(x.row(r));
            for (k, &l) in ls.iter().enumerate() {
                let y = targets.at(r, k);
                if y != F::zero() {
                    total -= y * l;
                }
                probs.set(r, k, l.exp());
            }
        }
        let v = Tensor::scalar(total / F::lit(x.rows() as f64));
        self.push(v, Op::SoftCrossEntropy { logits, targets, probs }, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Multi-head attention per segment: `softmax(scale * R C^T) V` per head,
    /// with `R`, `C` and `V` already projected and heads side by side.
    pub fn segment_attention(&mut self, r: Var, c: Var, v: Var, segs: &[AttnSegment], heads: usize, scale: F) -> Var {
        let (rv, cv, vv) = (self.value(r), self.value(c), self.value(v));
        assert!(heads > 0 && rv.cols() % heads == 0 && vv.cols() % heads == 0, "head split");
        assert_eq!(rv.cols(), cv.cols(), "row and column projections differ in width");
        assert_eq!(cv.rows(), vv.rows(), "key and value row counts differ");
        for seg in segs {
            assert!(seg.queries.end <= rv.rows() && seg.rows.iter().all(|&i| i < cv.rows()), "segment out of range");
            assert!(!seg.rows.is_empty(), "empty attention segment");
        }
        let (out, probs) = attention::attention_forward(rv, cv, vv, segs, heads, scale);
        self.push(out, Op::Attention { r, c, v, segs: segs.to_vec(), heads, scale, probs }, &[r, c, v])
    }

    /// Attention probabilities of a `segment_attention` node, per segment
    /// `(queries * heads) x rows` with row `q * heads + h`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Per item and head, log-sum-exp over the item's rows of `w` of the
    /// scaled dot products with each of `cells` rows of `x`;
    /// `items x (cells * heads)`, column `cell * heads + h`.
    pub fn lse_scores(&mut self, w: Var, x: Var, items: &[LseItem], cells: usize, heads: usize, scale: F) -> Var {
        let (wv, xv) = (self.value(w), self.value(x));
        assert!(heads > 0 && wv.cols() == xv.cols() && wv.cols() % heads == 0, "head split");
        for it in items {
            assert!(!it.rows.is_empty() && it.rows.end <= wv.rows() && it.block + cells <= xv.rows(), "item out of range");
        }
        let out = attention::lse_scores_forward(wv, xv, items, cells, heads, scale);
        self.push(out, Op::LseScores { w, x, items: items.to_vec(), cells, heads, scale }, &[w, x])
    }

    /// Row `i` is `sum_j p[i, j] * x[blocks[i] + j]`.
    pub fn pool_rows(&mut self, p: Var, x: Var, blocks: &[usize]) -> Var {
        let (pv, xv) = (self.value(p), self.value(x));
        assert_eq!(pv.rows(), blocks.len(), "one block per row of weights");
        assert!(blocks.iter().all(|&b| b + pv.cols() <= xv.rows()), "block out of range");
        let out = attention::pool_rows_forward(pv, xv, blocks);
        self.push(out, Op::PoolRows { p, x, blocks: blocks.to_vec() }, &[p, x])
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar loss");
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accum(&mut self, v: Var, g: Tensor<F>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// `grad[v] += op(a) op(b)` without materializing a temporary.
    fn accum_gemm(&mut self, v: Var, a: &Tensor<F>, ta: bool, b: &Tensor<F>, tb: bool) {
        if !self.wants(v) {
            return;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        let mut acc = self.nodes[v.0].grad.take().unwrap_or_else(|| Tensor::zeros(r, c));
        gemm(F::one(), a, ta, b, tb, F::one(), &mut acc);
        self.nodes[v.0].grad = Some(acc);
    }

    fn backprop(&mut self, i: usize, op: &Op<F>, g: &Tensor<F>) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                // Operand values are cloned when both sides are the same node.
                if self.wants(a) {
                    let bv = if a == b { self.value(b).clone() } else { self.take_value_tmp(b) };
                    if ta {
                        self.accum_gemm(a, &bv, tb, g, true);
                    } else {
                        self.accum_gemm(a, g, false, &bv, !tb);
                    }
                    if a != b {
                        self.restore_value(b, bv);
                    }
                }
                if self.wants(b) {
                    let av = if a == b { self.value(a).clone() } else { self.take_value_tmp(a) };
                    if tb {
                        self.accum_gemm(b, g, true, &av, ta);
                    } else {
                        self.accum_gemm(b, &av, !ta, g, false);
                    }
                    if a != b {
                        self.restore_value(a, av);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.clone());
            }
            Op::AddRowBias { a, bias } => {
                self.accum(*a, g.clone());
                if self.wants(*bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.accum(*bias, db);
                }
            }
            Op::Scale { a, s } => {
                let s = *s;
                self.accum(*a, g.map(|x| x * s));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y);
                    self.accum(*a, d);
                }
                if self.wants(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accum(*b, d);
                }
            }
            Op::MulConst { a, mask } => {
                self.accum(*a, g.zip_map(mask, |x, m| x * m));
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |x, y| if y > F::zero() { x } else { F::zero() });
                self.accum(*a, d);
            }
            Op::LayerNorm { a, gain, bias, group, xhat, inv_std } => {
                let group = *group;
                let (rows, cols) = g.shape();
                let n_groups = cols / group;
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.at(r, c);
                            dg.data_mut()[c] += gv * xhat.at(r, c);
                            db.data_mut()[c] += gv;
                        }
                    }
                    self.accum(*gain, dg);
                    self.accum(*bias, db);
                }
                if self.wants(*a) {
                    let gain_v = self.value(*gain);
                    let gf = F::lit(group as f64);
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxh = vec![F::zero(); group];
                    for r in 0..rows {
                        for gi in 0..n_groups {
                            let base = gi * group;
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for j in 0..group {
                                let c = base + j;
                                dxh[j] = g.at(r, c) * gain_v.data()[c];
                                m1 += dxh[j];
                                m2 += dxh[j] * xhat.at(r, c);
                            }
                            m1 /= gf;
                            m2 /= gf;
                            let is = inv_std[r * n_groups + gi];
                            for j in 0..group {
                                let c = base + j;
                                dx.set(r, c, is * (dxh[j] - m1 - xhat.at(r, c) * m2));
                            }
                        }
                    }
                    self.accum(*a, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: F = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((d, &gy), &yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = yy * (gy - dot);
                    }
                }
                self.accum(*a, dx);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let lse = &self.nodes[i].value;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (l, gr) = (lse.data()[r], g.data()[r]);
                    for (d, &xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                        *d = gr * (xv - l).exp();
                    }
                }
                self.accum(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.wants(p) {
                        self.accum(p, g.slice_rows(start, n));
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).cols();
                    if self.wants(p) {
                        self.accum(p, g.slice_cols(start, n));
                    }
                    start += n;
                }
            }
            Op::SliceRows { a, start } => {
                if self.wants(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut acc = self.nodes[a.0].grad.take().unwrap_or_else(|| Tensor::zeros(r, c));
                    for (d, &s) in acc.data_mut()[start * c..(start + g.rows()) * c].iter_mut().zip(g.data()) {
                        *d += s;
                    }
                    self.nodes[a.0].grad = Some(acc);
                }
            }
            Op::SliceCols { a, start } => {
                if self.wants(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut acc = self.nodes[a.0].grad.take().unwrap_or_else(|| Tensor::zeros(r, c));
                    for row in 0..r {
                        for (d, &s) in acc.row_mut(row)[*start..start + g.cols()].iter_mut().zip(g.row(row)) {
                            *d += s;
                        }
                    }
                    self.nodes[a.0].grad = Some(acc);
                }
            }
            Op::GatherRows { a, index } => {
                if self.wants(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut acc = self.nodes[a.0].grad.take().unwrap_or_else(|| Tensor::zeros(r, c));
                    for (k, &src) in index.iter().enumerate() {
                        for (d, &s) in acc.row_mut(src).iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                    self.nodes[a.0].grad = Some(acc);
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accum(*a, g.clone().reshape(r, c));
            }
            Op::Conv2d { x, w, geom, cols } => {
                if self.wants(*w) {
                    self.accum_gemm(*w, cols, true, g, false);
                }
                if self.wants(*x) {
                    let dcols = g.matmul(false, self.value(*w), true);
                    let (r, c) = self.value(*x).shape();
                    let mut acc = self.nodes[x.0].grad.take().unwrap_or_else(|| Tensor::zeros(r, c));
                    geom.col2im(&dcols, &mut acc);
                    self.nodes[x.0].grad = Some(acc);
                }
            }
            Op::SegmentMean { a, seg } => {
                let (r, c) = self.value(*a).shape();
                let inv = F::one() / F::lit(*seg as f64);
                let mut dx = Tensor::zeros(r, c);
                for row in 0..r {
                    for (d, &s) in dx.row_mut(row).iter_mut().zip(g.row(row / seg)) {
                        *d = s * inv;
                    }
                }
                self.accum(*a, dx);
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let n = F::lit(probs.rows() as f64);
                let scale = g.data()[0] / n;
                let mut dx = Tensor::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    let mass: F = targets.row(r).iter().copied().sum();
                    for ((d, &p), &y) in dx.row_mut(r).iter_mut().zip(probs.row(r)).zip(targets.row(r)) {
                        *d = scale * (p * mass - y);
                    }
                }
                self.accum(*logits, dx);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accum(*a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::Attention { r, c, v, segs, heads, scale, probs } => {
                let (dr, dc, dv) =
                    attention::attention_backward(g, self.value(*r), self.value(*c), self.value(*v), segs, probs, *heads, *scale);
                self.accum(*r, dr);
                self.accum(*c, dc);
                self.accum(*v, dv);
            }
            Op::LseScores { w, x, items, cells, heads, scale } => {
                let out = &self.nodes[i].value;
                let (dw, dx) = attention::lse_scores_backward(g, out, self.value(*w), self.value(*x), items, *cells, *heads, *scale);
                self.accum(*w, dw);
                self.accum(*x, dx);
            }
            Op::PoolRows { p, x, blocks } => {
                let (dp, dx) = attention::pool_rows_backward(g, self.value(*p), self.value(*x), blocks);
                self.accum(*p, dp);
                self.accum(*x, dx);
            }
        }
    }

    // Values are never mutated during backward; these helpers let a node's
    // gradient buffer be borrowed mutably while another node's value is read.
    fn take_value_tmp(&mut self, v: Var) -> Tensor<F> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(0, 0))
    }

    fn restore_value(&mut self, v: Var, t: Tensor<F>) {
        self.nodes[v.0].value = t;
    }
}
