//! Fused kernels for segment-wise multi-head attention and attention pooling.
//! Head `h` of a projection occupies columns `h * d .. (h + 1) * d`.

use std::ops::Range;

use crate::{Scalar, Tensor};

/// Query rows `queries` of the row-side projection attend over `rows` of the
/// key and value projections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub queries: Range<usize>,
    pub rows: Vec<usize>,
}

/// Text rows `rows` scored against the `cells` grid rows starting at `block`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LseItem {
    pub rows: Range<usize>,
    pub block: usize,
}

/// Eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

fn head<F: Scalar>(t: &Tensor<F>, row: usize, h: usize, d: usize) -> &[F] {
    &t.row(row)[h * d..(h + 1) * d]
}

fn head_mut<F: Scalar>(t: &mut Tensor<F>, row: usize, h: usize, d: usize) -> &mut [F] {
    &mut t.row_mut(row)[h * d..(h + 1) * d]
}

/// Returns the output (`queries x heads*dv`) and, per segment, the
/// probabilities as `(nq * heads) x rows` with row `q * heads + h`.
pub(crate) fn attention_forward<F: Scalar>(
    r: &Tensor<F>,
    c: &Tensor<F>,
    v: &Tensor<F>,
    segs: &[AttnSegment],
    heads: usize,
    scale: F,
) -> (Tensor<F>, Vec<Tensor<F>>) {
    let (dk, dv) = (r.cols() / heads, v.cols() / heads);
    let mut out = Tensor::zeros(r.rows(), v.cols());
    let mut probs = Vec::with_capacity(segs.len());
    for seg in segs {
        let nq = seg.queries.len();
        let mut p = Tensor::zeros(nq * heads, seg.rows.len());
        for (qi, q) in seg.queries.clone().enumerate() {
            for h in 0..heads {
                let rq = head(r, q, h, dk);
                let pr = p.row_mut(qi * heads + h);
                for (pj, &row) in pr.iter_mut().zip(&seg.rows) {
                    *pj = scale * dot(rq, head(c, row, h, dk));
                }
                crate::softmax_in_place(pr);
                let o = head_mut(&mut out, q, h, dv);
                for (&pj, &row) in p.row(qi * heads + h).iter().zip(&seg.rows) {
                    axpy(pj, head(v, row, h, dv), o);
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

/// Gradients with respect to the row, column and value projections.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<F: Scalar>(
    g: &Tensor<F>,
    r: &Tensor<F>,
    c: &Tensor<F>,
    v: &Tensor<F>,
    segs: &[AttnSegment],
    probs: &[Tensor<F>],
    heads: usize,
    scale: F,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (dk, dv) = (r.cols() / heads, v.cols() / heads);
    let mut dr = Tensor::zeros(r.rows(), r.cols());
    let mut dc = Tensor::zeros(c.rows(), c.cols());
    let mut dvt = Tensor::zeros(v.rows(), v.cols());
    let mut ds = Vec::new();
    for (seg, p) in segs.iter().zip(probs) {
        for (qi, q) in seg.queries.clone().enumerate() {
            for h in 0..heads {
                let gq = head(g, q, h, dv);
                let pr = p.row(qi * heads + h);
                ds.clear();
                let mut mix = F::zero();
                for (&pj, &row) in pr.iter().zip(&seg.rows) {
                    let da = dot(gq, head(v, row, h, dv));
                    axpy(pj, gq, head_mut(&mut dvt, row, h, dv));
                    mix += pj * da;
                    ds.push(da);
                }
                let rq = head(r, q, h, dk);
                for ((d, &pj), &row) in ds.iter_mut().zip(pr).zip(&seg.rows) {
                    *d = pj * (*d - mix) * scale;
                    axpy(*d, head(c, row, h, dk), head_mut(&mut dr, q, h, dk));
                    axpy(*d, rq, head_mut(&mut dc, row, h, dk));
                }
            }
        }
    }
    (dr, dc, dvt)
}

fn item_scores<F: Scalar>(w: &Tensor<F>, x: &Tensor<F>, item: &LseItem, cells: usize, heads: usize, scale: F, buf: &mut Vec<F>) {
    let d = w.cols() / heads;
    let t_len = item.rows.len();
    buf.clear();
    buf.resize(t_len * cells * heads, F::zero());
    for (ti, t) in item.rows.clone().enumerate() {
        for cell in 0..cells {
            for h in 0..heads {
                buf[(ti * cells + cell) * heads + h] = scale * dot(head(w, t, h, d), head(x, item.block + cell, h, d));
            }
        }
    }
}

/// `out[i, cell * heads + h] = logsumexp_t (scale * <w_t^h, x_cell^h>)` over
/// the text rows of item `i`.
pub(crate) fn lse_scores_forward<F: Scalar>(w: &Tensor<F>, x: &Tensor<F>, items: &[LseItem], cells: usize, heads: usize, scale: F) -> Tensor<F> {
    let width = cells * heads;
    let mut out = Tensor::zeros(items.len(), width);
    let mut buf = Vec::new();
    for (i, item) in items.iter().enumerate() {
        item_scores(w, x, item, cells, heads, scale, &mut buf);
        let o = out.row_mut(i);
        for (k, ok) in o.iter_mut().enumerate() {
            let m = (0..item.rows.len()).map(|t| buf[t * width + k]).fold(F::neg_infinity(), F::max);
            let s: F = (0..item.rows.len()).map(|t| (buf[t * width + k] - m).exp()).sum();
            *ok = m + s.ln();
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lse_scores_backward<F: Scalar>(
    g: &Tensor<F>,
    out: &Tensor<F>,
    w: &Tensor<F>,
    x: &Tensor<F>,
    items: &[LseItem],
    cells: usize,
    heads: usize,
    scale: F,
) -> (Tensor<F>, Tensor<F>) {
    let d = w.cols() / heads;
    let width = cells * heads;
    let mut dw = Tensor::zeros(w.rows(), w.cols());
    let mut dx = Tensor::zeros(x.rows(), x.cols());
    let mut buf = Vec::new();
    for (i, item) in items.iter().enumerate() {
        item_scores(w, x, item, cells, heads, scale, &mut buf);
        for (ti, t) in item.rows.clone().enumerate() {
            for cell in 0..cells {
                for h in 0..heads {
                    let k = cell * heads + h;
                    let coef = g.at(i, k) * (buf[ti * width + k] - out.at(i, k)).exp() * scale;
                    let xr = item.block + cell;
                    axpy(coef, head(x, xr, h, d), head_mut(&mut dw, t, h, d));
                    axpy(coef, head(w, t, h, d), head_mut(&mut dx, xr, h, d));
                }
            }
        }
    }
    (dw, dx)
}

/// `out[i] = sum_cell p[i, cell] * x[blocks[i] + cell]`.
pub(crate) fn pool_rows_forward<F: Scalar>(p: &Tensor<F>, x: &Tensor<F>, blocks: &[usize]) -> Tensor<F> {
    let mut out = Tensor::zeros(p.rows(), x.cols());
    for (i, &b) in blocks.iter().enumerate() {
        for (cell, &pc) in p.row(i).iter().enumerate() {
            axpy(pc, x.row(b + cell), out.row_mut(i));
        }
    }
    out
}

pub(crate) fn pool_rows_backward<F: Scalar>(g: &Tensor<F>, p: &Tensor<F>, x: &Tensor<F>, blocks: &[usize]) -> (Tensor<F>, Tensor<F>) {
    let mut dp = Tensor::zeros(p.rows(), p.cols());
    let mut dx = Tensor::zeros(x.rows(), x.cols());
    for (i, &b) in blocks.iter().enumerate() {
        for cell in 0..p.cols() {
            dp.set(i, cell, dot(g.row(i), x.row(b + cell)));
            axpy(p.at(i, cell), g.row(i), dx.row_mut(b + cell));
        }
    }
    (dp, dx)
}
