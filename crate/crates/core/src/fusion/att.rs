use icmlm_tensor::{softmax, Graph, LseItem, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GridBatch, HeadOutput, TextBatch, VocabTable};
use crate::error::{ensure, Result};
use crate::nn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttFcConfig {
    pub heads: usize,
    pub d_z: usize,
    /// Widths of the hidden `Linear -> LayerNorm -> ReLU` layers of `fc`.
    pub fc_hidden: Vec<usize>,
}

impl Default for AttFcConfig {
    fn default() -> Self {
        AttFcConfig { heads: 12, d_z: 64, fc_hidden: vec![256] }
    }
}

impl AttFcConfig {
    pub fn init<F: Scalar>(&self, p: &mut ParamStore<F>, d_x: usize, d_w: usize, rng: &mut ChaCha8Rng) {
        let inner = self.heads * self.d_z;
        p.insert("att.sx.w", Tensor::randn(d_x, inner, (1.0 / d_x as f64).sqrt(), rng));
        p.insert("att.sw.w", Tensor::randn(d_w, inner, (1.0 / d_w as f64).sqrt(), rng));
        nn::init_layer_norm(p, "att.sx_ln", inner);
        nn::init_layer_norm(p, "att.sw_ln", inner);
        p.insert("att.sh", Tensor::filled(self.heads, 1, F::lit(1.0 / self.heads as f64)));
        p.insert("att.bh", Tensor::zeros(1, 1));
        let mut din = d_x;
        for (i, &h) in self.fc_hidden.iter().enumerate() {
            nn::init_linear(p, &format!("fc.l{i}"), din, h, rng);
            nn::init_layer_norm(p, &format!("fc.ln{i}"), h);
            din = h;
        }
        nn::init_linear(p, "fc.out", din, d_w, rng);
    }

    /// `ReLU(LN(X Σ_x))`, all heads side by side.
    fn project_visual<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamStore<F>, x: Var) -> Var {
        let s = p.bind(g, "att.sx.w");
        let y = g.matmul(x, s);
        let y = nn::layer_norm(g, p, "att.sx_ln", y, self.d_z);
        g.relu(y)
    }

    fn project_text<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamStore<F>, w: Var) -> Var {
        let s = p.bind(g, "att.sw.w");
        let y = g.matmul(w, s);
        let y = nn::layer_norm(g, p, "att.sw_ln", y, self.d_z);
        g.relu(y)
    }

    /// Per-head `cells x T` score matrices.
    fn scores<F: Scalar>(&self, g: &mut Graph<F>, xt: Var, wt: Var) -> Vec<Var> {
        let scale = F::lit(1.0 / (self.d_z as f64).sqrt());
        (0..self.heads)
            .map(|h| {
                let (xh, wh) = if self.heads == 1 {
                    (xt, wt)
                } else {
                    (g.slice_cols(xt, h * self.d_z, self.d_z), g.slice_cols(wt, h * self.d_z, self.d_z))
                };
                let s = g.matmul_t(xh, false, wh, true);
                g.scale(s, scale)
            })
            .collect()
    }

    /// Log-sum-exp over tokens per head, combined by `[s^1|..|s^H] Σ_h + b_h`,
    /// then a softmax over cells. Returns `1 x cells`.
    fn pool_logits<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamStore<F>, scores: &[Var]) -> Var {
        let s: Vec<Var> = scores.iter().map(|&sc| g.log_sum_exp_rows(sc)).collect();
        let cat = if s.len() == 1 { s[0] } else { g.concat_cols(&s) };
        let sh = p.bind(g, "att.sh");
        let bh = p.bind(g, "att.bh");
        let mixed = g.matmul(cat, sh);
        let mixed = g.add_row_bias(mixed, bh);
        let cells = g.value(mixed).rows();
        let row = g.reshape(mixed, 1, cells);
        g.softmax_rows(row)
    }

    fn classify<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamStore<F>, xhat: Var) -> Var {
        let mut h = xhat;
        for (i, &width) in self.fc_hidden.iter().enumerate() {
            let y = nn::linear(g, p, &format!("fc.l{i}"), h);
            let y = nn::layer_norm(g, p, &format!("fc.ln{i}"), y, width);
            h = g.relu(y);
        }
        nn::linear(g, p, "fc.out", h)
    }

    pub fn forward_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        vocab: &VocabTable<F>,
        grid: GridBatch,
        text: &TextBatch<F>,
    ) -> HeadOutput {
        let cells = grid.cells();
        let xt_all = self.project_visual(g, p, grid.var);
        let w_all = g.constant(text.w.clone());
        let wt_all = self.project_text(g, p, w_all);
        let items: Vec<LseItem> = (0..text.len())
            .map(|i| LseItem { rows: text.offsets[i]..text.offsets[i] + text.lens[i], block: text.image[i] * cells })
            .collect();
        let scale = F::lit(1.0 / (self.d_z as f64).sqrt());
        let lse = g.lse_scores(wt_all, xt_all, &items, cells, self.heads, scale);
        let per_head = g.reshape(lse, text.len() * cells, self.heads);
        let sh = p.bind(g, "att.sh");
        let bh = p.bind(g, "att.bh");
        let mixed = g.matmul(per_head, sh);
        let mixed = g.add_row_bias(mixed, bh);
        let mixed = g.reshape(mixed, text.len(), cells);
        let patt = g.softmax_rows(mixed);
        let blocks: Vec<usize> = items.iter().map(|it| it.block).collect();
        let xhat = g.pool_rows(patt, grid.var, &blocks);
        let f = self.classify(g, p, xhat);
        let table = g.constant(vocab.tensor().clone());
        let logits = g.matmul_t(f, false, table, true);
        let pv = g.value(patt);
        let attention = (0..text.len()).map(|i| pv.row(i).iter().map(|x| x.as_f64()).collect()).collect();
        HeadOutput { logits, attention }
    }
}

fn check_dims<F: Scalar>(p: &ParamStore<F>, x: &Tensor<F>, w: &Tensor<F>) -> Result<()> {
    let (dx, dw) = (p.expect("att.sx.w").rows(), p.expect("att.sw.w").rows());
    ensure!(x.cols() == dx, "visual features have width {}, expected {dx}", x.cols());
    ensure!(w.cols() == dw, "text features have width {}, expected {dw}", w.cols());
    ensure!(x.rows() > 0 && w.rows() > 0, "attention needs at least one cell and one token");
    Ok(())
}

/// Per-head score matrices `S = X~ W~^T / sqrt(d_z)`, each `cells x T`.
pub fn att_scores<F: Scalar>(cfg: &AttFcConfig, p: &ParamStore<F>, x: &Tensor<F>, w: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
    check_dims(p, x, w)?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let xt = cfg.project_visual(&mut g, p, xv);
    let wt = cfg.project_text(&mut g, p, wv);
    let s = cfg.scores(&mut g, xt, wt);
    Ok(s.iter().map(|&v| g.value(v).clone()).collect())
}

/// Pools `x` (`cells x d_x`) with attention derived from per-head scores.
/// Returns `(x_hat, p_att)`.
pub fn att_pool<F: Scalar>(cfg: &AttFcConfig, p: &ParamStore<F>, scores: &[Tensor<F>], x: &Tensor<F>) -> Result<(Vec<F>, Vec<F>)> {
    ensure!(!scores.is_empty(), "attention pooling needs at least one head");
    ensure!(scores.len() == cfg.heads, "expected {} heads, got {}", cfg.heads, scores.len());
    for s in scores {
        ensure!(s.rows() == x.rows(), "score rows {} do not match {} cells", s.rows(), x.rows());
    }
    let mut g = Graph::inference();
    let sv: Vec<Var> = scores.iter().map(|s| g.constant(s.clone())).collect();
    let patt = cfg.pool_logits(&mut g, p, &sv);
    let xv = g.constant(x.clone());
    let xhat = g.matmul(patt, xv);
    Ok((g.value(xhat).data().to_vec(), g.value(patt).data().to_vec()))
}

/// The single-head path with no averaging layer: `softmax_i(logsumexp_j S_ij)`.
pub fn att_pool_single_head<F: Scalar>(scores: &Tensor<F>, x: &Tensor<F>) -> (Vec<F>, Vec<F>) {
    let mut g = Graph::inference();
    let sv = g.constant(scores.clone());
    let s = g.log_sum_exp_rows(sv);
    let row = g.reshape(s, 1, scores.rows());
    let patt = g.softmax_rows(row);
    let xv = g.constant(x.clone());
    let xhat = g.matmul(patt, xv);
    (g.value(xhat).data().to_vec(), g.value(patt).data().to_vec())
}

/// Softmax over the vocabulary of `fc(x_hat) . V_k`.
pub fn fc_classify<F: Scalar>(cfg: &AttFcConfig, p: &ParamStore<F>, vocab: &VocabTable<F>, xhat: &[F]) -> Result<Vec<F>> {
    let dx = p.expect("att.sx.w").rows();
    ensure!(xhat.len() == dx, "pooled feature has width {}, expected {dx}", xhat.len());
    let mut g = Graph::inference();
    let xv = g.constant(Tensor::row_vector(xhat.to_vec()));
    let f = cfg.classify(&mut g, p, xv);
    let table = g.constant(vocab.tensor().clone());
    let logits = g.matmul_t(f, false, table, true);
    Ok(softmax(g.value(logits).row(0)))
}
