use icmlm_tensor::{softmax, Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GridBatch, HeadOutput, TextBatch, VocabTable};
use crate::error::{ensure, Result};
use crate::nn::{self, AttentionOrder, EncoderLayerConfig, Segment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TfmConfig {
    pub layers: usize,
    pub heads: usize,
    /// Per-head width; zero means `d_w`.
    pub head_dim: usize,
    /// Learned 2-D positional embedding on the visual tokens.
    pub positional: bool,
    pub attention_order: AttentionOrder,
    pub dropout: f64,
}

impl Default for TfmConfig {
    fn default() -> Self {
        TfmConfig {
            layers: 1,
            heads: 12,
            head_dim: 0,
            positional: true,
            attention_order: AttentionOrder::Conventional,
            dropout: 0.1,
        }
    }
}

impl TfmConfig {
    pub fn layer(&self, d_w: usize) -> EncoderLayerConfig {
        EncoderLayerConfig {
            d_model: d_w,
            n_heads: self.heads,
            head_dim: if self.head_dim == 0 { d_w } else { self.head_dim },
            order: self.attention_order,
            dropout: self.dropout,
        }
    }

    pub fn init<F: Scalar>(&self, p: &mut ParamStore<F>, d_x: usize, d_w: usize, cells: usize, rng: &mut ChaCha8Rng) {
        nn::init_linear(p, "tfm.vis", d_x, d_w, rng);
        if self.positional {
            p.insert("tfm.pos", Tensor::randn(cells, d_w, 0.1, rng));
        }
        let layer = self.layer(d_w);
        for i in 0..self.layers {
            nn::init_encoder_layer(p, &format!("tfm.layer{i}"), &layer, rng);
        }
    }

    /// Runs the encoder over `Z = [X; W]` per item; returns the masked rows and,
    /// per item, the last layer's attention of the masked row (per head).
    fn encode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        visual: Option<(Var, usize)>,
        text: &TextBatch<F>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Var, Vec<Vec<f64>>) {
        let d_w = text.w.cols();
        let w_all = g.constant(text.w.clone());
        let (z, text_base, cells) = match visual {
            Some((v, cells)) => {
                let n_vis = g.value(v).rows();
                (g.concat_rows(&[v, w_all]), n_vis, cells)
            }
            None => (w_all, 0, 0),
        };
        let mut segs: Vec<Segment> = (0..text.len())
            .map(|i| {
                let mut rows: Vec<usize> = (0..cells).map(|c| text.image[i] * cells + c).collect();
                rows.extend((0..text.lens[i]).map(|t| text_base + text.offsets[i] + t));
                let n = rows.len();
                Segment { rows, queries: (0..n).collect() }
            })
            .collect();
        let layer = self.layer(d_w);
        let mut z = z;
        let mut attention = Vec::new();
        for l in 0..self.layers {
            let last = l + 1 == self.layers;
            if last {
                for (i, seg) in segs.iter_mut().enumerate() {
                    seg.queries = vec![cells + text.mask_index[i]];
                }
            }
            let out = nn::encoder_layer(g, p, &format!("tfm.layer{l}"), &layer, z, &segs, rng.as_deref_mut());
            z = out.out;
            if last {
                attention = out.probs(g).iter().map(|pr| visual_attention(pr, layer.n_heads, cells)).collect();
            } else {
                let mut start = 0;
                for seg in segs.iter_mut() {
                    let n = seg.rows.len();
                    *seg = Segment::contiguous(start, n, (0..n).collect());
                    start += n;
                }
            }
        }
        (z, attention)
    }

    fn project_visual<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamStore<F>, grid: GridBatch) -> Var {
        let x = nn::linear(g, p, "tfm.vis", grid.var);
        if !self.positional {
            return x;
        }
        let pos = p.bind(g, "tfm.pos");
        let idx: Vec<usize> = (0..grid.batch * grid.cells()).map(|r| r % grid.cells()).collect();
        let tiled = g.gather_rows(pos, &idx);
        g.add(x, tiled)
    }

    pub fn forward_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        vocab: &VocabTable<F>,
        grid: GridBatch,
        text: &TextBatch<F>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> HeadOutput {
        let cells = grid.cells();
        let vis = self.project_visual(g, p, grid);
        let (out, att) = self.encode(g, p, Some((vis, cells)), text, rng);
        let table = g.constant(vocab.tensor().clone());
        let logits = g.matmul_t(out, false, table, true);
        HeadOutput { logits, attention: att }
    }
}

/// Head-averaged attention of the masked row, restricted to the visual cells
/// and renormalized.
fn visual_attention<F: Scalar>(probs: &Tensor<F>, heads: usize, cells: usize) -> Vec<f64> {
    let mut avg = vec![0.0f64; cells];
    for h in 0..heads {
        for (a, v) in avg.iter_mut().zip(probs.row(h)) {
            *a += v.as_f64();
        }
    }
    let total: f64 = avg.iter().sum();
    if total > 0.0 {
        avg.iter_mut().for_each(|a| *a /= total);
    } else if cells > 0 {
        avg.iter_mut().for_each(|a| *a = 1.0 / cells as f64);
    }
    avg
}

fn check(x: &Tensor<impl Scalar>, w_cols: usize, d_x: usize, d_w: usize, t: usize, mask_index: usize) -> Result<()> {
    ensure!(x.rows() == 0 || x.cols() == d_x, "visual features have width {}, expected {d_x}", x.cols());
    ensure!(w_cols == d_w, "text features have width {w_cols}, expected {d_w}");
    ensure!(mask_index < t, "mask_index {mask_index} out of range for {t} tokens");
    Ok(())
}

/// Vocabulary distribution at the masked token for one `(X, W)` pair, with
/// `X` the flattened `h x w` grid.
pub fn tfm_forward<F: Scalar>(
    cfg: &TfmConfig,
    p: &ParamStore<F>,
    vocab: &VocabTable<F>,
    x: &Tensor<F>,
    grid_hw: (usize, usize),
    w: &Tensor<F>,
    mask_index: usize,
) -> Result<(Vec<F>, Vec<f64>)> {
    let vis = p.expect("tfm.vis.w");
    check(x, w.cols(), vis.rows(), vis.cols(), w.rows(), mask_index)?;
    ensure!(x.rows() == grid_hw.0 * grid_hw.1, "grid of {} cells is not {}x{}", x.rows(), grid_hw.0, grid_hw.1);
    let text = TextBatch::new(&[(0, w, mask_index)])?;
    let mut g = Graph::inference();
    let var = g.constant(x.clone());
    let grid = GridBatch { var, batch: 1, h: grid_hw.0, w: grid_hw.1, c: vis.rows() };
    let out = cfg.forward_graph(&mut g, p, vocab, grid, &text, None);
    Ok((softmax(g.value(out.logits).row(0)), out.attention.into_iter().next().unwrap()))
}

/// The same encoder with no visual tokens in the sequence.
pub fn tfm_forward_text_only<F: Scalar>(
    cfg: &TfmConfig,
    p: &ParamStore<F>,
    vocab: &VocabTable<F>,
    w: &Tensor<F>,
    mask_index: usize,
) -> Result<Vec<F>> {
    let vis = p.expect("tfm.vis.w");
    check(&Tensor::<F>::zeros(0, 0), w.cols(), vis.rows(), vis.cols(), w.rows(), mask_index)?;
    let text = TextBatch::new(&[(0, w, mask_index)])?;
    let mut g = Graph::inference();
    let (out, _) = cfg.encode(&mut g, p, None, &text, None);
    let table = g.constant(vocab.tensor().clone());
    let logits = g.matmul_t(out, false, table, true);
    Ok(softmax(g.value(logits).row(0)))
}
