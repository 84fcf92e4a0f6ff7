//! Layers shared by the language model and the fusion heads.

use icmlm_tensor::{AttnSegment, ConvGeom, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<F: Scalar>(p: &mut ParamStore<F>, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.w"), Tensor::randn(din, dout, (1.0 / din as f64).sqrt(), rng));
    p.insert(format!("{name}.b"), Tensor::zeros(1, dout));
}

pub fn init_layer_norm<F: Scalar>(p: &mut ParamStore<F>, name: &str, width: usize) {
    p.insert(format!("{name}.gain"), Tensor::filled(1, width, F::one()));
    p.insert(format!("{name}.bias"), Tensor::zeros(1, width));
}

pub fn linear<F: Scalar>(g: &mut Graph<F>, p: &ParamStore<F>, name: &str, x: Var) -> Var {
    let w = p.bind(g, &format!("{name}.w"));
    let b = p.bind(g, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_row_bias(y, b)
}

/// Layer normalization over consecutive groups of `group` columns.
pub fn layer_norm<F: Scalar>(g: &mut Graph<F>, p: &ParamStore<F>, name: &str, x: Var, group: usize) -> Var {
    let gain = p.bind(g, &format!("{name}.gain"));
    let bias = p.bind(g, &format!("{name}.bias"));
    g.layer_norm(x, gain, bias, group)
}

/// He-initialized 3x3 convolution weights and a zero bias.
pub fn init_conv<F: Scalar>(p: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.w"), Tensor::randn(9 * cin, cout, (2.0 / (9 * cin) as f64).sqrt(), rng));
    p.insert(format!("{name}.b"), Tensor::zeros(1, cout));
}

/// Convolution, bias and ReLU.
pub fn conv_relu<F: Scalar>(g: &mut Graph<F>, p: &ParamStore<F>, name: &str, x: Var, geom: ConvGeom) -> Var {
    let w = p.bind(g, &format!("{name}.w"));
    let b = p.bind(g, &format!("{name}.b"));
    let y = g.conv2d(x, w, geom);
    let y = g.add_row_bias(y, b);
    g.relu(y)
}

/// Inverted dropout; identity when `rng` is `None` or `rate` is zero.
pub fn dropout<F: Scalar>(g: &mut Graph<F>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let (r, c) = g.value(x).shape();
    let keep = 1.0 - rate;
    let scale = F::lit(1.0 / keep);
    let mask = (0..r * c).map(|_| if rng.random::<f64>() < keep { scale } else { F::zero() }).collect();
    g.mul_const(x, Tensor::from_vec(r, c, mask))
}

/// Which side of the score product carries the query projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionOrder {
    /// `softmax(Q K^T / sqrt(D)) V`
    #[default]
    Conventional,
    /// `softmax(K Q^T / sqrt(D)) V`
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub order: AttentionOrder,
    pub dropout: f64,
}

impl EncoderLayerConfig {
    pub fn inner(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

pub fn init_encoder_layer<F: Scalar>(p: &mut ParamStore<F>, name: &str, cfg: &EncoderLayerConfig, rng: &mut ChaCha8Rng) {
    let inner = cfg.inner();
    for proj in ["q", "k", "v"] {
        init_linear(p, &format!("{name}.{proj}"), cfg.d_model, inner, rng);
    }
    init_linear(p, &format!("{name}.o"), inner, cfg.d_model, rng);
    init_layer_norm(p, &format!("{name}.ln"), cfg.d_model);
    init_linear(p, &format!("{name}.out"), cfg.d_model, cfg.d_model, rng);
}

/// One attention context: the rows of `z` it attends over, and which of those
/// rows produce an output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub rows: Vec<usize>,
    /// Positions within `rows`.
    pub queries: Vec<usize>,
}

impl Segment {
    pub fn contiguous(start: usize, len: usize, queries: Vec<usize>) -> Self {
        Segment { rows: (start..start + len).collect(), queries }
    }
}

pub struct EncoderOutput {
    /// One row per query, segments in order.
    pub out: Var,
    /// The attention node; see [`EncoderOutput::probs`].
    pub attention: Var,
}

impl EncoderOutput {
    /// Per segment, `(queries * heads) x rows` probabilities with row
    /// `q * heads + h`.
    pub fn probs<'g, F: Scalar>(&self, g: &'g Graph<F>) -> &'g [Tensor<F>] {
        g.attention_probs(self.attention).expect("attention node")
    }
}

/// One transformer encoder layer evaluated only at the query rows:
/// `h = LN(z_q + Dropout(MHA(z)))`, `out = ReLU(h) W_p + b_p`.
///
/// Rows of `z` may be shared between segments; the key and value
/// projections are computed once per row.
pub fn encoder_layer<F: Scalar>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    name: &str,
    cfg: &EncoderLayerConfig,
    z: Var,
    segments: &[Segment],
    rng: Option<&mut ChaCha8Rng>,
) -> EncoderOutput {
    let query_rows: Vec<usize> = segments.iter().flat_map(|s| s.queries.iter().map(|&q| s.rows[q])).collect();
    let zq = g.gather_rows(z, &query_rows);
    let (row_proj, col_proj) = match cfg.order {
        AttentionOrder::Conventional => ("q", "k"),
        AttentionOrder::Literal => ("k", "q"),
    };
    let r = linear(g, p, &format!("{name}.{row_proj}"), zq);
    let c = linear(g, p, &format!("{name}.{col_proj}"), z);
    let v = linear(g, p, &format!("{name}.v"), z);
    let mut offset = 0;
    let segs: Vec<AttnSegment> = segments
        .iter()
        .map(|s| {
            let queries = offset..offset + s.queries.len();
            offset = queries.end;
            AttnSegment { queries, rows: s.rows.clone() }
        })
        .collect();
    let scale = F::lit(1.0 / (cfg.head_dim as f64).sqrt());
    let attention = g.segment_attention(r, c, v, &segs, cfg.n_heads, scale);
    let o = linear(g, p, &format!("{name}.o"), attention);
    let o = dropout(g, o, cfg.dropout, rng);
    let h = g.add(zq, o);
    let h = layer_norm(g, p, &format!("{name}.ln"), h, cfg.d_model);
    let h = g.relu(h);
    let out = linear(g, p, &format!("{name}.out"), h);
    EncoderOutput { out, attention }
}
