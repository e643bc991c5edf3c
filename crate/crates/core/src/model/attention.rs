//! Relative multi-head attention with segment memory, and the block built
//! around it.

use rand::RngCore;

use crate::tensor::{Graph, Scalar, Tensor, Var, MASK_VALUE};

use super::{FfnResidual, ModelError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dropout switch threaded through a forward pass.
pub enum Dropout<'a> {
    Off,
    On { p: f64, rng: &'a mut dyn RngCore },
}

impl Dropout<'_> {
    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Dropout::Off => x,
            Dropout::On { p, rng } => g.dropout(x, *p, &mut **rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub n_heads: usize,
    pub head_dim: usize,
}

/// Graph handles of one layer's attention parameters. Projections are
/// stored `[in, out]`; `content_bias` (u) and `position_bias` (v) are
/// `[1, n_heads * head_dim]` rows shared by every query position.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub query: Var,
    pub key_content: Var,
    pub key_position: Var,
    pub value: Var,
    pub out_weight: Var,
    pub out_bias: Var,
    pub content_bias: Var,
    pub position_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// `[q_len, mem_len + q_len]` additive mask: query `i` sees keys
/// `0..=mem_len + i`.
pub fn causal_mask<T: Scalar>(q_len: usize, mem_len: usize) -> Tensor<T> {
    let keys = mem_len + q_len;
    let drop = T::from_f64_lossy(MASK_VALUE);
    Tensor::from_fn(&[q_len, keys], |idx| {
        let (i, j) = (idx / keys, idx % keys);
        if j <= mem_len + i {
            T::zero()
        } else {
            drop
        }
    })
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

/// Attention of the current segment `h` (`[L, d]`) over `memory ++ h`.
///
/// `positions` holds sinusoid rows for distances `0..M + L`, row `k` for
/// distance `k`. Per head the score is
/// `(q_i + u)·k_j + (q_i + v)·(W_R R_{i-j})`, scaled by `1/√head_dim`,
/// causally masked and softmaxed; head outputs are concatenated and
/// projected back to `d`.
#[allow(clippy::too_many_arguments)]
pub fn rel_attention<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    memory: Option<Var>,
    w: &AttentionWeights,
    shape: AttnShape,
    positions: Var,
    mask: &Tensor<T>,
) -> Result<Var, ModelError> {
    let (q_len, d) = (g.value(h).rows(), g.value(h).cols());
    let mem_rows = match memory {
        Some(m) => {
            let mv = g.value(m);
            if mv.cols() != d {
                return Err(ModelError::Input(format!(
                    "memory width {} does not match hidden width {d}",
                    mv.cols()
                )));
            }
            mv.rows()
        }
        None => 0,
    };
    let keys = mem_rows + q_len;
    if g.value(positions).rows() != keys {
        return Err(ModelError::Input(format!(
            "need {keys} position rows, got {}",
            g.value(positions).rows()
        )));
    }
    if mask.shape() != [q_len, keys] {
        return Err(ModelError::Input(format!(
            "mask shape {:?}, expected [{q_len}, {keys}]",
            mask.shape()
        )));
    }
    let context = match memory {
        Some(m) if mem_rows > 0 => g.concat_rows(&[m, h])?,
        _ => h,
    };
    let q = g.matmul(h, w.query)?;
    let k = g.matmul(context, w.key_content)?;
    let v = g.matmul(context, w.value)?;
    let rk = g.matmul(positions, w.key_position)?;
    let scale = T::from_f64_lossy(1.0 / (shape.head_dim as f64).sqrt());

    let mut heads = Vec::with_capacity(shape.n_heads);
    for head in 0..shape.n_heads {
        let (lo, hi) = (head * shape.head_dim, (head + 1) * shape.head_dim);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let rkh = g.slice_cols(rk, lo, hi)?;
        let uh = g.slice_cols(w.content_bias, lo, hi)?;
        let vbh = g.slice_cols(w.position_bias, lo, hi)?;

        let qu = g.add_row(qh, uh)?;
        let content = g.matmul_nt(qu, kh)?;
        let qv = g.add_row(qh, vbh)?;
        let by_distance = g.matmul_nt(qv, rkh)?;
        let position = g.rel_shift(by_distance, mem_rows, keys);

        let scores = g.add(content, position)?;
        let scores = g.scale(scores, scale);
        let probs = g.masked_softmax(scores, mask)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, joined, w.out_weight, w.out_bias)
}

/// One layer:
/// `o = LN(attn(h) + h)`, `b = W2·relu(W1·o)`, `out = LN(Linear(b) + b)`
/// (or `+ o` under [`FfnResidual::Standard`]).
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    memory: Option<Var>,
    w: &BlockWeights,
    shape: AttnShape,
    positions: Var,
    mask: &Tensor<T>,
    residual: FfnResidual,
    dropout: &mut Dropout<'_>,
) -> Result<Var, ModelError> {
    let a = rel_attention(g, h, memory, &w.attn, shape, positions, mask)?;
    let a = dropout.apply(g, a);
    let sum = g.add(a, h)?;
    let o = g.layer_norm(sum, w.ln1_gain, w.ln1_bias, LAYER_NORM_EPS)?;

    let inner = linear(g, o, w.ffn_w1, w.ffn_b1)?;
    let inner = g.relu(inner);
    let b = linear(g, inner, w.ffn_w2, w.ffn_b2)?;
    let b = dropout.apply(g, b);

    let z = linear(g, b, w.proj_weight, w.proj_bias)?;
    let skip = match residual {
        FfnResidual::AsPrinted => b,
        FfnResidual::Standard => o,
    };
    let sum = g.add(z, skip)?;
    Ok(g.layer_norm(sum, w.ln2_gain, w.ln2_bias, LAYER_NORM_EPS)?)
}
