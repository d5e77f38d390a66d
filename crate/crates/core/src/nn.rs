//! Layers composed from graph primitives.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x [n, in] · w [in, out] + b [out]`
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn dot<T: Scalar>(g: &mut Graph<T>, x: NodeId, y: NodeId) -> Result<NodeId> {
    let p = g.mul(x, y)?;
    Ok(g.sum(p))
}

/// Layer norm over the last axis followed by a learned scale and offset.
pub fn layer_norm_affine<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    gain: NodeId,
    offset: NodeId,
) -> Result<NodeId> {
    let n = g.layer_norm(x, T::from_f64_lossy(LAYER_NORM_EPS));
    let s = g.mul(n, gain)?;
    g.add(s, offset)
}

/// Linear projection plus an additive positional table `[seq, out]`.
pub fn embedding<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    positions: NodeId,
) -> Result<NodeId> {
    let y = linear(g, x, w, b)?;
    g.add(y, positions)
}

/// Projection weights of one multi-head self-attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    /// Usually absent: a key bias cancels in the softmax.
    pub bk: Option<NodeId>,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: NodeId,
    /// Row-stochastic `[seq, seq]` weights, one per head.
    pub weights: Vec<NodeId>,
}

/// Scaled dot-product self-attention over `x [seq, d_model]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionWeights,
    n_heads: usize,
) -> Result<AttentionOutput> {
    let d_model = g.shape(x)[1];
    let head_dim = d_model / n_heads;
    let q = linear(g, x, p.wq, p.bq)?;
    let k = match p.bk {
        Some(bk) => linear(g, x, p.wk, bk)?,
        None => g.matmul(x, p.wk)?,
    };
    let v = linear(g, x, p.wv, p.bv)?;
    let scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.narrow(q, 1, h * head_dim, head_dim, 1)?;
        let kh = g.narrow(k, 1, h * head_dim, head_dim, 1)?;
        let vh = g.narrow(v, 1, h * head_dim, head_dim, 1)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        weights.push(attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(&heads, 1)?;
    let output = linear(g, merged, p.wo, p.bo)?;
    Ok(AttentionOutput { output, weights })
}
