//! Tape-level building blocks shared by the encoder and the toy LM.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{Mask, NodeId, ParameterSet, Tape};

pub fn param(tape: &mut Tape, params: &ParameterSet, id: &str) -> Result<NodeId> {
    Ok(tape.param(params.get(id)?))
}

/// `x · W + b`; callers pass explicit weight/bias ids since naming differs
/// per module.
pub fn linear(
    tape: &mut Tape,
    params: &ParameterSet,
    x: NodeId,
    w_id: &str,
    b_id: &str,
) -> Result<NodeId> {
    let w = param(tape, params, w_id)?;
    let h = tape.matmul(x, w)?;
    let b = param(tape, params, b_id)?;
    tape.add_bias(h, b)
}

pub fn layer_norm(
    tape: &mut Tape,
    params: &ParameterSet,
    x: NodeId,
    gain_id: &str,
    bias_id: &str,
) -> Result<NodeId> {
    let g = param(tape, params, gain_id)?;
    let b = param(tape, params, bias_id)?;
    tape.layer_norm(x, g, b)
}

/// Pre-norm two-layer GELU MLP under `{prefix}.w1/b1/w2/b2` with norm
/// `{ln_prefix}.g/b`, plus the residual connection.
pub fn mlp_block(
    tape: &mut Tape,
    params: &ParameterSet,
    x: NodeId,
    ln_prefix: &str,
    mlp_prefix: &str,
) -> Result<NodeId> {
    let h = layer_norm(tape, params, x, &format!("{ln_prefix}.g"), &format!("{ln_prefix}.b"))?;
    let h = linear(tape, params, h, &format!("{mlp_prefix}.w1"), &format!("{mlp_prefix}.b1"))?;
    let h = tape.gelu(h);
    let h = linear(tape, params, h, &format!("{mlp_prefix}.w2"), &format!("{mlp_prefix}.b2"))?;
    tape.add(x, h)
}

pub struct MhaOutput {
    pub out: NodeId,
    /// Per-head post-softmax attention weights, present when requested.
    pub probs: Option<Vec<NodeId>>,
}

/// Multi-head attention with per-head rotary phases applied to q and k.
///
/// `q_src` rows are the queries; `kv_src` rows the keys/values (pass the
/// same node for self-attention). Weights live under `{prefix}.wq/wk/wv/wo`
/// with matching biases. Phase matrices are `rows × head_dim/2` and are
/// shared across heads.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    q_src: NodeId,
    kv_src: NodeId,
    heads: usize,
    mask: &Mask,
    q_phases: Option<&Arc<Vec<f64>>>,
    k_phases: Option<&Arc<Vec<f64>>>,
    capture_probs: bool,
) -> Result<MhaOutput> {
    let d = *tape.shape(q_src).last().unwrap();
    let head_dim = d / heads;
    let q = linear(tape, params, q_src, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(tape, params, kv_src, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(tape, params, kv_src, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut captured = if capture_probs { Some(Vec::with_capacity(heads)) } else { None };
    for h in 0..heads {
        let mut qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let mut kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        if let Some(ph) = q_phases {
            qh = tape.rotate(qh, ph.clone())?;
        }
        if let Some(ph) = k_phases {
            kh = tape.rotate(kh, ph.clone())?;
        }
        let scores = tape.matmul_tb(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let probs = tape.masked_softmax_rows(scaled, mask)?;
        if let Some(c) = captured.as_mut() {
            c.push(probs);
        }
        head_outs.push(tape.matmul(probs, vh)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let out = linear(tape, params, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
    Ok(MhaOutput { out, probs: captured })
}
