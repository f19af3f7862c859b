//! Dual-path forward pass.
//!
//! Per layer and frame: shared attention over `{standby, patch}` with the
//! asymmetric mask, optional causal temporal attention over the standby
//! tokens of a frame group (last `temporal_depth` layers, between attention
//! and MLP), then the per-path MLPs. Patch tokens never read standby state
//! and never touch a new parameter, so the patch path reproduces the base
//! encoder bit-for-bit.

use std::sync::Arc;

use super::{EncoderConfig, MaskSpec, SHUFFLE_FACTOR};
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Mask, NodeId, ParameterSet, Tape, Tensor};
use crate::positional::{
    grid_positions, phase_matrix_1d, phase_matrix_2d, sample_standby_positions, RotaryConfig,
};

/// One synthetic frame: `o × pixel_dim` patch features plus bookkeeping.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub index: u64,
    pub timestamp: f64,
    pub pixels: Tensor,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOpts {
    /// Capture final-layer standby→patch attention (per frame, `[heads, n_vit, o]`).
    pub capture_attention: bool,
    /// Capture per-layer patch-token outputs for invariance checks.
    pub trace_z: bool,
}

/// Projected per-frame outputs, still on the tape.
pub struct Encoded {
    /// Per frame: `n_llm × proj_dim` standby tokens.
    pub standby: Vec<NodeId>,
    /// Per frame: `o/4 × proj_dim` patch tokens.
    pub patch: Vec<NodeId>,
    /// Per frame final-layer attention capture, shape `[heads, n_vit, o]`.
    pub final_attention: Option<Vec<Tensor>>,
    /// `[frame][layer]` patch-token outputs (`o × hidden`), when traced.
    pub z_trace: Option<Vec<Vec<Tensor>>>,
}

/// Base (single-path) encoder outputs.
pub struct BaseEncoded {
    pub patch: Vec<NodeId>,
    pub z_trace: Option<Vec<Vec<Tensor>>>,
}

/// Frame outputs snapshot, detached from any tape.
#[derive(Debug, Clone)]
pub struct FrameTokens {
    pub index: u64,
    pub timestamp: f64,
    pub standby: Tensor,
    pub patch: Tensor,
}

/// Which MLP path to route a token through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathSel {
    Standby,
    Patch,
}

/// Row indices of the 2×2 spatial pixel-shuffle groups, row-major over
/// blocks, row-major within each block. Length `grid_h * grid_w`.
pub fn pixel_shuffle_indices(grid_h: usize, grid_w: usize) -> Vec<usize> {
    debug_assert!(grid_h.is_multiple_of(2) && grid_w.is_multiple_of(2));
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for br in 0..grid_h / 2 {
        for bc in 0..grid_w / 2 {
            let (r, c) = (2 * br, 2 * bc);
            out.push(r * grid_w + c);
            out.push(r * grid_w + c + 1);
            out.push((r + 1) * grid_w + c);
            out.push((r + 1) * grid_w + c + 1);
        }
    }
    out
}

struct Rope {
    /// Phases for the concatenated `{standby, patch}` sequence.
    spatial_full: Arc<Vec<f64>>,
    /// Phases for the patch-only sequence (base encoder).
    spatial_patch: Arc<Vec<f64>>,
}

fn build_rope(cfg: &EncoderConfig) -> Result<Rope> {
    let two_d = RotaryConfig::two_d(cfg.head_dim())?;
    let z_pos = grid_positions(cfg.grid_h, cfg.grid_w);
    let l_pos = sample_standby_positions(cfg.grid_h, cfg.grid_w, cfg.n_vit)?;
    let mut full = l_pos.clone();
    full.extend_from_slice(&z_pos);
    Ok(Rope {
        spatial_full: phase_matrix_2d(&two_d, &full),
        spatial_patch: phase_matrix_2d(&two_d, &z_pos),
    })
}

fn validate_frames(cfg: &EncoderConfig, frames: &[FrameInput]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid("encode", "no frames"));
    }
    for pair in frames.windows(2) {
        if pair[1].index <= pair[0].index {
            return Err(Error::invalid("encode", "frame indices must be strictly increasing"));
        }
    }
    for f in frames {
        if f.pixels.shape() != [cfg.o(), cfg.pixel_dim] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: f.pixels.shape().to_vec(),
                rhs: vec![cfg.o(), cfg.pixel_dim],
            });
        }
    }
    Ok(())
}

/// Full dual-path forward over a frame sequence; differentiable end to end.
pub fn encode(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    frames: &[FrameInput],
    opts: &EncodeOpts,
) -> Result<Encoded> {
    cfg.validate()?;
    validate_frames(cfg, frames)?;
    let rope = build_rope(cfg)?;
    let n_vit = cfg.n_vit;
    let o = cfg.o();
    let mask = MaskSpec { n_standby: n_vit, n_patch: o }.mask();

    // standby embeddings are shared across frames: record once
    let l0 = nn::param(tape, params, super::params::STANDBY_EMBED_ID)?;
    let mut states: Vec<(NodeId, NodeId)> = Vec::with_capacity(frames.len());
    for frame in frames {
        let px = tape.input(&frame.pixels);
        let z0 = nn::linear(tape, params, px, "patch_embed.w", "patch_embed.b")?;
        states.push((l0, z0));
    }

    let mut z_trace: Option<Vec<Vec<Tensor>>> =
        opts.trace_z.then(|| vec![Vec::with_capacity(cfg.depth); frames.len()]);
    let mut final_attention = None;

    for i in 0..cfg.depth {
        let capture = opts.capture_attention && i + 1 == cfg.depth;
        let captured = dual_layer(tape, params, cfg, i, &mut states, &rope, &mask, capture)?;
        if capture {
            final_attention = Some(captured);
        }
        if let Some(trace) = z_trace.as_mut() {
            for (f, (_, z)) in states.iter().enumerate() {
                trace[f].push(tape.tensor(*z));
            }
        }
    }

    let mut standby = Vec::with_capacity(frames.len());
    let mut patch = Vec::with_capacity(frames.len());
    for &(l, z) in &states {
        let (s, p) = project(tape, params, cfg, l, z)?;
        standby.push(s);
        patch.push(p);
    }
    Ok(Encoded { standby, patch, final_attention, z_trace })
}

/// One dual-path layer over all frames. Returns the attention capture when
/// requested (empty vec otherwise).
#[allow(clippy::too_many_arguments)]
fn dual_layer(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    layer: usize,
    states: &mut [(NodeId, NodeId)],
    rope: &Rope,
    mask: &Mask,
    capture: bool,
) -> Result<Vec<Tensor>> {
    if layer >= cfg.depth {
        return Err(Error::invalid("encode_layer", format!("layer {layer} out of range")));
    }
    let n_vit = cfg.n_vit;
    let o = cfg.o();
    let pre = format!("blocks.{layer}");
    let mut captured = Vec::new();

    // shared attention, per frame
    for (l, z) in states.iter_mut() {
        let s = tape.concat_rows(&[*l, *z])?;
        let h = nn::layer_norm(tape, params, s, &format!("{pre}.ln1.g"), &format!("{pre}.ln1.b"))?;
        let mha = nn::multi_head_attention(
            tape,
            params,
            &format!("{pre}.attn"),
            h,
            h,
            cfg.heads,
            mask,
            Some(&rope.spatial_full),
            Some(&rope.spatial_full),
            capture,
        )?;
        if let Some(prob_nodes) = mha.probs {
            captured.push(extract_standby_attention(tape, &prob_nodes, n_vit, o));
        }
        let s = tape.add(s, mha.out)?;
        *l = tape.slice_rows(s, 0, n_vit)?;
        *z = tape.slice_rows(s, n_vit, o)?;
    }

    // temporal attention over standby tokens, in the last temporal_depth layers
    if layer + cfg.temporal_depth >= cfg.depth {
        let window = cfg.temporal_window;
        let mut start = 0;
        while start < states.len() {
            let len = window.min(states.len() - start);
            let group: Vec<NodeId> = states[start..start + len].iter().map(|(l, _)| *l).collect();
            let updated = temporal_attend(tape, params, cfg, layer, &group)?;
            for (j, node) in updated.into_iter().enumerate() {
                states[start + j].0 = node;
            }
            start += len;
        }
    }

    // per-path MLPs
    for (l, z) in states.iter_mut() {
        *l = nn::mlp_block(tape, params, *l, &format!("{pre}.ln2_l"), &format!("{pre}.mlp_l"))?;
        *z = nn::mlp_block(tape, params, *z, &format!("{pre}.ln2_z"), &format!("{pre}.mlp_z"))?;
    }
    Ok(captured)
}

/// Causal temporal attention across the standby tokens of one frame group.
/// All tokens of a frame share one temporal position (the frame offset), so
/// causality is frame-block granular.
pub fn temporal_attend(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    layer: usize,
    group: &[NodeId],
) -> Result<Vec<NodeId>> {
    if group.is_empty() || group.len() > cfg.temporal_window {
        return Err(Error::invalid(
            "temporal_attend",
            format!("group of {} frames exceeds window {}", group.len(), cfg.temporal_window),
        ));
    }
    let n_vit = cfg.n_vit;
    let pre = format!("blocks.{layer}.temporal");
    let stack = tape.concat_rows(group)?;
    let normed = nn::layer_norm(tape, params, stack, &format!("{pre}.ln.g"), &format!("{pre}.ln.b"))?;

    let positions: Vec<f64> = (0..group.len())
        .flat_map(|off| std::iter::repeat_n(off as f64, n_vit))
        .collect();
    let phases = phase_matrix_1d(&RotaryConfig::one_d(cfg.head_dim())?, &positions);
    let mask = Mask::FrameCausal { frame_len: n_vit };
    let mha = nn::multi_head_attention(
        tape,
        params,
        &pre,
        normed,
        normed,
        cfg.heads,
        &mask,
        Some(&phases),
        Some(&phases),
        false,
    )?;
    let updated = tape.add(stack, mha.out)?;
    (0..group.len()).map(|j| tape.slice_rows(updated, j * n_vit, n_vit)).collect()
}

/// Pixel-shuffle grouping followed by the per-path projector. The standby
/// path groups consecutive lattice-order quadruples; the patch path groups
/// 2×2 spatial blocks.
pub fn project(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    l: NodeId,
    z: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (l_rows, z_rows) = (tape.shape(l)[0], tape.shape(z)[0]);
    if l_rows % SHUFFLE_FACTOR != 0 || z_rows % SHUFFLE_FACTOR != 0 {
        return Err(Error::invalid(
            "project",
            format!("token counts {l_rows}/{z_rows} not divisible by {SHUFFLE_FACTOR}"),
        ));
    }
    let standby = project_path(tape, params, l, Arc::new((0..l_rows).collect()), "proj_l")?;
    let patch = project_path(
        tape,
        params,
        z,
        Arc::new(pixel_shuffle_indices(cfg.grid_h, cfg.grid_w)),
        "proj_z",
    )?;
    Ok((standby, patch))
}

fn project_path(
    tape: &mut Tape,
    params: &ParameterSet,
    x: NodeId,
    indices: Arc<Vec<usize>>,
    prefix: &str,
) -> Result<NodeId> {
    let merged = tape.regroup_rows(x, indices, SHUFFLE_FACTOR)?;
    let h = nn::linear(tape, params, merged, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = tape.gelu(h);
    nn::linear(tape, params, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

/// Route arbitrary tokens through one layer's standby- or patch-side MLP
/// block (pre-norm + residual). At init the two paths are bit-identical.
pub fn mlp_path(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    layer: usize,
    path: PathSel,
    x: NodeId,
) -> Result<NodeId> {
    if layer >= cfg.depth {
        return Err(Error::invalid("mlp_path", format!("layer {layer} out of range")));
    }
    let (ln, mlp) = match path {
        PathSel::Standby => (format!("blocks.{layer}.ln2_l"), format!("blocks.{layer}.mlp_l")),
        PathSel::Patch => (format!("blocks.{layer}.ln2_z"), format!("blocks.{layer}.mlp_z")),
    };
    nn::mlp_block(tape, params, x, &ln, &mlp)
}

fn extract_standby_attention(tape: &Tape, prob_nodes: &[NodeId], n_vit: usize, o: usize) -> Tensor {
    let heads = prob_nodes.len();
    let seq = n_vit + o;
    let mut data = Vec::with_capacity(heads * n_vit * o);
    for &node in prob_nodes {
        let probs = tape.data(node);
        for q in 0..n_vit {
            data.extend_from_slice(&probs[q * seq + n_vit..(q + 1) * seq]);
        }
    }
    Tensor::new(vec![heads, n_vit, o], data).expect("capture is well-formed")
}

/// Base single-path encoder: the network as it exists without any standby
/// machinery. The dual path must reproduce these patch outputs exactly.
pub fn encode_base(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    frames: &[FrameInput],
    trace_z: bool,
) -> Result<BaseEncoded> {
    cfg.validate()?;
    validate_frames(cfg, frames)?;
    let rope = build_rope(cfg)?;
    let o = cfg.o();

    let mut zs: Vec<NodeId> = Vec::with_capacity(frames.len());
    for frame in frames {
        let px = tape.input(&frame.pixels);
        zs.push(nn::linear(tape, params, px, "patch_embed.w", "patch_embed.b")?);
    }
    let mut z_trace: Option<Vec<Vec<Tensor>>> =
        trace_z.then(|| vec![Vec::with_capacity(cfg.depth); frames.len()]);

    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        for z in zs.iter_mut() {
            let h =
                nn::layer_norm(tape, params, *z, &format!("{pre}.ln1.g"), &format!("{pre}.ln1.b"))?;
            let mha = nn::multi_head_attention(
                tape,
                params,
                &format!("{pre}.attn"),
                h,
                h,
                cfg.heads,
                &Mask::Full,
                Some(&rope.spatial_patch),
                Some(&rope.spatial_patch),
                false,
            )?;
            let s = tape.add(*z, mha.out)?;
            *z = nn::mlp_block(tape, params, s, &format!("{pre}.ln2_z"), &format!("{pre}.mlp_z"))?;
        }
        if let Some(trace) = z_trace.as_mut() {
            for (f, z) in zs.iter().enumerate() {
                trace[f].push(tape.tensor(*z));
            }
        }
    }

    let indices = Arc::new(pixel_shuffle_indices(cfg.grid_h, cfg.grid_w));
    let mut patch = Vec::with_capacity(frames.len());
    for &z in &zs {
        debug_assert_eq!(tape.shape(z)[0], o);
        patch.push(project_path(tape, params, z, indices.clone(), "proj_z")?);
    }
    Ok(BaseEncoded { patch, z_trace })
}

/// Streaming forward: frames arrive one at a time and temporal attention
/// reads a cache of the previous `temporal_window - 1` frames' standby
/// states instead of the whole group. Inference-only; output matches the
/// batch forward bit-for-bit.
pub fn encode_streaming(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    frames: &[FrameInput],
) -> Result<Vec<FrameTokens>> {
    cfg.validate()?;
    validate_frames(cfg, frames)?;
    let rope = build_rope(cfg)?;
    let n_vit = cfg.n_vit;
    let o = cfg.o();
    let mask = MaskSpec { n_standby: n_vit, n_patch: o }.mask();
    let one_d = RotaryConfig::one_d(cfg.head_dim())?;

    // per temporal layer: standby states of earlier frames in the open group
    let mut cache: Vec<Vec<Tensor>> = vec![Vec::new(); cfg.depth];
    let mut out = Vec::with_capacity(frames.len());

    for (g, frame) in frames.iter().enumerate() {
        let offset = g % cfg.temporal_window;
        if offset == 0 {
            for layer_cache in cache.iter_mut() {
                layer_cache.clear();
            }
        }

        let mut tape = Tape::new();
        let l_param = nn::param(&mut tape, params, super::params::STANDBY_EMBED_ID)?;
        let px = tape.input(&frame.pixels);
        let z_embed = nn::linear(&mut tape, params, px, "patch_embed.w", "patch_embed.b")?;
        let mut l = l_param;
        let mut z = z_embed;

        for i in 0..cfg.depth {
            let pre = format!("blocks.{i}");
            let s = tape.concat_rows(&[l, z])?;
            let h = nn::layer_norm(
                &mut tape,
                params,
                s,
                &format!("{pre}.ln1.g"),
                &format!("{pre}.ln1.b"),
            )?;
            let mha = nn::multi_head_attention(
                &mut tape,
                params,
                &format!("{pre}.attn"),
                h,
                h,
                cfg.heads,
                &mask,
                Some(&rope.spatial_full),
                Some(&rope.spatial_full),
                false,
            )?;
            let s = tape.add(s, mha.out)?;
            l = tape.slice_rows(s, 0, n_vit)?;
            z = tape.slice_rows(s, n_vit, o)?;

            if i + cfg.temporal_depth >= cfg.depth {
                let pre_t = format!("blocks.{i}.temporal");
                // stack = cached earlier frames followed by the current one
                let mut parts: Vec<NodeId> =
                    cache[i].iter().map(|t| tape.input(t)).collect();
                parts.push(l);
                let stack = tape.concat_rows(&parts)?;
                let normed = nn::layer_norm(
                    &mut tape,
                    params,
                    stack,
                    &format!("{pre_t}.ln.g"),
                    &format!("{pre_t}.ln.b"),
                )?;
                let q_src = tape.slice_rows(normed, offset * n_vit, n_vit)?;
                let q_pos: Vec<f64> = vec![offset as f64; n_vit];
                let k_pos: Vec<f64> = (0..=offset)
                    .flat_map(|off| std::iter::repeat_n(off as f64, n_vit))
                    .collect();
                let mha_t = nn::multi_head_attention(
                    &mut tape,
                    params,
                    &pre_t,
                    q_src,
                    normed,
                    cfg.heads,
                    &Mask::Full,
                    Some(&phase_matrix_1d(&one_d, &q_pos)),
                    Some(&phase_matrix_1d(&one_d, &k_pos)),
                    false,
                )?;
                cache[i].push(tape.tensor(l));
                l = tape.add(l, mha_t.out)?;
            }

            l = nn::mlp_block(&mut tape, params, l, &format!("{pre}.ln2_l"), &format!("{pre}.mlp_l"))?;
            z = nn::mlp_block(&mut tape, params, z, &format!("{pre}.ln2_z"), &format!("{pre}.mlp_z"))?;
        }

        let (standby, patch) = project(&mut tape, params, cfg, l, z)?;
        out.push(FrameTokens {
            index: frame.index,
            timestamp: frame.timestamp,
            standby: tape.tensor(standby),
            patch: tape.tensor(patch),
        });
    }
    Ok(out)
}

impl Encoded {
    pub fn frame_tokens(&self, tape: &Tape, frames: &[FrameInput]) -> Vec<FrameTokens> {
        frames
            .iter()
            .zip(self.standby.iter().zip(&self.patch))
            .map(|(f, (&s, &p))| FrameTokens {
                index: f.index,
                timestamp: f.timestamp,
                standby: tape.tensor(s),
                patch: tape.tensor(p),
            })
            .collect()
    }
}

/// Convenience wrapper for callers that want tensors, not tape nodes.
pub fn encode_tokens(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    frames: &[FrameInput],
    opts: &EncodeOpts,
) -> Result<(Vec<FrameTokens>, Option<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let enc = encode(&mut tape, params, cfg, frames, opts)?;
    let tokens = enc.frame_tokens(&tape, frames);
    Ok((tokens, enc.final_attention))
}
