//! Analytic token, FLOPs, and KV-footprint accounting.
//!
//! Conventions: a multiply-add is 2 FLOPs; attention score/value work is
//! counted over the full `L²` extent (what a dense attention kernel
//! executes, causal or not); gated feed-forwards cost three matmuls, plain
//! ones two. Encoder cost is strictly per-frame (temporal attention is
//! amortized per frame at one complete group), so it is exactly linear in
//! the frame count.

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Dense-transformer architecture constants, supplied via config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ff: usize,
    pub gated_ffn: bool,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("arch_spec", msg));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.kv_heads == 0 || self.ff == 0 {
            return fail("all fields must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return fail(format!("kv_heads {} must divide heads {}", self.kv_heads, self.heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Width of the k/v projections.
    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    /// Read `<prefix>.layers`, `<prefix>.hidden`, ... from a config.
    pub fn from_kv(kv: &KvConfig, prefix: &str) -> Result<Self> {
        let spec = ArchSpec {
            layers: kv.usize(&format!("{prefix}.layers"))?,
            hidden: kv.usize(&format!("{prefix}.hidden"))?,
            heads: kv.usize(&format!("{prefix}.heads"))?,
            kv_heads: kv.usize(&format!("{prefix}.kv_heads"))?,
            ff: kv.usize(&format!("{prefix}.ff"))?,
            gated_ffn: kv.bool_or(&format!("{prefix}.gated_ffn"), false)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Linear-term FLOPs per token across all layers: q/k/v/out projections
    /// plus the feed-forward.
    pub fn linear_flops_per_token(&self) -> f64 {
        let d = self.hidden as f64;
        let d_kv = self.kv_dim() as f64;
        let ff = self.ff as f64;
        let ffn_matmuls = if self.gated_ffn { 3.0 } else { 2.0 };
        let per_layer = 2.0 * d * d          // q
            + 2.0 * 2.0 * d * d_kv           // k, v
            + 2.0 * d * d                    // out
            + ffn_matmuls * 2.0 * d * ff;    // feed-forward
        per_layer * self.layers as f64
    }

    /// Quadratic attention FLOPs for a length-`len` sequence across all
    /// layers: scores plus value aggregation, full extent.
    pub fn attention_flops(&self, len: u64) -> f64 {
        let l = len as f64;
        2.0 * 2.0 * l * l * self.hidden as f64 * self.layers as f64
    }
}

// ─── Token accounting ─────────────────────────────────────────────────────────

/// The reference full-resolution run: 64 frames at 324 tokens.
pub const BASELINE_TOTAL_TOKENS: u64 = 64 * 324;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenCount {
    pub total: u64,
    pub ratio: f64,
    /// Ratio snapped to the printed granularity (multiples of 2.5%).
    pub label: String,
}

pub fn token_count(frames: u64, tokens_per_frame: u64, baseline_total: u64) -> TokenCount {
    let total = frames * tokens_per_frame;
    let ratio = total as f64 / baseline_total as f64;
    TokenCount { total, ratio, label: percent_label(ratio) }
}

/// Snap a ratio to the nearest multiple of 2.5% and render it minimally
/// (`0.02469 → "2.5%"`, `0.04938 → "5%"`).
pub fn percent_label(ratio: f64) -> String {
    let snapped = (ratio * 100.0 / 2.5).round() * 2.5;
    if snapped == snapped.trunc() {
        format!("{}%", snapped as i64)
    } else {
        format!("{snapped:.1}%")
    }
}

// ─── FLOPs ────────────────────────────────────────────────────────────────────

/// Single-path encoder FLOPs: per-frame dense-transformer cost times the
/// frame count. Exactly linear in `frames`.
pub fn encoder_flops(arch: &ArchSpec, frames: u64, tokens_per_frame: u64) -> f64 {
    let per_frame = tokens_per_frame as f64 * arch.linear_flops_per_token()
        + arch.attention_flops(tokens_per_frame);
    frames as f64 * per_frame
}

/// Dual-path encoder FLOPs: the per-frame sequence grows by `n_vit` standby
/// tokens, and the last `temporal_depth` layers add temporal attention over
/// groups of `temporal_window` frames, amortized per frame. Still exactly
/// linear in `frames`.
pub fn dual_encoder_flops(
    arch: &ArchSpec,
    frames: u64,
    tokens_per_frame: u64,
    n_vit: u64,
    temporal_depth: usize,
    temporal_window: u64,
) -> f64 {
    let seq = tokens_per_frame + n_vit;
    let spatial = seq as f64 * arch.linear_flops_per_token() + arch.attention_flops(seq);
    let d = arch.hidden as f64;
    let ffn = 0.0; // temporal block is attention-only
    let per_frame_temporal = temporal_depth as f64
        * (2.0 * 4.0 * n_vit as f64 * d * d                                  // q/k/v/out per frame share
            + 2.0 * 2.0 * temporal_window as f64 * (n_vit as f64).powi(2) * d // group attention / window
            + ffn);
    frames as f64 * (spatial + per_frame_temporal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillFlops {
    pub linear: f64,
    pub quadratic: f64,
    pub total: f64,
}

/// LM prefill cost for a length-`len` sequence, split into the linear
/// (projections, feed-forward) and quadratic (attention) terms.
pub fn lm_prefill_flops(arch: &ArchSpec, len: u64) -> PrefillFlops {
    let linear = len as f64 * arch.linear_flops_per_token();
    let quadratic = arch.attention_flops(len);
    PrefillFlops { linear, quadratic, total: linear + quadratic }
}

// ─── KV footprint ─────────────────────────────────────────────────────────────

/// KV-cache bytes one request of `len` tokens pins.
pub fn kv_footprint(arch: &ArchSpec, len: u64, bytes_per_value: u64) -> u64 {
    2 * arch.layers as u64 * arch.kv_dim() as u64 * len * bytes_per_value
}

/// Concurrent decode requests a VRAM budget sustains.
pub fn max_batch(per_request_bytes: u64, budget_bytes: u64) -> u64 {
    if per_request_bytes == 0 {
        return 0;
    }
    budget_bytes / per_request_bytes
}

// ─── Report ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModeCost {
    pub mode: &'static str,
    pub visual_tokens: u64,
    pub token_label: String,
    pub encoder_flops: f64,
    pub lm: PrefillFlops,
    pub kv_bytes: u64,
    pub max_batch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub frames: u64,
    pub standby: ModeCost,
    pub focus: ModeCost,
}

pub struct CostInputs {
    pub vit: ArchSpec,
    pub lm: ArchSpec,
    pub frames: u64,
    pub vit_tokens_per_frame: u64,
    pub n_vit: u64,
    pub n_llm: u64,
    pub z_llm: u64,
    pub temporal_depth: usize,
    pub temporal_window: u64,
    pub bytes_per_value: u64,
    pub vram_budget: u64,
}

pub fn build_cost_report(inp: &CostInputs) -> Result<CostReport> {
    inp.vit.validate()?;
    inp.lm.validate()?;
    let enc = dual_encoder_flops(
        &inp.vit,
        inp.frames,
        inp.vit_tokens_per_frame,
        inp.n_vit,
        inp.temporal_depth,
        inp.temporal_window,
    );
    let mode_cost = |mode: &'static str, tokens_per_frame: u64| -> ModeCost {
        let tc = token_count(inp.frames, tokens_per_frame, BASELINE_TOTAL_TOKENS);
        let lm = lm_prefill_flops(&inp.lm, tc.total);
        let kv = kv_footprint(&inp.lm, tc.total, inp.bytes_per_value);
        ModeCost {
            mode,
            visual_tokens: tc.total,
            token_label: tc.label,
            encoder_flops: enc,
            lm,
            kv_bytes: kv,
            max_batch: max_batch(kv, inp.vram_budget),
        }
    };
    Ok(CostReport {
        frames: inp.frames,
        standby: mode_cost("standby", inp.n_llm),
        focus: mode_cost("focus", inp.n_llm + inp.z_llm),
    })
}

impl ModeCost {
    fn json_fields(&self) -> String {
        format!(
            "{{\"mode\": \"{}\", \"visual_tokens\": {}, \"token_label\": \"{}\", \
             \"encoder_flops\": {}, \"lm_linear_flops\": {}, \"lm_quadratic_flops\": {}, \
             \"lm_total_flops\": {}, \"kv_bytes\": {}, \"max_batch\": {}}}",
            self.mode,
            self.visual_tokens,
            self.token_label,
            self.encoder_flops,
            self.lm.linear,
            self.lm.quadratic,
            self.lm.total,
            self.kv_bytes,
            self.max_batch
        )
    }
}

impl CostReport {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"frames\": {}, \"modes\": [{}, {}]}}\n",
            self.frames,
            self.standby.json_fields(),
            self.focus.json_fields()
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mode,visual_tokens,token_label,encoder_flops,lm_linear_flops,lm_quadratic_flops,lm_total_flops,kv_bytes,max_batch\n",
        );
        for m in [&self.standby, &self.focus] {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                m.mode,
                m.visual_tokens,
                m.token_label,
                m.encoder_flops,
                m.lm.linear,
                m.lm.quadratic,
                m.lm.total,
                m.kv_bytes,
                m.max_batch
            ));
        }
        out
    }
}
