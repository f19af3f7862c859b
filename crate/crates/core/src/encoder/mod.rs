//! Dual-path vision encoder: shared attention with an asymmetric mask,
//! duplicated MLPs and projector for the standby path, and causal temporal
//! attention over standby tokens in the final layers.

pub mod forward;
pub mod params;

pub use forward::{
    encode, encode_base, encode_streaming, encode_tokens, mlp_path, pixel_shuffle_indices,
    BaseEncoded, EncodeOpts, Encoded, FrameInput, FrameTokens, PathSel,
};
pub use params::{base_encoder_params, init_dual_path, is_new_param, DualPathParams};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::numerics::Mask;

/// Tokens aggregated by one pixel-shuffle group.
pub const SHUFFLE_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Standby tokens per frame inside the encoder; the LM sees
    /// `n_vit / SHUFFLE_FACTOR` of them after the projector.
    pub n_vit: usize,
    /// Temporal attention lives in the last `temporal_depth` layers.
    pub temporal_depth: usize,
    /// Frames per non-overlapping temporal group.
    pub temporal_window: usize,
    /// Synthetic "pixel" feature size fed to the patch embedding.
    pub pixel_dim: usize,
    /// LM-side token width produced by the projector.
    pub proj_dim: usize,
}

impl EncoderConfig {
    /// Patch tokens per frame.
    pub fn o(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Standby tokens per frame after pixel shuffle.
    pub fn n_llm(&self) -> usize {
        self.n_vit / SHUFFLE_FACTOR
    }

    /// Patch tokens per frame after pixel shuffle.
    pub fn z_llm(&self) -> usize {
        self.o() / SHUFFLE_FACTOR
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("encoder_config", msg));
        if self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if !self.head_dim().is_multiple_of(4) {
            return fail(format!("head_dim {} must be divisible by 4 for 2D rotary", self.head_dim()));
        }
        if !self.grid_h.is_multiple_of(2) || !self.grid_w.is_multiple_of(2) {
            return fail(format!(
                "grid {}x{} must have even sides for 2x2 pixel shuffle",
                self.grid_h, self.grid_w
            ));
        }
        if self.n_vit == 0 || !self.n_vit.is_multiple_of(SHUFFLE_FACTOR) {
            return fail(format!("n_vit {} must be a positive multiple of {SHUFFLE_FACTOR}", self.n_vit));
        }
        if self.n_vit > self.o() {
            return fail(format!("n_vit {} exceeds patch count {}", self.n_vit, self.o()));
        }
        if self.temporal_depth > self.depth {
            return fail(format!("temporal_depth {} > depth {}", self.temporal_depth, self.depth));
        }
        if self.temporal_window == 0 {
            return fail("temporal_window must be >= 1".into());
        }
        if self.ff_dim == 0 || self.pixel_dim == 0 || self.proj_dim == 0 {
            return fail("ff_dim, pixel_dim, proj_dim must be positive".into());
        }
        Ok(())
    }

    /// Toy defaults; `temporal_depth` follows the convention of "last 5
    /// layers" capped at the actual depth.
    pub fn toy() -> Self {
        EncoderConfig {
            depth: 2,
            hidden_dim: 16,
            heads: 2,
            ff_dim: 32,
            grid_h: 4,
            grid_w: 4,
            n_vit: 4,
            temporal_depth: 1,
            temporal_window: 8,
            pixel_dim: 6,
            proj_dim: 12,
        }
    }

    /// Read `encoder.*` keys, falling back to the toy defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let toy = Self::toy();
        let depth = kv.usize_or("encoder.depth", toy.depth)?;
        let cfg = EncoderConfig {
            depth,
            hidden_dim: kv.usize_or("encoder.hidden_dim", toy.hidden_dim)?,
            heads: kv.usize_or("encoder.heads", toy.heads)?,
            ff_dim: kv.usize_or("encoder.ff_dim", toy.ff_dim)?,
            grid_h: kv.usize_or("encoder.grid_h", toy.grid_h)?,
            grid_w: kv.usize_or("encoder.grid_w", toy.grid_w)?,
            n_vit: kv.usize_or("encoder.n_vit", toy.n_vit)?,
            temporal_depth: kv.usize_or("encoder.temporal_depth", depth.min(5))?,
            temporal_window: kv.usize_or("encoder.temporal_window", toy.temporal_window)?,
            pixel_dim: kv.usize_or("encoder.pixel_dim", toy.pixel_dim)?,
            proj_dim: kv.usize_or("encoder.proj_dim", toy.proj_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Key-value echo, used by checkpoints and run manifests.
    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!("encoder.depth = {}", self.depth),
            format!("encoder.hidden_dim = {}", self.hidden_dim),
            format!("encoder.heads = {}", self.heads),
            format!("encoder.ff_dim = {}", self.ff_dim),
            format!("encoder.grid_h = {}", self.grid_h),
            format!("encoder.grid_w = {}", self.grid_w),
            format!("encoder.n_vit = {}", self.n_vit),
            format!("encoder.temporal_depth = {}", self.temporal_depth),
            format!("encoder.temporal_window = {}", self.temporal_window),
            format!("encoder.pixel_dim = {}", self.pixel_dim),
            format!("encoder.proj_dim = {}", self.proj_dim),
        ]
    }
}

/// Structural descriptor of the asymmetric attention mask: standby queries
/// see everything, patch queries see only patch keys. Block-structured, so
/// no dense matrix is ever built.
#[derive(Debug, Clone, Copy)]
pub struct MaskSpec {
    pub n_standby: usize,
    pub n_patch: usize,
}

impl MaskSpec {
    pub fn mask(&self) -> Mask {
        Mask::Asymmetric { n_standby: self.n_standby }
    }

    pub fn seq_len(&self) -> usize {
        self.n_standby + self.n_patch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        EncoderConfig::toy().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = EncoderConfig::toy();
        cfg.n_vit = 6; // not a multiple of 4
        assert!(cfg.validate().is_err());

        let mut cfg = EncoderConfig::toy();
        cfg.grid_w = 3; // odd side
        assert!(cfg.validate().is_err());

        let mut cfg = EncoderConfig::toy();
        cfg.temporal_depth = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let cfg = EncoderConfig::toy();
        let text = cfg.to_kv_lines().join("\n");
        let parsed = EncoderConfig::from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn mask_spec_rule() {
        let spec = MaskSpec { n_standby: 2, n_patch: 4 };
        let m = spec.mask();
        assert!(m.permits(0, 5));
        assert!(!m.permits(3, 1));
        assert!(m.permits(3, 2));
    }
}
