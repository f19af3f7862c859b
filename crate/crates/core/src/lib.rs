//! Dual-mode visual processing at desk scale: a dual-path encoder with
//! standby tokens, two-stage training, attention-based pruning, a
//! detachable streaming cache, and analytic cost accounting — all on a
//! deterministic 64-bit tensor substrate with exhaustive invariant tests.

pub mod config;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod modes;
pub mod par;
pub mod positional;
pub mod pruning;
pub mod streaming_cache;
pub mod synth;

pub use error::{Error, Result};
