//! Rotary position embeddings (1D and 2D axial) and the lattice sampling
//! that assigns 2D positions to standby tokens.
//!
//! Rotations act on adjacent channel pairs `(2p, 2p+1)`. The 2D mode splits
//! the pairs evenly: the first half rotates by the row coordinate, the
//! second half by the column coordinate, each with its own frequency ramp.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape};

/// Fractional grid coordinates; patch tokens sit on integer coordinates,
/// standby tokens on sampled lattice centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position2D {
    pub row: f64,
    pub col: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotaryMode {
    OneD,
    TwoD,
}

#[derive(Debug, Clone, Copy)]
pub struct RotaryConfig {
    pub head_dim: usize,
    pub base: f64,
    pub mode: RotaryMode,
}

pub const DEFAULT_ROTARY_BASE: f64 = 10_000.0;

impl RotaryConfig {
    pub fn one_d(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::invalid("rotary", format!("1D head_dim {head_dim} must be even")));
        }
        Ok(RotaryConfig { head_dim, base: DEFAULT_ROTARY_BASE, mode: RotaryMode::OneD })
    }

    pub fn two_d(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(Error::invalid(
                "rotary",
                format!("2D head_dim {head_dim} must be divisible by 4"),
            ));
        }
        Ok(RotaryConfig { head_dim, base: DEFAULT_ROTARY_BASE, mode: RotaryMode::TwoD })
    }

    fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    /// Rotation angles for one position, length `head_dim / 2`.
    pub fn phases_1d(&self, position: f64) -> Vec<f64> {
        debug_assert_eq!(self.mode, RotaryMode::OneD);
        let pairs = self.pairs();
        (0..pairs)
            .map(|p| position * self.base.powf(-2.0 * p as f64 / self.head_dim as f64))
            .collect()
    }

    /// Axial angles: row coordinate drives the first `head_dim/4` pairs,
    /// column coordinate the rest, each ramp normalized within its half.
    pub fn phases_2d(&self, position: Position2D) -> Vec<f64> {
        debug_assert_eq!(self.mode, RotaryMode::TwoD);
        let axis_pairs = self.head_dim / 4;
        let axis_dim = self.head_dim / 2;
        let mut phases = Vec::with_capacity(self.pairs());
        for p in 0..axis_pairs {
            phases.push(position.row * self.base.powf(-2.0 * p as f64 / axis_dim as f64));
        }
        for p in 0..axis_pairs {
            phases.push(position.col * self.base.powf(-2.0 * p as f64 / axis_dim as f64));
        }
        phases
    }
}

/// Phase matrix (`rows × head_dim/2`) for per-row 1D positions.
pub fn phase_matrix_1d(cfg: &RotaryConfig, positions: &[f64]) -> Arc<Vec<f64>> {
    let mut out = Vec::with_capacity(positions.len() * cfg.pairs());
    for &pos in positions {
        out.extend(cfg.phases_1d(pos));
    }
    Arc::new(out)
}

/// Phase matrix (`rows × head_dim/2`) for per-row 2D positions.
pub fn phase_matrix_2d(cfg: &RotaryConfig, positions: &[Position2D]) -> Arc<Vec<f64>> {
    let mut out = Vec::with_capacity(positions.len() * cfg.pairs());
    for &pos in positions {
        out.extend(cfg.phases_2d(pos));
    }
    Arc::new(out)
}

/// Rotate every row of `x` by the same 1D position.
pub fn rotate_1d(tape: &mut Tape, x: NodeId, position: f64, cfg: &RotaryConfig) -> Result<NodeId> {
    if cfg.mode != RotaryMode::OneD {
        return Err(Error::invalid("rotate_1d", "config is not 1D"));
    }
    if *tape.shape(x).last().unwrap() != cfg.head_dim {
        return Err(Error::invalid("rotate_1d", "last extent != head_dim"));
    }
    let rows = tape.shape(x)[..tape.shape(x).len() - 1].iter().product::<usize>().max(1);
    let phases = phase_matrix_1d(cfg, &vec![position; rows]);
    tape.rotate(x, phases)
}

/// Rotate every row of `x` by the same 2D position.
pub fn rotate_2d(
    tape: &mut Tape,
    x: NodeId,
    position: Position2D,
    cfg: &RotaryConfig,
) -> Result<NodeId> {
    if cfg.mode != RotaryMode::TwoD {
        return Err(Error::invalid("rotate_2d", "config is not 2D"));
    }
    if *tape.shape(x).last().unwrap() != cfg.head_dim {
        return Err(Error::invalid("rotate_2d", "last extent != head_dim"));
    }
    let rows = tape.shape(x)[..tape.shape(x).len() - 1].iter().product::<usize>().max(1);
    let phases = phase_matrix_2d(cfg, &vec![position; rows]);
    tape.rotate(x, phases)
}

/// Integer grid coordinates of an `h × w` patch grid in row-major order.
pub fn grid_positions(grid_h: usize, grid_w: usize) -> Vec<Position2D> {
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for r in 0..grid_h {
        for c in 0..grid_w {
            out.push(Position2D { row: r as f64, col: c as f64 });
        }
    }
    out
}

/// Deterministic lattice sampling of `n` standby positions on an
/// `grid_h × grid_w` grid: `r = ceil(sqrt(n))` lattice rows,
/// `c = ceil(n / r)` lattice columns, cell centers in row-major order
/// truncated to `n`.
pub fn sample_standby_positions(grid_h: usize, grid_w: usize, n: usize) -> Result<Vec<Position2D>> {
    if n == 0 {
        return Err(Error::invalid("sample_standby_positions", "n must be >= 1"));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::invalid("sample_standby_positions", "empty grid"));
    }
    if n > grid_h * grid_w {
        return Err(Error::invalid(
            "sample_standby_positions",
            format!("n={n} exceeds grid capacity {}", grid_h * grid_w),
        ));
    }
    let r = (n as f64).sqrt().ceil() as usize;
    let c = n.div_ceil(r);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ir = i / c;
        let ic = i % c;
        out.push(Position2D {
            row: (ir as f64 + 0.5) * grid_h as f64 / r as f64,
            col: (ic as f64 + 0.5) * grid_w as f64 / c as f64,
        });
    }
    Ok(out)
}
