//! Training-free token pruning from standby-token attention.
//!
//! Group scores come from the final encoder layer: for each pixel-shuffle
//! quadruple, the mean post-softmax attention weight its four tokens
//! receive from the standby queries, averaged over heads. Pruning keeps the
//! top `m%` of groups (ceil, ties to the lower group index), so the
//! retained token count is always a multiple of four.

use crate::encoder::{pixel_shuffle_indices, EncoderConfig, SHUFFLE_FACTOR};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupScore {
    /// Index over the `o/4` pixel-shuffle groups.
    pub group: usize,
    /// Mean attention weight received from standby queries.
    pub score: f64,
}

/// `attention` is the final-layer capture with shape `[heads, n_vit, o]`.
/// Group `g` covers the tokens of pixel-shuffle quadruple `g`; its score is
/// the mean over heads, standby queries, and the four member tokens.
pub fn compute_group_scores(attention: &Tensor, cfg: &EncoderConfig) -> Result<Vec<GroupScore>> {
    let o = cfg.o();
    let n_vit = cfg.n_vit;
    let heads = cfg.heads;
    if attention.shape() != [heads, n_vit, o] {
        return Err(Error::ShapeMismatch {
            op: "compute_group_scores",
            lhs: attention.shape().to_vec(),
            rhs: vec![heads, n_vit, o],
        });
    }
    let groups = pixel_shuffle_indices(cfg.grid_h, cfg.grid_w);
    let n_groups = o / SHUFFLE_FACTOR;
    let denom = (heads * n_vit * SHUFFLE_FACTOR) as f64;
    let data = attention.data();

    let mut out = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let members = &groups[g * SHUFFLE_FACTOR..(g + 1) * SHUFFLE_FACTOR];
        let mut acc = 0.0;
        for h in 0..heads {
            for q in 0..n_vit {
                let row = &data[(h * n_vit + q) * o..(h * n_vit + q + 1) * o];
                for &tok in members {
                    acc += row[tok];
                }
            }
        }
        out.push(GroupScore { group: g, score: acc / denom });
    }
    Ok(out)
}

/// Retain the `ceil(m/100 · G)` highest-scoring groups; ties break toward
/// the lower group index. Returns retained group indices sorted ascending.
pub fn prune_top_m(scores: &[GroupScore], m_percent: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::invalid("prune_top_m", "empty score list"));
    }
    if !(m_percent > 0.0 && m_percent <= 100.0) {
        return Err(Error::invalid("prune_top_m", format!("m={m_percent} outside (0, 100]")));
    }
    let keep = (m_percent / 100.0 * scores.len() as f64).ceil() as usize;
    let keep = keep.clamp(1, scores.len());

    let mut order: Vec<&GroupScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.group.cmp(&b.group)));
    let mut retained: Vec<usize> = order[..keep].iter().map(|s| s.group).collect();
    retained.sort_unstable();
    Ok(retained)
}

/// Tokens retained when pruning at `m%` (always a multiple of four).
pub fn retained_token_count(retained_groups: usize) -> usize {
    retained_groups * SHUFFLE_FACTOR
}

/// Per-standby-token attention grid for export: the token's head-mean
/// attention over patch keys, renormalized over the grid, zeroed outside
/// the top `top_fraction` of cells (ties keep the lower cell index).
pub fn export_attention_map(
    attention: &Tensor,
    cfg: &EncoderConfig,
    top_fraction: f64,
) -> Result<Vec<Tensor>> {
    let o = cfg.o();
    let n_vit = cfg.n_vit;
    let heads = cfg.heads;
    if attention.shape() != [heads, n_vit, o] {
        return Err(Error::ShapeMismatch {
            op: "export_attention_map",
            lhs: attention.shape().to_vec(),
            rhs: vec![heads, n_vit, o],
        });
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::invalid(
            "export_attention_map",
            format!("top_fraction {top_fraction} outside (0, 1]"),
        ));
    }
    let keep = ((top_fraction * o as f64).ceil() as usize).clamp(1, o);
    let data = attention.data();

    let mut maps = Vec::with_capacity(n_vit);
    for q in 0..n_vit {
        // head-mean weight per patch key, renormalized over the grid
        let mut grid = vec![0.0; o];
        for h in 0..heads {
            let row = &data[(h * n_vit + q) * o..(h * n_vit + q + 1) * o];
            for (slot, &w) in grid.iter_mut().zip(row) {
                *slot += w;
            }
        }
        let total: f64 = grid.iter().sum();
        if total > 0.0 {
            for slot in grid.iter_mut() {
                *slot /= total;
            }
        }
        if keep < o {
            let mut order: Vec<usize> = (0..o).collect();
            order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]).then(a.cmp(&b)));
            let cut: std::collections::BTreeSet<usize> = order[..keep].iter().copied().collect();
            for (i, slot) in grid.iter_mut().enumerate() {
                if !cut.contains(&i) {
                    *slot = 0.0;
                }
            }
        }
        maps.push(Tensor::new(vec![cfg.grid_h, cfg.grid_w], grid)?);
    }
    Ok(maps)
}

/// CSV rendering of one exported grid: one line per grid row.
pub fn attention_map_csv(map: &Tensor) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = String::new();
    for r in 0..h {
        let cells: Vec<String> = (0..w).map(|c| format!("{}", map.data()[r * w + c])).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Binary PGM (P5) rendering, weights scaled so the max cell is white.
pub fn attention_map_pgm(map: &Tensor) -> Vec<u8> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let max = map.data().iter().cloned().fold(0.0_f64, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.data() {
        let px = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
        out.push(px);
    }
    out
}

/// Reference 2×2 average pooling over the patch grid — the comparison
/// baseline used in tests, not a production path.
pub fn average_pool_groups(z: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let o = cfg.o();
    let d = *z.shape().last().unwrap();
    if z.shape()[0] != o {
        return Err(Error::ShapeMismatch {
            op: "average_pool_groups",
            lhs: z.shape().to_vec(),
            rhs: vec![o, d],
        });
    }
    let groups = pixel_shuffle_indices(cfg.grid_h, cfg.grid_w);
    let n_groups = o / SHUFFLE_FACTOR;
    let mut data = vec![0.0; n_groups * d];
    for g in 0..n_groups {
        for &tok in &groups[g * SHUFFLE_FACTOR..(g + 1) * SHUFFLE_FACTOR] {
            for j in 0..d {
                data[g * d + j] += z.data()[tok * d + j] / SHUFFLE_FACTOR as f64;
            }
        }
    }
    Tensor::new(vec![n_groups, d], data)
}
