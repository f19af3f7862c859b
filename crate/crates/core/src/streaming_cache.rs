//! Detachable KV-cache state machine for streaming inference.
//!
//! New frames land in the focus local window holding both their compact
//! standby block and their full-resolution block. When the window overflows
//! its token budget, the oldest frame's full block is destroyed and its
//! standby block migrates to the memory bank; when the bank overflows, its
//! oldest frames are dropped outright. Budgets count visual tokens only.

use crate::error::{Error, Result};
use crate::modes::{lm_forward, ToyLMConfig};
use crate::numerics::{NodeId, ParameterSet, Tape, Tensor};
use std::collections::VecDeque;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    FocusOriginal,
    Standby,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::FocusOriginal => write!(f, "focus"),
            BlockKind::Standby => write!(f, "standby"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheBlock {
    pub frame_id: u64,
    pub kind: BlockKind,
    pub token_count: usize,
    /// Position range `[pos_start, pos_start + token_count)` assigned at
    /// ingest; survives detachment, leaving gaps.
    pub pos_start: usize,
}

#[derive(Debug, Clone, Copy)]
struct FrameEntry {
    standby: CacheBlock,
    focus: CacheBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheEvent {
    Ingest { frame_id: u64, standby: usize, focus: usize },
    Detach { frame_id: u64, focus: usize },
    Migrate { frame_id: u64, standby: usize },
    Drop { frame_id: u64, standby: usize },
}

impl fmt::Display for CacheEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheEvent::Ingest { frame_id, standby, focus } => {
                write!(f, "ingest frame={frame_id} standby={standby} focus={focus}")
            }
            CacheEvent::Detach { frame_id, focus } => {
                write!(f, "detach frame={frame_id} focus={focus}")
            }
            CacheEvent::Migrate { frame_id, standby } => {
                write!(f, "migrate frame={frame_id} standby={standby}")
            }
            CacheEvent::Drop { frame_id, standby } => {
                write!(f, "drop frame={frame_id} standby={standby}")
            }
        }
    }
}

/// Focus local window + standby memory bank under token budgets.
#[derive(Debug, Clone)]
pub struct CacheState {
    local_window: VecDeque<FrameEntry>,
    memory_bank: VecDeque<CacheBlock>,
    pub local_budget: usize,
    pub bank_budget: usize,
    next_pos: usize,
    pub dropped_frames: u64,
    last_frame_id: Option<u64>,
}

impl CacheState {
    pub fn new(local_budget: usize, bank_budget: usize) -> Self {
        CacheState {
            local_window: VecDeque::new(),
            memory_bank: VecDeque::new(),
            local_budget,
            bank_budget,
            next_pos: 0,
            dropped_frames: 0,
            last_frame_id: None,
        }
    }

    pub fn local_tokens(&self) -> usize {
        self.local_window.iter().map(|e| e.standby.token_count + e.focus.token_count).sum()
    }

    pub fn bank_tokens(&self) -> usize {
        self.memory_bank.iter().map(|b| b.token_count).sum()
    }

    pub fn local_frames(&self) -> Vec<u64> {
        self.local_window.iter().map(|e| e.standby.frame_id).collect()
    }

    pub fn bank_frames(&self) -> Vec<u64> {
        self.memory_bank.iter().map(|b| b.frame_id).collect()
    }

    /// Ingest one frame: append its standby (`n_llm` tokens) and focus
    /// (`o_s` tokens) blocks, then evict/migrate/drop until both budgets
    /// hold. Returns the transition events in order.
    pub fn ingest_frame(&mut self, frame_id: u64, n_llm: usize, o_s: usize) -> Result<Vec<CacheEvent>> {
        if n_llm == 0 || o_s == 0 {
            return Err(Error::invalid("ingest_frame", "token counts must be positive"));
        }
        if let Some(last) = self.last_frame_id {
            if frame_id <= last {
                return Err(Error::invalid(
                    "ingest_frame",
                    format!("frame id {frame_id} not strictly increasing after {last}"),
                ));
            }
        }
        if n_llm + o_s > self.local_budget {
            return Err(Error::invalid(
                "ingest_frame",
                format!("frame needs {} tokens, local budget is {}", n_llm + o_s, self.local_budget),
            ));
        }
        self.last_frame_id = Some(frame_id);

        let standby = CacheBlock {
            frame_id,
            kind: BlockKind::Standby,
            token_count: n_llm,
            pos_start: self.next_pos,
        };
        let focus = CacheBlock {
            frame_id,
            kind: BlockKind::FocusOriginal,
            token_count: o_s,
            pos_start: self.next_pos + n_llm,
        };
        self.next_pos += n_llm + o_s;
        self.local_window.push_back(FrameEntry { standby, focus });
        let mut events = vec![CacheEvent::Ingest { frame_id, standby: n_llm, focus: o_s }];

        while self.local_tokens() > self.local_budget {
            let oldest = self.local_window.pop_front().expect("window cannot be empty here");
            events.push(CacheEvent::Detach {
                frame_id: oldest.focus.frame_id,
                focus: oldest.focus.token_count,
            });
            events.push(CacheEvent::Migrate {
                frame_id: oldest.standby.frame_id,
                standby: oldest.standby.token_count,
            });
            self.memory_bank.push_back(oldest.standby);
        }
        while self.bank_tokens() > self.bank_budget {
            let dropped = self.memory_bank.pop_front().expect("bank cannot be empty here");
            self.dropped_frames += 1;
            events.push(CacheEvent::Drop {
                frame_id: dropped.frame_id,
                standby: dropped.token_count,
            });
        }

        debug_assert!(self.local_tokens() <= self.local_budget);
        debug_assert!(self.bank_tokens() <= self.bank_budget);
        Ok(events)
    }

    /// Decode-time context: bank blocks (ascending frame), the local window
    /// (standby then focus per frame), then a text block of `text_tokens`.
    pub fn query_view(&self, text_tokens: usize) -> Vec<ViewBlock> {
        let mut out = Vec::new();
        for b in &self.memory_bank {
            out.push(ViewBlock {
                frame_id: Some(b.frame_id),
                kind: Some(b.kind),
                token_count: b.token_count,
                pos_start: b.pos_start,
            });
        }
        for e in &self.local_window {
            for b in [&e.standby, &e.focus] {
                out.push(ViewBlock {
                    frame_id: Some(b.frame_id),
                    kind: Some(b.kind),
                    token_count: b.token_count,
                    pos_start: b.pos_start,
                });
            }
        }
        if text_tokens > 0 {
            out.push(ViewBlock {
                frame_id: None,
                kind: None,
                token_count: text_tokens,
                pos_start: self.next_pos,
            });
        }
        out
    }
}

/// One block of the decode-time context; `kind == None` marks text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewBlock {
    pub frame_id: Option<u64>,
    pub kind: Option<BlockKind>,
    pub token_count: usize,
    pub pos_start: usize,
}

// ─── Budget planning ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct BudgetPlan {
    pub total_budget: usize,
    pub local_budget: usize,
    pub bank_budget: usize,
    pub fps: f64,
    pub focus_tokens_per_frame: usize,
    pub standby_tokens_per_frame: usize,
    /// Seconds of full-fidelity context the local window holds.
    pub focus_seconds: f64,
    /// Seconds of compressed memory the bank holds.
    pub bank_seconds: f64,
    /// Seconds a single flat full-resolution cache would hold.
    pub baseline_seconds: f64,
    pub memory_multiplier: f64,
}

pub fn plan_budget(
    total: usize,
    local: usize,
    fps: f64,
    n_llm: usize,
    o_s: usize,
) -> Result<BudgetPlan> {
    if fps <= 0.0 || !fps.is_finite() {
        return Err(Error::invalid("plan_budget", "fps must be positive"));
    }
    if total == 0 || local == 0 || n_llm == 0 || o_s == 0 {
        return Err(Error::invalid("plan_budget", "inputs must be positive"));
    }
    if local > total {
        return Err(Error::invalid("plan_budget", "local budget exceeds total"));
    }
    let focus_per_frame = n_llm + o_s;
    let bank = total - local;
    let focus_seconds = local as f64 / (focus_per_frame as f64 * fps);
    let bank_seconds = bank as f64 / (n_llm as f64 * fps);
    let baseline_seconds = total as f64 / (o_s as f64 * fps);
    Ok(BudgetPlan {
        total_budget: total,
        local_budget: local,
        bank_budget: bank,
        fps,
        focus_tokens_per_frame: focus_per_frame,
        standby_tokens_per_frame: n_llm,
        focus_seconds,
        bank_seconds,
        baseline_seconds,
        memory_multiplier: (focus_seconds + bank_seconds) / baseline_seconds,
    })
}

/// Streaming token total: every frame contributes its standby tokens, and
/// the focus frames additionally carry `focus_extra` full-resolution tokens.
pub fn streaming_token_total(
    standby_frames: usize,
    focus_frames: usize,
    n_llm: usize,
    focus_extra: usize,
) -> usize {
    (standby_frames + focus_frames) * n_llm + focus_frames * focus_extra
}

// ─── Detach vs re-prefill comparison ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StrategyReport {
    /// Retained (frame_id, kind) sets are identical between strategies.
    pub retained_equal: bool,
    pub retained_blocks: usize,
    /// Max |logit_detach − logit_reprefill| at the probe position.
    pub max_logit_divergence: f64,
}

/// Run the cache over `frame_tokens`, then score a probe query two ways:
/// detach (blocks keep their ingest positions, gaps where focus blocks
/// died) versus re-prefill (same blocks, compacted positions). Reports
/// retained-set equality and the output divergence.
pub fn detach_vs_reprefill_compare(
    params: &ParameterSet,
    lm_cfg: &ToyLMConfig,
    frame_tokens: &[(u64, Tensor, Tensor)],
    local_budget: usize,
    bank_budget: usize,
    probe_text: &[usize],
) -> Result<StrategyReport> {
    if frame_tokens.is_empty() {
        return Err(Error::invalid("detach_vs_reprefill", "empty history"));
    }
    let n_llm = frame_tokens[0].1.shape()[0];
    let o_s = frame_tokens[0].2.shape()[0];
    let mut state = CacheState::new(local_budget, bank_budget);
    for (id, _, _) in frame_tokens {
        state.ingest_frame(*id, n_llm, o_s)?;
    }
    let view = state.query_view(0);

    let (detach_logits, detach_blocks) =
        probe_logits(params, lm_cfg, frame_tokens, &view, probe_text, false)?;
    let (reprefill_logits, reprefill_blocks) =
        probe_logits(params, lm_cfg, frame_tokens, &view, probe_text, true)?;

    let max_div = detach_logits
        .data()
        .iter()
        .zip(reprefill_logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(StrategyReport {
        retained_equal: detach_blocks == reprefill_blocks,
        retained_blocks: detach_blocks.len(),
        max_logit_divergence: max_div,
    })
}

/// Returns the last-position logits plus the `(frame_id, kind)` list the
/// strategy actually scored.
fn probe_logits(
    params: &ParameterSet,
    lm_cfg: &ToyLMConfig,
    frame_tokens: &[(u64, Tensor, Tensor)],
    view: &[ViewBlock],
    probe_text: &[usize],
    compact_positions: bool,
) -> Result<(Tensor, Vec<(u64, BlockKind)>)> {
    let mut tape = Tape::new();
    let mut parts: Vec<NodeId> = Vec::new();
    let mut positions: Vec<f64> = Vec::new();
    let mut consumed: Vec<(u64, BlockKind)> = Vec::new();
    let mut next_compact = 0usize;

    for block in view {
        let frame_id = block.frame_id.expect("visual block");
        consumed.push((frame_id, block.kind.expect("visual block")));
        let (_, standby, focus) = frame_tokens
            .iter()
            .find(|(id, _, _)| *id == frame_id)
            .ok_or_else(|| Error::invalid("detach_vs_reprefill", "unknown frame in view"))?;
        let tensor = match block.kind.expect("visual block") {
            BlockKind::Standby => standby,
            BlockKind::FocusOriginal => focus,
        };
        parts.push(tape.input(tensor));
        for i in 0..block.token_count {
            if compact_positions {
                positions.push((next_compact + i) as f64);
            } else {
                positions.push((block.pos_start + i) as f64);
            }
        }
        next_compact += block.token_count;
    }
    if !probe_text.is_empty() {
        let embed = tape.param(params.get("lm.embed")?);
        parts.push(tape.gather_rows(embed, std::sync::Arc::new(probe_text.to_vec()))?);
        let text_start = if compact_positions {
            next_compact
        } else {
            view.last().map(|b| b.pos_start + b.token_count).unwrap_or(0)
        };
        for i in 0..probe_text.len() {
            positions.push((text_start + i) as f64);
        }
    }
    let seq = tape.concat_rows(&parts)?;
    let logits = lm_forward(&mut tape, params, lm_cfg, seq, &positions)?;
    let rows = tape.shape(logits)[0];
    let last = tape.slice_rows(logits, rows - 1, 1)?;
    Ok((tape.tensor(last), consumed))
}
