//! Inference-mode sequence assembly and the toy causal LM.
//!
//! Standby mode feeds the LM only the projected standby tokens; focus mode
//! feeds standby followed by patch tokens per frame. Text is appended and
//! positions run sequentially over the whole sequence.

pub mod checkpoint;
pub mod prompt;
pub mod training;

pub use checkpoint::{load_checkpoint, model_soup, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use prompt::serialize_prompt;
pub use training::{stage1_step, stage2_step, System};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Mask, NodeId, ParameterSet, Tape, Tensor};
use crate::positional::{phase_matrix_1d, RotaryConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSelector {
    Standby,
    Focus,
}

impl std::str::FromStr for ModeSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standby" => Ok(ModeSelector::Standby),
            "focus" => Ok(ModeSelector::Focus),
            other => Err(Error::invalid("mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyLMConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab: usize,
}

impl ToyLMConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("lm_config", msg));
        if self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head_dim {} must be even for 1D rotary", self.head_dim()));
        }
        if self.vocab < 2 {
            return fail("vocab must be >= 2".into());
        }
        if self.ff_dim == 0 {
            return fail("ff_dim must be positive".into());
        }
        Ok(())
    }

    pub fn toy() -> Self {
        ToyLMConfig { depth: 2, hidden_dim: 12, heads: 2, ff_dim: 24, vocab: 16 }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let toy = Self::toy();
        let cfg = ToyLMConfig {
            depth: kv.usize_or("lm.depth", toy.depth)?,
            hidden_dim: kv.usize_or("lm.hidden_dim", toy.hidden_dim)?,
            heads: kv.usize_or("lm.heads", toy.heads)?,
            ff_dim: kv.usize_or("lm.ff_dim", toy.ff_dim)?,
            vocab: kv.usize_or("lm.vocab", toy.vocab)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!("lm.depth = {}", self.depth),
            format!("lm.hidden_dim = {}", self.hidden_dim),
            format!("lm.heads = {}", self.heads),
            format!("lm.ff_dim = {}", self.ff_dim),
            format!("lm.vocab = {}", self.vocab),
        ]
    }
}

/// Toy causal LM parameters under the `lm.` prefix; frozen at construction
/// (the LM belongs to the original model until stage 2 unfreezes it).
pub fn lm_params(cfg: &ToyLMConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.hidden_dim;
    let std = 1.0 / (d as f64).sqrt();
    let mut set = ParameterSet::new();
    let push = |set: &mut ParameterSet, id: String, t: Tensor| -> Result<()> {
        set.insert(crate::numerics::Parameter::frozen(id, t))
    };

    push(&mut set, "lm.embed".into(), Tensor::randn(vec![cfg.vocab, d], 0.5, &mut rng))?;
    for i in 0..cfg.depth {
        let pre = format!("lm.blocks.{i}");
        push(&mut set, format!("{pre}.ln1.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
        push(&mut set, format!("{pre}.ln1.b"), Tensor::zeros(vec![d]))?;
        for name in ["wq", "wk", "wv", "wo"] {
            push(&mut set, format!("{pre}.attn.{name}"), Tensor::randn(vec![d, d], std, &mut rng))?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            push(&mut set, format!("{pre}.attn.{name}"), Tensor::zeros(vec![d]))?;
        }
        push(&mut set, format!("{pre}.ln2.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
        push(&mut set, format!("{pre}.ln2.b"), Tensor::zeros(vec![d]))?;
        push(&mut set, format!("{pre}.mlp.w1"), Tensor::randn(vec![d, cfg.ff_dim], std, &mut rng))?;
        push(&mut set, format!("{pre}.mlp.b1"), Tensor::zeros(vec![cfg.ff_dim]))?;
        push(&mut set, format!("{pre}.mlp.w2"), Tensor::randn(vec![cfg.ff_dim, d], std, &mut rng))?;
        push(&mut set, format!("{pre}.mlp.b2"), Tensor::zeros(vec![d]))?;
    }
    push(&mut set, "lm.ln_f.g".into(), Tensor::new(vec![d], vec![1.0; d])?)?;
    push(&mut set, "lm.ln_f.b".into(), Tensor::zeros(vec![d]))?;
    push(&mut set, "lm.head.w".into(), Tensor::randn(vec![d, cfg.vocab], std, &mut rng))?;
    push(&mut set, "lm.head.b".into(), Tensor::zeros(vec![cfg.vocab]))?;
    Ok(set)
}

/// An LM input sequence assembled from projected visual tokens plus text.
pub struct Assembled {
    /// `m × d'` sequence on the tape.
    pub tokens: NodeId,
    /// Sequential positions `0..m`.
    pub positions: Vec<f64>,
    pub visual_len: usize,
    pub text: Vec<usize>,
}

/// Closed-form visual token count for a mode.
pub fn visual_token_count(mode: ModeSelector, frames: usize, n_llm: usize, z_llm: usize) -> usize {
    match mode {
        ModeSelector::Standby => frames * n_llm,
        ModeSelector::Focus => frames * (n_llm + z_llm),
    }
}

/// Concatenate per-frame projected tokens (standby only, or standby
/// followed by patch) and the embedded text into one LM input sequence.
pub fn assemble(
    tape: &mut Tape,
    params: &ParameterSet,
    mode: ModeSelector,
    frames: &[(NodeId, NodeId)],
    text: &[usize],
) -> Result<Assembled> {
    if frames.is_empty() && text.is_empty() {
        return Err(Error::invalid("assemble", "empty input: no frames and no text"));
    }
    let mut parts: Vec<NodeId> = Vec::new();
    let mut visual_len = 0;
    for &(standby, patch) in frames {
        parts.push(standby);
        visual_len += tape.shape(standby)[0];
        if mode == ModeSelector::Focus {
            parts.push(patch);
            visual_len += tape.shape(patch)[0];
        }
    }
    if !text.is_empty() {
        let embed = nn::param(tape, params, "lm.embed")?;
        parts.push(tape.gather_rows(embed, Arc::new(text.to_vec()))?);
    }
    let tokens = tape.concat_rows(&parts)?;
    let m = tape.shape(tokens)[0];
    Ok(Assembled {
        tokens,
        positions: (0..m).map(|i| i as f64).collect(),
        visual_len,
        text: text.to_vec(),
    })
}

/// Causal LM forward: pre-norm blocks with 1D rotary positions, final norm,
/// vocabulary head. Returns the `m × vocab` logits.
pub fn lm_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &ToyLMConfig,
    tokens: NodeId,
    positions: &[f64],
) -> Result<NodeId> {
    cfg.validate()?;
    let m = tape.shape(tokens)[0];
    if *tape.shape(tokens).last().unwrap() != cfg.hidden_dim {
        return Err(Error::ShapeMismatch {
            op: "lm_forward",
            lhs: tape.shape(tokens).to_vec(),
            rhs: vec![m, cfg.hidden_dim],
        });
    }
    if positions.len() != m {
        return Err(Error::invalid("lm_forward", "positions length != sequence length"));
    }
    let phases = phase_matrix_1d(&RotaryConfig::one_d(cfg.head_dim())?, positions);
    let causal = Mask::FrameCausal { frame_len: 1 };

    let mut x = tokens;
    for i in 0..cfg.depth {
        let pre = format!("lm.blocks.{i}");
        let h = nn::layer_norm(tape, params, x, &format!("{pre}.ln1.g"), &format!("{pre}.ln1.b"))?;
        let mha = nn::multi_head_attention(
            tape,
            params,
            &format!("{pre}.attn"),
            h,
            h,
            cfg.heads,
            &causal,
            Some(&phases),
            Some(&phases),
            false,
        )?;
        x = tape.add(x, mha.out)?;
        x = nn::mlp_block(tape, params, x, &format!("{pre}.ln2"), &format!("{pre}.mlp"))?;
    }
    let x = nn::layer_norm(tape, params, x, "lm.ln_f.g", "lm.ln_f.b")?;
    nn::linear(tape, params, x, "lm.head.w", "lm.head.b")
}

/// Next-token cross-entropy over the text region: text token `j` is
/// predicted from the previous sequence position (the last visual token for
/// `j = 0`). Pure-text sequences predict from the second token on.
pub fn lm_loss(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &ToyLMConfig,
    assembled: &Assembled,
) -> Result<NodeId> {
    let logits = lm_forward(tape, params, cfg, assembled.tokens, &assembled.positions)?;
    let (rows, targets) = prediction_pairs(assembled)?;
    tape.mean_cross_entropy(logits, Arc::new(rows), Arc::new(targets))
}

fn prediction_pairs(assembled: &Assembled) -> Result<(Vec<usize>, Vec<usize>)> {
    let v = assembled.visual_len;
    let text = &assembled.text;
    let first_predicted = if v > 0 { 0 } else { 1 };
    if text.len() <= first_predicted {
        return Err(Error::invalid("lm_loss", "no text tokens to predict"));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for j in first_predicted..text.len() {
        rows.push(v + j - 1);
        targets.push(text[j]);
    }
    Ok((rows, targets))
}
