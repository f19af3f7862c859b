//! Parameter construction for the dual-path encoder.
//!
//! The id space partitions into the original set (patch embedding, shared
//! attention, the Z-side MLPs and projector) and the new set (standby
//! embeddings, the L-side duplicates, temporal attention). The duplicates
//! are bit-copies of their originals at construction, and the temporal
//! output projection starts at zero so the module contributes exactly the
//! identity residual until trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, SHUFFLE_FACTOR};
use crate::error::{Error, Result};
use crate::numerics::{Parameter, ParameterSet, Tensor};

pub const STANDBY_EMBED_ID: &str = "standby.embed";
pub const STANDBY_INIT_STD: f64 = 0.02;

/// Dual-path parameter bundle: one flat [`ParameterSet`] plus the config it
/// was built for. Original parameters are frozen, new ones trainable.
#[derive(Debug, Clone)]
pub struct DualPathParams {
    pub params: ParameterSet,
    pub cfg: EncoderConfig,
}

/// New-module ids: L-side MLP and norm duplicates, the duplicated
/// projector, temporal attention, and the standby embeddings.
pub fn is_new_param(id: &str) -> bool {
    id == STANDBY_EMBED_ID
        || id.starts_with("proj_l.")
        || id.contains(".mlp_l.")
        || id.contains(".ln2_l.")
        || id.contains(".temporal.")
}

fn weight_std(cfg: &EncoderConfig) -> f64 {
    1.0 / (cfg.hidden_dim as f64).sqrt()
}

fn push(set: &mut ParameterSet, id: String, value: Tensor) -> Result<()> {
    set.insert(Parameter::trainable(id, value))
}

/// A standalone single-path encoder: the "original model" the dual-path
/// construction starts from. Everything is trainable here; freezing happens
/// in [`init_dual_path`].
pub fn base_encoder_params(cfg: &EncoderConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.hidden_dim;
    let ff = cfg.ff_dim;
    let std = weight_std(cfg);
    let mut set = ParameterSet::new();

    push(&mut set, "patch_embed.w".into(), Tensor::randn(vec![cfg.pixel_dim, d], std, &mut rng))?;
    push(&mut set, "patch_embed.b".into(), Tensor::zeros(vec![d]))?;

    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        push(&mut set, format!("{pre}.ln1.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
        push(&mut set, format!("{pre}.ln1.b"), Tensor::zeros(vec![d]))?;
        for name in ["wq", "wk", "wv", "wo"] {
            push(&mut set, format!("{pre}.attn.{name}"), Tensor::randn(vec![d, d], std, &mut rng))?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            push(&mut set, format!("{pre}.attn.{name}"), Tensor::zeros(vec![d]))?;
        }
        push(&mut set, format!("{pre}.ln2_z.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
        push(&mut set, format!("{pre}.ln2_z.b"), Tensor::zeros(vec![d]))?;
        push(&mut set, format!("{pre}.mlp_z.w1"), Tensor::randn(vec![d, ff], std, &mut rng))?;
        push(&mut set, format!("{pre}.mlp_z.b1"), Tensor::zeros(vec![ff]))?;
        push(&mut set, format!("{pre}.mlp_z.w2"), Tensor::randn(vec![ff, d], std, &mut rng))?;
        push(&mut set, format!("{pre}.mlp_z.b2"), Tensor::zeros(vec![d]))?;
    }

    let merged = SHUFFLE_FACTOR * d;
    let p = cfg.proj_dim;
    push(&mut set, "proj_z.w1".into(), Tensor::randn(vec![merged, p], 1.0 / (merged as f64).sqrt(), &mut rng))?;
    push(&mut set, "proj_z.b1".into(), Tensor::zeros(vec![p]))?;
    push(&mut set, "proj_z.w2".into(), Tensor::randn(vec![p, p], 1.0 / (p as f64).sqrt(), &mut rng))?;
    push(&mut set, "proj_z.b2".into(), Tensor::zeros(vec![p]))?;

    Ok(set)
}

/// Duplicate the base encoder into a dual-path parameter set.
///
/// Every base parameter is frozen. The L-side MLPs, norms and projector are
/// bit-copies of their Z-side originals; temporal attention (last
/// `temporal_depth` layers) gets fresh q/k/v weights but a zero output
/// projection; standby embeddings are a seeded Gaussian (std 0.02).
pub fn init_dual_path(base: ParameterSet, cfg: &EncoderConfig, seed: u64) -> Result<DualPathParams> {
    cfg.validate()?;
    check_base_shapes(&base, cfg)?;
    let d = cfg.hidden_dim;
    let std = weight_std(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut set = ParameterSet::new();
    for p in base.iter() {
        set.insert(Parameter::frozen(p.id.clone(), p.value.clone()))?;
    }

    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        for (dup, orig) in [
            (format!("{pre}.ln2_l.g"), format!("{pre}.ln2_z.g")),
            (format!("{pre}.ln2_l.b"), format!("{pre}.ln2_z.b")),
            (format!("{pre}.mlp_l.w1"), format!("{pre}.mlp_z.w1")),
            (format!("{pre}.mlp_l.b1"), format!("{pre}.mlp_z.b1")),
            (format!("{pre}.mlp_l.w2"), format!("{pre}.mlp_z.w2")),
            (format!("{pre}.mlp_l.b2"), format!("{pre}.mlp_z.b2")),
        ] {
            let value = set.get(&orig)?.value.clone();
            set.insert(Parameter::trainable(dup, value))?;
        }
    }

    for (dup, orig) in [
        ("proj_l.w1", "proj_z.w1"),
        ("proj_l.b1", "proj_z.b1"),
        ("proj_l.w2", "proj_z.w2"),
        ("proj_l.b2", "proj_z.b2"),
    ] {
        let value = set.get(orig)?.value.clone();
        set.insert(Parameter::trainable(dup.to_string(), value))?;
    }

    for i in cfg.depth - cfg.temporal_depth..cfg.depth {
        let pre = format!("blocks.{i}.temporal");
        set.insert(Parameter::trainable(format!("{pre}.ln.g"), Tensor::new(vec![d], vec![1.0; d])?))?;
        set.insert(Parameter::trainable(format!("{pre}.ln.b"), Tensor::zeros(vec![d])))?;
        for name in ["wq", "wk", "wv"] {
            set.insert(Parameter::trainable(
                format!("{pre}.{name}"),
                Tensor::randn(vec![d, d], std, &mut rng),
            ))?;
        }
        // zero output projection: identity contribution at step 0
        set.insert(Parameter::trainable(format!("{pre}.wo"), Tensor::zeros(vec![d, d])))?;
        for name in ["bq", "bk", "bv", "bo"] {
            set.insert(Parameter::trainable(format!("{pre}.{name}"), Tensor::zeros(vec![d])))?;
        }
    }

    set.insert(Parameter::trainable(
        STANDBY_EMBED_ID.to_string(),
        Tensor::randn(vec![cfg.n_vit, d], STANDBY_INIT_STD, &mut rng),
    ))?;

    Ok(DualPathParams { params: set, cfg: *cfg })
}

fn check_base_shapes(base: &ParameterSet, cfg: &EncoderConfig) -> Result<()> {
    let d = cfg.hidden_dim;
    let expect = |id: &str, shape: &[usize]| -> Result<()> {
        let p = base.get(id)?;
        if p.value.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "init_dual_path",
                lhs: p.value.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    };
    expect("patch_embed.w", &[cfg.pixel_dim, d])?;
    for i in 0..cfg.depth {
        expect(&format!("blocks.{i}.attn.wq"), &[d, d])?;
        expect(&format!("blocks.{i}.mlp_z.w1"), &[d, cfg.ff_dim])?;
    }
    expect("proj_z.w1", &[SHUFFLE_FACTOR * d, cfg.proj_dim])?;
    Ok(())
}

impl DualPathParams {
    pub fn original_ids(&self) -> Vec<String> {
        self.params.ids().filter(|id| !is_new_param(id)).map(String::from).collect()
    }

    pub fn new_ids(&self) -> Vec<String> {
        self.params.ids().filter(|id| is_new_param(id)).map(String::from).collect()
    }
}
