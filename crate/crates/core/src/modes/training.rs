//! Two-stage training.
//!
//! Stage 1 freezes the whole original model (encoder originals and the LM)
//! and trains only the new modules on standby-mode sequences. Stage 2
//! unfreezes the LM and trains it jointly with the stage-1 parameters using
//! the two-forward objective `(loss_standby + loss_focus) / 2`.

use super::{assemble, lm_loss, lm_params, ModeSelector, ToyLMConfig};
use crate::encoder::{self, encode, EncodeOpts, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, NodeId, ParameterSet, Tape};
use crate::synth::Batch;

/// The full system: dual-path encoder plus toy LM over one parameter set.
#[derive(Debug, Clone)]
pub struct System {
    pub encoder_cfg: EncoderConfig,
    pub lm_cfg: ToyLMConfig,
    pub params: ParameterSet,
}

impl System {
    /// Build the original model (base encoder + LM, all frozen), then
    /// graft the dual path onto it. Ready for stage 1.
    pub fn init(encoder_cfg: EncoderConfig, lm_cfg: ToyLMConfig, seed: u64) -> Result<System> {
        if lm_cfg.hidden_dim != encoder_cfg.proj_dim {
            return Err(Error::invalid(
                "system",
                format!(
                    "lm hidden_dim {} must equal encoder proj_dim {}",
                    lm_cfg.hidden_dim, encoder_cfg.proj_dim
                ),
            ));
        }
        let base = encoder::base_encoder_params(&encoder_cfg, seed)?;
        let dual = encoder::init_dual_path(base, &encoder_cfg, seed.wrapping_add(1))?;
        let mut params = dual.params;
        for p in lm_params(&lm_cfg, seed.wrapping_add(2))?.iter() {
            params.insert(p.clone())?;
        }
        Ok(System { encoder_cfg, lm_cfg, params })
    }

    /// Stage-2 preparation: unfreeze the LM. The original encoder path
    /// stays frozen throughout.
    pub fn unfreeze_lm(&mut self) -> usize {
        self.params.set_trainable_prefix("lm.", true)
    }
}

/// Mean LM loss over the batch in the given mode, recorded on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    system: &System,
    batch: &Batch,
    mode: ModeSelector,
) -> Result<NodeId> {
    if batch.videos.is_empty() || batch.videos.len() != batch.captions.len() {
        return Err(Error::invalid("batch_loss", "empty or misaligned batch"));
    }
    let mut total: Option<NodeId> = None;
    for (video, caption) in batch.videos.iter().zip(&batch.captions) {
        let enc = encode(
            tape,
            &system.params,
            &system.encoder_cfg,
            video,
            &EncodeOpts::default(),
        )?;
        let frames: Vec<(NodeId, NodeId)> =
            enc.standby.iter().copied().zip(enc.patch.iter().copied()).collect();
        let asm = assemble(tape, &system.params, mode, &frames, caption)?;
        let item = lm_loss(tape, &system.params, &system.lm_cfg, &asm)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, item)?,
            None => item,
        });
    }
    Ok(tape.scale(total.expect("nonempty batch"), 1.0 / batch.videos.len() as f64))
}

/// One stage-1 step: standby-only forward, loss, gradient step on the new
/// modules. Returns the loss value.
pub fn stage1_step(system: &mut System, batch: &Batch, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = batch_loss(&mut tape, system, batch, ModeSelector::Standby)?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    sgd_step(&mut system.params, &grads, lr);
    Ok(value)
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Losses {
    pub standby: f64,
    pub focus: f64,
    pub combined: f64,
}

/// One stage-2 step: two forward passes (standby, focus) on one tape, a
/// single backward on `(loss1 + loss2) / 2`, one gradient step.
pub fn stage2_step(system: &mut System, batch: &Batch, lr: f64) -> Result<Stage2Losses> {
    let mut tape = Tape::new();
    let loss1 = batch_loss(&mut tape, system, batch, ModeSelector::Standby)?;
    let loss2 = batch_loss(&mut tape, system, batch, ModeSelector::Focus)?;
    let sum = tape.add(loss1, loss2)?;
    let combined = tape.scale(sum, 0.5);
    let out = Stage2Losses {
        standby: tape.scalar_value(loss1),
        focus: tape.scalar_value(loss2),
        combined: tape.scalar_value(combined),
    };
    let grads = tape.backward(combined)?;
    sgd_step(&mut system.params, &grads, lr);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GradMap;
    use crate::synth::synth_batch;

    fn toy_system(seed: u64) -> System {
        System::init(EncoderConfig::toy(), ToyLMConfig::toy(), seed).unwrap()
    }

    fn toy_batch(system: &System, seed: u64) -> Batch {
        synth_batch(&system.encoder_cfg, system.lm_cfg.vocab, 2, 3, seed)
    }

    #[test]
    fn stage1_touches_only_new_parameters() {
        let mut system = toy_system(1);
        let batch = toy_batch(&system, 10);
        let before = system.params.snapshot();
        for _ in 0..3 {
            stage1_step(&mut system, &batch, 0.05).unwrap();
        }
        let changed = system.params.changed_since(&before);
        assert!(!changed.is_empty());
        for id in &changed {
            assert!(encoder::is_new_param(id), "original param {id} changed in stage 1");
        }
    }

    #[test]
    fn stage1_loss_decreases_on_fixed_task() {
        let mut system = toy_system(2);
        let batch = toy_batch(&system, 11);
        let first = stage1_step(&mut system, &batch, 0.05).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = stage1_step(&mut system, &batch, 0.05).unwrap();
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn stage2_combined_is_half_sum_and_trains_lm() {
        let mut system = toy_system(3);
        system.unfreeze_lm();
        let batch = toy_batch(&system, 12);
        let before = system.params.snapshot();
        let losses = stage2_step(&mut system, &batch, 0.02).unwrap();
        assert!((losses.combined - 0.5 * (losses.standby + losses.focus)).abs() <= 1e-12);

        let changed = system.params.changed_since(&before);
        assert!(changed.iter().any(|id| id.starts_with("lm.")), "LM did not train");
        for id in &changed {
            assert!(
                id.starts_with("lm.") || encoder::is_new_param(id),
                "frozen original {id} changed in stage 2"
            );
        }
    }

    /// Two-forward linearity: the gradient of the averaged loss equals the
    /// average of the per-pass gradients (three separate backwards).
    #[test]
    fn combined_gradient_is_average_of_pass_gradients() {
        let mut system = toy_system(4);
        system.unfreeze_lm();
        let batch = toy_batch(&system, 13);

        let mut tape = Tape::new();
        let l1 = batch_loss(&mut tape, &system, &batch, ModeSelector::Standby).unwrap();
        let l2 = batch_loss(&mut tape, &system, &batch, ModeSelector::Focus).unwrap();
        let sum = tape.add(l1, l2).unwrap();
        let combined = tape.scale(sum, 0.5);
        let g_combined = tape.backward(combined).unwrap();

        let mut tape1 = Tape::new();
        let l1b = batch_loss(&mut tape1, &system, &batch, ModeSelector::Standby).unwrap();
        let g1 = tape1.backward(l1b).unwrap();
        let mut tape2 = Tape::new();
        let l2b = batch_loss(&mut tape2, &system, &batch, ModeSelector::Focus).unwrap();
        let g2 = tape2.backward(l2b).unwrap();

        assert_grad_avg(&g_combined, &g1, &g2, 1e-10);
    }

    fn assert_grad_avg(combined: &GradMap, g1: &GradMap, g2: &GradMap, tol: f64) {
        for (id, g) in combined {
            let a = g1.get(id);
            let b = g2.get(id);
            for (i, &gv) in g.data().iter().enumerate() {
                let want = 0.5
                    * (a.map(|t| t.data()[i]).unwrap_or(0.0)
                        + b.map(|t| t.data()[i]).unwrap_or(0.0));
                let rel = (gv - want).abs() / want.abs().max(1.0);
                assert!(rel <= tol, "{id}[{i}]: {gv} vs {want}");
            }
        }
    }
}
