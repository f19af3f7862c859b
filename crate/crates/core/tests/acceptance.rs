//! Acceptance suite: one test per exit criterion, each printing a pass/fail
//! line. Run with `cargo test --test acceptance -- --nocapture` to see them.

use std::time::Instant;

use dualmode::config::KvConfig;
use dualmode::cost::{
    encoder_flops, lm_prefill_flops, token_count, ArchSpec, BASELINE_TOTAL_TOKENS,
};
use dualmode::encoder::{
    base_encoder_params, encode, encode_base, encode_streaming, init_dual_path, mlp_path,
    EncodeOpts, EncoderConfig, FrameInput, PathSel,
};
use dualmode::modes::training::batch_loss;
use dualmode::modes::{
    assemble, lm_forward, load_checkpoint, save_checkpoint, serialize_prompt, stage1_step,
    Checkpoint, ModeSelector, System, ToyLMConfig,
};
use dualmode::numerics::{finite_diff_check, LossEval, Tape, Tensor};
use dualmode::pruning::{prune_top_m, GroupScore};
use dualmode::streaming_cache::{plan_budget, streaming_token_total, CacheState};
use dualmode::synth::{synth_batch, synth_video, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn criterion(n: u32, name: &str, f: impl FnOnce() -> Result<(), String>) {
    match f() {
        Ok(()) => println!("[PASS] criterion {n}: {name}"),
        Err(e) => {
            println!("[FAIL] criterion {n}: {name}: {e}");
            panic!("criterion {n} ({name}) failed: {e}");
        }
    }
}

fn random_frames(cfg: &EncoderConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<FrameInput> {
    (0..count)
        .map(|i| FrameInput {
            index: i as u64,
            timestamp: i as f64,
            pixels: Tensor::randn(vec![cfg.o(), cfg.pixel_dim], 1.0, rng),
        })
        .collect()
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[rng.gen_range(0..options.len())]
}

/// Random toy config within the sweep bounds (depth ≤ 4, d ≤ 64, o ≤ 64,
/// n_vit ≤ 16), biased toward small sizes to keep the sweep fast.
fn random_config(rng: &mut ChaCha8Rng) -> EncoderConfig {
    let head_dim = pick(rng, &[4usize, 8]);
    let heads = if rng.gen_bool(0.1) { 8 } else { pick(rng, &[1usize, 2, 4]) };
    let (grid_h, grid_w) = pick(rng, &[(2usize, 2usize), (2, 4), (4, 4), (4, 6), (6, 6), (8, 8)]);
    let o = grid_h * grid_w;
    let fits: Vec<usize> = [4usize, 8, 12, 16].into_iter().filter(|&n| n <= o).collect();
    let depth = rng.gen_range(1..=4);
    EncoderConfig {
        depth,
        hidden_dim: heads * head_dim,
        heads,
        ff_dim: pick(rng, &[8usize, 16, 32]),
        grid_h,
        grid_w,
        n_vit: pick(rng, &fits),
        temporal_depth: rng.gen_range(0..=depth),
        temporal_window: rng.gen_range(1..=8),
        pixel_dim: rng.gen_range(2..=6),
        proj_dim: pick(rng, &[4usize, 8, 12]),
    }
}

#[test]
fn criterion_01_focus_path_invariance() {
    criterion(1, "focus-path invariance over random configs", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
        for trial in 0..100 {
            let cfg = random_config(&mut rng);
            let base = base_encoder_params(&cfg, rng.gen()).map_err(|e| e.to_string())?;
            let dual = init_dual_path(base.clone(), &cfg, rng.gen()).map_err(|e| e.to_string())?;
            let frames = random_frames(&cfg, rng.gen_range(1..=2), &mut rng);
            let opts = EncodeOpts { trace_z: true, ..Default::default() };

            let mut tape_d = Tape::new();
            let enc = encode(&mut tape_d, &dual.params, &cfg, &frames, &opts)
                .map_err(|e| e.to_string())?;
            let mut tape_b = Tape::new();
            let be = encode_base(&mut tape_b, &base, &cfg, &frames, true).map_err(|e| e.to_string())?;

            let dual_trace = enc.z_trace.as_ref().unwrap();
            let base_trace = be.z_trace.as_ref().unwrap();
            for f in 0..frames.len() {
                for layer in 0..cfg.depth {
                    let diff = dual_trace[f][layer].max_abs_diff(&base_trace[f][layer]);
                    if diff != 0.0 {
                        return Err(format!("trial {trial} frame {f} layer {layer}: diff {diff}"));
                    }
                }
                let diff = tape_d.tensor(enc.patch[f]).max_abs_diff(&tape_b.tensor(be.patch[f]));
                if diff != 0.0 {
                    return Err(format!("trial {trial} projected frame {f}: diff {diff}"));
                }
            }
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs() >= 60 {
            return Err(format!("sweep took {elapsed:?}, budget is 1 min"));
        }
        Ok(())
    });
}

#[test]
fn criterion_02_initialization_equivalence() {
    criterion(2, "initialization equivalence of the duplicated paths", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
        for _ in 0..10 {
            let mut cfg = random_config(&mut rng);
            cfg.temporal_depth = cfg.depth; // temporal everywhere for the identity check
            let base = base_encoder_params(&cfg, rng.gen()).map_err(|e| e.to_string())?;
            let dual = init_dual_path(base, &cfg, rng.gen()).map_err(|e| e.to_string())?;

            // standby tokens through MLP_L == through MLP_Z, bit-exact
            let x = Tensor::randn(vec![cfg.n_vit, cfg.hidden_dim], 1.0, &mut rng);
            let mut tape = Tape::new();
            let xn = tape.input(&x);
            for layer in 0..cfg.depth {
                let l = mlp_path(&mut tape, &dual.params, &cfg, layer, PathSel::Standby, xn)
                    .map_err(|e| e.to_string())?;
                let z = mlp_path(&mut tape, &dual.params, &cfg, layer, PathSel::Patch, xn)
                    .map_err(|e| e.to_string())?;
                if tape.tensor(l).max_abs_diff(&tape.tensor(z)) != 0.0 {
                    return Err(format!("layer {layer}: MLP_L != MLP_Z at init"));
                }
            }

            // temporal module contributes exactly the identity at step 0
            let frames = random_frames(&cfg, 3, &mut rng);
            let mut no_temporal = cfg;
            no_temporal.temporal_depth = 0;
            let mut tape_a = Tape::new();
            let with_t = encode(&mut tape_a, &dual.params, &cfg, &frames, &EncodeOpts::default())
                .map_err(|e| e.to_string())?;
            let mut tape_b = Tape::new();
            let without_t =
                encode(&mut tape_b, &dual.params, &no_temporal, &frames, &EncodeOpts::default())
                    .map_err(|e| e.to_string())?;
            for f in 0..frames.len() {
                let diff =
                    tape_a.tensor(with_t.standby[f]).max_abs_diff(&tape_b.tensor(without_t.standby[f]));
                if diff != 0.0 {
                    return Err(format!("temporal not identity at init: frame {f} diff {diff}"));
                }
            }
        }
        Ok(())
    });
}

/// Values recorded from the oracle run of this exact seeded task
/// (toy configs, seed 0, batch seed 1000, lr 0.05, 200 steps), verified
/// bit-stable across repeat runs.
const STAGE1_ORACLE_LOSS_STEP0: f64 = 3.8611198199092884;
const STAGE1_ORACLE_LOSS_STEP199: f64 = 1.4257524357642901;

#[test]
fn criterion_03_stage1_freeze_audit() {
    criterion(3, "stage-1 freeze audit and loss descent", || {
        let enc_cfg = EncoderConfig::toy();
        let lm_cfg = ToyLMConfig::toy();
        let mut system = System::init(enc_cfg, lm_cfg, 0).map_err(|e| e.to_string())?;
        let batch = synth_batch(&enc_cfg, lm_cfg.vocab, 2, 4, 1000);
        let before = system.params.snapshot();

        // original-path probe: patch tokens only + text, logits recorded
        let probe_before = ori_seq_logits(&system, &batch).map_err(|e| e.to_string())?;

        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..200 {
            let loss = stage1_step(&mut system, &batch, 0.05).map_err(|e| e.to_string())?;
            if step == 0 {
                first = loss;
            }
            last = loss;
        }

        let changed_originals: Vec<String> = system
            .params
            .changed_since(&before)
            .into_iter()
            .filter(|id| !dualmode::encoder::is_new_param(id))
            .collect();
        if !changed_originals.is_empty() {
            return Err(format!("{} original params changed: {:?}", changed_originals.len(), changed_originals));
        }
        if last >= first {
            return Err(format!("loss did not descend: step0 {first}, step199 {last}"));
        }
        let rel0 = (first - STAGE1_ORACLE_LOSS_STEP0).abs() / STAGE1_ORACLE_LOSS_STEP0;
        let rel199 = (last - STAGE1_ORACLE_LOSS_STEP199).abs() / STAGE1_ORACLE_LOSS_STEP199;
        if rel0 > 1e-6 || rel199 > 1e-6 {
            return Err(format!(
                "run diverged from the recorded oracle: step0 {first} (recorded {STAGE1_ORACLE_LOSS_STEP0}), \
                 step199 {last} (recorded {STAGE1_ORACLE_LOSS_STEP199})"
            ));
        }

        // the original inference path is untouched end to end
        let probe_after = ori_seq_logits(&system, &batch).map_err(|e| e.to_string())?;
        if probe_before.max_abs_diff(&probe_after) != 0.0 {
            return Err("original-sequence logits changed during stage 1".into());
        }
        Ok(())
    });
}

/// Logits of the LM over patch tokens only (standby excluded) plus text.
fn ori_seq_logits(system: &System, batch: &Batch) -> dualmode::Result<Tensor> {
    let mut tape = Tape::new();
    let enc = encode(
        &mut tape,
        &system.params,
        &system.encoder_cfg,
        &batch.videos[0],
        &EncodeOpts::default(),
    )?;
    let mut parts = enc.patch.clone();
    let embed = tape.param(system.params.get("lm.embed")?);
    parts.push(tape.gather_rows(embed, std::sync::Arc::new(batch.captions[0].clone()))?);
    let seq = tape.concat_rows(&parts)?;
    let positions: Vec<f64> = (0..tape.shape(seq)[0]).map(|i| i as f64).collect();
    let logits = lm_forward(&mut tape, &system.params, &system.lm_cfg, seq, &positions)?;
    Ok(tape.tensor(logits))
}

#[test]
fn criterion_04_two_forward_gradient() {
    criterion(4, "two-forward gradient identity and finite differences", || {
        let enc_cfg = EncoderConfig {
            depth: 1,
            hidden_dim: 4,
            heads: 1,
            ff_dim: 4,
            grid_h: 2,
            grid_w: 2,
            n_vit: 4,
            temporal_depth: 1,
            temporal_window: 2,
            pixel_dim: 3,
            proj_dim: 4,
        };
        let lm_cfg = ToyLMConfig { depth: 1, hidden_dim: 4, heads: 1, ff_dim: 6, vocab: 6 };

        for instance in 0..20u64 {
            let mut system =
                System::init(enc_cfg, lm_cfg, 0x40 + instance).map_err(|e| e.to_string())?;
            system.unfreeze_lm();
            // move to a generic parameter point: the raw init is nearly
            // degenerate for layer norm (standby rows at std 0.02), which
            // inflates finite-difference truncation error without saying
            // anything about gradient correctness
            let mut rng = ChaCha8Rng::seed_from_u64(0xC4 + instance);
            let trainable: Vec<String> = system
                .params
                .iter()
                .filter(|p| p.trainable)
                .map(|p| p.id.clone())
                .collect();
            for id in trainable {
                let shape = system.params.get(&id).unwrap().value.shape().to_vec();
                system.params.get_mut(&id).unwrap().value = Tensor::randn(shape, 0.3, &mut rng);
            }
            let batch = synth_batch(&enc_cfg, lm_cfg.vocab, 1, 2, 0x400 + instance);

            // route A: single backward through (L1 + L2) / 2
            let mut tape = Tape::new();
            let l1 = batch_loss(&mut tape, &system, &batch, ModeSelector::Standby)
                .map_err(|e| e.to_string())?;
            let l2 = batch_loss(&mut tape, &system, &batch, ModeSelector::Focus)
                .map_err(|e| e.to_string())?;
            let sum = tape.add(l1, l2).map_err(|e| e.to_string())?;
            let combined = tape.scale(sum, 0.5);
            let g = tape.backward(combined).map_err(|e| e.to_string())?;

            // route B: two backwards, averaged
            let mut t1 = Tape::new();
            let l1b = batch_loss(&mut t1, &system, &batch, ModeSelector::Standby)
                .map_err(|e| e.to_string())?;
            let g1 = t1.backward(l1b).map_err(|e| e.to_string())?;
            let mut t2 = Tape::new();
            let l2b = batch_loss(&mut t2, &system, &batch, ModeSelector::Focus)
                .map_err(|e| e.to_string())?;
            let g2 = t2.backward(l2b).map_err(|e| e.to_string())?;

            for (id, grad) in &g {
                for (i, &v) in grad.data().iter().enumerate() {
                    let a = g1.get(id).map(|t| t.data()[i]).unwrap_or(0.0);
                    let b = g2.get(id).map(|t| t.data()[i]).unwrap_or(0.0);
                    let want = 0.5 * (a + b);
                    let rel = (v - want).abs() / want.abs().max(1.0);
                    if rel > 1e-10 {
                        return Err(format!("instance {instance} {id}[{i}]: rel {rel}"));
                    }
                }
            }

            // finite differences over every trainable scalar
            let sys_ref = &system;
            let batch_ref = &batch;
            let f = move |params: &dualmode::numerics::ParameterSet| -> dualmode::Result<LossEval> {
                let probe = System {
                    encoder_cfg: sys_ref.encoder_cfg,
                    lm_cfg: sys_ref.lm_cfg,
                    params: params.clone(),
                };
                let mut tape = Tape::new();
                let l1 = batch_loss(&mut tape, &probe, batch_ref, ModeSelector::Standby)?;
                let l2 = batch_loss(&mut tape, &probe, batch_ref, ModeSelector::Focus)?;
                let sum = tape.add(l1, l2)?;
                let combined = tape.scale(sum, 0.5);
                Ok(LossEval { loss: tape.scalar_value(combined), grads: tape.backward(combined)? })
            };
            let worst = finite_diff_check(f, &system.params, 1e-5).map_err(|e| e.to_string())?;
            if worst > 1e-4 {
                return Err(format!("instance {instance}: finite-difference rel err {worst}"));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_05_temporal_causality_and_streaming() {
    criterion(5, "temporal causality and streaming/batch equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
        for trial in 0..5 {
            let mut cfg = random_config(&mut rng);
            cfg.depth = cfg.depth.max(2);
            cfg.temporal_depth = cfg.depth.clamp(1, 2);
            cfg.temporal_window = 8; // streams with a 7-frame state cache
            let base = base_encoder_params(&cfg, rng.gen()).map_err(|e| e.to_string())?;
            let mut dual = init_dual_path(base, &cfg, rng.gen()).map_err(|e| e.to_string())?;
            // non-trivial temporal weights so causality is not vacuous
            for i in cfg.depth - cfg.temporal_depth..cfg.depth {
                for name in ["wq", "wk", "wv", "wo"] {
                    let id = format!("blocks.{i}.temporal.{name}");
                    let shape = dual.params.get(&id).unwrap().value.shape().to_vec();
                    dual.params.get_mut(&id).unwrap().value = Tensor::randn(shape, 0.3, &mut rng);
                }
            }

            let frames = random_frames(&cfg, 12, &mut rng);
            let mut tape = Tape::new();
            let batch_out = encode(&mut tape, &dual.params, &cfg, &frames, &EncodeOpts::default())
                .map_err(|e| e.to_string())?;

            // perturb a future frame; everything before it must be bit-stable
            let cut = rng.gen_range(1..frames.len());
            let mut perturbed = frames.clone();
            perturbed[cut].pixels = Tensor::randn(vec![cfg.o(), cfg.pixel_dim], 1.0, &mut rng);
            let mut tape_p = Tape::new();
            let pert_out = encode(&mut tape_p, &dual.params, &cfg, &perturbed, &EncodeOpts::default())
                .map_err(|e| e.to_string())?;
            for f in 0..cut {
                let diff =
                    tape.tensor(batch_out.standby[f]).max_abs_diff(&tape_p.tensor(pert_out.standby[f]));
                if diff != 0.0 {
                    return Err(format!("trial {trial}: frame {f} saw future frame {cut} (diff {diff})"));
                }
            }

            // one-frame-at-a-time streaming equals the batch run
            let streamed = encode_streaming(&dual.params, &cfg, &frames).map_err(|e| e.to_string())?;
            for (f, st) in streamed.iter().enumerate() {
                let ds = tape.tensor(batch_out.standby[f]).max_abs_diff(&st.standby);
                let dp = tape.tensor(batch_out.patch[f]).max_abs_diff(&st.patch);
                if ds > 1e-12 || dp > 1e-12 {
                    return Err(format!("trial {trial} frame {f}: streaming diff {ds}/{dp}"));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_06_token_accounting() {
    criterion(6, "token accounting matches the published tables", || {
        let expect = |got: u64, want: u64| -> Result<(), String> {
            if got != want {
                return Err(format!("token total {got}, wanted {want}"));
            }
            Ok(())
        };
        expect(token_count(64, 324, BASELINE_TOTAL_TOKENS).total, 20736)?;
        for (per_frame, total, label) in [(8, 512, "2.5%"), (16, 1024, "5%"), (32, 2048, "10%")] {
            let tc = token_count(64, per_frame, BASELINE_TOTAL_TOKENS);
            expect(tc.total, total)?;
            if tc.label != label {
                return Err(format!("{total} tokens labeled {:?}, wanted {label:?}", tc.label));
            }
        }
        let tc = token_count(256, 16, BASELINE_TOTAL_TOKENS);
        expect(tc.total, 4096)?;
        if tc.label != "20%" {
            return Err(format!("4096 tokens labeled {:?}, wanted \"20%\"", tc.label));
        }
        for ((s, f, n, extra), want) in [
            ((248, 8, 8, 144), 3200),
            ((504, 8, 8, 144), 5248),
            ((248, 8, 16, 144), 5248),
            ((504, 8, 16, 144), 9344),
        ] {
            expect(streaming_token_total(s, f, n, extra) as u64, want)?;
        }
        Ok(())
    });
}

#[test]
fn criterion_07_budget_arithmetic() {
    criterion(7, "streaming budget arithmetic", || {
        let plan = plan_budget(32768, 4096, 2.0, 8, 324).map_err(|e| e.to_string())?;
        if (plan.baseline_seconds - 50.6).abs() > 0.5 {
            return Err(format!("baseline {:.3} s, wanted 50.6±0.5", plan.baseline_seconds));
        }
        if (plan.focus_seconds - 6.2).abs() > 0.2 {
            return Err(format!("focus {:.3} s, wanted 6.2±0.2", plan.focus_seconds));
        }
        if (plan.bank_seconds - 1792.0).abs() > 1.0 {
            return Err(format!("bank {:.3} s, wanted 1792±1", plan.bank_seconds));
        }
        if plan.memory_multiplier < 35.0 {
            return Err(format!("memory multiplier {:.2} < 35", plan.memory_multiplier));
        }
        Ok(())
    });
}

#[test]
fn criterion_08_cache_state_machine() {
    criterion(8, "cache state machine properties over 1000 random histories", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
        for trial in 0..1000 {
            let n_llm = rng.gen_range(1..=12);
            let o_s = rng.gen_range(n_llm..=n_llm + 200);
            let per_frame = n_llm + o_s;
            let local_budget = per_frame * rng.gen_range(1..=4) + rng.gen_range(0..per_frame);
            let bank_budget = match rng.gen_range(0..3) {
                0 => 0,
                1 => n_llm * rng.gen_range(1..=6),
                _ => usize::MAX,
            };
            let frames = rng.gen_range(0..=40u64);

            let mut state = CacheState::new(local_budget, bank_budget);
            let mut dropped_ids: Vec<u64> = Vec::new();
            for id in 0..frames {
                let events = state.ingest_frame(id, n_llm, o_s).map_err(|e| e.to_string())?;
                for event in events {
                    if let dualmode::streaming_cache::CacheEvent::Drop { frame_id, .. } = event {
                        dropped_ids.push(frame_id);
                    }
                }
                // budget safety after every ingest
                if state.local_tokens() > local_budget {
                    return Err(format!("trial {trial}: local budget exceeded"));
                }
                if state.bank_tokens() > bank_budget {
                    return Err(format!("trial {trial}: bank budget exceeded"));
                }
            }

            // FIFO ordering
            let local = state.local_frames();
            let bank = state.bank_frames();
            if !local.windows(2).all(|w| w[0] < w[1]) || !bank.windows(2).all(|w| w[0] < w[1]) {
                return Err(format!("trial {trial}: ordering violated"));
            }
            if let (Some(&bank_max), Some(&local_min)) = (bank.last(), local.first()) {
                if bank_max >= local_min {
                    return Err(format!("trial {trial}: bank frame {bank_max} >= local {local_min}"));
                }
            }

            // conservation: local ∪ bank ∪ dropped partitions all frames
            let mut all: Vec<u64> = dropped_ids.clone();
            all.extend(&bank);
            all.extend(&local);
            all.sort_unstable();
            let want: Vec<u64> = (0..frames).collect();
            if all != want {
                return Err(format!("trial {trial}: partition broken ({} of {frames} frames)", all.len()));
            }

            // detach and re-prefill read the same retained view: the
            // (frame_id, kind) sets must match the reference model
            let view = state.query_view(0);
            let got: Vec<(u64, bool)> = view
                .iter()
                .map(|b| (b.frame_id.unwrap(), b.kind == Some(dualmode::streaming_cache::BlockKind::FocusOriginal)))
                .collect();
            let mut want_blocks: Vec<(u64, bool)> = bank.iter().map(|&id| (id, false)).collect();
            for &id in &local {
                want_blocks.push((id, false));
                want_blocks.push((id, true));
            }
            if got != want_blocks {
                return Err(format!("trial {trial}: retained block sets diverge"));
            }
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs() >= 60 {
            return Err(format!("1000 histories took {elapsed:?}, budget is 1 min"));
        }
        Ok(())
    });
}

#[test]
fn criterion_09_pruning_oracle() {
    criterion(9, "pruning equals the sort oracle over 1000 random score sets", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC9);
        for trial in 0..1000 {
            let groups = rng.gen_range(1..=48);
            // coarse buckets force ties
            let scores: Vec<GroupScore> = (0..groups)
                .map(|g| GroupScore { group: g, score: rng.gen_range(0..6) as f64 / 5.0 })
                .collect();
            let m1: f64 = rng.gen_range(1.0..=100.0);
            let m2: f64 = rng.gen_range(1.0..=100.0);

            let kept = prune_top_m(&scores, m1).map_err(|e| e.to_string())?;

            let mut oracle: Vec<usize> = (0..groups).collect();
            oracle.sort_by(|&a, &b| scores[b].score.total_cmp(&scores[a].score).then(a.cmp(&b)));
            let take = ((m1 / 100.0 * groups as f64).ceil() as usize).max(1);
            let mut want = oracle[..take].to_vec();
            want.sort_unstable();
            if kept != want {
                return Err(format!("trial {trial}: {kept:?} != oracle {want:?}"));
            }
            if (kept.len() * 4) % 4 != 0 {
                return Err(format!("trial {trial}: token count not a multiple of 4"));
            }

            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            let small = prune_top_m(&scores, lo).map_err(|e| e.to_string())?;
            let large = prune_top_m(&scores, hi).map_err(|e| e.to_string())?;
            if !small.iter().all(|g| large.contains(g)) {
                return Err(format!("trial {trial}: not monotone in m"));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_10_cost_model() {
    criterion(10, "cost model scaling and calibration", || {
        let kv = KvConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/table7.cfg"))
            .map_err(|e| e.to_string())?;
        let vit = ArchSpec::from_kv(&kv, "vit").map_err(|e| e.to_string())?;
        let lm = ArchSpec::from_kv(&kv, "lm").map_err(|e| e.to_string())?;
        let vit_tokens = kv.usize_or("report.vit_tokens_per_frame", 576).unwrap() as u64;
        let z_llm = kv.usize_or("report.z_llm", 144).unwrap() as u64;

        let ratio = encoder_flops(&vit, 256, vit_tokens) / encoder_flops(&vit, 128, vit_tokens);
        if ratio != 2.0 {
            return Err(format!("encoder frame-doubling ratio {ratio}, wanted exactly 2.0"));
        }

        for len in [1000u64, 18432, 50000] {
            let r = lm_prefill_flops(&lm, 2 * len).total / lm_prefill_flops(&lm, len).total;
            if !(r > 2.0 && r < 4.0) {
                return Err(format!("lm doubling ratio {r} at len {len} outside (2, 4)"));
            }
        }

        let got = lm_prefill_flops(&lm, 256 * z_llm).total / lm_prefill_flops(&lm, 128 * z_llm).total;
        let want = 1314.5 / 456.7;
        let rel = (got - want).abs() / want;
        if rel > 0.10 {
            return Err(format!("calibration ratio {got:.4} vs {want:.4} (rel {rel:.4} > 10%)"));
        }
        Ok(())
    });
}

#[test]
fn criterion_11_serialization() {
    criterion(11, "prompt bytes and checkpoint round trip", || {
        let prompt = serialize_prompt(&[1.0, 2.5, 4.0], 2.0).map_err(|e| e.to_string())?;
        if !prompt.ends_with("1<frame1>2.5<frame2>4<frame3>") {
            return Err(format!("prompt {prompt:?} does not match the reference pattern"));
        }

        let enc_cfg = EncoderConfig::toy();
        let lm_cfg = ToyLMConfig::toy();
        let system = System::init(enc_cfg, lm_cfg, 7).map_err(|e| e.to_string())?;
        let mut config_echo = enc_cfg.to_kv_lines();
        config_echo.extend(lm_cfg.to_kv_lines());
        let ck = Checkpoint::new(&system.params, config_echo);

        let dir = std::env::temp_dir().join(format!("dm-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let path = dir.join("roundtrip.ckpt");
        save_checkpoint(&ck, &path).map_err(|e| e.to_string())?;
        let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
        std::fs::remove_dir_all(&dir).ok();

        if loaded.manifest != ck.manifest {
            return Err("manifest did not round-trip".into());
        }
        for p in ck.params.iter() {
            let q = loaded.params.get(&p.id).map_err(|e| e.to_string())?;
            if !q.value.bit_eq(&p.value) || q.trainable != p.trainable {
                return Err(format!("parameter {} did not round-trip bit-exactly", p.id));
            }
        }
        Ok(())
    });
}

/// Not a numbered criterion: the assembled sequences really do follow the
/// closed-form counts used throughout the accounting.
#[test]
fn assembled_sequences_match_closed_forms() {
    let enc_cfg = EncoderConfig::toy();
    let lm_cfg = ToyLMConfig::toy();
    let system = System::init(enc_cfg, lm_cfg, 21).unwrap();
    let video = synth_video(&enc_cfg, 3, 2.0, 22);

    let mut tape = Tape::new();
    let enc = encode(&mut tape, &system.params, &enc_cfg, &video, &EncodeOpts::default()).unwrap();
    let frames: Vec<_> = enc.standby.iter().copied().zip(enc.patch.iter().copied()).collect();
    let text = vec![1, 2];

    let st = assemble(&mut tape, &system.params, ModeSelector::Standby, &frames, &text).unwrap();
    assert_eq!(st.visual_len, 3 * enc_cfg.n_llm());
    let fc = assemble(&mut tape, &system.params, ModeSelector::Focus, &frames, &text).unwrap();
    assert_eq!(fc.visual_len, 3 * (enc_cfg.n_llm() + enc_cfg.z_llm()));
}
