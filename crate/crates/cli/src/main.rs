//! Command-line experiments for the dual-mode visual pipeline.
//!
//! Every command is deterministic given `(config, seed)` and writes a run
//! manifest next to its outputs. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dualmode::config::KvConfig;
use dualmode::cost::{
    build_cost_report, encoder_flops, lm_prefill_flops, ArchSpec, CostInputs,
};
use dualmode::encoder::{encode, encode_base, encode_tokens, EncodeOpts, EncoderConfig};
use dualmode::modes::{
    load_checkpoint, model_soup, save_checkpoint, serialize_prompt, stage1_step, stage2_step,
    Checkpoint, ModeSelector, System, ToyLMConfig,
};
use dualmode::numerics::Tape;
use dualmode::pruning::{
    attention_map_csv, attention_map_pgm, compute_group_scores, export_attention_map, prune_top_m,
    retained_token_count,
};
use dualmode::streaming_cache::{plan_budget, streaming_token_total, CacheState};
use dualmode::synth::{synth_batch, synth_video};

#[derive(Parser)]
#[command(name = "dualmode", version, about = "Dual-mode visual pipeline experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliMode {
    Standby,
    Focus,
}

impl From<CliMode> for ModeSelector {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Standby => ModeSelector::Standby,
            CliMode::Focus => ModeSelector::Focus,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode synthetic frames, report token accounting and the
    /// focus-path invariance check.
    Encode {
        #[arg(long, value_enum, default_value = "standby")]
        mode: CliMode,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Standby tokens per frame on the LM side (sets n_vit = 4·n_llm).
        #[arg(long)]
        n_llm: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dualmode-out")]
        out: PathBuf,
    },
    /// Run the toy training loop (stage 1 or 2) and write the loss curve.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Stage-2 starting checkpoint (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dualmode-out")]
        out: PathBuf,
    },
    /// Simulate the streaming cache and print the budget plan.
    StreamSim {
        #[arg(long, default_value_t = 64)]
        frames: u64,
        #[arg(long, default_value_t = 32768)]
        budget_total: usize,
        #[arg(long, default_value_t = 4096)]
        budget_local: usize,
        #[arg(long, default_value_t = 2.0)]
        fps: f64,
        #[arg(long, default_value_t = 8)]
        n_llm: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "dualmode-out")]
        out: PathBuf,
    },
    /// Attention-based token pruning on a toy run; exports attention maps.
    Prune {
        #[arg(long, default_value_t = 50.0)]
        m_percent: f64,
        #[arg(long, default_value_t = 0.1)]
        top_fraction: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dualmode-out")]
        out: PathBuf,
    },
    /// Analytic FLOPs / token / KV-footprint report.
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        frames: u64,
        #[arg(long, default_value = "dualmode-out")]
        out: PathBuf,
    },
    /// Average two checkpoints: w·a + (1−w)·b.
    Soup {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        w: f64,
        #[arg(long, default_value = "dualmode-out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Encode { mode, frames, n_llm, config, seed, out } => {
            cmd_encode(mode, frames, n_llm, config.as_deref(), seed, &out)
        }
        Cmd::Train { stage, steps, lr, init, config, seed, out } => {
            cmd_train(stage, steps, lr, init.as_deref(), config.as_deref(), seed, &out)
        }
        Cmd::StreamSim { frames, budget_total, budget_local, fps, n_llm, config, out } => {
            cmd_stream_sim(frames, budget_total, budget_local, fps, n_llm, config.as_deref(), &out)
        }
        Cmd::Prune { m_percent, top_fraction, config, seed, out } => {
            cmd_prune(m_percent, top_fraction, config.as_deref(), seed, &out)
        }
        Cmd::Cost { config, frames, out } => cmd_cost(config.as_deref(), frames, &out),
        Cmd::Soup { a, b, w, out } => cmd_soup(&a, &b, w, &out),
    }
}

// ─── Shared plumbing ──────────────────────────────────────────────────────────

fn load_kv(config: Option<&Path>) -> Result<KvConfig> {
    match config {
        Some(path) => Ok(KvConfig::load(path)?),
        None => Ok(KvConfig::default()),
    }
}

/// CLI default encoder: a 6×6 grid so up to 9 standby tokens per frame fit.
fn encoder_config(kv: &KvConfig, n_llm: Option<usize>) -> Result<EncoderConfig> {
    let mut cfg = EncoderConfig::from_kv(kv)?;
    if kv.get("encoder.grid_h").is_none() && kv.get("encoder.grid_w").is_none() {
        cfg.grid_h = 6;
        cfg.grid_w = 6;
    }
    if kv.get("encoder.n_vit").is_none() {
        cfg.n_vit = 8;
    }
    if let Some(n) = n_llm {
        cfg.n_vit = 4 * n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(out: &Path, command: &str, seed: Option<u64>, config: Option<&Path>, extra: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut text = String::new();
    writeln!(text, "command = {command}").unwrap();
    writeln!(text, "artifact_version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    if let Some(s) = seed {
        writeln!(text, "seed = {s}").unwrap();
    }
    writeln!(
        text,
        "config = {}",
        config.map(|p| p.display().to_string()).unwrap_or_else(|| "builtin".into())
    )
    .unwrap();
    writeln!(text, "out = {}", out.display()).unwrap();
    for (k, v) in extra {
        writeln!(text, "{k} = {v}").unwrap();
    }
    std::fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

// ─── encode ───────────────────────────────────────────────────────────────────

fn cmd_encode(
    mode: CliMode,
    frames: usize,
    n_llm: Option<usize>,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if frames == 0 {
        bail!("--frames must be at least 1");
    }
    let kv = load_kv(config)?;
    let enc_cfg = encoder_config(&kv, n_llm)?;
    let mut lm_cfg = ToyLMConfig::from_kv(&kv)?;
    lm_cfg.hidden_dim = enc_cfg.proj_dim;
    let system = System::init(enc_cfg, lm_cfg, seed)?;
    let video = synth_video(&enc_cfg, frames, 2.0, seed.wrapping_add(1));

    let mut tape = Tape::new();
    let enc = encode(&mut tape, &system.params, &enc_cfg, &video, &EncodeOpts::default())?;
    let mut base_tape = Tape::new();
    let base = encode_base(&mut base_tape, &system.params, &enc_cfg, &video, false)?;
    let mut max_diff = 0.0_f64;
    for (d, b) in enc.patch.iter().zip(&base.patch) {
        max_diff = max_diff.max(tape.tensor(*d).max_abs_diff(&base_tape.tensor(*b)));
    }

    let selector: ModeSelector = mode.into();
    let visual = dualmode::modes::visual_token_count(selector, frames, enc_cfg.n_llm(), enc_cfg.z_llm());
    let timestamps: Vec<f64> = video.iter().map(|f| f.timestamp).collect();
    let prompt = serialize_prompt(&timestamps, 2.0)?;

    let mut report = String::new();
    writeln!(report, "mode = {}", if selector == ModeSelector::Standby { "standby" } else { "focus" }).unwrap();
    writeln!(report, "frames = {frames}").unwrap();
    writeln!(report, "n_llm = {}", enc_cfg.n_llm()).unwrap();
    writeln!(report, "z_llm = {}", enc_cfg.z_llm()).unwrap();
    writeln!(report, "visual_tokens = {visual}").unwrap();
    writeln!(report, "standby_shape_per_frame = {}x{}", enc_cfg.n_llm(), enc_cfg.proj_dim).unwrap();
    writeln!(report, "patch_shape_per_frame = {}x{}", enc_cfg.z_llm(), enc_cfg.proj_dim).unwrap();
    writeln!(report, "focus_vs_base_max_abs_diff = {max_diff}").unwrap();
    print!("{report}");

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.txt"), &report)?;
    std::fs::write(out.join("prompt.txt"), &prompt)?;

    let mut csv = String::from("frame,kind,token,values\n");
    for (f, frame) in video.iter().enumerate() {
        let standby = tape.tensor(enc.standby[f]);
        for t in 0..standby.rows() {
            let vals: Vec<String> = standby.row(t).iter().map(|v| format!("{v}")).collect();
            writeln!(csv, "{},standby,{},{}", frame.index, t, vals.join(";")).unwrap();
        }
        if selector == ModeSelector::Focus {
            let patch = tape.tensor(enc.patch[f]);
            for t in 0..patch.rows() {
                let vals: Vec<String> = patch.row(t).iter().map(|v| format!("{v}")).collect();
                writeln!(csv, "{},patch,{},{}", frame.index, t, vals.join(";")).unwrap();
            }
        }
    }
    std::fs::write(out.join("tokens.csv"), csv)?;
    write_manifest(
        out,
        "encode",
        Some(seed),
        config,
        &[("frames".into(), frames.to_string()), ("n_llm".into(), enc_cfg.n_llm().to_string())],
    )?;
    Ok(())
}

// ─── train ────────────────────────────────────────────────────────────────────

fn cmd_train(
    stage: u8,
    steps: usize,
    lr: f64,
    init: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if stage != 1 && stage != 2 {
        bail!("--stage must be 1 or 2");
    }
    let kv = load_kv(config)?;
    let enc_cfg = EncoderConfig::from_kv(&kv)?;
    let mut lm_cfg = ToyLMConfig::from_kv(&kv)?;
    lm_cfg.hidden_dim = enc_cfg.proj_dim;
    lm_cfg.validate()?;
    std::fs::create_dir_all(out)?;

    let mut config_echo = enc_cfg.to_kv_lines();
    config_echo.extend(lm_cfg.to_kv_lines());

    if stage == 1 {
        let mut system = System::init(enc_cfg, lm_cfg, seed)?;
        let batch = synth_batch(&enc_cfg, lm_cfg.vocab, 2, 4, seed.wrapping_add(1000));
        let originals_before = system.params.snapshot();

        let mut csv = String::from("step,loss\n");
        for step in 0..steps {
            let loss = stage1_step(&mut system, &batch, lr)?;
            writeln!(csv, "{step},{loss}").unwrap();
        }
        let changed: Vec<String> = system
            .params
            .changed_since(&originals_before)
            .into_iter()
            .filter(|id| !dualmode::encoder::is_new_param(id))
            .collect();
        println!("original params changed: {}", changed.len());
        if !changed.is_empty() {
            bail!("freeze violation: original parameters changed: {changed:?}");
        }

        std::fs::write(out.join("loss.csv"), csv)?;
        let ck = Checkpoint::new(&system.params, config_echo);
        save_checkpoint(&ck, out.join("stage1.ckpt"))?;
        println!("checkpoint: {}", out.join("stage1.ckpt").display());
    } else {
        let init_path = init.context("--init CHECKPOINT is required for stage 2")?;
        let ck = load_checkpoint(init_path)?;
        let echo_kv = KvConfig::parse(&ck.manifest.config_lines.join("\n"))?;
        let enc_cfg = EncoderConfig::from_kv(&echo_kv)?;
        let lm_cfg = ToyLMConfig::from_kv(&echo_kv)?;
        let mut system = System { encoder_cfg: enc_cfg, lm_cfg, params: ck.params };
        system.unfreeze_lm();
        let batch = synth_batch(&enc_cfg, lm_cfg.vocab, 2, 4, seed.wrapping_add(1000));

        let mut csv = String::from("step,loss1,loss2,combined\n");
        for step in 0..steps {
            let losses = stage2_step(&mut system, &batch, lr)?;
            writeln!(csv, "{step},{},{},{}", losses.standby, losses.focus, losses.combined).unwrap();
        }
        std::fs::write(out.join("loss.csv"), csv)?;
        let ck = Checkpoint::new(&system.params, config_echo);
        save_checkpoint(&ck, out.join("stage2.ckpt"))?;
        println!("checkpoint: {}", out.join("stage2.ckpt").display());
    }

    write_manifest(
        out,
        "train",
        Some(seed),
        config,
        &[
            ("stage".into(), stage.to_string()),
            ("steps".into(), steps.to_string()),
            ("lr".into(), lr.to_string()),
        ],
    )?;
    Ok(())
}

// ─── stream-sim ───────────────────────────────────────────────────────────────

fn cmd_stream_sim(
    frames: u64,
    budget_total: usize,
    budget_local: usize,
    fps: f64,
    n_llm: usize,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let kv = load_kv(config)?;
    let o_s = kv.usize_or("stream.o_s", 324)?;
    let plan = plan_budget(budget_total, budget_local, fps, n_llm, o_s)?;

    let mut text = String::new();
    writeln!(text, "baseline_seconds = {:.1}", plan.baseline_seconds).unwrap();
    writeln!(text, "focus_seconds = {:.1}", plan.focus_seconds).unwrap();
    writeln!(text, "bank_seconds = {:.1}", plan.bank_seconds).unwrap();
    writeln!(text, "bank_minutes = {:.1}", plan.bank_seconds / 60.0).unwrap();
    writeln!(text, "memory_multiplier = {:.1}", plan.memory_multiplier).unwrap();
    for (standby_frames, focus_frames, n, extra) in
        [(248, 8, 8, 144), (504, 8, 8, 144), (248, 8, 16, 144), (504, 8, 16, 144)]
    {
        writeln!(
            text,
            "preset standby_frames={standby_frames} focus_frames={focus_frames} n_llm={n} extra={extra} total={}",
            streaming_token_total(standby_frames, focus_frames, n, extra)
        )
        .unwrap();
    }

    let mut state = CacheState::new(budget_local, budget_total - budget_local);
    let mut log = String::new();
    for id in 0..frames {
        for event in state.ingest_frame(id, n_llm, o_s)? {
            writeln!(log, "{event}").unwrap();
        }
    }
    let view = state.query_view(0);
    let visual_tokens: usize = view.iter().map(|b| b.token_count).sum();
    writeln!(text, "frames_ingested = {frames}").unwrap();
    writeln!(text, "local_frames = {}", state.local_frames().len()).unwrap();
    writeln!(text, "bank_frames = {}", state.bank_frames().len()).unwrap();
    writeln!(text, "dropped_frames = {}", state.dropped_frames).unwrap();
    writeln!(text, "view_blocks = {}", view.len()).unwrap();
    writeln!(text, "view_visual_tokens = {visual_tokens}").unwrap();
    print!("{text}");

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("plan.txt"), &text)?;
    std::fs::write(out.join("events.log"), &log)?;
    write_manifest(
        out,
        "stream-sim",
        None,
        config,
        &[
            ("frames".into(), frames.to_string()),
            ("budget_total".into(), budget_total.to_string()),
            ("budget_local".into(), budget_local.to_string()),
            ("fps".into(), fps.to_string()),
            ("n_llm".into(), n_llm.to_string()),
        ],
    )?;
    Ok(())
}

// ─── prune ────────────────────────────────────────────────────────────────────

fn cmd_prune(
    m_percent: f64,
    top_fraction: f64,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let kv = load_kv(config)?;
    let enc_cfg = encoder_config(&kv, None)?;
    let mut lm_cfg = ToyLMConfig::from_kv(&kv)?;
    lm_cfg.hidden_dim = enc_cfg.proj_dim;
    let system = System::init(enc_cfg, lm_cfg, seed)?;
    let video = synth_video(&enc_cfg, 1, 2.0, seed.wrapping_add(1));

    let (_tokens, captured) = encode_tokens(
        &system.params,
        &enc_cfg,
        &video,
        &EncodeOpts { capture_attention: true, ..Default::default() },
    )?;
    let attention = &captured.as_ref().expect("capture requested")[0];
    let scores = compute_group_scores(attention, &enc_cfg)?;
    let retained = prune_top_m(&scores, m_percent)?;
    let tokens = retained_token_count(retained.len());
    println!("groups = {}", scores.len());
    println!("retained_groups = {}", retained.len());
    println!("retained_tokens = {tokens}");

    std::fs::create_dir_all(out)?;
    let mut csv = String::from("group,score,retained\n");
    for s in &scores {
        writeln!(csv, "{},{},{}", s.group, s.score, retained.contains(&s.group) as u8).unwrap();
    }
    std::fs::write(out.join("groups.csv"), csv)?;

    let maps = export_attention_map(attention, &enc_cfg, top_fraction)?;
    for (q, map) in maps.iter().enumerate() {
        std::fs::write(out.join(format!("attn_token{q}.csv")), attention_map_csv(map))?;
        std::fs::write(out.join(format!("attn_token{q}.pgm")), attention_map_pgm(map))?;
    }
    write_manifest(
        out,
        "prune",
        Some(seed),
        config,
        &[
            ("m_percent".into(), m_percent.to_string()),
            ("top_fraction".into(), top_fraction.to_string()),
        ],
    )?;
    Ok(())
}

// ─── cost ─────────────────────────────────────────────────────────────────────

/// Built-in calibration constants: a 0.7B-class vision tower and an
/// 8B-class LM, matching the published FLOPs table.
fn builtin_cost_config() -> KvConfig {
    KvConfig::parse(
        "vit.layers = 32\nvit.hidden = 1280\nvit.heads = 16\nvit.kv_heads = 16\n\
         vit.ff = 5120\nvit.gated_ffn = false\n\
         lm.layers = 36\nlm.hidden = 4096\nlm.heads = 32\nlm.kv_heads = 8\n\
         lm.ff = 12288\nlm.gated_ffn = true\n\
         report.vit_tokens_per_frame = 576\nreport.z_llm = 144\nreport.n_llm = 8\n\
         report.n_vit = 32\nreport.bytes_per_value = 2\nreport.vram_budget = 34359738368\n",
    )
    .expect("builtin config parses")
}

fn cmd_cost(config: Option<&Path>, frames: u64, out: &Path) -> Result<()> {
    let kv = match config {
        Some(path) => KvConfig::load(path)?,
        None => builtin_cost_config(),
    };
    let vit = ArchSpec::from_kv(&kv, "vit")?;
    let lm = ArchSpec::from_kv(&kv, "lm")?;
    let vit_tokens = kv.usize_or("report.vit_tokens_per_frame", 576)? as u64;
    let z_llm = kv.usize_or("report.z_llm", 144)? as u64;
    let n_llm = kv.usize_or("report.n_llm", 8)? as u64;
    let n_vit = kv.usize_or("report.n_vit", 32)? as u64;

    let enc_1x = encoder_flops(&vit, frames, vit_tokens);
    let enc_2x = encoder_flops(&vit, 2 * frames, vit_tokens);
    let lm_1x = lm_prefill_flops(&lm, frames * z_llm);
    let lm_2x = lm_prefill_flops(&lm, 2 * frames * z_llm);

    let mut text = String::new();
    writeln!(text, "frames = {frames}").unwrap();
    writeln!(text, "encoder_tflops = {:.1}", enc_1x / 1e12).unwrap();
    writeln!(text, "encoder_tflops_2x_frames = {:.1}", enc_2x / 1e12).unwrap();
    writeln!(text, "encoder_flops_ratio = {}", enc_2x / enc_1x).unwrap();
    writeln!(text, "lm_prefill_linear_tflops = {:.1}", lm_1x.linear / 1e12).unwrap();
    writeln!(text, "lm_prefill_quadratic_tflops = {:.1}", lm_1x.quadratic / 1e12).unwrap();
    writeln!(text, "lm_prefill_total_tflops = {:.1}", lm_1x.total / 1e12).unwrap();
    writeln!(text, "lm_prefill_ratio_2x_len = {:.2}", lm_2x.total / lm_1x.total).unwrap();
    print!("{text}");

    let report = build_cost_report(&CostInputs {
        vit,
        lm,
        frames,
        vit_tokens_per_frame: vit_tokens,
        n_vit,
        n_llm,
        z_llm,
        temporal_depth: 5,
        temporal_window: 8,
        bytes_per_value: kv.usize_or("report.bytes_per_value", 2)? as u64,
        vram_budget: kv.usize_or("report.vram_budget", 34359738368)? as u64,
    })?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("cost.txt"), &text)?;
    std::fs::write(out.join("cost.json"), report.to_json())?;
    std::fs::write(out.join("cost.csv"), report.to_csv())?;
    write_manifest(out, "cost", None, config, &[("frames".into(), frames.to_string())])?;
    Ok(())
}

// ─── soup ─────────────────────────────────────────────────────────────────────

fn cmd_soup(a: &Path, b: &Path, w: f64, out: &Path) -> Result<()> {
    let ck_a = load_checkpoint(a)?;
    let ck_b = load_checkpoint(b)?;
    let soup = model_soup(&ck_a, &ck_b, w)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("soup.ckpt");
    save_checkpoint(&soup, &path)?;
    println!("soup params = {}", soup.params.len());
    println!("soup checkpoint: {}", path.display());
    write_manifest(
        out,
        "soup",
        None,
        None,
        &[
            ("a".into(), a.display().to_string()),
            ("b".into(), b.display().to_string()),
            ("w".into(), w.to_string()),
        ],
    )?;
    Ok(())
}
