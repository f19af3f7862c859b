//! Seeded synthetic frames and caption targets for the toy tasks.
//!
//! Frames are Gaussian "pixel" tensors with a low-rank temporal drift so
//! temporal attention has signal; captions are deterministic functions of
//! frame content so distillation quality is measurable.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, FrameInput};
use crate::numerics::Tensor;

const DRIFT_RANK: usize = 2;
const NOISE_STD: f64 = 0.3;

/// One synthetic video: `count` frames at `1/fps`-second spacing.
pub fn synth_video(cfg: &EncoderConfig, count: usize, fps: f64, seed: u64) -> Vec<FrameInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = cfg.o();
    let p = cfg.pixel_dim;

    // fixed rank-1 components u_j v_j^T, modulated per frame
    let components: Vec<(Tensor, Tensor, f64)> = (0..DRIFT_RANK)
        .map(|_| {
            let u = Tensor::randn(vec![o], 1.0, &mut rng);
            let v = Tensor::randn(vec![p], 1.0, &mut rng);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (u, v, phase)
        })
        .collect();

    (0..count)
        .map(|f| {
            let mut pixels = Tensor::randn(vec![o, p], NOISE_STD, &mut rng);
            for (u, v, phase) in &components {
                let s = (std::f64::consts::TAU * f as f64 / count.max(1) as f64 + phase).sin();
                let data = pixels.data_mut();
                for r in 0..o {
                    for c in 0..p {
                        data[r * p + c] += s * u.data()[r] * v.data()[c];
                    }
                }
            }
            FrameInput { index: f as u64, timestamp: f as f64 / fps, pixels }
        })
        .collect()
}

/// One caption token per frame: the frame's mean pixel value bucketed into
/// the vocabulary. Deterministic in the frame content.
pub fn synth_caption(frames: &[FrameInput], vocab: usize) -> Vec<usize> {
    frames
        .iter()
        .map(|f| {
            let mean: f64 = f.pixels.data().iter().sum::<f64>() / f.pixels.numel() as f64;
            // mean is approximately N(0, small); squash into (0, 1)
            let unit = 0.5 * (1.0 + (mean * 4.0).tanh());
            ((unit * vocab as f64) as usize).min(vocab - 1)
        })
        .collect()
}

/// A training batch of seeded videos with caption targets.
pub struct Batch {
    pub videos: Vec<Vec<FrameInput>>,
    pub captions: Vec<Vec<usize>>,
}

pub fn synth_batch(
    cfg: &EncoderConfig,
    vocab: usize,
    videos: usize,
    frames_per_video: usize,
    seed: u64,
) -> Batch {
    let mut all_videos = Vec::with_capacity(videos);
    let mut captions = Vec::with_capacity(videos);
    for i in 0..videos {
        let video = synth_video(cfg, frames_per_video, 2.0, seed.wrapping_add(i as u64));
        captions.push(synth_caption(&video, vocab));
        all_videos.push(video);
    }
    Batch { videos: all_videos, captions }
}
