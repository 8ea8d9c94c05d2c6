//! Video quality metrics, a learned-feature perceptual proxy, a label
//! probe for semantic scoring, and simulation-based action ranking.

mod probe;
mod ranking;
mod report;

pub use probe::{train_probe, Probe, ProbeConfig};
pub use ranking::{
    image_goal_episode, label_goal_episode, rank_actions, rollout_candidates, GoalSpec, RankingEpisode, RankingResult,
    Rollouts, Scorer, MIN_OUTCOME_SEPARATION,
};
pub use report::{
    batch_evaluate, copy_static_baseline, reports_to_csv, score_record, summary_text, write_strip, EvalContext,
    EvalOutput, Generator, MetricReport, RecordScore,
};

use crate::codec::{Codec, CodecMode};
use crate::error::{Error, Result};
use crate::video::{Frame, VideoTensor};

/// Value returned for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

fn check_same(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("videos {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit dynamic range.
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    check_same(a, b)?;
    Ok(psnr_slices(a.data(), b.data()))
}

pub(crate) fn psnr_slices(a: &[f32], b: &[f32]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Per-frame PSNR.
pub fn psnr_per_frame(a: &VideoTensor, b: &VideoTensor) -> Result<Vec<f64>> {
    check_same(a, b)?;
    Ok((0..a.num_frames()).map(|t| psnr_slices(a.frame_slice(t), b.frame_slice(t))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03 }
    }
}

/// Mean SSIM over frames and channels with a uniform window over the
/// valid region.
pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    ssim_with(a, b, SsimParams::default())
}

pub fn ssim_with(a: &VideoTensor, b: &VideoTensor, p: SsimParams) -> Result<f64> {
    check_same(a, b)?;
    let (f, h, w) = a.shape();
    let mut total = 0.0;
    for t in 0..f {
        total += frame_ssim(a.frame_slice(t), b.frame_slice(t), h, w, p)?;
    }
    Ok(total / f as f64)
}

/// SSIM of one frame averaged over its three channels.
pub fn frame_ssim(a: &[f32], b: &[f32], h: usize, w: usize, p: SsimParams) -> Result<f64> {
    let k = p.window;
    if k == 0 || h < k || w < k {
        return Err(Error::Shape(format!("{h}x{w} frame is smaller than the {k}x{k} window")));
    }
    let c1 = (p.k1 * 1.0).powi(2);
    let c2 = (p.k2 * 1.0).powi(2);
    let n = (k * k) as f64;
    let mut sum = 0.0;
    for ch in 0..3 {
        // Summed-area tables for x, y, x^2, y^2, xy.
        let stride = w + 1;
        let mut tabs = vec![[0.0f64; 5]; (h + 1) * stride];
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * 3 + ch;
                let (u, v) = (a[i] as f64, b[i] as f64);
                let cell = [u, v, u * u, v * v, u * v];
                for q in 0..5 {
                    tabs[(y + 1) * stride + x + 1][q] =
                        cell[q] + tabs[y * stride + x + 1][q] + tabs[(y + 1) * stride + x][q] - tabs[y * stride + x][q];
                }
            }
        }
        let mut acc = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let mut s = [0.0; 5];
                for q in 0..5 {
                    s[q] =
                        tabs[(y + k) * stride + x + k][q] - tabs[y * stride + x + k][q] - tabs[(y + k) * stride + x][q]
                            + tabs[y * stride + x][q];
                }
                let (ma, mb) = (s[0] / n, s[1] / n);
                let va = (s[2] / n - ma * ma).max(0.0);
                let vb = (s[3] / n - mb * mb).max(0.0);
                let cov = s[4] / n - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        sum += acc / ((h - k + 1) * (w - k + 1)) as f64;
    }
    Ok(sum / 3.0)
}

fn require_learned(codec: &Codec) -> Result<()> {
    if codec.mode() != CodecMode::Learned {
        return Err(Error::Config("perceptual distance needs a learned codec".into()));
    }
    Ok(())
}

/// Mean squared distance between learned-codec latents.
pub fn perceptual_distance(a: &VideoTensor, b: &VideoTensor, codec: &Codec) -> Result<f64> {
    require_learned(codec)?;
    check_same(a, b)?;
    let (la, lb) = (codec.encode(a)?, codec.encode(b)?);
    la.mse(&lb)
}

/// Perceptual distance between two frames, each held for one temporal
/// codec window.
pub fn frame_perceptual_distance(a: &Frame, b: &Frame, codec: &Codec) -> Result<f64> {
    require_learned(codec)?;
    let r = codec.config().temporal_ratio;
    let va = VideoTensor::from_frames(&vec![a.clone(); r])?;
    let vb = VideoTensor::from_frames(&vec![b.clone(); r])?;
    perceptual_distance(&va, &vb, codec)
}
