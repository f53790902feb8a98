//! Frame-quality and memory metrics. All pixel metrics operate on frames
//! quantised to 8 bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{random_walk, RevisitAnnotation, World, WorldConfig};
use crate::rng::{self, tags};
use crate::video::{to_u8, LatentVideo};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;
pub const HIST_BINS: usize = 16;
/// Over-threshold transitions closer than this merge into one cut.
pub const CUT_MERGE_GAP: usize = 2;

pub fn quantize(frame: &[f32]) -> Vec<u8> {
    frame.iter().map(|&v| to_u8(v)).collect()
}

/// PSNR in dB between two frames, capped for identical inputs.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "frame size mismatch");
    let mse = quantize(a)
        .iter()
        .zip(quantize(b))
        .map(|(&x, y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (SSIM_L * SSIM_L / mse).log10()).min(PSNR_CAP)
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean SSIM over valid windows and channels of planar `[3, H, W]` frames.
pub fn ssim(a: &[f32], b: &[f32], height: usize, width: usize) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "frame size mismatch");
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "frame {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let channels = a.len() / (height * width);
    let g = gaussian_window();
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let qa = quantize(a);
    let qb = quantize(b);
    let plane = height * width;
    let mut total = 0.0;
    for c in 0..channels {
        let x: Vec<f64> = qa[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = qb[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let maps = [
            x.clone(),
            y.clone(),
            x.iter().map(|v| v * v).collect(),
            y.iter().map(|v| v * v).collect(),
            x.iter().zip(&y).map(|(p, q)| p * q).collect(),
        ];
        let f: Vec<Vec<f64>> = maps.iter().map(|m| filter_valid(m, height, width, &g)).collect();
        for i in 0..oh * ow {
            let (mx, my) = (f[0][i], f[1][i]);
            let vx = f[2][i] - mx * mx;
            let vy = f[3][i] - my * my;
            let cxy = f[4][i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (channels * oh * ow) as f64)
}

fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Frame-averaged PSNR and SSIM of `pred` against `target`.
pub fn video_psnr_ssim(pred: &LatentVideo, target: &LatentVideo) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return Err(Error::Config(format!(
            "video shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("video has no frames"));
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for (a, b) in pred.frames().zip(target.frames()) {
        p += psnr(a, b);
        s += ssim(a, b, pred.height(), pred.width())?;
    }
    let n = pred.len() as f64;
    Ok((p / n, s / n))
}

/// Histogram plus pixel change between consecutive frames. Histograms are
/// per channel, 16 bins, as fractions of the pixel count scaled to 0..255.
pub fn content_delta(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "frame size mismatch");
    let qa = quantize(a);
    let qb = quantize(b);
    let plane = a.len() / 3;
    let mut hist_diff = 0.0;
    for c in 0..3 {
        let mut ha = [0usize; HIST_BINS];
        let mut hb = [0usize; HIST_BINS];
        for p in 0..plane {
            ha[qa[c * plane + p] as usize * HIST_BINS / 256] += 1;
            hb[qb[c * plane + p] as usize * HIST_BINS / 256] += 1;
        }
        for k in 0..HIST_BINS {
            hist_diff += (ha[k] as f64 - hb[k] as f64).abs() / plane as f64 * 255.0;
        }
    }
    hist_diff /= (3 * HIST_BINS) as f64;
    let pix = qa
        .iter()
        .zip(&qb)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.len() as f64;
    hist_diff + 0.5 * pix
}

pub fn content_deltas(video: &LatentVideo) -> Vec<f64> {
    (1..video.len())
        .map(|i| content_delta(video.frame(i - 1), video.frame(i)))
        .collect()
}

/// Frame indices at which a scene cut starts.
pub fn scene_cuts(video: &LatentVideo, threshold: f64) -> Vec<usize> {
    let mut cuts: Vec<usize> = Vec::new();
    let mut last_over: Option<usize> = None;
    for (i, d) in content_deltas(video).into_iter().enumerate() {
        let frame = i + 1;
        if d > threshold {
            if !last_over.is_some_and(|l| frame - l <= CUT_MERGE_GAP) {
                cuts.push(frame);
            }
            last_over = Some(frame);
        }
    }
    cuts
}

pub fn scene_cut_count(video: &LatentVideo, threshold: f64) -> usize {
    scene_cuts(video, threshold).len()
}

/// Twice the largest content delta seen over `transitions` ground-truth
/// environment steps drawn from random walks in fresh worlds.
pub fn calibrate_scuts_threshold(config: &WorldConfig, seed: u64, transitions: usize) -> Result<f64> {
    let mut max_delta: f64 = 0.0;
    let mut seen = 0;
    let mut episode = 0u64;
    while seen < transitions {
        let ws = rng::derive(seed, &[tags::EVAL, episode]);
        let world = World::generate(ws, config)?;
        let start = world.random_start(ws)?;
        let len = (transitions - seen).min(64) + 1;
        let path = random_walk(&world, start, len, ws)?;
        let mut prev = world.render(path.poses[0]);
        for &p in &path.poses[1..] {
            let cur = world.render(p);
            max_delta = max_delta.max(content_delta(&prev, &cur));
            prev = cur;
        }
        seen += len - 1;
        episode += 1;
    }
    Ok(2.0 * max_delta)
}

pub trait FeatureExtractor {
    fn features(&self, frame: &[f32], height: usize, width: usize) -> Vec<f64>;
}

/// Average-pools `pool x pool` blocks of 8-bit pixels.
#[derive(Clone, Copy, Debug)]
pub struct PooledPixels {
    pub pool: usize,
}

impl Default for PooledPixels {
    fn default() -> Self {
        Self { pool: 4 }
    }
}

impl FeatureExtractor for PooledPixels {
    fn features(&self, frame: &[f32], height: usize, width: usize) -> Vec<f64> {
        let q = quantize(frame);
        let plane = height * width;
        let channels = frame.len() / plane;
        let (ph, pw) = (height / self.pool, width / self.pool);
        let mut out = Vec::with_capacity(channels * ph * pw);
        for c in 0..channels {
            for by in 0..ph {
                for bx in 0..pw {
                    let mut s = 0.0;
                    for y in 0..self.pool {
                        for x in 0..self.pool {
                            s += q[c * plane + (by * self.pool + y) * width + bx * self.pool + x] as f64;
                        }
                    }
                    out.push(s / (self.pool * self.pool) as f64);
                }
            }
        }
        out
    }
}

impl<F: Fn(&[f32], usize, usize) -> Vec<f64>> FeatureExtractor for F {
    fn features(&self, frame: &[f32], height: usize, width: usize) -> Vec<f64> {
        self(frame, height, width)
    }
}

/// Cosine similarity of mean-centred vectors. Identical vectors (including
/// flat ones) count as fully similar.
pub fn centered_cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "feature size mismatch");
    if a == b {
        return 1.0;
    }
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Scene revisit consistency: 100 times the mean cosine similarity over
/// every pair of frames that show the same marked pose.
pub fn scene_revisit_consistency(
    video: &LatentVideo,
    annotation: &RevisitAnnotation,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    annotation.validate(video.len())?;
    let (h, w) = (video.height(), video.width());
    let mut total = 0.0;
    let mut pairs = 0usize;
    for mark in &annotation.marks {
        let feats: Vec<Vec<f64>> = mark
            .indices()
            .into_iter()
            .map(|i| extractor.features(video.frame(i), h, w))
            .collect();
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                total += centered_cosine(&feats[i], &feats[j]);
                pairs += 1;
            }
        }
    }
    Ok(100.0 * total / pairs as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scuts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scuts_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src: Option<f64>,
    pub frames: usize,
}
