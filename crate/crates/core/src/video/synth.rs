//! Synthetic gameplay corpus with a planted arousal signal.
//!
//! Each video has a latent arousal curve: a random walk with upward drift,
//! stepped at the annotation rate and held between steps. Frames show a
//! dark scrolling textured background under slowly drifting lighting, a
//! wandering distractor sprite and a HUD panel. A meter inset in the panel
//! fills wider and brighter as the latent value (min-max scaled within the
//! video) grows. The trace is the latent read with a
//! lag, plus noise, then mapped through a random affine so raw values are
//! unbounded.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::frames::{Clip, FRAME_PIXELS};
use super::pnm::{dequantize, quantize};
use crate::error::{Error, Result};
use crate::nn::arch::{FRAME_HEIGHT, FRAME_WIDTH, SEGMENT_FRAMES};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::traces::{AnnotationTrace, ANNOTATION_RATE, FRAME_RATE};

/// Pixel rectangle `[top, top + height) x [left, left + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }

    /// Row-major `72 x 128` membership mask.
    pub fn mask(&self) -> Vec<bool> {
        (0..FRAME_PIXELS)
            .map(|i| self.contains(i / FRAME_WIDTH, i % FRAME_WIDTH))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// The HUD panel; the only pixels that carry the latent.
    pub region: Region,
    /// Gap between the panel border and the meter, in pixels.
    pub meter_margin: usize,
    /// Standard deviation of the background lighting drift (AR(1) with
    /// coefficient 0.9 per frame).
    pub flicker: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Annotator reaction lag in seconds.
    pub lag_s: f64,
    /// Annotator noise, in latent units.
    pub annotator_noise: f64,
    /// Mean latent change per annotation step.
    pub drift: f64,
    /// Standard deviation of the latent change per annotation step.
    pub volatility: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 20,
            duration_s: 60.0,
            seed: 7,
            region: Region {
                top: 14,
                left: 48,
                height: 28,
                width: 32,
            },
            meter_margin: 9,
            flicker: 0.2,
            noise: 0.05,
            lag_s: 0.5,
            annotator_noise: 1.0,
            drift: 0.6,
            volatility: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.region;
        if self.num_videos == 0 {
            return Err(Error::Config("num_videos must be at least 1".into()));
        }
        if !(self.duration_s * FRAME_RATE >= SEGMENT_FRAMES as f64) || !self.duration_s.is_finite() {
            return Err(Error::Config(format!(
                "duration {} s gives fewer than {SEGMENT_FRAMES} frames",
                self.duration_s
            )));
        }
        if r.height == 0 || r.width == 0 || r.top + r.height > FRAME_HEIGHT || r.left + r.width > FRAME_WIDTH {
            return Err(Error::Config(format!("region {r:?} is empty or leaves the frame")));
        }
        if r.area() * 10 > FRAME_PIXELS {
            return Err(Error::Config(format!(
                "region covers {} pixels, more than 10% of the frame",
                r.area()
            )));
        }
        if 2 * self.meter_margin >= r.height.min(r.width) {
            return Err(Error::Config(format!(
                "meter margin {} leaves no meter inside region {r:?}",
                self.meter_margin
            )));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("flicker", self.flicker),
            ("lag_s", self.lag_s),
            ("annotator_noise", self.annotator_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.volatility > 0.0) || !self.drift.is_finite() || !self.volatility.is_finite() {
            return Err(Error::Config("volatility must be > 0 and drift finite".into()));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * FRAME_RATE).round() as usize
    }

    pub fn video_id(index: usize) -> String {
        format!("video{index:03}")
    }
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub clip: Clip,
    pub trace: AnnotationTrace,
    /// Per-frame latent arousal, min-max scaled to `[0, 1]`.
    pub latent: Vec<f64>,
}

/// Annotation-step index held at frame `i`.
fn knot_of_frame(i: usize) -> usize {
    // i / 30 s >= k / 4 s  <=>  4 i >= 30 k
    i * ANNOTATION_RATE as usize / FRAME_RATE as usize
}

/// Generates video `index` of the corpus. Videos are independent: each
/// draws from its own child generator.
pub fn synth_video(cfg: &SynthConfig, index: usize) -> Result<SynthVideo> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).derive(index as u64);
    let frames = cfg.frame_count();
    let samples = (cfg.duration_s * ANNOTATION_RATE).ceil() as usize;
    let knots = samples.max(knot_of_frame(frames - 1) + 1);

    let mut walk = Vec::with_capacity(knots);
    let mut a = 0.0f64;
    for _ in 0..knots {
        walk.push(a);
        a += cfg.drift + cfg.volatility * rng.normal();
    }
    let frame_knots = knot_of_frame(frames - 1) + 1;
    let (lo, hi) = walk[..frame_knots]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let latent: Vec<f64> = (0..frames).map(|i| (walk[knot_of_frame(i)] - lo) / span).collect();

    let scale = (rng.uniform() * (20.0f64 / 0.5).ln()).exp() * 0.5;
    let offset = rng.uniform() * 100.0 - 50.0;
    let mut trace = Vec::with_capacity(samples);
    for k in 0..samples {
        let t = k as f64 / ANNOTATION_RATE;
        let seen = ((t - cfg.lag_s) * ANNOTATION_RATE + 1e-9).floor().max(0.0) as usize;
        let v = walk[seen.min(knots - 1)] + cfg.annotator_noise * rng.normal();
        trace.push((t, scale * v + offset));
    }
    let trace = AnnotationTrace::new(SynthConfig::video_id(index), trace)?;

    let clip = render(cfg, &latent, &mut rng)?;
    let clip = Clip::new(SynthConfig::video_id(index), clip)?;
    Ok(SynthVideo { clip, trace, latent })
}

fn render(cfg: &SynthConfig, latent: &[f64], rng: &mut Rng) -> Result<Tensor> {
    const SPRITE: usize = 10;
    let r = cfg.region;
    let m = cfg.meter_margin;
    let meter = Region {
        top: r.top + m,
        left: r.left + m,
        height: r.height - 2 * m,
        width: r.width - 2 * m,
    };
    let base = 0.05 + 0.1 * rng.uniform();
    let texture = 0.05 + 0.035 * rng.uniform();
    let scroll = 0.2 + 0.6 * rng.uniform();
    let sprite_level = 0.5 + 0.3 * rng.uniform();
    let (mut sy, mut sx) = (
        rng.below(FRAME_HEIGHT - SPRITE) as f64,
        rng.below(FRAME_WIDTH - SPRITE) as f64,
    );
    let mut light = 0.0f64;
    let cols: Vec<f64> = (0..FRAME_WIDTH).map(|x| x as f64 / 32.0).collect();
    let rows: Vec<f64> = (0..FRAME_HEIGHT).map(|y| (TAU * y as f64 / 24.0).cos()).collect();

    let mut data = Vec::with_capacity(latent.len() * FRAME_PIXELS);
    for (i, &level) in latent.iter().enumerate() {
        let t = i as f64 / FRAME_RATE;
        sy = (sy + 1.5 * rng.normal()).clamp(0.0, (FRAME_HEIGHT - SPRITE) as f64);
        sx = (sx + 1.5 * rng.normal()).clamp(0.0, (FRAME_WIDTH - SPRITE) as f64);
        let (py, px) = (sy.round() as usize, sx.round() as usize);
        light = 0.9 * light + 0.19f64.sqrt() * rng.normal();
        let backdrop = base + cfg.flicker * light;
        let filled = meter.left + (level * meter.width as f64).round() as usize;
        let bar = 0.45 + 0.5 * level;
        for (y, &row) in rows.iter().enumerate() {
            for (x, &col) in cols.iter().enumerate() {
                let mut v = if r.contains(y, x) {
                    if meter.contains(y, x) && x < filled {
                        bar
                    } else {
                        0.08
                    }
                } else if (py..py + SPRITE).contains(&y) && (px..px + SPRITE).contains(&x) {
                    sprite_level
                } else {
                    backdrop + texture * (TAU * (col + scroll * t)).sin() * row
                };
                if cfg.noise > 0.0 {
                    v += cfg.noise * rng.normal();
                }
                data.push(dequantize(quantize(v as f32)));
            }
        }
    }
    Tensor::from_vec(&[latent.len(), FRAME_HEIGHT, FRAME_WIDTH], data)
}

/// All videos of the corpus, in index order.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Vec<Clip>, Vec<AnnotationTrace>)> {
    cfg.validate()?;
    let mut clips = Vec::with_capacity(cfg.num_videos);
    let mut traces = Vec::with_capacity(cfg.num_videos);
    for i in 0..cfg.num_videos {
        let v = synth_video(cfg, i)?;
        clips.push(v.clip);
        traces.push(v.trace);
    }
    Ok((clips, traces))
}

/// Mean intensity of `region` in every frame of `clip`.
pub fn region_means(clip: &Clip, region: &Region) -> Vec<f64> {
    (0..clip.frame_count())
        .map(|i| {
            let f = clip.frame(i);
            let mut sum = 0.0;
            for y in region.top..region.top + region.height {
                for x in region.left..region.left + region.width {
                    sum += f[y * FRAME_WIDTH + x] as f64;
                }
            }
            sum / region.area() as f64
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
