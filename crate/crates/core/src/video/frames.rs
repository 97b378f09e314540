//! Frame ingestion, grayscale conversion, resizing and segmentation.

use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{read_pnm, RawFrame};
use crate::error::{Error, Result};
use crate::nn::arch::{FRAME_HEIGHT, FRAME_WIDTH, SEGMENT_FRAMES};
use crate::tensor::Tensor;
use crate::traces::FRAME_RATE;

pub const FRAME_PIXELS: usize = FRAME_HEIGHT * FRAME_WIDTH;
pub const WINDOW_PIXELS: usize = SEGMENT_FRAMES * FRAME_PIXELS;

/// A video as grayscale frames at 72x128, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video_id: String,
    /// `[T, 72, 128]`
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl Clip {
    pub fn new(video_id: impl Into<String>, frames: Tensor) -> Result<Self> {
        let video_id = video_id.into();
        match frames.shape() {
            &[t, FRAME_HEIGHT, FRAME_WIDTH] if t >= SEGMENT_FRAMES => {}
            s => {
                return Err(Error::shape(format!(
                    "clip `{video_id}` has shape {s:?}, need [T>={SEGMENT_FRAMES}, {FRAME_HEIGHT}, {FRAME_WIDTH}]"
                )))
            }
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidRange { lo: 0.0, hi: 1.0 });
        }
        Ok(Self {
            video_id,
            frames,
            frame_rate: FRAME_RATE,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames.data()[i * FRAME_PIXELS..(i + 1) * FRAME_PIXELS]
    }

    pub fn segment_count(&self) -> usize {
        self.frame_count() / SEGMENT_FRAMES
    }

    /// The 8 frames of window `w`, back to back.
    pub fn window(&self, w: usize) -> &[f32] {
        &self.frames.data()[w * WINDOW_PIXELS..(w + 1) * WINDOW_PIXELS]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: String,
    pub window_index: usize,
    /// `[8, 72, 128]`
    pub frame_window: Tensor,
    /// `[1, 72, 128]`, equal to `frame_window[7]`.
    pub last_frame: Tensor,
}

/// Non-overlapping 8-frame segments; a trailing remainder is dropped.
pub fn segment_clip(clip: &Clip) -> Vec<Segment> {
    (0..clip.segment_count())
        .map(|w| {
            let window = clip.window(w);
            let last = &window[(SEGMENT_FRAMES - 1) * FRAME_PIXELS..];
            Segment {
                video_id: clip.video_id.clone(),
                window_index: w,
                frame_window: Tensor::from_vec(&[SEGMENT_FRAMES, FRAME_HEIGHT, FRAME_WIDTH], window.to_vec())
                    .expect("window shape"),
                last_frame: Tensor::from_vec(&[1, FRAME_HEIGHT, FRAME_WIDTH], last.to_vec()).expect("frame shape"),
            }
        })
        .collect()
}

/// Rec. 601 luma in `[0, 1]`. Gray input is scaled by 1/255.
pub fn to_grayscale(frame: &RawFrame) -> Vec<f32> {
    match frame.channels {
        3 => frame
            .pixels
            .chunks_exact(3)
            .map(|p| {
                let y = (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0;
                y.clamp(0.0, 1.0) as f32
            })
            .collect(),
        _ => frame.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    }
}

/// Bilinear resize with a corner-aligned grid: output corners sample
/// input corners exactly.
pub fn resize_bilinear_to(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<f32>> {
    if h < 2 || w < 2 || oh < 2 || ow < 2 || src.len() != h * w {
        return Err(Error::shape(format!(
            "cannot resize {} values as {h}x{w} to {oh}x{ow}",
            src.len()
        )));
    }
    if (h, w) == (oh, ow) {
        return Ok(src.to_vec());
    }
    let axis = |n: usize, on: usize| -> Vec<(usize, f64)> {
        (0..on)
            .map(|o| {
                let x = o as f64 * (n - 1) as f64 / (on - 1) as f64;
                let i = (x.floor() as usize).min(n - 2);
                (i, x - i as f64)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, fy) in &ys {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[(y0 + 1) * w..(y0 + 2) * w];
        for &(x0, fx) in &xs {
            let top = r0[x0] as f64 * (1.0 - fx) + r0[x0 + 1] as f64 * fx;
            let bot = r1[x0] as f64 * (1.0 - fx) + r1[x0 + 1] as f64 * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Ok(out)
}

/// Resize to the 72x128 model resolution.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    resize_bilinear_to(src, h, w, FRAME_HEIGHT, FRAME_WIDTH)
}

/// `.pgm` / `.ppm` files of `dir` in lexicographic order.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Ingest {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "ppm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes every frame of `dir`; all must share dimensions.
pub fn load_frames(dir: &Path) -> Result<Vec<RawFrame>> {
    let mut frames: Vec<RawFrame> = Vec::new();
    for path in frame_files(dir)? {
        let f = read_pnm(&path)?;
        check_dims(frames.first().map(|f| (f.height, f.width)), &f, &path)?;
        frames.push(f);
    }
    Ok(frames)
}

fn check_dims(expect: Option<(usize, usize)>, f: &RawFrame, path: &Path) -> Result<()> {
    match expect {
        Some(dims) if dims != (f.height, f.width) => Err(Error::Ingest {
            path: path.to_path_buf(),
            message: format!(
                "frame is {}x{}, earlier frames are {}x{}",
                f.height, f.width, dims.0, dims.1
            ),
        }),
        _ => Ok(()),
    }
}

/// Loads, grays and resizes the frames of `dir` one file at a time.
pub fn ingest_clip(video_id: &str, dir: &Path) -> Result<Clip> {
    let files = frame_files(dir)?;
    if files.len() < SEGMENT_FRAMES {
        return Err(Error::Ingest {
            path: dir.to_path_buf(),
            message: format!("{} frames, need at least {SEGMENT_FRAMES}", files.len()),
        });
    }
    let mut data = Vec::with_capacity(files.len() * FRAME_PIXELS);
    let mut dims = None;
    for path in &files {
        let f = read_pnm(path)?;
        check_dims(dims, &f, path)?;
        dims = Some((f.height, f.width));
        let gray = to_grayscale(&f);
        let small = resize_bilinear(&gray, f.height, f.width).map_err(|e| Error::Ingest {
            path: path.clone(),
            message: e.to_string(),
        })?;
        data.extend(small.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Clip::new(
        video_id,
        Tensor::from_vec(&[files.len(), FRAME_HEIGHT, FRAME_WIDTH], data)?,
    )
}
