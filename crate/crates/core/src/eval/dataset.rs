//! Labeled segment datasets and the AFD1 container.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::nn::arch::{FRAME_HEIGHT, FRAME_WIDTH, SEGMENT_FRAMES};
use crate::tensor::{read_u32, Tensor};
use crate::traces::{
    align_to_frames, label_window, normalize_trace, window_annotation, AnnotationTrace, ArousalClass, LabelingConfig,
};
use crate::video::{Clip, FRAME_PIXELS, WINDOW_PIXELS};

pub const DATASET_MAGIC: &[u8; 4] = b"AFD1";
pub const DATASET_VERSION: u32 = 1;
/// Record layout: u32 video, u32 window, u8 label, `[8,72,128]` blob, f32 value.
pub const LAYOUT_WINDOW_F32: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub video_id: String,
    /// Mean of the normalized trace (the split point).
    pub mean_value: f64,
    pub raw_min: f64,
    pub raw_max: f64,
    /// Complete windows in the clip, labeled or not.
    pub windows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    /// Index into [`LabeledDataset::videos`].
    pub video: u32,
    pub window: u32,
    /// Low or High, never Uncertain.
    pub label: ArousalClass,
    pub window_value: f64,
    slot: u32,
}

impl Record {
    pub fn class_index(&self) -> usize {
        self.label.index().expect("records are never uncertain")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DatasetCounts {
    pub windows: usize,
    pub kept: usize,
    pub uncertain: usize,
    pub low: usize,
    pub high: usize,
}

/// Segments labeled Low/High for one epsilon. Frames of each kept window
/// live in a shared pool, so datasets relabeled at other epsilons share them.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub epsilon: f64,
    pub videos: Vec<VideoEntry>,
    /// Videos left out, with the reason.
    pub excluded: Vec<(String, String)>,
    records: Vec<Record>,
    frames: Arc<Vec<f32>>,
}

impl LabeledDataset {
    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `[8, 72, 128]` frames of a record.
    pub fn window(&self, r: &Record) -> &[f32] {
        let s = r.slot as usize * WINDOW_PIXELS;
        &self.frames[s..s + WINDOW_PIXELS]
    }

    /// Final frame of a record's window.
    pub fn last_frame(&self, r: &Record) -> &[f32] {
        &self.window(r)[(SEGMENT_FRAMES - 1) * FRAME_PIXELS..]
    }

    /// Model input for a record: the last frame or the whole window.
    pub fn input(&self, r: &Record, single_frame: bool) -> &[f32] {
        if single_frame {
            self.last_frame(r)
        } else {
            self.window(r)
        }
    }

    pub fn video_id(&self, r: &Record) -> &str {
        &self.videos[r.video as usize].video_id
    }

    pub fn counts(&self) -> DatasetCounts {
        let windows = self.videos.iter().map(|v| v.windows).sum();
        let high = self.records.iter().filter(|r| r.label == ArousalClass::High).count();
        DatasetCounts {
            windows,
            kept: self.records.len(),
            uncertain: windows - self.records.len(),
            low: self.records.len() - high,
            high,
        }
    }

    /// Records per video ordinal.
    pub fn records_per_video(&self) -> Vec<usize> {
        let mut n = vec![0; self.videos.len()];
        for r in &self.records {
            n[r.video as usize] += 1;
        }
        n
    }

    /// Relabels at a larger epsilon. Windows dropped at the current epsilon
    /// cannot come back, so a smaller epsilon is an error.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<LabeledDataset> {
        let cfg = LabelingConfig::with_epsilon(epsilon)?;
        if epsilon < self.epsilon {
            return Err(Error::Config(format!(
                "cannot relabel a dataset built at epsilon {} down to {epsilon}",
                self.epsilon
            )));
        }
        let records = self
            .records
            .iter()
            .filter_map(|r| {
                let mean = self.videos[r.video as usize].mean_value;
                let l = label_window(r.window_value, mean, &cfg);
                (l.class != ArousalClass::Uncertain).then_some(Record { label: l.class, ..*r })
            })
            .collect();
        Ok(LabeledDataset {
            epsilon,
            videos: self.videos.clone(),
            excluded: self.excluded.clone(),
            records,
            frames: Arc::clone(&self.frames),
        })
    }

    /// Sidecar manifest describing epsilon, counts and the video table.
    pub fn manifest(&self) -> Manifest {
        let c = self.counts();
        let mut m = Manifest::new();
        m.set("format", "AFD1")
            .set("version", DATASET_VERSION)
            .set("epsilon", self.epsilon)
            .set("segments", self.records.len())
            .set("windows", c.windows)
            .set("uncertain_dropped", c.uncertain)
            .set("low", c.low)
            .set("high", c.high)
            .set("videos", self.videos.len());
        for (i, v) in self.videos.iter().enumerate() {
            m.set(format!("video.{i}.id"), &v.video_id)
                .set(format!("video.{i}.mean"), v.mean_value)
                .set(format!("video.{i}.raw_min"), v.raw_min)
                .set(format!("video.{i}.raw_max"), v.raw_max)
                .set(format!("video.{i}.windows"), v.windows);
        }
        for (i, (id, why)) in self.excluded.iter().enumerate() {
            m.set(format!("excluded.{i}.id"), id).set(format!("excluded.{i}.reason"), why);
        }
        m
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        w.write_all(&LAYOUT_WINDOW_F32.to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.video.to_le_bytes())?;
            w.write_all(&r.window.to_le_bytes())?;
            w.write_all(&[r.class_index() as u8])?;
            let t = Tensor::from_vec(&[SEGMENT_FRAMES, FRAME_HEIGHT, FRAME_WIDTH], self.window(r).to_vec())?;
            t.write_blob(w)?;
            w.write_all(&(r.window_value as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads records; the video table and epsilon come from `manifest`.
    pub fn read_from<R: Read>(r: &mut R, manifest: &Manifest) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let count = read_u32(r)? as usize;
        let layout = read_u32(r)?;
        if layout != LAYOUT_WINDOW_F32 {
            return Err(Error::Format(format!("unknown record layout {layout}")));
        }
        let epsilon: f64 = manifest.parse_value("epsilon")?;
        let nv: usize = manifest.parse_value("videos")?;
        let mut videos = Vec::with_capacity(nv);
        for i in 0..nv {
            videos.push(VideoEntry {
                video_id: manifest.require(&format!("video.{i}.id"))?.to_string(),
                mean_value: manifest.parse_value(&format!("video.{i}.mean"))?,
                raw_min: manifest.parse_value(&format!("video.{i}.raw_min"))?,
                raw_max: manifest.parse_value(&format!("video.{i}.raw_max"))?,
                windows: manifest.parse_value(&format!("video.{i}.windows"))?,
            });
        }
        let mut excluded = Vec::new();
        while let Some(id) = manifest.get(&format!("excluded.{}.id", excluded.len())) {
            let why = manifest
                .get(&format!("excluded.{}.reason", excluded.len()))
                .unwrap_or_default();
            excluded.push((id.to_string(), why.to_string()));
        }
        let expect = [SEGMENT_FRAMES, FRAME_HEIGHT, FRAME_WIDTH];
        let mut frames = Vec::with_capacity(count * WINDOW_PIXELS);
        let mut records = Vec::with_capacity(count);
        for slot in 0..count {
            let video = read_u32(r)?;
            let window = read_u32(r)?;
            let mut label = [0u8; 1];
            r.read_exact(&mut label)?;
            let t = Tensor::read_blob(r)?;
            if t.shape() != expect {
                return Err(Error::Format(format!("segment {slot} has shape {:?}", t.shape())));
            }
            let mut v = [0u8; 4];
            r.read_exact(&mut v)?;
            if video as usize >= nv {
                return Err(Error::Format(format!("segment {slot} names video {video} of {nv}")));
            }
            let label = ArousalClass::from_index(label[0] as usize).map_err(|e| Error::Format(e.to_string()))?;
            frames.extend_from_slice(t.data());
            records.push(Record {
                video,
                window,
                label,
                window_value: f32::from_le_bytes(v) as f64,
                slot: slot as u32,
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after the last segment".into()));
        }
        Ok(Self {
            epsilon,
            videos,
            excluded,
            records,
            frames: Arc::new(frames),
        })
    }

    /// Writes `path` and its sidecar manifest (`path` + `.manifest`).
    pub fn save(&self, path: &Path, extra: &Manifest) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        let mut m = self.manifest();
        for (k, v) in extra.entries() {
            m.set(k.clone(), v);
        }
        m.save(&sidecar_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = Manifest::load(&sidecar_path(path))?;
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, &manifest)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Accumulates videos into a dataset one at a time, so a corpus never has
/// to be resident twice.
#[derive(Debug)]
pub struct DatasetBuilder {
    cfg: LabelingConfig,
    videos: Vec<VideoEntry>,
    excluded: Vec<(String, String)>,
    records: Vec<Record>,
    frames: Vec<f32>,
}

impl DatasetBuilder {
    pub fn new(epsilon: f64) -> Result<Self> {
        Ok(Self {
            cfg: LabelingConfig::with_epsilon(epsilon)?,
            videos: Vec::new(),
            excluded: Vec::new(),
            records: Vec::new(),
            frames: Vec::new(),
        })
    }

    /// Labels every window of `clip`. Degenerate traces and videos with no
    /// labeled window are excluded with a warning rather than failing.
    pub fn add_video(&mut self, clip: &Clip, trace: &AnnotationTrace) -> Result<()> {
        if clip.video_id != trace.video_id {
            return Err(Error::Pairing(format!(
                "clip `{}` paired with trace `{}`",
                clip.video_id, trace.video_id
            )));
        }
        let norm = match normalize_trace(trace) {
            Ok(n) => n,
            Err(e @ Error::DegenerateTrace(_)) => {
                warn!("excluding {}: {e}", clip.video_id);
                self.excluded.push((clip.video_id.clone(), "constant trace".into()));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let per_frame = align_to_frames(&norm, clip.frame_count(), clip.frame_rate)?;
        let windows = clip.segment_count();
        let ordinal = self.videos.len() as u32;
        let before = self.records.len();
        for w in 0..windows {
            let start = w * self.cfg.window_frames;
            let value = window_annotation(&per_frame, start, start + self.cfg.window_frames)?;
            let label = label_window(value, norm.mean_value, &self.cfg);
            if label.class == ArousalClass::Uncertain {
                continue;
            }
            let slot = (self.frames.len() / WINDOW_PIXELS) as u32;
            self.frames.extend_from_slice(clip.window(w));
            self.records.push(Record {
                video: ordinal,
                window: w as u32,
                label: label.class,
                window_value: value,
                slot,
            });
        }
        let kept = self.records.len() - before;
        if kept == 0 {
            warn!("excluding {}: no window outside the uncertainty band", clip.video_id);
            self.excluded.push((clip.video_id.clone(), "no labeled windows".into()));
            return Ok(());
        }
        info!(
            "{}: {kept} of {windows} windows labeled at epsilon {}",
            clip.video_id, self.cfg.epsilon
        );
        self.videos.push(VideoEntry {
            video_id: clip.video_id.clone(),
            mean_value: norm.mean_value,
            raw_min: norm.raw_min,
            raw_max: norm.raw_max,
            windows,
        });
        Ok(())
    }

    pub fn finish(self) -> LabeledDataset {
        LabeledDataset {
            epsilon: self.cfg.epsilon,
            videos: self.videos,
            excluded: self.excluded,
            records: self.records,
            frames: Arc::new(self.frames),
        }
    }
}

/// Pairs clips with traces by video id and labels every window.
pub fn build_dataset(clips: &[Clip], traces: &[AnnotationTrace], epsilon: f64) -> Result<LabeledDataset> {
    let by_id: HashMap<&str, &AnnotationTrace> = traces.iter().map(|t| (t.video_id.as_str(), t)).collect();
    if by_id.len() != traces.len() {
        return Err(Error::Pairing("duplicate trace video ids".into()));
    }
    if clips.len() != traces.len() {
        return Err(Error::Pairing(format!("{} clips but {} traces", clips.len(), traces.len())));
    }
    let mut b = DatasetBuilder::new(epsilon)?;
    for clip in clips {
        let trace = by_id
            .get(clip.video_id.as_str())
            .ok_or_else(|| Error::Pairing(format!("no trace for clip `{}`", clip.video_id)))?;
        b.add_video(clip, trace)?;
    }
    let ds = b.finish();
    let c = ds.counts();
    info!(
        "epsilon {}: {} of {} windows kept, {} uncertain dropped",
        epsilon, c.kept, c.windows, c.uncertain
    );
    Ok(ds)
}
