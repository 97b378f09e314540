//! Continuous arousal traces: parsing, min-max normalization, frame
//! alignment and window labeling.

use std::io::BufRead;

use crate::error::{Error, Result};

pub const ANNOTATION_RATE: f64 = 4.0;
pub const FRAME_RATE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTrace {
    pub video_id: String,
    /// `(time in seconds, raw value)`, times strictly increasing.
    pub samples: Vec<(f64, f64)>,
    pub nominal_rate: f64,
}

impl AnnotationTrace {
    pub fn new(video_id: impl Into<String>, samples: Vec<(f64, f64)>) -> Result<Self> {
        let t = Self {
            video_id: video_id.into(),
            samples,
            nominal_rate: ANNOTATION_RATE,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Parse {
                line: self.samples.len(),
                message: "a trace needs at least 2 samples".into(),
            });
        }
        for (i, w) in self.samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("time {} does not follow {}", w[1].0, w[0].0),
                });
            }
        }
        if let Some(i) = self
            .samples
            .iter()
            .position(|&(t, v)| !t.is_finite() || !v.is_finite())
        {
            return Err(Error::Parse {
                line: i + 1,
                message: "non-finite sample".into(),
            });
        }
        Ok(())
    }

    /// Writes the `time,value` text form with a header line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("time,value\n");
        for &(t, v) in &self.samples {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }
}

/// Reads `time,value` lines. A first line `time,value` is skipped; blank
/// lines are ignored; CRLF is accepted. Line numbers in errors are 1-based.
pub fn parse_trace<R: BufRead>(video_id: &str, reader: R) -> Result<AnnotationTrace> {
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r').trim();
        if line.is_empty() || (lineno == 1 && line.eq_ignore_ascii_case("time,value")) {
            continue;
        }
        let bad = |message: String| Error::Parse { line: lineno, message };
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected `time,value`, got {line:?}")))?;
        let t: f64 = t.trim().parse().map_err(|_| bad(format!("bad time {t:?}")))?;
        let v: f64 = v.trim().parse().map_err(|_| bad(format!("bad value {v:?}")))?;
        if !t.is_finite() || !v.is_finite() {
            return Err(bad("non-finite field".into()));
        }
        if let Some(&(prev, _)) = samples.last() {
            if t <= prev {
                return Err(bad(format!("time {t} is not after {prev}")));
            }
        }
        samples.push((t, v));
    }
    if samples.len() < 2 {
        return Err(Error::Parse {
            line: 0,
            message: format!("{} samples, need at least 2", samples.len()),
        });
    }
    Ok(AnnotationTrace {
        video_id: video_id.to_string(),
        samples,
        nominal_rate: ANNOTATION_RATE,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTrace {
    pub video_id: String,
    pub samples: Vec<(f64, f64)>,
    /// Mean of the normalized sample values (the class split point).
    pub mean_value: f64,
    pub raw_min: f64,
    pub raw_max: f64,
}

pub fn normalize_trace(t: &AnnotationTrace) -> Result<NormalizedTrace> {
    t.validate()?;
    let (lo, hi) = t
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, v)| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(Error::DegenerateTrace(t.video_id.clone()));
    }
    let samples: Vec<(f64, f64)> = t
        .samples
        .iter()
        .map(|&(time, v)| (time, (v - lo) / (hi - lo)))
        .collect();
    let mean_value = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    Ok(NormalizedTrace {
        video_id: t.video_id.clone(),
        samples,
        mean_value,
        raw_min: lo,
        raw_max: hi,
    })
}

/// Per-frame hold-last values, with the index of the sample each frame holds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAlignment {
    pub values: Vec<f64>,
    pub source: Vec<usize>,
}

/// Frame `i` (at `i / frame_rate` seconds) takes the latest sample at or
/// before it; frames before the first sample take the first sample.
pub fn align_to_frames(t: &NormalizedTrace, frame_count: usize, frame_rate: f64) -> Result<FrameAlignment> {
    if frame_count == 0 || !(frame_rate > 0.0) {
        return Err(Error::InvalidWindow {
            start: 0,
            end: frame_count,
            frames: frame_count,
        });
    }
    let mut values = Vec::with_capacity(frame_count);
    let mut source = Vec::with_capacity(frame_count);
    let mut j = 0usize;
    for i in 0..frame_count {
        let time = i as f64 / frame_rate;
        while j + 1 < t.samples.len() && t.samples[j + 1].0 <= time {
            j += 1;
        }
        values.push(t.samples[j].1);
        source.push(j);
    }
    Ok(FrameAlignment { values, source })
}

/// Mean of the distinct samples held by the frames in `[start, end)`, each
/// counted once however many frames it covers.
pub fn window_annotation(frames: &FrameAlignment, start: usize, end: usize) -> Result<f64> {
    let n = frames.values.len();
    if start >= end || end > n {
        return Err(Error::InvalidWindow { start, end, frames: n });
    }
    let (mut sum, mut count) = (0.0, 0usize);
    let mut last = None;
    for i in start..end {
        // sources are non-decreasing, so a change marks a new sample
        if last != Some(frames.source[i]) {
            last = Some(frames.source[i]);
            sum += frames.values[i];
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArousalClass {
    Low,
    High,
    Uncertain,
}

impl ArousalClass {
    /// Class index used by the models: 0 Low, 1 High.
    pub fn index(self) -> Option<usize> {
        match self {
            ArousalClass::Low => Some(0),
            ArousalClass::High => Some(1),
            ArousalClass::Uncertain => None,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ArousalClass::Low),
            1 => Ok(ArousalClass::High),
            _ => Err(Error::InvalidLabel { label: i, classes: 2 }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelingConfig {
    pub epsilon: f64,
    pub window_frames: usize,
    pub frame_rate: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            window_frames: 8,
            frame_rate: FRAME_RATE,
        }
    }
}

impl LabelingConfig {
    pub fn with_epsilon(epsilon: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 0.5]", self.epsilon)));
        }
        if self.window_frames == 0 || !(self.frame_rate > 0.0) {
            return Err(Error::Config("window_frames and frame_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentLabel {
    pub class: ArousalClass,
    pub window_value: f64,
}

/// Split at `mean` with an open uncertainty band of half-width epsilon.
/// With epsilon 0 a value equal to the mean is Low.
pub fn label_window(window_value: f64, mean: f64, cfg: &LabelingConfig) -> SegmentLabel {
    let eps = cfg.epsilon;
    let class = if eps == 0.0 {
        if window_value > mean {
            ArousalClass::High
        } else {
            ArousalClass::Low
        }
    } else if window_value >= mean + eps {
        ArousalClass::High
    } else if window_value <= mean - eps {
        ArousalClass::Low
    } else {
        ArousalClass::Uncertain
    };
    SegmentLabel { class, window_value }
}

/// Labels every complete window of a clip with `frame_count` frames.
pub fn label_trace(t: &NormalizedTrace, frame_count: usize, cfg: &LabelingConfig) -> Result<Vec<SegmentLabel>> {
    cfg.validate()?;
    let frames = align_to_frames(t, frame_count, cfg.frame_rate)?;
    (0..frame_count / cfg.window_frames)
        .map(|w| {
            let start = w * cfg.window_frames;
            let v = window_annotation(&frames, start, start + cfg.window_frames)?;
            Ok(label_window(v, t.mean_value, cfg))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(samples: &[(f64, f64)]) -> NormalizedTrace {
        normalize_trace(&AnnotationTrace::new("v", samples.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn parses_two_lines() {
        let t = parse_trace("v", "0.00,10\n0.25,12".as_bytes()).unwrap();
        assert_eq!(t.samples, vec![(0.0, 10.0), (0.25, 12.0)]);
    }

    #[test]
    fn header_and_crlf() {
        let t = parse_trace("v", "time,value\r\n0,1\r\n1,2\r\n".as_bytes()).unwrap();
        assert_eq!(t.samples.len(), 2);
    }

    #[test]
    fn decreasing_time_reports_line() {
        let err = parse_trace("v", "0.5,1\n0.25,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn non_numeric_and_short() {
        assert!(matches!(
            parse_trace("v", "0,1\n0.25,x\n".as_bytes()).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
        assert!(parse_trace("v", "0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn one_minute_at_four_hertz() {
        let text: String = (0..240).map(|i| format!("{},{}\n", i as f64 * 0.25, i % 7)).collect();
        assert_eq!(parse_trace("v", text.as_bytes()).unwrap().samples.len(), 240);
    }

    #[test]
    fn normalize_affine() {
        let n = norm(&[(0.0, 2.0), (1.0, 4.0), (2.0, 6.0)]);
        let v: Vec<f64> = n.samples.iter().map(|s| s.1).collect();
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        assert_eq!(n.mean_value, 0.5);
        assert_eq!((n.raw_min, n.raw_max), (2.0, 6.0));
    }

    #[test]
    fn normalize_identity_and_constant() {
        let n = norm(&[(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(n.samples, vec![(0.0, 0.0), (1.0, 1.0)]);
        let c = AnnotationTrace::new("c", vec![(0.0, 5.0), (1.0, 5.0), (2.0, 5.0)]).unwrap();
        assert!(matches!(normalize_trace(&c), Err(Error::DegenerateTrace(_))));
    }

    #[test]
    fn hold_last_at_thirty_hertz() {
        let n = norm(&[(0.0, 0.2), (0.25, 0.6), (10.0, 0.0), (11.0, 1.0)]);
        let a = align_to_frames(&n, 12, 30.0).unwrap();
        // 0.25 s falls between frames 7 and 8
        let expect_first = n.samples[0].1;
        assert!(a.values[..8].iter().all(|&v| v == expect_first));
        assert!(a.values[8..].iter().all(|&v| v == n.samples[1].1));
    }

    #[test]
    fn frames_before_first_sample_and_past_end() {
        let n = norm(&[(1.0, 3.0), (2.0, 5.0)]);
        let a = align_to_frames(&n, 100, 30.0).unwrap();
        assert!(a.values[..31].iter().all(|&v| v == 0.0));
        assert!(a.values[60..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn window_means() {
        let a = FrameAlignment {
            values: vec![0.2, 0.2, 0.2, 0.6, 0.6, 0.6, 0.6, 0.6],
            source: vec![0, 0, 0, 1, 1, 1, 1, 1],
        };
        assert!((window_annotation(&a, 0, 8).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(window_annotation(&a, 3, 8).unwrap(), 0.6);
        let c = FrameAlignment {
            values: vec![0.4; 8],
            source: vec![3; 8],
        };
        assert_eq!(window_annotation(&c, 0, 8).unwrap(), 0.4);
        assert!(matches!(
            window_annotation(&a, 4, 12),
            Err(Error::InvalidWindow { start: 4, end: 12, frames: 8 })
        ));
    }

    #[test]
    fn equal_consecutive_samples_count_separately() {
        let a = FrameAlignment {
            values: vec![0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.8, 0.8],
            source: vec![0, 0, 0, 1, 1, 1, 2, 2],
        };
        assert!((window_annotation(&a, 0, 8).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn label_examples() {
        let c = |e| LabelingConfig::with_epsilon(e).unwrap();
        assert_eq!(label_window(0.9, 0.5, &c(0.2)).class, ArousalClass::High);
        assert_eq!(label_window(0.55, 0.5, &c(0.1)).class, ArousalClass::Uncertain);
        assert_eq!(label_window(0.5, 0.5, &c(0.0)).class, ArousalClass::Low);
        assert_eq!(label_window(0.75, 0.5, &c(0.25)).class, ArousalClass::High);
        assert_eq!(label_window(0.25, 0.5, &c(0.25)).class, ArousalClass::Low);
    }

    #[test]
    fn epsilon_bounds() {
        assert!(LabelingConfig::with_epsilon(0.51).is_err());
        assert!(LabelingConfig::with_epsilon(-0.01).is_err());
        assert!(LabelingConfig::with_epsilon(0.5).is_ok());
    }

    fn trace_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.01f64..1.0, -50.0f64..50.0), 2..60).prop_map(|steps| {
            let mut t = 0.0;
            steps
                .into_iter()
                .map(|(dt, v)| {
                    let s = (t, v);
                    t += dt;
                    s
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn labels_only_move_into_uncertain(v in 0.0f64..1.0, mean in 0.0f64..1.0, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let a = label_window(v, mean, &LabelingConfig::with_epsilon(lo).unwrap()).class;
            let b = label_window(v, mean, &LabelingConfig::with_epsilon(hi).unwrap()).class;
            prop_assert!(a == b || b == ArousalClass::Uncertain);
        }

        #[test]
        fn normalize_is_idempotent(samples in trace_strategy()) {
            let t = AnnotationTrace::new("p", samples).unwrap();
            if let Ok(n) = normalize_trace(&t) {
                let again = normalize_trace(&AnnotationTrace::new("p", n.samples.clone()).unwrap()).unwrap();
                for (a, b) in n.samples.iter().zip(&again.samples) {
                    prop_assert!((a.1 - b.1).abs() < 1e-12);
                }
                prop_assert!((n.mean_value - again.mean_value).abs() < 1e-12);
            }
        }

        #[test]
        fn alignment_changes_only_at_sample_times(samples in trace_strategy(), frames in 1usize..400) {
            let t = AnnotationTrace::new("p", samples).unwrap();
            if let Ok(n) = normalize_trace(&t) {
                let a = align_to_frames(&n, frames, FRAME_RATE).unwrap();
                for i in 1..frames {
                    if a.source[i] != a.source[i - 1] {
                        let prev = (i - 1) as f64 / FRAME_RATE;
                        let now = i as f64 / FRAME_RATE;
                        let crossed = n.samples.iter().any(|s| s.0 > prev && s.0 <= now);
                        prop_assert!(crossed);
                    }
                }
            }
        }

        #[test]
        fn kept_count_non_increasing(samples in trace_strategy(), frames in 8usize..400) {
            let t = AnnotationTrace::new("p", samples).unwrap();
            if let Ok(n) = normalize_trace(&t) {
                let mut prev = usize::MAX;
                for e in [0.0, 0.05, 0.1, 0.2, 0.35, 0.5] {
                    let kept = label_trace(&n, frames, &LabelingConfig::with_epsilon(e).unwrap())
                        .unwrap()
                        .iter()
                        .filter(|l| l.class != ArousalClass::Uncertain)
                        .count();
                    prop_assert!(kept <= prev);
                    prev = kept;
                }
            }
        }
    }
}
