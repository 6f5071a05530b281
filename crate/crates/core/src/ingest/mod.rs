//! Input data model and loaders.
//!
//! Everything the pipeline consumes arrives as CSV: landmark tracks
//! (`frame,point_id,x,y`), per-point intensity traces (`frame,point_id,r,g,b`)
//! and ground truth (`source_id,hr_bpm`). The [`synth`] submodule produces
//! the same structures from a scenario description with known ground truth.

mod csv_io;
pub mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use csv_io::{
    load_ground_truth, load_landmark_track, load_rgb_traces, read_ground_truth,
    read_landmark_track, read_rgb_traces, write_ground_truth, write_landmark_track,
    write_rgb_traces,
};
pub use synth::{
    synth_scenario, DropoutEvent, EventShape, FlickerSpec, IlluminationEvent, SynthOutput, SynthScenario,
};

/// Lowest heart rate accepted anywhere in the pipeline, in bpm.
pub const MIN_HR_BPM: f64 = 40.0;
/// Highest heart rate accepted anywhere in the pipeline, in bpm.
pub const MAX_HR_BPM: f64 = 240.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("line {line}: frame {frame} appears after frame {previous}")]
    NonMonotoneFrame { line: u64, frame: usize, previous: usize },
    #[error("line {line}: duplicate point {point_id} in frame {frame}")]
    DuplicatePoint { line: u64, frame: usize, point_id: u32 },
    #[error("point {point_id}, frame {frame}: non-finite {channel} sample")]
    NonFinite { point_id: u32, frame: usize, channel: &'static str },
    #[error("point {point_id}: frames are not contiguous (expected {expected}, found {found})")]
    NonContiguous { point_id: u32, expected: usize, found: usize },
    #[error("ragged traces: point {point_id} has {len} samples, expected {expected}")]
    Ragged { point_id: u32, len: usize, expected: usize },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("window [{start}, {end}) is outside the track (frames {first}..={last})")]
    WindowOutOfBounds { start: usize, end: usize, first: usize, last: usize },
    #[error("empty window [{start}, {end})")]
    EmptyWindow { start: usize, end: usize },
    #[error("heart rate {0} bpm outside [40, 240]")]
    HeartRateOutOfRange(f64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// One tracked feature point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPoint {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

/// All visible feature points of one video frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LandmarkFrame {
    pub frame_idx: usize,
    pub points: Vec<LandmarkPoint>,
}

impl LandmarkFrame {
    pub fn new(frame_idx: usize, points: Vec<LandmarkPoint>) -> Self {
        Self { frame_idx, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().map(|p| (p.x, p.y))
    }
}

/// Red/green/blue intensity series of one feature-point region.
///
/// `start_frame` is the video frame of the first sample; samples are
/// contiguous from there on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbTrace {
    pub point_id: u32,
    pub fps: f64,
    pub start_frame: usize,
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
}

impl RgbTrace {
    pub fn new(
        point_id: u32,
        fps: f64,
        start_frame: usize,
        r: Vec<f64>,
        g: Vec<f64>,
        b: Vec<f64>,
    ) -> Result<Self, IngestError> {
        let trace = Self { point_id, fps, start_frame, r, g, b };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(IngestError::InvalidTrace(format!(
                "point {}: fps must be positive, got {}",
                self.point_id, self.fps
            )));
        }
        let n = self.r.len();
        if self.g.len() != n || self.b.len() != n {
            return Err(IngestError::InvalidTrace(format!(
                "point {}: channel lengths differ (r={}, g={}, b={})",
                self.point_id,
                n,
                self.g.len(),
                self.b.len()
            )));
        }
        if n < 2 {
            return Err(IngestError::InvalidTrace(format!(
                "point {}: need at least 2 samples, got {n}",
                self.point_id
            )));
        }
        for (name, ch) in [("r", &self.r), ("g", &self.g), ("b", &self.b)] {
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(IngestError::NonFinite {
                    point_id: self.point_id,
                    frame: self.start_frame + i,
                    channel: name,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    /// One past the last frame covered.
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.len()
    }

    /// Samples covering frames `[start, end)`, clipped to what the trace holds.
    pub fn slice_frames(&self, start: usize, end: usize) -> Option<RgbTrace> {
        let lo = start.max(self.start_frame);
        let hi = end.min(self.end_frame());
        if hi <= lo + 1 {
            return None;
        }
        let (a, b) = (lo - self.start_frame, hi - self.start_frame);
        Some(RgbTrace {
            point_id: self.point_id,
            fps: self.fps,
            start_frame: lo,
            r: self.r[a..b].to_vec(),
            g: self.g[a..b].to_vec(),
            b: self.b[a..b].to_vec(),
        })
    }
}

/// Reference heart rate for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub source_id: String,
    pub hr_bpm: Vec<f64>,
}

impl GroundTruth {
    pub fn scalar(source_id: impl Into<String>, hr_bpm: f64) -> Result<Self, IngestError> {
        Self::series(source_id, vec![hr_bpm])
    }

    pub fn series(source_id: impl Into<String>, hr_bpm: Vec<f64>) -> Result<Self, IngestError> {
        for &hr in &hr_bpm {
            check_hr_range(hr)?;
        }
        Ok(Self { source_id: source_id.into(), hr_bpm })
    }

    /// Window-level value: the mean of the recorded series.
    pub fn mean_bpm(&self) -> f64 {
        self.hr_bpm.iter().sum::<f64>() / self.hr_bpm.len() as f64
    }
}

pub(crate) fn check_hr_range(hr: f64) -> Result<(), IngestError> {
    if !(MIN_HR_BPM..=MAX_HR_BPM).contains(&hr) {
        return Err(IngestError::HeartRateOutOfRange(hr));
    }
    Ok(())
}

pub type TraceSet = BTreeMap<u32, RgbTrace>;

/// Frames with `start_frame <= frame_idx < end_frame`.
pub fn extract_window(
    frames: &[LandmarkFrame],
    start_frame: usize,
    end_frame: usize,
) -> Result<Vec<LandmarkFrame>, IngestError> {
    if start_frame >= end_frame {
        return Err(IngestError::EmptyWindow { start: start_frame, end: end_frame });
    }
    let (first, last) = match (frames.first(), frames.last()) {
        (Some(f), Some(l)) => (f.frame_idx, l.frame_idx),
        _ => {
            return Err(IngestError::WindowOutOfBounds {
                start: start_frame,
                end: end_frame,
                first: 0,
                last: 0,
            })
        }
    };
    if start_frame < first || end_frame > last + 1 {
        return Err(IngestError::WindowOutOfBounds {
            start: start_frame,
            end: end_frame,
            first,
            last,
        });
    }
    Ok(frames
        .iter()
        .filter(|f| (start_frame..end_frame).contains(&f.frame_idx))
        .cloned()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(n: usize) -> Vec<LandmarkFrame> {
        (0..n)
            .map(|i| LandmarkFrame::new(i, vec![LandmarkPoint { id: 0, x: 1.0, y: 2.0 }]))
            .collect()
    }

    #[test]
    fn window_counts() {
        let t = track(3000);
        assert_eq!(extract_window(&t, 306, 2135).unwrap().len(), 1829);
        let one = extract_window(&t, 42, 43).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].frame_idx, 42);
    }

    #[test]
    fn window_out_of_bounds() {
        let t = track(100);
        assert!(matches!(
            extract_window(&t, 306, 2135),
            Err(IngestError::WindowOutOfBounds { .. })
        ));
        assert!(matches!(extract_window(&t, 5, 5), Err(IngestError::EmptyWindow { .. })));
    }

    #[test]
    fn trace_rejects_nan() {
        let err = RgbTrace::new(3, 61.0, 10, vec![1.0; 4], vec![1.0, f64::NAN, 1.0, 1.0], vec![1.0; 4])
            .unwrap_err();
        match err {
            IngestError::NonFinite { point_id, frame, channel } => {
                assert_eq!((point_id, frame, channel), (3, 11, "g"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn slice_clips_to_trace() {
        let t = RgbTrace::new(0, 10.0, 5, (0..10).map(f64::from).collect(), vec![0.0; 10], vec![0.0; 10])
            .unwrap();
        let s = t.slice_frames(8, 100).unwrap();
        assert_eq!(s.start_frame, 8);
        assert_eq!(s.r, vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert!(t.slice_frames(0, 6).is_none());
    }

    #[test]
    fn ground_truth_range() {
        assert!(GroundTruth::scalar("a", 72.0).is_ok());
        assert!(GroundTruth::scalar("a", 300.0).is_err());
        assert!(GroundTruth::scalar("a", 39.9).is_err());
    }
}
