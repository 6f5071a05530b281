//! Feature-point recovery after tracking collapse.
//!
//! The point count of every frame is compared against a fraction of the
//! baseline count. When it falls below, the last healthy centroid is frozen
//! and the tracker is re-run every `reacquire_interval_frames` frames. Probes
//! whose candidate set clears the count threshold are scored by the distance
//! of their centroid from the frozen one; the first probe that scores worse
//! than its predecessor ends the search, and the predecessor's point set
//! becomes the track from then on.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::LandmarkFrame;

pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.6;
pub const DEFAULT_REACQUIRE_INTERVAL: usize = 36;

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("centroid of an empty point set")]
    EmptyPointSet,
    #[error("non-finite coordinate in point set")]
    NonFinite,
    #[error("threshold fraction must be in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("reacquire interval must be at least 1 frame")]
    InvalidInterval,
    #[error("empty track")]
    EmptyTrack,
    #[error("baseline frame {0} has no points")]
    EmptyBaseline(usize),
    #[error("tracker produced no candidate for frame {0}")]
    TrackerFailed(usize),
    #[error("writing recovery log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
}

pub fn centroid(points: &[(f64, f64)]) -> Result<Centroid, RecoveryError> {
    if points.is_empty() {
        return Err(RecoveryError::EmptyPointSet);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in points {
        if !(x.is_finite() && y.is_finite()) {
            return Err(RecoveryError::NonFinite);
        }
        sx += x;
        sy += y;
    }
    let n = points.len() as f64;
    Ok(Centroid { x: sx / n, y: sy / n })
}

fn frame_centroid(frame: &LandmarkFrame) -> Result<Centroid, RecoveryError> {
    centroid(&frame.coords().collect::<Vec<_>>())
}

/// Centroid deviation ε between the reacquired centroid `mu` and the frozen
/// one `sigma`, in pixels.
pub fn centroid_rmse(mu: Centroid, sigma: Centroid) -> f64 {
    (mu.x - sigma.x).hypot(mu.y - sigma.y)
}

/// The deviation written as a root-mean over `n` per-point terms, each of
/// which is the same centroid difference. Equal to [`centroid_rmse`] for any
/// `n >= 1`; kept for checking that collapse numerically.
pub fn centroid_rmse_over_points(mu: Centroid, sigma: Centroid, n: usize) -> f64 {
    let term = (mu.x - sigma.x).powi(2) + (mu.y - sigma.y).powi(2);
    let sum: f64 = (0..n).map(|_| term).sum();
    (sum / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Normal,
    AwaitingReacquire,
    Probing,
    Settled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryState {
    /// Points in a healthy frame. Zero means "take it from the first frame".
    pub baseline_count: usize,
    pub threshold_fraction: f64,
    pub reacquire_interval_frames: usize,
    pub phase: Phase,
    pub old_centroid: Option<Centroid>,
    pub rmse_history: Vec<(usize, f64)>,
    pub failure_frame: Option<usize>,
    /// Frame at which the search ended; the tracker is not run past it.
    pub settle_frame: Option<usize>,
    /// Frame of the probe whose point set was kept (the ε minimum).
    pub settled_probe_frame: Option<usize>,
}

impl Default for RecoveryState {
    fn default() -> Self {
        Self {
            baseline_count: 0,
            threshold_fraction: DEFAULT_THRESHOLD_FRACTION,
            reacquire_interval_frames: DEFAULT_REACQUIRE_INTERVAL,
            phase: Phase::Normal,
            old_centroid: None,
            rmse_history: Vec::new(),
            failure_frame: None,
            settle_frame: None,
            settled_probe_frame: None,
        }
    }
}

impl RecoveryState {
    pub fn new(threshold_fraction: f64, reacquire_interval_frames: usize) -> Result<Self, RecoveryError> {
        if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
            return Err(RecoveryError::InvalidThreshold(threshold_fraction));
        }
        if reacquire_interval_frames == 0 {
            return Err(RecoveryError::InvalidInterval);
        }
        Ok(Self { threshold_fraction, reacquire_interval_frames, ..Self::default() })
    }

    pub fn with_baseline(mut self, baseline_count: usize) -> Self {
        self.baseline_count = baseline_count;
        self
    }
}

/// `true` when `current_count` is strictly below the threshold.
pub fn should_reacquire(current_count: usize, state: &RecoveryState) -> bool {
    (current_count as f64) < state.threshold_fraction * state.baseline_count as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryEventKind {
    FailureDetected,
    Reacquired,
    ProbeRejected,
    SettledAtMinima,
}

impl RecoveryEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FailureDetected => "FailureDetected",
            Self::Reacquired => "Reacquired",
            Self::ProbeRejected => "ProbeRejected",
            Self::SettledAtMinima => "SettledAtMinima",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEvent {
    pub kind: RecoveryEventKind,
    pub frame_idx: usize,
    pub epsilon: Option<f64>,
}

/// Source of candidate point sets when the tracker is re-applied.
pub trait ReacquisitionSource {
    fn reacquire(&mut self, frame_idx: usize) -> Option<LandmarkFrame>;
}

impl<F: FnMut(usize) -> Option<LandmarkFrame>> ReacquisitionSource for F {
    fn reacquire(&mut self, frame_idx: usize) -> Option<LandmarkFrame> {
        self(frame_idx)
    }
}

/// Replays precomputed candidate frames, keyed by frame index.
#[derive(Debug, Clone, Default)]
pub struct ReplayTracker {
    frames: BTreeMap<usize, LandmarkFrame>,
    calls: Vec<usize>,
}

impl ReplayTracker {
    pub fn new(frames: impl IntoIterator<Item = LandmarkFrame>) -> Self {
        Self { frames: frames.into_iter().map(|f| (f.frame_idx, f)).collect(), calls: Vec::new() }
    }

    /// Frames the tracker has been asked for, in call order.
    pub fn calls(&self) -> &[usize] {
        &self.calls
    }
}

impl ReacquisitionSource for ReplayTracker {
    fn reacquire(&mut self, frame_idx: usize) -> Option<LandmarkFrame> {
        self.calls.push(frame_idx);
        self.frames.get(&frame_idx).cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameSource {
    Original,
    CarriedForward,
    Reacquired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    pub track: Vec<LandmarkFrame>,
    /// Where each frame of `track` came from.
    pub provenance: Vec<FrameSource>,
    pub events: Vec<RecoveryEvent>,
    pub state: RecoveryState,
}

impl RecoveryOutcome {
    pub fn settled(&self) -> bool {
        self.state.phase == Phase::Settled
    }
}

struct Probe {
    frame: usize,
    epsilon: f64,
    points: LandmarkFrame,
}

pub fn run_recovery<T: ReacquisitionSource + ?Sized>(
    tracker: &mut T,
    frames: &[LandmarkFrame],
    mut state: RecoveryState,
) -> Result<RecoveryOutcome, RecoveryError> {
    let first = frames.first().ok_or(RecoveryError::EmptyTrack)?;
    if state.baseline_count == 0 {
        state.baseline_count = first.len();
    }
    if state.baseline_count == 0 {
        return Err(RecoveryError::EmptyBaseline(first.frame_idx));
    }

    let mut track = Vec::with_capacity(frames.len());
    let mut provenance = Vec::with_capacity(frames.len());
    let mut events = Vec::new();
    let mut last_healthy: Option<&LandmarkFrame> = None;
    let mut next_probe = 0usize;
    let mut best: Option<Probe> = None;
    let mut settled: Option<LandmarkFrame> = None;

    for frame in frames {
        if state.phase == Phase::Normal {
            if !should_reacquire(frame.len(), &state) {
                last_healthy = Some(frame);
                track.push(frame.clone());
                provenance.push(FrameSource::Original);
                continue;
            }
            // A track that starts below threshold has no healthy frame to
            // freeze; keep it as is.
            let Some(healthy) = last_healthy else {
                track.push(frame.clone());
                provenance.push(FrameSource::Original);
                continue;
            };
            state.old_centroid = Some(frame_centroid(healthy)?);
            state.failure_frame = Some(frame.frame_idx);
            state.rmse_history.push((frame.frame_idx, 0.0));
            state.phase = Phase::AwaitingReacquire;
            next_probe = frame.frame_idx + state.reacquire_interval_frames;
            events.push(RecoveryEvent {
                kind: RecoveryEventKind::FailureDetected,
                frame_idx: frame.frame_idx,
                epsilon: None,
            });
        }

        while state.phase != Phase::Settled && next_probe <= frame.frame_idx {
            let probe_frame = next_probe;
            next_probe += state.reacquire_interval_frames;
            let candidate = tracker.reacquire(probe_frame).ok_or(RecoveryError::TrackerFailed(probe_frame))?;
            if should_reacquire(candidate.len(), &state) {
                events.push(RecoveryEvent {
                    kind: RecoveryEventKind::ProbeRejected,
                    frame_idx: probe_frame,
                    epsilon: None,
                });
                continue;
            }
            let sigma = state.old_centroid.expect("frozen at failure");
            let epsilon = centroid_rmse(frame_centroid(&candidate)?, sigma);
            state.rmse_history.push((probe_frame, epsilon));
            state.phase = Phase::Probing;
            events.push(RecoveryEvent {
                kind: RecoveryEventKind::Reacquired,
                frame_idx: probe_frame,
                epsilon: Some(epsilon),
            });
            match best.take() {
                Some(prev) if epsilon > prev.epsilon => {
                    state.phase = Phase::Settled;
                    state.settle_frame = Some(probe_frame);
                    state.settled_probe_frame = Some(prev.frame);
                    events.push(RecoveryEvent {
                        kind: RecoveryEventKind::SettledAtMinima,
                        frame_idx: probe_frame,
                        epsilon: Some(prev.epsilon),
                    });
                    settled = Some(prev.points);
                }
                _ => best = Some(Probe { frame: probe_frame, epsilon, points: candidate }),
            }
        }

        match &settled {
            Some(points) if state.settle_frame.is_some_and(|s| frame.frame_idx >= s) => {
                track.push(LandmarkFrame::new(frame.frame_idx, points.points.clone()));
                provenance.push(FrameSource::Reacquired);
            }
            _ => {
                let healthy = last_healthy.expect("set before failure");
                track.push(LandmarkFrame::new(frame.frame_idx, healthy.points.clone()));
                provenance.push(FrameSource::CarriedForward);
            }
        }
    }

    Ok(RecoveryOutcome { track, provenance, events, state })
}

/// Writes events as `kind,frame,epsilon` CSV; epsilon is empty when absent.
pub fn write_recovery_log<W: Write>(mut out: W, events: &[RecoveryEvent]) -> Result<(), RecoveryError> {
    writeln!(out, "kind,frame,epsilon")?;
    for e in events {
        match e.epsilon {
            Some(eps) => writeln!(out, "{},{},{}", e.kind.as_str(), e.frame_idx, eps)?,
            None => writeln!(out, "{},{},", e.kind.as_str(), e.frame_idx)?,
        }
    }
    Ok(())
}
