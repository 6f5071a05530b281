//! End-to-end estimation for one source: window, recovery, separation,
//! rectification and heart-rate extraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hr::{self, aggregate, select_central_points, HrError, HrEstimate, HrReport, RegionConfig};
use crate::ingest::{extract_window, IngestError, LandmarkFrame, TraceSet};
use crate::recovery::{run_recovery, RecoveryError, RecoveryOutcome, RecoveryState, ReplayTracker};
use crate::rectify::{rectify_trace, RectifiedTrace, RectifyError, DEFAULT_ALPHA, DEFAULT_DELTA, DEFAULT_WARMUP_S};
use crate::separation::{separate, IcaConfig, Nonlinearity, SeparatedSources, SeparationError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("recovery: {0}")]
    Recovery(#[from] RecoveryError),
    #[error("separation, point {point_id} (frames from {start_frame}): {source}")]
    Separation {
        point_id: u32,
        start_frame: usize,
        #[source]
        source: SeparationError,
    },
    #[error("rectify, point {point_id} (frames from {start_frame}): {source}")]
    Rectify {
        point_id: u32,
        start_frame: usize,
        #[source]
        source: RectifyError,
    },
    #[error("hr, point {point_id} (frames from {start_frame}): {source}")]
    Hr {
        point_id: u32,
        start_frame: usize,
        #[source]
        source: HrError,
    },
    #[error("hr: {0}")]
    Selection(HrError),
    #[error("ingest: no trace for point {point_id} over frames [{start}, {end})")]
    MissingTrace { point_id: u32, start: usize, end: usize },
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Ingest(_) | PipelineError::MissingTrace { .. } => "ingest",
            PipelineError::Recovery(_) => "recovery",
            PipelineError::Separation { .. } => "separation",
            PipelineError::Rectify { .. } => "rectify",
            PipelineError::Hr { .. } | PipelineError::Selection(_) => "hr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameWindow {
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryParams {
    pub threshold_fraction: f64,
    pub reacquire_interval_frames: usize,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        let s = RecoveryState::default();
        Self { threshold_fraction: s.threshold_fraction, reacquire_interval_frames: s.reacquire_interval_frames }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlsParams {
    pub alpha: f64,
    pub delta: f64,
    pub warmup_s: f64,
}

impl Default for RlsParams {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, delta: DEFAULT_DELTA, warmup_s: DEFAULT_WARMUP_S }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for Band {
    fn default() -> Self {
        Self { low_hz: hr::DEFAULT_BAND.0, high_hz: hr::DEFAULT_BAND.1 }
    }
}

impl Band {
    pub fn as_tuple(self) -> (f64, f64) {
        (self.low_hz, self.high_hz)
    }
}

/// Optional stages. Turning `rectify` off skips both the separation and the
/// RLS filter, and the heart rate is read from the green channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub recovery: bool,
    pub rectify: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { recovery: true, rectify: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcaParams {
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub nonlinearity: Nonlinearity,
}

impl Default for IcaParams {
    fn default() -> Self {
        let c = IcaConfig::default();
        Self { max_iterations: c.max_iterations, convergence_tol: c.convergence_tol, nonlinearity: c.nonlinearity }
    }
}

/// Which series the heart rate is read from when rectification is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrSource {
    /// The blood-flow component (rectified when that stage is on).
    #[default]
    BloodFlow,
    Pigmentation,
    Residual,
    /// The raw green channel, bypassing separation.
    Green,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub fps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<FrameWindow>,
    pub recovery: RecoveryParams,
    pub rls: RlsParams,
    pub band: Band,
    pub region: RegionConfig,
    pub seed: u64,
    pub stages: StageToggles,
    pub ica: IcaParams,
    /// Analysis segments shorter than this (after warm-up) are skipped.
    pub min_segment_s: f64,
    pub hr_source: HrSource,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fps: 61.0,
            window: None,
            recovery: RecoveryParams::default(),
            rls: RlsParams::default(),
            band: Band::default(),
            region: RegionConfig::default(),
            seed: 0,
            stages: StageToggles::default(),
            ica: IcaParams::default(),
            min_segment_s: 10.0,
            hr_source: HrSource::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if let Some(w) = self.window {
            if w.start_frame >= w.end_frame {
                return bad(format!("window [{}, {}) is empty", w.start_frame, w.end_frame));
            }
        }
        RecoveryState::new(self.recovery.threshold_fraction, self.recovery.reacquire_interval_frames)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        crate::rectify::rls_init(self.rls.alpha, self.rls.delta).map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.rls.warmup_s.is_finite() && self.rls.warmup_s >= 0.0) {
            return bad(format!("warmup_s must be >= 0, got {}", self.rls.warmup_s));
        }
        let Band { low_hz, high_hz } = self.band;
        if !(low_hz > 0.0 && low_hz < high_hz && 2.0 * high_hz < self.fps) {
            return bad(format!("band [{low_hz}, {high_hz}] Hz infeasible at {} fps", self.fps));
        }
        if let RegionConfig::CentralBox { fraction } = self.region {
            if !(fraction.is_finite() && fraction > 0.0) {
                return bad(format!("central box fraction must be > 0, got {fraction}"));
            }
        }
        self.ica_config(0).validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.min_segment_s.is_finite() && self.min_segment_s >= 0.0) {
            return bad(format!("min_segment_s must be >= 0, got {}", self.min_segment_s));
        }
        Ok(())
    }

    fn ica_config(&self, point_id: u32) -> IcaConfig {
        IcaConfig {
            max_iterations: self.ica.max_iterations,
            convergence_tol: self.ica.convergence_tol,
            nonlinearity: self.ica.nonlinearity,
            seed: self.seed.wrapping_add(point_id as u64),
        }
    }

    fn warmup_samples(&self) -> usize {
        if self.stages.rectify {
            (self.rls.warmup_s * self.fps).round() as usize
        } else {
            0
        }
    }
}

/// Everything [`estimate`] needs for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceInput {
    pub track: Vec<LandmarkFrame>,
    pub traces: TraceSet,
    /// Candidate point sets served by the replay tracker on reacquisition.
    pub reacquisition: Option<Vec<LandmarkFrame>>,
}

/// A frame range analysed with one set of point ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Segment {
    fn len(self) -> usize {
        self.end_frame - self.start_frame
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointDiagnostics {
    pub separated: Option<SeparatedSources>,
    pub rectified: Option<RectifiedTrace>,
    pub estimate: HrEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOutput {
    pub report: HrReport,
    pub recovery: Option<RecoveryOutcome>,
    pub segments: Vec<Segment>,
    pub points: Vec<PointDiagnostics>,
    pub flags: Vec<String>,
}

fn analysis_segments(
    window: Segment,
    recovery: Option<&RecoveryOutcome>,
    cfg: &PipelineConfig,
    flags: &mut Vec<String>,
) -> Vec<Segment> {
    let candidates = match recovery.map(|r| &r.state) {
        Some(state) => match (state.failure_frame, state.settle_frame) {
            (Some(fail), Some(settle)) => vec![
                Segment { start_frame: window.start_frame, end_frame: fail },
                Segment { start_frame: settle, end_frame: window.end_frame },
            ],
            (Some(_), None) => {
                flags.push("recovery_unsettled".into());
                vec![window]
            }
            _ => vec![window],
        },
        None => vec![window],
    };
    let min_len = (cfg.min_segment_s * cfg.fps).round() as usize + cfg.warmup_samples();
    let candidates: Vec<Segment> = candidates.into_iter().filter(|s| s.end_frame > s.start_frame).collect();
    let mut kept: Vec<Segment> = candidates.iter().copied().filter(|s| s.len() >= min_len).collect();
    for s in candidates.iter().filter(|s| s.len() < min_len) {
        flags.push(format!("segment_skipped:{}-{}", s.start_frame, s.end_frame));
    }
    if kept.is_empty() {
        if let Some(longest) = candidates.iter().copied().max_by_key(|s| (s.len(), std::cmp::Reverse(s.start_frame))) {
            flags.retain(|f| f != &format!("segment_skipped:{}-{}", longest.start_frame, longest.end_frame));
            flags.push(format!("short_segment_used:{}-{}", longest.start_frame, longest.end_frame));
            kept.push(longest);
        }
    }
    kept
}

fn process_point(
    input: &SourceInput,
    cfg: &PipelineConfig,
    point_id: u32,
    seg: Segment,
) -> Result<PointDiagnostics, PipelineError> {
    let trace = input
        .traces
        .get(&point_id)
        .and_then(|t| t.slice_frames(seg.start_frame, seg.end_frame))
        .ok_or(PipelineError::MissingTrace { point_id, start: seg.start_frame, end: seg.end_frame })?;
    let start_frame = trace.start_frame;
    let band = cfg.band.as_tuple();
    let warmup = cfg.warmup_samples();
    let hr_err = |source| PipelineError::Hr { point_id, start_frame, source };

    let (separated, rectified, signal, low_conf) = if cfg.hr_source == HrSource::Green || !cfg.stages.rectify {
        (None, None, trace.g.clone(), false)
    } else {
        let sep = separate(&trace, &cfg.ica_config(point_id), band)
            .map_err(|source| PipelineError::Separation { point_id, start_frame, source })?;
        let rect = rectify_trace(&sep.blood_flow_impure, &sep.pigmentation_impure, cfg.rls.alpha, cfg.rls.delta)
            .map_err(|source| PipelineError::Rectify { point_id, start_frame, source })?;
        let signal = match cfg.hr_source {
            HrSource::BloodFlow => rect.blood_flow_pure.clone(),
            HrSource::Pigmentation => sep.pigmentation_impure.clone(),
            HrSource::Residual => sep.residual.clone(),
            HrSource::Green => unreachable!(),
        };
        let low = sep.low_confidence;
        (Some(sep), Some(rect), signal, low)
    };
    let usable = signal.get(warmup.min(signal.len())..).unwrap_or_default();
    if usable.len() < hr::MIN_SPECTRAL_SAMPLES {
        return Err(hr_err(HrError::TooShort(usable.len())));
    }
    let peak = hr::estimate_signal(usable, cfg.fps, band).map_err(hr_err)?;
    let estimate = HrEstimate::from_peak(point_id, start_frame, peak, low_conf);
    Ok(PointDiagnostics { separated, rectified, estimate })
}

/// Runs the configured stages over one source. Per-point work runs on the
/// current rayon pool; results are merged in segment and point-id order.
pub fn estimate(input: &SourceInput, cfg: &PipelineConfig) -> Result<EstimateOutput, PipelineError> {
    cfg.validate()?;
    let (first, last) = match (input.track.first(), input.track.last()) {
        (Some(f), Some(l)) => (f.frame_idx, l.frame_idx + 1),
        _ => return Err(PipelineError::Selection(HrError::EmptyTrack)),
    };
    let window = cfg.window.map_or(Segment { start_frame: first, end_frame: last }, |w| Segment {
        start_frame: w.start_frame,
        end_frame: w.end_frame,
    });
    let frames = extract_window(&input.track, window.start_frame, window.end_frame)?;
    let mut flags = Vec::new();

    let recovery = if cfg.stages.recovery {
        let state = RecoveryState::new(cfg.recovery.threshold_fraction, cfg.recovery.reacquire_interval_frames)?;
        let mut tracker = ReplayTracker::new(input.reacquisition.iter().flatten().cloned());
        Some(run_recovery(&mut tracker, &frames, state)?)
    } else {
        None
    };
    let track = recovery.as_ref().map_or(&frames, |r| &r.track);
    let segments = analysis_segments(window, recovery.as_ref(), cfg, &mut flags);

    let mut points = Vec::new();
    let mut dropped = None;
    for &seg in &segments {
        let seg_frames: Vec<LandmarkFrame> = track
            .iter()
            .filter(|f| (seg.start_frame..seg.end_frame).contains(&f.frame_idx))
            .cloned()
            .collect();
        let ids = select_central_points(&seg_frames, &cfg.region).map_err(PipelineError::Selection)?;
        let results: Vec<Result<PointDiagnostics, PipelineError>> =
            ids.par_iter().map(|&id| process_point(input, cfg, id, seg)).collect();
        for r in results {
            match r {
                Ok(p) => points.push(p),
                // A single point whose channels do not separate is dropped;
                // every other failure aborts the source.
                Err(PipelineError::Separation { point_id, start_frame, source }) => {
                    flags.push(format!("point_dropped:{point_id}@{start_frame}:{source}"));
                    dropped.get_or_insert(PipelineError::Separation { point_id, start_frame, source });
                }
                Err(e) => return Err(e),
            }
        }
    }
    if points.is_empty() {
        if let Some(e) = dropped {
            return Err(e);
        }
    }

    if cfg.warmup_samples() > 0 {
        flags.push(format!("rls_warmup_excluded_s:{}", cfg.rls.warmup_s));
    }
    let low = points.iter().filter(|p| p.estimate.low_confidence).count();
    if low > 0 {
        flags.push(format!("low_confidence_points:{low}"));
    }

    let mut report = aggregate(points.iter().map(|p| p.estimate.clone()).collect()).map_err(PipelineError::Selection)?;
    report.region = Some(cfg.region.describe());
    Ok(EstimateOutput { report, recovery, segments, points, flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_scenario, DropoutEvent, SynthScenario};

    fn input(s: &SynthScenario) -> SourceInput {
        let out = synth_scenario(s).unwrap();
        SourceInput { track: out.track, traces: out.traces, reacquisition: Some(out.reacquisition) }
    }

    #[test]
    fn clean_scenario_all_stage_combinations() {
        let inp = input(&SynthScenario::new(72.0, 61.0, 30.0, 1));
        for (recovery, rectify) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = PipelineConfig { stages: StageToggles { recovery, rectify }, ..Default::default() };
            let out = estimate(&inp, &cfg).unwrap();
            assert!((out.report.average_bpm - 72.0).abs() < 2.0, "{recovery} {rectify}: {}", out.report.average_bpm);
            assert_eq!(out.report.n_points_used, out.report.per_point.len());
            assert_eq!(out.flags.iter().any(|f| f.starts_with("rls_warmup")), rectify);
        }
    }

    #[test]
    fn dropout_splits_into_reacquired_segment() {
        let mut s = SynthScenario::new(72.0, 61.0, 30.0, 2);
        s.dropout_events.push(DropoutEvent { start_frame: 150, end_frame: 190, fraction: 0.5 });
        let out = estimate(&input(&s), &PipelineConfig::default()).unwrap();
        let rec = out.recovery.as_ref().unwrap();
        assert_eq!(rec.state.settle_frame, Some(438));
        assert_eq!(out.segments, vec![Segment { start_frame: 438, end_frame: 1830 }]);
        assert!(out.report.per_point.iter().all(|p| p.point_id >= crate::ingest::synth::REACQUIRED_ID_BASE));
        assert!((out.report.average_bpm - 72.0).abs() < 2.0, "{}", out.report.average_bpm);
    }

    #[test]
    fn interference_everywhere_reports_warmup() {
        let mut s = SynthScenario::new(72.0, 61.0, 30.0, 4);
        s.noise_sigma = 0.2;
        s.flicker = Some(crate::ingest::FlickerSpec { amplitude: 5.0, gap_s: (0.5, 2.0), width_s: (0.2, 1.0) });
        s.dropout_events.push(DropoutEvent { start_frame: 150, end_frame: 190, fraction: 0.5 });
        let out = estimate(&input(&s), &PipelineConfig::default()).unwrap();
        assert!(out.flags.iter().any(|f| f == "rls_warmup_excluded_s:5"), "{:?}", out.flags);
        assert!(out.report.n_points_used >= 1);
    }

    #[test]
    fn missing_traces_fail_in_ingest_stage() {
        let mut inp = input(&SynthScenario::new(72.0, 61.0, 20.0, 1));
        inp.traces.clear();
        let err = estimate(&inp, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.stage(), "ingest");
    }

    #[test]
    fn config_validation() {
        let bad = PipelineConfig { fps: 6.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
        let bad = PipelineConfig { rls: RlsParams { alpha: 1.5, ..Default::default() }, ..Default::default() };
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
        assert!(PipelineConfig::default().validate().is_ok());
    }

    #[test]
    fn deterministic() {
        let mut s = SynthScenario::new(80.0, 61.0, 20.0, 9);
        s.noise_sigma = 0.5;
        let inp = input(&s);
        let a = estimate(&inp, &PipelineConfig::default()).unwrap();
        let b = estimate(&inp, &PipelineConfig::default()).unwrap();
        assert_eq!(a.report, b.report);
    }
}
