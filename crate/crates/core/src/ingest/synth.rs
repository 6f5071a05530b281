//! Synthetic scenarios with known ground truth.
//!
//! Each feature point gets an RGB trace built from a constant skin baseline,
//! a pulse waveform at the scenario heart rate (strongest in green), a slow
//! pigmentation drift and a fast texture flicker (red and blue only), an
//! illumination interference waveform shared by every trace up to a per-trace
//! gain, and optional white noise. Dropout events thin out the landmark
//! track; once the first dropout starts, the originally tracked points lose
//! registration: their traces stop carrying the pulse and pick up a head-sway
//! artifact instead. A reacquisition candidate set is produced every 36 frames
//! after that onset, with centroid offsets that dip to a minimum and then
//! rise again, so the recovery state machine has something to settle on.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_hr_range, GroundTruth, IngestError, LandmarkFrame, LandmarkPoint, RgbTrace, TraceSet};

/// Baseline red intensity (8-bit scale).
pub const BASELINE_R: f64 = 110.0;
/// Baseline green intensity (8-bit scale).
pub const BASELINE_G: f64 = 120.0;
/// Baseline blue intensity (8-bit scale).
pub const BASELINE_B: f64 = 100.0;
/// Reacquired points are numbered from here so they never collide with the
/// originally tracked ids.
pub const REACQUIRED_ID_BASE: u32 = 10_000;
/// Frames between reacquisition candidates.
pub const CANDIDATE_INTERVAL: usize = 36;
/// Probe index (1-based) with the smallest centroid offset.
pub const CANDIDATE_MIN_PROBE: usize = 7;

const PPG_CHANNEL_GAIN: [f64; 3] = [0.35, 1.0, 0.25];
const PIGMENT_CHANNEL_GAIN: [f64; 3] = [0.8, 0.0, 0.5];
const TEXTURE_CHANNEL_GAIN: [f64; 3] = [0.2, 0.0, 0.6];
const HARMONIC_GAIN: f64 = 0.2;
const FACE_CENTER: (f64, f64) = (320.0, 240.0);
const FACE_RADII: (f64, f64) = (90.0, 115.0);
const NOSE_HALF_EXTENT: (f64, f64) = (20.0, 24.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventShape {
    Step,
    Ramp,
    Pulse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlluminationEvent {
    pub time_s: f64,
    pub amplitude: f64,
    pub shape: EventShape,
    /// Rise time of a ramp or width of a pulse.
    #[serde(default = "default_event_duration")]
    pub duration_s: f64,
}

fn default_event_duration() -> f64 {
    0.5
}

impl IlluminationEvent {
    pub fn new(time_s: f64, amplitude: f64, shape: EventShape) -> Self {
        Self { time_s, amplitude, shape, duration_s: default_event_duration() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutEvent {
    pub start_frame: usize,
    pub end_frame: usize,
    pub fraction: f64,
}

/// Randomly timed pulse events standing in for screen or ambient flicker.
/// Gaps and widths are drawn uniformly from the given ranges and amplitudes
/// from `±amplitude`, all from the scenario seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlickerSpec {
    pub amplitude: f64,
    pub gap_s: (f64, f64),
    pub width_s: (f64, f64),
}

impl FlickerSpec {
    fn validate(&self) -> Result<(), IngestError> {
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if !(self.amplitude.is_finite() && ok_range(self.gap_s) && ok_range(self.width_s)) {
            return Err(IngestError::InvalidScenario(format!("invalid flicker {self:?}")));
        }
        Ok(())
    }

    fn events(&self, seed: u64, duration_s: f64) -> Vec<IlluminationEvent> {
        let mut rng = trace_rng(seed, u64::MAX);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { lo };
        let mut out = Vec::new();
        let mut t = draw(&mut rng, self.gap_s);
        while t < duration_s {
            let amplitude = if self.amplitude > 0.0 { rng.random_range(-self.amplitude..self.amplitude) } else { 0.0 };
            let duration_s = draw(&mut rng, self.width_s);
            out.push(IlluminationEvent { time_s: t, amplitude, shape: EventShape::Pulse, duration_s });
            t += draw(&mut rng, self.gap_s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthScenario {
    #[serde(default = "default_source_id")]
    pub source_id: String,
    pub true_hr_bpm: f64,
    pub fps: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub illumination_events: Vec<IlluminationEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flicker: Option<FlickerSpec>,
    #[serde(default)]
    pub dropout_events: Vec<DropoutEvent>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    /// Points placed in the nose region; the rest sit on the face outline.
    #[serde(default = "default_n_central")]
    pub n_central: usize,
    /// Green-channel pulse amplitude.
    #[serde(default = "default_ppg_amplitude")]
    pub ppg_amplitude: f64,
    /// Adds a second harmonic at 20% of the fundamental.
    #[serde(default)]
    pub harmonic: bool,
    /// Head-sway artifact amplitude on mis-registered points after a dropout.
    #[serde(default = "default_motion_amplitude")]
    pub motion_artifact_amplitude: f64,
    /// Slow skin-tone drift below the heart-rate band, red and blue only.
    #[serde(default = "default_pigment_amplitude")]
    pub pigment_amplitude: f64,
    /// Fast surface texture flicker above the band, red and blue only.
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f64,
}

fn default_source_id() -> String {
    "synth".into()
}
fn default_n_points() -> usize {
    100
}
fn default_n_central() -> usize {
    20
}
fn default_ppg_amplitude() -> f64 {
    1.0
}
fn default_motion_amplitude() -> f64 {
    3.0
}
fn default_pigment_amplitude() -> f64 {
    1.0
}
fn default_texture_amplitude() -> f64 {
    0.05
}

impl SynthScenario {
    /// A clean scenario: no events, no noise, default layout.
    pub fn new(true_hr_bpm: f64, fps: f64, duration_s: f64, seed: u64) -> Self {
        Self {
            source_id: default_source_id(),
            true_hr_bpm,
            fps,
            duration_s,
            illumination_events: Vec::new(),
            flicker: None,
            dropout_events: Vec::new(),
            noise_sigma: 0.0,
            seed,
            n_points: default_n_points(),
            n_central: default_n_central(),
            ppg_amplitude: default_ppg_amplitude(),
            harmonic: false,
            motion_artifact_amplitude: default_motion_amplitude(),
            pigment_amplitude: default_pigment_amplitude(),
            texture_amplitude: default_texture_amplitude(),
        }
    }

    /// Explicit events followed by the generated flicker events.
    pub fn all_illumination_events(&self) -> Vec<IlluminationEvent> {
        let mut all = self.illumination_events.clone();
        if let Some(f) = &self.flicker {
            all.extend(f.events(self.seed, self.duration_s));
        }
        all
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::InvalidScenario(m));
        check_hr_range(self.true_hr_bpm)?;
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration must be positive, got {}", self.duration_s));
        }
        if self.n_frames() < 2 {
            return bad("scenario shorter than two frames".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.n_points == 0 || self.n_central > self.n_points {
            return bad(format!("need 0 < n_central ({}) <= n_points ({})", self.n_central, self.n_points));
        }
        if self.n_points >= REACQUIRED_ID_BASE as usize {
            return bad(format!("n_points must be below {REACQUIRED_ID_BASE}"));
        }
        for (name, v) in [
            ("ppg_amplitude", self.ppg_amplitude),
            ("motion_artifact_amplitude", self.motion_artifact_amplitude),
            ("pigment_amplitude", self.pigment_amplitude),
            ("texture_amplitude", self.texture_amplitude),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        if let Some(f) = &self.flicker {
            f.validate()?;
        }
        for e in &self.illumination_events {
            if !(0.0..=self.duration_s).contains(&e.time_s) {
                return bad(format!("illumination event at {} s outside [0, {}]", e.time_s, self.duration_s));
            }
            if !e.amplitude.is_finite() || !(e.duration_s.is_finite() && e.duration_s > 0.0) {
                return bad("illumination event amplitude/duration must be finite, duration > 0".into());
            }
        }
        let n = self.n_frames();
        for d in &self.dropout_events {
            if d.start_frame >= d.end_frame || d.end_frame > n {
                return bad(format!("dropout [{}, {}) outside [0, {n})", d.start_frame, d.end_frame));
            }
            if !(0.0..=1.0).contains(&d.fraction) {
                return bad(format!("dropout fraction {} outside [0, 1]", d.fraction));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub traces: TraceSet,
    pub track: Vec<LandmarkFrame>,
    /// Candidate point sets a replay tracker returns on reacquisition.
    pub reacquisition: Vec<LandmarkFrame>,
    pub truth: GroundTruth,
    /// Green-channel pulse contribution of every trace, without baseline,
    /// interference or noise.
    pub clean_ppg: BTreeMap<u32, Vec<f64>>,
    /// Unit-gain interference waveform before per-trace gains.
    pub interference: Vec<f64>,
}

/// Face layout: nose grid first, then the outline ellipse.
fn layout(n_points: usize, n_central: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(n_points);
    if n_central > 0 {
        let cols = (n_central as f64).sqrt().ceil() as usize;
        let rows = n_central.div_ceil(cols);
        let step = |half: f64, count: usize| if count > 1 { 2.0 * half / (count - 1) as f64 } else { 0.0 };
        let (sx, sy) = (step(NOSE_HALF_EXTENT.0, cols), step(NOSE_HALF_EXTENT.1, rows));
        let x0 = FACE_CENTER.0 - sx * (cols - 1) as f64 / 2.0;
        let y0 = FACE_CENTER.1 - sy * (rows - 1) as f64 / 2.0;
        for i in 0..n_central {
            let (r, c) = (i / cols, i % cols);
            pts.push((x0 + c as f64 * sx, y0 + r as f64 * sy));
        }
    }
    let outline = n_points - n_central;
    for k in 0..outline {
        let theta = 2.0 * PI * k as f64 / outline as f64;
        pts.push((FACE_CENTER.0 + FACE_RADII.0 * theta.cos(), FACE_CENTER.1 + FACE_RADII.1 * theta.sin()));
    }
    pts
}

/// Indices of the points hidden by a dropout of `fraction`: the leftmost ones.
fn hidden_points(pts: &[(f64, f64)], fraction: f64) -> Vec<bool> {
    let k = (fraction * pts.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a].0.total_cmp(&pts[b].0).then(a.cmp(&b)));
    let mut hidden = vec![false; pts.len()];
    for &i in order.iter().take(k) {
        hidden[i] = true;
    }
    hidden
}

fn onset_sample(time_s: f64, fps: f64) -> usize {
    (time_s * fps).round() as usize
}

fn event_waveform(e: &IlluminationEvent, fps: f64, n: usize) -> Vec<f64> {
    let start = onset_sample(e.time_s, fps);
    let width = ((e.duration_s * fps).round() as usize).max(1);
    (0..n)
        .map(|i| {
            if i < start {
                return 0.0;
            }
            let level = match e.shape {
                EventShape::Step => 1.0,
                EventShape::Ramp => (((i - start) as f64 + 1.0) / width as f64).min(1.0),
                EventShape::Pulse => {
                    if i < start + width {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            e.amplitude * level
        })
        .collect()
}

fn trace_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn synth_scenario(s: &SynthScenario) -> Result<SynthOutput, IngestError> {
    s.validate()?;
    let n = s.n_frames();
    let fps = s.fps;
    let f_hr = s.true_hr_bpm / 60.0;
    let pts = layout(s.n_points, s.n_central);

    // Scenario-wide draws come from stream 0.
    let mut rng = trace_rng(s.seed, 0);
    let all_events = s.all_illumination_events();
    let events: Vec<Vec<f64>> = all_events.iter().map(|e| event_waveform(e, fps, n)).collect();
    let sway_hz = loop {
        let f: f64 = rng.random_range(0.7..3.5);
        if (f - f_hr).abs() >= 0.3 {
            break f;
        }
    };
    let pigment_hz: f64 = rng.random_range(0.05..0.2);
    let texture_hz: f64 = rng.random_range(5.0..7.0);
    let interference: Vec<f64> = (0..n).map(|i| events.iter().map(|w| w[i]).sum()).collect();

    let failure = s.dropout_events.iter().filter(|d| d.fraction > 0.0).map(|d| d.start_frame).min();

    let noise = Normal::new(0.0, s.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma is non-negative");
    let baseline = [BASELINE_R, BASELINE_G, BASELINE_B];

    let mut traces = TraceSet::new();
    let mut clean_ppg = BTreeMap::new();
    let mut make_trace = |id: u32, misregistered_from: Option<usize>| -> Result<(), IngestError> {
        let mut r = trace_rng(s.seed, 1 + id as u64);
        let phase = r.random_range(0.0..2.0 * PI);
        let amp = s.ppg_amplitude * r.random_range(0.8..1.2);
        let gain = r.random_range(0.5..1.5);
        let sway_phase = r.random_range(0.0..2.0 * PI);
        let sway_weights: [f64; 3] = [r.random_range(0.5..1.5), r.random_range(0.5..1.5), r.random_range(0.5..1.5)];
        let pigment_phase = r.random_range(0.0..2.0 * PI);
        let texture_phase = r.random_range(0.0..2.0 * PI);
        let mut ch = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut green_ppg = vec![0.0; n];
        for i in 0..n {
            let t = i as f64 / fps;
            let arg = 2.0 * PI * f_hr * t + phase;
            let mut pulse = arg.sin();
            if s.harmonic {
                pulse += HARMONIC_GAIN * (2.0 * arg).sin();
            }
            let lost = misregistered_from.is_some_and(|f| i >= f);
            let pulse = if lost { 0.0 } else { amp * pulse };
            green_ppg[i] = pulse * PPG_CHANNEL_GAIN[1];
            let sway = if lost {
                s.motion_artifact_amplitude * (2.0 * PI * sway_hz * t + sway_phase).sin()
            } else {
                0.0
            };
            let pigment = s.pigment_amplitude * (2.0 * PI * pigment_hz * t + pigment_phase).sin();
            let texture = s.texture_amplitude * (2.0 * PI * texture_hz * t + texture_phase).sin();
            for c in 0..3 {
                let mut v = baseline[c]
                    + PPG_CHANNEL_GAIN[c] * pulse
                    + PIGMENT_CHANNEL_GAIN[c] * pigment
                    + TEXTURE_CHANNEL_GAIN[c] * texture
                    + gain * interference[i]
                    + sway_weights[c] * sway;
                if s.noise_sigma > 0.0 {
                    v += noise.sample(&mut r);
                }
                ch[c][i] = v;
            }
        }
        let [cr, cg, cb] = ch;
        traces.insert(id, RgbTrace::new(id, fps, 0, cr, cg, cb)?);
        clean_ppg.insert(id, green_ppg);
        Ok(())
    };
    for id in 0..s.n_points as u32 {
        make_trace(id, failure)?;
    }
    if failure.is_some() {
        for j in 0..s.n_points as u32 {
            make_trace(REACQUIRED_ID_BASE + j, None)?;
        }
    }

    let hidden_by: Vec<(usize, usize, Vec<bool>)> = s
        .dropout_events
        .iter()
        .map(|d| (d.start_frame, d.end_frame, hidden_points(&pts, d.fraction)))
        .collect();
    let visible = |frame: usize, j: usize| !hidden_by.iter().any(|(a, b, h)| (*a..*b).contains(&frame) && h[j]);

    let track: Vec<LandmarkFrame> = (0..n)
        .map(|f| {
            let points = pts
                .iter()
                .enumerate()
                .filter(|&(j, _)| visible(f, j))
                .map(|(j, &(x, y))| LandmarkPoint { id: j as u32, x, y })
                .collect();
            LandmarkFrame::new(f, points)
        })
        .collect();

    let mut reacquisition = Vec::new();
    if let Some(f0) = failure {
        let dir = (0.8, 0.6);
        let mut k = 1;
        while f0 + CANDIDATE_INTERVAL * k < n {
            let frame = f0 + CANDIDATE_INTERVAL * k;
            let eps = 2.0 + 3.0 * (k as f64 - CANDIDATE_MIN_PROBE as f64).abs();
            let points = pts
                .iter()
                .enumerate()
                .filter(|&(j, _)| visible(frame, j))
                .map(|(j, &(x, y))| LandmarkPoint {
                    id: REACQUIRED_ID_BASE + j as u32,
                    x: x + eps * dir.0,
                    y: y + eps * dir.1,
                })
                .collect();
            reacquisition.push(LandmarkFrame::new(frame, points));
            k += 1;
        }
    }

    Ok(SynthOutput {
        traces,
        track,
        reacquisition,
        truth: GroundTruth::scalar(s.source_id.clone(), s.true_hr_bpm)?,
        clean_ppg,
        interference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct DFT magnitude at one frequency, independent of any FFT code.
    fn dft_power(x: &[f64], fps: f64, f: f64) -> f64 {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let a = 2.0 * PI * f * i as f64 / fps;
            re += (v - mean) * a.cos();
            im -= (v - mean) * a.sin();
        }
        re * re + im * im
    }

    #[test]
    fn flicker_is_seeded_and_in_range() {
        let mut s = SynthScenario::new(72.0, 61.0, 30.0, 8);
        s.flicker = Some(FlickerSpec { amplitude: 5.0, gap_s: (0.5, 2.0), width_s: (0.2, 1.0) });
        let a = s.all_illumination_events();
        assert_eq!(a, s.all_illumination_events());
        assert!(a.len() >= 14 && a.len() <= 60, "{}", a.len());
        for e in &a {
            assert!(e.time_s < 30.0 && e.amplitude.abs() <= 5.0);
            assert!((0.2..=1.0).contains(&e.duration_s));
        }
        s.seed = 9;
        assert_ne!(a, s.all_illumination_events());
    }

    #[test]
    fn clean_green_peaks_at_heart_rate() {
        let s = SynthScenario::new(72.0, 61.0, 30.0, 1);
        let out = synth_scenario(&s).unwrap();
        let g = &out.traces[&0].g;
        let n = g.len();
        let bin = 61.0 / n as f64;
        let best = (1..n / 2)
            .max_by(|&a, &b| dft_power(g, 61.0, a as f64 * bin).total_cmp(&dft_power(g, 61.0, b as f64 * bin)))
            .unwrap();
        assert!((best as f64 * bin - 1.2).abs() <= bin, "peak at {}", best as f64 * bin);
    }

    #[test]
    fn clean_green_is_sinusoid_plus_baseline() {
        let s = SynthScenario::new(90.0, 61.0, 10.0, 4);
        let out = synth_scenario(&s).unwrap();
        let g = &out.traces[&3].g;
        let ppg = &out.clean_ppg[&3];
        for (v, p) in g.iter().zip(ppg) {
            assert!((v - BASELINE_G - p).abs() < 1e-12);
        }
    }

    #[test]
    fn step_event_onset_sample() {
        let mut s = SynthScenario::new(72.0, 61.0, 30.0, 2);
        s.illumination_events.push(IlluminationEvent::new(3.0, 10.0, EventShape::Step));
        let out = synth_scenario(&s).unwrap();
        for t in out.traces.values().take(5) {
            for ch in [&t.r, &t.g, &t.b] {
                let jumps: Vec<usize> =
                    ch.windows(2).enumerate().filter(|(_, w)| (w[1] - w[0]).abs() > 4.0).map(|(i, _)| i + 1).collect();
                assert_eq!(jumps, vec![183]);
            }
        }
    }

    #[test]
    fn dropout_removes_fraction() {
        let mut s = SynthScenario::new(72.0, 61.0, 10.0, 3);
        s.dropout_events.push(DropoutEvent { start_frame: 150, end_frame: 190, fraction: 0.5 });
        let out = synth_scenario(&s).unwrap();
        for f in &out.track {
            let expected = if (150..190).contains(&f.frame_idx) { 50 } else { 100 };
            assert_eq!(f.len(), expected, "frame {}", f.frame_idx);
        }
        assert_eq!(out.reacquisition[0].frame_idx, 186);
        assert_eq!(out.reacquisition[0].len(), 50);
        assert_eq!(out.reacquisition[1].len(), 100);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut s = SynthScenario::new(80.0, 61.0, 5.0, 9);
        s.noise_sigma = 0.5;
        s.illumination_events.push(IlluminationEvent::new(1.0, 5.0, EventShape::Pulse));
        assert_eq!(synth_scenario(&s).unwrap(), synth_scenario(&s).unwrap());
        let mut other = s.clone();
        other.seed = 10;
        assert_ne!(synth_scenario(&s).unwrap().traces, synth_scenario(&other).unwrap().traces);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(synth_scenario(&SynthScenario::new(300.0, 61.0, 30.0, 1)).is_err());
        let mut s = SynthScenario::new(72.0, 61.0, 30.0, 1);
        s.illumination_events.push(IlluminationEvent::new(31.0, 1.0, EventShape::Step));
        assert!(synth_scenario(&s).is_err());
        let mut s = SynthScenario::new(72.0, 61.0, 30.0, 1);
        s.dropout_events.push(DropoutEvent { start_frame: 0, end_frame: 10, fraction: 1.5 });
        assert!(synth_scenario(&s).is_err());
    }
}
