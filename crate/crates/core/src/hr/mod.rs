//! Heart-rate extraction from rectified per-point signals.

mod filter;
mod region;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectrum::{power_spectrum, Window};

pub use filter::bandpass;
pub use region::{median_positions, select_central_points, RegionConfig, DEFAULT_CENTRAL_FRACTION};

pub const DEFAULT_BAND: (f64, f64) = (0.6, 4.0);
pub const MIN_SPECTRAL_SAMPLES: usize = 64;
const PEAK_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HrError {
    #[error("need at least {MIN_SPECTRAL_SAMPLES} samples, got {0}")]
    TooShort(usize),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("band [{low}, {high}] Hz infeasible at {fps} fps")]
    InfeasibleBand { low: f64, high: f64, fps: f64 },
    #[error("all-zero signal")]
    ZeroSignal,
    #[error("empty track")]
    EmptyTrack,
    #[error("no points selected by {0}")]
    EmptySelection(String),
    #[error("no estimates to aggregate")]
    NoEstimates,
}

pub fn hz_to_bpm(f: f64) -> f64 {
    60.0 * f
}

/// Zero-mean, unit-variance (population) copy of `series`.
pub fn normalize(series: &[f64]) -> Result<Vec<f64>, HrError> {
    if series.len() < 2 {
        return Err(HrError::TooShort(series.len()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > f64::EPSILON * mean.abs()) || !sd.is_finite() {
        return Err(HrError::ZeroVariance);
    }
    Ok(series.iter().map(|v| (v - mean) / sd).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub freq_hz: f64,
    /// Peak power over mean in-band power.
    pub prominence: f64,
    /// Another in-band bin matched the peak power; the lower one was taken.
    pub tie: bool,
}

/// Strongest in-band spectral line, refined by a parabola through the log
/// power of the peak bin and its neighbours.
pub fn dominant_frequency(signal: &[f64], fps: f64, band: (f64, f64)) -> Result<SpectralPeak, HrError> {
    let n = signal.len();
    if n < MIN_SPECTRAL_SAMPLES {
        return Err(HrError::TooShort(n));
    }
    let (low, high) = band;
    if !(low > 0.0 && low < high && high < fps / 2.0) {
        return Err(HrError::InfeasibleBand { low, high, fps });
    }
    if signal.iter().all(|&v| v == 0.0) {
        return Err(HrError::ZeroSignal);
    }
    let spec = power_spectrum(signal, fps, Window::Hann);
    let bins = spec.band_bins(low, high);
    if bins.is_empty() {
        return Err(HrError::InfeasibleBand { low, high, fps });
    }

    let mut peak = *bins.start();
    let mut tie = false;
    for k in bins.clone().skip(1) {
        let (p, best) = (spec.power[k], spec.power[peak]);
        let tol = PEAK_TIE_TOLERANCE * p.max(best);
        if p > best + tol {
            peak = k;
            tie = false;
        } else if (p - best).abs() <= tol && best > 0.0 {
            tie = true;
        }
    }
    let peak_power = spec.power[peak];
    if peak_power <= 0.0 {
        return Err(HrError::ZeroSignal);
    }
    let band_mean = spec.power[bins.clone()].iter().sum::<f64>() / bins.clone().count() as f64;

    let mut offset = 0.0;
    if peak > 0 && peak + 1 < spec.power.len() {
        let (a, b, c) = (spec.power[peak - 1], peak_power, spec.power[peak + 1]);
        if a > 0.0 && c > 0.0 {
            let (la, lb, lc) = (a.ln(), b.ln(), c.ln());
            let denom = la - 2.0 * lb + lc;
            if denom < 0.0 {
                offset = (0.5 * (la - lc) / denom).clamp(-0.5, 0.5);
            }
        }
    }
    let freq_hz = ((peak as f64 + offset) * spec.bin_hz).clamp(low, high);
    Ok(SpectralPeak { freq_hz, prominence: peak_power / band_mean, tie })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrEstimate {
    pub point_id: u32,
    /// First frame of the segment the estimate came from.
    pub start_frame: usize,
    pub freq_hz: f64,
    pub bpm: f64,
    pub prominence: f64,
    pub low_confidence: bool,
}

impl HrEstimate {
    pub fn from_peak(point_id: u32, start_frame: usize, peak: SpectralPeak, low_confidence: bool) -> Self {
        Self {
            point_id,
            start_frame,
            freq_hz: peak.freq_hz,
            bpm: hz_to_bpm(peak.freq_hz),
            prominence: peak.prominence,
            low_confidence: low_confidence || peak.tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrReport {
    pub per_point: Vec<HrEstimate>,
    pub average_bpm: f64,
    pub n_points_used: usize,
    pub region: Option<String>,
}

pub fn aggregate(estimates: Vec<HrEstimate>) -> Result<HrReport, HrError> {
    if estimates.is_empty() {
        return Err(HrError::NoEstimates);
    }
    let average_bpm = estimates.iter().map(|e| e.bpm).sum::<f64>() / estimates.len() as f64;
    Ok(HrReport { n_points_used: estimates.len(), average_bpm, per_point: estimates, region: None })
}

/// Normalize, band-limit and locate the spectral peak of one signal.
pub fn estimate_signal(signal: &[f64], fps: f64, band: (f64, f64)) -> Result<SpectralPeak, HrError> {
    let normalized = normalize(signal)?;
    let filtered = bandpass(&normalized, fps, band.0, band.1)?;
    dominant_frequency(&filtered, fps, band)
}
