//! Blind separation of a point's RGB trace into blood-flow and
//! pigmentation intensities.
//!
//! [`ica_separate`] is a symmetric fixed-point ICA over the three zero-mean
//! channels. [`classify_components`] labels its outputs by spectral content
//! and [`separate`] does both, restoring a usable scale afterwards.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RgbTrace;
use crate::spectrum::{power_spectrum, welch_spectrum, Window};

pub const MIN_ICA_SAMPLES: usize = 64;
const TIE_TOLERANCE: f64 = 1e-9;
const CONFIDENCE_SEGMENT: usize = 256;
const STABILIZED_STEP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SeparationError {
    #[error("need at least {MIN_ICA_SAMPLES} samples, got {0}")]
    TooShort(usize),
    #[error("channel covariance is rank deficient (eigenvalues {0:?})")]
    RankDeficient([f64; 3]),
    #[error("ICA did not converge in {iterations} iterations (final change {last_change:.3e})")]
    NotConverged { iterations: usize, last_change: f64 },
    #[error("invalid ICA configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid band [{0}, {1}] Hz")]
    InvalidBand(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    LogCosh,
    Cube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcaConfig {
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self { max_iterations: 1000, convergence_tol: 1e-6, nonlinearity: Nonlinearity::LogCosh, seed: 0 }
    }
}

impl IcaConfig {
    pub fn validate(&self) -> Result<(), SeparationError> {
        if self.max_iterations == 0 {
            return Err(SeparationError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol > 0.0) {
            return Err(SeparationError::InvalidConfig("convergence_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Unit-variance independent components and the matrix mapping them back to
/// the zero-mean channels: `x(t) - mean = mixing * s(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaOutput {
    pub components: [Vec<f64>; 3],
    pub mixing: Matrix3<f64>,
    pub iterations: usize,
}

fn inv_sqrt_sym(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let d = eig.eigenvalues.map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `(W W^T)^{-1/2} W`: the nearest orthogonal matrix to `w`.
fn symmetric_decorrelation(w: &Matrix3<f64>) -> Matrix3<f64> {
    inv_sqrt_sym(&(w * w.transpose())) * w
}

/// Largest deviation of `| <a_i, b_i> |` from one over the rows.
fn change(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let overlap = a * b.transpose();
    (0..3).map(|i| (overlap[(i, i)].abs() - 1.0).abs()).fold(0.0, f64::max)
}

pub fn ica_separate(trace: &RgbTrace, cfg: &IcaConfig) -> Result<IcaOutput, SeparationError> {
    cfg.validate()?;
    let n = trace.len();
    if n < MIN_ICA_SAMPLES {
        return Err(SeparationError::TooShort(n));
    }
    let channels = [&trace.r, &trace.g, &trace.b];
    let mean = Vector3::from_fn(|c, _| channels[c].iter().sum::<f64>() / n as f64);
    let x: Vec<Vector3<f64>> = (0..n)
        .map(|i| Vector3::new(trace.r[i], trace.g[i], trace.b[i]) - mean)
        .collect();

    let cov = x.iter().fold(Matrix3::zeros(), |acc, v| acc + v * v.transpose()) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let ev = eig.eigenvalues;
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = mean.iter().map(|m| m * m).sum::<f64>().max(hi);
    if !(lo > 1e-12 * scale) || !(hi > 0.0) {
        return Err(SeparationError::RankDeficient([ev[0], ev[1], ev[2]]));
    }
    let d_inv = ev.map(|v| 1.0 / v.sqrt());
    let whitening = Matrix3::from_diagonal(&d_inv) * eig.eigenvectors.transpose();
    let z: Vec<Vector3<f64>> = x.iter().map(|v| whitening * v).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Matrix3::from_fn(|_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init);

    let mut w_prev = w;
    let mut step = 1.0;
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=cfg.max_iterations {
        iterations = it;
        let mut acc = Matrix3::zeros();
        let mut gprime = Vector3::zeros();
        for zi in &z {
            let y = w * zi;
            let (g, gp) = match cfg.nonlinearity {
                Nonlinearity::LogCosh => {
                    let t = y.map(f64::tanh);
                    (t, t.map(|v| 1.0 - v * v))
                }
                Nonlinearity::Cube => (y.map(|v| v * v * v), y.map(|v| 3.0 * v * v)),
            };
            acc += g * zi.transpose();
            gprime += gp;
        }
        let nf = n as f64;
        let mut next = symmetric_decorrelation(&(acc / nf - Matrix3::from_diagonal(&(gprime / nf)) * w));
        if step < 1.0 {
            for i in 0..3 {
                if next.row(i).dot(&w.row(i)) < 0.0 {
                    next.set_row(i, &(-next.row(i)));
                }
            }
            next = symmetric_decorrelation(&(w * (1.0 - step) + next * step));
        }
        last_change = change(&next, &w);
        // Landing closer to the iterate before last than to the last one
        // means the update is cycling; damp it from then on.
        if step == 1.0 && last_change >= cfg.convergence_tol && change(&next, &w_prev) < 0.1 * last_change {
            step = STABILIZED_STEP;
        }
        w_prev = w;
        w = next;
        if last_change < cfg.convergence_tol {
            break;
        }
        if it == cfg.max_iterations / 2 {
            step = step.min(STABILIZED_STEP);
        }
    }
    if last_change >= cfg.convergence_tol {
        return Err(SeparationError::NotConverged { iterations, last_change });
    }

    let unmixing = w * whitening;
    let mixing = unmixing.try_inverse().ok_or(SeparationError::RankDeficient([ev[0], ev[1], ev[2]]))?;
    let mut components = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for zi in &z {
        let s = w * zi;
        for c in 0..3 {
            components[c].push(s[c]);
        }
    }
    Ok(IcaOutput { components, mixing, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentLabel {
    BloodFlowImpure,
    PigmentationImpure,
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Indices into the classified components.
    pub blood: usize,
    pub pigment: usize,
    pub residual: usize,
    /// Strongest in-band bin power over total (non-DC) power.
    pub peak_ratio: [f64; 3],
    /// Fraction of non-DC power below the band's lower edge.
    pub low_fraction: [f64; 3],
    /// The blood component's in-band peak is under twice its mean in-band
    /// power, measured on a Welch-averaged spectrum.
    pub low_confidence: bool,
}

impl Classification {
    pub fn label_of(&self, idx: usize) -> ComponentLabel {
        if idx == self.blood {
            ComponentLabel::BloodFlowImpure
        } else if idx == self.pigment {
            ComponentLabel::PigmentationImpure
        } else {
            ComponentLabel::Residual
        }
    }
}

/// Index of the largest value; values within the relative tie tolerance
/// resolve to the lowest index.
fn argmax_with_ties(values: &[(usize, f64)]) -> usize {
    let mut best = values[0];
    for &(i, v) in &values[1..] {
        let tol = TIE_TOLERANCE * best.1.abs().max(v.abs());
        if v > best.1 + tol || ((v - best.1).abs() <= tol && i < best.0) {
            best = (i, v);
        }
    }
    best.0
}

pub fn classify_components(
    components: &[Vec<f64>; 3],
    fps: f64,
    band: (f64, f64),
) -> Result<Classification, SeparationError> {
    let (low, high) = band;
    if !(low > 0.0 && high > low && fps > 0.0) {
        return Err(SeparationError::InvalidBand(low, high));
    }
    let mut peak_ratio = [0.0; 3];
    let mut low_fraction = [0.0; 3];
    let mut peak = [0.0; 3];
    for (c, comp) in components.iter().enumerate() {
        if comp.len() < 4 {
            return Err(SeparationError::TooShort(comp.len()));
        }
        let spec = power_spectrum(comp, fps, Window::Hann);
        let total: f64 = spec.power[1..].iter().sum();
        let bins = spec.band_bins(low, high);
        if bins.is_empty() {
            return Err(SeparationError::InvalidBand(low, high));
        }
        let in_band = &spec.power[bins.clone()];
        peak[c] = in_band.iter().cloned().fold(0.0, f64::max);
        let below: f64 = spec.power[1..*bins.start()].iter().sum();
        if total > 0.0 {
            peak_ratio[c] = peak[c] / total;
            low_fraction[c] = below / total;
        }
    }
    let blood = argmax_with_ties(&[(0, peak_ratio[0]), (1, peak_ratio[1]), (2, peak_ratio[2])]);
    let rest: Vec<(usize, f64)> = (0..3).filter(|&i| i != blood).map(|i| (i, low_fraction[i])).collect();
    let pigment = argmax_with_ties(&rest);
    let residual = (0..3).find(|&i| i != blood && i != pigment).expect("three components");
    let welch = welch_spectrum(&components[blood], fps, CONFIDENCE_SEGMENT);
    let bins = welch.band_bins(low, high);
    let low_confidence = if bins.is_empty() {
        true
    } else {
        let in_band = &welch.power[bins];
        let mean = in_band.iter().sum::<f64>() / in_band.len() as f64;
        in_band.iter().cloned().fold(0.0, f64::max) < 2.0 * mean
    };
    Ok(Classification {
        blood,
        pigment,
        residual,
        peak_ratio,
        low_fraction,
        low_confidence,
    })
}

/// Labeled separation of one feature point's trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedSources {
    pub point_id: u32,
    pub fps: f64,
    pub start_frame: usize,
    pub blood_flow_impure: Vec<f64>,
    pub pigmentation_impure: Vec<f64>,
    pub residual: Vec<f64>,
    /// Columns map (blood, pigment, residual) back to the zero-mean channels.
    pub mixing: Matrix3<f64>,
    pub low_confidence: bool,
    pub iterations: usize,
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n
}

/// ICA, labeling, and rescaling of the blood-flow and pigmentation
/// components to the green channel's standard deviation, signed to
/// correlate positively with green.
pub fn separate(trace: &RgbTrace, cfg: &IcaConfig, band: (f64, f64)) -> Result<SeparatedSources, SeparationError> {
    let ica = ica_separate(trace, cfg)?;
    let cls = classify_components(&ica.components, trace.fps, band)?;
    let green_sd = std_dev(&trace.g);
    let order = [cls.blood, cls.pigment, cls.residual];
    let mut series: [Vec<f64>; 3] = Default::default();
    let mut mixing = Matrix3::zeros();
    for (slot, &idx) in order.iter().enumerate() {
        let comp = &ica.components[idx];
        let mut gain = if slot < 2 { green_sd } else { 1.0 };
        if covariance(comp, &trace.g) < 0.0 {
            gain = -gain;
        }
        series[slot] = comp.iter().map(|v| v * gain).collect();
        mixing.set_column(slot, &(ica.mixing.column(idx) / gain));
    }
    let [blood_flow_impure, pigmentation_impure, residual] = series;
    Ok(SeparatedSources {
        point_id: trace.point_id,
        fps: trace.fps,
        start_frame: trace.start_frame,
        blood_flow_impure,
        pigmentation_impure,
        residual,
        mixing,
        low_confidence: cls.low_confidence,
        iterations: ica.iterations,
    })
}
