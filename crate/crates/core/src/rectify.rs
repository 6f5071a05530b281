//! Illumination rectification with a one-tap recursive least squares filter.
//!
//! The pigmentation component serves as the interference reference. At each
//! sample the filter predicts the interference in the blood-flow component
//! as `K(t) * reference(t)`, emits the a priori error as the rectified
//! sample, and then updates `K` with exponential forgetting `alpha`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_DELTA: f64 = 100.0;
pub const DEFAULT_WARMUP_S: f64 = 5.0;

#[derive(Debug, Error)]
pub enum RectifyError {
    #[error("forgetting factor must be in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("initial inverse correlation must be > 0, got {0}")]
    InvalidDelta(f64),
    #[error("non-finite input at sample {0}")]
    NonFiniteInput(usize),
    #[error("RLS update overflowed at sample {0}")]
    NonFiniteUpdate(usize),
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub weight: f64,
    pub inv_corr: f64,
    pub forgetting: f64,
    pub init_scale: f64,
    pub samples_seen: usize,
}

pub fn rls_init(alpha: f64, delta: f64) -> Result<RlsState, RectifyError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RectifyError::InvalidAlpha(alpha));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(RectifyError::InvalidDelta(delta));
    }
    Ok(RlsState { weight: 0.0, inv_corr: delta, forgetting: alpha, init_scale: delta, samples_seen: 0 })
}

/// One update. Returns the new state and the a priori error
/// `desired - K * reference`.
pub fn rls_step(state: RlsState, desired: f64, reference: f64) -> Result<(RlsState, f64), RectifyError> {
    let idx = state.samples_seen;
    if !(desired.is_finite() && reference.is_finite()) {
        return Err(RectifyError::NonFiniteInput(idx));
    }
    let RlsState { weight, inv_corr, forgetting: alpha, .. } = state;
    let error = desired - weight * reference;
    let pr = inv_corr * reference;
    let gain = pr / (alpha + reference * pr);
    let weight = weight + gain * error;
    let inv_corr = (inv_corr - gain * reference * inv_corr) / alpha;
    if !(weight.is_finite() && inv_corr.is_finite() && inv_corr > 0.0) {
        return Err(RectifyError::NonFiniteUpdate(idx));
    }
    Ok((RlsState { weight, inv_corr, samples_seen: idx + 1, ..state }, error))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifiedTrace {
    pub blood_flow_pure: Vec<f64>,
    pub interference_estimate: Vec<f64>,
    /// Weight applied to each sample (before that sample's update).
    pub weight_history: Vec<f64>,
}

pub fn rectify_trace(
    blood_flow_impure: &[f64],
    pigmentation_impure: &[f64],
    alpha: f64,
    delta: f64,
) -> Result<RectifiedTrace, RectifyError> {
    if blood_flow_impure.len() != pigmentation_impure.len() {
        return Err(RectifyError::LengthMismatch(blood_flow_impure.len(), pigmentation_impure.len()));
    }
    let n = blood_flow_impure.len();
    if n < 2 {
        return Err(RectifyError::TooShort(n));
    }
    let mut state = rls_init(alpha, delta)?;
    let mut out = RectifiedTrace {
        blood_flow_pure: Vec::with_capacity(n),
        interference_estimate: Vec::with_capacity(n),
        weight_history: Vec::with_capacity(n),
    };
    for (&d, &r) in blood_flow_impure.iter().zip(pigmentation_impure) {
        let k = state.weight;
        let (next, e) = rls_step(state, d, r)?;
        out.weight_history.push(k);
        out.interference_estimate.push(k * r);
        out.blood_flow_pure.push(e);
        state = next;
    }
    Ok(out)
}
