//! Zero-phase Butterworth band-pass.

use std::f64::consts::PI;

use super::HrError;

/// Order of each of the high-pass and low-pass halves.
const ORDER: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

#[derive(Debug, Clone, Copy, Default)]
struct BiquadState {
    z1: f64,
    z2: f64,
}

impl Biquad {
    /// Bilinear-transform section of a Butterworth prototype with quality `q`.
    fn new(kind: Kind, cutoff_hz: f64, fps: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fps;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = match kind {
            Kind::LowPass => [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0],
            Kind::HighPass => [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0],
        };
        Self { b: b.map(|v| v / a0), a: [-2.0 * cos / a0, (1.0 - alpha) / a0] }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// State that makes the section output its steady response to a constant `u`.
    fn steady_state(&self, u: f64) -> (BiquadState, f64) {
        let y = u * self.dc_gain();
        let z2 = self.b[2] * u - self.a[1] * y;
        let z1 = y - self.b[0] * u;
        (BiquadState { z1, z2 }, y)
    }

    fn run(&self, st: &mut BiquadState, x: f64) -> f64 {
        let y = self.b[0] * x + st.z1;
        st.z1 = self.b[1] * x - self.a[0] * y + st.z2;
        st.z2 = self.b[2] * x - self.a[1] * y;
        y
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    LowPass,
    HighPass,
}

fn butterworth_q(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| {
            let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
            1.0 / (2.0 * theta.cos())
        })
        .collect()
}

fn sections(fps: f64, low: f64, high: f64) -> Vec<Biquad> {
    let qs = butterworth_q(ORDER);
    qs.iter()
        .map(|&q| Biquad::new(Kind::HighPass, low, fps, q))
        .chain(qs.iter().map(|&q| Biquad::new(Kind::LowPass, high, fps, q)))
        .collect()
}

fn filter_once(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut states = Vec::with_capacity(sections.len());
    let mut u = x[0];
    for s in sections {
        let (st, y) = s.steady_state(u);
        states.push(st);
        u = y;
    }
    x.iter()
        .map(|&v| sections.iter().zip(states.iter_mut()).fold(v, |acc, (s, st)| s.run(st, acc)))
        .collect()
}

/// Forward-backward Butterworth band-pass over `[low, high]` Hz.
///
/// The series is extended by odd reflection at both ends before filtering
/// to keep edge transients out of the returned samples.
pub fn bandpass(signal: &[f64], fps: f64, low: f64, high: f64) -> Result<Vec<f64>, HrError> {
    if !(low > 0.0 && low < high && fps > 2.0 * high) {
        return Err(HrError::InfeasibleBand { low, high, fps });
    }
    let n = signal.len();
    if n < super::MIN_SPECTRAL_SAMPLES {
        return Err(HrError::TooShort(n));
    }
    let pad = ((3.0 * fps / low).ceil() as usize).min(n - 1);
    let (first, last) = (signal[0], signal[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let secs = sections(fps, low, high);
    let mut y = filter_once(&secs, &ext);
    y.reverse();
    let mut y = filter_once(&secs, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}
