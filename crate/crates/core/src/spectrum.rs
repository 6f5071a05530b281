//! One-sided power spectra.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    Hann,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    /// Power of bins `0..=n/2`.
    pub power: Vec<f64>,
    /// Bin spacing in Hz (`fps / n`).
    pub bin_hz: f64,
}

impl PowerSpectrum {
    pub fn freq(&self, bin: usize) -> f64 {
        bin as f64 * self.bin_hz
    }

    /// Bins whose centre frequency lies in `[low, high]`.
    pub fn band_bins(&self, low: f64, high: f64) -> std::ops::RangeInclusive<usize> {
        let lo = (low / self.bin_hz - 1e-9).ceil().max(0.0) as usize;
        let hi = ((high / self.bin_hz + 1e-9).floor() as usize).min(self.power.len() - 1);
        lo..=hi
    }
}

/// Power spectrum of the mean-removed, windowed series.
pub fn power_spectrum(x: &[f64], fps: f64, window: Window) -> PowerSpectrum {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = match window {
                Window::Rectangular => 1.0,
                Window::Hann => 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos(),
            };
            Complex::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power = buf[..=n / 2].iter().map(|c| c.norm_sqr()).collect();
    PowerSpectrum { power, bin_hz: fps / n as f64 }
}

/// Welch-averaged power spectrum: Hann segments of `segment_len` samples
/// (clipped to the series length) with 50% overlap.
pub fn welch_spectrum(x: &[f64], fps: f64, segment_len: usize) -> PowerSpectrum {
    let seg = segment_len.min(x.len()).max(2);
    let hop = (seg / 2).max(1);
    let mut acc: Option<PowerSpectrum> = None;
    let mut count = 0usize;
    let mut start = 0;
    while start + seg <= x.len() {
        let s = power_spectrum(&x[start..start + seg], fps, Window::Hann);
        match acc.as_mut() {
            None => acc = Some(s),
            Some(a) => a.power.iter_mut().zip(&s.power).for_each(|(p, q)| *p += q),
        }
        count += 1;
        start += hop;
    }
    let mut acc = acc.expect("at least one segment");
    acc.power.iter_mut().for_each(|p| *p /= count as f64);
    acc
}
