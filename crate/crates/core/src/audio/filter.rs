//! Zero-phase low-pass filtering.
//!
//! The filter is an 8th-order Chebyshev type II design in second-order
//! sections, with its stop band starting at 1.25 × cutoff. It is applied
//! forward and backward, so the effective magnitude response is squared and
//! the phase is zero.

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use num_traits::Float;

use super::WaveformSegment;
use crate::{Error, Result};

const ORDER: usize = 8;
/// Stop-band attenuation of a single pass.
const STOP_ATTEN_DB: f64 = 40.0;
const STOP_EDGE_RATIO: f64 = 1.25;
/// Odd-extension length at each edge before forward-backward filtering.
const MAX_PAD: usize = 512;

/// Biquad `[b0, b1, b2, a1, a2]` with `a0 = 1`, transposed direct form II.
type Section = [f64; 5];

#[derive(Clone, Debug, PartialEq)]
pub struct LowpassFilter {
    sections: Vec<Section>,
    cutoff_hz: f64,
    stop_hz: f64,
    sample_rate: u32,
}

impl LowpassFilter {
    pub fn design(cutoff_hz: f64, sample_rate: u32) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
            return Err(Error::CutoffOutOfRange {
                cutoff: cutoff_hz,
                nyquist,
            });
        }
        // Near Nyquist the stop edge is pulled inside the band.
        let stop_hz = (cutoff_hz * STOP_EDGE_RATIO).min(0.98 * nyquist);
        let fs = sample_rate as f64;
        let warped = 2.0 * fs * (PI * stop_hz / fs).tan();

        let eps = 1.0 / (10f64.powf(STOP_ATTEN_DB / 10.0) - 1.0).sqrt();
        let mu = (1.0 / eps).asinh() / ORDER as f64;
        let mut sections = Vec::with_capacity(ORDER / 2);
        for k in 0..ORDER / 2 {
            let theta = PI * (2 * k + 1) as f64 / (2 * ORDER) as f64;
            // Chebyshev I prototype pole, inverted for type II.
            let cheb1 = Complex64::new(-mu.sinh() * theta.sin(), mu.cosh() * theta.cos());
            let pole = Complex64::new(1.0, 0.0) / cheb1 * warped;
            let zero = Complex64::new(0.0, warped / theta.cos());
            let bilinear = |s: Complex64| (Complex64::new(2.0 * fs, 0.0) + s) / (Complex64::new(2.0 * fs, 0.0) - s);
            let (zd, pd) = (bilinear(zero), bilinear(pole));
            let mut b = [1.0, -2.0 * zd.re, zd.norm_sqr()];
            let a = [-2.0 * pd.re, pd.norm_sqr()];
            let dc = (b[0] + b[1] + b[2]) / (1.0 + a[0] + a[1]);
            b.iter_mut().for_each(|v| *v /= dc);
            sections.push([b[0], b[1], b[2], a[0], a[1]]);
        }
        Ok(Self {
            sections,
            cutoff_hz,
            stop_hz,
            sample_rate,
        })
    }

    pub fn cutoff_hz(&self) -> f64 {
        self.cutoff_hz
    }

    pub fn stop_hz(&self) -> f64 {
        self.stop_hz
    }

    /// Magnitude of one pass at `freq_hz`, in dB.
    pub fn single_pass_response_db(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate as f64;
        let z1 = Complex64::new(w.cos(), -w.sin());
        let z2 = z1 * z1;
        let h: Complex64 = self
            .sections
            .iter()
            .map(|s| (s[0] + z1 * s[1] + z2 * s[2]) / (1.0 + z1 * s[3] + z2 * s[4]))
            .product();
        20.0 * h.norm().max(1e-300).log10()
    }

    /// Forward-backward application with odd extension at both edges and
    /// steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        if n == 1 {
            // A constant passes at unit DC gain.
            return x.to_vec();
        }
        let pad = MAX_PAD.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    fn run(&self, x: &mut [f64], initial: f64) {
        for s in &self.sections {
            let [b0, b1, b2, a1, a2] = *s;
            // Steady state for a constant input at unit DC gain.
            let mut z2 = (b2 - a2) * initial;
            let mut z1 = (b1 - a1) * initial + z2;
            for v in x.iter_mut() {
                let input = *v;
                let y = b0 * input + z1;
                z1 = b1 * input - a1 * y + z2;
                z2 = b2 * input - a2 * y;
                *v = y;
            }
        }
    }
}

/// Zero-phase low-pass at `cutoff_hz`; same length as the input.
pub fn bandlimit(w: &WaveformSegment, cutoff_hz: f64) -> Result<WaveformSegment> {
    let filter = LowpassFilter::design(cutoff_hz, w.sample_rate())?;
    Ok(w.with_samples(filter.filtfilt(w.samples())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SAMPLE_RATE;
    use proptest::prelude::*;

    fn tone(freq: f64, len: usize) -> WaveformSegment {
        WaveformSegment::at_8k(
            (0..len)
                .map(|i| (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
        )
        .unwrap()
    }

    fn db(a: f64, b: f64) -> f64 {
        20.0 * (a / b).log10()
    }

    #[test]
    fn passband_tone_keeps_level() {
        let x = tone(200.0, 32000);
        let y = bandlimit(&x, 1000.0).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(db(y.rms(), x.rms()).abs() < 1.0);
    }

    #[test]
    fn stopband_tone_is_suppressed_by_40_db() {
        let x = tone(3000.0, 32000);
        let y = bandlimit(&x, 1000.0).unwrap();
        assert!(db(y.rms(), x.rms()) <= -40.0, "{} dB", db(y.rms(), x.rms()));
    }

    #[test]
    fn design_meets_stopband_everywhere_above_edge() {
        let f = LowpassFilter::design(1000.0, SAMPLE_RATE).unwrap();
        assert!(f.single_pass_response_db(0.0).abs() < 1e-9);
        let mut freq = 1250.0;
        while freq < 4000.0 {
            // Two passes double the attenuation.
            assert!(2.0 * f.single_pass_response_db(freq) <= -40.0, "{freq} Hz");
            freq += 7.0;
        }
        assert!(2.0 * f.single_pass_response_db(800.0) > -0.05);
        assert!(2.0 * f.single_pass_response_db(1000.0) > -3.0);
    }

    #[test]
    fn zero_in_zero_out() {
        let y = bandlimit(&WaveformSegment::silence(1000, SAMPLE_RATE), 1000.0).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cutoff_must_be_below_nyquist() {
        let x = tone(100.0, 100);
        assert!(matches!(bandlimit(&x, 4000.0), Err(Error::CutoffOutOfRange { .. })));
        assert!(bandlimit(&x, 0.0).is_err());
        assert!(bandlimit(&x, 3900.0).is_ok());
    }

    #[test]
    fn short_signals_are_handled() {
        for len in [1, 2, 5, 40] {
            assert_eq!(bandlimit(&tone(300.0, len), 1000.0).unwrap().len(), len);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        /// Idempotence on faded multitones without energy in the transition band.
        #[test]
        fn idempotent_outside_transition_band(
            low in proptest::collection::vec((20.0f64..750.0, 0.1f64..1.0, 0.0f64..6.3), 1..4),
            high in proptest::collection::vec((1300.0f64..3900.0, 0.1f64..1.0, 0.0f64..6.3), 0..4),
        ) {
            let len = 16000;
            const FADE: usize = 256;
            let x: Vec<f64> = (0..len)
                .map(|i| {
                    let t = i as f64 / SAMPLE_RATE as f64;
                    let fade = (i.min(len - 1 - i) as f64 / FADE as f64).min(1.0);
                    let fade = 0.5 - 0.5 * (PI * fade).cos();
                    fade * low.iter().chain(&high).map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>()
                })
                .collect();
            let w = WaveformSegment::at_8k(x).unwrap();
            let once = bandlimit(&w, 1000.0).unwrap();
            let twice = bandlimit(&once, 1000.0).unwrap();
            let diff: f64 = once.samples().iter().zip(twice.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = once.energy().sqrt();
            prop_assert!(diff / norm < 1e-3, "relative change {}", diff / norm);
        }
    }
}
