use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use num_traits::Float;

use super::{Fft, WaveformSegment};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum WindowKind {
    #[default]
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpectrogramConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub window: WindowKind,
}

impl SpectrogramConfig {
    pub fn new(n_fft: usize, hop: usize, win_length: usize) -> Result<Self> {
        let c = Self {
            n_fft,
            hop,
            win_length,
            window: WindowKind::Hann,
        };
        c.validate()?;
        Ok(c)
    }

    /// n_fft 1024, hop 128, window 512.
    pub const fn paper() -> Self {
        Self {
            n_fft: 1024,
            hop: 128,
            win_length: 512,
            window: WindowKind::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.hop == 0 || self.win_length == 0 {
            return Err(Error::InvalidConfig("STFT sizes must be positive".into()));
        }
        if self.win_length > self.n_fft || self.hop > self.win_length {
            return Err(Error::InvalidConfig(alloc::format!(
                "STFT needs hop <= win_length <= n_fft, got hop {} win {} n_fft {}",
                self.hop,
                self.win_length,
                self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced by centered framing: `floor(len / hop) + 1`.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Periodic window of `win_length`, zero-padded and centered in `n_fft`.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let offset = (self.n_fft - self.win_length) / 2;
        match self.window {
            WindowKind::Hann => {
                for i in 0..self.win_length {
                    w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / self.win_length as f64).cos();
                }
            }
        }
        w
    }
}

/// Mirror index into `0..n` without repeating the edge sample, valid for any
/// offset (repeated reflection for pads longer than the signal).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// One-sided complex spectrogram stored bin-major: `data[bin * frames + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Linear STFT with centered, reflect-padded framing.
pub fn stft(w: &WaveformSegment, c: &SpectrogramConfig) -> Result<Spectrogram> {
    c.validate()?;
    if w.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(stft_samples(w.samples(), c))
}

pub(crate) fn stft_samples(x: &[f64], c: &SpectrogramConfig) -> Spectrogram {
    let n = x.len();
    let pad = (c.n_fft / 2) as isize;
    let frames = c.n_frames(n);
    let bins = c.n_bins();
    let window = c.window();
    let fft = Fft::new(c.n_fft);
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); c.n_fft];
    for t in 0..frames {
        let start = (t * c.hop) as isize - pad;
        for (i, b) in buf.iter_mut().enumerate() {
            let v = x[reflect_index(start + i as isize, n)];
            *b = Complex64::new(v * window[i], 0.0);
        }
        fft.forward(&mut buf);
        for k in 0..bins {
            data[k * frames + t] = buf[k];
        }
    }
    Spectrogram { bins, frames, data }
}

/// Inverse of [`stft`] by windowed overlap-add, normalized by the summed
/// squared window; returns exactly `length` samples.
pub fn istft(spec: &Spectrogram, c: &SpectrogramConfig, length: usize) -> Result<Vec<f64>> {
    c.validate()?;
    if spec.bins != c.n_bins() {
        return Err(Error::Shape(alloc::format!(
            "spectrogram has {} bins, config expects {}",
            spec.bins,
            c.n_bins()
        )));
    }
    let n_fft = c.n_fft;
    let pad = n_fft / 2;
    let total = n_fft + c.hop * (spec.frames.saturating_sub(1));
    let window = c.window();
    let fft = Fft::new(n_fft);
    let mut out = vec![0.0; total];
    let mut env = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..spec.frames {
        for k in 0..n_fft {
            buf[k] = if k < spec.bins {
                spec.at(k, t)
            } else {
                spec.at(n_fft - k, t).conj()
            };
        }
        // DC and Nyquist bins of a real signal are real.
        buf[0].im = 0.0;
        if n_fft % 2 == 0 {
            buf[n_fft / 2].im = 0.0;
        }
        fft.inverse_unnormalized(&mut buf);
        let start = t * c.hop;
        for i in 0..n_fft {
            out[start + i] += buf[i].re / n_fft as f64 * window[i];
            env[start + i] += window[i] * window[i];
        }
    }
    let mut result = vec![0.0; length];
    for (i, r) in result.iter_mut().enumerate() {
        let j = i + pad;
        if j < total && env[j] > 1e-11 {
            *r = out[j] / env[j];
        }
    }
    Ok(result)
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

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn zero_input_gives_zero_matrix_of_expected_shape() {
        let s = stft(
            &WaveformSegment::silence(32000, SAMPLE_RATE),
            &SpectrogramConfig::paper(),
        )
        .unwrap();
        assert_eq!((s.bins, s.frames), (513, 251));
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn empty_input_is_rejected() {
        let e = stft(&WaveformSegment::silence(0, SAMPLE_RATE), &SpectrogramConfig::paper());
        assert_eq!(e, Err(Error::EmptyInput));
    }

    #[test]
    fn tone_peaks_at_analytic_bin() {
        let s = stft(&tone(500.0, 32000), &SpectrogramConfig::paper()).unwrap();
        let expected = (500.0f64 * 1024.0 / 8000.0).round() as usize;
        assert_eq!(expected, 64);
        for t in 4..s.frames - 4 {
            let peak = (0..s.bins)
                .max_by(|&a, &b| s.at(a, t).norm().partial_cmp(&s.at(b, t).norm()).unwrap())
                .unwrap();
            assert_eq!(peak, expected, "frame {t}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SpectrogramConfig::new(512, 128, 1024).is_err());
        assert!(SpectrogramConfig::new(1024, 600, 512).is_err());
        assert!(SpectrogramConfig::new(1024, 128, 512).is_ok());
    }

    #[test]
    fn weighted_parseval_identity_and_energy_sanity() {
        let c = SpectrogramConfig::paper();
        let x = noise(32000, 9);
        let s = stft_samples(&x, &c);
        // Full-spectrum energy from the one-sided bins.
        let mut spec_energy = 0.0;
        for k in 0..s.bins {
            let mult = if k == 0 || k == c.n_fft / 2 { 1.0 } else { 2.0 };
            for t in 0..s.frames {
                spec_energy += mult * s.at(k, t).norm_sqr();
            }
        }
        spec_energy /= c.n_fft as f64;
        // Exact identity: sum over frames of windowed sample energy.
        let window = c.window();
        let pad = (c.n_fft / 2) as isize;
        let mut framed = 0.0;
        for t in 0..s.frames {
            for (i, w) in window.iter().enumerate() {
                let v = x[reflect_index((t * c.hop) as isize - pad + i as isize, x.len())];
                framed += (w * v).powi(2);
            }
        }
        assert!((spec_energy - framed).abs() / framed < 1e-10);
        // Sanity against plain signal energy under the window normalization.
        let norm: f64 = window.iter().map(|w| w * w).sum::<f64>() / c.hop as f64;
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert!((spec_energy / norm - energy).abs() / energy < 0.01);
    }

    #[test]
    fn istft_inverts_stft() {
        let c = SpectrogramConfig::paper();
        for len in [8000, 17231, 32000] {
            let x = noise(len, len as u64);
            let s = stft_samples(&x, &c);
            let y = istft(&s, &c, len).unwrap();
            let err: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err / norm < 1e-9, "len {len}: {}", err / norm);
        }
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn stft_is_linear(scale in -4.0f64..4.0, seed in 0u64..1000) {
            let c = SpectrogramConfig::new(256, 64, 256).unwrap();
            let x = noise(2000, seed);
            let a = stft_samples(&x, &c);
            let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let b = stft_samples(&xs, &c);
            for (p, q) in a.data.iter().zip(&b.data) {
                prop_assert!((p * scale - q).norm() < 1e-9);
            }
        }
    }
}
