use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::stft::stft_samples;
use super::{SpectrogramConfig, WaveformSegment};
use crate::autodiff::{stft_magnitude, MagnitudeMode, Var};
use crate::{Error, Result, Tensor, N_MELS};

/// Power added under the square root when the magnitude must be
/// differentiable everywhere.
pub(crate) const DIFF_MAGNITUDE_EPS: f64 = 1e-18;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Energies are clamped to this value before the natural log.
    pub log_floor: f64,
}

impl MelConfig {
    /// 80 bins over 0-1000 Hz; the generator's conditioning band.
    pub const fn conditioning() -> Self {
        Self {
            n_mels: N_MELS,
            f_min: 0.0,
            f_max: 1000.0,
            log_floor: 1e-5,
        }
    }

    /// 80 bins over 0-4000 Hz; the transform the objectives and the mel
    /// discriminator see.
    pub const fn full_band() -> Self {
        Self {
            n_mels: N_MELS,
            f_min: 0.0,
            f_max: 4000.0,
            log_floor: 1e-5,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.f_max > nyquist {
            return Err(Error::MelBandExceedsNyquist {
                f_max: self.f_max,
                nyquist,
            });
        }
        if self.n_mels == 0 || !(self.f_min >= 0.0 && self.f_min < self.f_max) || self.log_floor <= 0.0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "mel config needs n_mels >= 1, 0 <= f_min < f_max, log_floor > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(f: f64) -> f64 {
    if f >= MIN_LOG_HZ {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / log_step()
    } else {
        f / F_SP
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    if m >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (m - MIN_LOG_MEL)).exp()
    } else {
        F_SP * m
    }
}

/// Triangular, area-normalized filters on the Slaney mel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    weights: Tensor,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, cfg: &MelConfig) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
            .collect();
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let norm = 2.0 / (right - left);
            for (k, &f) in bin_hz.iter().enumerate() {
                let rising = (f - left) / (center - left);
                let falling = (right - f) / (right - center);
                weights[m * n_bins + k] = rising.min(falling).max(0.0) * norm;
            }
        }
        Ok(Self {
            weights: Tensor::new(&[cfg.n_mels, n_bins], weights)?,
            centers_hz: points[1..=cfg.n_mels].to_vec(),
        })
    }

    /// `[n_mels, n_fft/2 + 1]`.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn n_mels(&self) -> usize {
        self.weights.dim(0)
    }
}

/// Log-compressed mel energies `[n_mels, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub config: MelConfig,
    pub hop: usize,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.values.dim(1)
    }

    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.values.data()[mel * self.frames() + frame]
    }
}

/// STFT configuration and mel filterbank bundled for repeated use.
#[derive(Clone, Debug, PartialEq)]
pub struct MelTransform {
    pub stft: SpectrogramConfig,
    pub mel: MelConfig,
    pub sample_rate: u32,
    filterbank: MelFilterbank,
}

impl MelTransform {
    pub fn new(sample_rate: u32, stft: SpectrogramConfig, mel: MelConfig) -> Result<Self> {
        stft.validate()?;
        let filterbank = MelFilterbank::new(sample_rate, stft.n_fft, &mel)?;
        Ok(Self {
            stft,
            mel,
            sample_rate,
            filterbank,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Exact-magnitude transform of one waveform.
    pub fn compute(&self, w: &WaveformSegment) -> Result<MelSpectrogram> {
        w.require_rate(self.sample_rate)?;
        if w.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(self.compute_samples(w.samples()))
    }

    pub(crate) fn compute_samples(&self, x: &[f64]) -> MelSpectrogram {
        let spec = stft_samples(x, &self.stft);
        let (bins, frames) = (spec.bins, spec.frames);
        let fb = self.filterbank.weights.data();
        let n_mels = self.mel.n_mels;
        let mags = spec.magnitude();
        let mut values = vec![0.0; n_mels * frames];
        for m in 0..n_mels {
            let dst = &mut values[m * frames..(m + 1) * frames];
            for k in 0..bins {
                let w = fb[m * bins + k];
                if w == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(&mags[k * frames..(k + 1) * frames]) {
                    *d += w * s;
                }
            }
        }
        let floor = self.mel.log_floor;
        values.iter_mut().for_each(|v| *v = v.max(floor).ln());
        MelSpectrogram {
            values: Tensor::new(&[n_mels, frames], values).unwrap(),
            config: self.mel,
            hop: self.stft.hop,
        }
    }

    /// Differentiable transform of a batch `[B, L]`, giving `[B, n_mels, T]`.
    pub fn forward(&self, x: &Var) -> Var {
        stft_magnitude(x, &self.stft, MagnitudeMode::Epsilon(DIFF_MAGNITUDE_EPS))
            .left_matmul_const(self.filterbank.weights())
            .clamp_min(self.mel.log_floor)
            .ln()
    }
}

/// `log(max(filterbank · |STFT(w)|, log_floor))`.
pub fn mel_spectrogram(w: &WaveformSegment, c: &SpectrogramConfig, m: &MelConfig) -> Result<MelSpectrogram> {
    MelTransform::new(w.sample_rate(), *c, *m)?.compute(w)
}
