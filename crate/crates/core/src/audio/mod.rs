//! Deterministic signal transforms shared by every other module: STFT,
//! mel/MFCC extraction, log compression, band-limiting and segment shaping.

mod fft;
mod filter;
mod mel;
mod mfcc;
mod segment;
mod stft;

pub use fft::Fft;
pub use filter::{bandlimit, LowpassFilter};
pub use mel::{mel_spectrogram, MelConfig, MelFilterbank, MelSpectrogram, MelTransform};
pub use mfcc::{mfcc, mfcc_with, MFCC_COEFFICIENTS};
pub use segment::{shape_segment, ShapeMode};
pub use stft::{istft, reflect_index, stft, Spectrogram, SpectrogramConfig, WindowKind};

use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Result, SAMPLE_RATE};

/// Mono sample buffer with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveformSegment {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl WaveformSegment {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { samples, sample_rate })
    }

    /// 8 kHz segment.
    pub fn at_8k(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: alloc::vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.energy() / self.samples.len() as f64).sqrt()
    }

    pub fn require_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate != expected {
            return Err(Error::SampleRate {
                expected,
                got: self.sample_rate,
            });
        }
        Ok(())
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}
