//! Magnitude-domain enhancer used as a conditioning source.
//!
//! The spectral map is a residual stack of 3x3 convolutions over the
//! `[bins, frames]` magnitude image with time dilations 1, 2, 4, 8, 16,
//! followed by a rectifier so predicted magnitudes stay non-negative. The
//! enhanced waveform reuses the noisy phase.

use alloc::format;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::audio::{istft, stft, Spectrogram, SpectrogramConfig, WaveformSegment};
use crate::autodiff::{stft_magnitude, Conv2dSpec, MagnitudeMode, Var};
use crate::nn::{Binder, Conv2d, Init, Module, Norm, Param};
use crate::rng::Rng;
use crate::{Error, Result, Tensor, SAMPLE_RATE};

const HIDDEN_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WvnConfig {
    pub channels: usize,
    pub time_dilations: Vec<usize>,
    pub stft: SpectrogramConfig,
    pub init_std: f64,
}

impl WvnConfig {
    pub fn paper() -> Self {
        Self {
            channels: 32,
            time_dilations: alloc::vec![1, 2, 4, 8, 16],
            stft: SpectrogramConfig::paper(),
            init_std: 0.01,
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: 8,
            ..Self::paper()
        }
    }

    /// Frames seen by one output frame.
    pub fn receptive_field_frames(&self) -> usize {
        // Input and output layers add one frame each side; every dilated
        // layer adds its dilation each side.
        1 + 2 * (2 + self.time_dilations.iter().sum::<usize>())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.time_dilations.contains(&0) {
            return Err(Error::InvalidConfig(
                "WVN channels and dilations must be positive".into(),
            ));
        }
        if self.receptive_field_frames() < 32 {
            return Err(Error::InvalidConfig(format!(
                "WVN receptive field {} frames < 32",
                self.receptive_field_frames()
            )));
        }
        self.stft.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WvnModel {
    cfg: WvnConfig,
    input: Conv2d,
    dilated: Vec<Conv2d>,
    output: Conv2d,
}

fn spec(dilation_t: usize) -> Conv2dSpec {
    Conv2dSpec {
        stride: (1, 1),
        padding: (1, dilation_t),
        dilation: (1, dilation_t),
    }
}

impl WvnModel {
    pub fn new(cfg: WvnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let init = Init { std: cfg.init_std };
        let c = cfg.channels;
        let input = Conv2d::new("wvn.input", 1, c, (3, 3), spec(1), Norm::None, init, rng);
        let dilated = cfg
            .time_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv2d::new(
                    &format!("wvn.dilated.{i}"),
                    c,
                    c,
                    (3, 3),
                    spec(d),
                    Norm::None,
                    init,
                    rng,
                )
            })
            .collect();
        let output = Conv2d::new("wvn.output", c, 1, (3, 3), spec(1), Norm::None, init, rng);
        Ok(Self {
            cfg,
            input,
            dilated,
            output,
        })
    }

    pub fn config(&self) -> &WvnConfig {
        &self.cfg
    }

    pub fn receptive_field_frames(&self) -> usize {
        self.cfg.receptive_field_frames()
    }

    /// Zeroes the output layer so the map passes magnitudes through.
    pub fn make_identity(&mut self) {
        self.output
            .visit_params_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    /// Magnitudes `[B, bins, T]` to predicted magnitudes of the same shape.
    pub fn forward(&self, b: &mut Binder, mag: &Var) -> Result<Var> {
        let [batch, bins, frames] = *mag.shape() else {
            return Err(Error::Shape(format!("WVN expects [B, bins, T], got {:?}", mag.shape())));
        };
        if bins != self.cfg.stft.n_bins() {
            return Err(Error::Shape(format!(
                "WVN expects {} bins, got {bins}",
                self.cfg.stft.n_bins()
            )));
        }
        let x = mag.reshape(&[batch, 1, bins, frames]);
        let mut h = self.input.forward(b, &x).leaky_relu(HIDDEN_SLOPE);
        for c in &self.dilated {
            h = c.forward(b, &h).leaky_relu(HIDDEN_SLOPE).add(&h);
        }
        let y = self.output.forward(b, &h).add(&x).relu();
        Ok(y.reshape(&[batch, bins, frames]))
    }

    /// Mean squared error between predicted and clean magnitudes for `[B, L]`
    /// waveform batches.
    pub fn loss(&self, b: &mut Binder, noisy: &Tensor, clean: &Tensor) -> Result<Var> {
        if noisy.shape() != clean.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", noisy.shape(), clean.shape())));
        }
        let mag = |t: &Tensor| stft_magnitude(&Var::constant(t.clone()), &self.cfg.stft, MagnitudeMode::Exact);
        let pred = self.forward(b, &mag(noisy))?;
        Ok(pred.sub(&mag(clean)).square().mean())
    }

    /// Enhanced spectrogram: predicted magnitude with the noisy phase.
    pub fn enhance_spectrogram(&self, noisy: &WaveformSegment) -> Result<Spectrogram> {
        noisy.require_rate(SAMPLE_RATE)?;
        let mut spec = stft(noisy, &self.cfg.stft)?;
        let (bins, frames) = (spec.bins, spec.frames);
        let mags = Tensor::new(&[1, bins, frames], spec.magnitude())?;
        let pred = self.forward(&mut Binder::frozen(), &Var::constant(mags))?;
        for (z, &m) in spec.data.iter_mut().zip(pred.value().data()) {
            let r = z.norm();
            *z = if r > 0.0 { *z * (m / r) } else { Complex64::new(m, 0.0) };
        }
        Ok(spec)
    }

    pub fn enhance(&self, noisy: &WaveformSegment) -> Result<WaveformSegment> {
        let spec = self.enhance_spectrogram(noisy)?;
        WaveformSegment::new(istft(&spec, &self.cfg.stft, noisy.len())?, SAMPLE_RATE)
    }
}

impl Module for WvnModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.input.visit_params(f);
        self.dilated.visit_params(f);
        self.output.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.input.visit_params_mut(f);
        self.dilated.visit_params_mut(f);
        self.output.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    fn noise(len: usize, seed: u64) -> WaveformSegment {
        WaveformSegment::at_8k(normal_tensor(&[len], 0.3, &mut seeded(seed)).into_data()).unwrap()
    }

    #[test]
    fn identity_round_trip_and_lengths() {
        let mut m = WvnModel::new(WvnConfig::toy(), &mut seeded(1)).unwrap();
        m.make_identity();
        for len in [8000, 17231, 32000] {
            let x = noise(len, len as u64);
            let y = m.enhance(&x).unwrap();
            assert_eq!(y.len(), len);
            let err: f64 = x
                .samples()
                .iter()
                .zip(y.samples())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err / x.energy().sqrt() < 1e-3);
        }
    }

    #[test]
    fn zero_in_zero_out_and_rate_check() {
        let m = WvnModel::new(WvnConfig::toy(), &mut seeded(1)).unwrap();
        let y = m.enhance(&WaveformSegment::silence(4000, 8000)).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
        let wrong = WaveformSegment::new(alloc::vec![0.1; 100], 16000).unwrap();
        assert!(matches!(m.enhance(&wrong), Err(Error::SampleRate { .. })));
    }

    #[test]
    fn phase_is_preserved_and_magnitudes_nonnegative() {
        let m = WvnModel::new(
            WvnConfig {
                init_std: 0.3,
                ..WvnConfig::toy()
            },
            &mut seeded(2),
        )
        .unwrap();
        let x = noise(6000, 3);
        let input = stft(&x, &m.config().stft).unwrap();
        let out = m.enhance_spectrogram(&x).unwrap();
        for (a, b) in input.data.iter().zip(&out.data) {
            assert!(b.norm() >= 0.0);
            if a.norm() > 0.0 && b.norm() > 0.0 {
                assert!((a.arg() - b.arg()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn receptive_field() {
        assert_eq!(WvnConfig::paper().receptive_field_frames(), 67);
        let short = WvnConfig {
            time_dilations: alloc::vec![1, 2],
            ..WvnConfig::toy()
        };
        assert!(short.validate().is_err());
    }
}
