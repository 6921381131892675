//! Mel-to-waveform generator: transposed-convolution upsampling interleaved
//! with multi-receptive-field residual stacks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::audio::{MelSpectrogram, WaveformSegment};
use crate::autodiff::{Conv1dSpec, Var};
use crate::nn::{Binder, Conv1d, ConvTranspose1d, Init, Module, Norm, Param};
use crate::rng::{seeded, Rng};
use crate::{Error, Result, Tensor, N_MELS, SAMPLE_RATE};

const RESBLOCK_SLOPE: f64 = 0.1;
/// Slope of the activation in front of the output convolution.
const POST_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeneratorConfig {
    pub upsample_rates: Vec<usize>,
    pub upsample_kernels: Vec<usize>,
    pub base_channels: usize,
    pub mrf_kernels: Vec<usize>,
    pub mrf_dilations: Vec<Vec<usize>>,
    pub n_mels: usize,
}

impl GeneratorConfig {
    /// Rates (8, 8, 2) for a 128-sample hop, 512 base channels.
    pub fn paper() -> Self {
        Self {
            upsample_rates: vec![8, 8, 2],
            upsample_kernels: vec![16, 16, 4],
            base_channels: 512,
            mrf_kernels: vec![3, 7, 11],
            mrf_dilations: vec![vec![1, 3, 5]; 3],
            n_mels: N_MELS,
        }
    }

    /// Rates (4, 4, 2) for a 32-sample hop, 32 base channels.
    pub fn toy() -> Self {
        Self {
            upsample_rates: vec![4, 4, 2],
            upsample_kernels: vec![8, 8, 4],
            base_channels: 32,
            ..Self::paper()
        }
    }

    pub fn hop(&self) -> usize {
        self.upsample_rates.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("generator: {m}")));
        if self.upsample_rates.is_empty() || self.upsample_rates.contains(&0) {
            return bad("upsample rates must be positive");
        }
        if self.upsample_kernels.len() != self.upsample_rates.len() {
            return bad("one kernel per upsample rate");
        }
        if self
            .upsample_kernels
            .iter()
            .zip(&self.upsample_rates)
            .any(|(k, r)| *k != 2 * r)
        {
            return bad("each upsample kernel must be twice its rate");
        }
        if self.base_channels >> self.upsample_rates.len() == 0 {
            return bad("base_channels too small for the number of stages");
        }
        if self.mrf_kernels.is_empty() || self.mrf_kernels.len() != self.mrf_dilations.len() {
            return bad("one dilation list per MRF kernel");
        }
        if self.mrf_kernels.iter().any(|k| k % 2 == 0) {
            return bad("MRF kernels must be odd");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        Ok(())
    }
}

/// Residual block with dilated convolution pairs.
#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    dilated: Vec<Conv1d>,
    plain: Vec<Conv1d>,
}

impl ResBlock {
    fn new(name: &str, ch: usize, kernel: usize, dilations: &[usize], rng: &mut Rng) -> Self {
        let conv = |n: String, d: usize, rng: &mut Rng| {
            let spec = Conv1dSpec::new(1, d * (kernel - 1) / 2, d, 1);
            Conv1d::new(&n, ch, ch, kernel, spec, Norm::Weight, Init::default(), rng)
        };
        let mut dilated = Vec::new();
        let mut plain = Vec::new();
        for (j, &d) in dilations.iter().enumerate() {
            dilated.push(conv(format!("{name}.convs1.{j}"), d, rng));
            plain.push(conv(format!("{name}.convs2.{j}"), 1, rng));
        }
        Self { dilated, plain }
    }

    fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let mut x = x.clone();
        for (c1, c2) in self.dilated.iter().zip(&self.plain) {
            let h = c1.forward(b, &x.leaky_relu(RESBLOCK_SLOPE));
            let h = c2.forward(b, &h.leaky_relu(RESBLOCK_SLOPE));
            x = h.add(&x);
        }
        x
    }
}

impl Module for ResBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.dilated.visit_params(f);
        self.plain.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.dilated.visit_params_mut(f);
        self.plain.visit_params_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    cfg: GeneratorConfig,
    conv_pre: Conv1d,
    ups: Vec<ConvTranspose1d>,
    /// `mrf_kernels.len()` blocks per stage, stage-major.
    resblocks: Vec<ResBlock>,
    conv_post: Conv1d,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let init = Init::default();
        let c0 = cfg.base_channels;
        let conv_pre = Conv1d::new(
            "gen.conv_pre",
            cfg.n_mels,
            c0,
            7,
            Conv1dSpec::new(1, 3, 1, 1),
            Norm::Weight,
            init,
            rng,
        );
        let mut ups = Vec::new();
        let mut resblocks = Vec::new();
        for (i, (&u, &k)) in cfg.upsample_rates.iter().zip(&cfg.upsample_kernels).enumerate() {
            let (cin, cout) = (c0 >> i, c0 >> (i + 1));
            ups.push(ConvTranspose1d::new(
                &format!("gen.ups.{i}"),
                cin,
                cout,
                k,
                u,
                (k - u) / 2,
                Norm::Weight,
                init,
                rng,
            ));
            for (j, (&rk, dil)) in cfg.mrf_kernels.iter().zip(&cfg.mrf_dilations).enumerate() {
                let idx = i * cfg.mrf_kernels.len() + j;
                resblocks.push(ResBlock::new(&format!("gen.resblocks.{idx}"), cout, rk, dil, rng));
            }
        }
        let last = c0 >> cfg.upsample_rates.len();
        let conv_post = Conv1d::new(
            "gen.conv_post",
            last,
            1,
            7,
            Conv1dSpec::new(1, 3, 1, 1),
            Norm::Weight,
            init,
            rng,
        );
        Ok(Self {
            cfg,
            conv_pre,
            ups,
            resblocks,
            conv_post,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// `[B, n_mels, T]` log-mel to `[B, hop * T]` samples in `[-1, 1]`.
    pub fn forward(&self, b: &mut Binder, mel: &Var) -> Result<Var> {
        let shape = mel.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("generator expects [B, n_mels, T], got {shape:?}")));
        }
        if shape[1] != self.cfg.n_mels {
            return Err(Error::ConditioningBins(shape[1]));
        }
        if shape[2] == 0 {
            return Err(Error::EmptyInput);
        }
        let batch = shape[0];
        let n_k = self.cfg.mrf_kernels.len();
        let mut x = self.conv_pre.forward(b, mel);
        for (i, up) in self.ups.iter().enumerate() {
            x = up.forward(b, &x.leaky_relu(RESBLOCK_SLOPE));
            let mut acc: Option<Var> = None;
            for block in &self.resblocks[i * n_k..(i + 1) * n_k] {
                let y = block.forward(b, &x);
                acc = Some(match acc {
                    Some(a) => a.add(&y),
                    None => y,
                });
            }
            x = acc.expect("at least one MRF kernel").scale(1.0 / n_k as f64);
        }
        let y = self.conv_post.forward(b, &x.leaky_relu(POST_SLOPE)).tanh();
        let len = y.shape()[2];
        Ok(y.reshape(&[batch, len]))
    }

    /// Graph-free synthesis of one utterance.
    pub fn synthesize(&self, mel: &MelSpectrogram) -> Result<WaveformSegment> {
        if mel.n_mels() != self.cfg.n_mels {
            return Err(Error::ConditioningBins(mel.n_mels()));
        }
        let x = Var::constant(mel.values.reshape(&[1, mel.n_mels(), mel.frames()])?);
        let y = self.forward(&mut Binder::frozen(), &x)?;
        WaveformSegment::new(y.value().data().to_vec(), SAMPLE_RATE)
    }

    /// Graph-free synthesis of a `[B, n_mels, T]` batch.
    pub fn synthesize_batch(&self, mels: &Tensor) -> Result<Tensor> {
        Ok(self
            .forward(&mut Binder::frozen(), &Var::constant(mels.clone()))?
            .value()
            .clone())
    }
}

impl Module for Generator {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv_pre.visit_params(f);
        self.ups.visit_params(f);
        self.resblocks.visit_params(f);
        self.conv_post.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv_pre.visit_params_mut(f);
        self.ups.visit_params_mut(f);
        self.resblocks.visit_params_mut(f);
        self.conv_post.visit_params_mut(f);
    }
}

/// Exact trainable parameter count of a generator built from `cfg`.
pub fn count_parameters(cfg: &GeneratorConfig) -> Result<usize> {
    Ok(Generator::new(cfg.clone(), &mut seeded(0))?.parameter_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn toy() -> Generator {
        Generator::new(GeneratorConfig::toy(), &mut seeded(4)).unwrap()
    }

    fn mel(frames: usize, seed: u64) -> Tensor {
        normal_tensor(&[1, N_MELS, frames], 1.0, &mut seeded(seed)).map(|v| v - 4.0)
    }

    #[test]
    fn length_law_and_range() {
        let g = toy();
        assert_eq!(g.config().hop(), 32);
        for t in [1, 7, 10] {
            let y = g.synthesize_batch(&mel(t, 1)).unwrap();
            assert_eq!(y.shape(), &[1, 32 * t]);
            assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn deterministic() {
        let g = toy();
        let m = mel(9, 2);
        assert_eq!(g.synthesize_batch(&m).unwrap(), g.synthesize_batch(&m).unwrap());
    }

    #[test]
    fn wrong_bin_count_is_rejected() {
        let x = Var::constant(Tensor::zeros(&[1, 79, 4]));
        assert!(matches!(
            toy().forward(&mut Binder::frozen(), &x),
            Err(Error::ConditioningBins(79))
        ));
    }

    #[test]
    fn conditioning_receives_gradient() {
        let g = toy();
        let x = Var::param(mel(6, 3));
        let y = g.forward(&mut Binder::frozen(), &x).unwrap();
        let grads = y.square().mean().backward();
        assert!(grads.get(&x).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn parameter_count_is_monotone_in_width() {
        let small = count_parameters(&GeneratorConfig::toy()).unwrap();
        assert_eq!(small, count_parameters(&GeneratorConfig::toy()).unwrap());
        let wide = GeneratorConfig {
            base_channels: 64,
            ..GeneratorConfig::toy()
        };
        assert!(count_parameters(&wide).unwrap() > small);
    }

    #[test]
    fn config_validation() {
        let mut c = GeneratorConfig::toy();
        c.upsample_kernels[0] = 7;
        assert!(c.validate().is_err());
        assert_eq!(GeneratorConfig::paper().hop(), 128);
    }
}
