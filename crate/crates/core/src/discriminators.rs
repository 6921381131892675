//! Adversarial critics: multi-period (MPD) and multi-scale (MSD) waveform
//! discriminators and the two-branch multi-mel discriminator (MMD).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{avg_pool1d, Conv1dSpec, Conv2dSpec, Var};
use crate::instrumentation::{record_construction, DiscriminatorFamily};
use crate::nn::{Binder, Conv1d, Conv2d, Init, Module, Norm, Param};
use crate::rng::Rng;
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;
/// Minimum mel frames for three stride-2 reductions.
pub const MMD_MIN_FRAMES: usize = 8;

/// Scores `[B, N]` (flattened patch map per item) and the activations of every
/// layer before the output head.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    pub scores: Var,
    pub features: Vec<Var>,
}

impl DiscriminatorOutput {
    pub fn detached(&self) -> DiscriminatorOutput {
        DiscriminatorOutput {
            scores: self.scores.detach(),
            features: self.features.iter().map(Var::detach).collect(),
        }
    }
}

/// Outputs grouped by family, one entry per sub-discriminator.
pub type FamilyOutputs = BTreeMap<DiscriminatorFamily, Vec<DiscriminatorOutput>>;

fn default_init(fan_in: usize) -> Init {
    // Same variance as the usual uniform(±1/sqrt(fan_in)) layer default.
    Init {
        std: 1.0 / (3.0 * fan_in as f64).sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MpdConfig {
    pub periods: Vec<usize>,
    /// Output channels of the strided stack; the last entry is the unstrided
    /// layer before the head.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl MpdConfig {
    pub fn paper() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            channels: vec![32, 128, 512, 1024, 1024],
            kernel: 5,
            stride: 3,
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: vec![4, 8, 16, 32, 32],
            ..Self::paper()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.contains(&0) || self.channels.len() < 2 || self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig("MPD config".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MsdConfig {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub groups: Vec<usize>,
    pub scales: usize,
}

impl MsdConfig {
    pub fn paper() -> Self {
        Self {
            channels: vec![128, 128, 256, 512, 1024, 1024, 1024],
            kernels: vec![15, 41, 41, 41, 41, 41, 5],
            strides: vec![1, 2, 2, 4, 4, 1, 1],
            groups: vec![1, 4, 16, 16, 16, 16, 1],
            scales: 3,
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: vec![16, 16, 32, 64, 64, 64, 64],
            ..Self::paper()
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        let ok = n > 0
            && self.kernels.len() == n
            && self.strides.len() == n
            && self.groups.len() == n
            && self.scales > 0
            && self.kernels.iter().all(|k| k % 2 == 1)
            && (0..n).all(|i| {
                let cin = if i == 0 { 1 } else { self.channels[i - 1] };
                let g = self.groups[i];
                g > 0 && cin % g == 0 && self.channels[i] % g == 0
            });
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("MSD config".into()))
        }
    }
}

/// Layer constants of one MMD branch.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MmdBranchConfig {
    pub channel_plan: Vec<usize>,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub strides: Vec<(usize, usize)>,
}

impl MmdBranchConfig {
    pub fn paper() -> Self {
        Self {
            channel_plan: vec![1, 32, 64, 128, 256, 1],
            kernel: (3, 3),
            padding: (1, 1),
            strides: vec![(1, 1), (2, 2), (2, 2), (2, 2), (1, 1)],
        }
    }

    pub fn toy() -> Self {
        Self {
            channel_plan: vec![1, 4, 8, 16, 32, 1],
            ..Self::paper()
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.channel_plan.len();
        if n < 3 || self.strides.len() != n - 1 || self.channel_plan[0] != 1 || self.channel_plan[n - 1] != 1 {
            return Err(Error::InvalidConfig(
                "MMD channel plan must run 1 -> ... -> 1 with one stride per layer".into(),
            ));
        }
        Ok(())
    }

    /// Spatial dims of every layer output for an `h x w` input.
    pub fn layer_dims(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.strides.len());
        let (mut h, mut w) = (h, w);
        for &s in &self.strides {
            let spec = Conv2dSpec {
                stride: s,
                padding: self.padding,
                dilation: (1, 1),
            };
            (h, w) = spec.output_dims(h, w, self.kernel.0, self.kernel.1);
            dims.push((h, w));
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiscriminatorConfig {
    pub mpd: MpdConfig,
    pub msd: MsdConfig,
    pub mmd: MmdBranchConfig,
}

impl DiscriminatorConfig {
    pub fn paper() -> Self {
        Self {
            mpd: MpdConfig::paper(),
            msd: MsdConfig::paper(),
            mmd: MmdBranchConfig::paper(),
        }
    }

    pub fn toy() -> Self {
        Self {
            mpd: MpdConfig::toy(),
            msd: MsdConfig::toy(),
            mmd: MmdBranchConfig::toy(),
        }
    }
}

fn require_wave(x: &Var, min: usize) -> Result<(usize, usize)> {
    match x.shape() {
        [b, l] if *l >= min => Ok((*b, *l)),
        [_, l] => Err(Error::WaveformTooShort { len: *l, min }),
        s => Err(Error::Shape(format!("waveform batch must be [B, L], got {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodDiscriminator {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodDiscriminator {
    fn new(name: &str, period: usize, cfg: &MpdConfig, rng: &mut Rng) -> Self {
        let k = cfg.kernel;
        let mut convs = Vec::new();
        let mut cin = 1;
        let last = cfg.channels.len() - 1;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let stride = if i == last { 1 } else { cfg.stride };
            let spec = Conv1dSpec::new(stride, (k - 1) / 2, 1, 1);
            let n = format!("{name}.convs.{i}");
            convs.push(Conv1d::new(
                &n,
                cin,
                cout,
                k,
                spec,
                Norm::Weight,
                default_init(cin * k),
                rng,
            ));
            cin = cout;
        }
        let post = Conv1d::new(
            &format!("{name}.conv_post"),
            cin,
            1,
            3,
            Conv1dSpec::new(1, 1, 1, 1),
            Norm::Weight,
            default_init(cin * 3),
            rng,
        );
        Self { period, convs, post }
    }

    pub fn period(&self) -> usize {
        self.period
    }

    /// Rows of the period-strided grid after the reflect padding rule.
    pub fn grid_rows(&self, len: usize) -> usize {
        len.div_ceil(self.period)
    }

    fn forward(&self, b: &mut Binder, x: &Var) -> DiscriminatorOutput {
        let (batch, len) = (x.shape()[0], x.shape()[1]);
        let pad = (self.period - len % self.period) % self.period;
        let x = if pad > 0 { x.reflect_pad_last(0, pad) } else { x.clone() };
        // A (k, 1) kernel over the [rows, period] grid is a 1-D convolution
        // along rows for each phase independently.
        let mut h = x.fold_period(self.period);
        let mut features = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(b, &h).leaky_relu(LEAKY_SLOPE);
            features.push(h.clone());
        }
        let s = self.post.forward(b, &h);
        let n = s.value().numel() / batch;
        DiscriminatorOutput {
            scores: s.reshape(&[batch, n]),
            features,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mpd {
    pub subs: Vec<PeriodDiscriminator>,
}

impl Mpd {
    pub fn new(cfg: &MpdConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        record_construction(DiscriminatorFamily::Mpd);
        let subs = cfg
            .periods
            .iter()
            .enumerate()
            .map(|(i, &p)| PeriodDiscriminator::new(&format!("mpd.{i}"), p, cfg, rng))
            .collect();
        Ok(Self { subs })
    }

    pub fn min_len(&self) -> usize {
        self.subs.iter().map(|s| s.period).max().unwrap_or(1)
    }

    pub fn forward(&self, b: &mut Binder, x: &Var) -> Result<Vec<DiscriminatorOutput>> {
        require_wave(x, self.min_len())?;
        Ok(self.subs.iter().map(|s| s.forward(b, x)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleDiscriminator {
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl ScaleDiscriminator {
    fn new(name: &str, cfg: &MsdConfig, norm: Norm, rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let (k, g) = (cfg.kernels[i], cfg.groups[i]);
            let spec = Conv1dSpec::new(cfg.strides[i], (k - 1) / 2, 1, g);
            let n = format!("{name}.convs.{i}");
            convs.push(Conv1d::new(
                &n,
                cin,
                cout,
                k,
                spec,
                norm,
                default_init(cin / g * k),
                rng,
            ));
            cin = cout;
        }
        let post = Conv1d::new(
            &format!("{name}.conv_post"),
            cin,
            1,
            3,
            Conv1dSpec::new(1, 1, 1, 1),
            norm,
            default_init(cin * 3),
            rng,
        );
        Self { convs, post }
    }

    fn forward(&self, b: &mut Binder, x: &Var) -> DiscriminatorOutput {
        let batch = x.shape()[0];
        let mut h = x.reshape(&[batch, 1, x.shape()[1]]);
        let mut features = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(b, &h).leaky_relu(LEAKY_SLOPE);
            features.push(h.clone());
        }
        let s = self.post.forward(b, &h);
        let n = s.shape()[2];
        DiscriminatorOutput {
            scores: s.reshape(&[batch, n]),
            features,
        }
    }
}

/// Average pooling (kernel 4, stride 2) that halves the length, rounding up.
pub fn msd_pool(x: &Var) -> Var {
    let (batch, len) = (x.shape()[0], x.shape()[1]);
    let y = avg_pool1d(&x.reshape(&[batch, 1, len]), 4, 2, 1, 1 + len % 2);
    let n = y.shape()[2];
    y.reshape(&[batch, n])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Msd {
    pub subs: Vec<ScaleDiscriminator>,
}

pub const MSD_MIN_LEN: usize = 4;

impl Msd {
    pub fn new(cfg: &MsdConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        record_construction(DiscriminatorFamily::Msd);
        let subs = (0..cfg.scales)
            .map(|i| {
                let norm = if i == 0 { Norm::Spectral } else { Norm::Weight };
                ScaleDiscriminator::new(&format!("msd.{i}"), cfg, norm, rng)
            })
            .collect();
        Ok(Self { subs })
    }

    pub fn forward(&self, b: &mut Binder, x: &Var) -> Result<Vec<DiscriminatorOutput>> {
        require_wave(x, MSD_MIN_LEN)?;
        let mut out = Vec::with_capacity(self.subs.len());
        let mut x = x.clone();
        for (i, s) in self.subs.iter().enumerate() {
            if i > 0 {
                x = msd_pool(&x);
            }
            out.push(s.forward(b, &x));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdBranch {
    pub norm: Norm,
    convs: Vec<Conv2d>,
    post: Conv2d,
}

impl MmdBranch {
    fn new(name: &str, cfg: &MmdBranchConfig, norm: Norm, rng: &mut Rng) -> Self {
        let (kh, kw) = cfg.kernel;
        let mut layers: Vec<Conv2d> = cfg
            .channel_plan
            .windows(2)
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, (io, &stride))| {
                let spec = Conv2dSpec {
                    stride,
                    padding: cfg.padding,
                    dilation: (1, 1),
                };
                let n = format!("{name}.convs.{i}");
                Conv2d::new(
                    &n,
                    io[0],
                    io[1],
                    cfg.kernel,
                    spec,
                    norm,
                    default_init(io[0] * kh * kw),
                    rng,
                )
            })
            .collect();
        let post = layers.pop().expect("validated plan has a head");
        Self {
            norm,
            convs: layers,
            post,
        }
    }

    fn forward(&self, b: &mut Binder, x: &Var) -> DiscriminatorOutput {
        let batch = x.shape()[0];
        let mut h = x.clone();
        let mut features = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(b, &h).leaky_relu(LEAKY_SLOPE);
            features.push(h.clone());
        }
        let s = self.post.forward(b, &h);
        let n = s.value().numel() / batch;
        DiscriminatorOutput {
            scores: s.reshape(&[batch, n]),
            features,
        }
    }
}

/// Two parallel 2-D patch discriminators over mel spectrograms, one spectrally
/// normalized and one weight normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Mmd {
    pub branches: Vec<MmdBranch>,
    cfg: MmdBranchConfig,
}

impl Mmd {
    pub fn new(cfg: &MmdBranchConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        record_construction(DiscriminatorFamily::Mmd);
        let branches = vec![
            MmdBranch::new("mmd.0", cfg, Norm::Spectral, rng),
            MmdBranch::new("mmd.1", cfg, Norm::Weight, rng),
        ];
        Ok(Self {
            branches,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &MmdBranchConfig {
        &self.cfg
    }

    /// `mel`: `[B, 1, n_mels, T]` (or `[B, n_mels, T]`).
    pub fn forward(&self, b: &mut Binder, mel: &Var) -> Result<Vec<DiscriminatorOutput>> {
        let mel = match *mel.shape() {
            [batch, m, t] => mel.reshape(&[batch, 1, m, t]),
            [_, 1, _, _] => mel.clone(),
            ref s => return Err(Error::Shape(format!("MMD expects [B, 1, M, T], got {s:?}"))),
        };
        let frames = mel.shape()[3];
        if frames < MMD_MIN_FRAMES {
            return Err(Error::MelTooShortForMmd { frames });
        }
        Ok(self.branches.iter().map(|br| br.forward(b, &mel)).collect())
    }
}

/// The discriminator families used by one training configuration.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DiscriminatorSet {
    pub mpd: Option<Mpd>,
    pub msd: Option<Msd>,
    pub mmd: Option<Mmd>,
}

impl DiscriminatorSet {
    pub fn new(cfg: &DiscriminatorConfig, families: &[DiscriminatorFamily], rng: &mut Rng) -> Result<Self> {
        let mut set = DiscriminatorSet::default();
        for f in DiscriminatorFamily::ALL {
            if !families.contains(&f) {
                continue;
            }
            match f {
                DiscriminatorFamily::Mpd => set.mpd = Some(Mpd::new(&cfg.mpd, rng)?),
                DiscriminatorFamily::Msd => set.msd = Some(Msd::new(&cfg.msd, rng)?),
                DiscriminatorFamily::Mmd => set.mmd = Some(Mmd::new(&cfg.mmd, rng)?),
            }
        }
        Ok(set)
    }

    pub fn families(&self) -> Vec<DiscriminatorFamily> {
        let mut out = Vec::new();
        if self.mpd.is_some() {
            out.push(DiscriminatorFamily::Mpd);
        }
        if self.msd.is_some() {
            out.push(DiscriminatorFamily::Msd);
        }
        if self.mmd.is_some() {
            out.push(DiscriminatorFamily::Mmd);
        }
        out
    }

    /// Runs every family: waveform critics on `wave` `[B, L]`, the mel critic
    /// on `mel` `[B, n_mels, T]` (required when the MMD is present).
    pub fn forward(&self, b: &mut Binder, wave: &Var, mel: Option<&Var>) -> Result<FamilyOutputs> {
        let mut out = FamilyOutputs::new();
        if let Some(d) = &self.mpd {
            out.insert(DiscriminatorFamily::Mpd, d.forward(b, wave)?);
        }
        if let Some(d) = &self.msd {
            out.insert(DiscriminatorFamily::Msd, d.forward(b, wave)?);
        }
        if let Some(d) = &self.mmd {
            let mel = mel.ok_or(Error::MissingDiscriminator("MMD input mel"))?;
            out.insert(DiscriminatorFamily::Mmd, d.forward(b, mel)?);
        }
        Ok(out)
    }
}

macro_rules! forward_module {
    ($t:ty, $($field:ident),+) => {
        impl Module for $t {
            fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
                $(self.$field.visit_params(f);)+
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                $(self.$field.visit_params_mut(f);)+
            }
            fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
                $(self.$field.visit_buffers_mut(f);)+
            }
            fn update_spectral_norms(&mut self) {
                $(self.$field.update_spectral_norms();)+
            }
        }
    };
}

forward_module!(PeriodDiscriminator, convs, post);
forward_module!(ScaleDiscriminator, convs, post);
forward_module!(MmdBranch, convs, post);
forward_module!(Mpd, subs);
forward_module!(Msd, subs);
forward_module!(Mmd, branches);

forward_module!(DiscriminatorSet, mpd, msd, mmd);

/// Names of the families in a set, for diagnostics.
pub fn family_names(families: &[DiscriminatorFamily]) -> String {
    families.iter().map(|f| f.name()).collect::<Vec<_>>().join(", ")
}
