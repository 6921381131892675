//! Training objectives: high-band weighted mel L1, multi-resolution STFT,
//! least-squares adversarial terms, feature matching and their composites.
//!
//! Every batched loss takes `[B, L]` waveforms as graph values and returns a
//! scalar graph value. The `*_weighted`/`mrstft`/`pretrain_loss` free functions
//! on [`WaveformSegment`] are value-only conveniences over the same code.

use alloc::format;
use alloc::vec::Vec;

use crate::audio::{MelConfig, MelTransform, SpectrogramConfig, WaveformSegment};
use crate::autodiff::{stft_magnitude, MagnitudeMode, Var};
use crate::discriminators::{DiscriminatorOutput, FamilyOutputs};
use crate::instrumentation::DiscriminatorFamily;
use crate::{Error, Result, Tensor, SAMPLE_RATE};

/// Power floor under the square root of the MR-STFT magnitudes.
pub const MRSTFT_POWER_FLOOR: f64 = 1e-8;
/// Guard on the spectral-convergence denominator.
pub const SC_DENOM_FLOOR: f64 = 1e-8;
/// Scale of the summed feature-matching distances.
pub const FEATURE_MATCH_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_mel: f64,
    pub lambda_stft: f64,
    pub w_high: f64,
    pub f_c: f64,
    pub gamma_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mel: 45.0,
            lambda_stft: 5.0,
            w_high: 5.0,
            f_c: 1000.0,
            gamma_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let positive = [self.lambda_mel, self.lambda_stft, self.w_high]
            .iter()
            .all(|v| *v > 0.0);
        if !positive || !(self.gamma_adv >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be positive".into()));
        }
        if !(self.f_c > 0.0 && self.f_c < nyquist) {
            return Err(Error::InvalidConfig(format!("f_c {} outside (0, {nyquist})", self.f_c)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MrStftConfig {
    pub fft_sizes: Vec<usize>,
    pub hops: Vec<usize>,
    pub wins: Vec<usize>,
    pub w_sc: f64,
    pub w_logmag: f64,
    pub w_linmag: f64,
}

impl Default for MrStftConfig {
    fn default() -> Self {
        Self {
            fft_sizes: alloc::vec![256, 512, 1024],
            hops: alloc::vec![64, 128, 256],
            wins: alloc::vec![256, 512, 1024],
            w_sc: 1.0,
            w_logmag: 1.0,
            w_linmag: 0.0,
        }
    }
}

impl MrStftConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.fft_sizes.len();
        if n == 0 || self.hops.len() != n || self.wins.len() != n {
            return Err(Error::InvalidConfig(
                "MR-STFT lists must have equal nonzero length".into(),
            ));
        }
        for i in 0..n {
            if self.hops[i] * 4 != self.fft_sizes[i] || self.wins[i] != self.fft_sizes[i] {
                return Err(Error::InvalidConfig("MR-STFT requires hop = N/4 and win = N".into()));
            }
        }
        self.resolutions().map(|_| ())
    }

    pub fn resolutions(&self) -> Result<Vec<SpectrogramConfig>> {
        (0..self.fft_sizes.len())
            .map(|i| SpectrogramConfig::new(self.fft_sizes[i], self.hops[i], self.wins[i]))
            .collect()
    }
}

/// Precomputed transforms and weights for the reconstruction losses.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub weights: LossWeights,
    pub mrstft: MrStftConfig,
    phi: MelTransform,
    bin_weights: Vec<f64>,
    resolutions: Vec<SpectrogramConfig>,
}

impl LossContext {
    /// `stft` sets the framing of the full-band mel transform.
    pub fn new(weights: LossWeights, mrstft: MrStftConfig, stft: SpectrogramConfig) -> Result<Self> {
        weights.validate(SAMPLE_RATE)?;
        mrstft.validate()?;
        let phi = MelTransform::new(SAMPLE_RATE, stft, MelConfig::full_band())?;
        let bin_weights = high_band_weights(phi.filterbank().centers_hz(), weights.f_c, weights.w_high);
        let resolutions = mrstft.resolutions()?;
        Ok(Self {
            weights,
            mrstft,
            phi,
            bin_weights,
            resolutions,
        })
    }

    pub fn paper() -> Self {
        Self::new(
            LossWeights::default(),
            MrStftConfig::default(),
            SpectrogramConfig::paper(),
        )
        .expect("paper defaults are valid")
    }

    pub fn phi_transform(&self) -> &MelTransform {
        &self.phi
    }

    /// Per-mel-bin weights `w_m`.
    pub fn bin_weights(&self) -> &[f64] {
        &self.bin_weights
    }

    /// Full-band log-mel `[B, n_mels, T]`.
    pub fn phi(&self, x: &Var) -> Var {
        self.phi.forward(x)
    }

    /// Weighted mel L1 on precomputed log-mels.
    pub fn mel_l1_from_mels(&self, mel_x: &Var, mel_xhat: &Var) -> Result<Var> {
        if mel_x.shape() != mel_xhat.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", mel_x.shape(), mel_xhat.shape())));
        }
        let shape = mel_x.shape();
        let frames = shape[2];
        let w = Tensor::from_fn(shape, |i| self.bin_weights[(i / frames) % shape[1]]);
        Ok(mel_x
            .sub(mel_xhat)
            .abs()
            .mul_const(&w)
            .mean()
            .scale(self.weights.lambda_mel))
    }

    pub fn mel_l1(&self, x: &Var, xhat: &Var) -> Result<Var> {
        check_pair(x, xhat)?;
        self.mel_l1_from_mels(&self.phi(x), &self.phi(xhat))
    }

    /// `lambda_stft` times the mean over resolutions of the weighted
    /// spectral-convergence, log-magnitude and linear-magnitude terms.
    pub fn mrstft(&self, x: &Var, xhat: &Var) -> Result<Var> {
        check_pair(x, xhat)?;
        let mode = MagnitudeMode::ClampPower(MRSTFT_POWER_FLOOR);
        let cfg = &self.mrstft;
        let mut total: Option<Var> = None;
        for res in &self.resolutions {
            let mx = stft_magnitude(x, res, mode);
            let my = stft_magnitude(xhat, res, mode);
            let mut term = spectral_convergence(&mx, &my).scale(cfg.w_sc);
            if cfg.w_logmag != 0.0 {
                term = term.add(&mx.ln().sub(&my.ln()).abs().mean().scale(cfg.w_logmag));
            }
            if cfg.w_linmag != 0.0 {
                term = term.add(&mx.sub(&my).abs().mean().scale(cfg.w_linmag));
            }
            total = Some(match total {
                Some(t) => t.add(&term),
                None => term,
            });
        }
        let n = self.resolutions.len() as f64;
        Ok(total.expect("validated non-empty").scale(self.weights.lambda_stft / n))
    }

    /// Mel L1 plus MR-STFT, nothing else.
    pub fn pretrain(&self, x: &Var, xhat: &Var) -> Result<Var> {
        Ok(self.mel_l1(x, xhat)?.add(&self.mrstft(x, xhat)?))
    }
}

fn check_pair(x: &Var, xhat: &Var) -> Result<()> {
    match (x.shape(), xhat.shape()) {
        ([bx, lx], [by, ly]) if bx == by => {
            if lx != ly {
                Err(Error::LengthMismatch { left: *lx, right: *ly })
            } else {
                Ok(())
            }
        }
        (a, b) => Err(Error::Shape(format!("expected matching [B, L], got {a:?} and {b:?}"))),
    }
}

/// Index of the mel centre nearest to `f_c`; bins above it get `w_high`.
fn high_band_weights(centers: &[f64], f_c: f64, w_high: f64) -> Vec<f64> {
    let pivot = centers
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - f_c).abs().total_cmp(&(b.1 - f_c).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    centers
        .iter()
        .map(|c| if *c > centers[pivot] { w_high } else { 1.0 })
        .collect()
}

/// Per-item `||X - Y||_F / max(||X||_F, floor)`, averaged over the batch.
fn spectral_convergence(x: &Var, y: &Var) -> Var {
    let num = x.sub(y).square().sum_per_batch().sqrt();
    let den = x.square().sum_per_batch().sqrt().clamp_min(SC_DENOM_FLOOR);
    num.div(&den).mean()
}

fn check_structure(real: &[DiscriminatorOutput], fake: &[DiscriminatorOutput]) -> Result<()> {
    if real.len() != fake.len() {
        return Err(Error::StructureMismatch(format!(
            "{} real vs {} fake outputs",
            real.len(),
            fake.len()
        )));
    }
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.scores.shape() != f.scores.shape() || r.features.len() != f.features.len() {
            return Err(Error::StructureMismatch(format!("sub-discriminator {i}")));
        }
        for (j, (a, b)) in r.features.iter().zip(&f.features).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::StructureMismatch(format!("sub-discriminator {i} feature {j}")));
            }
        }
    }
    Ok(())
}

fn sum_vars(mut terms: impl Iterator<Item = Var>) -> Var {
    let first = terms.next().unwrap_or_else(|| Var::constant(Tensor::scalar(0.0)));
    terms.fold(first, |acc, t| acc.add(&t))
}

/// `sum_k mean((1 - D_k(real))^2) + mean(D_k(fake)^2)`.
pub fn lsgan_d_loss(real: &[DiscriminatorOutput], fake: &[DiscriminatorOutput]) -> Result<Var> {
    check_structure(real, fake)?;
    Ok(sum_vars(real.iter().zip(fake).map(|(r, f)| {
        let r_term = r.scores.neg().add_scalar(1.0).square().mean();
        r_term.add(&f.scores.square().mean())
    })))
}

/// `sum_k mean((1 - D_k(fake))^2)`.
pub fn lsgan_g_loss(fake: &[DiscriminatorOutput]) -> Var {
    sum_vars(fake.iter().map(|f| f.scores.neg().add_scalar(1.0).square().mean()))
}

/// Scaled sum over sub-discriminators and layers of mean absolute feature
/// differences.
pub fn feature_match(real: &[DiscriminatorOutput], fake: &[DiscriminatorOutput]) -> Result<Var> {
    check_structure(real, fake)?;
    let terms = real
        .iter()
        .zip(fake)
        .flat_map(|(r, f)| r.features.iter().zip(&f.features).map(|(a, b)| a.sub(b).abs().mean()));
    Ok(sum_vars(terms).scale(FEATURE_MATCH_SCALE))
}

/// Scalar components of a generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorLossBreakdown {
    pub mel: f64,
    pub mrstft: Option<f64>,
    pub adv: f64,
    pub fm: f64,
    pub total: f64,
}

fn family_outputs<'a>(outs: &'a FamilyOutputs, family: DiscriminatorFamily) -> Result<&'a [DiscriminatorOutput]> {
    outs.get(&family)
        .map(Vec::as_slice)
        .ok_or(Error::MissingDiscriminator(family.name()))
}

/// `gamma * sum_D adv + fm + mel (+ mrstft)` over `families`.
///
/// `mel_x`/`mel_xhat` are the full-band log-mels of the target and estimate,
/// shared with the mel critic.
#[allow(clippy::too_many_arguments)]
pub fn generator_total(
    ctx: &LossContext,
    x: &Var,
    xhat: &Var,
    mel_x: &Var,
    mel_xhat: &Var,
    real: &FamilyOutputs,
    fake: &FamilyOutputs,
    families: &[DiscriminatorFamily],
    use_mrstft: bool,
) -> Result<(Var, GeneratorLossBreakdown)> {
    let mut adv = Vec::new();
    let mut fm = Vec::new();
    for &f in families {
        let (r, g) = (family_outputs(real, f)?, family_outputs(fake, f)?);
        adv.push(lsgan_g_loss(g));
        fm.push(feature_match(r, g)?);
    }
    let adv = sum_vars(adv.into_iter());
    let fm = sum_vars(fm.into_iter());
    let mel = ctx.mel_l1_from_mels(mel_x, mel_xhat)?;
    let mut total = adv.scale(ctx.weights.gamma_adv).add(&fm).add(&mel);
    let mut breakdown = GeneratorLossBreakdown {
        mel: mel.value().item(),
        adv: adv.value().item(),
        fm: fm.value().item(),
        ..Default::default()
    };
    if use_mrstft {
        let m = ctx.mrstft(x, xhat)?;
        breakdown.mrstft = Some(m.value().item());
        total = total.add(&m);
    }
    breakdown.total = total.value().item();
    Ok((total, breakdown))
}

/// `sum_D` LSGAN discriminator loss over `families`.
pub fn discriminator_total(
    real: &FamilyOutputs,
    fake: &FamilyOutputs,
    families: &[DiscriminatorFamily],
) -> Result<Var> {
    let mut terms = Vec::new();
    for &f in families {
        terms.push(lsgan_d_loss(family_outputs(real, f)?, family_outputs(fake, f)?)?);
    }
    Ok(sum_vars(terms.into_iter()))
}

fn pair_vars(x: &WaveformSegment, xhat: &WaveformSegment) -> Result<(Var, Var)> {
    if x.len() != xhat.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: xhat.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let v = |w: &WaveformSegment| Var::constant(Tensor::new(&[1, w.len()], w.samples().to_vec()).unwrap());
    Ok((v(x), v(xhat)))
}

/// Weighted mel L1 with the default 128-sample framing.
pub fn mel_l1_weighted(x: &WaveformSegment, xhat: &WaveformSegment, lw: LossWeights) -> Result<f64> {
    let ctx = LossContext::new(lw, MrStftConfig::default(), SpectrogramConfig::paper())?;
    let (a, b) = pair_vars(x, xhat)?;
    Ok(ctx.mel_l1(&a, &b)?.value().item())
}

pub fn mrstft(x: &WaveformSegment, xhat: &WaveformSegment, cfg: &MrStftConfig, lw: LossWeights) -> Result<f64> {
    let ctx = LossContext::new(lw, cfg.clone(), SpectrogramConfig::paper())?;
    let (a, b) = pair_vars(x, xhat)?;
    Ok(ctx.mrstft(&a, &b)?.value().item())
}

pub fn pretrain_loss(x: &WaveformSegment, xhat: &WaveformSegment, lw: LossWeights, cfg: &MrStftConfig) -> Result<f64> {
    let ctx = LossContext::new(lw, cfg.clone(), SpectrogramConfig::paper())?;
    let (a, b) = pair_vars(x, xhat)?;
    Ok(ctx.pretrain(&a, &b)?.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use crate::rng::{normal_tensor, seeded};
    use core::f64::consts::PI;

    fn tone(freq: f64, len: usize) -> WaveformSegment {
        WaveformSegment::at_8k((0..len).map(|i| (2.0 * PI * freq * i as f64 / 8000.0).sin()).collect()).unwrap()
    }

    fn noise(len: usize, seed: u64) -> WaveformSegment {
        WaveformSegment::at_8k(normal_tensor(&[len], 0.3, &mut seeded(seed)).into_data()).unwrap()
    }

    #[test]
    fn zero_on_identical_inputs() {
        let x = noise(4000, 1);
        let lw = LossWeights::default();
        assert_eq!(mel_l1_weighted(&x, &x, lw).unwrap(), 0.0);
        assert_eq!(mrstft(&x, &x, &MrStftConfig::default(), lw).unwrap(), 0.0);
        assert_eq!(pretrain_loss(&x, &x, lw, &MrStftConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn high_band_weight_ratio() {
        let ctx = LossContext::paper();
        let w = ctx.bin_weights();
        let lo = w.iter().position(|&v| v == 1.0).unwrap();
        let hi = w.iter().position(|&v| v == 5.0).unwrap();
        let (m, t) = (80, 5);
        let base = Var::constant(Tensor::zeros(&[1, m, t]));
        let bump = |bin: usize| {
            let mut d = Tensor::zeros(&[1, m, t]);
            d.data_mut()[bin * t + 2] = 0.7;
            Var::constant(d)
        };
        let l_lo = ctx.mel_l1_from_mels(&base, &bump(lo)).unwrap().value().item();
        let l_hi = ctx.mel_l1_from_mels(&base, &bump(hi)).unwrap().value().item();
        assert!((l_hi / l_lo - 5.0).abs() < 1e-12);
    }

    #[test]
    fn high_band_starts_above_nearest_centre_to_cutoff() {
        let ctx = LossContext::paper();
        let centers = ctx.phi_transform().filterbank().centers_hz();
        let first_high = ctx.bin_weights().iter().position(|&v| v == 5.0).unwrap();
        assert!(centers[first_high] > 1000.0);
        assert!(centers[first_high - 1] <= 1000.0 + 30.0);
    }

    #[test]
    fn mrstft_sign_invariant_and_tone_vs_silence() {
        let x = tone(440.0, 4000);
        let y = noise(4000, 3);
        let neg = |w: &WaveformSegment| WaveformSegment::at_8k(w.samples().iter().map(|v| -v).collect()).unwrap();
        let lw = LossWeights::default();
        let cfg = MrStftConfig::default();
        let a = mrstft(&x, &y, &cfg, lw).unwrap();
        let b = mrstft(&neg(&x), &neg(&y), &cfg, lw).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());

        let ctx = LossContext::paper();
        let (xv, zero) = pair_vars(&x, &WaveformSegment::silence(4000, 8000)).unwrap();
        for res in &ctx.resolutions {
            let mode = MagnitudeMode::ClampPower(MRSTFT_POWER_FLOOR);
            let sc = spectral_convergence(&stft_magnitude(&xv, res, mode), &stft_magnitude(&zero, res, mode));
            assert!((sc.value().item() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn pretrain_is_sum_of_components() {
        let (x, y) = (noise(3000, 4), noise(3000, 5));
        let lw = LossWeights::default();
        let cfg = MrStftConfig::default();
        let total = pretrain_loss(&x, &y, lw, &cfg).unwrap();
        let parts = mel_l1_weighted(&x, &y, lw).unwrap() + mrstft(&x, &y, &cfg, lw).unwrap();
        assert!((total - parts).abs() <= 1e-12 * total);
        assert!(total > 0.0);
        let doubled = LossWeights { lambda_mel: 90.0, ..lw };
        let ratio = mel_l1_weighted(&x, &y, doubled).unwrap() / mel_l1_weighted(&x, &y, lw).unwrap();
        assert!((ratio - 2.0).abs() < 1e-12);
        assert!(matches!(
            mel_l1_weighted(&x, &noise(10, 1), lw),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ctx = LossContext::paper();
        let x = Var::constant(normal_tensor(&[1, 2048], 0.3, &mut seeded(1)));
        let xhat = normal_tensor(&[1, 2048], 0.3, &mut seeded(2));
        let xm = x.clone();
        let err = max_rel_error(&[xhat.clone()], |v| ctx.mel_l1(&xm, &v[0]).unwrap(), 1e-6, 20);
        assert!(err < 1e-3, "mel: {err}");
        let err = max_rel_error(&[xhat], |v| ctx.mrstft(&x, &v[0]).unwrap(), 1e-6, 20);
        assert!(err < 1e-3, "mrstft: {err}");
    }

    #[test]
    fn adversarial_terms() {
        let out = |v: f64| DiscriminatorOutput {
            scores: Var::constant(Tensor::full(&[2, 6], v)),
            features: alloc::vec![Var::constant(Tensor::full(&[2, 3, 4], v))],
        };
        assert_eq!(lsgan_d_loss(&[out(1.0)], &[out(0.0)]).unwrap().value().item(), 0.0);
        assert_eq!(lsgan_g_loss(&[out(1.0), out(1.0)]).value().item(), 0.0);
        assert_eq!(feature_match(&[out(0.3)], &[out(0.3)]).unwrap().value().item(), 0.0);
        assert_eq!(lsgan_g_loss(&[out(0.0), out(0.0)]).value().item(), 2.0);
        assert!((feature_match(&[out(0.5)], &[out(0.0)]).unwrap().value().item() - 1.0).abs() < 1e-12);
        assert!(matches!(
            lsgan_d_loss(&[out(1.0)], &[]),
            Err(Error::StructureMismatch(_))
        ));
    }
}
