use alloc::vec;

use num_traits::Float;

use super::{MelConfig, MelTransform, SpectrogramConfig, WaveformSegment};
use crate::{Result, Tensor};

pub const MFCC_COEFFICIENTS: usize = 13;

/// 13 MFCCs (c0 kept) from 80 full-band log-mels via an orthonormal DCT-II,
/// shape `[13, T]`.
pub fn mfcc(w: &WaveformSegment) -> Result<Tensor> {
    let transform = MelTransform::new(w.sample_rate(), SpectrogramConfig::paper(), MelConfig::full_band())?;
    mfcc_with(&transform, w, MFCC_COEFFICIENTS)
}

pub fn mfcc_with(transform: &MelTransform, w: &WaveformSegment, n_coef: usize) -> Result<Tensor> {
    let mel = transform.compute(w)?;
    let (n_mels, frames) = (mel.n_mels(), mel.frames());
    let n_coef = n_coef.min(n_mels);
    let basis = dct2_orthonormal(n_coef, n_mels);
    let mut out = vec![0.0; n_coef * frames];
    for k in 0..n_coef {
        for m in 0..n_mels {
            let b = basis[k * n_mels + m];
            let row = &mel.values.data()[m * frames..(m + 1) * frames];
            for (o, v) in out[k * frames..(k + 1) * frames].iter_mut().zip(row) {
                *o += b * v;
            }
        }
    }
    Tensor::new(&[n_coef, frames], out)
}

fn dct2_orthonormal(n_coef: usize, n: usize) -> alloc::vec::Vec<f64> {
    let mut basis = vec![0.0; n_coef * n];
    for k in 0..n_coef {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for m in 0..n {
            basis[k * n + m] = scale * (core::f64::consts::PI * k as f64 * (2 * m + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SAMPLE_RATE;

    fn noise(len: usize, seed: u64, scale: f64) -> WaveformSegment {
        let mut s = seed;
        WaveformSegment::at_8k(
            (0..len)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    scale * (((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_inputs_identical_features() {
        let w = noise(8000, 1, 0.3);
        assert_eq!(mfcc(&w).unwrap(), mfcc(&w.clone()).unwrap());
    }

    #[test]
    fn silence_gives_constant_dct() {
        let c = mfcc(&WaveformSegment::silence(8000, SAMPLE_RATE)).unwrap();
        assert_eq!(c.dim(0), 13);
        let frames = c.dim(1);
        let expected_c0 = 1e-5f64.ln() * (80.0f64).sqrt();
        for t in 0..frames {
            assert!((c.data()[t] - expected_c0).abs() < 1e-9);
            for k in 1..13 {
                assert!(c.data()[k * frames + t].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gain_only_moves_c0() {
        let a = mfcc(&noise(16000, 7, 0.5)).unwrap();
        let b = mfcc(&noise(16000, 7, 1.0)).unwrap();
        let frames = a.dim(1);
        let shift = 2.0f64.ln() * (80.0f64).sqrt();
        for t in 0..frames {
            assert!((b.data()[t] - a.data()[t] - shift).abs() < 1e-6);
            for k in 1..13 {
                let i = k * frames + t;
                assert!((a.data()[i] - b.data()[i]).abs() < 1e-6);
            }
        }
    }
}
