use alloc::boxed::Box;
use alloc::vec;

use num_complex::Complex64;
use num_traits::Float;

use super::Var;
use crate::audio::{reflect_index, Fft, SpectrogramConfig};
use crate::Tensor;

/// How the magnitude is made differentiable near zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MagnitudeMode {
    /// `sqrt(re^2 + im^2)`; zero gradient at exactly zero power.
    Exact,
    /// `sqrt(re^2 + im^2 + eps)`.
    Epsilon(f64),
    /// `sqrt(max(re^2 + im^2, floor))`.
    ClampPower(f64),
}

impl MagnitudeMode {
    #[inline]
    fn apply(self, power: f64) -> (f64, bool) {
        match self {
            MagnitudeMode::Exact => (power.sqrt(), power > 0.0),
            MagnitudeMode::Epsilon(eps) => ((power + eps).sqrt(), true),
            MagnitudeMode::ClampPower(floor) => {
                if power > floor {
                    (power.sqrt(), true)
                } else {
                    (floor.sqrt(), false)
                }
            }
        }
    }
}

/// Centered STFT magnitude of `x` `[B, L]`, giving `[B, n_fft/2 + 1, T]`.
pub fn stft_magnitude(x: &Var, cfg: &SpectrogramConfig, mode: MagnitudeMode) -> Var {
    assert_eq!(x.shape().len(), 2, "stft_magnitude expects [B, L]");
    let (batch, len) = (x.shape()[0], x.shape()[1]);
    assert!(len > 0, "stft_magnitude of empty signal");
    let n_fft = cfg.n_fft;
    let hop = cfg.hop;
    let bins = cfg.n_bins();
    let frames = cfg.n_frames(len);
    let pad = (n_fft / 2) as isize;
    let window = cfg.window();
    let fft = Fft::new(n_fft);

    let mut mags = vec![0.0; batch * bins * frames];
    // d|X| / d re and d|X| / d im, kept for the backward pass.
    let mut dre = vec![0.0; batch * bins * frames];
    let mut dim = vec![0.0; batch * bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for b in 0..batch {
        let row = &x.value().data()[b * len..(b + 1) * len];
        for t in 0..frames {
            let start = (t * hop) as isize - pad;
            for (i, v) in buf.iter_mut().enumerate() {
                *v = Complex64::new(row[reflect_index(start + i as isize, len)] * window[i], 0.0);
            }
            fft.forward(&mut buf);
            for k in 0..bins {
                let idx = (b * bins + k) * frames + t;
                let c = buf[k];
                let (m, active) = mode.apply(c.norm_sqr());
                mags[idx] = m;
                if active && m > 0.0 {
                    dre[idx] = c.re / m;
                    dim[idx] = c.im / m;
                }
            }
        }
    }

    let cfg = *cfg;
    Var::from_op(
        Tensor::new(&[batch, bins, frames], mags).unwrap(),
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let window = cfg.window();
            let fft = Fft::new(n_fft);
            let gd = g.data();
            let mut dx = vec![0.0; batch * len];
            let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
            for b in 0..batch {
                let dxrow = &mut dx[b * len..(b + 1) * len];
                for t in 0..frames {
                    buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                    for k in 0..bins {
                        let idx = (b * bins + k) * frames + t;
                        buf[k] = Complex64::new(gd[idx] * dre[idx], gd[idx] * dim[idx]);
                    }
                    fft.inverse_unnormalized(&mut buf);
                    let start = (t * hop) as isize - pad;
                    for i in 0..n_fft {
                        if window[i] != 0.0 {
                            dxrow[reflect_index(start + i as isize, len)] += buf[i].re * window[i];
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[batch, len], dx).unwrap())]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{stft, WaveformSegment};
    use crate::autodiff::gradcheck::max_rel_error;
    use alloc::vec::Vec;

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
    fn matches_value_path() {
        let cfg = SpectrogramConfig::new(256, 64, 128).unwrap();
        let x = noise(900, 3);
        let m = stft_magnitude(
            &Var::constant(Tensor::new(&[1, 900], x.clone()).unwrap()),
            &cfg,
            MagnitudeMode::Exact,
        );
        let s = stft(&WaveformSegment::at_8k(x).unwrap(), &cfg).unwrap();
        assert_eq!(m.shape(), &[1, s.bins, s.frames]);
        for (a, b) in m.value().data().iter().zip(s.magnitude()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = SpectrogramConfig::new(64, 16, 48).unwrap();
        for mode in [MagnitudeMode::Epsilon(1e-9), MagnitudeMode::ClampPower(1e-8)] {
            let err = max_rel_error(
                &[Tensor::new(&[2, 100], noise(200, 5)).unwrap()],
                |v| stft_magnitude(&v[0], &cfg, mode).add_scalar(1.0).ln().sum(),
                1e-6,
                60,
            );
            assert!(err < 1e-5, "{mode:?}: relative error {err}");
        }
    }
}
