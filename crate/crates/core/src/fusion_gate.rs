//! Residual fusion gate: a frame-wise gated blend of the noisy mel `M_n` and
//! the enhancer mel `M_w`.
//!
//! ```text
//! R   = M_w - M_n
//! G_t = sigmoid(W [M_n[:,t]; R[:,t]] + b)
//! M_f = M_n + sigmoid(a) * G ⊙ R
//! ```

use alloc::format;

use crate::audio::MelSpectrogram;
use crate::autodiff::{concat_channels, conv1d, Conv1dSpec, Var};
use crate::nn::{Binder, Module, Param};
use crate::rng::{normal_tensor, Rng};
use crate::{Error, Result, Tensor};

pub const GATE_INIT_BIAS: f64 = -2.0;
pub const GATE_INIT_LOGIT: f64 = -2.0;
pub const GATE_INIT_WEIGHT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGateParams {
    /// `[n_mels, 2 * n_mels]`.
    pub mix_weights: Param,
    pub mix_bias: Param,
    /// Single-element global logit `a`.
    pub global_logit_a: Param,
}

pub fn init_gate(n_mels: usize, rng: &mut Rng) -> Result<FusionGateParams> {
    if n_mels == 0 {
        return Err(Error::InvalidConfig("n_mels must be positive".into()));
    }
    Ok(FusionGateParams {
        mix_weights: Param::new(
            "gate.mix_weights",
            normal_tensor(&[n_mels, 2 * n_mels], GATE_INIT_WEIGHT_STD, rng),
        ),
        mix_bias: Param::new("gate.mix_bias", Tensor::full(&[n_mels], GATE_INIT_BIAS)),
        global_logit_a: Param::new("gate.global_logit_a", Tensor::full(&[1], GATE_INIT_LOGIT)),
    })
}

impl FusionGateParams {
    pub fn n_mels(&self) -> usize {
        self.mix_bias.value.numel()
    }

    /// Differentiable fusion of batched mels `[B, n_mels, T]`.
    pub fn forward(&self, b: &mut Binder, m_n: &Var, m_w: &Var) -> Result<Var> {
        if m_n.shape() != m_w.shape() {
            return Err(Error::ConditioningShapeMismatch(format!(
                "{:?} vs {:?}",
                m_n.shape(),
                m_w.shape()
            )));
        }
        if m_n.shape().len() != 3 || m_n.shape()[1] != self.n_mels() {
            return Err(Error::ConditioningShapeMismatch(format!(
                "expected [B, {}, T], got {:?}",
                self.n_mels(),
                m_n.shape()
            )));
        }
        let m = self.n_mels();
        let residual = m_w.sub(m_n);
        let stacked = concat_channels(&[m_n.clone(), residual.clone()])?;
        let w = b.bind(&self.mix_weights).reshape(&[m, 2 * m, 1]);
        let bias = b.bind(&self.mix_bias);
        // A 1x1 convolution is the per-frame matrix product.
        let gate = conv1d(&stacked, &w, Some(&bias), Conv1dSpec::new(1, 0, 1, 1)).sigmoid();
        let scale = b.bind(&self.global_logit_a).sigmoid();
        Ok(m_n.add(&gate.mul(&residual).mul_scalar_var(&scale)))
    }
}

impl Module for FusionGateParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.mix_weights);
        f(&self.mix_bias);
        f(&self.global_logit_a);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.mix_weights);
        f(&mut self.mix_bias);
        f(&mut self.global_logit_a);
    }
}

/// Fuses two single-utterance mels.
pub fn fuse(m_n: &MelSpectrogram, m_w: &MelSpectrogram, p: &FusionGateParams) -> Result<MelSpectrogram> {
    if m_n.config != m_w.config || m_n.hop != m_w.hop {
        return Err(Error::ConditioningShapeMismatch("mel configurations differ".into()));
    }
    let shape = m_n.values.shape();
    if shape != m_w.values.shape() {
        return Err(Error::ConditioningShapeMismatch(format!(
            "{:?} vs {:?}",
            shape,
            m_w.values.shape()
        )));
    }
    let batched = |t: &Tensor| Var::constant(t.reshape(&[1, shape[0], shape[1]]).unwrap());
    let out = p.forward(&mut Binder::frozen(), &batched(&m_n.values), &batched(&m_w.values))?;
    Ok(MelSpectrogram {
        values: out.value().reshape(shape)?,
        config: m_n.config,
        hop: m_n.hop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use crate::rng::seeded;

    fn mel(values: Tensor) -> MelSpectrogram {
        MelSpectrogram {
            values,
            config: MelConfig::conditioning(),
            hop: 128,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        normal_tensor(shape, 2.0, &mut seeded(seed))
    }

    #[test]
    fn init_values() {
        let p = init_gate(80, &mut seeded(0)).unwrap();
        assert_eq!(p.global_logit_a.value.item(), -2.0);
        assert!(p.mix_bias.value.data().iter().all(|&b| b == -2.0));
        assert_eq!(p.mix_weights.value.shape(), &[80, 160]);
        assert_eq!(p, init_gate(80, &mut seeded(0)).unwrap());
        assert!(init_gate(0, &mut seeded(0)).is_err());
    }

    #[test]
    fn zero_residual_is_identity() {
        let p = init_gate(80, &mut seeded(3)).unwrap();
        let m = mel(random(&[80, 12], 1));
        assert_eq!(fuse(&m, &m, &p).unwrap().values, m.values);
    }

    #[test]
    fn zero_weights_blend_with_closed_form_coefficient() {
        let mut p = init_gate(80, &mut seeded(3)).unwrap();
        p.mix_weights.value = Tensor::zeros(&[80, 160]);
        let (n, w) = (mel(random(&[80, 6], 1)), mel(random(&[80, 6], 2)));
        let f = fuse(&n, &w, &p).unwrap();
        let s = 1.0 / (1.0 + 2f64.exp());
        for ((fv, nv), wv) in f.values.data().iter().zip(n.values.data()).zip(w.values.data()) {
            assert!((fv - (nv + s * s * (wv - nv))).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_hands_over() {
        let mut p = init_gate(80, &mut seeded(3)).unwrap();
        p.mix_weights.value = Tensor::zeros(&[80, 160]);
        p.mix_bias.value = Tensor::full(&[80], 60.0);
        p.global_logit_a.value = Tensor::full(&[1], 60.0);
        let (n, w) = (mel(random(&[80, 4], 1)), mel(random(&[80, 4], 2)));
        let f = fuse(&n, &w, &p).unwrap();
        for (a, b) in f.values.data().iter().zip(w.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_locality() {
        let p = init_gate(80, &mut seeded(9)).unwrap();
        let (n, w) = (mel(random(&[80, 5], 1)), mel(random(&[80, 5], 2)));
        let base = fuse(&n, &w, &p).unwrap();
        let mut w2 = w.clone();
        for m in 0..80 {
            w2.values.data_mut()[m * 5 + 2] += 1.0;
        }
        let moved = fuse(&n, &w2, &p).unwrap();
        for m in 0..80 {
            for t in 0..5 {
                let changed = base.at(m, t) != moved.at(m, t);
                assert_eq!(changed, t == 2, "mel {m} frame {t}");
            }
        }
    }

    #[test]
    fn mismatches_are_rejected() {
        let p = init_gate(80, &mut seeded(0)).unwrap();
        let a = mel(Tensor::zeros(&[80, 4]));
        let b = mel(Tensor::zeros(&[80, 5]));
        assert!(matches!(fuse(&a, &b, &p), Err(Error::ConditioningShapeMismatch(_))));
        let mut c = a.clone();
        c.config = MelConfig::full_band();
        assert!(matches!(fuse(&a, &c, &p), Err(Error::ConditioningShapeMismatch(_))));
    }
}
