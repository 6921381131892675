//! Adam with decoupled weight decay and an exponential per-epoch schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::nn::{GradMap, Module, Param};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled decay; zero gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    /// AdamW with betas (0.9, 0.99).
    pub fn adamw(lr: f64) -> Self {
        Self {
            lr,
            betas: (0.9, 0.99),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// Adam with the common (0.9, 0.999) betas and no decay.
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("optimizer hyperparameters out of range".into()))
        }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            lr: cfg.lr,
            state: AdamState::default(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn load_state(&mut self, state: AdamState) {
        self.state = state;
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, grads: &GradMap) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (lr, eps, wd) = (self.lr, self.cfg.eps, self.cfg.weight_decay);
        let state = &mut self.state;
        model.visit_params_mut(&mut |p: &mut Param| {
            let Some(g) = grads.get(&p.name) else {
                return;
            };
            let n = p.value.numel();
            let m = state.m.entry(p.name.clone()).or_insert_with(|| alloc::vec![0.0; n]);
            let v = state.v.entry(p.name.clone()).or_insert_with(|| alloc::vec![0.0; n]);
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w *= 1.0 - lr * wd;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// `lr(epoch) = base * gamma^epoch`, stepped once per completed epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExponentialLr {
    pub base_lr: f64,
    pub gamma: f64,
}

impl ExponentialLr {
    pub fn new(base_lr: f64, gamma: f64) -> Result<Self> {
        if !(base_lr > 0.0 && gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig("lr > 0 and 0 < gamma <= 1 required".into()));
        }
        Ok(Self { base_lr, gamma })
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.base_lr * self.gamma.powi(epoch as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::Tensor;

    struct Quad(Param);

    impl Module for Quad {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut q = Quad(Param::new("w", Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap()));
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::adamw(0.1)
        })
        .unwrap();
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::new(&[2], alloc::vec![3.0, -0.5]).unwrap());
        opt.step(&mut q, &g);
        // The bias-corrected first step is lr * sign(g).
        assert!((q.0.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((q.0.value.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad(Param::new("w", Tensor::new(&[3], alloc::vec![2.0, -3.0, 0.5]).unwrap()));
        let mut opt = Adam::new(AdamConfig::adamw(0.05)).unwrap();
        for _ in 0..2000 {
            let mut g = GradMap::new();
            g.insert("w".into(), q.0.value.map(|v| 2.0 * v));
            opt.step(&mut q, &g);
        }
        assert!(q.0.value.max_abs() < 1e-2);
        assert_eq!(opt.config().betas, (0.9, 0.99));
    }

    #[test]
    fn schedule() {
        let s = ExponentialLr::new(1e-4, 0.999).unwrap();
        assert_eq!(s.lr_at(0), 1e-4);
        assert!((s.lr_at(10) - 9.9004e-5).abs() < 1e-9);
        assert!(ExponentialLr::new(1e-4, 1.5).is_err());
    }
}
