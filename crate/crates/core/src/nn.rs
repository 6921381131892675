//! Parameters, weight reparameterizations and convolution layers.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{conv1d, conv2d, conv_transpose1d, Conv1dSpec, Conv2dSpec, Gradients, Var};
use crate::rng::{normal_tensor, Rng};
use crate::Tensor;

/// Gradients (or any per-parameter tensors) keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Adds `src` into `dst`, inserting missing entries.
pub fn accumulate(dst: &mut GradMap, src: GradMap) {
    for (k, v) in src {
        match dst.get_mut(&k) {
            Some(acc) => acc.add_assign(&v),
            None => {
                dst.insert(k, v);
            }
        }
    }
}

pub fn scale_grads(grads: &mut GradMap, s: f64) {
    grads.values_mut().for_each(|g| g.scale_assign(s));
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Trainable tensor with a stable name.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Non-trainable state (power-iteration vectors) that must survive a
    /// checkpoint round trip.
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Vec<f64>)) {}

    /// One power-iteration step for every spectrally normalized weight.
    fn update_spectral_norms(&mut self) {}

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out
    }
}

/// Turns parameters into graph leaves for one forward pass.
pub struct Binder {
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl Binder {
    /// Parameters become gradient-carrying leaves.
    pub fn trainable() -> Self {
        Self {
            trainable: true,
            vars: BTreeMap::new(),
        }
    }

    /// Parameters become constants; nothing is recorded.
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            vars: BTreeMap::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn bind(&mut self, p: &Param) -> Var {
        if !self.trainable {
            return Var::constant(p.value.clone());
        }
        self.vars
            .entry(p.name.clone())
            .or_insert_with(|| Var::param(p.value.clone()))
            .clone()
    }

    /// Gradients of every bound parameter (zeros when unused).
    pub fn grads(&self, g: &Gradients) -> GradMap {
        self.vars.iter().map(|(k, v)| (k.clone(), g.get_or_zeros(v))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Norm {
    #[default]
    None,
    Weight,
    Spectral,
}

/// A weight tensor, optionally reparameterized.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightParam {
    Plain(Param),
    /// `w = g * v / ||v||`, the norm taken over every axis but the first.
    WeightNorm {
        g: Param,
        v: Param,
    },
    /// `w = weight / sigma`, `sigma` estimated by power iteration on the
    /// weight viewed as `[shape[0], rest]`.
    Spectral {
        weight: Param,
        u: Vec<f64>,
        v: Vec<f64>,
    },
}

const SPECTRAL_INIT_MAX_ITERS: usize = 1000;

impl WeightParam {
    pub fn new(name: &str, init: Tensor, norm: Norm, rng: &mut Rng) -> Self {
        match norm {
            Norm::None => WeightParam::Plain(Param::new(format!("{name}.weight"), init)),
            Norm::Weight => {
                let norms = row_norms(&init);
                let g = Tensor::new(&[init.dim(0)], norms).unwrap();
                WeightParam::WeightNorm {
                    g: Param::new(format!("{name}.weight_g"), g),
                    v: Param::new(format!("{name}.weight_v"), init),
                }
            }
            Norm::Spectral => {
                let rows = init.dim(0);
                let cols = init.numel() / rows;
                let mut u = normal_tensor(&[rows], 1.0, rng).into_data();
                let mut v = normal_tensor(&[cols], 1.0, rng).into_data();
                normalize(&mut u);
                normalize(&mut v);
                let mut w = WeightParam::Spectral {
                    weight: Param::new(format!("{name}.weight_orig"), init),
                    u,
                    v,
                };
                w.converge_power_iteration();
                w
            }
        }
    }

    pub fn bind(&self, b: &mut Binder) -> Var {
        match self {
            WeightParam::Plain(p) => b.bind(p),
            WeightParam::WeightNorm { g, v } => weight_norm(&b.bind(g), &b.bind(v)),
            WeightParam::Spectral { weight, u, v } => spectral_normalize(&b.bind(weight), u, v),
        }
    }

    /// Effective weight value.
    pub fn effective(&self) -> Tensor {
        self.bind(&mut Binder::frozen()).value().clone()
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            WeightParam::Plain(p) => p.value.shape(),
            WeightParam::WeightNorm { v, .. } => v.value.shape(),
            WeightParam::Spectral { weight, .. } => weight.value.shape(),
        }
    }

    pub fn power_iteration(&mut self) {
        if let WeightParam::Spectral { weight, u, v } = self {
            power_step(&weight.value, u, v);
        }
    }

    /// Iterates until the singular value estimate settles.
    pub fn converge_power_iteration(&mut self) {
        if let WeightParam::Spectral { weight, u, v } = self {
            let mut prev = 0.0;
            for _ in 0..SPECTRAL_INIT_MAX_ITERS {
                let sigma = power_step(&weight.value, u, v);
                if (sigma - prev).abs() <= 1e-8 * sigma.abs() {
                    break;
                }
                prev = sigma;
            }
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match self {
            WeightParam::Plain(p) => f(p),
            WeightParam::WeightNorm { g, v } => {
                f(g);
                f(v);
            }
            WeightParam::Spectral { weight, .. } => f(weight),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            WeightParam::Plain(p) => f(p),
            WeightParam::WeightNorm { g, v } => {
                f(g);
                f(v);
            }
            WeightParam::Spectral { weight, .. } => f(weight),
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let WeightParam::Spectral { weight, u, v } = self {
            let base = weight.name.trim_end_matches(".weight_orig");
            f(&format!("{base}.sn_u"), u);
            f(&format!("{base}.sn_v"), v);
        }
    }
}

fn row_norms(w: &Tensor) -> Vec<f64> {
    let rows = w.dim(0);
    let cols = w.numel() / rows;
    w.data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter_mut().for_each(|v| *v /= n);
}

/// `v <- W^T u / |.|`, `u <- W v / |.|`; returns `u^T W v`.
fn power_step(w: &Tensor, u: &mut [f64], v: &mut [f64]) -> f64 {
    let rows = u.len();
    let cols = v.len();
    let wd = w.data();
    v.iter_mut().for_each(|x| *x = 0.0);
    for (r, &ur) in u.iter().enumerate() {
        for (vc, &wv) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
            *vc += ur * wv;
        }
    }
    normalize(v);
    for (r, ur) in u.iter_mut().enumerate() {
        *ur = wd[r * cols..(r + 1) * cols]
            .iter()
            .zip(v.iter())
            .map(|(a, b)| a * b)
            .sum();
    }
    let sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    normalize(u);
    debug_assert_eq!(rows * cols, w.numel());
    sigma
}

fn weight_norm(g: &Var, v: &Var) -> Var {
    let vt = v.value();
    let rows = vt.dim(0);
    let cols = vt.numel() / rows;
    let norms: Vec<f64> = row_norms(vt).into_iter().map(|n| n.max(1e-12)).collect();
    let gv = g.value().data();
    let mut out = vt.clone();
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        let s = gv[r] / norms[r];
        row.iter_mut().for_each(|x| *x *= s);
    }
    let (gc, vc) = (g.clone(), v.clone());
    Var::from_op(
        out,
        vec![g.clone(), v.clone()],
        Box::new(move |grad, _, needs| {
            let vd = vc.value().data();
            let gv = gc.value().data();
            let gd = grad.data();
            let mut dg = vec![0.0; rows];
            let mut dv = vec![0.0; rows * cols];
            for r in 0..rows {
                let vr = &vd[r * cols..(r + 1) * cols];
                let gr = &gd[r * cols..(r + 1) * cols];
                let n = norms[r];
                let dot: f64 = vr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dg[r] = dot / n;
                let s = gv[r] / n;
                let proj = dot / (n * n);
                for ((d, &gi), &vi) in dv[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(vr) {
                    *d = s * (gi - proj * vi);
                }
            }
            vec![
                needs[0].then(|| Tensor::new(gc.shape(), dg).unwrap()),
                needs[1].then(|| Tensor::new(vc.shape(), dv).unwrap()),
            ]
        }),
    )
}

fn spectral_normalize(w: &Var, u: &[f64], v: &[f64]) -> Var {
    let wt = w.value();
    let cols = v.len();
    let wd = wt.data();
    let sigma: f64 = u
        .iter()
        .enumerate()
        .map(|(r, &ur)| {
            ur * wd[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum();
    let sigma = if sigma.abs() < 1e-12 { 1e-12 } else { sigma };
    let out = wt.map(|x| x / sigma);
    let (wc, u, v) = (w.clone(), u.to_vec(), v.to_vec());
    Var::from_op(
        out,
        vec![w.clone()],
        Box::new(move |grad, _, _| {
            let gd = grad.data();
            let wd = wc.value().data();
            let dot: f64 = gd.iter().zip(wd).map(|(a, b)| a * b).sum();
            let c = dot / (sigma * sigma);
            let mut dw = vec![0.0; gd.len()];
            for (r, &ur) in u.iter().enumerate() {
                for (k, &vk) in v.iter().enumerate() {
                    let i = r * cols + k;
                    dw[i] = gd[i] / sigma - c * ur * vk;
                }
            }
            vec![Some(Tensor::new(wc.shape(), dw).unwrap())]
        }),
    )
}

fn bias_param(name: &str, n: usize) -> Param {
    Param::new(format!("{name}.bias"), Tensor::zeros(&[n]))
}

/// How layer weights are initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Init {
    pub std: f64,
}

impl Default for Init {
    fn default() -> Self {
        Self { std: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: WeightParam,
    pub bias: Param,
    pub spec: Conv1dSpec,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv1dSpec,
        norm: Norm,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = normal_tensor(&[out_ch, in_ch / spec.groups, kernel], init.std, rng);
        Self {
            weight: WeightParam::new(name, w, norm, rng),
            bias: bias_param(name, out_ch),
            spec,
        }
    }

    pub fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let w = self.weight.bind(b);
        let bias = b.bind(&self.bias);
        conv1d(x, &w, Some(&bias), self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose1d {
    pub weight: WeightParam,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        norm: Norm,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = normal_tensor(&[in_ch, out_ch, kernel], init.std, rng);
        Self {
            weight: WeightParam::new(name, w, norm, rng),
            bias: bias_param(name, out_ch),
            stride,
            padding,
        }
    }

    pub fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let w = self.weight.bind(b);
        let bias = b.bind(&self.bias);
        conv_transpose1d(x, &w, Some(&bias), self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: WeightParam,
    pub bias: Param,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        norm: Norm,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = normal_tensor(&[out_ch, in_ch, kernel.0, kernel.1], init.std, rng);
        Self {
            weight: WeightParam::new(name, w, norm, rng),
            bias: bias_param(name, out_ch),
            spec,
        }
    }

    pub fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let w = self.weight.bind(b);
        let bias = b.bind(&self.bias);
        conv2d(x, &w, Some(&bias), self.spec)
    }
}

macro_rules! impl_conv_module {
    ($t:ty) => {
        impl Module for $t {
            fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
                self.weight.visit(f);
                f(&self.bias);
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                self.weight.visit_mut(f);
                f(&mut self.bias);
            }
            fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
                self.weight.visit_buffers_mut(f);
            }
            fn update_spectral_norms(&mut self) {
                self.weight.power_iteration();
            }
        }
    };
}

impl_conv_module!(Conv1d);
impl_conv_module!(ConvTranspose1d);
impl_conv_module!(Conv2d);

impl<M: Module> Module for [M] {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.iter().for_each(|m| m.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(|m| m.visit_params_mut(f));
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.iter_mut().for_each(|m| m.visit_buffers_mut(f));
    }
    fn update_spectral_norms(&mut self) {
        self.iter_mut().for_each(|m| m.update_spectral_norms());
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.as_slice().visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.as_mut_slice().visit_params_mut(f)
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.as_mut_slice().visit_buffers_mut(f)
    }
    fn update_spectral_norms(&mut self) {
        self.as_mut_slice().update_spectral_norms()
    }
}

impl<M: Module> Module for Option<M> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(m) = self {
            m.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_params_mut(f);
        }
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let Some(m) = self {
            m.visit_buffers_mut(f);
        }
    }
    fn update_spectral_norms(&mut self) {
        if let Some(m) = self {
            m.update_spectral_norms();
        }
    }
}
