use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::Var;
use crate::audio::reflect_index;
use crate::{Error, Result, Tensor};

impl Var {
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let x = self.clone();
        let value = self.value().map(f);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let xv = x.value().data();
                let data = g
                    .data()
                    .iter()
                    .zip(xv)
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data).unwrap())]
            }),
        )
    }

    fn check_same_shape(&self, other: &Var, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Var) -> Var {
        self.check_same_shape(other, "add");
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.check_same_shape(other, "sub");
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.check_same_shape(other, "mul");
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(b.value(), |g, b| g * b)),
                    needs[1].then(|| g.zip_map(a.value(), |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        self.check_same_shape(other, "div");
        let value = self.value().zip_map(other.value(), |a, b| a / b);
        let (a, b) = (self.clone(), other.clone());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, needs| {
                let bv = b.value();
                vec![
                    needs[0].then(|| g.zip_map(bv, |g, b| g / b)),
                    needs[1].then(|| {
                        let q = a.value().zip_map(bv, |a, b| a / (b * b));
                        g.zip_map(&q, |g, q| -g * q)
                    }),
                ]
            }),
        )
    }

    /// Multiplies every element by the single element of `s`.
    pub fn mul_scalar_var(&self, s: &Var) -> Var {
        assert_eq!(s.value().numel(), 1, "mul_scalar_var expects a one-element scale");
        let sv = s.value().item();
        let value = self.value().map(|v| v * sv);
        let x = self.clone();
        let s_shape = s.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone(), s.clone()],
            Box::new(move |g, _, needs| {
                let gs = needs[1].then(|| {
                    let dot: f64 = g.data().iter().zip(x.value().data()).map(|(a, b)| a * b).sum();
                    Tensor::new(&s_shape, vec![dot]).unwrap()
                });
                vec![needs[0].then(|| g.map(|v| v * sv)), gs]
            }),
        )
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor) -> Var {
        assert_eq!(self.shape(), c.shape(), "mul_const shape mismatch");
        let value = self.value().zip_map(c, |a, b| a * b);
        let c = c.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.zip_map(&c, |g, c| g * c))]),
        )
    }

    /// Scales each batch item `b` (axis 0) by `c[b]`.
    pub fn scale_per_batch(&self, c: &[f64]) -> Var {
        let b = self.shape()[0];
        assert_eq!(b, c.len(), "scale_per_batch length mismatch");
        let inner = self.value().numel() / b.max(1);
        let mut value = self.value().clone();
        for (i, chunk) in value.data_mut().chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= c[i]);
        }
        let c = c.to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut g = g.clone();
                for (i, chunk) in g.data_mut().chunks_mut(inner.max(1)).enumerate() {
                    chunk.iter_mut().for_each(|v| *v *= c[i]);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary(move |v| v + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Var {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(
            move |v| if v >= 0.0 { v } else { slope * v },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&self) -> Var {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Var {
        self.unary(move |v| v.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel().max(1) as f64;
        self.sum().unary(move |v| v / n, move |_, _| 1.0 / n)
    }

    /// Sums every axis but the first, giving shape `[B]`.
    pub fn sum_per_batch(&self) -> Var {
        let shape = self.shape().to_vec();
        let b = shape[0];
        let inner = self.value().numel() / b.max(1);
        let sums: Vec<f64> = self
            .value()
            .data()
            .chunks(inner.max(1))
            .map(|c| c.iter().sum())
            .collect();
        Var::from_op(
            Tensor::new(&[b], sums).unwrap(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut out = Tensor::zeros(&shape);
                for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = g.data()[i]);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old = self.shape().to_vec();
        let value = self
            .value()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", old, shape));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.reshape(&old).unwrap())]),
        )
    }

    /// Keeps `len` elements of the last axis starting at `start`.
    pub fn narrow_last(&self, start: usize, len: usize) -> Var {
        let shape = self.shape().to_vec();
        let last = *shape.last().expect("narrow_last on scalar");
        assert!(start + len <= last, "narrow_last out of range");
        let outer = self.value().numel() / last.max(1);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let mut data = Vec::with_capacity(outer * len);
        for row in self.value().data().chunks(last) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Var::from_op(
            Tensor::new(&out_shape, data).unwrap(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut out = Tensor::zeros(&shape);
                for (dst, src) in out.data_mut().chunks_mut(last).zip(g.data().chunks(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![Some(out)]
            }),
        )
    }

    /// Reflect padding on the last axis (edge sample not repeated, repeated
    /// reflection when the pad exceeds the signal).
    pub fn reflect_pad_last(&self, left: usize, right: usize) -> Var {
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("reflect_pad_last on scalar");
        assert!(n > 0, "reflect padding of an empty axis");
        let m = n + left + right;
        let src_index = move |j: usize| reflect_index(j as isize - left as isize, n);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = m;
        let mut data = Vec::with_capacity(self.value().numel() / n.max(1) * m);
        for row in self.value().data().chunks(n) {
            data.extend((0..m).map(|j| row[src_index(j)]));
        }
        Var::from_op(
            Tensor::new(&out_shape, data).unwrap(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut out = Tensor::zeros(&shape);
                for (dst, src) in out.data_mut().chunks_mut(n).zip(g.data().chunks(m)) {
                    for (j, &v) in src.iter().enumerate() {
                        dst[src_index(j)] += v;
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// `[B, L]` with `L = rows * period` to `[B * period, 1, rows]`, so that
    /// row `b * period + j` holds samples `j, j + period, ...` of item `b`.
    pub fn fold_period(&self, period: usize) -> Var {
        assert_eq!(self.shape().len(), 2, "fold_period expects [B, L]");
        let (b, len) = (self.shape()[0], self.shape()[1]);
        assert!(
            period > 0 && len % period == 0,
            "fold_period: {len} not a multiple of {period}"
        );
        let rows = len / period;
        let x = self.value().data();
        let mut data = vec![0.0; b * len];
        for bi in 0..b {
            for j in 0..period {
                let dst = &mut data[(bi * period + j) * rows..(bi * period + j + 1) * rows];
                for (r, d) in dst.iter_mut().enumerate() {
                    *d = x[bi * len + r * period + j];
                }
            }
        }
        Var::from_op(
            Tensor::new(&[b * period, 1, rows], data).unwrap(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; b * len];
                for bi in 0..b {
                    for j in 0..period {
                        let src = &gd[(bi * period + j) * rows..(bi * period + j + 1) * rows];
                        for (r, v) in src.iter().enumerate() {
                            dx[bi * len + r * period + j] = *v;
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, len], dx).unwrap())]
            }),
        )
    }

    /// Product `w · x[b]` for a constant matrix `w` `[m, k]` and `x` `[B, k, n]`.
    pub fn left_matmul_const(&self, w: &Tensor) -> Var {
        let (m, k) = (w.dim(0), w.dim(1));
        assert_eq!(self.shape().len(), 3, "left_matmul_const expects [B, k, n]");
        let (b, k2, n) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert_eq!(k, k2, "left_matmul_const inner dimension");
        let x = self.value().data();
        let wd = w.data();
        let mut out = vec![0.0; b * m * n];
        for bi in 0..b {
            for i in 0..m {
                let dst = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
                for j in 0..k {
                    let wv = wd[i * k + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let src = &x[(bi * k + j) * n..(bi * k + j + 1) * n];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                }
            }
        }
        let w = w.clone();
        Var::from_op(
            Tensor::new(&[b, m, n], out).unwrap(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let wd = w.data();
                let mut dx = vec![0.0; b * k * n];
                for bi in 0..b {
                    for i in 0..m {
                        let src = &gd[(bi * m + i) * n..(bi * m + i + 1) * n];
                        for j in 0..k {
                            let wv = wd[i * k + j];
                            if wv == 0.0 {
                                continue;
                            }
                            let dst = &mut dx[(bi * k + j) * n..(bi * k + j + 1) * n];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, k, n], dx).unwrap())]
            }),
        )
    }
}

/// Concatenates 3-D tensors `[B, C_i, T]` along the channel axis.
pub fn concat_channels(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or(Error::EmptyInput)?;
    if first.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "concat_channels expects 3-D, got {:?}",
            first.shape()
        )));
    }
    let (b, t) = (first.shape()[0], first.shape()[2]);
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        if p.shape().len() != 3 || p.shape()[0] != b || p.shape()[2] != t {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        channels.push(p.shape()[1]);
    }
    let total: usize = channels.iter().sum();
    let mut data = Vec::with_capacity(b * total * t);
    for bi in 0..b {
        for (p, &c) in parts.iter().zip(&channels) {
            data.extend_from_slice(&p.value().data()[bi * c * t..(bi + 1) * c * t]);
        }
    }
    let channels_bw = channels.clone();
    Ok(Var::from_op(
        Tensor::new(&[b, total, t], data)?,
        parts.to_vec(),
        Box::new(move |g, _, needs| {
            let mut offset = 0;
            let mut out = Vec::with_capacity(channels_bw.len());
            for (pi, &c) in channels_bw.iter().enumerate() {
                if needs[pi] {
                    let mut d = Vec::with_capacity(b * c * t);
                    for bi in 0..b {
                        let start = (bi * total + offset) * t;
                        d.extend_from_slice(&g.data()[start..start + c * t]);
                    }
                    out.push(Some(Tensor::new(&[b, c, t], d).unwrap()));
                } else {
                    out.push(None);
                }
                offset += c;
            }
            out
        }),
    ))
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let a = t(&[2, 3, 5], 1);
        let b = t(&[2, 3, 5], 2);
        let err = max_rel_error(
            &[a.clone(), b.clone()],
            |v| {
                let x = v[0].mul(&v[1]).tanh().add(&v[0].sigmoid());
                let y = x.sub(&v[1].square()).leaky_relu(0.1).abs();
                y.add_scalar(1.5).ln().sqrt().mean()
            },
            1e-6,
            30,
        );
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn shape_ops_gradients() {
        let a = t(&[2, 3, 7], 3);
        let b = t(&[2, 2, 7], 4);
        let err = max_rel_error(
            &[a, b],
            |v| {
                let c = concat_channels(&[v[0].clone(), v[1].clone()]).unwrap();
                let p = c.reflect_pad_last(3, 2).narrow_last(1, 9);
                let s = p.square().sum_per_batch().sqrt();
                s.scale_per_batch(&[0.5, 2.0]).sum()
            },
            1e-6,
            42,
        );
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn scalar_scale_and_matmul_gradients() {
        let x = t(&[2, 4, 3], 5);
        let s = t(&[], 6);
        let w = t(&[5, 4], 7);
        let err = max_rel_error(
            &[x, s],
            move |v| {
                v[0].mul_scalar_var(&v[1].sigmoid())
                    .left_matmul_const(&w)
                    .square()
                    .mean()
            },
            1e-6,
            24,
        );
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn constant_graphs_do_not_record() {
        let a = Var::constant(Tensor::scalar(2.0));
        let y = a.square().exp();
        assert!(!y.requires_grad());
        assert!(y.backward().get(&a).is_none());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let a = Var::param(Tensor::scalar(3.0));
        let y = a.mul(&a).add(&a);
        let g = y.backward();
        assert_eq!(g.get(&a).unwrap().item(), 7.0);
    }

    #[test]
    fn fold_period_layout_and_gradient() {
        let x = Var::constant(Tensor::new(&[1, 6], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let f = x.fold_period(3);
        assert_eq!(f.shape(), &[3, 1, 2]);
        assert_eq!(f.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let err = max_rel_error(
            &[t(&[2, 12], 8)],
            |v| v[0].fold_period(4).narrow_last(1, 2).square().sum(),
            1e-6,
            24,
        );
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn div_gradient() {
        let err = max_rel_error(
            &[t(&[3, 4], 1), t(&[3, 4], 2).map(|v| v.abs() + 0.5)],
            |v| v[0].div(&v[1]).square().sum(),
            1e-6,
            12,
        );
        assert!(err < 1e-5, "relative error {err}");
    }
}
