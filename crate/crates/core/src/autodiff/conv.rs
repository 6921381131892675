//! Convolution and pooling primitives with batch axis first.
//!
//! Kernels are direct loops arranged so the innermost loop is a (possibly
//! strided) axpy or dot over the last axis.

use alloc::boxed::Box;
use alloc::vec;

use super::Var;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv1dSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            pad_left: padding,
            pad_right: padding,
            dilation,
            groups,
        }
    }

    pub fn output_len(&self, len: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + self.pad_left + self.pad_right;
        if padded < span {
            0
        } else {
            (padded - span) / self.stride + 1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Conv2dSpec {
    pub fn output_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let out = |n: usize, k: usize, s: usize, p: usize, d: usize| {
            let span = d * (k - 1) + 1;
            if n + 2 * p < span {
                0
            } else {
                (n + 2 * p - span) / s + 1
            }
        };
        (
            out(h, kh, self.stride.0, self.padding.0, self.dilation.0),
            out(w, kw, self.stride.1, self.padding.1, self.dilation.1),
        )
    }
}

/// Range of `t` in `0..n_out` with `0 <= t*s + off < n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, s: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 { ((-off) as usize).div_ceil(s) } else { 0 };
    let hi_num = n_in as isize - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / s + 1).min(n_out);
    (lo.min(hi), hi)
}

/// `y[t] += w * x[t*s + off]` for `t` in `lo..hi`.
#[inline]
fn gather_axpy(y: &mut [f64], x: &[f64], w: f64, s: usize, off: isize, lo: usize, hi: usize) {
    if lo >= hi {
        return;
    }
    let start = (lo as isize * s as isize + off) as usize;
    if s == 1 {
        let xs = &x[start..start + (hi - lo)];
        for (yv, xv) in y[lo..hi].iter_mut().zip(xs) {
            *yv += w * xv;
        }
    } else {
        for (i, yv) in y[lo..hi].iter_mut().enumerate() {
            *yv += w * x[start + i * s];
        }
    }
}

/// `x[t*s + off] += w * y[t]` for `t` in `lo..hi`.
#[inline]
fn scatter_axpy(x: &mut [f64], y: &[f64], w: f64, s: usize, off: isize, lo: usize, hi: usize) {
    if lo >= hi {
        return;
    }
    let start = (lo as isize * s as isize + off) as usize;
    if s == 1 {
        let xs = &mut x[start..start + (hi - lo)];
        for (xv, yv) in xs.iter_mut().zip(&y[lo..hi]) {
            *xv += w * yv;
        }
    } else {
        for (i, yv) in y[lo..hi].iter().enumerate() {
            x[start + i * s] += w * yv;
        }
    }
}

/// `sum_t y[t] * x[t*s + off]` for `t` in `lo..hi`.
#[inline]
fn strided_dot(y: &[f64], x: &[f64], s: usize, off: isize, lo: usize, hi: usize) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    let start = (lo as isize * s as isize + off) as usize;
    if s == 1 {
        y[lo..hi]
            .iter()
            .zip(&x[start..start + (hi - lo)])
            .map(|(a, b)| a * b)
            .sum()
    } else {
        y[lo..hi].iter().enumerate().map(|(i, a)| a * x[start + i * s]).sum()
    }
}

/// 1-D convolution. `x`: `[B, C_in, L]`, `w`: `[C_out, C_in / groups, K]`,
/// `bias`: `[C_out]`. Zero padding.
pub fn conv1d(x: &Var, w: &Var, bias: Option<&Var>, spec: Conv1dSpec) -> Var {
    let (b, cin, len) = dims3(x.shape(), "conv1d input");
    let (cout, cin_g, k) = dims3(w.shape(), "conv1d weight");
    let groups = spec.groups;
    assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0, "conv1d groups");
    assert_eq!(
        cin / groups,
        cin_g,
        "conv1d: weight expects {} input channels per group",
        cin_g
    );
    let cout_g = cout / groups;
    let lout = spec.output_len(len, k);
    let (s, d) = (spec.stride, spec.dilation);
    let offset = move |kk: usize| (kk * d) as isize - spec.pad_left as isize;

    let xd = x.value().data();
    let wd = w.value().data();
    let mut out = vec![0.0; b * cout * lout];
    for bi in 0..b {
        for oc in 0..cout {
            let yrow = &mut out[(bi * cout + oc) * lout..(bi * cout + oc + 1) * lout];
            if let Some(bias) = bias {
                yrow.iter_mut().for_each(|v| *v = bias.value().data()[oc]);
            }
            let g = oc / cout_g;
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let xrow = &xd[(bi * cin + ic) * len..(bi * cin + ic + 1) * len];
                for kk in 0..k {
                    let wv = wd[(oc * cin_g + icl) * k + kk];
                    let off = offset(kk);
                    let (lo, hi) = valid_range(lout, len, s, off);
                    gather_axpy(yrow, xrow, wv, s, off, lo, hi);
                }
            }
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    let (xc, wc) = (x.clone(), w.clone());
    Var::from_op(
        Tensor::new(&[b, cout, lout], out).unwrap(),
        parents,
        Box::new(move |g, _, needs| {
            let gd = g.data();
            let xd = xc.value().data();
            let wd = wc.value().data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; b * cin * len];
                for bi in 0..b {
                    for oc in 0..cout {
                        let grow = &gd[(bi * cout + oc) * lout..(bi * cout + oc + 1) * lout];
                        let gidx = oc / cout_g;
                        for icl in 0..cin_g {
                            let ic = gidx * cin_g + icl;
                            let dxrow = &mut dx[(bi * cin + ic) * len..(bi * cin + ic + 1) * len];
                            for kk in 0..k {
                                let wv = wd[(oc * cin_g + icl) * k + kk];
                                let off = offset(kk);
                                let (lo, hi) = valid_range(lout, len, s, off);
                                scatter_axpy(dxrow, grow, wv, s, off, lo, hi);
                            }
                        }
                    }
                }
                Tensor::new(&[b, cin, len], dx).unwrap()
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; cout * cin_g * k];
                for bi in 0..b {
                    for oc in 0..cout {
                        let grow = &gd[(bi * cout + oc) * lout..(bi * cout + oc + 1) * lout];
                        let gidx = oc / cout_g;
                        for icl in 0..cin_g {
                            let ic = gidx * cin_g + icl;
                            let xrow = &xd[(bi * cin + ic) * len..(bi * cin + ic + 1) * len];
                            for kk in 0..k {
                                let off = offset(kk);
                                let (lo, hi) = valid_range(lout, len, s, off);
                                dw[(oc * cin_g + icl) * k + kk] += strided_dot(grow, xrow, s, off, lo, hi);
                            }
                        }
                    }
                }
                Tensor::new(&[cout, cin_g, k], dw).unwrap()
            });
            let mut grads = vec![dx, dw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(gd, b, cout, lout)));
            }
            grads
        }),
    )
}

/// Transposed 1-D convolution. `x`: `[B, C_in, L]`, `w`: `[C_in, C_out, K]`.
/// Output length is `(L - 1) * stride - 2 * padding + K`.
pub fn conv_transpose1d(x: &Var, w: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Var {
    let (b, cin, len) = dims3(x.shape(), "conv_transpose1d input");
    let (cin_w, cout, k) = dims3(w.shape(), "conv_transpose1d weight");
    assert_eq!(cin, cin_w, "conv_transpose1d channel mismatch");
    let full = (len - 1) * stride + k;
    assert!(full > 2 * padding, "conv_transpose1d output would be empty");
    let lout = full - 2 * padding;
    let s = stride;
    let offset = move |kk: usize| kk as isize - padding as isize;

    let xd = x.value().data();
    let wd = w.value().data();
    let mut out = vec![0.0; b * cout * lout];
    for bi in 0..b {
        for oc in 0..cout {
            let yrow = &mut out[(bi * cout + oc) * lout..(bi * cout + oc + 1) * lout];
            if let Some(bias) = bias {
                yrow.iter_mut().for_each(|v| *v = bias.value().data()[oc]);
            }
            for ic in 0..cin {
                let xrow = &xd[(bi * cin + ic) * len..(bi * cin + ic + 1) * len];
                for kk in 0..k {
                    let wv = wd[(ic * cout + oc) * k + kk];
                    let off = offset(kk);
                    let (lo, hi) = valid_range(len, lout, s, off);
                    scatter_axpy(yrow, xrow, wv, s, off, lo, hi);
                }
            }
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    let (xc, wc) = (x.clone(), w.clone());
    Var::from_op(
        Tensor::new(&[b, cout, lout], out).unwrap(),
        parents,
        Box::new(move |g, _, needs| {
            let gd = g.data();
            let xd = xc.value().data();
            let wd = wc.value().data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; b * cin * len];
                for bi in 0..b {
                    for ic in 0..cin {
                        let dxrow = &mut dx[(bi * cin + ic) * len..(bi * cin + ic + 1) * len];
                        for oc in 0..cout {
                            let grow = &gd[(bi * cout + oc) * lout..(bi * cout + oc + 1) * lout];
                            for kk in 0..k {
                                let wv = wd[(ic * cout + oc) * k + kk];
                                let off = offset(kk);
                                let (lo, hi) = valid_range(len, lout, s, off);
                                gather_axpy(dxrow, grow, wv, s, off, lo, hi);
                            }
                        }
                    }
                }
                Tensor::new(&[b, cin, len], dx).unwrap()
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; cin * cout * k];
                for bi in 0..b {
                    for ic in 0..cin {
                        let xrow = &xd[(bi * cin + ic) * len..(bi * cin + ic + 1) * len];
                        for oc in 0..cout {
                            let grow = &gd[(bi * cout + oc) * lout..(bi * cout + oc + 1) * lout];
                            for kk in 0..k {
                                let off = offset(kk);
                                let (lo, hi) = valid_range(len, lout, s, off);
                                dw[(ic * cout + oc) * k + kk] += strided_dot(xrow, grow, s, off, lo, hi);
                            }
                        }
                    }
                }
                Tensor::new(&[cin, cout, k], dw).unwrap()
            });
            let mut grads = vec![dx, dw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(gd, b, cout, lout)));
            }
            grads
        }),
    )
}

/// 2-D convolution. `x`: `[B, C_in, H, W]`, `w`: `[C_out, C_in, KH, KW]`.
pub fn conv2d(x: &Var, w: &Var, bias: Option<&Var>, spec: Conv2dSpec) -> Var {
    let xs = x.shape();
    let ws = w.shape();
    assert!(xs.len() == 4 && ws.len() == 4, "conv2d expects 4-D input and weight");
    let (b, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_w, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let (ho, wo) = spec.output_dims(h, wid, kh, kw);
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let row_off = move |i: usize| (i * dh) as isize - ph as isize;
    let col_off = move |j: usize| (j * dw) as isize - pw as isize;

    let xd = x.value().data();
    let wd = w.value().data();
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for oc in 0..cout {
            let ybase = (bi * cout + oc) * ho * wo;
            if let Some(bias) = bias {
                out[ybase..ybase + ho * wo]
                    .iter_mut()
                    .for_each(|v| *v = bias.value().data()[oc]);
            }
            for ic in 0..cin {
                let xbase = (bi * cin + ic) * h * wid;
                for i in 0..kh {
                    let (rlo, rhi) = valid_range(ho, h, sh, row_off(i));
                    for j in 0..kw {
                        let wv = wd[((oc * cin + ic) * kh + i) * kw + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let coff = col_off(j);
                        let (clo, chi) = valid_range(wo, wid, sw, coff);
                        for oh in rlo..rhi {
                            let ih = (oh as isize * sh as isize + row_off(i)) as usize;
                            let yrow = &mut out[ybase + oh * wo..ybase + (oh + 1) * wo];
                            let xrow = &xd[xbase + ih * wid..xbase + (ih + 1) * wid];
                            gather_axpy(yrow, xrow, wv, sw, coff, clo, chi);
                        }
                    }
                }
            }
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    let (xc, wc) = (x.clone(), w.clone());
    Var::from_op(
        Tensor::new(&[b, cout, ho, wo], out).unwrap(),
        parents,
        Box::new(move |g, _, needs| {
            let gd = g.data();
            let xd = xc.value().data();
            let wd = wc.value().data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; b * cin * h * wid];
                for bi in 0..b {
                    for oc in 0..cout {
                        let gbase = (bi * cout + oc) * ho * wo;
                        for ic in 0..cin {
                            let xbase = (bi * cin + ic) * h * wid;
                            for i in 0..kh {
                                let (rlo, rhi) = valid_range(ho, h, sh, row_off(i));
                                for j in 0..kw {
                                    let wv = wd[((oc * cin + ic) * kh + i) * kw + j];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let coff = col_off(j);
                                    let (clo, chi) = valid_range(wo, wid, sw, coff);
                                    for oh in rlo..rhi {
                                        let ih = (oh as isize * sh as isize + row_off(i)) as usize;
                                        let grow = &gd[gbase + oh * wo..gbase + (oh + 1) * wo];
                                        let dxrow = &mut dx[xbase + ih * wid..xbase + (ih + 1) * wid];
                                        scatter_axpy(dxrow, grow, wv, sw, coff, clo, chi);
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::new(&[b, cin, h, wid], dx).unwrap()
            });
            let dwt = needs[1].then(|| {
                let mut dwv = vec![0.0; cout * cin * kh * kw];
                for bi in 0..b {
                    for oc in 0..cout {
                        let gbase = (bi * cout + oc) * ho * wo;
                        for ic in 0..cin {
                            let xbase = (bi * cin + ic) * h * wid;
                            for i in 0..kh {
                                let (rlo, rhi) = valid_range(ho, h, sh, row_off(i));
                                for j in 0..kw {
                                    let coff = col_off(j);
                                    let (clo, chi) = valid_range(wo, wid, sw, coff);
                                    let mut acc = 0.0;
                                    for oh in rlo..rhi {
                                        let ih = (oh as isize * sh as isize + row_off(i)) as usize;
                                        let grow = &gd[gbase + oh * wo..gbase + (oh + 1) * wo];
                                        let xrow = &xd[xbase + ih * wid..xbase + (ih + 1) * wid];
                                        acc += strided_dot(grow, xrow, sw, coff, clo, chi);
                                    }
                                    dwv[((oc * cin + ic) * kh + i) * kw + j] += acc;
                                }
                            }
                        }
                    }
                }
                Tensor::new(&[cout, cin, kh, kw], dwv).unwrap()
            });
            let mut grads = vec![dx, dwt];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(gd, b, cout, ho * wo)));
            }
            grads
        }),
    )
}

/// Average pooling over the last axis of `[B, C, L]`; zero padding counts
/// towards the average.
pub fn avg_pool1d(x: &Var, kernel: usize, stride: usize, pad_left: usize, pad_right: usize) -> Var {
    let (b, c, len) = dims3(x.shape(), "avg_pool1d input");
    let spec = Conv1dSpec {
        stride,
        pad_left,
        pad_right,
        dilation: 1,
        groups: 1,
    };
    let lout = spec.output_len(len, kernel);
    let inv = 1.0 / kernel as f64;
    let mut out = vec![0.0; b * c * lout];
    for (row, yrow) in x.value().data().chunks(len).zip(out.chunks_mut(lout)) {
        for kk in 0..kernel {
            let off = kk as isize - pad_left as isize;
            let (lo, hi) = valid_range(lout, len, stride, off);
            gather_axpy(yrow, row, inv, stride, off, lo, hi);
        }
    }
    Var::from_op(
        Tensor::new(&[b, c, lout], out).unwrap(),
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0; b * c * len];
            for (dxrow, grow) in dx.chunks_mut(len).zip(g.data().chunks(lout)) {
                for kk in 0..kernel {
                    let off = kk as isize - pad_left as isize;
                    let (lo, hi) = valid_range(lout, len, stride, off);
                    scatter_axpy(dxrow, grow, inv, stride, off, lo, hi);
                }
            }
            vec![Some(Tensor::new(&[b, c, len], dx).unwrap())]
        }),
    )
}

fn bias_grad(gd: &[f64], b: usize, cout: usize, inner: usize) -> Tensor {
    let mut db = vec![0.0; cout];
    for bi in 0..b {
        for (oc, acc) in db.iter_mut().enumerate() {
            let start = (bi * cout + oc) * inner;
            *acc += gd[start..start + inner].iter().sum::<f64>();
        }
    }
    Tensor::new(&[cout], db).unwrap()
}

fn dims3(shape: &[usize], what: &str) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "{what} must be 3-D, got {:?}", shape);
    (shape[0], shape[1], shape[2])
}
