//! Minimal CNN building blocks with explicit backward passes.
//!
//! Activations are `[C, H, W]` arrays in standard layout; convolutions are
//! stride-1 with square kernels. Each layer exposes `forward` and a
//! `backward` that accumulates parameter gradients into a matching grads
//! struct and returns the input gradient.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Stride-1 2D convolution.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Array4<T>, // [C_out, C_in, k, k]
    pub bias: Array1<T>,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Conv2d<T> {
    /// He-uniform initialization.
    pub fn new(c_in: usize, c_out: usize, kernel: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (c_in * kernel * kernel) as f64).sqrt();
        let weight = Array4::from_shape_fn((c_out, c_in, kernel, kernel), |_| {
            T::from_f64_lit(rng.gen_range(-bound..bound))
        });
        Self {
            weight,
            bias: Array1::zeros(c_out),
            padding,
        }
    }

    pub fn zero_grads(&self) -> Conv2dGrads<T> {
        Conv2dGrads {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn check_input(&self, x: &Array3<T>) -> Result<(usize, usize, usize, usize, usize)> {
        let (cin, h, w) = x.dim();
        if cin != self.in_channels() {
            return Err(Error::shape(
                format!("{} input channels", self.in_channels()),
                format!("{cin}"),
                "conv2d input",
            ));
        }
        let k = self.kernel();
        let span = k as isize - 1 - 2 * self.padding as isize;
        let oh = h as isize - span;
        let ow = w as isize - span;
        if oh < 1 || ow < 1 {
            return Err(Error::InvalidDimension(format!(
                "conv2d input {h}x{w} too small for kernel {k} pad {}",
                self.padding
            )));
        }
        Ok((cin, h, w, oh as usize, ow as usize))
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let (cin, h, w, oh, ow) = self.check_input(x)?;
        let cout = self.out_channels();
        let k = self.kernel();
        let pad = self.padding as isize;
        let mut y = Array3::zeros((cout, oh, ow));
        let xs = x.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        let ws = self.weight.as_slice().expect("standard layout");
        for co in 0..cout {
            let y_base = co * oh * ow;
            let b = self.bias[co];
            for v in &mut ys[y_base..y_base + oh * ow] {
                *v = b;
            }
            for ci in 0..cin {
                let x_base = ci * h * w;
                for ky in 0..k {
                    let iy_off = ky as isize - pad;
                    let oy_lo = (-iy_off).max(0) as usize;
                    let oy_hi = ((h as isize - iy_off).min(oh as isize)).max(0) as usize;
                    for kx in 0..k {
                        let wv = ws[((co * cin + ci) * k + ky) * k + kx];
                        let ix_off = kx as isize - pad;
                        let ox_lo = (-ix_off).max(0) as usize;
                        let ox_hi = ((w as isize - ix_off).min(ow as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize + iy_off) as usize;
                            let src_lo = (x_base + iy * w) as isize + ix_off;
                            let src = &xs[(src_lo + ox_lo as isize) as usize
                                ..(src_lo + ox_hi as isize) as usize];
                            let dst = &mut ys[y_base + oy * ow + ox_lo..y_base + oy * ow + ox_hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * *s;
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &Array3<T>, dy: &Array3<T>, grads: &mut Conv2dGrads<T>) -> Result<Array3<T>> {
        let (cin, h, w, oh, ow) = self.check_input(x)?;
        let cout = self.out_channels();
        let k = self.kernel();
        let pad = self.padding as isize;
        if dy.dim() != (cout, oh, ow) {
            return Err(Error::shape(
                format!("{:?}", (cout, oh, ow)),
                format!("{:?}", dy.dim()),
                "conv2d output gradient",
            ));
        }
        let mut dx = Array3::zeros((cin, h, w));
        let xs = x.as_slice().expect("standard layout");
        let dys = dy.as_slice().expect("standard layout");
        let dxs = dx.as_slice_mut().expect("standard layout");
        let ws = self.weight.as_slice().expect("standard layout");
        let dws = grads.weight.as_slice_mut().expect("standard layout");
        for co in 0..cout {
            let y_base = co * oh * ow;
            let mut db = T::zero();
            for &g in &dys[y_base..y_base + oh * ow] {
                db += g;
            }
            grads.bias[co] += db;
            for ci in 0..cin {
                let x_base = ci * h * w;
                for ky in 0..k {
                    let iy_off = ky as isize - pad;
                    let oy_lo = (-iy_off).max(0) as usize;
                    let oy_hi = ((h as isize - iy_off).min(oh as isize)).max(0) as usize;
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = ws[widx];
                        let ix_off = kx as isize - pad;
                        let ox_lo = (-ix_off).max(0) as usize;
                        let ox_hi = ((w as isize - ix_off).min(ow as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut dw = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize + iy_off) as usize;
                            let src_lo = (x_base + iy * w) as isize + ix_off;
                            let xrow = &xs[(src_lo + ox_lo as isize) as usize
                                ..(src_lo + ox_hi as isize) as usize];
                            let dyrow = &dys[y_base + oy * ow + ox_lo..y_base + oy * ow + ox_hi];
                            for (g, s) in dyrow.iter().zip(xrow) {
                                dw += *g * *s;
                            }
                            let dxrow = &mut dxs[(src_lo + ox_lo as isize) as usize
                                ..(src_lo + ox_hi as isize) as usize];
                            for (d, g) in dxrow.iter_mut().zip(dyrow) {
                                *d += wv * *g;
                            }
                        }
                        dws[widx] += dw;
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Fully-connected layer on a flat feature vector.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>, // [out, in]
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / n_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((n_out, n_in), |_| T::from_f64_lit(rng.gen_range(-bound..bound))),
            bias: Array1::zeros(n_out),
        }
    }

    pub fn zero_grads(&self) -> LinearGrads<T> {
        LinearGrads {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn forward(&self, x: &Array1<T>) -> Array1<T> {
        let (n_out, n_in) = self.weight.dim();
        debug_assert_eq!(x.len(), n_in);
        let mut y = self.bias.clone();
        for o in 0..n_out {
            let mut acc = T::zero();
            for i in 0..n_in {
                acc += self.weight[[o, i]] * x[i];
            }
            y[o] += acc;
        }
        y
    }

    pub fn backward(&self, x: &Array1<T>, dy: &Array1<T>, grads: &mut LinearGrads<T>) -> Array1<T> {
        let (n_out, n_in) = self.weight.dim();
        let mut dx = Array1::zeros(n_in);
        for o in 0..n_out {
            grads.bias[o] += dy[o];
            for i in 0..n_in {
                grads.weight[[o, i]] += dy[o] * x[i];
                dx[i] += self.weight[[o, i]] * dy[o];
            }
        }
        dx
    }
}

pub fn relu<T: Real>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| v.max(T::zero()))
}

/// `y` is the forward output.
pub fn relu_backward<T: Real>(y: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub fn sigmoid<T: Real>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| T::one() / (T::one() + (-v).exp()))
}

pub fn sigmoid_backward<T: Real>(y: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| *d = *d * v * (T::one() - v));
    dx
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Real>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| v.max(T::zero()) + (-(v.abs())).exp().ln_1p())
}

/// Backward needs the pre-activation input.
pub fn softplus_backward<T: Real>(x: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| *d = *d * (T::one() / (T::one() + (-v).exp())));
    dx
}

pub fn softmax<T: Real>(x: &Array1<T>) -> Array1<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exp = x.mapv(|v| (v - max).exp());
    let sum: T = exp.iter().copied().sum();
    exp.mapv(|v| v / sum)
}

pub fn softmax_backward<T: Real>(y: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
    let dot: T = y.iter().zip(dy.iter()).map(|(&a, &b)| a * b).sum();
    Array1::from_shape_fn(y.len(), |i| y[i] * (dy[i] - dot))
}

/// 2x2 max pooling with stride 2. Input dims must be even.
pub fn maxpool2<T: Real>(x: &Array3<T>) -> Result<(Array3<T>, Vec<usize>)> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidDimension(format!("maxpool2 input {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, oh, ow));
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for di in 0..2 {
                    for dj in 0..2 {
                        let (p, q) = (2 * i + di, 2 * j + dj);
                        let v = x[[ci, p, q]];
                        if v > best {
                            best = v;
                            best_idx = (ci * h + p) * w + q;
                        }
                    }
                }
                y[[ci, i, j]] = best;
                argmax[(ci * oh + i) * ow + j] = best_idx;
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool2_backward<T: Real>(
    input_dim: (usize, usize, usize),
    argmax: &[usize],
    dy: &Array3<T>,
) -> Array3<T> {
    let mut dx = Array3::zeros(input_dim);
    let dxs = dx.as_slice_mut().expect("standard layout");
    for (g, &idx) in dy.iter().zip(argmax.iter()) {
        dxs[idx] += *g;
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<T: Real>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[[ci, i / 2, j / 2]])
}

pub fn upsample2_backward<T: Real>(dy: &Array3<T>) -> Array3<T> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ((ci, i, j), &g) in dy.indexed_iter() {
        dx[[ci, i / 2, j / 2]] += g;
    }
    dx
}

/// Channelwise concatenation.
pub fn concat_channels<T: Real>(a: &Array3<T>, b: &Array3<T>) -> Array3<T> {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels<T: Real>(dy: &Array3<T>, first: usize) -> (Array3<T>, Array3<T>) {
    let (c, h, w) = dy.dim();
    let a = dy.slice(ndarray::s![..first, .., ..]).to_owned();
    let b = dy.slice(ndarray::s![first.., .., ..]).to_owned();
    debug_assert_eq!(a.dim(), (first, h, w));
    debug_assert_eq!(b.dim(), (c - first, h, w));
    (a, b)
}

/// Global average pooling to a per-channel vector.
pub fn global_avg_pool<T: Real>(x: &Array3<T>) -> Array1<T> {
    let (c, h, w) = x.dim();
    let scale = T::one() / T::from_usize_lit(h * w);
    Array1::from_shape_fn(c, |ci| {
        let mut acc = T::zero();
        for i in 0..h {
            for j in 0..w {
                acc += x[[ci, i, j]];
            }
        }
        acc * scale
    })
}

pub fn global_avg_pool_backward<T: Real>(input_dim: (usize, usize, usize), dy: &Array1<T>) -> Array3<T> {
    let (c, h, w) = input_dim;
    let scale = T::one() / T::from_usize_lit(h * w);
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| dy[ci] * scale)
}

/// Bilinear resize with half-pixel center alignment.
pub fn bilinear_resize<T: Real>(x: &Array3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, out_h, out_w));
    for i in 0..out_h {
        let (y0, y1, fy) = resize_axis::<T>(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = resize_axis::<T>(j, w, out_w);
            for ci in 0..c {
                y[[ci, i, j]] = (T::one() - fy) * (T::one() - fx) * x[[ci, y0, x0]]
                    + (T::one() - fy) * fx * x[[ci, y0, x1]]
                    + fy * (T::one() - fx) * x[[ci, y1, x0]]
                    + fy * fx * x[[ci, y1, x1]];
            }
        }
    }
    y
}

pub fn bilinear_resize_backward<T: Real>(
    input_dim: (usize, usize, usize),
    dy: &Array3<T>,
) -> Array3<T> {
    let (c, h, w) = input_dim;
    let (_, out_h, out_w) = dy.dim();
    let mut dx = Array3::zeros((c, h, w));
    for i in 0..out_h {
        let (y0, y1, fy) = resize_axis::<T>(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = resize_axis::<T>(j, w, out_w);
            for ci in 0..c {
                let g = dy[[ci, i, j]];
                dx[[ci, y0, x0]] += (T::one() - fy) * (T::one() - fx) * g;
                dx[[ci, y0, x1]] += (T::one() - fy) * fx * g;
                dx[[ci, y1, x0]] += fy * (T::one() - fx) * g;
                dx[[ci, y1, x1]] += fy * fx * g;
            }
        }
    }
    dx
}

fn resize_axis<T: Real>(dst: usize, src_extent: usize, dst_extent: usize) -> (usize, usize, T) {
    if src_extent == 1 {
        return (0, 0, T::zero());
    }
    let pos = (dst as f64 + 0.5) * src_extent as f64 / dst_extent as f64 - 0.5;
    let pos = pos.clamp(0.0, src_extent as f64 - 1.0);
    let lo = (pos.floor() as usize).min(src_extent - 2);
    (lo, lo + 1, T::from_f64_lit(pos - lo as f64))
}
