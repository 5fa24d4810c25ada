//! Depth-3 U-Net producing a nonnegative per-pixel sampling density.

use ndarray::Array3;
use rand::Rng;

use super::layers::*;
use super::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Encoder-decoder saliency network: two pooling stages, skip connections,
/// base channel width 16, softplus output so densities stay positive.
/// Output spatial dims equal input dims; inputs must be divisible by 4.
#[derive(Debug, Clone)]
pub struct SaliencyNet<T> {
    enc1a: Conv2d<T>,
    enc1b: Conv2d<T>,
    enc2a: Conv2d<T>,
    enc2b: Conv2d<T>,
    bot_a: Conv2d<T>,
    bot_b: Conv2d<T>,
    dec2a: Conv2d<T>,
    dec2b: Conv2d<T>,
    dec1a: Conv2d<T>,
    dec1b: Conv2d<T>,
    head: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct SaliencyNetGrads<T> {
    enc1a: Conv2dGrads<T>,
    enc1b: Conv2dGrads<T>,
    enc2a: Conv2dGrads<T>,
    enc2b: Conv2dGrads<T>,
    bot_a: Conv2dGrads<T>,
    bot_b: Conv2dGrads<T>,
    dec2a: Conv2dGrads<T>,
    dec2b: Conv2dGrads<T>,
    dec1a: Conv2dGrads<T>,
    dec1b: Conv2dGrads<T>,
    head: Conv2dGrads<T>,
}

/// Intermediate activations kept for the backward pass.
pub struct SaliencyNetCache<T> {
    x: Array3<T>,
    r1a: Array3<T>,
    e1: Array3<T>,
    p1: Array3<T>,
    arg1: Vec<usize>,
    r2a: Array3<T>,
    e2: Array3<T>,
    p2: Array3<T>,
    arg2: Vec<usize>,
    rba: Array3<T>,
    bott: Array3<T>,
    c2: Array3<T>,
    r2da: Array3<T>,
    d2: Array3<T>,
    c1: Array3<T>,
    r1da: Array3<T>,
    d1: Array3<T>,
    pre_act: Array3<T>,
}

impl<T: Real> SaliencyNet<T> {
    pub fn new(in_channels: usize, base: usize, rng: &mut impl Rng) -> Self {
        Self {
            enc1a: Conv2d::new(in_channels, base, 3, 1, rng),
            enc1b: Conv2d::new(base, base, 3, 1, rng),
            enc2a: Conv2d::new(base, 2 * base, 3, 1, rng),
            enc2b: Conv2d::new(2 * base, 2 * base, 3, 1, rng),
            bot_a: Conv2d::new(2 * base, 4 * base, 3, 1, rng),
            bot_b: Conv2d::new(4 * base, 4 * base, 3, 1, rng),
            dec2a: Conv2d::new(6 * base, 2 * base, 3, 1, rng),
            dec2b: Conv2d::new(2 * base, 2 * base, 3, 1, rng),
            dec1a: Conv2d::new(3 * base, base, 3, 1, rng),
            dec1b: Conv2d::new(base, base, 3, 1, rng),
            head: Conv2d::new(base, 1, 1, 0, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.enc1a.in_channels()
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array3<T>) -> Result<(Array3<T>, SaliencyNetCache<T>)> {
        let (_, h, w) = x.dim();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidDimension(format!(
                "saliency net input {h}x{w} must be divisible by 4"
            )));
        }
        let r1a = relu(&self.enc1a.forward(x)?);
        let e1 = relu(&self.enc1b.forward(&r1a)?);
        let (p1, arg1) = maxpool2(&e1)?;
        let r2a = relu(&self.enc2a.forward(&p1)?);
        let e2 = relu(&self.enc2b.forward(&r2a)?);
        let (p2, arg2) = maxpool2(&e2)?;
        let rba = relu(&self.bot_a.forward(&p2)?);
        let bott = relu(&self.bot_b.forward(&rba)?);
        let c2 = concat_channels(&upsample2(&bott), &e2);
        let r2da = relu(&self.dec2a.forward(&c2)?);
        let d2 = relu(&self.dec2b.forward(&r2da)?);
        let c1 = concat_channels(&upsample2(&d2), &e1);
        let r1da = relu(&self.dec1a.forward(&c1)?);
        let d1 = relu(&self.dec1b.forward(&r1da)?);
        let pre_act = self.head.forward(&d1)?;
        let out = softplus(&pre_act);
        let cache = SaliencyNetCache {
            x: x.clone(),
            r1a,
            e1,
            p1,
            arg1,
            r2a,
            e2,
            p2,
            arg2,
            rba,
            bott,
            c2,
            r2da,
            d2,
            c1,
            r1da,
            d1,
            pre_act,
        };
        Ok((out, cache))
    }

    /// Accumulate parameter gradients for a scalar loss with gradient
    /// `d_out` at the network output.
    pub fn backward(
        &self,
        cache: &SaliencyNetCache<T>,
        d_out: &Array3<T>,
        grads: &mut SaliencyNetGrads<T>,
    ) -> Result<()> {
        let d_pre = softplus_backward(&cache.pre_act, d_out);
        let d_d1 = self.head.backward(&cache.d1, &d_pre, &mut grads.head)?;
        let d_d1 = relu_backward(&cache.d1, &d_d1);
        let d_r1da = self.dec1b.backward(&cache.r1da, &d_d1, &mut grads.dec1b)?;
        let d_r1da = relu_backward(&cache.r1da, &d_r1da);
        let d_c1 = self.dec1a.backward(&cache.c1, &d_r1da, &mut grads.dec1a)?;
        let d2_channels = cache.d2.dim().0;
        let (d_u1, d_e1_skip) = split_channels(&d_c1, d2_channels);
        let d_d2 = upsample2_backward(&d_u1);
        let d_d2 = relu_backward(&cache.d2, &d_d2);
        let d_r2da = self.dec2b.backward(&cache.r2da, &d_d2, &mut grads.dec2b)?;
        let d_r2da = relu_backward(&cache.r2da, &d_r2da);
        let d_c2 = self.dec2a.backward(&cache.c2, &d_r2da, &mut grads.dec2a)?;
        let bott_channels = cache.bott.dim().0;
        let (d_u2, d_e2_skip) = split_channels(&d_c2, bott_channels);
        let d_bott = upsample2_backward(&d_u2);
        let d_bott = relu_backward(&cache.bott, &d_bott);
        let d_rba = self.bot_b.backward(&cache.rba, &d_bott, &mut grads.bot_b)?;
        let d_rba = relu_backward(&cache.rba, &d_rba);
        let d_p2 = self.bot_a.backward(&cache.p2, &d_rba, &mut grads.bot_a)?;
        let mut d_e2 = maxpool2_backward(cache.e2.dim(), &cache.arg2, &d_p2);
        d_e2 += &d_e2_skip;
        let d_e2 = relu_backward(&cache.e2, &d_e2);
        let d_r2a = self.enc2b.backward(&cache.r2a, &d_e2, &mut grads.enc2b)?;
        let d_r2a = relu_backward(&cache.r2a, &d_r2a);
        let d_p1 = self.enc2a.backward(&cache.p1, &d_r2a, &mut grads.enc2a)?;
        let mut d_e1 = maxpool2_backward(cache.e1.dim(), &cache.arg1, &d_p1);
        d_e1 += &d_e1_skip;
        let d_e1 = relu_backward(&cache.e1, &d_e1);
        let d_r1a = self.enc1b.backward(&cache.r1a, &d_e1, &mut grads.enc1b)?;
        let d_r1a = relu_backward(&cache.r1a, &d_r1a);
        let _ = self.enc1a.backward(&cache.x, &d_r1a, &mut grads.enc1a)?;
        Ok(())
    }
}

macro_rules! conv_fields {
    ($macro_cb:ident) => {
        $macro_cb!(enc1a, enc1b, enc2a, enc2b, bot_a, bot_b, dec2a, dec2b, dec1a, dec1b, head);
    };
}

impl<T: Real> ParamSet<T> for SaliencyNet<T> {
    type Grads = SaliencyNetGrads<T>;

    fn zero_grads(&self) -> SaliencyNetGrads<T> {
        SaliencyNetGrads {
            enc1a: self.enc1a.zero_grads(),
            enc1b: self.enc1b.zero_grads(),
            enc2a: self.enc2a.zero_grads(),
            enc2b: self.enc2b.zero_grads(),
            bot_a: self.bot_a.zero_grads(),
            bot_b: self.bot_b.zero_grads(),
            dec2a: self.dec2a.zero_grads(),
            dec2b: self.dec2b.zero_grads(),
            dec1a: self.dec1a.zero_grads(),
            dec1b: self.dec1b.zero_grads(),
            head: self.head.zero_grads(),
        }
    }

    fn param_slices(&self) -> Vec<(&'static str, &[T])> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($f:ident),+) => {
                $(
                    out.push((concat!("saliency.", stringify!($f), ".w"), self.$f.weight.as_slice().unwrap()));
                    out.push((concat!("saliency.", stringify!($f), ".b"), self.$f.bias.as_slice().unwrap()));
                )+
            };
        }
        conv_fields!(push);
        out
    }

    fn param_slices_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($f:ident),+) => {
                $(
                    out.push((concat!("saliency.", stringify!($f), ".w"), self.$f.weight.as_slice_mut().unwrap()));
                    out.push((concat!("saliency.", stringify!($f), ".b"), self.$f.bias.as_slice_mut().unwrap()));
                )+
            };
        }
        conv_fields!(push);
        out
    }

    fn grad_slices(grads: &SaliencyNetGrads<T>) -> Vec<&[T]> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($f:ident),+) => {
                $(
                    out.push(grads.$f.weight.as_slice().unwrap());
                    out.push(grads.$f.bias.as_slice().unwrap());
                )+
            };
        }
        conv_fields!(push);
        out
    }

    fn grad_slices_mut(grads: &mut SaliencyNetGrads<T>) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($f:ident),+) => {
                $(
                    out.push(grads.$f.weight.as_slice_mut().unwrap());
                    out.push(grads.$f.bias.as_slice_mut().unwrap());
                )+
            };
        }
        conv_fields!(push);
        out
    }
}
