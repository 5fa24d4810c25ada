//! Two-branch segmentation backbone: a binary-mask head and a class head
//! over the warped input stack. Any architecture can sit behind the
//! [`Backbone`] contract; [`ToyBackbone`] is the desk-scale implementation.

use ndarray::{Array1, Array3};
use rand::Rng;

use super::layers::*;
use super::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Raw head outputs: per-pixel mask logits and class logits.
#[derive(Debug, Clone)]
pub struct BackboneOut<T> {
    pub seg_logits: Array3<T>, // [1, h, w]
    pub cls_logits: Array1<T>, // [C]
}

/// Plug-in contract for the segmentation network behind the sampler.
pub trait Backbone<T: Real> {
    fn num_classes(&self) -> usize;
    fn forward(&self, x: &Array3<T>) -> Result<BackboneOut<T>>;
}

/// Compact convolutional backbone: three convs for the mask branch, a conv
/// stack plus linear classifier for the class branch.
///
/// The last input channel must be the gaze map: the class branch pools its
/// features weighted by that channel (raised to [`GAZE_POOL_EXPONENT`]), so
/// the classifier attends to the instance under the gaze. Plain global
/// average pooling mixes every instance in the scene and cannot learn the
/// class of the gazed one at this capacity.
#[derive(Debug, Clone)]
pub struct ToyBackbone<T> {
    seg1: Conv2d<T>,
    seg2: Conv2d<T>,
    seg_out: Conv2d<T>,
    cls1: Conv2d<T>,
    cls2: Conv2d<T>,
    cls_fc: Linear<T>,
}

/// Sharpness of the gaze-weighted class pooling.
pub const GAZE_POOL_EXPONENT: i32 = 8;

#[derive(Debug, Clone)]
pub struct ToyBackboneGrads<T> {
    seg1: Conv2dGrads<T>,
    seg2: Conv2dGrads<T>,
    seg_out: Conv2dGrads<T>,
    cls1: Conv2dGrads<T>,
    cls2: Conv2dGrads<T>,
    cls_fc: LinearGrads<T>,
}

pub struct ToyBackboneCache<T> {
    x: Array3<T>,
    s1: Array3<T>,
    s2: Array3<T>,
    c1: Array3<T>,
    p1: Array3<T>,
    arg1: Vec<usize>,
    c2: Array3<T>,
    gaze_half: ndarray::Array2<T>,
    weights: ndarray::Array2<T>,
    weight_sum: T,
    pooled: Array1<T>,
}

impl<T: Real> ToyBackbone<T> {
    pub fn new(in_channels: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut seg_out = Conv2d::new(16, 1, 1, 0, rng);
        // Prior-probability bias: start the mask head predicting background
        // (foreground prior ~0.1) so the focal term does not drown the early
        // epochs in spurious foreground.
        seg_out.bias[0] = T::from_f64_lit(-(0.9f64 / 0.1).ln());
        Self {
            seg1: Conv2d::new(in_channels, 16, 3, 1, rng),
            seg2: Conv2d::new(16, 16, 3, 1, rng),
            seg_out,
            cls1: Conv2d::new(in_channels, 16, 3, 1, rng),
            cls2: Conv2d::new(16, 32, 3, 1, rng),
            cls_fc: Linear::new(32, num_classes, rng),
        }
    }

    pub fn forward_cached(&self, x: &Array3<T>) -> Result<(BackboneOut<T>, ToyBackboneCache<T>)> {
        let (channels, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidDimension(format!(
                "backbone input {h}x{w} must be even"
            )));
        }
        if channels != self.cls1.in_channels() {
            return Err(Error::shape(
                format!("{} channels", self.cls1.in_channels()),
                format!("{channels}"),
                "backbone input",
            ));
        }
        let s1 = relu(&self.seg1.forward(x)?);
        let s2 = relu(&self.seg2.forward(&s1)?);
        let seg_logits = self.seg_out.forward(&s2)?;

        let c1 = relu(&self.cls1.forward(x)?);
        let (p1, arg1) = maxpool2(&c1)?;
        let c2 = relu(&self.cls2.forward(&p1)?);

        // Gaze-weighted pooling: 2x2-average the gaze channel down to the
        // feature resolution, sharpen it, and use it as pooling weights.
        let gaze = x.index_axis(ndarray::Axis(0), channels - 1);
        let (fh, fw) = (h / 2, w / 2);
        let quarter = T::from_f64_lit(0.25);
        let gaze_half = ndarray::Array2::from_shape_fn((fh, fw), |(i, j)| {
            (gaze[[2 * i, 2 * j]]
                + gaze[[2 * i, 2 * j + 1]]
                + gaze[[2 * i + 1, 2 * j]]
                + gaze[[2 * i + 1, 2 * j + 1]])
                * quarter
        });
        let weights = gaze_half.mapv(|g| g.max(T::zero()).powi(GAZE_POOL_EXPONENT));
        let weight_sum = weights.iter().copied().sum::<T>() + T::from_f64_lit(1e-12);
        let n_feat = c2.dim().0;
        let pooled = Array1::from_shape_fn(n_feat, |c| {
            let mut acc = T::zero();
            for i in 0..fh {
                for j in 0..fw {
                    acc += c2[[c, i, j]] * weights[[i, j]];
                }
            }
            acc / weight_sum
        });
        let cls_logits = self.cls_fc.forward(&pooled);

        let cache = ToyBackboneCache {
            x: x.clone(),
            s1,
            s2,
            c1,
            p1,
            arg1,
            c2,
            gaze_half,
            weights,
            weight_sum,
            pooled,
        };
        Ok((BackboneOut { seg_logits, cls_logits }, cache))
    }

    /// Accumulates parameter gradients and returns the input gradient so the
    /// loss can keep flowing into the sampler.
    pub fn backward(
        &self,
        cache: &ToyBackboneCache<T>,
        d_seg_logits: &Array3<T>,
        d_cls_logits: &Array1<T>,
        grads: &mut ToyBackboneGrads<T>,
    ) -> Result<Array3<T>> {
        let d_s2 = self.seg_out.backward(&cache.s2, d_seg_logits, &mut grads.seg_out)?;
        let d_s2 = relu_backward(&cache.s2, &d_s2);
        let d_s1 = self.seg2.backward(&cache.s1, &d_s2, &mut grads.seg2)?;
        let d_s1 = relu_backward(&cache.s1, &d_s1);
        let mut d_x = self.seg1.backward(&cache.x, &d_s1, &mut grads.seg1)?;

        let d_pooled = self.cls_fc.backward(&cache.pooled, d_cls_logits, &mut grads.cls_fc);
        let (n_feat, fh, fw) = cache.c2.dim();
        let mut d_c2 = Array3::zeros((n_feat, fh, fw));
        let mut d_weights = ndarray::Array2::<T>::zeros((fh, fw));
        for c in 0..n_feat {
            let g = d_pooled[c];
            if g == T::zero() {
                continue;
            }
            for i in 0..fh {
                for j in 0..fw {
                    d_c2[[c, i, j]] += g * cache.weights[[i, j]] / cache.weight_sum;
                    d_weights[[i, j]] +=
                        g * (cache.c2[[c, i, j]] - cache.pooled[c]) / cache.weight_sum;
                }
            }
        }
        let d_c2 = relu_backward(&cache.c2, &d_c2);
        let d_p1 = self.cls2.backward(&cache.p1, &d_c2, &mut grads.cls2)?;
        let d_c1 = maxpool2_backward(cache.c1.dim(), &cache.arg1, &d_p1);
        let d_c1 = relu_backward(&cache.c1, &d_c1);
        d_x += &self.cls1.backward(&cache.x, &d_c1, &mut grads.cls1)?;

        // Pooling-weight gradient back into the gaze channel.
        let exp = T::from_f64_lit(GAZE_POOL_EXPONENT as f64);
        let gaze_slot = cache.x.dim().0 - 1;
        let quarter = T::from_f64_lit(0.25);
        for i in 0..fh {
            for j in 0..fw {
                let g_half = cache.gaze_half[[i, j]].max(T::zero());
                let d_half = d_weights[[i, j]] * exp * g_half.powi(GAZE_POOL_EXPONENT - 1);
                let d_px = d_half * quarter;
                d_x[[gaze_slot, 2 * i, 2 * j]] += d_px;
                d_x[[gaze_slot, 2 * i, 2 * j + 1]] += d_px;
                d_x[[gaze_slot, 2 * i + 1, 2 * j]] += d_px;
                d_x[[gaze_slot, 2 * i + 1, 2 * j + 1]] += d_px;
            }
        }
        Ok(d_x)
    }
}

impl<T: Real> Backbone<T> for ToyBackbone<T> {
    fn num_classes(&self) -> usize {
        self.cls_fc.weight.dim().0
    }

    fn forward(&self, x: &Array3<T>) -> Result<BackboneOut<T>> {
        Ok(self.forward_cached(x)?.0)
    }
}

impl<T: Real> ParamSet<T> for ToyBackbone<T> {
    type Grads = ToyBackboneGrads<T>;

    fn zero_grads(&self) -> ToyBackboneGrads<T> {
        ToyBackboneGrads {
            seg1: self.seg1.zero_grads(),
            seg2: self.seg2.zero_grads(),
            seg_out: self.seg_out.zero_grads(),
            cls1: self.cls1.zero_grads(),
            cls2: self.cls2.zero_grads(),
            cls_fc: self.cls_fc.zero_grads(),
        }
    }

    fn param_slices(&self) -> Vec<(&'static str, &[T])> {
        vec![
            ("backbone.seg1.w", self.seg1.weight.as_slice().unwrap()),
            ("backbone.seg1.b", self.seg1.bias.as_slice().unwrap()),
            ("backbone.seg2.w", self.seg2.weight.as_slice().unwrap()),
            ("backbone.seg2.b", self.seg2.bias.as_slice().unwrap()),
            ("backbone.seg_out.w", self.seg_out.weight.as_slice().unwrap()),
            ("backbone.seg_out.b", self.seg_out.bias.as_slice().unwrap()),
            ("backbone.cls1.w", self.cls1.weight.as_slice().unwrap()),
            ("backbone.cls1.b", self.cls1.bias.as_slice().unwrap()),
            ("backbone.cls2.w", self.cls2.weight.as_slice().unwrap()),
            ("backbone.cls2.b", self.cls2.bias.as_slice().unwrap()),
            ("backbone.cls_fc.w", self.cls_fc.weight.as_slice().unwrap()),
            ("backbone.cls_fc.b", self.cls_fc.bias.as_slice().unwrap()),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("backbone.seg1.w", self.seg1.weight.as_slice_mut().unwrap()),
            ("backbone.seg1.b", self.seg1.bias.as_slice_mut().unwrap()),
            ("backbone.seg2.w", self.seg2.weight.as_slice_mut().unwrap()),
            ("backbone.seg2.b", self.seg2.bias.as_slice_mut().unwrap()),
            ("backbone.seg_out.w", self.seg_out.weight.as_slice_mut().unwrap()),
            ("backbone.seg_out.b", self.seg_out.bias.as_slice_mut().unwrap()),
            ("backbone.cls1.w", self.cls1.weight.as_slice_mut().unwrap()),
            ("backbone.cls1.b", self.cls1.bias.as_slice_mut().unwrap()),
            ("backbone.cls2.w", self.cls2.weight.as_slice_mut().unwrap()),
            ("backbone.cls2.b", self.cls2.bias.as_slice_mut().unwrap()),
            ("backbone.cls_fc.w", self.cls_fc.weight.as_slice_mut().unwrap()),
            ("backbone.cls_fc.b", self.cls_fc.bias.as_slice_mut().unwrap()),
        ]
    }

    fn grad_slices(grads: &ToyBackboneGrads<T>) -> Vec<&[T]> {
        vec![
            grads.seg1.weight.as_slice().unwrap(),
            grads.seg1.bias.as_slice().unwrap(),
            grads.seg2.weight.as_slice().unwrap(),
            grads.seg2.bias.as_slice().unwrap(),
            grads.seg_out.weight.as_slice().unwrap(),
            grads.seg_out.bias.as_slice().unwrap(),
            grads.cls1.weight.as_slice().unwrap(),
            grads.cls1.bias.as_slice().unwrap(),
            grads.cls2.weight.as_slice().unwrap(),
            grads.cls2.bias.as_slice().unwrap(),
            grads.cls_fc.weight.as_slice().unwrap(),
            grads.cls_fc.bias.as_slice().unwrap(),
        ]
    }

    fn grad_slices_mut(grads: &mut ToyBackboneGrads<T>) -> Vec<&mut [T]> {
        vec![
            grads.seg1.weight.as_slice_mut().unwrap(),
            grads.seg1.bias.as_slice_mut().unwrap(),
            grads.seg2.weight.as_slice_mut().unwrap(),
            grads.seg2.bias.as_slice_mut().unwrap(),
            grads.seg_out.weight.as_slice_mut().unwrap(),
            grads.seg_out.bias.as_slice_mut().unwrap(),
            grads.cls1.weight.as_slice_mut().unwrap(),
            grads.cls1.bias.as_slice_mut().unwrap(),
            grads.cls2.weight.as_slice_mut().unwrap(),
            grads.cls2.bias.as_slice_mut().unwrap(),
            grads.cls_fc.weight.as_slice_mut().unwrap(),
            grads.cls_fc.bias.as_slice_mut().unwrap(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn output_shapes() {
        let mut rng = StdRng::seed_from_u64(1);
        let bb = ToyBackbone::<f64>::new(4, 3, &mut rng);
        let x = Array3::from_shape_fn((4, 8, 10), |_| rng.gen_range(-1.0..1.0));
        let out = bb.forward(&x).unwrap();
        assert_eq!(out.seg_logits.dim(), (1, 8, 10));
        assert_eq!(out.cls_logits.len(), 3);
        assert_eq!(bb.num_classes(), 3);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(2);
        let bb = ToyBackbone::<f64>::new(2, 3, &mut rng);
        let x = Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let seg_probe = Array3::from_shape_fn((1, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let cls_probe = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));

        let (_, cache) = bb.forward_cached(&x).unwrap();
        let mut grads = bb.zero_grads();
        let dx = bb.backward(&cache, &seg_probe, &cls_probe, &mut grads).unwrap();

        let objective = |inp: &Array3<f64>| {
            let out = bb.forward(inp).unwrap();
            (&out.seg_logits * &seg_probe).sum() + (&out.cls_logits * &cls_probe).sum()
        };
        let step = 1e-5;
        for _ in 0..25 {
            let c = rng.gen_range(0..2);
            let i = rng.gen_range(0..6);
            let j = rng.gen_range(0..6);
            let mut xp = x.clone();
            xp[[c, i, j]] += step;
            let mut xm = x.clone();
            xm[[c, i, j]] -= step;
            let numeric = (objective(&xp) - objective(&xm)) / (2.0 * step);
            let a = dx[[c, i, j]];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / denom < 1e-4, "{a} vs {numeric}");
        }
    }
}
