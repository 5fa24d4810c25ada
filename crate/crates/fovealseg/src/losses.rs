//! Training objective: soft dice plus area-weighted focal loss, computed in
//! the downsampled space against grid-subsampled ground truth.
//!
//! `pred` is a `[C, h, w]` map of class probabilities (the composed mask);
//! `target` is `[C, h, w]` with the instance-of-interest class channel set to
//! 1 inside the instance and every channel 0 on background pixels.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Loss configuration: focal weight, focal exponent, dice smoothing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig<T> {
    pub lambda: T,
    pub gamma: T,
    pub epsilon: T,
}

impl<T: Real> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            lambda: T::one(),
            gamma: T::two(),
            epsilon: T::from_f64_lit(1e-6),
        }
    }
}

impl<T: Real> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < T::zero() || self.gamma < T::zero() || !(self.epsilon > T::zero()) {
            return Err(Error::Config(format!(
                "loss config requires lambda >= 0, gamma >= 0, epsilon > 0 (got {}, {}, {})",
                self.lambda, self.gamma, self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Real>(pred: &Array3<T>, target: &Array3<T>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(
            format!("{:?}", pred.dim()),
            format!("{:?}", target.dim()),
            "loss prediction vs target",
        ));
    }
    Ok(())
}

/// Locate the instance class channel and the foreground mask in a target map.
/// Returns the class index (None when the target is all background) and the
/// foreground pixel count.
fn target_class<T: Real>(target: &Array3<T>) -> Result<(Option<usize>, usize)> {
    let (channels, h, w) = target.dim();
    let mut class = None;
    let mut fg = 0usize;
    for i in 0..h {
        for j in 0..w {
            let mut hit = None;
            for c in 0..channels {
                let x = target[[c, i, j]];
                if x == T::one() {
                    if hit.is_some() {
                        return Err(Error::Validation(format!(
                            "target has multiple active channels at ({i},{j})"
                        )));
                    }
                    hit = Some(c);
                } else if x != T::zero() {
                    return Err(Error::Validation(format!(
                        "target entries must be 0 or 1, got {x} at ({c},{i},{j})"
                    )));
                }
            }
            if let Some(c) = hit {
                fg += 1;
                match class {
                    None => class = Some(c),
                    Some(prev) if prev != c => {
                        return Err(Error::Validation(format!(
                            "target mixes classes {prev} and {c}; one instance class expected"
                        )));
                    }
                    _ => {}
                }
            }
        }
    }
    Ok((class, fg))
}

/// Soft dice loss `1 - (2*sum(pred*target) + eps) / (sum(pred) + sum(target) + eps)`
/// summed over all pixels and channels.
pub fn dice_loss<T: Real>(pred: &Array3<T>, target: &Array3<T>, epsilon: T) -> Result<T> {
    check_pair(pred, target)?;
    let mut inter = T::zero();
    let mut p_sum = T::zero();
    let mut t_sum = T::zero();
    for (&p, &t) in pred.iter().zip(target.iter()) {
        inter += p * t;
        p_sum += p;
        t_sum += t;
    }
    Ok(T::one() - (T::two() * inter + epsilon) / (p_sum + t_sum + epsilon))
}

/// Focal loss output together with the empty-region flags raised during the
/// computation (dropped terms are signaled, not errors).
#[derive(Debug, Clone, Copy)]
pub struct FocalOutput<T> {
    pub value: T,
    pub empty_foreground: bool,
    pub empty_background: bool,
}

const PT_CLIP: f64 = 1e-7;

/// Area-weighted focal loss. Every foreground pixel is weighted by
/// `1/|IOI|`, every background pixel by `1/|non-IOI|`; the per-pixel term is
/// `-(1 - p_t)^gamma * log(p_t)` with `p_t` the predicted probability of the
/// pixel's true label, read from the instance class channel.
pub fn area_weighted_focal_loss<T: Real>(
    pred: &Array3<T>,
    target: &Array3<T>,
    gamma: T,
) -> Result<FocalOutput<T>> {
    check_pair(pred, target)?;
    let (_, h, w) = pred.dim();
    let (class, fg) = target_class(target)?;
    let total = h * w;
    let bg = total - fg;
    let empty_foreground = fg == 0;
    let empty_background = bg == 0;

    let lo = T::from_f64_lit(PT_CLIP);
    let hi = T::one() - lo;
    let w_fg = if fg > 0 { T::one() / T::from_usize_lit(fg) } else { T::zero() };
    let w_bg = if bg > 0 { T::one() / T::from_usize_lit(bg) } else { T::zero() };

    let mut value = T::zero();
    if let Some(c) = class {
        for i in 0..h {
            for j in 0..w {
                let is_fg = target[[c, i, j]] == T::one();
                let p = pred[[c, i, j]];
                let p_t = if is_fg { p } else { T::one() - p };
                let p_t = p_t.max(lo).min(hi);
                let weight = if is_fg { w_fg } else { w_bg };
                value += weight * (T::one() - p_t).powf(gamma) * (-p_t.ln());
            }
        }
    } else if bg > 0 {
        // All-background target: the foreground term is dropped; a correct
        // prediction has zero probability mass everywhere, so p_t = 1 - max_c pred.
        for i in 0..h {
            for j in 0..w {
                let mut p_max = T::zero();
                for c in 0..pred.dim().0 {
                    p_max = p_max.max(pred[[c, i, j]]);
                }
                let p_t = (T::one() - p_max).max(lo).min(hi);
                value += w_bg * (T::one() - p_t).powf(gamma) * (-p_t.ln());
            }
        }
    }
    Ok(FocalOutput { value, empty_foreground, empty_background })
}

/// Combined objective and its flags.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss<T> {
    pub value: T,
    pub dice: T,
    pub focal: T,
    pub empty_foreground: bool,
}

/// `dice + lambda * focal`.
pub fn total_loss<T: Real>(pred: &Array3<T>, target: &Array3<T>, cfg: &LossConfig<T>) -> Result<TotalLoss<T>> {
    cfg.validate()?;
    let dice = dice_loss(pred, target, cfg.epsilon)?;
    let focal = area_weighted_focal_loss(pred, target, cfg.gamma)?;
    Ok(TotalLoss {
        value: dice + cfg.lambda * focal.value,
        dice,
        focal: focal.value,
        empty_foreground: focal.empty_foreground,
    })
}

/// Value and analytic gradient of [`total_loss`] with respect to `pred`.
pub fn total_loss_with_grad<T: Real>(
    pred: &Array3<T>,
    target: &Array3<T>,
    cfg: &LossConfig<T>,
) -> Result<(TotalLoss<T>, Array3<T>)> {
    cfg.validate()?;
    let loss = total_loss(pred, target, cfg)?;
    let (channels, h, w) = pred.dim();

    // Dice gradient.
    let mut inter = T::zero();
    let mut p_sum = T::zero();
    let mut t_sum = T::zero();
    for (&p, &t) in pred.iter().zip(target.iter()) {
        inter += p * t;
        p_sum += p;
        t_sum += t;
    }
    let s = p_sum + t_sum + cfg.epsilon;
    let num = T::two() * inter + cfg.epsilon;
    let mut grad = Array3::zeros((channels, h, w));
    for ((c, i, j), g) in grad.indexed_iter_mut() {
        let t = target[[c, i, j]];
        *g = -(T::two() * t * s - num) / (s * s);
    }

    // Focal gradient: only the instance class channel carries one.
    let (class, fg) = target_class(target)?;
    let total = h * w;
    let bg = total - fg;
    let lo = T::from_f64_lit(PT_CLIP);
    let hi = T::one() - lo;
    let w_fg = if fg > 0 { T::one() / T::from_usize_lit(fg) } else { T::zero() };
    let w_bg = if bg > 0 { T::one() / T::from_usize_lit(bg) } else { T::zero() };
    if let Some(c) = class {
        for i in 0..h {
            for j in 0..w {
                let is_fg = target[[c, i, j]] == T::one();
                let p = pred[[c, i, j]];
                let raw_pt = if is_fg { p } else { T::one() - p };
                if raw_pt <= lo || raw_pt >= hi {
                    continue; // clipped: zero gradient
                }
                let p_t = raw_pt;
                let weight = if is_fg { w_fg } else { w_bg };
                let one_m = T::one() - p_t;
                let mut d_pt = -one_m.powf(cfg.gamma) / p_t;
                if cfg.gamma > T::zero() {
                    d_pt += cfg.gamma * one_m.powf(cfg.gamma - T::one()) * p_t.ln();
                }
                let d_p = if is_fg { d_pt } else { -d_pt };
                grad[[c, i, j]] += cfg.lambda * weight * d_p;
            }
        }
    }
    Ok((loss, grad))
}
