//! Hand-rolled neural-network stack: layers with explicit backward passes,
//! the saliency U-Net, the two-branch segmentation backbone contract, and
//! adaptive optimizers. Sized for desk-scale training on a CPU.

pub mod backbone;
pub mod layers;
pub mod optim;
pub mod unet;

pub use backbone::{Backbone, BackboneOut, ToyBackbone, ToyBackboneGrads};
pub use layers::{Conv2d, Conv2dGrads, Linear, LinearGrads};
pub use optim::{AdaptiveOptimizer, ReduceLrOnPlateau};
pub use unet::{SaliencyNet, SaliencyNetGrads};

use crate::scalar::Real;

/// Uniform access to a module's parameters and gradients, in a fixed order.
/// Backs the optimizers, weight snapshots, and checkpointing.
pub trait ParamSet<T: Real> {
    type Grads;

    fn zero_grads(&self) -> Self::Grads;
    /// Parameter tensors as flat slices, with stable names.
    fn param_slices(&self) -> Vec<(&'static str, &[T])>;
    fn param_slices_mut(&mut self) -> Vec<(&'static str, &mut [T])>;
    fn grad_slices(grads: &Self::Grads) -> Vec<&[T]>;
    fn grad_slices_mut(grads: &mut Self::Grads) -> Vec<&mut [T]>;
}

/// `acc += other`, slice-aligned.
pub fn accumulate_grads<T: Real, P: ParamSet<T>>(acc: &mut P::Grads, other: &P::Grads) {
    let mut a = P::grad_slices_mut(acc);
    let b = P::grad_slices(other);
    for (dst, src) in a.iter_mut().zip(b) {
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d += *s;
        }
    }
}

pub fn scale_grads<T: Real, P: ParamSet<T>>(grads: &mut P::Grads, k: T) {
    for slice in P::grad_slices_mut(grads) {
        for g in slice {
            *g *= k;
        }
    }
}

/// Copy of all parameters, used to restore best-validation weights.
pub fn snapshot<T: Real, P: ParamSet<T>>(module: &P) -> Vec<Vec<T>> {
    module.param_slices().into_iter().map(|(_, s)| s.to_vec()).collect()
}

pub fn restore<T: Real, P: ParamSet<T>>(module: &mut P, snap: &[Vec<T>]) {
    let mut slices = module.param_slices_mut();
    assert_eq!(slices.len(), snap.len(), "snapshot layout mismatch");
    for ((_, dst), src) in slices.iter_mut().zip(snap) {
        dst.copy_from_slice(src);
    }
}

/// Bit-level fingerprint of all parameters; used by the freeze-contract tests.
pub fn param_checksum<T: Real, P: ParamSet<T>>(module: &P) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (_, slice) in module.param_slices() {
        for &x in slice {
            let bits = x.to_f64_lit().to_bits();
            h ^= bits;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
