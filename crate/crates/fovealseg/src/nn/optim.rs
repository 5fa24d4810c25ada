//! Adaptive optimizers and the plateau learning-rate schedule.

use crate::scalar::Real;

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DecayMode {
    /// L2 regularization folded into the gradient.
    Coupled,
    /// Decoupled decay applied directly to the weights.
    Decoupled,
}

/// Adam-family optimizer covering the two stages: a Nesterov-momentum
/// variant with coupled L2 decay, and a decoupled-weight-decay variant.
#[derive(Debug, Clone)]
pub struct AdaptiveOptimizer<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    nesterov: bool,
    decay: DecayMode,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdaptiveOptimizer<T> {
    /// Nesterov-accelerated adaptive method with L2 weight decay.
    pub fn nadam(lr: T, weight_decay: T) -> Self {
        Self::new(lr, weight_decay, true, DecayMode::Coupled)
    }

    /// Decoupled-weight-decay adaptive method.
    pub fn adamw(lr: T, weight_decay: T) -> Self {
        Self::new(lr, weight_decay, false, DecayMode::Decoupled)
    }

    fn new(lr: T, weight_decay: T, nesterov: bool, decay: DecayMode) -> Self {
        Self {
            lr,
            beta1: T::from_f64_lit(0.9),
            beta2: T::from_f64_lit(0.999),
            eps: T::from_f64_lit(1e-8),
            weight_decay,
            nesterov,
            decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    /// One update over slice-aligned parameters and gradients.
    pub fn step(&mut self, params: &mut [(&'static str, &mut [T])], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient layout mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        self.t += 1;
        let t = T::from_f64_lit(self.t as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        for (slot, ((_, param), grad)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..param.len() {
                let mut g = grad[i];
                if self.decay == DecayMode::Coupled {
                    g += self.weight_decay * param[i];
                }
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let v_hat = v[i] / bc2;
                let numer = if self.nesterov {
                    self.beta1 * (m[i] / bc1) + (T::one() - self.beta1) * g / bc1
                } else {
                    m[i] / bc1
                };
                let mut update = self.lr * numer / (v_hat.sqrt() + self.eps);
                if self.decay == DecayMode::Decoupled {
                    update += self.lr * self.weight_decay * param[i];
                }
                param[i] -= update;
            }
        }
    }
}

/// Multiply the learning rate by `factor` after `patience` observations
/// without improvement of the monitored value.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau<T> {
    factor: T,
    patience: usize,
    best: Option<T>,
    bad_epochs: usize,
}

impl<T: Real> ReduceLrOnPlateau<T> {
    pub fn new(factor: T, patience: usize) -> Self {
        Self { factor, patience, best: None, bad_epochs: 0 }
    }

    /// Returns the new learning rate if a reduction fires.
    pub fn observe(&mut self, value: T, current_lr: T) -> Option<T> {
        match self.best {
            Some(best) if value < best => {
                self.best = Some(value);
                self.bad_epochs = 0;
                None
            }
            Some(_) => {
                self.bad_epochs += 1;
                if self.bad_epochs > self.patience {
                    self.bad_epochs = 0;
                    Some(current_lr * self.factor)
                } else {
                    None
                }
            }
            None => {
                self.best = Some(value);
                None
            }
        }
    }
}
