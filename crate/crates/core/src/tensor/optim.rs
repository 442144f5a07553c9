use super::{Scalar, Tensor};
use crate::error::{bail, Result};
use crate::peft::FreezeMask;

/// Stochastic gradient descent with heavy-ball momentum and no weight decay:
/// `v ← momentum·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: f64,
    momentum: f64,
    buffers: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr.is_nan() || lr < 0.0 {
            bail!(Input, "learning rate must be non-negative, got {lr}");
        }
        if !(0.0..1.0).contains(&momentum) {
            bail!(Input, "momentum must be in [0, 1), got {momentum}");
        }
        Ok(Sgd {
            lr,
            momentum,
            buffers: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Momentum buffer of parameter `i`, if it has been stepped.
    pub fn buffer(&self, i: usize) -> Option<&[T]> {
        self.buffers.get(i).and_then(|b| b.as_deref())
    }

    /// Updates every parameter the mask marks trainable. Frozen parameters
    /// and their buffers are not touched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], mask: &FreezeMask) -> Result<()> {
        if params.len() != mask.len() {
            bail!(
                Usage,
                "mask covers {} tensors, got {}",
                mask.len(),
                params.len()
            );
        }
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        let lr = T::of(self.lr);
        let momentum = T::of(self.momentum);
        for (i, p) in params.iter_mut().enumerate() {
            if !mask.is_trainable(i) {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                bail!(
                    Usage,
                    "trainable parameter {} has no gradient",
                    mask.name(i)
                );
            };
            if grad.len() != p.len() {
                bail!(Shape, "gradient length mismatch for {}", mask.name(i));
            }
            let buf = self.buffers[i].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for (v, &g) in buf.iter_mut().zip(grad) {
                *v = momentum * *v + g;
            }
            let buf = &*buf;
            for (x, &v) in p.data_mut().iter_mut().zip(buf) {
                *x -= lr * v;
            }
        }
        Ok(())
    }
}
