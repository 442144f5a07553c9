use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::derive_seed;
use crate::tensor::{Init, Scalar, Tensor};
use crate::vit::{LoraAdapters, LoraPair, ViTModel};

/// Attention projections that carry adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTarget {
    Q,
    V,
}

/// Low-rank adapters `W' = W + (alpha/r)·A·B` on the query and value
/// projections of every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub r: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub targets: Vec<LoraTarget>,
}

impl AdapterSpec {
    /// Rank `r` with `alpha = r` (unit scale) and `A ~ N(0, 0.02)`.
    pub fn new(r: usize) -> Self {
        AdapterSpec::with_alpha(r, r as f64)
    }

    pub fn with_alpha(r: usize, alpha: f64) -> Self {
        AdapterSpec {
            r,
            alpha,
            init_std: 0.02,
            targets: vec![LoraTarget::Q, LoraTarget::V],
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            bail!(Spec, "LoRA rank must be at least 1");
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            bail!(Spec, "LoRA alpha must be positive, got {}", self.alpha);
        }
        if !self.init_std.is_finite() || self.init_std < 0.0 {
            bail!(Spec, "LoRA init_std must be non-negative");
        }
        if self.targets != [LoraTarget::Q, LoraTarget::V] {
            bail!(Spec, "adapters target exactly the Q and V projections");
        }
        Ok(())
    }

    /// Scalars added per block: two targets, each `d·r + r·d`.
    pub fn params_per_block(&self, dim: usize) -> usize {
        2 * 2 * dim * self.r
    }
}

/// Returns a copy of `model` with fresh adapters on every block. `B` starts
/// at zero, so the adapted model computes exactly the same function.
pub fn attach_lora<T: Scalar>(
    model: &ViTModel<T>,
    spec: &AdapterSpec,
    seed: u64,
) -> Result<ViTModel<T>> {
    spec.validate()?;
    if model.adapter.is_some() || model.blocks.iter().any(|b| b.lora.is_some()) {
        bail!(Usage, "model already carries LoRA adapters");
    }
    let d = model.config.dim;
    let r = spec.r;
    let pair = |name: String| -> Result<LoraPair<T>> {
        Ok(LoraPair {
            a: Tensor::new(
                &[d, r],
                Init::SeededNormal {
                    seed: derive_seed(seed, &name, 0),
                    mean: 0.0,
                    std: spec.init_std,
                },
            )?,
            b: Tensor::zeros(&[r, d])?,
        })
    };
    let mut out = model.clone();
    for (i, block) in out.blocks.iter_mut().enumerate() {
        block.lora = Some(LoraAdapters {
            q: pair(format!("blocks.{i}.lora.q.a"))?,
            v: pair(format!("blocks.{i}.lora.v.a"))?,
        });
    }
    out.adapter = Some(spec.clone());
    Ok(out)
}

/// `W[:, cols] += scale · A·B`
fn fold_into<T: Scalar>(w: &mut Tensor<T>, col0: usize, pair: &LoraPair<T>, scale: T) {
    let (d, r) = (pair.a.shape()[0], pair.a.shape()[1]);
    let width = w.shape()[1];
    let mut ab = vec![T::zero(); d * d];
    crate::tensor::kernels_gemm(d, r, d, pair.a.data(), pair.b.data(), &mut ab);
    let wd = w.data_mut();
    for i in 0..d {
        for j in 0..d {
            wd[i * width + col0 + j] += scale * ab[i * d + j];
        }
    }
}

/// Folds adapters into the fused QKV weights and removes them.
pub fn merge_lora<T: Scalar>(model: &ViTModel<T>) -> Result<ViTModel<T>> {
    let Some(spec) = model.adapter.as_ref() else {
        bail!(Usage, "model has no LoRA adapters to merge");
    };
    let scale = T::of(spec.scale());
    let d = model.config.dim;
    let mut out = model.clone();
    for block in &mut out.blocks {
        let Some(lora) = block.lora.take() else {
            bail!(Usage, "adapter spec present but a block has no adapters");
        };
        fold_into(&mut block.qkv.weight, 0, &lora.q, scale);
        fold_into(&mut block.qkv.weight, 2 * d, &lora.v, scale);
    }
    out.adapter = None;
    Ok(out)
}
