use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{forward_logits, ViTModel};

/// Largest absolute logit difference between two models over `probes`
/// (`[B, C, H, W]`).
pub fn verify_identity<T: Scalar>(
    original: &ViTModel<T>,
    modified: &ViTModel<T>,
    probes: &Tensor<T>,
) -> Result<f64> {
    if original.config.num_classes != modified.config.num_classes {
        bail!(
            Usage,
            "class counts differ: {} vs {}",
            original.config.num_classes,
            modified.config.num_classes
        );
    }
    let a = forward_logits(original, probes)?;
    let b = forward_logits(modified, probes)?;
    a.max_abs_diff(&b)
}
