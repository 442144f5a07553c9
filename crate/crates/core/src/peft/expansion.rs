use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{BlockOrigin, ViTModel};

/// Insert `p` identity blocks: the `depth` original blocks are split into
/// `p` groups of `M = depth / p`, and a copy of each group's topmost block
/// goes directly above it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    pub p: usize,
    /// 1-indexed positions in the pre-expansion stack after which copies
    /// are inserted: `M, 2M, …, pM`.
    pub placement: Vec<usize>,
}

impl ExpansionSpec {
    pub fn new(p: usize, depth: usize) -> Result<Self> {
        if p < 1 || p > depth {
            bail!(Spec, "p = {p} must be in 1..={depth}");
        }
        if !depth.is_multiple_of(p) {
            bail!(Spec, "depth {depth} is not divisible into {p} groups");
        }
        let group = depth / p;
        Ok(ExpansionSpec {
            p,
            placement: (1..=p).map(|i| i * group).collect(),
        })
    }

    pub fn group_size(&self) -> usize {
        self.placement.first().copied().unwrap_or(0)
    }
}

fn zero_like<T: Scalar>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|x| *x = T::zero());
    t.grad = None;
}

/// Returns a deeper model with identity blocks inserted; `model` is not
/// modified.
///
/// Each copy has its attention output projection and MLP down projection
/// (weights and biases) zeroed, so both residual branches add exactly zero
/// and the network function is unchanged.
pub fn expand_blocks<T: Scalar>(model: &ViTModel<T>, spec: &ExpansionSpec) -> Result<ViTModel<T>> {
    let expected = ExpansionSpec::new(spec.p, model.depth())?;
    if *spec != expected {
        bail!(
            Spec,
            "placement {:?} does not match depth {} (expected {:?})",
            spec.placement,
            model.depth(),
            expected.placement
        );
    }
    let mut blocks = Vec::with_capacity(model.depth() + spec.p);
    for (i, block) in model.blocks.iter().enumerate() {
        blocks.push(block.clone());
        if spec.placement.contains(&(i + 1)) {
            let mut copy = block.clone();
            zero_like(&mut copy.attn_out.weight);
            zero_like(&mut copy.attn_out.bias);
            zero_like(&mut copy.mlp_down.weight);
            zero_like(&mut copy.mlp_down.bias);
            copy.origin = BlockOrigin::Expanded;
            blocks.push(copy);
        }
    }
    let mut out = ViTModel {
        config: model.config.clone(),
        patch_embed: model.patch_embed.clone(),
        cls_token: model.cls_token.clone(),
        pos_embed: model.pos_embed.clone(),
        blocks,
        final_norm: model.final_norm.clone(),
        head: model.head.clone(),
        adapter: model.adapter.clone(),
        expansions: model.expansions.clone(),
    };
    out.config.depth = out.blocks.len();
    out.expansions.push(spec.clone());
    Ok(out)
}
