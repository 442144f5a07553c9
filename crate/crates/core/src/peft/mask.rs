use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::Scalar;
use crate::vit::{BlockOrigin, ParamOrigin, ViTModel};

/// Which parameters a fine-tuning strategy trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum MaskStrategy {
    /// Everything.
    Full,
    /// Head and the last `k` blocks.
    TopK(usize),
    /// Head only.
    Linear,
    /// Every LoRA `A`/`B` plus the head.
    LoraOnly,
    /// Blocks tagged expanded plus the head.
    ExpandedOnly,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskStrategy::Full => write!(f, "full"),
            MaskStrategy::TopK(k) => write!(f, "top-{k}"),
            MaskStrategy::Linear => write!(f, "linear"),
            MaskStrategy::LoraOnly => write!(f, "lora-only"),
            MaskStrategy::ExpandedOnly => write!(f, "expanded-only"),
        }
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => MaskStrategy::Full,
            "linear" => MaskStrategy::Linear,
            "lora-only" => MaskStrategy::LoraOnly,
            "expanded-only" => MaskStrategy::ExpandedOnly,
            _ => match s.strip_prefix("top-").and_then(|k| k.parse().ok()) {
                Some(k) => MaskStrategy::TopK(k),
                None => bail!(Usage, "unknown mask strategy '{s}'"),
            },
        })
    }
}

impl From<MaskStrategy> for String {
    fn from(s: MaskStrategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for MaskStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Per-parameter-tensor trainability, aligned with [`ViTModel::params`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    strategy: MaskStrategy,
    names: Vec<String>,
    trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn from_parts(
        strategy: MaskStrategy,
        names: Vec<String>,
        trainable: Vec<bool>,
    ) -> Result<Self> {
        if names.len() != trainable.len() {
            bail!(Usage, "{} names but {} flags", names.len(), trainable.len());
        }
        Ok(FreezeMask {
            strategy,
            names,
            trainable,
        })
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable.get(i).copied().unwrap_or(false)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.trainable
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Errors unless the mask lists exactly the model's parameters, in order.
    pub fn check_covers<T: Scalar>(&self, model: &ViTModel<T>) -> Result<()> {
        let names = model.param_names();
        if names != self.names {
            bail!(
                Usage,
                "freeze mask covers {} tensors but model has {} (or names differ)",
                self.names.len(),
                names.len()
            );
        }
        Ok(())
    }
}

/// Builds the mask for `strategy`. Layer norms inside frozen regions stay
/// frozen, including the final norm under `TopK`.
pub fn build_freeze_mask<T: Scalar>(
    model: &ViTModel<T>,
    strategy: MaskStrategy,
) -> Result<FreezeMask> {
    let depth = model.depth();
    match strategy {
        MaskStrategy::TopK(k) if k > depth => {
            bail!(Usage, "top-{k} exceeds model depth {depth}")
        }
        MaskStrategy::LoraOnly if model.adapter.is_none() => {
            bail!(Usage, "lora-only needs a model with adapters attached")
        }
        MaskStrategy::ExpandedOnly
            if !model
                .blocks
                .iter()
                .any(|b| b.origin == BlockOrigin::Expanded) =>
        {
            bail!(Usage, "expanded-only needs a model with expanded blocks")
        }
        _ => {}
    }
    let block_of = |name: &str| -> Option<usize> {
        name.strip_prefix("blocks.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse().ok())
    };
    let params = model.params();
    let mut names = Vec::with_capacity(params.len());
    let mut flags = Vec::with_capacity(params.len());
    for (name, _, origin) in params {
        let is_head = name.starts_with("head.");
        let on = match strategy {
            MaskStrategy::Full => true,
            MaskStrategy::Linear => is_head,
            MaskStrategy::TopK(k) => is_head || block_of(&name).is_some_and(|b| b + k >= depth),
            MaskStrategy::LoraOnly => is_head || origin == ParamOrigin::Adapter,
            MaskStrategy::ExpandedOnly => is_head || origin == ParamOrigin::Expanded,
        };
        names.push(name);
        flags.push(on);
    }
    FreezeMask::from_parts(strategy, names, flags)
}
