use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    attach_lora, build_freeze_mask, expand_blocks, AdapterSpec, ExpansionSpec, FreezeMask,
    MaskStrategy,
};
use crate::error::{bail, Error, Result};
use crate::tensor::Scalar;
use crate::vit::ViTModel;

/// A complete fine-tuning recipe: optional surgery plus a freeze mask.
///
/// Tags: `full`, `linear`, `top-<k>`, `lora-r<r>` (alpha = r),
/// `lora-r<r>-a<alpha>`, `blockexp-p<p>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    Full,
    TopK(usize),
    Linear,
    Lora { r: usize, alpha: f64 },
    BlockExpansion { p: usize },
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Full => write!(f, "full"),
            Strategy::TopK(k) => write!(f, "top-{k}"),
            Strategy::Linear => write!(f, "linear"),
            Strategy::Lora { r, alpha } if *alpha == *r as f64 => write!(f, "lora-r{r}"),
            Strategy::Lora { r, alpha } => write!(f, "lora-r{r}-a{alpha}"),
            Strategy::BlockExpansion { p } => write!(f, "blockexp-p{p}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("unknown strategy '{s}'"));
        Ok(match s {
            "full" => Strategy::Full,
            "linear" => Strategy::Linear,
            _ => {
                if let Some(k) = s.strip_prefix("top-") {
                    Strategy::TopK(k.parse().map_err(|_| bad())?)
                } else if let Some(p) = s.strip_prefix("blockexp-p") {
                    Strategy::BlockExpansion {
                        p: p.parse().map_err(|_| bad())?,
                    }
                } else if let Some(rest) = s.strip_prefix("lora-r") {
                    let (r, alpha) = match rest.split_once("-a") {
                        Some((r, a)) => {
                            let r: usize = r.parse().map_err(|_| bad())?;
                            (r, a.parse::<f64>().map_err(|_| bad())?)
                        }
                        None => {
                            let r: usize = rest.parse().map_err(|_| bad())?;
                            (r, r as f64)
                        }
                    };
                    Strategy::Lora { r, alpha }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl Strategy {
    pub fn mask_strategy(&self) -> MaskStrategy {
        match self {
            Strategy::Full => MaskStrategy::Full,
            Strategy::TopK(k) => MaskStrategy::TopK(*k),
            Strategy::Linear => MaskStrategy::Linear,
            Strategy::Lora { .. } => MaskStrategy::LoraOnly,
            Strategy::BlockExpansion { .. } => MaskStrategy::ExpandedOnly,
        }
    }

    /// Applies the strategy's surgery (if any); `model` is not modified.
    pub fn apply<T: Scalar>(&self, model: &ViTModel<T>, seed: u64) -> Result<ViTModel<T>> {
        match self {
            Strategy::Lora { r, alpha } => {
                attach_lora(model, &AdapterSpec::with_alpha(*r, *alpha), seed)
            }
            Strategy::BlockExpansion { p } => {
                expand_blocks(model, &ExpansionSpec::new(*p, model.depth())?)
            }
            Strategy::TopK(k) if *k > model.depth() => {
                bail!(Usage, "top-{k} exceeds model depth {}", model.depth())
            }
            _ => Ok(model.clone()),
        }
    }

    /// Surgery followed by the matching freeze mask.
    pub fn prepare<T: Scalar>(
        &self,
        model: &ViTModel<T>,
        seed: u64,
    ) -> Result<(ViTModel<T>, FreezeMask)> {
        let m = self.apply(model, seed)?;
        let mask = build_freeze_mask(&m, self.mask_strategy())?;
        Ok((m, mask))
    }
}
