//! Vision Transformer parameters, construction and exact parameter accounting.
//!
//! Layout: patch embedding (a linear map over flattened patches), a class
//! token, learned positional embeddings, a stack of pre-norm transformer
//! blocks, a final layer norm and a linear classifier head. Linear weights
//! are stored `[in, out]` so activations multiply on the left.

mod forward;

pub use forward::{
    bind, forward_features, forward_features_graph, forward_logits, forward_logits_graph, patchify,
    patchify_batch, ModelVars,
};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::peft::{AdapterSpec, ExpansionSpec, FreezeMask};
use crate::rng::derive_seed;
use crate::tensor::{Init, Scalar, Tensor};

/// Standard deviation of every freshly initialized weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-6
}

impl ViTConfig {
    /// ViT-Base with 16-pixel patches at 224 pixels.
    pub fn vit_b16(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            num_classes,
            eps: 1e-6,
        }
    }

    /// CPU-sized model used by the experiment harness.
    pub fn tiny(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes,
            eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{name} must be at least 1");
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            bail!(
                Config,
                "image_size {} not divisible by patch_size {}",
                self.image_size,
                self.patch_size
            );
        }
        if !self.dim.is_multiple_of(self.heads) {
            bail!(
                Config,
                "dim {} not divisible by heads {}",
                self.dim,
                self.heads
            );
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            bail!(Config, "layer-norm eps must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Scalars in one transformer block (without adapters).
    pub fn block_param_count(&self) -> usize {
        block_param_count(self.dim, self.mlp_ratio)
    }

    pub fn head_param_count(&self) -> usize {
        self.dim * self.num_classes + self.num_classes
    }

    /// Closed-form total for an unmodified model with this config.
    pub fn param_count_formula(&self) -> usize {
        let d = self.dim;
        let embed = self.patch_dim() * d + d + d + (self.num_patches() + 1) * d;
        embed + self.depth * self.block_param_count() + 2 * d + self.head_param_count()
    }
}

/// `3d²+3d + d²+d + d·m+m + m·d+d + 4d` with `m = mlp_ratio·d`.
pub fn block_param_count(dim: usize, mlp_ratio: usize) -> usize {
    let d = dim;
    let m = mlp_ratio * d;
    (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d) + 4 * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrigin {
    Original,
    Expanded,
}

/// Where a parameter tensor came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamOrigin {
    Original,
    Expanded,
    Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Low-rank pair `A [d, r]`, `B [r, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

/// Adapters on the query and value projections of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters<T> {
    pub q: LoraPair<T>,
    pub v: LoraPair<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock<T> {
    pub ln1: LayerNormParams<T>,
    /// Fused projection `[d, 3d]`, column blocks ordered Q, K, V.
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp_up: Linear<T>,
    pub mlp_down: Linear<T>,
    pub origin: BlockOrigin,
    pub lora: Option<LoraAdapters<T>>,
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gamma",
    "ln2.beta",
    "mlp.up.weight",
    "mlp.up.bias",
    "mlp.down.weight",
    "mlp.down.bias",
];

const LORA_TENSORS: [&str; 4] = ["lora.q.a", "lora.q.b", "lora.v.a", "lora.v.b"];

impl<T: Scalar> TransformerBlock<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>, ParamOrigin)> {
        let o = match self.origin {
            BlockOrigin::Original => ParamOrigin::Original,
            BlockOrigin::Expanded => ParamOrigin::Expanded,
        };
        let mut out: Vec<_> = BLOCK_TENSORS
            .iter()
            .zip([
                &self.ln1.gamma,
                &self.ln1.beta,
                &self.qkv.weight,
                &self.qkv.bias,
                &self.attn_out.weight,
                &self.attn_out.bias,
                &self.ln2.gamma,
                &self.ln2.beta,
                &self.mlp_up.weight,
                &self.mlp_up.bias,
                &self.mlp_down.weight,
                &self.mlp_down.bias,
            ])
            .map(|(n, t)| (*n, t, o))
            .collect();
        if let Some(l) = &self.lora {
            out.extend(
                LORA_TENSORS
                    .iter()
                    .zip([&l.q.a, &l.q.b, &l.v.a, &l.v.b])
                    .map(|(n, t)| (*n, t, ParamOrigin::Adapter)),
            );
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.qkv.weight,
            &mut self.qkv.bias,
            &mut self.attn_out.weight,
            &mut self.attn_out.bias,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
            &mut self.mlp_up.weight,
            &mut self.mlp_up.bias,
            &mut self.mlp_down.weight,
            &mut self.mlp_down.bias,
        ];
        if let Some(l) = &mut self.lora {
            out.extend([&mut l.q.a, &mut l.q.b, &mut l.v.a, &mut l.v.b]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t, _)| t.len()).sum()
    }
}

/// Name, shape and provenance of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub origin: ParamOrigin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<T> {
    pub config: ViTConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub final_norm: LayerNormParams<T>,
    pub head: Linear<T>,
    /// Present while LoRA adapters are attached.
    pub adapter: Option<AdapterSpec>,
    /// Expansions applied so far, oldest first.
    pub expansions: Vec<ExpansionSpec>,
}

/// Total and trainable scalar counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Clone, Copy)]
enum Fill {
    Weight,
    Zero,
    One,
}

fn make<T: Scalar>(
    shape: &[usize],
    fill: Fill,
    seed: Option<u64>,
    name: &str,
) -> Result<Tensor<T>> {
    let init = match (fill, seed) {
        (Fill::Weight, Some(seed)) => Init::SeededNormal {
            seed: derive_seed(seed, name, 0),
            mean: 0.0,
            std: INIT_STD,
        },
        (Fill::One, _) => Init::Constant(1.0),
        _ => Init::Zeros,
    };
    Tensor::new(shape, init)
}

fn linear<T: Scalar>(inp: usize, out: usize, seed: Option<u64>, name: &str) -> Result<Linear<T>> {
    Ok(Linear {
        weight: make(&[inp, out], Fill::Weight, seed, &format!("{name}.weight"))?,
        bias: make(&[out], Fill::Zero, seed, &format!("{name}.bias"))?,
    })
}

fn layer_norm<T: Scalar>(d: usize) -> Result<LayerNormParams<T>> {
    Ok(LayerNormParams {
        gamma: make(&[d], Fill::One, None, "")?,
        beta: make(&[d], Fill::Zero, None, "")?,
    })
}

pub(crate) fn new_block<T: Scalar>(
    config: &ViTConfig,
    seed: Option<u64>,
    index: usize,
) -> Result<TransformerBlock<T>> {
    let d = config.dim;
    let m = config.mlp_hidden();
    let p = format!("blocks.{index}");
    Ok(TransformerBlock {
        ln1: layer_norm(d)?,
        qkv: linear(d, 3 * d, seed, &format!("{p}.attn.qkv"))?,
        attn_out: linear(d, d, seed, &format!("{p}.attn.out"))?,
        ln2: layer_norm(d)?,
        mlp_up: linear(d, m, seed, &format!("{p}.mlp.up"))?,
        mlp_down: linear(m, d, seed, &format!("{p}.mlp.down"))?,
        origin: BlockOrigin::Original,
        lora: None,
    })
}

/// Fresh classifier head `[dim, num_classes]`.
pub fn new_head<T: Scalar>(dim: usize, num_classes: usize, seed: u64) -> Result<Linear<T>> {
    linear(dim, num_classes, Some(seed), "head")
}

fn construct<T: Scalar>(config: &ViTConfig, seed: Option<u64>) -> Result<ViTModel<T>> {
    config.validate()?;
    let d = config.dim;
    let blocks = (0..config.depth)
        .map(|i| new_block(config, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViTModel {
        config: config.clone(),
        patch_embed: linear(config.patch_dim(), d, seed, "patch_embed")?,
        cls_token: make(&[d], Fill::Weight, seed, "cls_token")?,
        pos_embed: make(
            &[config.num_patches() + 1, d],
            Fill::Weight,
            seed,
            "pos_embed",
        )?,
        blocks,
        final_norm: layer_norm(d)?,
        head: linear(d, config.num_classes, seed, "head")?,
        adapter: None,
        expansions: Vec::new(),
    })
}

/// Builds a model with seeded `N(0, 0.02)` weights, zero biases and unit
/// layer-norm gains. Deterministic per `(config, seed)`.
pub fn build_vit<T: Scalar>(config: &ViTConfig, seed: u64) -> Result<ViTModel<T>> {
    construct(config, Some(seed))
}

impl<T: Scalar> ViTModel<T> {
    /// All-zero weights; structure only. Cheap even for large configs since
    /// zeroed allocations are lazily committed.
    pub fn zeroed(config: &ViTConfig) -> Result<Self> {
        construct(config, None)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Parameter tensors in canonical order with names and origins.
    pub fn params(&self) -> Vec<(String, &Tensor<T>, ParamOrigin)> {
        let o = ParamOrigin::Original;
        let mut out = vec![
            (
                "patch_embed.weight".to_string(),
                &self.patch_embed.weight,
                o,
            ),
            ("patch_embed.bias".to_string(), &self.patch_embed.bias, o),
            ("cls_token".to_string(), &self.cls_token, o),
            ("pos_embed".to_string(), &self.pos_embed, o),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.tensors()
                    .into_iter()
                    .map(|(n, t, o)| (format!("blocks.{i}.{n}"), t, o)),
            );
        }
        out.extend([
            ("final_norm.gamma".to_string(), &self.final_norm.gamma, o),
            ("final_norm.beta".to_string(), &self.final_norm.beta, o),
            ("head.weight".to_string(), &self.head.weight, o),
            ("head.bias".to_string(), &self.head.bias, o),
        ]);
        out
    }

    /// Mutable parameter tensors in the same order as [`ViTModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.final_norm.gamma,
            &mut self.final_norm.beta,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        self.params()
            .into_iter()
            .map(|(name, t, origin)| ParamInfo {
                name,
                shape: t.shape().to_vec(),
                origin,
            })
            .collect()
    }

    /// Exact scalar counts; `trainable` follows `mask` when given.
    pub fn param_count(&self, mask: Option<&FreezeMask>) -> Result<ParamCount> {
        let params = self.params();
        let total = params.iter().map(|(_, t, _)| t.len()).sum();
        let trainable = match mask {
            None => total,
            Some(mask) => {
                mask.check_covers(self)?;
                params
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask.is_trainable(*i))
                    .map(|(_, (_, t, _))| t.len())
                    .sum()
            }
        };
        Ok(ParamCount { total, trainable })
    }

    /// Replaces the classifier with a fresh one for `num_classes`.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            bail!(Config, "num_classes must be at least 1");
        }
        self.head = new_head(self.config.dim, num_classes, seed)?;
        self.config.num_classes = num_classes;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ViTModel<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let ln = |l: &LayerNormParams<T>| LayerNormParams {
            gamma: l.gamma.cast(),
            beta: l.beta.cast(),
        };
        let pair = |p: &LoraPair<T>| LoraPair {
            a: p.a.cast(),
            b: p.b.cast(),
        };
        ViTModel {
            config: self.config.clone(),
            patch_embed: lin(&self.patch_embed),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| TransformerBlock {
                    ln1: ln(&b.ln1),
                    qkv: lin(&b.qkv),
                    attn_out: lin(&b.attn_out),
                    ln2: ln(&b.ln2),
                    mlp_up: lin(&b.mlp_up),
                    mlp_down: lin(&b.mlp_down),
                    origin: b.origin,
                    lora: b.lora.as_ref().map(|l| LoraAdapters {
                        q: pair(&l.q),
                        v: pair(&l.v),
                    }),
                })
                .collect(),
            final_norm: ln(&self.final_norm),
            head: lin(&self.head),
            adapter: self.adapter.clone(),
            expansions: self.expansions.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_b16_counts() {
        let c = ViTConfig::vit_b16(100);
        assert_eq!(c.block_param_count(), 7_087_872);
        assert_eq!(c.head_param_count(), 76_900);
        assert_eq!(c.param_count_formula(), 85_875_556);
        let m = ViTModel::<f32>::zeroed(&c).unwrap();
        assert_eq!(m.param_count(None).unwrap().total, 85_875_556);
        assert_eq!(m.pos_embed.shape(), &[197, 768]);
    }

    #[test]
    fn config_errors() {
        let mut c = ViTConfig::tiny(3);
        c.dim = 10;
        c.heads = 4;
        assert!(matches!(
            build_vit::<f32>(&c, 0),
            Err(crate::Error::Config(_))
        ));
        let mut c = ViTConfig::tiny(3);
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::tiny(3);
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_statistics() {
        let m = build_vit::<f64>(&ViTConfig::tiny(3), 5).unwrap();
        let w = m.blocks[0].mlp_up.weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 2e-3, "{mean}");
        assert!((std - 0.02).abs() < 2e-3, "{std}");
        assert!(m.blocks[0].mlp_up.bias.data().iter().all(|&x| x == 0.0));
        assert!(m.blocks[0].ln1.gamma.data().iter().all(|&x| x == 1.0));
        // distinct tensors get distinct streams
        assert_ne!(
            m.blocks[0].qkv.weight.data()[..4],
            m.blocks[1].qkv.weight.data()[..4]
        );
    }

    #[test]
    fn build_is_deterministic() {
        let c = ViTConfig::tiny(3);
        let a = build_vit::<f32>(&c, 11).unwrap();
        let b = build_vit::<f32>(&c, 11).unwrap();
        assert_eq!(a, b);
        let names = a.param_names();
        assert_eq!(names.len(), 4 + 12 * c.depth + 4);
        assert_eq!(names[4], "blocks.0.ln1.gamma");
    }
}
