use super::ViTModel;
use crate::error::{bail, Result};
use crate::peft::FreezeMask;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Splits a `[C, H, W]` image into `[num_patches, patch²·C]`.
///
/// Patches are ordered row-major over the patch grid. Within a patch the
/// values are laid out channel-major, then row, then column.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        bail!(Shape, "patchify expects [C, H, W], got {s:?}");
    }
    let data = patchify_into(image.data(), s[0], s[1], s[2], patch_size)?;
    let (gh, gw) = (s[1] / patch_size, s[2] / patch_size);
    Tensor::from_vec(&[gh * gw, patch_size * patch_size * s[0]], data)
}

fn patchify_into<T: Copy>(img: &[T], c: usize, h: usize, w: usize, p: usize) -> Result<Vec<T>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        bail!(Shape, "image {h}x{w} not divisible into {p}-pixel patches");
    }
    let mut out = Vec::with_capacity(img.len());
    for gy in 0..h / p {
        for gx in 0..w / p {
            for ch in 0..c {
                for r in 0..p {
                    let row = (ch * h + gy * p + r) * w + gx * p;
                    out.extend_from_slice(&img[row..row + p]);
                }
            }
        }
    }
    Ok(out)
}

/// `[B, C, H, W]` → `[B, num_patches, patch²·C]`.
pub fn patchify_batch<T: Scalar>(batch: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 4 {
        bail!(Shape, "expected [B, C, H, W], got {s:?}");
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let mut data = Vec::with_capacity(batch.len());
    for img in batch.data().chunks_exact(per) {
        data.extend(patchify_into(img, c, h, w, patch_size)?);
    }
    let n = (h / patch_size) * (w / patch_size);
    Tensor::from_vec(&[b, n, patch_size * patch_size * c], data)
}

#[derive(Clone, Copy, Debug)]
struct LinearVars {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy, Debug)]
struct NormVars {
    gamma: Var,
    beta: Var,
}

#[derive(Clone, Debug)]
struct BlockVars {
    ln1: NormVars,
    qkv: LinearVars,
    out: LinearVars,
    ln2: NormVars,
    up: LinearVars,
    down: LinearVars,
    lora: Option<[Var; 4]>,
}

/// Graph handles for every model parameter, in [`ViTModel::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    patch: LinearVars,
    cls: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    final_norm: NormVars,
    head: LinearVars,
    all: Vec<Var>,
}

/// Adds the model's parameters to `g`. Parameters marked trainable by
/// `mask` get `requires_grad`; without a mask none do.
pub fn bind<T: Scalar>(
    g: &mut Graph<T>,
    model: &ViTModel<T>,
    mask: Option<&FreezeMask>,
) -> Result<ModelVars> {
    if let Some(mask) = mask {
        mask.check_covers(model)?;
    }
    let all: Vec<Var> = model
        .params()
        .into_iter()
        .enumerate()
        .map(|(i, (_, t, _))| {
            let trainable = mask.is_some_and(|m| m.is_trainable(i));
            g.leaf(t.clone().with_requires_grad(trainable))
        })
        .collect();
    ModelVars::from_vars(model, all)
}

impl ModelVars {
    pub fn all(&self) -> &[Var] {
        &self.all
    }

    /// Structures existing graph nodes, one per parameter in
    /// [`ViTModel::params`] order, for use with the `*_graph` forwards.
    pub fn from_vars<T: Scalar>(model: &ViTModel<T>, all: Vec<Var>) -> Result<Self> {
        let expected = model.params().len();
        if all.len() != expected {
            bail!(
                Usage,
                "model has {expected} parameters, got {} vars",
                all.len()
            );
        }
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let patch = LinearVars {
            w: next(),
            b: next(),
        };
        let cls = next();
        let pos = next();
        let blocks = model
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1: NormVars {
                    gamma: next(),
                    beta: next(),
                },
                qkv: LinearVars {
                    w: next(),
                    b: next(),
                },
                out: LinearVars {
                    w: next(),
                    b: next(),
                },
                ln2: NormVars {
                    gamma: next(),
                    beta: next(),
                },
                up: LinearVars {
                    w: next(),
                    b: next(),
                },
                down: LinearVars {
                    w: next(),
                    b: next(),
                },
                lora: b.lora.as_ref().map(|_| [next(), next(), next(), next()]),
            })
            .collect();
        let final_norm = NormVars {
            gamma: next(),
            beta: next(),
        };
        let head = LinearVars {
            w: next(),
            b: next(),
        };
        Ok(ModelVars {
            patch,
            cls,
            pos,
            blocks,
            final_norm,
            head,
            all,
        })
    }
}

fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, l: LinearVars) -> Result<Var> {
    let y = g.matmul(x, l.w)?;
    g.add(y, l.b)
}

fn check_batch<T: Scalar>(model: &ViTModel<T>, batch: &Tensor<T>) -> Result<()> {
    let c = &model.config;
    let s = batch.shape();
    if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
        bail!(
            Shape,
            "batch {s:?} does not match [B, {}, {}, {}]",
            c.channels,
            c.image_size,
            c.image_size
        );
    }
    Ok(())
}

/// Backbone features: the class token after the final layer norm, `[B, dim]`.
pub fn forward_features_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &ViTModel<T>,
    vars: &ModelVars,
    batch: &Tensor<T>,
) -> Result<Var> {
    check_batch(model, batch)?;
    let c = &model.config;
    let b = batch.shape()[0];
    let d = c.dim;
    let n = c.num_patches();
    let t = n + 1;
    let heads = c.heads;
    let hd = c.head_dim();
    let attn_scale = 1.0 / (hd as f64).sqrt();

    let patches = g.constant(patchify_batch(batch, c.patch_size)?);
    let tokens = affine(g, patches, vars.patch)?;
    let cls = g.reshape(vars.cls, &[1, 1, d])?;
    let cls = g.broadcast_to(cls, &[b, 1, d])?;
    let x = g.concat(cls, tokens, 1)?;
    let mut x = g.add(x, vars.pos)?;

    let lora_scale = model.adapter.as_ref().map(|a| a.scale());
    for bv in &vars.blocks {
        let h = g.layer_norm(x, bv.ln1.gamma, bv.ln1.beta, c.eps)?;
        let qkv = affine(g, h, bv.qkv)?;
        let mut q = g.narrow_last(qkv, 0, d)?;
        let k = g.narrow_last(qkv, d, d)?;
        let mut v = g.narrow_last(qkv, 2 * d, d)?;
        if let Some([qa, qb, va, vb]) = bv.lora {
            let scale = lora_scale.ok_or_else(|| {
                crate::Error::Usage("block has adapters but model has no adapter spec".into())
            })?;
            for (target, a, bm) in [(&mut q, qa, qb), (&mut v, va, vb)] {
                let low = g.matmul(h, a)?;
                let delta = g.matmul(low, bm)?;
                let delta = g.scale(delta, scale)?;
                *target = g.add(*target, delta)?;
            }
        }
        let split = |g: &mut Graph<T>, z: Var| -> Result<Var> {
            let z = g.reshape(z, &[b, t, heads, hd])?;
            g.permute(z, &[0, 2, 1, 3])
        };
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.batched_matmul(q, k, true)?;
        let scores = g.scale(scores, attn_scale)?;
        let probs = g.softmax(scores, 3)?;
        let ctx = g.batched_matmul(probs, v, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        let attn = affine(g, ctx, bv.out)?;
        x = g.add(x, attn)?;

        let h = g.layer_norm(x, bv.ln2.gamma, bv.ln2.beta, c.eps)?;
        let u = affine(g, h, bv.up)?;
        let u = g.gelu(u)?;
        let m = affine(g, u, bv.down)?;
        x = g.add(x, m)?;
    }
    let x = g.layer_norm(x, vars.final_norm.gamma, vars.final_norm.beta, c.eps)?;
    g.select(x, 1, 0)
}

/// Class logits `[B, num_classes]`.
pub fn forward_logits_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &ViTModel<T>,
    vars: &ModelVars,
    batch: &Tensor<T>,
) -> Result<Var> {
    let f = forward_features_graph(g, model, vars, batch)?;
    affine(g, f, vars.head)
}

/// Inference-only class logits.
pub fn forward_logits<T: Scalar>(model: &ViTModel<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = bind(&mut g, model, None)?;
    let out = forward_logits_graph(&mut g, model, &vars, batch)?;
    Ok(g.value(out).clone())
}

/// Inference-only backbone features.
pub fn forward_features<T: Scalar>(model: &ViTModel<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = bind(&mut g, model, None)?;
    let out = forward_features_graph(&mut g, model, &vars, batch)?;
    Ok(g.value(out).clone())
}
