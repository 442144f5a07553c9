//! The graph-based forward pass against a straight-line, loop-based
//! reimplementation in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitpeft::peft::{attach_lora, expand_blocks, AdapterSpec, ExpansionSpec};
use vitpeft::tensor::{Scalar, Tensor};
use vitpeft::vit::{
    build_vit, forward_features, forward_logits, LayerNormParams, Linear, ViTConfig, ViTModel,
};

fn f64s<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}

/// `x [n, in] · W [in, out] + b`.
fn linear<T: Scalar>(x: &[Vec<f64>], l: &Linear<T>) -> Vec<Vec<f64>> {
    let w = f64s(&l.weight);
    let b = f64s(&l.bias);
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    b[j] + row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i * out + j])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn matmul(x: &[Vec<f64>], w: &[f64], out: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    row.iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i * out + j])
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn layer_norm<T: Scalar>(x: &[Vec<f64>], p: &LayerNormParams<T>, eps: f64) -> Vec<Vec<f64>> {
    let g = f64s(&p.gamma);
    let b = f64s(&p.beta);
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Returns (features, logits) for one `[C, H, W]` image.
fn oracle<T: Scalar>(m: &ViTModel<T>, img: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = &m.config;
    let (p, s, ch, d) = (c.patch_size, c.image_size, c.channels, c.dim);
    let grid = s / p;
    let mut patches = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut v = Vec::new();
            for k in 0..ch {
                for r in 0..p {
                    for col in 0..p {
                        v.push(img[(k * s + gy * p + r) * s + gx * p + col]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let emb = linear(&patches, &m.patch_embed);
    let pos = f64s(&m.pos_embed);
    let mut x: Vec<Vec<f64>> = std::iter::once(f64s(&m.cls_token)).chain(emb).collect();
    for (t, row) in x.iter_mut().enumerate() {
        for j in 0..d {
            row[j] += pos[t * d + j];
        }
    }
    let heads = c.heads;
    let hd = d / heads;
    let tokens = x.len();
    for blk in &m.blocks {
        let h = layer_norm(&x, &blk.ln1, c.eps);
        let qkv = linear(&h, &blk.qkv);
        let mut q: Vec<Vec<f64>> = qkv.iter().map(|r| r[..d].to_vec()).collect();
        let k: Vec<Vec<f64>> = qkv.iter().map(|r| r[d..2 * d].to_vec()).collect();
        let mut v: Vec<Vec<f64>> = qkv.iter().map(|r| r[2 * d..].to_vec()).collect();
        if let (Some(l), Some(spec)) = (&blk.lora, &m.adapter) {
            let r = spec.r;
            for (target, pair) in [(&mut q, &l.q), (&mut v, &l.v)] {
                let low = matmul(&h, &f64s(&pair.a), r);
                let delta = matmul(&low, &f64s(&pair.b), d);
                for (row, dr) in target.iter_mut().zip(delta) {
                    for j in 0..d {
                        row[j] += spec.scale() * dr[j];
                    }
                }
            }
        }
        let mut ctx = vec![vec![0.0; d]; tokens];
        for head in 0..heads {
            let o = head * hd;
            for i in 0..tokens {
                let scores: Vec<f64> = (0..tokens)
                    .map(|j| {
                        (0..hd).map(|e| q[i][o + e] * k[j][o + e]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..tokens {
                    for e in 0..hd {
                        ctx[i][o + e] += exps[j] / z * v[j][o + e];
                    }
                }
            }
        }
        let attn = linear(&ctx, &blk.attn_out);
        for (row, a) in x.iter_mut().zip(attn) {
            row.iter_mut().zip(a).for_each(|(x, a)| *x += a);
        }
        let h = layer_norm(&x, &blk.ln2, c.eps);
        let up: Vec<Vec<f64>> = linear(&h, &blk.mlp_up)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let down = linear(&up, &blk.mlp_down);
        for (row, a) in x.iter_mut().zip(down) {
            row.iter_mut().zip(a).for_each(|(x, a)| *x += a);
        }
    }
    let feat = layer_norm(&x[..1], &m.final_norm, c.eps).remove(0);
    let logits = linear(std::slice::from_ref(&feat), &m.head).remove(0);
    (feat, logits)
}

fn config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        channels: 3,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 4,
        num_classes: 5,
        eps: 1e-6,
    }
}

fn images(n: usize, c: &ViTConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * c.channels * c.image_size * c.image_size)
        .map(|_| rng.random::<f64>())
        .collect()
}

/// Randomizes every parameter so zero-initialized pieces are exercised too.
fn scramble<T: Scalar>(m: &mut ViTModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params_mut() {
        for v in t.data_mut() {
            *v = T::of(rng.random_range(-0.3..0.3));
        }
    }
}

fn compare<T: Scalar>(m: &ViTModel<T>, tol: f64) {
    let c = &m.config;
    let n = 3;
    let raw = images(n, c, 99);
    let batch =
        Tensor::<T>::from_f64_slice(&[n, c.channels, c.image_size, c.image_size], &raw).unwrap();
    let logits = forward_logits(m, &batch).unwrap().to_f64_vec();
    let feats = forward_features(m, &batch).unwrap().to_f64_vec();
    let per = raw.len() / n;
    // the oracle sees exactly the values the model saw
    let seen = batch.to_f64_vec();
    for i in 0..n {
        let (f, l) = oracle(m, &seen[i * per..(i + 1) * per]);
        for (a, b) in l
            .iter()
            .zip(&logits[i * c.num_classes..(i + 1) * c.num_classes])
        {
            assert!((a - b).abs() <= tol, "logit {a} vs {b}");
        }
        for (a, b) in f.iter().zip(&feats[i * c.dim..(i + 1) * c.dim]) {
            assert!((a - b).abs() <= tol, "feature {a} vs {b}");
        }
    }
}

#[test]
fn plain_model_matches_oracle_f64() {
    let mut m = build_vit::<f64>(&config(), 1).unwrap();
    compare(&m, 1e-10);
    scramble(&mut m, 2);
    compare(&m, 1e-10);
}

#[test]
fn plain_model_matches_oracle_f32() {
    let mut m = build_vit::<f32>(&config(), 1).unwrap();
    compare(&m, 1e-5);
    scramble(&mut m, 3);
    compare(&m, 1e-5);
}

#[test]
fn expanded_and_lora_models_match_oracle() {
    let base = build_vit::<f64>(&config(), 4).unwrap();
    let mut e = expand_blocks(&base, &ExpansionSpec::new(2, 2).unwrap()).unwrap();
    scramble(&mut e, 5);
    compare(&e, 1e-10);
    let mut l = attach_lora(&base, &AdapterSpec::with_alpha(3, 6.0), 6).unwrap();
    scramble(&mut l, 7);
    compare(&l, 1e-10);
    compare(&l.cast::<f32>(), 1e-5);
}
