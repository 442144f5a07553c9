//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitpeft::harness::{gen_domain, train, Dataset, TrainConfig};
use vitpeft::peft::Strategy;
use vitpeft::tensor::{grad_check, Graph, Scalar, Tensor, Var};
use vitpeft::vit::{forward_logits_graph, ModelVars, ViTConfig, ViTModel};

/// Step for the model-level finite differences.
pub const MODEL_EPS: f64 = 5e-5;

/// depth 2, dim 16, heads 2.
pub fn grad_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 4,
        num_classes: 3,
        eps: 1e-6,
    }
}

/// Redraws every parameter: weights and biases uniform in ±0.2, layer-norm
/// gains in 1 ± 0.2. At the 0.02-std init attention is nearly uniform and
/// many gradients sit around 1e-8, where a relative error mostly measures
/// rounding; this keeps the check about the backward pass.
pub fn condition<T: Scalar>(model: &mut ViTModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = model.param_names();
    for (t, name) in model.params_mut().into_iter().zip(&names) {
        let gain = name.ends_with("gamma");
        for v in t.data_mut() {
            let r = rng.random_range(-0.2..0.2);
            *v = T::of(if gain { 1.0 + r } else { r });
        }
    }
}

/// Worst relative error of the mean cross-entropy gradient over every
/// parameter coordinate except the key slice of each `qkv.bias`: softmax
/// ignores a per-row shift, so that gradient is identically zero and its
/// central difference is pure rounding noise.
pub fn vit_grad_error(model: &ViTModel<f64>) -> f64 {
    let c = &model.config;
    let d = c.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let len = 2 * c.channels * c.image_size * c.image_size;
    let batch = Tensor::from_vec(
        &[2, c.channels, c.image_size, c.image_size],
        (0..len).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap();

    // checked tensors: every parameter, with each qkv.bias split into its
    // query and value parts
    let named = model.params();
    let mut params = Vec::new();
    let mut key_bias = Vec::new();
    for (name, t, _) in &named {
        if name.ends_with("qkv.bias") {
            let b = t.data();
            params.push(Tensor::from_vec(&[d], b[..d].to_vec()).unwrap());
            params.push(Tensor::from_vec(&[d], b[2 * d..].to_vec()).unwrap());
            key_bias.push(Tensor::from_vec(&[d], b[d..2 * d].to_vec()).unwrap());
        } else {
            params.push((*t).clone());
        }
    }
    let names: Vec<String> = named.iter().map(|(n, _, _)| n.clone()).collect();

    grad_check(&params, MODEL_EPS, |g, vars| {
        let mut all: Vec<Var> = Vec::with_capacity(names.len());
        let mut it = vars.iter().copied();
        let mut keys = key_bias.iter();
        for name in &names {
            let v = it.next().unwrap();
            if name.ends_with("qkv.bias") {
                let k = g.constant(keys.next().unwrap().clone());
                let qk = g.concat(v, k, 0)?;
                let vb = it.next().unwrap();
                all.push(g.concat(qk, vb, 0)?);
            } else {
                all.push(v);
            }
        }
        let mv = ModelVars::from_vars(model, all)?;
        let logits = forward_logits_graph(g, model, &mv, &batch)?;
        g.cross_entropy(logits, &[0, 2])
    })
    .unwrap()
}

/// Binds a model and returns the gradient norm of every parameter slot
/// (`None` where backward left no gradient).
pub fn bound_grads(model: &ViTModel<f64>, mask: &vitpeft::peft::FreezeMask) -> Vec<Option<f64>> {
    let c = &model.config;
    let mut g = Graph::new();
    let vars = vitpeft::vit::bind(&mut g, model, Some(mask)).unwrap();
    let batch = Tensor::<f64>::new(
        &[2, c.channels, c.image_size, c.image_size],
        vitpeft::tensor::Init::SeededNormal {
            seed: 1,
            mean: 0.5,
            std: 0.3,
        },
    )
    .unwrap();
    let logits = forward_logits_graph(&mut g, model, &vars, &batch).unwrap();
    let loss = g.cross_entropy(logits, &[1, 0]).unwrap();
    g.backward(loss).unwrap();
    vars.all()
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|gr| gr.iter().map(|x| x * x).sum::<f64>().sqrt())
        })
        .collect()
}

/// Brute-force K-NN: full sort by (similarity desc, index asc), then a
/// similarity-weighted vote over labels seen among the k nearest.
pub fn knn_oracle(feats: &[Vec<f64>], labels: &[usize], query: &[f64], k: usize) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut sims: Vec<(f64, usize)> = Vec::new();
    for (i, f) in feats.iter().enumerate() {
        let fnorm = norm(f);
        let mut dot = 0.0;
        for j in 0..f.len() {
            dot += (f[j] / fnorm) * (query[j] / qn);
        }
        sims.push((dot, i));
    }
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut best: Option<(f64, usize)> = None;
    let mut candidates: Vec<usize> = sims[..k].iter().map(|&(_, i)| labels[i]).collect();
    candidates.sort_unstable();
    candidates.dedup();
    for label in candidates {
        let mut total = 0.0;
        for &(s, i) in &sims[..k] {
            if labels[i] == label {
                total += s;
            }
        }
        if best.is_none_or(|(b, _)| total > b) {
            best = Some((total, label));
        }
    }
    best.unwrap().1
}

/// A small synthetic domain at the given image size.
pub fn small_domain(name: &str, seed: u64, classes: usize, n: usize, image_size: usize) -> Dataset {
    gen_domain(name, seed, classes, n, image_size).unwrap()
}

/// What training under a strategy did to the parameters.
pub struct FreezeOutcome {
    /// Frozen tensors whose bits changed.
    pub frozen_changed: Vec<String>,
    /// Trainable tensors whose bits changed.
    pub trained: usize,
    pub trainable: usize,
}

/// Applies `strategy` to `base`, swaps in a head for `data`, trains for
/// `steps` and compares every tensor against its pre-training bits.
pub fn freeze_outcome(
    base: &ViTModel<f32>,
    strategy: &Strategy,
    data: &Dataset,
    steps: usize,
    batch: usize,
) -> FreezeOutcome {
    let (mut model, mask) = strategy.prepare(base, 3).unwrap();
    model.replace_head(data.num_classes, 4).unwrap();
    let before = model.clone();
    let config = TrainConfig {
        lr: 0.05,
        momentum: 0.9,
        steps,
        eval_every: steps,
        batch_size: batch,
        seed: 9,
    };
    train(&mut model, &mask, data, &config, None).unwrap();
    let mut out = FreezeOutcome {
        frozen_changed: Vec::new(),
        trained: 0,
        trainable: 0,
    };
    for (i, ((name, a, _), (_, b, _))) in before.params().iter().zip(model.params()).enumerate() {
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if mask.is_trainable(i) {
            out.trainable += 1;
            out.trained += usize::from(!same);
        } else if !same {
            out.frozen_changed.push(name.clone());
        }
    }
    out
}
