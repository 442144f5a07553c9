//! Minibatch SGD fine-tuning with periodic validation and best-checkpoint
//! selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{DataSplit, Dataset, Split};
use crate::error::{bail, Result};
use crate::peft::FreezeMask;
use crate::rng::rng_for;
use crate::tensor::{Graph, Scalar, Sgd, Tensor};
use crate::vit::{bind, forward_logits, forward_logits_graph, ViTModel};

/// Rows per inference chunk during evaluation.
const EVAL_CHUNK: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub steps: usize,
    pub eval_every: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    32
}

impl TrainConfig {
    /// 2,000 steps, evaluation every 100, batch 32, momentum 0.9.
    pub fn desk(lr: f64, seed: u64) -> Self {
        TrainConfig {
            lr,
            momentum: default_momentum(),
            steps: 2000,
            eval_every: 100,
            batch_size: default_batch_size(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must be in [0, 1), got {}", self.momentum);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if self.eval_every == 0 || !self.steps.is_multiple_of(self.eval_every) {
            bail!(
                Config,
                "eval_every ({}) must be positive and divide steps ({})",
                self.eval_every,
                self.steps
            );
        }
        Ok(())
    }
}

/// One validation checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub val_acc: f64,
    /// Mean training loss over the steps since the previous eval point.
    pub loss: f64,
    /// Source-domain probe accuracy, when a probe was supplied.
    pub source_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainHistory<T> {
    pub points: Vec<EvalPoint>,
    /// Training loss at every step.
    pub losses: Vec<f64>,
    /// Index into `points` of the earliest best validation accuracy.
    pub best: Option<usize>,
    pub best_snapshot: Option<ViTModel<T>>,
}

impl<T> TrainHistory<T> {
    pub fn best_point(&self) -> Option<&EvalPoint> {
        self.best.map(|i| &self.points[i])
    }

    pub fn best_step(&self) -> Option<usize> {
        self.best_point().map(|p| p.step)
    }
}

/// Top-1 accuracy of the head's argmax (ties to the smaller class id).
pub fn evaluate<T: Scalar>(model: &ViTModel<T>, split: &DataSplit) -> Result<f64> {
    if split.is_empty() {
        bail!(Input, "cannot evaluate on an empty split");
    }
    let mut hits = 0;
    for start in (0..split.len()).step_by(EVAL_CHUNK) {
        let count = EVAL_CHUNK.min(split.len() - start);
        let (batch, labels) = split.batch::<T>(start, count)?;
        let logits = forward_logits(model, &batch)?;
        hits += predictions(&logits)
            .iter()
            .zip(labels)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(hits as f64 / split.len() as f64)
}

fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect()
}

/// Seeded epoch shuffling with sequential minibatches; a trailing partial
/// batch is dropped.
struct Batcher {
    rng: crate::rng::Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Batcher {
            rng: rng_for(seed),
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        out
    }
}

/// One SGD step on `images`/`labels`; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut ViTModel<T>,
    mask: &FreezeMask,
    sgd: &mut Sgd<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = bind(&mut g, model, Some(mask))?;
    let logits = forward_logits_graph(&mut g, model, &vars, images)?;
    let loss = g.cross_entropy(logits, labels)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        bail!(Numeric, "training loss became non-finite ({value})");
    }
    g.backward(loss)?;
    let mut params = model.params_mut();
    for (i, (p, &v)) in params.iter_mut().zip(vars.all()).enumerate() {
        p.grad = if mask.is_trainable(i) {
            g.take_grad(v)
        } else {
            None
        };
    }
    sgd.step(&mut params, mask)?;
    for p in params {
        p.grad = None;
    }
    Ok(value)
}

/// Optional callback evaluated on the model at every eval point.
pub type Probe<'a, T> = &'a mut dyn FnMut(&ViTModel<T>) -> Result<f64>;

/// Trains `model` in place on the train split, validating every
/// `eval_every` steps. The model is left at its final state; the best
/// validation checkpoint is returned in the history.
pub fn train<T: Scalar>(
    model: &mut ViTModel<T>,
    mask: &FreezeMask,
    data: &Dataset,
    config: &TrainConfig,
    mut probe: Option<Probe<'_, T>>,
) -> Result<TrainHistory<T>> {
    config.validate()?;
    mask.check_covers(model)?;
    if model.config.num_classes != data.num_classes {
        bail!(
            Usage,
            "model has {} classes, dataset {} has {}",
            model.config.num_classes,
            data.name,
            data.num_classes
        );
    }
    let mut history = TrainHistory {
        points: Vec::new(),
        losses: Vec::with_capacity(config.steps),
        best: None,
        best_snapshot: None,
    };
    if config.steps == 0 {
        return Ok(history);
    }
    let train_split = data.split(Split::Train)?;
    let val_split = data.split(Split::Val)?;
    let mut sgd = Sgd::new(config.lr, config.momentum)?;
    let mut batcher = Batcher::new(train_split.len(), config.batch_size, config.seed);
    let mut window = 0.0;
    for step in 1..=config.steps {
        let rows = batcher.next();
        let images: Tensor<T> = train_split.images.gather_rows(rows)?.cast();
        let labels: Vec<usize> = rows.iter().map(|&r| train_split.labels[r]).collect();
        let loss = train_step(model, mask, &mut sgd, &images, &labels)?;
        history.losses.push(loss);
        window += loss;
        if step % config.eval_every == 0 {
            let val_acc = evaluate(model, &val_split)?;
            let source_acc = match probe.as_mut() {
                Some(p) => Some(p(model)?),
                None => None,
            };
            history.points.push(EvalPoint {
                step,
                val_acc,
                loss: window / config.eval_every as f64,
                source_acc,
            });
            window = 0.0;
            let improved = history.best_point().is_none_or(|b| val_acc > b.val_acc);
            if improved {
                history.best = Some(history.points.len() - 1);
                history.best_snapshot = Some(model.clone());
            }
        }
    }
    Ok(history)
}
