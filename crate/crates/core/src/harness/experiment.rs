//! Source pre-training, the catastrophic-forgetting experiment and the
//! learning-rate sweep.

use serde::{Deserialize, Serialize};

use super::data::{gen_domain, DataSplit, Dataset, Split};
use super::train::{evaluate, train, EvalPoint, TrainConfig};
use crate::error::{bail, Result};
use crate::knn::{
    build_index, forgetting_report, top1_accuracy, AccuracyUnit, FeatureIndex, ForgettingRecord,
    DEFAULT_K,
};
use crate::peft::{build_freeze_mask, verify_identity, MaskStrategy, Strategy};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};
use crate::vit::{build_vit, forward_features, ViTConfig, ViTModel};

const FEATURE_CHUNK: usize = 200;
const IDENTITY_PROBES: usize = 16;

/// Parameters of a synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub n: usize,
}

impl DomainConfig {
    pub fn generate(&self, image_size: usize) -> Result<Dataset> {
        gen_domain(&self.name, self.seed, self.num_classes, self.n, image_size)
    }
}

/// Learning rates and expansion sizes for [`lr_sweep`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lrs: Vec<f64>,
    pub p_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lrs: vec![0.05, 0.01, 0.005],
            p_values: vec![1, 2],
        }
    }
}

/// Everything needed to reproduce an experiment end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Backbone shape; `num_classes` is taken from the source domain.
    pub model: ViTConfig,
    pub model_seed: u64,
    pub source: DomainConfig,
    pub transfer: DomainConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl ExperimentConfig {
    /// The desk-scale reference setup: tiny ViT, an 8-class source domain
    /// of 4,000 images and a 4-class transfer domain of 2,000.
    pub fn reference() -> Self {
        ExperimentConfig {
            model: ViTConfig::tiny(8),
            model_seed: 17,
            source: DomainConfig {
                name: "source".into(),
                seed: 101,
                num_classes: 8,
                n: 4000,
            },
            transfer: DomainConfig {
                name: "transfer".into(),
                seed: 202,
                num_classes: 4,
                n: 2000,
            },
            pretrain: TrainConfig {
                steps: 1000,
                ..TrainConfig::desk(0.005, 7)
            },
            finetune: TrainConfig::desk(0.05, 11),
            strategies: vec![
                Strategy::Full,
                Strategy::Linear,
                Strategy::BlockExpansion { p: 1 },
            ],
            k: DEFAULT_K,
            sweep: SweepConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.k == 0 {
            bail!(Config, "k must be at least 1");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ViTConfig {
        ViTConfig {
            num_classes: self.source.num_classes,
            ..self.model.clone()
        }
    }

    /// Generates both domains and pre-trains the base model on the source.
    pub fn setup(&self) -> Result<Setup> {
        self.validate()?;
        let source = self.source.generate(self.model.image_size)?;
        let transfer = self.transfer.generate(self.model.image_size)?;
        let base = pretrain_on_source(
            &self.model_config(),
            self.model_seed,
            &source,
            &self.pretrain,
        )?;
        Ok(Setup {
            base,
            source,
            transfer,
        })
    }
}

/// A pre-trained base model with its domains.
#[derive(Clone, Debug)]
pub struct Setup {
    pub base: ViTModel<f32>,
    pub source: Dataset,
    pub transfer: Dataset,
}

/// Supervised training of a fresh model on the source domain; returns the
/// best validation checkpoint.
pub fn pretrain_on_source(
    config: &ViTConfig,
    seed: u64,
    source: &Dataset,
    train_config: &TrainConfig,
) -> Result<ViTModel<f32>> {
    let mut model = build_vit::<f32>(config, seed)?;
    let mask = build_freeze_mask(&model, MaskStrategy::Full)?;
    let history = train(&mut model, &mask, source, train_config, None)?;
    Ok(history.best_snapshot.unwrap_or(model))
}

/// Backbone features for a whole split, `[n, dim]`.
pub fn split_features<T: Scalar>(model: &ViTModel<T>, split: &DataSplit) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(split.len() * model.config.dim);
    for start in (0..split.len()).step_by(FEATURE_CHUNK) {
        let count = FEATURE_CHUNK.min(split.len() - start);
        let (batch, _) = split.batch::<T>(start, count)?;
        data.extend_from_slice(forward_features(model, &batch)?.data());
    }
    Tensor::from_vec(&[split.len(), model.config.dim], data)
}

/// K-NN accuracy on the source validation split against an index of the
/// base model's source-train features.
#[derive(Clone, Debug)]
pub struct SourceProbe {
    index: FeatureIndex,
    queries: DataSplit,
    k: usize,
}

impl SourceProbe {
    pub fn new<T: Scalar>(base: &ViTModel<T>, source: &Dataset, k: usize) -> Result<Self> {
        let train_split = source.split(Split::Train)?;
        let index = build_index(&split_features(base, &train_split)?, &train_split.labels)?;
        Ok(SourceProbe {
            index,
            queries: source.split(Split::Val)?,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn accuracy<T: Scalar>(&self, model: &ViTModel<T>) -> Result<f64> {
        let feats = split_features(model, &self.queries)?;
        let pred = self.index.predict(&feats, self.k)?;
        top1_accuracy(&pred, &self.queries.labels)
    }
}

/// Outcome of fine-tuning with one strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub trainable_params: usize,
    /// Fractions; `source_acc_before` is the shared baseline.
    pub record: ForgettingRecord,
    pub best_step: Option<usize>,
    pub history: Vec<EvalPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub k: usize,
    /// Source K-NN accuracy of the untouched backbone.
    pub baseline: f64,
    pub finetune: TrainConfig,
    pub rows: Vec<StrategyRow>,
    /// Free-form configuration echo written alongside the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<serde_json::Value>,
}

fn run_strategy<T: Scalar>(
    base: &ViTModel<T>,
    strategy: &Strategy,
    transfer: &Dataset,
    probe: &SourceProbe,
    baseline: f64,
    config: &TrainConfig,
) -> Result<StrategyRow> {
    let tag = strategy.to_string();
    let (mut model, mask) = strategy.prepare(base, derive_seed(config.seed, &tag, 0))?;
    if !matches!(
        strategy,
        Strategy::Full | Strategy::Linear | Strategy::TopK(_)
    ) {
        let n = IDENTITY_PROBES.min(probe.queries.len());
        let (probes, _) = probe.queries.batch::<T>(0, n)?;
        let diff = verify_identity(base, &model, &probes)?;
        if diff != 0.0 {
            bail!(
                Numeric,
                "{tag} changed the model at insertion (max diff {diff:e})"
            );
        }
    }
    model.replace_head(transfer.num_classes, derive_seed(config.seed, "head", 0))?;
    let trainable_params = model.param_count(Some(&mask))?.trainable;
    let mut probe_fn = |m: &ViTModel<T>| probe.accuracy(m);
    let history = train(&mut model, &mask, transfer, config, Some(&mut probe_fn))?;
    let (transfer_acc, best) = match (&history.best_point(), &history.best_snapshot) {
        (Some(p), Some(snap)) => (p.val_acc, snap),
        _ => (evaluate(&model, &transfer.split(Split::Val)?)?, &model),
    };
    let after = probe.accuracy(best)?;
    Ok(StrategyRow {
        strategy: strategy.clone(),
        trainable_params,
        record: forgetting_report(baseline, after, transfer_acc, AccuracyUnit::Fraction)?,
        best_step: history.best_step(),
        history: history.points,
    })
}

/// Fine-tunes a copy of `base` on `transfer` with each strategy and measures
/// how much source-domain K-NN accuracy the backbone retains. Every strategy
/// gets the same fresh head and batch order; rows follow `strategies`.
pub fn run_forgetting_experiment<T: Scalar>(
    base: &ViTModel<T>,
    source: &Dataset,
    transfer: &Dataset,
    strategies: &[Strategy],
    config: &TrainConfig,
    k: usize,
) -> Result<ExperimentReport> {
    if strategies.is_empty() {
        bail!(Input, "no strategies given");
    }
    config.validate()?;
    let probe = SourceProbe::new(base, source, k)?;
    let baseline = probe.accuracy(base)?;
    let rows = strategies
        .iter()
        .map(|s| run_strategy(base, s, transfer, &probe, baseline, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        k,
        baseline,
        finetune: config.clone(),
        rows,
        context: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr: f64,
    pub p: usize,
    pub trainable_params: usize,
    pub record: ForgettingRecord,
    pub best_step: Option<usize>,
}

/// Block-expansion forgetting over a grid of learning rates and `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub k: usize,
    pub baseline: f64,
    pub finetune: TrainConfig,
    pub cells: Vec<SweepCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<serde_json::Value>,
}

impl SweepReport {
    pub fn cell(&self, lr: f64, p: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.lr == lr && c.p == p)
    }
}

/// Cells are ordered by `p`, then by learning rate as given.
pub fn lr_sweep<T: Scalar>(
    base: &ViTModel<T>,
    source: &Dataset,
    transfer: &Dataset,
    lrs: &[f64],
    p_values: &[usize],
    config: &TrainConfig,
    k: usize,
) -> Result<SweepReport> {
    if lrs.is_empty() || p_values.is_empty() {
        bail!(Input, "sweep needs at least one learning rate and one p");
    }
    config.validate()?;
    let probe = SourceProbe::new(base, source, k)?;
    let baseline = probe.accuracy(base)?;
    let mut cells = Vec::with_capacity(lrs.len() * p_values.len());
    for &p in p_values {
        let strategy = Strategy::BlockExpansion { p };
        for &lr in lrs {
            let cfg = TrainConfig {
                lr,
                ..config.clone()
            };
            let row = run_strategy(base, &strategy, transfer, &probe, baseline, &cfg)?;
            cells.push(SweepCell {
                lr,
                p,
                trainable_params: row.trainable_params,
                record: row.record,
                best_step: row.best_step,
            });
        }
    }
    Ok(SweepReport {
        k,
        baseline,
        finetune: config.clone(),
        cells,
        context: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup() -> (ViTModel<f32>, Dataset, Dataset) {
        let mut c = ViTConfig::tiny(3);
        c.image_size = 16;
        c.dim = 16;
        c.heads = 2;
        c.depth = 2;
        let source = gen_domain("s", 1, 3, 60, 16).unwrap();
        let transfer = gen_domain("t", 2, 2, 40, 16).unwrap();
        (build_vit(&c, 3).unwrap(), source, transfer)
    }

    #[test]
    fn zero_steps_means_no_forgetting() {
        let (base, source, transfer) = tiny_setup();
        let cfg = TrainConfig {
            steps: 0,
            eval_every: 1,
            ..TrainConfig::desk(0.05, 0)
        };
        let r = run_forgetting_experiment(
            &base,
            &source,
            &transfer,
            &[Strategy::Full, Strategy::Linear],
            &cfg,
            5,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert_eq!(row.record.source_acc_before, r.baseline);
            assert_eq!(row.record.source_acc_after, r.baseline);
            assert_eq!(row.record.drop, 0.0);
        }
    }

    #[test]
    fn incompatible_strategy_is_usage_error() {
        let (base, source, transfer) = tiny_setup();
        let cfg = TrainConfig {
            steps: 0,
            eval_every: 1,
            ..TrainConfig::desk(0.05, 0)
        };
        let err = run_forgetting_experiment(
            &base,
            &source,
            &transfer,
            &[Strategy::BlockExpansion { p: 3 }],
            &cfg,
            5,
        )
        .unwrap_err();
        assert!(err.is_usage());
        let err =
            run_forgetting_experiment(&base, &source, &transfer, &[Strategy::TopK(3)], &cfg, 5)
                .unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn sweep_schema() {
        let (base, source, transfer) = tiny_setup();
        let cfg = TrainConfig {
            steps: 2,
            eval_every: 1,
            batch_size: 8,
            ..TrainConfig::desk(0.05, 0)
        };
        let s = lr_sweep(
            &base,
            &source,
            &transfer,
            &[0.05, 0.01, 0.005],
            &[1, 2],
            &cfg,
            5,
        )
        .unwrap();
        assert_eq!(s.cells.len(), 6);
        assert!(s
            .cells
            .iter()
            .all(|c| c.record.source_acc_before == s.baseline));
        assert!(s.cell(0.01, 2).is_some());
        assert!(lr_sweep(&base, &source, &transfer, &[], &[1], &cfg, 5).is_err());
    }
}
