//! Synthetic domains, the training loop and the forgetting experiments.

mod data;
mod experiment;
mod idx;
mod train;

pub use data::{gen_domain, DataSplit, Dataset, Split, CHANNELS};
pub use experiment::{
    lr_sweep, pretrain_on_source, run_forgetting_experiment, split_features, DomainConfig,
    ExperimentConfig, ExperimentReport, Setup, SourceProbe, StrategyRow, SweepCell, SweepConfig,
    SweepReport,
};
pub use idx::{encode_idx, load_idx, parse_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use train::{evaluate, train, train_step, EvalPoint, Probe, TrainConfig, TrainHistory};
