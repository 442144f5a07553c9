use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use vitpeft::harness::{
    evaluate, gen_domain, load_idx, lr_sweep, run_forgetting_experiment, train, Dataset,
    ExperimentConfig, SourceProbe, Split, TrainConfig, CHANNELS,
};
use vitpeft::io::{emit_report, emit_sweep, load_checkpoint, save_checkpoint};
use vitpeft::peft::{
    attach_lora, build_freeze_mask, expand_blocks, merge_lora, verify_identity, AdapterSpec,
    ExpansionSpec, MaskStrategy, Strategy,
};
use vitpeft::tensor::{Init, Tensor};
use vitpeft::vit::{build_vit, ViTConfig, ViTModel};
use vitpeft::Error;

/// Block expansion and LoRA fine-tuning for Vision Transformers.
#[derive(Parser, Debug)]
#[command(name = "vitpeft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create a freshly initialized checkpoint.
    Init {
        /// Model config: JSON file, or a preset (`tiny`, `vit-b16`)
        #[arg(long)]
        config: String,
        /// Overrides the class count of the config
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print total and trainable parameter counts.
    CountParams {
        #[arg(long)]
        config: String,
        #[arg(long)]
        num_classes: Option<usize>,
        /// full, linear, top-<k>, lora-r<r>[-a<alpha>], blockexp-p<p>
        #[arg(long)]
        strategy: Strategy,
    },
    /// Insert identity blocks: p groups, one copy on top of each.
    Expand {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach zero-initialized LoRA adapters to Q and V.
    LoraAttach {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        r: usize,
        /// Defaults to r
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold LoRA adapters into the base weights.
    LoraMerge {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the max absolute logit difference of two checkpoints.
    VerifyIdentity {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 16)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune a checkpoint with its stored freeze mask.
    Train {
        #[arg(long)]
        ckpt: PathBuf,
        /// Synthetic domain name, or an IDX image file (needs --labels)
        #[arg(long)]
        data: String,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Synthetic domain size
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        eval_every: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Receives the best validation checkpoint
        #[arg(long)]
        out: PathBuf,
    },
    /// K-NN accuracy of the checkpoint's backbone on a domain.
    EvalKnn {
        #[arg(long)]
        ckpt: PathBuf,
        /// `name[:seed[:classes[:n]]]`
        #[arg(long)]
        source: String,
        #[arg(long, default_value_t = vitpeft::knn::DEFAULT_K)]
        k: usize,
    },
    /// Run the forgetting experiment and write a CSV report with a JSON sidecar.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Run the learning-rate sweep over block expansion sizes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Print the reference experiment config as JSON.
    ReferenceConfig,
}

fn usage(msg: String) -> anyhow::Error {
    Error::Usage(msg).into()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn model_config(spec: &str, num_classes: Option<usize>) -> Result<ViTConfig> {
    let mut config = match spec {
        "tiny" => ViTConfig::tiny(8),
        "vit-b16" => ViTConfig::vit_b16(100),
        path => read_json(Path::new(path))?,
    };
    if let Some(n) = num_classes {
        config.num_classes = n;
    }
    config.validate()?;
    Ok(config)
}

fn save(model: &ViTModel<f32>, strategy: MaskStrategy, out: &Path) -> Result<()> {
    let mask = build_freeze_mask(model, strategy)?;
    save_checkpoint(model, &mask, out)?;
    let count = model.param_count(Some(&mask))?;
    println!(
        "wrote {} (total {}, trainable {})",
        out.display(),
        count.total,
        count.trainable
    );
    Ok(())
}

fn domain(spec: &str, image_size: usize) -> Result<Dataset> {
    let mut parts = spec.split(':');
    let name = parts.next().unwrap_or_default();
    let mut num = |default: usize| -> Result<usize> {
        parts
            .next()
            .map_or(Ok(default), |v| v.parse())
            .map_err(|_| usage(format!("bad domain spec '{spec}'")))
    };
    let (seed, classes, n) = (num(0)?, num(8)?, num(2000)?);
    Ok(gen_domain(name, seed as u64, classes, n, image_size)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init {
            config,
            num_classes,
            seed,
            out,
        } => {
            let config = model_config(&config, num_classes)?;
            save(&build_vit(&config, seed)?, MaskStrategy::Full, &out)?;
        }
        Command::CountParams {
            config,
            num_classes,
            strategy,
        } => {
            let config = model_config(&config, num_classes)?;
            let (model, mask) = strategy.prepare(&ViTModel::<f32>::zeroed(&config)?, 0)?;
            let count = model.param_count(Some(&mask))?;
            println!("strategy {strategy}");
            println!("total {}", count.total);
            println!("trainable {}", count.trainable);
        }
        Command::Expand { input, p, out } => {
            let (model, _) = load_checkpoint(&input)?;
            let expanded = expand_blocks(&model, &ExpansionSpec::new(p, model.depth())?)?;
            save(&expanded, MaskStrategy::ExpandedOnly, &out)?;
        }
        Command::LoraAttach {
            input,
            r,
            alpha,
            seed,
            out,
        } => {
            let (model, _) = load_checkpoint(&input)?;
            let spec = AdapterSpec::with_alpha(r, alpha.unwrap_or(r as f64));
            save(
                &attach_lora(&model, &spec, seed)?,
                MaskStrategy::LoraOnly,
                &out,
            )?;
        }
        Command::LoraMerge { input, out } => {
            let (model, _) = load_checkpoint(&input)?;
            save(&merge_lora(&model)?, MaskStrategy::Full, &out)?;
        }
        Command::VerifyIdentity { a, b, probes, seed } => {
            let (a, _) = load_checkpoint(&a)?;
            let (b, _) = load_checkpoint(&b)?;
            if probes == 0 {
                return Err(usage("--probes must be at least 1".into()));
            }
            let c = &a.config;
            let x = Tensor::<f32>::new(
                &[probes, c.channels, c.image_size, c.image_size],
                Init::SeededNormal {
                    seed,
                    mean: 0.5,
                    std: 0.25,
                },
            )?;
            println!("{}", verify_identity(&a, &b, &x)?);
        }
        Command::Train {
            ckpt,
            data,
            labels,
            n,
            lr,
            momentum,
            steps,
            eval_every,
            batch_size,
            seed,
            out,
        } => {
            let (mut model, mask) = load_checkpoint(&ckpt)?;
            let c = &model.config;
            let dataset = if Path::new(&data).is_file() {
                let labels = labels.ok_or_else(|| usage("IDX images need --labels".into()))?;
                load_idx(Path::new(&data), &labels, c.channels, seed)?
            } else {
                if c.channels != CHANNELS {
                    return Err(usage(format!("synthetic domains have {CHANNELS} channels")));
                }
                gen_domain(&data, seed, c.num_classes, n, c.image_size)?
            };
            let config = TrainConfig {
                lr,
                momentum,
                steps,
                eval_every,
                batch_size,
                seed,
            };
            let history = train(&mut model, &mask, &dataset, &config, None)?;
            for p in &history.points {
                println!(
                    "step {} loss {:.6} val_acc {:.4}",
                    p.step, p.loss, p.val_acc
                );
            }
            let best = history.best_snapshot.as_ref().unwrap_or(&model);
            if let Some(step) = history.best_step() {
                println!("best step {step}");
            }
            save_checkpoint(best, &mask, &out)?;
            println!("wrote {}", out.display());
        }
        Command::EvalKnn { ckpt, source, k } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let data = domain(&source, model.config.image_size)?;
            let probe = SourceProbe::new(&model, &data, k)?;
            println!("k {k}");
            println!("knn_acc {:.4}", probe.accuracy(&model)?);
            if model.config.num_classes == data.num_classes {
                println!(
                    "head_acc {:.4}",
                    evaluate(&model, &data.split(Split::Val)?)?
                );
            }
        }
        Command::Experiment { config, out } => {
            let config: ExperimentConfig = read_json(&config)?;
            let setup = config.setup()?;
            let mut report = run_forgetting_experiment(
                &setup.base,
                &setup.source,
                &setup.transfer,
                &config.strategies,
                &config.finetune,
                config.k,
            )?;
            report.context = Some(serde_json::to_value(&config)?);
            emit_report(&report, &out)?;
            println!("baseline {:.4} (k = {})", report.baseline, report.k);
            println!("wrote {}", out.display());
        }
        Command::Sweep { config, out } => {
            let config: ExperimentConfig = read_json(&config)?;
            let setup = config.setup()?;
            let mut report = lr_sweep(
                &setup.base,
                &setup.source,
                &setup.transfer,
                &config.sweep.lrs,
                &config.sweep.p_values,
                &config.finetune,
                config.k,
            )?;
            report.context = Some(serde_json::to_value(&config)?);
            emit_sweep(&report, &out)?;
            println!("baseline {:.4} (k = {})", report.baseline, report.k);
            println!("wrote {}", out.display());
        }
        Command::ReferenceConfig => {
            println!(
                "{}",
                serde_json::to_string_pretty(&ExperimentConfig::reference())?
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_usage() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
