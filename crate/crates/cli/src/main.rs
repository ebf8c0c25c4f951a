use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use popgraph::cohort::{read_schema, FoldScheme, Preset};
use popgraph::experiment::DEFAULT_RATIOS;
use popgraph::masking::{MaskSpec, MaskStrategy};
use popgraph::model::Variant;
use popgraph::pipeline::GraphOptions;
use popgraph::{Error, Result};

mod commands;
mod config;

use config::{Command, DataSource, ModelOverrides, RunConfig};

#[derive(Parser)]
#[command(name = "popgraph", version, about = "Masked pre-training and fine-tuning of graph transformers on patient population graphs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic cohort (schema.json + records.jsonl).
    Generate(GenerateArgs),
    /// Masked-imputation pre-training on every fold.
    Pretrain(RunArgs),
    /// Supervised training from scratch at each label ratio.
    Train(RunArgs),
    /// Supervised training from a pre-trained encoder (--checkpoint).
    Finetune(RunArgs),
    /// Re-score the checkpoints of an earlier run directory (--checkpoint).
    Evaluate(RunArgs),
    /// Scratch against fine-tuned runs over label ratios and seeds.
    Sweep(RunArgs),
    /// Repeat a run from its run_config.json.
    Rerun {
        config: PathBuf,
        /// Write into this directory instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "static")]
    preset: Preset,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Cohort schema file; pairs with --records.
    #[arg(long, requires = "records")]
    schema: Option<PathBuf>,
    #[arg(long, requires = "schema")]
    records: Option<PathBuf>,
    /// Synthetic cohort used when no files are given.
    #[arg(long, default_value = "static")]
    preset: Preset,
    /// Synthetic cohort size.
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Synthetic cohort seed; defaults to --seed.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sweep seeds, comma separated; defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// `kfold:K` or `holdout:N[:train/val/test]`. Defaults to kfold:10 for static
    /// cohorts and holdout:6 for time-series cohorts.
    #[arg(long)]
    folds: Option<FoldScheme>,
    #[arg(long = "label-ratios", alias = "label-ratio", value_delimiter = ',')]
    label_ratios: Vec<f64>,
    /// static, fm or bm. Defaults to static for static cohorts and fm otherwise.
    #[arg(long)]
    mask: Option<MaskStrategy>,
    #[arg(long, default_value_t = 0.3)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 6)]
    block_len: usize,
    #[arg(long)]
    per_feature_blocks: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    epochs_scale: f64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    /// Multiplies the preset learning rates.
    #[arg(long, default_value_t = 1.0)]
    lr_scale: f64,
    /// Validation interval of pre-training, in epochs.
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    discrete_dim: Option<usize>,
    #[arg(long)]
    continuous_dim: Option<usize>,
    #[arg(long)]
    ts_hidden: Option<usize>,
    #[arg(long)]
    ts_dim: Option<usize>,
    #[arg(long)]
    ts_layers: Option<usize>,
    #[arg(long)]
    ffn_multiplier: Option<usize>,
    #[arg(long)]
    include_non_medical: bool,
    /// Neighbours per node.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 500)]
    group_size: usize,
    #[arg(long)]
    parallel_folds: bool,
    /// Pre-training checkpoint or run directory (finetune), run directory (evaluate).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn resolve(command: Command, a: RunArgs) -> Result<RunConfig> {
    let (data, timeseries) = match (a.schema, a.records) {
        (Some(schema), Some(records)) => {
            let ts = read_schema(&schema)?.has_timeseries();
            (DataSource::Files { schema, records }, ts)
        }
        _ => (
            DataSource::Synthetic {
                preset: a.preset,
                n: a.n,
                seed: a.data_seed.unwrap_or(a.seed),
            },
            a.preset == Preset::Timeseries,
        ),
    };
    let folds = match a.folds {
        Some(f) => f,
        None if timeseries => "holdout:6".parse()?,
        None => FoldScheme::Kfold { k: 10 },
    };
    let strategy = a.mask.unwrap_or(if timeseries {
        MaskStrategy::FeatureMasking
    } else {
        MaskStrategy::StaticRandom
    });
    let mask = MaskSpec {
        strategy,
        ratio: a.mask_ratio,
        block_len: a.block_len,
        per_feature_blocks: a.per_feature_blocks,
    };
    let label_ratios = if a.label_ratios.is_empty() {
        match command {
            Command::Sweep => DEFAULT_RATIOS.to_vec(),
            _ => vec![1.0],
        }
    } else {
        a.label_ratios
    };
    if let Some(r) = label_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("label ratio {r} outside (0, 1]")));
    }
    let seeds = if a.seeds.is_empty() { vec![a.seed] } else { a.seeds };
    Ok(RunConfig {
        command,
        data,
        seed: a.seed,
        folds,
        label_ratios,
        seeds,
        mask,
        variant: a.variant,
        model: ModelOverrides {
            num_layers: a.layers,
            heads: a.heads,
            discrete_dim: a.discrete_dim,
            continuous_dim: a.continuous_dim,
            ts_hidden: a.ts_hidden,
            ts_dim: a.ts_dim,
            ts_layers: a.ts_layers,
            ffn_multiplier: a.ffn_multiplier,
            include_non_medical: a.include_non_medical.then_some(true),
        },
        epochs_scale: a.epochs_scale,
        lr_scale: a.lr_scale,
        epochs: a.epochs,
        lr: a.lr,
        lr_end: a.lr_end,
        eval_every: a.eval_every,
        graph: GraphOptions {
            k: a.k,
            group_size: a.group_size,
        },
        parallel_folds: a.parallel_folds,
        checkpoint: a.checkpoint,
        out: a.out,
    })
}

fn config_of(cmd: Cmd) -> Result<RunConfig> {
    Ok(match cmd {
        Cmd::Generate(g) => RunConfig {
            command: Command::Generate,
            data: DataSource::Synthetic {
                preset: g.preset,
                n: g.n,
                seed: g.seed,
            },
            seed: g.seed,
            folds: FoldScheme::Kfold { k: 10 },
            label_ratios: vec![1.0],
            seeds: vec![g.seed],
            mask: MaskSpec::new(MaskStrategy::StaticRandom),
            variant: Variant::Full,
            model: ModelOverrides::default(),
            epochs_scale: 1.0,
            lr_scale: 1.0,
            epochs: None,
            lr: None,
            lr_end: None,
            eval_every: 1,
            graph: GraphOptions::default(),
            parallel_folds: false,
            checkpoint: None,
            out: g.out,
        },
        Cmd::Pretrain(a) => resolve(Command::Pretrain, a)?,
        Cmd::Train(a) => resolve(Command::Train, a)?,
        Cmd::Finetune(a) => resolve(Command::Finetune, a)?,
        Cmd::Evaluate(a) => resolve(Command::Evaluate, a)?,
        Cmd::Sweep(a) => resolve(Command::Sweep, a)?,
        Cmd::Rerun { config, out } => {
            let mut c = RunConfig::read(&config)?;
            if let Some(out) = out {
                c.out = out;
            }
            c
        }
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::NotFound(_) => 3,
        Error::Divergence(_) => 4,
        Error::IncompatibleCheckpoint(_) | Error::Format(_) => 5,
        Error::Parse { .. } | Error::Validation { .. } | Error::Schema(_) | Error::Json(_) => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match config_of(cli.command).and_then(|c| commands::run(&c)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
