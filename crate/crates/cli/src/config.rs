//! Resolved run configuration, written verbatim into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use popgraph::cohort::{load_cohort, synthesize_cohort, Cohort, FoldScheme, Preset, SynthKnobs};
use popgraph::masking::MaskSpec;
use popgraph::model::{ModelConfig, Variant};
use popgraph::pipeline::GraphOptions;
use popgraph::train::TrainProtocol;
use popgraph::{Error, Result};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Generate,
    Pretrain,
    Train,
    Finetune,
    Evaluate,
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { preset: Preset, n: usize, seed: u64 },
    Files { schema: PathBuf, records: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Cohort> {
        match self {
            DataSource::Synthetic { preset, n, seed } => {
                synthesize_cohort(*seed, *n, &SynthKnobs::for_preset(*preset))
            }
            DataSource::Files { schema, records } => load_cohort(schema, records),
        }
    }
}

/// Per-field replacements of the preset model configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelOverrides {
    pub num_layers: Option<usize>,
    pub heads: Option<usize>,
    pub discrete_dim: Option<usize>,
    pub continuous_dim: Option<usize>,
    pub ts_hidden: Option<usize>,
    pub ts_dim: Option<usize>,
    pub ts_layers: Option<usize>,
    pub ffn_multiplier: Option<usize>,
    pub include_non_medical: Option<bool>,
}

impl ModelOverrides {
    pub fn apply(&self, mut c: ModelConfig) -> ModelConfig {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.num_layers, self.num_layers);
        set(&mut c.heads, self.heads);
        set(&mut c.discrete_dim, self.discrete_dim);
        set(&mut c.continuous_dim, self.continuous_dim);
        set(&mut c.ts_hidden, self.ts_hidden);
        set(&mut c.ts_dim, self.ts_dim);
        set(&mut c.ts_layers, self.ts_layers);
        set(&mut c.ffn_multiplier, self.ffn_multiplier);
        if let Some(b) = self.include_non_medical {
            c.include_non_medical = b;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub data: DataSource,
    pub seed: u64,
    pub folds: FoldScheme,
    pub label_ratios: Vec<f64>,
    /// Sweep seeds; other commands use `seed`.
    pub seeds: Vec<u64>,
    pub mask: MaskSpec,
    pub variant: Variant,
    pub model: ModelOverrides,
    pub epochs_scale: f64,
    pub lr_scale: f64,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lr_end: Option<f64>,
    pub eval_every: usize,
    pub graph: GraphOptions,
    pub parallel_folds: bool,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn model_config(&self, preset: Preset) -> ModelConfig {
        self.model
            .apply(ModelConfig::for_preset(preset))
            .with_variant(self.variant)
    }

    pub fn protocol(&self, preset: Preset) -> TrainProtocol {
        TrainProtocol {
            preset,
            epochs_scale: self.epochs_scale,
            lr_scale: self.lr_scale,
            epochs: self.epochs,
            lr: self.lr,
            lr_end: self.lr_end,
            mask: self.mask.clone(),
            eval_every: self.eval_every,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(RUN_CONFIG_FILE), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Series data means the time-series preset; anything else is treated as static.
pub fn preset_of(cohort: &Cohort) -> Preset {
    if cohort.schema.has_timeseries() {
        Preset::Timeseries
    } else {
        Preset::Static
    }
}
