//! Optimization, schedules, checkpoints and the pre-training and task loops.

mod adam;
mod checkpoint;
mod log;
mod pretrain;
mod protocol;
mod schedule;
mod task;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use log::{MetricLog, MetricRow};
pub use pretrain::{evaluate_imputation, run_pretraining, ImputationEval, PretrainOutcome};
pub use protocol::TrainProtocol;
pub use schedule::{poly_lr, Schedule};
pub use task::{evaluate_task, init_finetune, init_scratch, run_task_training, TaskMetrics, TaskOutcome};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tensor};
use crate::cohort::Preset;
use crate::error::{Error, Result};
use crate::masking::{MaskSpec, MaskStrategy};
use crate::model::Bound;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Scratch,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: Schedule,
    pub label_ratio: f64,
    /// Masking for pre-training; ignored by the task loop.
    pub mask: Option<MaskSpec>,
    /// Validation cadence of the pre-training loop. The last epoch is always evaluated.
    pub eval_every: usize,
}

impl TrainConfig {
    /// Full-size schedules for each preset and mode.
    pub fn preset(preset: Preset, mode: Mode, label_ratio: f64) -> Self {
        let poly = Schedule::Poly { power: 1.0 };
        let (epochs, lr_start, lr_end, schedule) = match (preset, mode) {
            (Preset::Static, Mode::Pretrain) => (6000, 1e-5, 1e-5, Schedule::Constant),
            (Preset::Static, Mode::Scratch) => (1200, 1e-5, 5e-6, poly),
            (Preset::Static, Mode::Finetune) => {
                let epochs = if label_ratio <= 0.01 { 200 } else { 1200 };
                (epochs, 5e-6, 5e-6, Schedule::Constant)
            }
            (Preset::Timeseries, Mode::Pretrain) => (3000, 1e-3, 1e-4, poly),
            (Preset::Timeseries, Mode::Scratch) => (1100, 1e-4, 1e-4, Schedule::Constant),
            (Preset::Timeseries, Mode::Finetune) => (600, 1e-5, 1e-5, Schedule::Constant),
        };
        let mask = (mode == Mode::Pretrain).then(|| {
            MaskSpec::new(match preset {
                Preset::Static => MaskStrategy::StaticRandom,
                Preset::Timeseries => MaskStrategy::FeatureMasking,
            })
        });
        Self {
            mode,
            epochs,
            lr_start,
            lr_end,
            schedule,
            label_ratio,
            mask,
            eval_every: 1,
        }
    }

    /// Multiplies the epoch count, keeping at least one epoch.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.epochs = ((self.epochs as f64 * factor).round() as usize).max(1);
        self
    }

    /// Replaces both learning rates, keeping their ratio.
    pub fn with_lr(mut self, lr_start: f64) -> Self {
        let ratio = self.lr_end / self.lr_start;
        self.lr_start = lr_start;
        self.lr_end = lr_start * ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::Config(format!("label ratio {} outside (0, 1]", self.label_ratio)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.mode == Mode::Pretrain && self.mask.is_none() {
            return Err(Error::Config("pre-training needs a mask spec".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.schedule.lr(epoch, self.epochs, self.lr_start, self.lr_end)
    }
}

fn collect_grads(bound: &Bound, mut grads: Gradients) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
        .collect()
}

/// Mean of per-subgraph gradients, summed in subgraph order.
fn mean_grads(parts: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<String, Tensor> {
    let n = parts.len() as f64;
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for part in it {
        for (k, g) in part {
            match acc.get_mut(&k) {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                None => {
                    acc.insert(k, g);
                }
            }
        }
    }
    if n > 1.0 {
        for g in acc.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
        }
    }
    acc
}
