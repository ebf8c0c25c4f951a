use serde::{Deserialize, Serialize};

use super::{Mode, TrainConfig};
use crate::cohort::Preset;
use crate::error::Result;
use crate::masking::MaskSpec;

/// How the preset schedules are adapted to a run: epoch and learning-rate scaling
/// that keep the preset ratios, or explicit overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProtocol {
    pub preset: Preset,
    pub epochs_scale: f64,
    pub lr_scale: f64,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lr_end: Option<f64>,
    pub mask: MaskSpec,
    pub eval_every: usize,
}

impl TrainProtocol {
    pub fn new(preset: Preset, mask: MaskSpec) -> Self {
        Self {
            preset,
            epochs_scale: 1.0,
            lr_scale: 1.0,
            epochs: None,
            lr: None,
            lr_end: None,
            mask,
            eval_every: 1,
        }
    }

    pub fn resolve(&self, mode: Mode, label_ratio: f64) -> Result<TrainConfig> {
        let mut c = TrainConfig::preset(self.preset, mode, label_ratio).scaled(self.epochs_scale);
        c.lr_start *= self.lr_scale;
        c.lr_end *= self.lr_scale;
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(lr) = self.lr {
            c = c.with_lr(lr);
        }
        if let Some(end) = self.lr_end {
            c.lr_end = end;
        }
        if mode == Mode::Pretrain {
            c.mask = Some(self.mask.clone());
        }
        c.eval_every = self.eval_every;
        c.validate()?;
        Ok(c)
    }
}
