//! Label-ratio sweeps: from-scratch against fine-tuned runs sharing folds and graphs.

use serde::Serialize;

use crate::error::Result;
use crate::masking::{MaskSpec, MaskStrategy};
use crate::metrics::aggregate_folds;
use crate::model::Model;
use crate::pipeline::{FoldFeatures, FoldLabels};
use crate::train::{
    init_finetune, init_scratch, run_pretraining, run_task_training, Mode, TaskMetrics, TrainProtocol,
};

pub const DEFAULT_RATIOS: [f64; 5] = [0.01, 0.05, 0.10, 0.50, 1.00];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Arm {
    Scratch,
    Finetune(MaskStrategy),
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Scratch => "SC",
            Arm::Finetune(MaskStrategy::StaticRandom) => "FT",
            Arm::Finetune(MaskStrategy::BlockMasking) => "FT:BM",
            Arm::Finetune(MaskStrategy::FeatureMasking) => "FT:FM",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub seed: u64,
    pub fold: usize,
    pub ratio: f64,
    pub arm: Arm,
    pub labeled: usize,
    pub best_epoch: usize,
    pub val: Option<TaskMetrics>,
    pub test: Option<TaskMetrics>,
}

/// Pre-trains once per strategy, then trains every ratio from scratch and from each
/// pre-trained encoder.
#[allow(clippy::too_many_arguments)]
pub fn sweep_fold(
    features: &FoldFeatures,
    labels: &FoldLabels,
    model: &Model,
    protocol: &TrainProtocol,
    ratios: &[f64],
    strategies: &[MaskStrategy],
    seed: u64,
    fold: usize,
) -> Result<Vec<ArmResult>> {
    let mut pretrained = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let mut p = protocol.clone();
        p.mask = MaskSpec { strategy: s, ..protocol.mask.clone() };
        let cfg = p.resolve(Mode::Pretrain, 1.0)?;
        pretrained.push((s, run_pretraining(features, model, &cfg, seed)?.best_checkpoint));
    }
    let mut out = Vec::new();
    for &ratio in ratios {
        let cfg = protocol.resolve(Mode::Scratch, ratio)?;
        let r = run_task_training(features, labels, model, init_scratch(model, seed)?, &cfg, seed)?;
        out.push(ArmResult {
            seed,
            fold,
            ratio,
            arm: Arm::Scratch,
            labeled: r.labeled_ids.len(),
            best_epoch: r.best_epoch,
            val: r.val,
            test: r.test,
        });
        let cfg = protocol.resolve(Mode::Finetune, ratio)?;
        for (s, ckpt) in &pretrained {
            let params = init_finetune(ckpt, model, seed)?;
            let r = run_task_training(features, labels, model, params, &cfg, seed)?;
            out.push(ArmResult {
                seed,
                fold,
                ratio,
                arm: Arm::Finetune(*s),
                labeled: r.labeled_ids.len(),
                best_epoch: r.best_epoch,
                val: r.val,
                test: r.test,
            });
        }
    }
    Ok(out)
}

/// One row per `(ratio, metric)` and one `mean ± std` column per arm, in percent.
/// `columns` pairs a header with the arm it reads.
pub fn label_table(results: &[ArmResult], ratios: &[f64], columns: &[(&str, Arm)]) -> Result<String> {
    let mut out = String::from("ratio,metric");
    for (h, _) in columns {
        out.push(',');
        out.push_str(h);
    }
    out.push('\n');
    for &ratio in ratios {
        for metric in ["ACC", "AUC"] {
            out.push_str(&format!("{ratio},{metric}"));
            for &(_, arm) in columns {
                let values: Vec<f64> = results
                    .iter()
                    .filter(|r| r.arm == arm && r.ratio == ratio)
                    .filter_map(|r| r.test)
                    .filter_map(|m| match metric {
                        "ACC" => Some(m.accuracy),
                        _ => m.auc,
                    })
                    .map(|v| 100.0 * v)
                    .collect();
                out.push(',');
                if let Ok(rep) = aggregate_folds(metric, &values) {
                    out.push_str(&rep.to_string());
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}
