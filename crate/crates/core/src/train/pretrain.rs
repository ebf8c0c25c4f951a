use super::{adam_step, collect_grads, mean_grads, AdamState, Checkpoint, MetricLog, TrainConfig};
use crate::autodiff::Tape;
use crate::cohort::SeriesKind;
use crate::error::{Error, Result};
use crate::masking::{apply_mask_tokens, fixed_mask, imputation_loss, GroupLosses, MaskSpec, MaskedBatch};
use crate::metrics::{f1_binary, margin_accuracy, rmse_masked};
use crate::model::{build_params, fingerprint, Bound, Head, Model, ModelParams};
use crate::pipeline::{FoldFeatures, Split};

pub struct PretrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Lowest validation imputation loss.
    pub best_checkpoint: Checkpoint,
    pub best_epoch: usize,
    /// Training loss per epoch, averaged over subgraphs.
    pub train_loss: Vec<f64>,
    pub log: MetricLog,
}

fn check_layout(features: &FoldFeatures, model: &Model) -> Result<()> {
    if features.layout != model.layout {
        return Err(Error::Config("fold features were built for a different layout".into()));
    }
    Ok(())
}

fn forward_loss(
    model: &Model,
    params: &ModelParams,
    mb: &MaskedBatch,
    nodes: &[bool],
    train: bool,
) -> Result<Option<(f64, GroupLosses, Option<std::collections::BTreeMap<String, crate::autodiff::Tensor>>)>> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, train);
    let enc = model.encode(&mut tape, &bound, &mb.inputs)?;
    let preds = model.decode(&mut tape, &bound, enc.reps, Head::Imputation)?;
    let loss = match imputation_loss(&mut tape, preds, mb, &model.layout, nodes) {
        Ok(l) => l,
        Err(Error::EmptyLossSupport) => return Ok(None),
        Err(e) => return Err(e),
    };
    let value = tape.value(loss.total).item();
    if !value.is_finite() {
        return Err(Error::Divergence(format!("imputation loss is {value}")));
    }
    let grads = if train {
        Some(collect_grads(&bound, tape.backward(loss.total)?))
    } else {
        None
    };
    Ok(Some((value, loss.groups, grads)))
}

fn push_groups(log: &mut MetricLog, epoch: usize, split: &str, total: f64, g: &GroupLosses) {
    log.push(epoch, split, "loss", total);
    for (name, v) in [("loss_discrete", g.discrete), ("loss_continuous", g.continuous), ("loss_binary", g.binary)] {
        if let Some(v) = v {
            log.push(epoch, split, name, v);
        }
    }
}

/// Masked-imputation pre-training of the encoder and imputation head. Only the
/// label-free fold view is read. The loss counts training nodes; validation nodes
/// under a fixed mask select the best checkpoint.
pub fn run_pretraining(
    features: &FoldFeatures,
    model: &Model,
    config: &TrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    check_layout(features, model)?;
    let spec = config.mask.clone().expect("validated");
    let fp = fingerprint(&model.config, &model.layout);
    let mut params = build_params(&model.config, &model.layout, &[Head::Imputation], seed)?;
    let mut adam = AdamState::new();
    let mut log = MetricLog::default();

    let val_masks: Vec<MaskedBatch> = features
        .graphs
        .iter()
        .map(|g| fixed_mask(&features.schema, &model.layout, &features.graph_records(g), &g.batch, &spec, seed))
        .collect::<Result<_>>()?;
    let has_val = features.graphs.iter().any(|g| g.split.contains(&Split::Val));

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut train_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr(epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        let mut groups = GroupLosses::default();
        let mut updates = Vec::new();
        for g in &features.graphs {
            let nodes = g.nodes_in(Split::Train);
            if !nodes.contains(&true) {
                continue;
            }
            let recs = features.graph_records(g);
            let mb = apply_mask_tokens(&features.schema, &model.layout, &recs, &g.batch, &spec, epoch as u64, seed)?;
            let Some((value, gl, grads)) = forward_loss(model, &params, &mb, &nodes, true)? else {
                continue;
            };
            updates.push(grads.expect("train pass"));
            sum += value;
            count += 1;
            groups = accumulate(groups, gl);
        }
        if count == 0 {
            return Err(Error::EmptyLossSupport);
        }
        adam_step(&mut params, &mean_grads(updates), &mut adam, lr)?;
        let mean = sum / count as f64;
        train_loss.push(mean);
        push_groups(&mut log, epoch, "train", mean, &scaled(groups, count));

        let last = epoch + 1 == config.epochs;
        if epoch % config.eval_every == 0 || last {
            let score = if has_val {
                let (mut vs, mut vn) = (0.0, 0usize);
                let mut vg = GroupLosses::default();
                for (g, mb) in features.graphs.iter().zip(&val_masks) {
                    if let Some((v, gl, _)) = forward_loss(model, &params, mb, &g.nodes_in(Split::Val), false)? {
                        vs += v;
                        vn += 1;
                        vg = accumulate(vg, gl);
                    }
                }
                if vn == 0 {
                    mean
                } else {
                    push_groups(&mut log, epoch, "val", vs / vn as f64, &scaled(vg, vn));
                    vs / vn as f64
                }
            } else {
                mean
            };
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, epoch, params.clone()));
            }
        }
    }

    let (best_score, best_epoch, best_params) = best.expect("at least one evaluation");
    let mut final_checkpoint = Checkpoint::new(fp, params);
    final_checkpoint.adam = Some(adam);
    final_checkpoint
        .metrics
        .insert("train_loss".into(), *train_loss.last().expect("epochs >= 1"));
    let mut best_checkpoint = Checkpoint::new(fp, best_params);
    best_checkpoint.metrics.insert("val_loss".into(), best_score);
    best_checkpoint.metrics.insert("epoch".into(), best_epoch as f64);
    Ok(PretrainOutcome {
        final_checkpoint,
        best_checkpoint,
        best_epoch,
        train_loss,
        log,
    })
}

fn accumulate(a: GroupLosses, b: GroupLosses) -> GroupLosses {
    let add = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (None, None) => None,
        (x, y) => Some(x.unwrap_or(0.0) + y.unwrap_or(0.0)),
    };
    GroupLosses {
        discrete: add(a.discrete, b.discrete),
        continuous: add(a.continuous, b.continuous),
        binary: add(a.binary, b.binary),
    }
}

fn scaled(g: GroupLosses, n: usize) -> GroupLosses {
    let d = |x: Option<f64>| x.map(|v| v / n as f64);
    GroupLosses {
        discrete: d(g.discrete),
        continuous: d(g.continuous),
        binary: d(g.binary),
    }
}

/// Imputation quality on one split under a fixed mask, next to a baseline that
/// predicts training-set feature means (continuous) and modes (discrete).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImputationEval {
    pub loss: f64,
    /// Continuous positions in original units: static features and measured cells.
    pub rmse: Option<f64>,
    pub baseline_rmse: Option<f64>,
    pub discrete_accuracy: Option<f64>,
    pub margin_accuracy: Option<f64>,
    pub baseline_discrete_accuracy: Option<f64>,
    pub treatment_f1: Option<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Scores imputations of `params` on `split` nodes, masked with the validation stream.
pub fn evaluate_imputation(
    features: &FoldFeatures,
    model: &Model,
    params: &ModelParams,
    spec: &MaskSpec,
    split: Split,
    seed: u64,
) -> Result<ImputationEval> {
    check_layout(features, model)?;
    let layout = &model.layout;
    let schema = &features.schema;
    let train = features.train_records();
    let (c, s) = (layout.continuous.len(), layout.num_series);
    let tau = layout.series_length;

    // baselines from training records
    let cont_mean: Vec<f64> = layout
        .continuous
        .iter()
        .map(|&k| train.iter().map(|r| r.continuous[k]).sum::<f64>() / train.len().max(1) as f64)
        .collect();
    let series_mean: Vec<f64> = (0..s)
        .map(|f| {
            let (mut sum, mut n) = (0.0, 0usize);
            for r in &train {
                for h in 0..tau {
                    if r.measured[f][h] {
                        sum += r.timeseries[f][h];
                        n += 1;
                    }
                }
            }
            if n == 0 { 0.0 } else { sum / n as f64 }
        })
        .collect();
    let disc_mode: Vec<usize> = layout
        .discrete
        .iter()
        .map(|slot| {
            let mut counts = vec![0usize; slot.vocab];
            for r in &train {
                counts[r.discrete[slot.feature]] += 1;
            }
            let counts: Vec<f64> = counts.into_iter().map(|x| x as f64).collect();
            argmax(&counts)
        })
        .collect();

    let width = layout.imputation_width();
    let offsets = layout.discrete_offsets();
    let (c0, g0) = (layout.continuous_offset(), layout.grid_offset());
    let (mut pred_c, mut base_c, mut true_c) = (Vec::new(), Vec::new(), Vec::new());
    let (mut pred_d, mut base_d, mut true_d, mut margins) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut pred_b, mut true_b) = (Vec::new(), Vec::new());
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    for g in &features.graphs {
        let nodes = g.nodes_in(split);
        if !nodes.contains(&true) {
            continue;
        }
        let mb = fixed_mask(schema, layout, &features.graph_records(g), &g.batch, spec, seed)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let enc = model.encode(&mut tape, &bound, &mb.inputs)?;
        let preds = model.decode(&mut tape, &bound, enc.reps, Head::Imputation)?;
        if let Ok(l) = imputation_loss(&mut tape, preds, &mb, layout, &nodes) {
            loss_sum += tape.value(l.total).item();
            loss_n += 1;
        }
        let out = tape.value(preds).data();
        for i in (0..g.batch.n).filter(|&i| nodes[i]) {
            let row = &out[i * width..(i + 1) * width];
            for (k, slot) in layout.discrete.iter().enumerate() {
                if mb.discrete_mask[k][i] {
                    pred_d.push(argmax(&row[offsets[k]..offsets[k] + slot.vocab]));
                    base_d.push(disc_mode[k]);
                    true_d.push(mb.discrete_targets[k][i]);
                    margins.push(schema.discrete_features[slot.feature].margin);
                }
            }
            if let Some(t) = &mb.continuous_targets {
                for (j, &feat) in layout.continuous.iter().enumerate() {
                    if mb.continuous_mask[i * c + j] {
                        let span = features.norm.as_ref().map_or(1.0, |n| n.span(feat));
                        pred_c.push(row[c0 + j] * span);
                        base_c.push(cont_mean[j] * span);
                        true_c.push(t.data()[i * c + j] * span);
                    }
                }
            }
            if let Some(t) = &mb.grid_targets {
                let cells = layout.grid_len();
                for cell in 0..cells {
                    if !mb.grid_eligible[i * cells + cell] {
                        continue;
                    }
                    let f = cell % s;
                    let target = t.data()[i * cells + cell];
                    if schema.timeseries_features[f].kind == SeriesKind::BinaryTreatment {
                        pred_b.push(1.0 / (1.0 + (-row[g0 + cell]).exp()));
                        true_b.push(target);
                    } else {
                        pred_c.push(row[g0 + cell]);
                        base_c.push(series_mean[f]);
                        true_c.push(target);
                    }
                }
            }
        }
    }
    if loss_n == 0 {
        return Err(Error::EmptyEval);
    }
    let all_c = vec![true; true_c.len()];
    let all_d = vec![0usize; true_d.len()];
    Ok(ImputationEval {
        loss: loss_sum / loss_n as f64,
        rmse: rmse_masked(&pred_c, &true_c, &all_c).ok(),
        baseline_rmse: rmse_masked(&base_c, &true_c, &all_c).ok(),
        discrete_accuracy: margin_accuracy(&pred_d, &true_d, &all_d).ok(),
        margin_accuracy: margin_accuracy(&pred_d, &true_d, &margins).ok(),
        baseline_discrete_accuracy: margin_accuracy(&base_d, &true_d, &all_d).ok(),
        treatment_f1: (!true_b.is_empty()).then(|| f1_binary(&pred_b, &true_b, 0.5)),
    })
}
