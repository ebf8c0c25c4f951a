use super::{adam_step, collect_grads, mean_grads, AdamState, Checkpoint, MetricLog, TrainConfig};
use crate::autodiff::Tape;
use crate::cohort::subsample_labels;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, default_auc_mode, roc_auc};
use crate::model::{fingerprint, init_encoder, init_head, Bound, Head, Model, ModelParams};
use crate::pipeline::{FoldFeatures, FoldLabels, Split};

/// Encoder and task head for training from scratch.
pub fn init_scratch(model: &Model, seed: u64) -> Result<ModelParams> {
    let mut p = init_encoder(&model.config, &model.layout, seed)?;
    p.extend(init_head(&model.config, &model.layout, Head::Task, seed));
    Ok(p)
}

/// Pre-trained encoder tensors plus a fresh task head. The imputation head is dropped.
pub fn init_finetune(pretrained: &Checkpoint, model: &Model, seed: u64) -> Result<ModelParams> {
    let expected = fingerprint(&model.config, &model.layout);
    if pretrained.fingerprint != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint fingerprint {:016x}, model expects {expected:016x}",
            pretrained.fingerprint
        )));
    }
    let template = init_encoder(&model.config, &model.layout, seed)?;
    let encoder = pretrained.params.encoder();
    for (name, t) in template.iter() {
        match encoder.get(name) {
            Some(e) if e.shape() == t.shape() => {}
            Some(e) => {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "'{name}' has shape {:?}, expected {:?}",
                    e.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::IncompatibleCheckpoint(format!("'{name}' missing"))),
        }
    }
    if encoder.len() != template.len() {
        return Err(Error::IncompatibleCheckpoint("unexpected encoder tensors".into()));
    }
    let mut p = encoder;
    p.extend(init_head(&model.config, &model.layout, Head::Task, seed));
    Ok(p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskMetrics {
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
}

impl TaskMetrics {
    /// AUC, or accuracy where AUC is undefined.
    pub fn selection_score(&self) -> f64 {
        self.auc.unwrap_or(self.accuracy)
    }
}

pub struct TaskOutcome {
    /// Parameters of the epoch with the best validation score.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub val: Option<TaskMetrics>,
    pub test: Option<TaskMetrics>,
    pub labeled_ids: Vec<String>,
    pub log: MetricLog,
    pub warnings: Vec<String>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn task_metrics(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Option<TaskMetrics> {
    if probs.is_empty() {
        return None;
    }
    let pred: Vec<usize> = probs
        .iter()
        .map(|p| {
            (0..p.len())
                .reduce(|a, b| if p[b] > p[a] { b } else { a })
                .unwrap_or(0)
        })
        .collect();
    Some(TaskMetrics {
        accuracy: accuracy(&pred, labels).ok()?,
        auc: roc_auc(probs, labels, default_auc_mode(classes)).ok(),
    })
}

/// Supervised training on the labeled subset of the training nodes. Every node takes
/// part in the forward pass; the cross entropy reads labeled training nodes only.
/// Each epoch's forward pass also scores validation and test nodes with the
/// parameters it was computed from, and those parameters are kept when the
/// validation score improves.
pub fn run_task_training(
    features: &FoldFeatures,
    labels: &FoldLabels,
    model: &Model,
    params: ModelParams,
    config: &TrainConfig,
    seed: u64,
) -> Result<TaskOutcome> {
    config.validate()?;
    if features.layout != model.layout {
        return Err(Error::Config("fold features were built for a different layout".into()));
    }
    if !params.has_head(Head::Task) {
        return Err(Error::Config("parameters have no task head".into()));
    }
    let classes = labels.num_classes;
    let mut warnings = Vec::new();

    let train_known: Vec<(String, usize)> = features
        .fold
        .train_ids
        .iter()
        .filter_map(|id| labels.get(id).map(|l| (id.clone(), l)))
        .collect();
    let ids: Vec<String> = train_known.iter().map(|(id, _)| id.clone()).collect();
    let ls: Vec<usize> = train_known.iter().map(|&(_, l)| l).collect();
    let labeled_ids = subsample_labels(&ids, &ls, config.label_ratio, seed)?;
    if labeled_ids.is_empty() {
        return Err(Error::Config("no labeled training nodes".into()));
    }
    let labeled: std::collections::HashSet<&str> = labeled_ids.iter().map(String::as_str).collect();
    for c in 0..classes {
        if !labeled_ids.iter().any(|id| labels.get(id) == Some(c)) {
            warnings.push(format!("class {c} has no labeled training node"));
        }
    }

    let fp = fingerprint(&model.config, &model.layout);
    let mut params = params;
    let mut adam = AdamState::new();
    let mut log = MetricLog::default();
    let mut best: Option<(f64, usize, ModelParams, Option<TaskMetrics>, Option<TaskMetrics>)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr(epoch);
        let mut split_probs: [(Vec<Vec<f64>>, Vec<usize>); 3] = Default::default();
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let mut updates = Vec::new();
        for g in &features.graphs {
            let recs = features.graph_records(g);
            let mut targets = vec![0usize; g.batch.n];
            let mut weights = vec![0.0; g.batch.n];
            for (i, r) in recs.iter().enumerate() {
                if g.split[i] == Split::Train && labeled.contains(r.id.as_str()) {
                    targets[i] = labels.get(&r.id).expect("labeled ids have labels");
                    weights[i] = 1.0;
                }
            }
            let any = weights.iter().any(|&w| w > 0.0);
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &params, any);
            let enc = model.encode(&mut tape, &bound, &g.batch)?;
            let logits = model.decode(&mut tape, &bound, enc.reps, Head::Task)?;
            let out = tape.value(logits).data().to_vec();
            for (i, r) in recs.iter().enumerate() {
                let slot = match g.split[i] {
                    Split::Train => 0,
                    Split::Val => 1,
                    Split::Test => 2,
                };
                if let Some(l) = labels.get(&r.id) {
                    split_probs[slot].0.push(softmax(&out[i * classes..(i + 1) * classes]));
                    split_probs[slot].1.push(l);
                }
            }
            if any {
                let loss = tape.cross_entropy(logits, &targets, &weights)?;
                let v = tape.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::Divergence(format!("task loss is {v} at epoch {epoch}")));
                }
                loss_sum += v;
                loss_n += 1;
                updates.push(collect_grads(&bound, tape.backward(loss)?));
            }
        }

        let [train_m, val_m, test_m] = [0, 1, 2].map(|s| task_metrics(&split_probs[s].0, &split_probs[s].1, classes));
        log.push(epoch, "train", "loss", loss_sum / loss_n as f64);
        for (name, m) in [("train", train_m), ("val", val_m), ("test", test_m)] {
            if let Some(m) = m {
                log.push(epoch, name, "accuracy", m.accuracy);
                if let Some(a) = m.auc {
                    log.push(epoch, name, "auc", a);
                }
            }
        }
        // without validation nodes the latest epoch wins
        let score = val_m.map_or(epoch as f64, |m| m.selection_score());
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, params.clone(), val_m, test_m));
        }

        adam_step(&mut params, &mean_grads(updates), &mut adam, lr)?;
    }

    let (_, best_epoch, best_params, val, test) = best.expect("epochs >= 1");
    let mut ckpt = Checkpoint::new(fp, best_params);
    ckpt.metrics.insert("epoch".into(), best_epoch as f64);
    for (prefix, m) in [("val", val), ("test", test)] {
        if let Some(m) = m {
            ckpt.metrics.insert(format!("{prefix}_accuracy"), m.accuracy);
            if let Some(a) = m.auc {
                ckpt.metrics.insert(format!("{prefix}_auc"), a);
            }
        }
    }
    Ok(TaskOutcome {
        best: ckpt,
        best_epoch,
        val,
        test,
        labeled_ids,
        log,
        warnings,
    })
}

/// Accuracy and AUC of `params` on the labeled nodes of `split`.
pub fn evaluate_task(
    features: &FoldFeatures,
    labels: &FoldLabels,
    model: &Model,
    params: &ModelParams,
    split: Split,
) -> Result<Option<TaskMetrics>> {
    let classes = labels.num_classes;
    let (mut probs, mut truth) = (Vec::new(), Vec::new());
    for g in &features.graphs {
        if !g.split.contains(&split) {
            continue;
        }
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let enc = model.encode(&mut tape, &bound, &g.batch)?;
        let logits = model.decode(&mut tape, &bound, enc.reps, Head::Task)?;
        let out = tape.value(logits).data();
        for (i, r) in features.graph_records(g).iter().enumerate() {
            if g.split[i] != split {
                continue;
            }
            if let Some(l) = labels.get(&r.id) {
                probs.push(softmax(&out[i * classes..(i + 1) * classes]));
                truth.push(l);
            }
        }
    }
    Ok(task_metrics(&probs, &truth, classes))
}
