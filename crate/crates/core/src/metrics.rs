//! Task and imputation metrics plus cross-fold aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} targets")));
    }
    if a == 0 {
        return Err(Error::EmptyEval);
    }
    Ok(())
}

/// Rank-statistic AUC of `scores` for `positive[i]`; tied scores count one half.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), positive.len())?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups, 1-based
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    /// Column 1 of two-column probabilities against label 1.
    Binary,
    /// Unweighted mean of one-vs-rest AUCs over the classes whose AUC is defined.
    MacroOvr,
}

/// AUC from per-row class probabilities `probs[i][c]`.
pub fn roc_auc(probs: &[Vec<f64>], labels: &[usize], mode: AucMode) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let classes = probs[0].len();
    if probs.iter().any(|p| p.len() != classes) || labels.iter().any(|&l| l >= classes) {
        return Err(Error::Shape("ragged probabilities or label out of range".into()));
    }
    let one_vs_rest = |c: usize| {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        roc_auc_binary(&scores, &pos)
    };
    match mode {
        AucMode::Binary => {
            if classes != 2 {
                return Err(Error::Shape(format!("binary AUC on {classes} classes")));
            }
            one_vs_rest(1)
        }
        AucMode::MacroOvr => {
            let defined: Vec<f64> = (0..classes).filter_map(|c| one_vs_rest(c).ok()).collect();
            if defined.is_empty() {
                return Err(Error::UndefinedMetric("no class has a defined AUC".into()));
            }
            Ok(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Binary for two classes, macro one-vs-rest otherwise.
pub fn default_auc_mode(classes: usize) -> AucMode {
    if classes == 2 {
        AucMode::Binary
    } else {
        AucMode::MacroOvr
    }
}

pub fn rmse_masked(preds: &[f64], targets: &[f64], eligible: &[bool]) -> Result<f64> {
    if preds.len() != targets.len() || preds.len() != eligible.len() {
        return Err(Error::Shape("rmse inputs differ in length".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, t), &e) in preds.iter().zip(targets).zip(eligible) {
        if e {
            sum += (p - t) * (p - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyEval);
    }
    Ok((sum / n as f64).sqrt())
}

/// F1 on the positive class of `preds ≥ threshold` against `{0, 1}` targets.
pub fn f1_binary(preds: &[f64], targets: &[f64], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in preds.iter().zip(targets) {
        match (p >= threshold, t >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Fraction of positions with `|pred − true| ≤ margin`, margins given per position.
pub fn margin_accuracy(pred: &[usize], truth: &[usize], margins: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    if margins.len() != pred.len() {
        return Err(Error::Config(format!(
            "{} margins for {} positions",
            margins.len(),
            pred.len()
        )));
    }
    let hits = pred
        .iter()
        .zip(truth)
        .zip(margins)
        .filter(|((p, t), m)| p.abs_diff(**t) <= **m)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n_folds: usize,
}

impl fmt::Display for MetricReport {
    /// `mean ± std` with two decimals, values taken as they are (percent space).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn aggregate_folds(name: &str, values: &[f64]) -> Result<MetricReport> {
    if values.is_empty() {
        return Err(Error::EmptyEval);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MetricReport {
        name: name.to_string(),
        values: values.to_vec(),
        mean,
        std: var.sqrt(),
        n_folds: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert!((accuracy(&[0, 1, 2], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptyEval)));
    }

    #[test]
    fn auc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(roc_auc_binary(&[0.1, 0.4, 0.35, 0.8], &pos).unwrap(), 0.75);
        assert_eq!(roc_auc_binary(&[0.1, 0.2, 0.3, 0.4], &pos).unwrap(), 1.0);
        assert_eq!(roc_auc_binary(&[0.5; 4], &pos).unwrap(), 0.5);
        assert!(matches!(
            roc_auc_binary(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn macro_auc_skips_absent_classes() {
        let probs = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.6, 0.3, 0.1],
            vec![0.1, 0.8, 0.1],
        ];
        // class 2 never occurs, so only classes 0 and 1 count
        let auc = roc_auc(&probs, &[0, 1, 0, 1], AucMode::MacroOvr).unwrap();
        assert_eq!(auc, 1.0);
        let binary = vec![vec![0.9, 0.1], vec![0.6, 0.4], vec![0.65, 0.35], vec![0.2, 0.8]];
        assert_eq!(roc_auc(&binary, &[0, 0, 1, 1], AucMode::Binary).unwrap(), 0.75);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_masked(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        let r = rmse_masked(&[3.0, 4.0, 9.0], &[0.0, 0.0, 0.0], &[true, true, false]).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rmse_masked(&[1.0], &[1.0], &[false]), Err(Error::EmptyEval)));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_binary(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 0.5), 1.0);
        // TP, FP, FN one each
        assert_eq!(f1_binary(&[0.9, 0.8, 0.1], &[1.0, 0.0, 1.0], 0.5), 0.5);
        assert_eq!(f1_binary(&[0.1, 0.2], &[1.0, 1.0], 0.5), 0.0);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_accuracy(&[12], &[10], &[2]).unwrap(), 1.0);
        assert_eq!(margin_accuracy(&[13], &[10], &[2]).unwrap(), 0.0);
        let (p, t) = ([1, 2, 3, 0], [1, 3, 3, 2]);
        assert_eq!(
            margin_accuracy(&p, &t, &[0; 4]).unwrap(),
            accuracy(&p, &t).unwrap()
        );
        assert!(matches!(margin_accuracy(&p, &t, &[0; 3]), Err(Error::Config(_))));
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate_folds("acc", &[70.0, 72.0]).unwrap();
        assert_eq!(r.to_string(), "71.00 ± 1.00");
        assert_eq!(aggregate_folds("acc", &[5.0]).unwrap().std, 0.0);
        let a = aggregate_folds("x", &[1.0, 4.0, 2.5]).unwrap();
        let b = aggregate_folds("x", &[2.5, 1.0, 4.0]).unwrap();
        assert_eq!(a.to_string(), b.to_string());
    }
}
