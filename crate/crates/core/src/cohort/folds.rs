use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FoldScheme {
    /// K-fold: fold `i` tests on part `i` and validates on part `i+1 (mod K)`.
    Kfold { k: usize },
    /// Independent random train/val/test partitions.
    HoldoutRepeats {
        repeats: usize,
        train: f64,
        val: f64,
        test: f64,
    },
}

impl std::str::FromStr for FoldScheme {
    type Err = Error;

    /// Accepts `kfold:K` or `holdout:N[:train/val/test]`, e.g. `holdout:6:0.8/0.1/0.1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse fold scheme '{s}'"));
        let mut parts = s.split(':');
        match parts.next() {
            Some("kfold") => {
                let k = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                Ok(FoldScheme::Kfold { k })
            }
            Some("holdout") => {
                let repeats = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let (train, val, test) = match parts.next() {
                    None => (0.8, 0.1, 0.1),
                    Some(fr) => {
                        let v: Vec<f64> = fr
                            .split('/')
                            .map(|x| x.parse().map_err(|_| bad()))
                            .collect::<Result<_>>()?;
                        if v.len() != 3 {
                            return Err(bad());
                        }
                        (v[0], v[1], v[2])
                    }
                };
                Ok(FoldScheme::HoldoutRepeats {
                    repeats,
                    train,
                    val,
                    test,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub scheme: FoldScheme,
    pub folds: Vec<Fold>,
}

pub fn make_folds(ids: &[String], scheme: &FoldScheme, seed: u64) -> Result<FoldPlan> {
    let n = ids.len();
    let mut folds = Vec::new();
    match *scheme {
        FoldScheme::Kfold { k } => {
            if k < 3 {
                return Err(Error::Config(format!(
                    "kfold needs K >= 3 (test, validation and train parts), got {k}"
                )));
            }
            if n < k {
                return Err(Error::Config(format!("kfold({k}) on only {n} records")));
            }
            let mut order = ids.to_vec();
            order.shuffle(&mut rng_for(seed, &[stream::FOLDS]));
            // Part sizes differ by at most one.
            let parts: Vec<Vec<String>> = (0..k)
                .map(|p| order[p * n / k..(p + 1) * n / k].to_vec())
                .collect();
            for i in 0..k {
                let v = (i + 1) % k;
                let train_ids = (0..k)
                    .filter(|&p| p != i && p != v)
                    .flat_map(|p| parts[p].iter().cloned())
                    .collect();
                folds.push(Fold {
                    train_ids,
                    val_ids: parts[v].clone(),
                    test_ids: parts[i].clone(),
                });
            }
        }
        FoldScheme::HoldoutRepeats {
            repeats,
            train,
            val,
            test,
        } => {
            if (train + val + test - 1.0).abs() > 1e-9 || train <= 0.0 || val < 0.0 || test < 0.0 {
                return Err(Error::Config(format!(
                    "holdout fractions {train}/{val}/{test} must be non-negative and sum to 1"
                )));
            }
            if repeats == 0 {
                return Err(Error::Config("holdout needs at least one repeat".into()));
            }
            let n_train = (train * n as f64).round() as usize;
            let n_val = ((val * n as f64).round() as usize).min(n - n_train);
            for r in 0..repeats {
                let mut order = ids.to_vec();
                order.shuffle(&mut rng_for(seed, &[stream::FOLDS, r as u64]));
                folds.push(Fold {
                    train_ids: order[..n_train].to_vec(),
                    val_ids: order[n_train..n_train + n_val].to_vec(),
                    test_ids: order[n_train + n_val..].to_vec(),
                });
            }
        }
    }
    Ok(FoldPlan {
        scheme: scheme.clone(),
        folds,
    })
}

/// Per-class allocation for stratified subsampling: proportional quotas by largest
/// remainder, then at least one per present class.
fn allocate(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let quotas: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 * c as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = total - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[c] < counts[c] {
            alloc[c] += 1;
            remaining -= 1;
        }
    }
    for c in 0..counts.len() {
        if counts[c] > 0 && alloc[c] == 0 {
            alloc[c] = 1;
            // Give the slot back from the class furthest above its quota, if any can spare it.
            let donor = (0..counts.len())
                .filter(|&d| alloc[d] > 1)
                .max_by(|&a, &b| {
                    let ea = alloc[a] as f64 - quotas[a];
                    let eb = alloc[b] as f64 - quotas[b];
                    ea.partial_cmp(&eb).unwrap().then(b.cmp(&a))
                });
            if let Some(d) = donor {
                alloc[d] -= 1;
            }
        }
    }
    alloc
}

/// Picks `⌈ratio·|train|⌉` labeled ids, stratified by class with at least one per class
/// present. `labels[i]` is the class of `train_ids[i]`. The result keeps the input order.
pub fn subsample_labels(
    train_ids: &[String],
    labels: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("label ratio {ratio} outside (0, 1]")));
    }
    if labels.len() != train_ids.len() {
        return Err(Error::Config("one label per training id required".into()));
    }
    if ratio >= 1.0 {
        return Ok(train_ids.to_vec());
    }
    let n = train_ids.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let total = ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let counts: Vec<usize> = classes.iter().map(|c| by_class[c].len()).collect();
    let alloc = allocate(&counts, total.min(n));
    let mut chosen = vec![false; n];
    for (ci, class) in classes.iter().enumerate() {
        let mut members = by_class[class].clone();
        members.shuffle(&mut rng_for(seed, &[stream::LABELS, *class as u64]));
        for &i in members.iter().take(alloc[ci]) {
            chosen[i] = true;
        }
    }
    Ok(train_ids
        .iter()
        .zip(chosen)
        .filter(|(_, c)| *c)
        .map(|(id, _)| id.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn kfold_singletons() {
        let plan = make_folds(&ids(10), &FoldScheme::Kfold { k: 10 }, 1).unwrap();
        assert_eq!(plan.folds.len(), 10);
        let mut tested = HashSet::new();
        for f in &plan.folds {
            assert_eq!(f.test_ids.len(), 1);
            assert_eq!(f.val_ids.len(), 1);
            assert_eq!(f.train_ids.len(), 8);
            assert!(tested.insert(f.test_ids[0].clone()));
        }
        assert_eq!(tested.len(), 10);
    }

    #[test]
    fn holdout_sizes() {
        let scheme: FoldScheme = "holdout:6".parse().unwrap();
        let plan = make_folds(&ids(100), &scheme, 3).unwrap();
        assert_eq!(plan.folds.len(), 6);
        for f in &plan.folds {
            assert_eq!((f.train_ids.len(), f.val_ids.len(), f.test_ids.len()), (80, 10, 10));
        }
        assert_ne!(plan.folds[0], plan.folds[1]);
    }

    #[test]
    fn folds_are_deterministic_and_leak_free() {
        let scheme = FoldScheme::Kfold { k: 5 };
        let a = make_folds(&ids(53), &scheme, 9).unwrap();
        assert_eq!(a, make_folds(&ids(53), &scheme, 9).unwrap());
        for f in &a.folds {
            let t: HashSet<_> = f.train_ids.iter().collect();
            let v: HashSet<_> = f.val_ids.iter().collect();
            let s: HashSet<_> = f.test_ids.iter().collect();
            assert!(t.is_disjoint(&v) && t.is_disjoint(&s) && v.is_disjoint(&s));
            assert_eq!(t.len() + v.len() + s.len(), 53);
        }
    }

    #[test]
    fn bad_fractions_are_config_error() {
        let scheme = FoldScheme::HoldoutRepeats {
            repeats: 1,
            train: 0.8,
            val: 0.1,
            test: 0.2,
        };
        assert!(matches!(make_folds(&ids(10), &scheme, 0), Err(Error::Config(_))));
    }

    #[test]
    fn full_ratio_is_identity() {
        let train = ids(20);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        assert_eq!(subsample_labels(&train, &labels, 1.0, 4).unwrap(), train);
    }

    #[test]
    fn one_percent_of_two_hundred() {
        let train = ids(200);
        let labels: Vec<usize> = (0..200).map(|i| usize::from(i >= 150)).collect();
        let got = subsample_labels(&train, &labels, 0.01, 4).unwrap();
        assert_eq!(got.len(), 2);
        let classes: HashSet<usize> = got
            .iter()
            .map(|id| labels[train.iter().position(|t| t == id).unwrap()])
            .collect();
        assert_eq!(classes.len(), 2);
    }

    #[test]
    fn stratification_within_one_of_proportional() {
        // Exhaustive over small class-count configurations and ratios.
        for a in 1..12usize {
            for b in 1..12usize {
                for c in 0..6usize {
                    let counts = [a, b, c];
                    let n: usize = counts.iter().sum();
                    let labels: Vec<usize> =
                        (0..3).flat_map(|k| std::iter::repeat(k).take(counts[k])).collect();
                    let train = ids(n);
                    for &ratio in &[0.05, 0.1, 0.3, 0.5, 0.75] {
                        let got = subsample_labels(&train, &labels, ratio, 1).unwrap();
                        let total = ((ratio * n as f64) - 1e-9).ceil() as usize;
                        let present = counts.iter().filter(|&&x| x > 0).count();
                        assert_eq!(got.len(), total.max(present));
                        for k in 0..3 {
                            let picked = got
                                .iter()
                                .filter(|id| labels[train.iter().position(|t| t == *id).unwrap()] == k)
                                .count();
                            if counts[k] > 0 {
                                assert!(picked >= 1);
                            }
                            let prop = total as f64 * counts[k] as f64 / n as f64;
                            // integer proportional allocation is floor or ceil of the quota
                            let (lo, hi) = (prop.floor() - 1.0, prop.ceil() + 1.0);
                            assert!(
                                picked as f64 >= lo && picked as f64 <= hi,
                                "counts {counts:?} ratio {ratio}: class {k} picked {picked}, proportional {prop}"
                            );
                        }
                    }
                }
            }
        }
    }
}
