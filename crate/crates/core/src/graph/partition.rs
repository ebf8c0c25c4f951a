use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::Fold;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

pub const DEFAULT_GROUP_SIZE: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphPartition {
    pub groups: Vec<Vec<String>>,
}

/// Splits the fold's patients into random groups of `group_size` (the last one takes the
/// remainder). Splits are interleaved proportionally before chunking, and a swap pass
/// then gives every group at least one member of each nonempty split where the
/// counts allow it.
pub fn partition_subgraphs(fold: &Fold, group_size: usize, seed: u64) -> Result<SubgraphPartition> {
    if group_size < 2 {
        return Err(Error::Config(format!("group_size {group_size} must be >= 2")));
    }
    let mut rng = rng_for(seed, &[stream::PARTITION]);
    let mut splits: Vec<Vec<String>> = [&fold.train_ids, &fold.val_ids, &fold.test_ids]
        .iter()
        .map(|ids| {
            let mut v = (*ids).clone();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let total: usize = splits.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(SubgraphPartition { groups: vec![] });
    }

    // stride scheduling: at each step take from the split furthest behind its share
    let mut taken = [0usize; 3];
    let mut order: Vec<(usize, String)> = Vec::with_capacity(total);
    for t in 0..total {
        let s = (0..3)
            .filter(|&s| taken[s] < splits[s].len())
            .max_by(|&a, &b| {
                let deficit = |s: usize| {
                    (t + 1) as f64 * splits[s].len() as f64 / total as f64 - taken[s] as f64
                };
                deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a))
            })
            .expect("some split has members left");
        order.push((s, std::mem::take(&mut splits[s][taken[s]])));
        taken[s] += 1;
    }

    let mut groups: Vec<Vec<(usize, String)>> =
        order.chunks(group_size).map(<[_]>::to_vec).collect();
    repair(&mut groups);
    Ok(SubgraphPartition {
        groups: groups
            .into_iter()
            .map(|g| g.into_iter().map(|(_, id)| id).collect())
            .collect(),
    })
}

fn count(group: &[(usize, String)], split: usize) -> usize {
    group.iter().filter(|(s, _)| *s == split).count()
}

fn repair(groups: &mut [Vec<(usize, String)>]) {
    for split in 0..3 {
        for g in 0..groups.len() {
            if count(&groups[g], split) > 0 {
                continue;
            }
            // a donor with a spare member of `split`, and a member here whose split
            // this group has more than one of
            let donor = (0..groups.len()).find(|&d| d != g && count(&groups[d], split) > 1);
            let give = (0..3).find(|&s| s != split && count(&groups[g], s) > 1);
            let (Some(d), Some(give)) = (donor, give) else {
                continue;
            };
            let pos_d = groups[d].iter().position(|(s, _)| *s == split).unwrap();
            let pos_g = groups[g].iter().position(|(s, _)| *s == give).unwrap();
            let a = std::mem::take(&mut groups[d][pos_d]);
            let b = std::mem::take(&mut groups[g][pos_g]);
            groups[d][pos_d] = b;
            groups[g][pos_g] = a;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn fold(train: usize, val: usize, test: usize) -> Fold {
        let mk = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        Fold {
            train_ids: mk("tr", train),
            val_ids: mk("va", val),
            test_ids: mk("te", test),
        }
    }

    #[test]
    fn sizes_follow_group_size() {
        let p = partition_subgraphs(&fold(960, 120, 120), 500, 1).unwrap();
        let sizes: Vec<usize> = p.groups.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![500, 500, 200]);
    }

    #[test]
    fn every_patient_in_exactly_one_group() {
        let f = fold(80, 10, 10);
        let p = partition_subgraphs(&f, 30, 2).unwrap();
        let mut seen = HashSet::new();
        for id in p.groups.iter().flatten() {
            assert!(seen.insert(id.clone()));
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn same_seed_same_partition() {
        let f = fold(50, 20, 30);
        assert_eq!(
            partition_subgraphs(&f, 17, 9).unwrap(),
            partition_subgraphs(&f, 17, 9).unwrap()
        );
        assert_ne!(
            partition_subgraphs(&f, 17, 9).unwrap(),
            partition_subgraphs(&f, 17, 10).unwrap()
        );
    }

    #[test]
    fn groups_mix_all_splits() {
        let p = partition_subgraphs(&fold(80, 10, 10), 25, 3).unwrap();
        for g in &p.groups {
            for prefix in ["tr", "va", "te"] {
                assert!(g.iter().any(|id| id.starts_with(prefix)), "{g:?}");
            }
        }
        // a short tail group is repaired by swaps
        let p = partition_subgraphs(&fold(16, 3, 3), 9, 4).unwrap();
        for g in &p.groups {
            for prefix in ["tr", "va", "te"] {
                assert!(g.iter().any(|id| id.starts_with(prefix)), "{g:?}");
            }
        }
    }

    #[test]
    fn small_group_size_rejected() {
        assert!(matches!(
            partition_subgraphs(&fold(5, 1, 1), 1, 0),
            Err(Error::Config(_))
        ));
    }
}
