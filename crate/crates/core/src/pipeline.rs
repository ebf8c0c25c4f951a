//! Per-fold preparation: normalization and interpolation fitted on training records,
//! subgraph partition, similarity graphs and model batches.
//!
//! Labels are split off here. [`FoldFeatures`] carries no labels at all and is the only
//! input pre-training accepts; task training also takes a [`FoldLabels`].

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::cohort::{
    interpolate_timeseries, normalize_continuous, Cohort, FeatureSchema, Fold, NormStats,
    PatientRecord, PreprocessWarnings,
};
use crate::error::{Error, Result};
use crate::graph::{
    knn_graph, partition_subgraphs, timeseries_descriptors, PopulationGraph, SimilarityMatrix,
    StaticSimilarity, TimeseriesSimilarity, DEFAULT_GROUP_SIZE, DEFAULT_K,
};
use crate::model::{FeatureLayout, GraphStructure, NodeBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub k: usize,
    pub group_size: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }
}

/// One subgraph with its model inputs.
#[derive(Clone, Debug)]
pub struct FoldGraph {
    /// Indices into [`FoldFeatures::records`], in node order.
    pub members: Vec<usize>,
    pub split: Vec<Split>,
    pub graph: PopulationGraph,
    pub batch: NodeBatch,
}

impl FoldGraph {
    pub fn nodes_in(&self, split: Split) -> Vec<bool> {
        self.split.iter().map(|&s| s == split).collect()
    }
}

/// Preprocessed, label-free records of one fold and their graphs.
#[derive(Clone, Debug)]
pub struct FoldFeatures {
    pub schema: FeatureSchema,
    pub layout: FeatureLayout,
    pub fold: Fold,
    /// Every record of the fold, normalized and interpolated, with `label = None`.
    pub records: Vec<PatientRecord>,
    pub norm: Option<NormStats>,
    pub graphs: Vec<FoldGraph>,
    pub warnings: PreprocessWarnings,
}

impl FoldFeatures {
    pub fn graph_records(&self, g: &FoldGraph) -> Vec<&PatientRecord> {
        g.members.iter().map(|&i| &self.records[i]).collect()
    }

    pub fn train_records(&self) -> Vec<&PatientRecord> {
        let train: HashSet<&str> = self.fold.train_ids.iter().map(String::as_str).collect();
        self.records.iter().filter(|r| train.contains(r.id.as_str())).collect()
    }
}

/// Labels of one fold by patient id.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldLabels {
    pub num_classes: usize,
    pub by_id: HashMap<String, usize>,
}

impl FoldLabels {
    pub fn get(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

pub fn split_labels(cohort: &Cohort) -> FoldLabels {
    FoldLabels {
        num_classes: cohort.schema.num_classes,
        by_id: cohort
            .records
            .iter()
            .filter_map(|r| r.label.map(|l| (r.id.clone(), l)))
            .collect(),
    }
}

/// Mean of measured values per series over `records`.
fn measured_means(schema: &FeatureSchema, records: &[&PatientRecord]) -> Vec<f64> {
    (0..schema.num_series())
        .map(|s| {
            let (mut sum, mut n) = (0.0, 0usize);
            for r in records {
                for (v, &m) in r.timeseries[s].iter().zip(&r.measured[s]) {
                    if m {
                        sum += v;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

fn similarity(schema: &FeatureSchema, records: &[&PatientRecord], norm: Option<&NormStats>) -> Result<SimilarityMatrix> {
    if schema.has_timeseries() {
        let desc: Vec<_> = records.iter().map(|r| timeseries_descriptors(r, schema)).collect();
        Ok(TimeseriesSimilarity::fit(&desc).matrix(&desc))
    } else {
        Ok(StaticSimilarity::fit(schema, records, norm)?.matrix(records))
    }
}

/// Builds the label-free view of `fold`. Continuous statistics and interpolation
/// fallbacks are read from training records only.
pub fn prepare_fold(
    cohort: &Cohort,
    fold: &Fold,
    layout: &FeatureLayout,
    options: GraphOptions,
    seed: u64,
) -> Result<FoldFeatures> {
    let index = cohort.index_of();
    let mut ids: Vec<&String> = fold.train_ids.iter().collect();
    ids.extend(&fold.val_ids);
    ids.extend(&fold.test_ids);
    let mut records = Vec::with_capacity(ids.len());
    for id in &ids {
        let &i = index
            .get(id.as_str())
            .ok_or_else(|| Error::NotFound(format!("fold id '{id}' not in the cohort")))?;
        let mut r = cohort.records[i].clone();
        r.label = None;
        records.push(r);
    }
    let mut work = Cohort::new(cohort.schema.clone(), records, cohort.provenance.clone())?;
    let schema = work.schema.clone();

    let norm = if schema.continuous_features.is_empty() {
        None
    } else {
        Some(normalize_continuous(&mut work, &fold.train_ids)?)
    };
    let mut warnings = norm.as_ref().map(|n| n.warnings.clone()).unwrap_or_default();
    if schema.has_timeseries() {
        let n_train = fold.train_ids.len();
        let means = measured_means(&schema, &work.records[..n_train].iter().collect::<Vec<_>>());
        for r in work.records.iter_mut() {
            *r = interpolate_timeseries(r, &schema, &means, &mut warnings);
        }
    }

    let split_of: HashMap<&str, Split> = fold
        .train_ids
        .iter()
        .map(|id| (id.as_str(), Split::Train))
        .chain(fold.val_ids.iter().map(|id| (id.as_str(), Split::Val)))
        .chain(fold.test_ids.iter().map(|id| (id.as_str(), Split::Test)))
        .collect();
    let pos: HashMap<&str, usize> = work
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();

    let partition = partition_subgraphs(fold, options.group_size, seed)?;
    let mut graphs = Vec::with_capacity(partition.groups.len());
    for group in &partition.groups {
        let members: Vec<usize> = group.iter().map(|id| pos[id.as_str()]).collect();
        let recs: Vec<&PatientRecord> = members.iter().map(|&i| &work.records[i]).collect();
        let sim = similarity(&schema, &recs, norm.as_ref())?;
        let k = options.k.min(group.len().saturating_sub(1));
        let graph = knn_graph(&sim, k, group)?;
        let batch = NodeBatch::from_records(layout, &recs, GraphStructure::from_graph(&graph))?;
        graphs.push(FoldGraph {
            split: group.iter().map(|id| split_of[id.as_str()]).collect(),
            members,
            graph,
            batch,
        });
    }

    Ok(FoldFeatures {
        schema,
        layout: layout.clone(),
        fold: fold.clone(),
        records: work.records,
        norm,
        graphs,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{make_folds, synthesize_cohort, FoldScheme, Preset, SynthKnobs};

    fn knobs(preset: Preset) -> SynthKnobs {
        let mut k = SynthKnobs::for_preset(preset);
        k.series_length = 8;
        k
    }

    #[test]
    fn prepared_fold_is_label_free_and_covers_every_id() {
        for preset in [Preset::Static, Preset::Timeseries] {
            let cohort = synthesize_cohort(3, 60, &knobs(preset)).unwrap();
            let plan = make_folds(&cohort.ids(), &FoldScheme::Kfold { k: 5 }, 1).unwrap();
            let layout = FeatureLayout::new(&cohort.schema, false);
            let opts = GraphOptions { k: 5, group_size: 25 };
            let f = prepare_fold(&cohort, &plan.folds[0], &layout, opts, 2).unwrap();
            assert!(f.records.iter().all(|r| r.label.is_none()));
            assert!(f.records.iter().all(PatientRecord::is_interpolated));
            let mut seen: Vec<usize> = f.graphs.iter().flat_map(|g| g.members.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..60).collect::<Vec<_>>());
            for g in &f.graphs {
                assert_eq!(g.batch.n, g.members.len());
                assert!(g.split.contains(&Split::Train));
            }
        }
    }

    #[test]
    fn normalization_reads_only_training_records() {
        let cohort = synthesize_cohort(4, 40, &knobs(Preset::Static)).unwrap();
        let plan = make_folds(&cohort.ids(), &FoldScheme::Kfold { k: 4 }, 1).unwrap();
        let fold = &plan.folds[0];
        let layout = FeatureLayout::new(&cohort.schema, false);
        let base = prepare_fold(&cohort, fold, &layout, GraphOptions::default(), 1).unwrap();
        let mut poked = cohort.clone();
        let test: HashSet<&str> = fold.test_ids.iter().map(String::as_str).collect();
        for r in poked.records.iter_mut().filter(|r| test.contains(r.id.as_str())) {
            r.continuous[0] = 1e6;
        }
        let other = prepare_fold(&poked, fold, &layout, GraphOptions::default(), 1).unwrap();
        assert_eq!(base.norm, other.norm);
    }
}
