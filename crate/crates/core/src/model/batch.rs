use super::config::FeatureLayout;
use crate::autodiff::Tensor;
use crate::cohort::PatientRecord;
use crate::error::{Error, Result};
use crate::graph::PopulationGraph;

/// Structural inputs of the attention bias and degree embeddings, row-major `n×n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphStructure {
    pub n: usize,
    pub spd: Vec<usize>,
    pub bins: Vec<usize>,
    pub in_degree: Vec<usize>,
    pub out_degree: Vec<usize>,
}

impl GraphStructure {
    pub fn from_graph(g: &PopulationGraph) -> Self {
        Self {
            n: g.n(),
            spd: g.spd.iter().map(|&d| usize::from(d)).collect(),
            bins: g.edge_bins.iter().map(|&b| usize::from(b)).collect(),
            in_degree: g.in_degree.clone(),
            out_degree: g.out_degree.clone(),
        }
    }

    /// Relabels nodes so new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let pair = |m: &[usize]| {
            let mut out = vec![0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = m[perm[i] * n + perm[j]];
                }
            }
            out
        };
        Self {
            n,
            spd: pair(&self.spd),
            bins: pair(&self.bins),
            in_degree: perm.iter().map(|&p| self.in_degree[p]).collect(),
            out_degree: perm.iter().map(|&p| self.out_degree[p]).collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n;
        if self.spd.len() != n * n
            || self.bins.len() != n * n
            || self.in_degree.len() != n
            || self.out_degree.len() != n
        {
            return Err(Error::Shape(format!("graph structure tables do not match {n} nodes")));
        }
        Ok(())
    }
}

/// Model inputs for the nodes of one graph, in graph node order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeBatch {
    pub n: usize,
    /// `[slot][node]` indices; value `vocab` is the mask token.
    pub discrete: Vec<Vec<usize>>,
    /// `[N, C]`
    pub continuous: Option<Tensor>,
    /// `[N, τ, 2S]`: per hour the S values followed by the S mask columns.
    pub timeseries: Option<Tensor>,
    pub structure: GraphStructure,
}

impl NodeBatch {
    /// Unmasked inputs. Records must already be interpolated; mask columns are 0.
    pub fn from_records(
        layout: &FeatureLayout,
        records: &[&PatientRecord],
        structure: GraphStructure,
    ) -> Result<Self> {
        let n = records.len();
        if structure.n != n {
            return Err(Error::Shape(format!(
                "{n} records for a {}-node graph",
                structure.n
            )));
        }
        let discrete = layout
            .discrete
            .iter()
            .map(|slot| records.iter().map(|r| r.discrete[slot.feature]).collect())
            .collect();
        let continuous = if layout.continuous.is_empty() {
            None
        } else {
            let c = layout.continuous.len();
            let mut data = Vec::with_capacity(n * c);
            for r in records {
                data.extend(layout.continuous.iter().map(|&k| r.continuous[k]));
            }
            Some(Tensor::new(vec![n, c], data)?)
        };
        let timeseries = if layout.num_series == 0 {
            None
        } else {
            let (s, tau) = (layout.num_series, layout.series_length);
            let mut data = vec![0.0; n * tau * 2 * s];
            for (i, r) in records.iter().enumerate() {
                for h in 0..tau {
                    for f in 0..s {
                        let v = r.timeseries[f][h];
                        if !v.is_finite() {
                            return Err(Error::Config(format!(
                                "record '{}' has unfilled series cells; interpolate first",
                                r.id
                            )));
                        }
                        data[(i * tau + h) * 2 * s + f] = v;
                    }
                }
            }
            Some(Tensor::new(vec![n, tau, 2 * s], data)?)
        };
        Ok(Self {
            n,
            discrete,
            continuous,
            timeseries,
            structure,
        })
    }

    /// Same nodes relabeled so new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows = |t: &Tensor| {
            let width = t.numel() / self.n.max(1);
            let mut data = Vec::with_capacity(t.numel());
            for &p in perm {
                data.extend_from_slice(&t.data()[p * width..(p + 1) * width]);
            }
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        Self {
            n: self.n,
            discrete: self
                .discrete
                .iter()
                .map(|col| perm.iter().map(|&p| col[p]).collect())
                .collect(),
            continuous: self.continuous.as_ref().map(rows),
            timeseries: self.timeseries.as_ref().map(rows),
            structure: self.structure.permuted(perm),
        }
    }
}
