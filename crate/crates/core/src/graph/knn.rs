use std::collections::VecDeque;

use serde::Serialize;

use super::similarity::SimilarityMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;
/// Largest shortest-path distance kept; farther and unreachable pairs share `D_MAX + 1`.
pub const D_MAX: usize = 5;
pub const SPD_SENTINEL: usize = D_MAX + 1;
pub const EDGE_BINS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub similarity: f64,
    pub bin: u8,
}

/// Directed k-NN graph plus the structural tables the attention bias reads.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationGraph {
    pub node_ids: Vec<String>,
    pub k: usize,
    /// Sorted by source, then by decreasing similarity.
    pub edges: Vec<Edge>,
    pub in_degree: Vec<usize>,
    pub out_degree: Vec<usize>,
    /// Row-major `n×n` hop distances over the undirected support.
    pub spd: Vec<u8>,
    /// Row-major `n×n` similarity bins, `0` where neither direction has an edge.
    pub edge_bins: Vec<u8>,
}

/// `1 + min(7, floor(8 s))`, so bins `1..=8` cover `[0, 1]`.
pub fn similarity_bin(s: f64) -> u8 {
    let b = (s.clamp(0.0, 1.0) * EDGE_BINS as f64).floor() as usize;
    1 + b.min(EDGE_BINS - 1) as u8
}

/// The `k` most similar other nodes of `i`, ties going to the lower index.
pub fn top_k(sim: &SimilarityMatrix, i: usize, k: usize) -> Vec<usize> {
    let row = sim.row(i);
    let mut others: Vec<usize> = (0..sim.n()).filter(|&j| j != i).collect();
    let by_rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < others.len() {
        others.select_nth_unstable_by(k, by_rank);
        others.truncate(k);
    }
    others.sort_by(by_rank);
    others
}

/// Breadth-first hop distances from every node, capped at [`D_MAX`].
pub fn shortest_paths(n: usize, neighbours: &[Vec<usize>]) -> Vec<u8> {
    let mut spd = vec![SPD_SENTINEL as u8; n * n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        let row = &mut spd[s * n..(s + 1) * n];
        row[s] = 0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let du = row[u] as usize;
            if du == D_MAX {
                continue;
            }
            for &v in &neighbours[u] {
                if row[v] as usize == SPD_SENTINEL {
                    row[v] = (du + 1) as u8;
                    queue.push_back(v);
                }
            }
        }
    }
    spd
}

pub fn knn_graph(sim: &SimilarityMatrix, k: usize, node_ids: &[String]) -> Result<PopulationGraph> {
    let n = sim.n();
    if node_ids.len() != n {
        return Err(Error::Shape(format!(
            "{} node ids for a {n}-node similarity matrix",
            node_ids.len()
        )));
    }
    if n < 2 {
        return Err(Error::Config(format!("k-NN graph needs at least 2 nodes, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k = {k} must lie in [1, {})", n)));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut in_degree = vec![0; n];
    let mut undirected = vec![Vec::new(); n];
    let mut edge_bins = vec![0u8; n * n];
    for i in 0..n {
        for j in top_k(sim, i, k) {
            let s = sim.get(i, j);
            let bin = similarity_bin(s);
            edges.push(Edge {
                src: i,
                dst: j,
                similarity: s,
                bin,
            });
            in_degree[j] += 1;
            if edge_bins[i * n + j] == 0 {
                undirected[i].push(j);
                undirected[j].push(i);
            }
            edge_bins[i * n + j] = bin;
            edge_bins[j * n + i] = similarity_bin(sim.get(j, i));
        }
    }
    for list in undirected.iter_mut() {
        list.sort_unstable();
    }
    let spd = shortest_paths(n, &undirected);
    Ok(PopulationGraph {
        node_ids: node_ids.to_vec(),
        k,
        edges,
        in_degree,
        out_degree: vec![k; n],
        spd,
        edge_bins,
    })
}

impl PopulationGraph {
    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn spd_at(&self, i: usize, j: usize) -> usize {
        self.spd[i * self.n() + j] as usize
    }

    pub fn bin_at(&self, i: usize, j: usize) -> usize {
        self.edge_bins[i * self.n() + j] as usize
    }

    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.src == i).map(|e| e.dst).collect()
    }

    /// Debug export: node ids, edge list, degrees and the spd matrix.
    pub fn to_json(&self) -> serde_json::Value {
        let n = self.n();
        let spd: Vec<&[u8]> = (0..n).map(|i| &self.spd[i * n..(i + 1) * n]).collect();
        serde_json::json!({
            "node_ids": self.node_ids,
            "k": self.k,
            "edges": self.edges,
            "in_degree": self.in_degree,
            "out_degree": self.out_degree,
            "spd": spd,
        })
    }
}
