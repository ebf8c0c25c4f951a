//! Patient similarities, k-NN population graphs and subgraph partitions.

mod knn;
mod partition;
mod similarity;

pub use knn::{
    knn_graph, shortest_paths, similarity_bin, top_k, Edge, PopulationGraph, DEFAULT_K, D_MAX,
    EDGE_BINS, SPD_SENTINEL,
};
pub use partition::{partition_subgraphs, SubgraphPartition, DEFAULT_GROUP_SIZE};
pub use similarity::{
    sim_cognitive, sim_demographic, sim_imaging, timeseries_descriptors, Descriptor,
    RecordDescriptors, SimilarityMatrix, StaticSimilarity, TimeseriesSimilarity, AGE_TOLERANCE,
};
