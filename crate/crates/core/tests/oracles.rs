use std::collections::BTreeMap;

use popgraph::autodiff::Tensor;
use popgraph::graph::{knn_graph, shortest_paths, SimilarityMatrix, D_MAX, SPD_SENTINEL};
use popgraph::metrics::{accuracy, aggregate_folds, margin_accuracy, roc_auc_binary};
use popgraph::model::ModelParams;
use popgraph::train::{adam_step, AdamState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Symmetric similarity matrix; `levels > 0` quantizes values so ties are common.
fn random_sim(n: usize, levels: u32, rng: &mut ChaCha8Rng) -> SimilarityMatrix {
    SimilarityMatrix::from_fn(n, |i, j| {
        if i == j {
            return 1.0;
        }
        let v: f64 = rng.random_range(0.0..1.0);
        if levels > 0 {
            (v * levels as f64).floor() / levels as f64
        } else {
            v
        }
    })
}

/// Full sort of each row: similarity descending, then index ascending.
fn brute_top_k(sim: &SimilarityMatrix, i: usize, k: usize) -> Vec<usize> {
    let mut js: Vec<usize> = (0..sim.n()).filter(|&j| j != i).collect();
    js.sort_by(|&a, &b| {
        sim.get(i, b)
            .partial_cmp(&sim.get(i, a))
            .unwrap()
            .then(a.cmp(&b))
    });
    js.truncate(k);
    js
}

/// Floyd–Warshall over the undirected edge set, then capped.
fn reference_spd(n: usize, edges: &[(usize, usize)]) -> Vec<u8> {
    let inf = usize::MAX / 4;
    let mut d = vec![inf; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
    }
    for &(a, b) in edges {
        d[a * n + b] = 1;
        d[b * n + a] = 1;
    }
    for m in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + m] + d[m * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d.into_iter()
        .map(|x| if x > D_MAX { SPD_SENTINEL as u8 } else { x as u8 })
        .collect()
}

#[test]
fn knn_matches_brute_force_on_100_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let n = rng.random_range(3..40);
        let k = rng.random_range(1..n.min(8));
        let levels = if case % 2 == 0 { 0 } else { 5 };
        let sim = random_sim(n, levels, &mut rng);
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let g = knn_graph(&sim, k, &ids).unwrap();
        for i in 0..n {
            let got: Vec<usize> = g.edges.iter().filter(|e| e.src == i).map(|e| e.dst).collect();
            assert_eq!(got, brute_top_k(&sim, i, k), "case {case}, node {i}");
        }
        let undirected: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(g.spd, reference_spd(n, &undirected), "case {case}");
        assert_eq!(g.in_degree.iter().sum::<usize>(), n * k);
    }
}

#[test]
fn bfs_matches_reference_on_sparse_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(1..25);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(0.12) {
                    edges.push((a, b));
                }
            }
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        assert_eq!(shortest_paths(n, &adj), reference_spd(n, &edges));
    }
}

fn pair_count_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn auc_matches_pair_counting_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = rng.random_range(2..60);
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        // coarse scores in half of the cases to exercise ties
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random_range(0.0..1.0);
                if case % 2 == 0 {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        let got = roc_auc_binary(&scores, &positive).unwrap();
        let want = pair_count_auc(&scores, &positive);
        assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
    }
}

#[test]
fn adam_first_steps_match_hand_formula() {
    let mut params = ModelParams::new();
    params.insert("encoder.w", Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
    let mut state = AdamState::new();
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    let mut w = [0.5f64, -1.0, 2.0];
    for t in 1..=3 {
        let g = [0.3 * t as f64, -0.2, 1e-3];
        let mut grads = BTreeMap::new();
        grads.insert("encoder.w".to_string(), Tensor::vector(g.to_vec()));
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        let got = params.get("encoder.w").unwrap().data();
        for i in 0..3 {
            assert!((got[i] - w[i]).abs() <= 1e-12, "step {t}: {} vs {}", got[i], w[i]);
        }
    }
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_maps(
        raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..50)
    ) {
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let mut positive: Vec<bool> = raw.iter().map(|r| r.1).collect();
        positive[0] = true;
        positive[1] = false;
        let base = roc_auc_binary(&scores, &positive).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((roc_auc_binary(&mapped, &positive).unwrap() - base).abs() <= 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc_binary(&flipped, &positive).unwrap() - (1.0 - base)).abs() <= 1e-12);
    }

    #[test]
    fn zero_margin_is_plain_accuracy(
        pairs in prop::collection::vec((0usize..6, 0usize..6), 1..80)
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let zeros = vec![0; pred.len()];
        prop_assert_eq!(
            margin_accuracy(&pred, &truth, &zeros).unwrap(),
            accuracy(&pred, &truth).unwrap()
        );
    }

    #[test]
    fn aggregate_matches_two_pass_reference(values in prop::collection::vec(-100.0f64..100.0, 1..30)) {
        let rep = aggregate_folds("m", &values).unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((rep.mean - mean).abs() <= 1e-9);
        prop_assert!((rep.std - var.sqrt()).abs() <= 1e-9);
        prop_assert_eq!(rep.n_folds, values.len());
    }

    #[test]
    fn knn_graph_invariants(n in 3usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = random_sim(n, 0, &mut rng);
        let k = 5.min(n - 1);
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let g = knn_graph(&sim, k, &ids).unwrap();
        prop_assert_eq!(g.edges.len(), n * k);
        for i in 0..n {
            prop_assert_eq!(g.spd_at(i, i), 0);
            for j in 0..n {
                prop_assert_eq!(g.spd_at(i, j), g.spd_at(j, i));
                if i != j {
                    prop_assert_eq!(g.spd_at(i, j) == 1, g.bin_at(i, j) > 0);
                }
            }
        }
        prop_assert!(g.edges.iter().all(|e| e.src != e.dst));
    }
}
