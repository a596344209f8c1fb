//! Social network substrate: clustered random digraphs, row normalization,
//! reachability of stubborn-free nodes, and the immutable [`SocialNetwork`].

mod io;
mod network;

pub use io::{read_network, write_network};
pub use network::SocialNetwork;

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Parameters of the clustered random digraph generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModularGraphSpec {
    pub n: usize,
    pub n_clusters: usize,
    /// Target edge count is `round(density * n^2)`.
    pub density: f64,
    /// Probability that a sampled edge joins two nodes of the same cluster.
    pub gamma: f64,
}

/// Unweighted directed graph with cluster labels. `has_edge(v, w)` means
/// node `v` listens to node `w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModularGraph {
    n: usize,
    edges: Vec<bool>,
    clusters: Vec<usize>,
}

impl ModularGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, v: usize, w: usize) -> bool {
        self.edges[v * self.n + w]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    pub fn clusters(&self) -> &[usize] {
        &self.clusters
    }

    pub fn intra_cluster_edges(&self) -> usize {
        self.count_edges(|v, w| self.clusters[v] == self.clusters[w])
    }

    pub fn inter_cluster_edges(&self) -> usize {
        self.count_edges(|v, w| self.clusters[v] != self.clusters[w])
    }

    fn count_edges(&self, keep: impl Fn(usize, usize) -> bool) -> usize {
        let mut count = 0;
        for v in 0..self.n {
            for w in 0..self.n {
                if self.has_edge(v, w) && keep(v, w) {
                    count += 1;
                }
            }
        }
        count
    }

    /// 0/1 weight matrix.
    pub fn adjacency(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |v, w| if self.has_edge(v, w) { 1.0 } else { 0.0 })
    }
}

/// Equal-sized contiguous clusters; the first `n % k` clusters get one extra node.
pub fn cluster_labels(n: usize, n_clusters: usize) -> Vec<usize> {
    let base = n / n_clusters;
    let extra = n % n_clusters;
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_clusters {
        let size = base + usize::from(c < extra);
        labels.extend(std::iter::repeat_n(c, size));
    }
    labels
}

pub fn generate_modular_graph(spec: &ModularGraphSpec, seed: u64) -> Result<ModularGraph> {
    let ModularGraphSpec { n, n_clusters, density, gamma } = *spec;
    if n < 3 {
        return Err(invalid(format!("n must be at least 3, got {n}")));
    }
    if n_clusters == 0 || n_clusters > n {
        return Err(invalid(format!("n_clusters must lie in 1..={n}, got {n_clusters}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(invalid(format!("density must lie in (0, 1], got {density}")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }

    let clusters = cluster_labels(n, n_clusters);
    let total_cap = n * (n - 1);
    let target = (density * (n * n) as f64).round() as usize;
    let mut edges = vec![false; n * n];

    if target >= total_cap {
        for v in 0..n {
            for w in 0..n {
                edges[v * n + w] = v != w;
            }
        }
        return Ok(ModularGraph { n, edges, clusters });
    }

    let mut intra_pairs = Vec::new();
    let mut inter_pairs = Vec::new();
    for v in 0..n {
        for w in 0..n {
            if v == w {
                continue;
            }
            if clusters[v] == clusters[w] {
                intra_pairs.push((v, w));
            } else {
                inter_pairs.push((v, w));
            }
        }
    }
    let intra_cap = intra_pairs.len();
    let inter_cap = inter_pairs.len();
    if intra_cap > 0 && inter_cap > 0 {
        let m = target as f64;
        if gamma * m > intra_cap as f64 {
            return Err(Error::CapacityExceeded(format!(
                "expected {:.1} intra-cluster edges but only {intra_cap} pairs exist",
                gamma * m
            )));
        }
        if (1.0 - gamma) * m > inter_cap as f64 {
            return Err(Error::CapacityExceeded(format!(
                "expected {:.1} inter-cluster edges but only {inter_cap} pairs exist",
                (1.0 - gamma) * m
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n_intra = 0usize;
    let mut n_inter = 0usize;
    for _ in 0..target {
        let want_intra = rng.random::<f64>() < gamma;
        let intra = if want_intra { n_intra < intra_cap } else { n_inter >= inter_cap };
        if intra {
            n_intra += 1;
        } else {
            n_inter += 1;
        }
    }
    for (pairs, count) in [(&intra_pairs, n_intra), (&inter_pairs, n_inter)] {
        for i in index::sample(&mut rng, pairs.len(), count) {
            let (v, w) = pairs[i];
            edges[v * n + w] = true;
        }
    }
    Ok(ModularGraph { n, edges, clusters })
}

/// Divides each row by its sum. All-zero rows become a unit self-loop.
pub fn row_normalize(adjacency: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = adjacency.clone();
    for i in 0..p.nrows() {
        let sum: f64 = p.row(i).iter().sum();
        if sum > 0.0 {
            p.row_mut(i).unscale_mut(sum);
        } else {
            p.row_mut(i).fill(0.0);
            p[(i, i)] = 1.0;
        }
    }
    p
}

/// True iff every node has a directed path (edges with `P[v][w] > 0`) to a
/// node whose `lambda` is below one.
pub fn check_influence_reachability(p: &DMatrix<f64>, lambda: &DVector<f64>) -> bool {
    let n = lambda.len();
    let mut reached = vec![false; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        if lambda[s] < 1.0 {
            reached[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(w) = queue.pop_front() {
        for v in 0..n {
            if !reached[v] && p[(v, w)] > 0.0 {
                reached[v] = true;
                queue.push_back(v);
            }
        }
    }
    reached.into_iter().all(|r| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: usize, k: usize, density: f64, gamma: f64) -> ModularGraphSpec {
        ModularGraphSpec { n, n_clusters: k, density, gamma }
    }

    #[test]
    fn reference_sized_graph_has_about_500_edges() {
        let g = generate_modular_graph(&spec(100, 7, 0.05, 0.9), 7).unwrap();
        assert_eq!(g.edge_count(), 500);
        let mut labels = g.clusters().to_vec();
        labels.dedup();
        assert_eq!(labels.len(), 7);
        // intra count is Binomial(500, 0.9)
        let intra = g.intra_cluster_edges() as f64;
        assert!((intra - 450.0).abs() < 5.0 * (500.0f64 * 0.09).sqrt());
    }

    #[test]
    fn saturated_density_gives_complete_digraph() {
        let g = generate_modular_graph(&spec(3, 1, 1.0, 0.3), 1).unwrap();
        assert_eq!(g.edge_count(), 6);
        for v in 0..3 {
            assert!(!g.has_edge(v, v));
        }
    }

    #[test]
    fn zero_gamma_places_every_edge_between_clusters() {
        let g = generate_modular_graph(&spec(60, 3, 0.1, 0.0), 11).unwrap();
        let labels = g.clusters();
        let mut intra = 0;
        for v in 0..60 {
            for w in 0..60 {
                if g.has_edge(v, w) && labels[v] == labels[w] {
                    intra += 1;
                }
            }
        }
        assert_eq!(intra, 0);
        assert_eq!(g.edge_count(), 360);
    }

    #[test]
    fn unit_gamma_places_every_edge_inside_clusters() {
        let g = generate_modular_graph(&spec(60, 3, 0.1, 1.0), 5).unwrap();
        assert_eq!(g.inter_cluster_edges(), 0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_modular_graph(&spec(10, 11, 0.1, 0.5), 0).is_err());
        assert!(generate_modular_graph(&spec(2, 1, 0.1, 0.5), 0).is_err());
        assert!(generate_modular_graph(&spec(10, 2, 0.0, 0.5), 0).is_err());
        // 10 singleton clusters have no intra-cluster pairs at all, which is
        // fine, but 5 clusters of 2 hold only 10 intra pairs.
        let err = generate_modular_graph(&spec(10, 5, 0.5, 0.9), 0).unwrap_err();
        assert!(matches!(err, Error::CapacityExceeded(_)));
    }

    #[test]
    fn cluster_sizes_spread_remainder() {
        let labels = cluster_labels(10, 3);
        let sizes: Vec<usize> = (0..3).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn normalize_examples() {
        let p = row_normalize(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let p = row_normalize(&DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 0.0, 0.0]));
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]));
    }

    #[test]
    fn reachability_examples() {
        let p = row_normalize(&DMatrix::from_element(3, 3, 1.0));
        assert!(check_influence_reachability(&p, &DVector::from_element(3, 0.9)));
        assert!(!check_influence_reachability(&p, &DVector::from_element(3, 1.0)));

        // node 0 listens to 1, 1 listens to 2, node 2 has a self-loop
        let chain = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let lambda = DVector::from_vec(vec![1.0, 1.0, 0.5]);
        assert!(check_influence_reachability(&chain, &lambda));
        let reversed = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(!check_influence_reachability(&reversed, &lambda));
    }

    fn closure_oracle(p: &DMatrix<f64>, lambda: &DVector<f64>) -> bool {
        let n = lambda.len();
        let mut reach = DMatrix::from_fn(n, n, |v, w| v == w || p[(v, w)] > 0.0);
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[(i, k)] && reach[(k, j)] {
                        reach[(i, j)] = true;
                    }
                }
            }
        }
        (0..n).all(|v| (0..n).any(|s| reach[(v, s)] && lambda[s] < 1.0))
    }

    proptest! {
        #[test]
        fn generated_rows_are_stochastic(seed in any::<u64>(), gamma in 0.0..=1.0f64) {
            let g = generate_modular_graph(&spec(40, 4, 0.08, gamma), seed).unwrap();
            let p = row_normalize(&g.adjacency());
            for i in 0..40 {
                let s: f64 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn generation_is_deterministic(seed in any::<u64>()) {
            let a = generate_modular_graph(&spec(30, 3, 0.1, 0.7), seed).unwrap();
            let b = generate_modular_graph(&spec(30, 3, 0.1, 0.7), seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn normalized_random_matrix_rows_sum_to_one(
            entries in proptest::collection::vec(prop_oneof![Just(0.0), 0.0..10.0f64], 25)
        ) {
            let p = row_normalize(&DMatrix::from_row_slice(5, 5, &entries));
            for i in 0..5 {
                let s: f64 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(p.row(i).iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn reachability_matches_transitive_closure(
            n in 1usize..=5,
            bits in proptest::collection::vec(any::<bool>(), 25),
            stubborn in proptest::collection::vec(any::<bool>(), 5),
        ) {
            let p = DMatrix::from_fn(n, n, |v, w| if bits[v * 5 + w] { 1.0 } else { 0.0 });
            let lambda = DVector::from_fn(n, |v, _| if stubborn[v] { 1.0 } else { 0.5 });
            prop_assert_eq!(check_influence_reachability(&p, &lambda), closure_oracle(&p, &lambda));
        }
    }
}
