//! Per-class weighted directed graphs over embedding vectors.
//!
//! Two constructions are supported. The threshold construction inverts the
//! pairwise Euclidean distances, turns each row into a softmax distribution
//! and keeps edges whose weight reaches `eta`. The k-nearest-neighbor
//! construction keeps each node's `k` closest neighbors and softmaxes the
//! inverse distances over just those. Rows are the only place where the
//! construction is asymmetric, which is what makes the graph directed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_io::EmbeddingSet;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Row-major dense square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("matrix is not square".into()));
        }
        Ok(SquareMatrix {
            n,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Weighted directed graph over the items of one class.
///
/// Node ordinals index into `node_ids`, which holds the corresponding
/// [`EmbeddingSet`] ids. Edges are kept sorted by `(source, target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGraph {
    class_label: usize,
    node_ids: Vec<usize>,
    edges: Vec<Edge>,
    out_offsets: Vec<usize>,
    in_adjacency: Vec<Vec<(usize, f64)>>,
}

impl ClassGraph {
    pub fn new(class_label: usize, node_ids: Vec<usize>, mut edges: Vec<Edge>) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::GraphTooSmall(0));
        }
        for e in &edges {
            if e.source >= n || e.target >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge {}→{} out of range for {n} nodes",
                    e.source, e.target
                )));
            }
            if e.source == e.target {
                return Err(Error::InvalidGraph(format!(
                    "self-edge on node {}",
                    e.source
                )));
            }
            if !(e.weight.is_finite() && e.weight > 0.0 && e.weight <= 1.0) {
                return Err(Error::InvalidGraph(format!(
                    "edge {}→{} has weight {} outside (0, 1]",
                    e.source, e.target, e.weight
                )));
            }
        }
        edges.sort_by_key(|e| (e.source, e.target));
        if edges
            .windows(2)
            .any(|w| (w[0].source, w[0].target) == (w[1].source, w[1].target))
        {
            return Err(Error::InvalidGraph("duplicate edge".into()));
        }

        let mut out_offsets = vec![0; n + 1];
        for e in &edges {
            out_offsets[e.source + 1] += 1;
        }
        for i in 0..n {
            out_offsets[i + 1] += out_offsets[i];
        }
        let mut in_adjacency = vec![Vec::new(); n];
        for e in &edges {
            in_adjacency[e.target].push((e.source, e.weight));
        }

        Ok(ClassGraph {
            class_label,
            node_ids,
            edges,
            out_offsets,
            in_adjacency,
        })
    }

    pub fn class_label(&self) -> usize {
        self.class_label
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn out_edges(&self, node: usize) -> &[Edge] {
        &self.edges[self.out_offsets[node]..self.out_offsets[node + 1]]
    }

    /// `(source, weight)` pairs of the edges entering `node`, by source.
    pub fn in_edges(&self, node: usize) -> &[(usize, f64)] {
        &self.in_adjacency[node]
    }

    pub fn out_weight(&self, node: usize) -> f64 {
        self.out_edges(node).iter().map(|e| e.weight).sum()
    }

    /// Writes the debugging dump: a `class n_nodes n_edges` header line and
    /// then `src dst weight` per edge with 17 significant digits.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "{} {} {}\n",
            self.class_label,
            self.num_nodes(),
            self.num_edges()
        );
        for e in &self.edges {
            let _ = writeln!(out, "{} {} {}", e.source, e.target, format_sig17(e.weight));
        }
        out
    }

    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }
}

fn format_sig17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Graph construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GraphConfig {
    Threshold {
        eta: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Knn {
        k: usize,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl GraphConfig {
    pub fn threshold(eta: f64) -> Self {
        GraphConfig::Threshold {
            eta,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn knn(k: usize) -> Self {
        GraphConfig::Knn {
            k,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig::threshold(0.001)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Dense `1 / (‖v_i − v_j‖ + epsilon)` matrix over the items of one class.
/// Diagonal entries are 0 and are never read downstream.
pub fn pairwise_inverse_distances(
    set: &EmbeddingSet,
    class_label: usize,
    epsilon: f64,
) -> Result<SquareMatrix> {
    let ids = set.class_ids(class_label);
    if ids.len() < 2 {
        return Err(Error::ClassTooSmall {
            class: class_label,
            found: ids.len(),
            required: 2,
        });
    }
    let n = ids.len();
    let mut out = SquareMatrix::zeros(n);
    out.data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let vi = set.vector(ids[i]);
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = 1.0 / (euclidean(vi, set.vector(ids[j])) + epsilon);
            }
        }
    });
    Ok(out)
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Replaces every row by the softmax over its off-diagonal entries. The
/// diagonal is set to 0.
pub fn softmax_row_weights(inv_dist: &SquareMatrix) -> Result<SquareMatrix> {
    let n = inv_dist.n();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least a 2×2 matrix, got {n}×{n}"
        )));
    }
    let mut out = SquareMatrix::zeros(n);
    out.data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let mut off: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| inv_dist.get(i, j))
            .collect();
        softmax_in_place(&mut off);
        let mut it = off.into_iter();
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = if j == i {
                0.0
            } else {
                it.next().unwrap_or(0.0)
            };
        }
    });
    Ok(out)
}

/// Keeps every off-diagonal entry with weight `>= eta`.
pub fn threshold_graph(
    weights: &SquareMatrix,
    class_label: usize,
    node_ids: Vec<usize>,
    eta: f64,
) -> Result<ClassGraph> {
    let n = weights.n();
    if node_ids.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} node ids for a {n}×{n} weight matrix",
            node_ids.len()
        )));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for (j, &w) in weights.row(i).iter().enumerate() {
            if j != i && w >= eta && w > 0.0 {
                edges.push(Edge {
                    source: i,
                    target: j,
                    weight: w,
                });
            }
        }
    }
    ClassGraph::new(class_label, node_ids, edges)
}

/// Each node links to its `k` nearest neighbors (ties to the smaller
/// ordinal), weighted by the softmax of inverse distances over those `k`.
/// Neighbors whose weight underflows to 0 are dropped, as in [`threshold_graph`].
pub fn knn_graph(
    set: &EmbeddingSet,
    class_label: usize,
    k: usize,
    epsilon: f64,
) -> Result<ClassGraph> {
    let ids = set.class_ids(class_label);
    let n = ids.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in [1, {n}) for class {class_label} of size {n}"
        )));
    }
    let rows: Vec<Vec<Edge>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let vi = set.vector(ids[i]);
            let mut neighbors: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (euclidean(vi, set.vector(ids[j])), j))
                .collect();
            neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            neighbors.truncate(k);
            neighbors.sort_by_key(|&(_, j)| j);
            let mut weights: Vec<f64> =
                neighbors.iter().map(|(d, _)| 1.0 / (d + epsilon)).collect();
            softmax_in_place(&mut weights);
            // Near-duplicates can push the rest of the row to exactly 0.
            neighbors
                .iter()
                .zip(weights)
                .filter(|&(_, weight)| weight > 0.0)
                .map(|(&(_, j), weight)| Edge {
                    source: i,
                    target: j,
                    weight,
                })
                .collect()
        })
        .collect();
    ClassGraph::new(class_label, ids, rows.into_iter().flatten().collect())
}

/// Builds the graph for one class according to `config`.
pub fn build_class_graph(
    set: &EmbeddingSet,
    class_label: usize,
    config: &GraphConfig,
) -> Result<ClassGraph> {
    match *config {
        GraphConfig::Threshold { eta, epsilon } => {
            if !(eta >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "eta must be ≥ 0, got {eta}"
                )));
            }
            let inv = pairwise_inverse_distances(set, class_label, epsilon)?;
            let weights = softmax_row_weights(&inv)?;
            threshold_graph(&weights, class_label, set.class_ids(class_label), eta)
        }
        GraphConfig::Knn { k, epsilon } => knn_graph(set, class_label, k, epsilon),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_io::{generate_fixture, FixtureSpec};

    fn line_set(points: &[f64]) -> EmbeddingSet {
        EmbeddingSet::from_records(1, 1, points.iter().map(|&x| (0, vec![x]))).unwrap()
    }

    fn fixture(count: usize, seed: u64) -> EmbeddingSet {
        generate_fixture(&FixtureSpec {
            seed,
            num_classes: 2,
            clusters_per_class: 2,
            dim: 5,
            count_per_class: count,
            separation: 4.0,
            noise_sigma: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn inverse_distance_of_two_points() {
        let m = pairwise_inverse_distances(&line_set(&[0.0, 2.0]), 0, 0.0).unwrap();
        assert_eq!(m.get(0, 1), 0.5);
        assert_eq!(m.get(1, 0), 0.5);
    }

    #[test]
    fn duplicate_points_stay_finite() {
        let m = pairwise_inverse_distances(&line_set(&[3.0, 3.0]), 0, 1e-12).unwrap();
        assert_eq!(m.get(0, 1), 1e12);
    }

    #[test]
    fn inverse_distances_match_scalar_loop() {
        let points = [0.0, 1.0, 3.0];
        let m = pairwise_inverse_distances(&line_set(&points), 0, 0.0).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 2), 1.0 / 3.0);
        assert_eq!(m.get(1, 2), 0.5);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let oracle = 1.0 / (points[i] - points[j]).abs();
                    assert_eq!(m.get(i, j), oracle);
                }
            }
        }
    }

    #[test]
    fn class_with_one_item_is_rejected() {
        assert!(matches!(
            pairwise_inverse_distances(&line_set(&[1.0]), 0, 1e-12),
            Err(Error::ClassTooSmall { .. })
        ));
    }

    #[test]
    fn softmax_rows() {
        let two = SquareMatrix::from_rows(vec![vec![0.0, 0.3], vec![0.7, 0.0]]).unwrap();
        let w = softmax_row_weights(&two).unwrap();
        assert_eq!(w.get(0, 1), 1.0);
        assert_eq!(w.get(1, 0), 1.0);

        let mut equal = SquareMatrix::zeros(5);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    equal.set(i, j, 0.8);
                }
            }
        }
        let w = softmax_row_weights(&equal).unwrap();
        for j in 1..5 {
            assert!((w.get(0, j) - 0.25).abs() < 1e-15);
        }

        let row = SquareMatrix::from_rows(vec![
            vec![0.0, 1.0, 0.5, 0.2],
            vec![1.0, 0.0, 1.0, 1.0],
            vec![0.5, 1.0, 0.0, 1.0],
            vec![0.2, 1.0, 1.0, 0.0],
        ])
        .unwrap();
        let w = softmax_row_weights(&row).unwrap();
        let z: f64 = [1.0f64, 0.5, 0.2].iter().map(|x| x.exp()).sum();
        let oracle = [1.0f64.exp() / z, 0.5f64.exp() / z, 0.2f64.exp() / z];
        for (k, expected) in [0.4864, 0.2950, 0.2186].iter().enumerate() {
            assert!((w.get(0, k + 1) - expected).abs() < 1e-3);
            assert!((w.get(0, k + 1) - oracle[k]).abs() < 1e-15);
        }
        assert!(softmax_row_weights(&SquareMatrix::zeros(1)).is_err());
    }

    #[test]
    fn rows_are_stochastic() {
        let set = fixture(40, 9);
        let w = softmax_row_weights(&pairwise_inverse_distances(&set, 1, DEFAULT_EPSILON).unwrap())
            .unwrap();
        for i in 0..w.n() {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_extremes() {
        let set = fixture(12, 2);
        let ids = set.class_ids(0);
        let w = softmax_row_weights(&pairwise_inverse_distances(&set, 0, DEFAULT_EPSILON).unwrap())
            .unwrap();
        let full = threshold_graph(&w, 0, ids.clone(), 0.0).unwrap();
        assert_eq!(full.num_edges(), 12 * 11);
        let none = threshold_graph(&w, 0, ids, 1.5).unwrap();
        assert_eq!(none.num_edges(), 0);
        assert_eq!(none.num_nodes(), 12);
    }

    #[test]
    fn threshold_matches_brute_force_filter() {
        let set = fixture(50, 17);
        let g = build_class_graph(&set, 0, &GraphConfig::threshold(0.004)).unwrap();

        // Independent scalar loop: distances, softmax, filter.
        let ids = set.class_ids(0);
        let mut count = 0;
        for &a in &ids {
            let inv: Vec<f64> = ids
                .iter()
                .filter(|&&b| b != a)
                .map(|&b| {
                    let d: f64 = set
                        .vector(a)
                        .iter()
                        .zip(set.vector(b))
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    1.0 / (d.sqrt() + 1e-12)
                })
                .collect();
            let z: f64 = inv.iter().map(|v| v.exp()).sum();
            count += inv.iter().filter(|v| v.exp() / z >= 0.004).count();
        }
        assert_eq!(g.num_edges(), count);
        assert!(count > 0);
    }

    #[test]
    fn knn_on_a_line() {
        let g = knn_graph(&line_set(&[0.0, 1.0, 2.0, 10.0]), 0, 1, DEFAULT_EPSILON).unwrap();
        let pairs: Vec<(usize, usize, f64)> = g
            .edges()
            .iter()
            .map(|e| (e.source, e.target, e.weight))
            .collect();
        assert_eq!(
            pairs,
            vec![(0, 1, 1.0), (1, 0, 1.0), (2, 1, 1.0), (3, 2, 1.0)]
        );
    }

    #[test]
    fn knn_out_degree_is_k() {
        let set = fixture(100, 4);
        let g = knn_graph(&set, 1, 10, DEFAULT_EPSILON).unwrap();
        for i in 0..g.num_nodes() {
            assert_eq!(g.out_edges(i).len(), 10);
            assert!((g.out_weight(i) - 1.0).abs() < 1e-12);
        }
        assert!(knn_graph(&set, 1, 100, DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn full_knn_equals_zero_threshold() {
        let set = fixture(15, 8);
        let a = build_class_graph(&set, 0, &GraphConfig::knn(14)).unwrap();
        let b = build_class_graph(&set, 0, &GraphConfig::threshold(0.0)).unwrap();
        assert_eq!(a.num_edges(), b.num_edges());
        for (x, y) in a.edges().iter().zip(b.edges()) {
            assert_eq!((x.source, x.target), (y.source, y.target));
            assert!((x.weight - y.weight).abs() < 1e-12);
        }
    }

    #[test]
    fn dump_format() {
        let g = knn_graph(&line_set(&[0.0, 1.0, 3.0]), 0, 1, DEFAULT_EPSILON).unwrap();
        let dump = g.dump();
        let mut lines = dump.lines();
        assert_eq!(lines.next(), Some("0 3 3"));
        assert_eq!(lines.next(), Some("0 1 1.0000000000000000e0"));
    }

    #[test]
    fn graph_rejects_bad_edges() {
        let e = |s, t, w| Edge {
            source: s,
            target: t,
            weight: w,
        };
        assert!(ClassGraph::new(0, vec![0, 1], vec![e(0, 0, 0.5)]).is_err());
        assert!(ClassGraph::new(0, vec![0, 1], vec![e(0, 1, 1.5)]).is_err());
        assert!(ClassGraph::new(0, vec![0, 1], vec![e(0, 1, 0.0)]).is_err());
        assert!(ClassGraph::new(0, vec![0, 1], vec![e(0, 2, 0.5)]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn scaling_preserves_row_order(seed in 0u64..1000, scale in 0.1f64..10.0) {
                let set = fixture(10, seed);
                let mut scaled = set.clone();
                for item in &mut scaled.items {
                    item.vector.iter_mut().for_each(|v| *v *= scale);
                }
                let a = softmax_row_weights(&pairwise_inverse_distances(&set, 0, 0.0).unwrap()).unwrap();
                let b = softmax_row_weights(&pairwise_inverse_distances(&scaled, 0, 0.0).unwrap()).unwrap();
                for i in 0..a.n() {
                    let rank = |m: &SquareMatrix| {
                        let mut idx: Vec<usize> = (0..m.n()).filter(|&j| j != i).collect();
                        idx.sort_by(|&x, &y| m.get(i, x).total_cmp(&m.get(i, y)).then(x.cmp(&y)));
                        idx
                    };
                    prop_assert_eq!(rank(&a), rank(&b));
                }
            }

            #[test]
            fn construction_is_deterministic(seed in 0u64..1000, eta in 0.0f64..0.2) {
                let set = fixture(12, seed);
                let a = build_class_graph(&set, 1, &GraphConfig::threshold(eta)).unwrap();
                let b = build_class_graph(&set, 1, &GraphConfig::threshold(eta)).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
