use proptest::prelude::*;

use infodist::embedding_io::EmbeddingSet;
use infodist::graph_builder::{build_class_graph, GraphConfig};

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..12, 1usize..4)
        .prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n))
}

fn set_of(points: &[Vec<f64>]) -> EmbeddingSet {
    EmbeddingSet::from_records(points[0].len(), 1, points.iter().map(|p| (0, p.clone()))).unwrap()
}

proptest! {
    #[test]
    fn full_knn_equals_zero_threshold(points in points()) {
        let set = set_of(&points);
        let a = build_class_graph(&set, 0, &GraphConfig::threshold(0.0)).unwrap();
        let b = build_class_graph(&set, 0, &GraphConfig::knn(points.len() - 1)).unwrap();
        prop_assert_eq!(a.num_edges(), b.num_edges());
        for (x, y) in a.edges().iter().zip(b.edges()) {
            prop_assert_eq!((x.source, x.target), (y.source, y.target));
            prop_assert!((x.weight - y.weight).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_stochastic_and_thresholds_nest(points in points(), eta in 0.0f64..0.5) {
        let set = set_of(&points);
        let full = build_class_graph(&set, 0, &GraphConfig::threshold(0.0)).unwrap();
        for i in 0..points.len() {
            prop_assert!((full.out_weight(i) - 1.0).abs() < 1e-12);
        }
        let cut = build_class_graph(&set, 0, &GraphConfig::threshold(eta)).unwrap();
        prop_assert!(cut.edges().iter().all(|e| e.weight >= eta));
        let kept = full.edges().iter().filter(|e| e.weight >= eta).count();
        prop_assert_eq!(cut.num_edges(), kept);
    }

    #[test]
    fn knn_rows_have_at_most_k_edges(points in points(), k in 1usize..3) {
        let set = set_of(&points);
        let g = build_class_graph(&set, 0, &GraphConfig::knn(k)).unwrap();
        for i in 0..points.len() {
            prop_assert!(g.out_edges(i).len() <= k);
            prop_assert!((g.out_weight(i) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn coincident_points_keep_knn_rows_valid() {
    let set = set_of(&[vec![0.0], vec![0.0], vec![1.0], vec![2.0]]);
    let g = build_class_graph(&set, 0, &GraphConfig::knn(2)).unwrap();
    // 1/ε dominates: node 0 sends all its mass to its duplicate.
    assert_eq!(g.out_edges(0).len(), 1);
    assert_eq!(g.out_edges(0)[0].target, 1);
    assert_eq!(g.out_edges(3).len(), 2);
}
