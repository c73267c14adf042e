use proptest::prelude::*;
use tenet_core::clustering::{fit_candidates, route, route_with_similarity, select_k, silhouette_score, EmbeddingMatrix};
use tenet_core::domain::{class_list, Constitution, Expert, ExpertEnsemble, Provenance};

fn ensemble(centroids: &[Vec<f64>]) -> ExpertEnsemble {
    let classes = class_list(&["a", "b"]).unwrap();
    ExpertEnsemble {
        format_version: 1,
        embedding_model_id: "m".into(),
        experts: centroids
            .iter()
            .enumerate()
            .map(|(i, c)| Expert {
                cluster_id: i,
                centroid: c.clone(),
                constitution: Constitution::empty("t", &classes),
                provenance: Provenance::default(),
            })
            .collect(),
        classes,
        config_digest: String::new(),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
    let ids = (0..rows.len()).map(|i| format!("x{i}")).collect();
    EmbeddingMatrix::new(ids, rows, "m").unwrap()
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn points(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..5).prop_flat_map(move |dim| prop::collection::vec(nonzero_vec(dim), 6..max_n))
}

proptest! {
    #[test]
    fn routing_ignores_positive_scale(
        (centroids, v) in (2usize..6).prop_flat_map(|dim| (prop::collection::vec(nonzero_vec(dim), 1..6), nonzero_vec(dim))),
        c in 1e-3f64..1e3,
    ) {
        let ens = ensemble(&centroids);
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        prop_assert_eq!(route(&v, &ens).unwrap(), route(&scaled, &ens).unwrap());
        let (_, s) = route_with_similarity(&v, &ens).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn silhouette_is_bounded(rows in points(30), k in 2usize..5, seed in any::<u64>()) {
        let n = rows.len();
        let m = matrix(rows);
        let assignments: Vec<usize> = (0..n).map(|i| (i as u64 ^ seed) as usize % k).collect();
        if let Ok(s) = silhouette_score(&m, &assignments) {
            prop_assert!((-1.0..=1.0).contains(&s), "{}", s);
        }
    }

    #[test]
    fn select_k_keeps_the_best_silhouette(rows in points(24), seed in any::<u64>()) {
        let m = matrix(rows);
        let candidates = [2, 3, 4];
        let chosen = select_k(&m, &candidates, seed).unwrap();
        for model in fit_candidates(&m, &candidates, seed).unwrap() {
            prop_assert!(chosen.silhouette >= model.silhouette);
        }
        prop_assert_eq!(chosen.assignments.len(), m.len());
        prop_assert!(chosen.assignments.values().all(|&c| c < chosen.k));
    }
}
