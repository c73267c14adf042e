use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexMap;
use proptest::prelude::*;
use rand::Rng;
use tenet_core::clustering::ClusterModel;
use tenet_core::data::{id_set, partition_by_cluster, split, Dataset, SplitSpec, Task};
use tenet_core::domain::{class_list, Example};
use tenet_core::rng;

fn dataset(n: usize, n_classes: usize) -> Dataset {
    let names: Vec<String> = (0..n_classes).map(|i| format!("c{i}")).collect();
    let task = Task {
        name: "p".into(),
        classes: class_list(&names).unwrap(),
        initial_prompt: "q".into(),
    };
    let examples = (0..n)
        .map(|i| Example::text(format!("e{i:03}"), format!("text {i}"), Some(i * 7 % n_classes)))
        .collect();
    Dataset::new(&task, examples)
}

fn label_counts(parts: &[&Dataset]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for d in parts {
        for e in &d.examples {
            *m.entry(e.label.unwrap()).or_default() += 1;
        }
    }
    m
}

fn model_with(centroids: Vec<Vec<f64>>) -> ClusterModel {
    ClusterModel {
        k: centroids.len(),
        centroids,
        assignments: IndexMap::new(),
        silhouette: 0.0,
        inertia: 0.0,
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn hundred_examples_reassemble() {
    let d = dataset(100, 3);
    let s = split(&d, &SplitSpec::default()).unwrap();
    let mut ids = id_set(&s.train);
    ids.extend(id_set(&s.val));
    ids.extend(id_set(&s.test));
    assert_eq!(ids, id_set(&d));
}

#[test]
fn twenty_random_embeddings_route_to_brute_force_argmax() {
    let mut r = rng::seeded(129);
    let d = dataset(20, 2);
    let mut draw = || -> Vec<f64> { (0..6).map(|_| r.random_range(-1.0..1.0)).collect() };
    let centroids: Vec<Vec<f64>> = (0..3).map(|_| draw()).collect();
    let emb: HashMap<String, Vec<f64>> = d.examples.iter().map(|e| (e.id.clone(), draw())).collect();
    let parts = partition_by_cluster(&d, &model_with(centroids.clone()), &emb).unwrap();
    for (c, part) in parts.iter().enumerate() {
        for e in &part.examples {
            let sims: Vec<f64> = centroids.iter().map(|z| cos(&emb[&e.id], z)).collect();
            let best = (0..3).fold(0, |b, i| if sims[i] > sims[b] { i } else { b });
            assert_eq!(best, c, "{} sims {sims:?}", e.id);
        }
    }
}

proptest! {
    #[test]
    fn split_is_a_partition(
        n in 3usize..200,
        n_classes in 1usize..5,
        val in 0.05f64..0.4,
        test in 0.05f64..0.4,
        seed in any::<u64>(),
    ) {
        let d = dataset(n, n_classes);
        let spec = SplitSpec { train_fraction: 1.0 - val - test, val_fraction: val, test_fraction: test, seed, canonical: false };
        let Ok(s) = split(&d, &spec) else { return Ok(()); };
        let (a, b, c) = (id_set(&s.train), id_set(&s.val), id_set(&s.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        let union: BTreeSet<String> = a.union(&b).chain(c.iter()).cloned().collect();
        prop_assert_eq!(union, id_set(&d));
        prop_assert_eq!(label_counts(&[&s.train, &s.val, &s.test]), label_counts(&[&d]));
        for part in [&s.train, &s.val, &s.test] {
            prop_assert_eq!(&part.classes, &d.classes);
        }
    }

    #[test]
    fn partition_covers_input_and_ignores_scale(
        n in 1usize..40,
        k in 1usize..5,
        dim in 2usize..6,
        seed in any::<u64>(),
    ) {
        let mut r = rng::seeded(seed);
        let d = dataset(n, 2);
        let draw = |r: &mut rng::RunRng| -> Vec<f64> { (0..dim).map(|_| r.random_range(-1.0..1.0)).collect() };
        let model = model_with((0..k).map(|_| draw(&mut r)).collect());
        let emb: HashMap<String, Vec<f64>> = d.examples.iter().map(|e| (e.id.clone(), draw(&mut r))).collect();
        let scaled: HashMap<String, Vec<f64>> = emb
            .iter()
            .map(|(id, v)| {
                let c = r.random_range(0.01..100.0);
                (id.clone(), v.iter().map(|x| c * x).collect())
            })
            .collect();
        let parts = partition_by_cluster(&d, &model, &emb).unwrap();
        let union: BTreeSet<String> = parts.iter().flat_map(id_set).collect();
        prop_assert_eq!(union, id_set(&d));
        prop_assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), n);
        let again = partition_by_cluster(&d, &model, &scaled).unwrap();
        prop_assert_eq!(parts, again);
    }
}
