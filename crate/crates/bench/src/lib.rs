//! Deterministic fixtures for the benchmarks.

use rand::Rng;
use tenet_core::clustering::EmbeddingMatrix;
use tenet_core::domain::{class_list, ClassLabel, Constitution, Example};
use tenet_core::rng;

/// `n` unit vectors of dimension `dim` drawn around `k` random directions.
pub fn blobs(n: usize, dim: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|i| {
            let v: Vec<f64> = centers[i % k].iter().map(|c| c + r.random_range(-0.2..0.2)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn matrix(n: usize, dim: usize, k: usize, seed: u64) -> EmbeddingMatrix {
    let ids = (0..n).map(|i| format!("x{i}")).collect();
    EmbeddingMatrix::new(ids, blobs(n, dim, k, seed), "bench").expect("valid fixture")
}

/// Paired scores with ties and zero differences mixed in.
pub fn paired_scores(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let a = (r.random_range(0..20) as f64) / 20.0;
            (a, a + (r.random_range(-3..4) as f64) / 20.0)
        })
        .collect()
}

pub fn classes() -> Vec<ClassLabel> {
    class_list(&["False", "True"]).expect("valid classes")
}

/// A constitution with `per_class` principles for each class, and an input.
pub fn scoring_case(per_class: usize) -> (Constitution, Example) {
    let mut c = Constitution::empty("Does this message need urgent attention?", &classes());
    for class_id in 0..2 {
        for i in 0..per_class {
            c = c.with_principle(class_id, format!("Principle {i} for class {class_id} mentions keyword{i}."));
        }
    }
    let e = Example::text("e", "the payment to my bank account was flagged as a scam", None);
    (c, e)
}
