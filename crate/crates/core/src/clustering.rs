//! Embedding, k-means with silhouette-based choice of k, and nearest-centroid routing.

use std::collections::HashSet;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Example, ExpertEnsemble};
use crate::gateway::{Gateway, GatewayError};
use crate::rng;
use crate::vector::{self, VectorError};

const RESTARTS: u64 = 10;
const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no examples to embed")]
    EmptyInput,
    #[error("k must be at least 2 (got {0})")]
    InvalidK(usize),
    #[error("{points} points cannot form {k} clusters")]
    TooFewPoints { points: usize, k: usize },
    #[error("data has {distinct} distinct points, fewer than k = {k}")]
    DegenerateData { distinct: usize, k: usize },
    #[error("silhouette needs at least two non-empty clusters")]
    SingleCluster,
    #[error("embedding matrix is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Embeddings of a list of examples, row-aligned with `ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub model_id: String,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>, model_id: impl Into<String>) -> Result<Self, ClusterError> {
        if ids.len() != vectors.len() {
            return Err(ClusterError::Malformed(format!(
                "{} ids but {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            for (id, v) in ids.iter().zip(&vectors) {
                if v.len() != dim {
                    return Err(ClusterError::Malformed(format!(
                        "vector for {id:?} has dimension {} (expected {dim})",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(ClusterError::Malformed(format!("vector for {id:?} is not finite")));
                }
            }
        }
        Ok(Self {
            ids,
            vectors,
            model_id: model_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn as_map(&self) -> std::collections::HashMap<String, Vec<f64>> {
        self.ids.iter().cloned().zip(self.vectors.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: IndexMap<String, usize>,
    pub silhouette: f64,
    pub inertia: f64,
}

impl ClusterModel {
    /// Member ids of cluster `c`, in matrix order.
    pub fn members(&self, c: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &a)| a == c)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Embeds each example's joined feature text; vectors come back unit-normalised.
pub fn embed_examples(examples: &[Example], gateway: &Gateway) -> Result<EmbeddingMatrix, ClusterError> {
    if examples.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    let texts: Vec<String> = examples.iter().map(Example::joined_text).collect();
    let raw = gateway.embed(&texts)?;
    let vectors = raw
        .iter()
        .map(|v| vector::normalized(v))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingMatrix::new(
        examples.iter().map(|e| e.id.clone()).collect(),
        vectors,
        gateway.embedding_model_id(),
    )
}

/// Cosine distance with zero vectors treated as orthogonal to everything.
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (vector::norm(a), vector::norm(b));
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - vector::dot(a, b) / (na * nb)).max(0.0)
}

/// Mean silhouette over all points, using cosine distance.
///
/// Points in singleton clusters score 0, as do points with `a = b = 0`.
pub fn silhouette_score(m: &EmbeddingMatrix, assignments: &[usize]) -> Result<f64, ClusterError> {
    if assignments.len() != m.len() {
        return Err(ClusterError::Malformed(format!(
            "{} assignments for {} points",
            assignments.len(),
            m.len()
        )));
    }
    let n_clusters = assignments.iter().max().map_or(0, |&x| x + 1);
    let mut sizes = vec![0usize; n_clusters];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let n = m.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; n_clusters];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += cosine_distance(&m.vectors[i], &m.vectors[j]);
            }
        }
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..n_clusters)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// One Lloyd run from the given initial centroids.
#[derive(Debug, Clone)]
pub(crate) struct LloydRun {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every centroid update.
    #[cfg_attr(not(test), allow(dead_code))]
    pub history: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = vector::sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn inertia(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| vector::sq_dist(p, &centroids[a]))
        .sum()
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    sums
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .map(|i| (i, vector::sq_dist(&points[i], &centroids[assignments[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((i, _)) = far else { return };
        assignments[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

pub(crate) fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>) -> LloydRun {
    let k = init.len();
    let mut centroids = init;
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut next, &mut centroids);
        let changed = next != assignments;
        assignments = next;
        centroids = means(points, &assignments, k);
        history.push(inertia(points, &assignments, &centroids));
        if !changed {
            break;
        }
    }
    LloydRun {
        inertia: *history.last().expect("at least one iteration"),
        assignments,
        centroids,
        history,
    }
}

/// k-means++ seeding: first centre uniform, later ones proportional to squared distance.
pub(crate) fn kmeans_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centres = vec![points[rng.random_range(0..n as u64) as usize].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| vector::sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let c = points[pick.expect("distinct points remain")].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(vector::sq_dist(p, &c));
        }
        centres.push(c);
    }
    centres
}

fn distinct_points(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Lloyd's k-means from seeded k-means++ starts; the restart with the lowest
/// inertia wins (earliest on ties). Deterministic in `(m, k, seed)`.
pub fn kmeans(m: &EmbeddingMatrix, k: usize, seed: u64) -> Result<ClusterModel, ClusterError> {
    if k < 2 {
        return Err(ClusterError::InvalidK(k));
    }
    if m.len() < k {
        return Err(ClusterError::TooFewPoints { points: m.len(), k });
    }
    let distinct = distinct_points(&m.vectors);
    if distinct < k {
        return Err(ClusterError::DegenerateData { distinct, k });
    }
    let mut best: Option<LloydRun> = None;
    for r in 0..RESTARTS {
        let mut rng = rng::seeded(rng::derive_seed(seed, "kmeans-restart", r));
        let init = kmeans_plus_plus(&m.vectors, k, &mut rng);
        let run = lloyd(&m.vectors, init);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let silhouette = silhouette_score(m, &best.assignments)?;
    Ok(ClusterModel {
        k,
        assignments: m.ids.iter().cloned().zip(best.assignments).collect(),
        centroids: best.centroids,
        silhouette,
        inertia: best.inertia,
    })
}

/// The trivial one-cluster model; its silhouette is taken to be 0.
fn single_cluster(m: &EmbeddingMatrix) -> Result<ClusterModel, ClusterError> {
    if m.is_empty() {
        return Err(ClusterError::TooFewPoints { points: 0, k: 1 });
    }
    let assignments = vec![0; m.len()];
    let centroids = means(&m.vectors, &assignments, 1);
    Ok(ClusterModel {
        k: 1,
        inertia: inertia(&m.vectors, &assignments, &centroids),
        centroids,
        assignments: m.ids.iter().map(|id| (id.clone(), 0)).collect(),
        silhouette: 0.0,
    })
}

/// Fits one model per candidate k, in ascending k order.
pub fn fit_candidates(m: &EmbeddingMatrix, candidates: &[usize], seed: u64) -> Result<Vec<ClusterModel>, ClusterError> {
    let mut ks: Vec<usize> = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .map(|k| if k == 1 { single_cluster(m) } else { kmeans(m, k, seed) })
        .collect()
}

/// Index of the highest score; ties go to the smaller k.
pub fn choose_by_silhouette(scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(k, s)) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) => {
                let (bk, bs) = scores[b];
                if s > bs || (s == bs && k < bk) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// Runs k-means for each candidate k and keeps the model with the highest silhouette.
pub fn select_k(m: &EmbeddingMatrix, candidates: &[usize], seed: u64) -> Result<ClusterModel, ClusterError> {
    let models = fit_candidates(m, candidates, seed)?;
    let scores: Vec<(usize, f64)> = models.iter().map(|c| (c.k, c.silhouette)).collect();
    let idx = choose_by_silhouette(&scores).ok_or(ClusterError::InvalidK(0))?;
    Ok(models.into_iter().nth(idx).expect("index in range"))
}

/// Expert index whose centroid is most cosine-similar to `v`, with that similarity.
pub fn route_with_similarity(v: &[f64], ensemble: &ExpertEnsemble) -> Result<(usize, f64), VectorError> {
    vector::nearest_centroid(v, &ensemble.centroids())
}

pub fn route(v: &[f64], ensemble: &ExpertEnsemble) -> Result<usize, VectorError> {
    route_with_similarity(v, ensemble).map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(points: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            (0..points.len()).map(|i| format!("p{i}")).collect(),
            points.iter().map(|p| p.to_vec()).collect(),
            "test",
        )
        .unwrap()
    }

    #[test]
    fn four_point_case() {
        let m = matrix(&[&[0.0, 0.0], &[0.0, 1.0], &[10.0, 10.0], &[10.0, 11.0]]);
        let model = kmeans(&m, 2, 3).unwrap();
        let a: Vec<usize> = model.assignments.values().copied().collect();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        let mut cs = model.centroids.clone();
        cs.sort_by(|x, y| x[0].partial_cmp(&y[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
        assert!((model.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_two_clusters() {
        let m = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let model = kmeans(&m, 2, 0).unwrap();
        assert_eq!(model.inertia, 0.0);
        assert_ne!(model.assignments["p0"], model.assignments["p1"]);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let m = matrix(&refs);
        assert_eq!(kmeans(&m, 3, 11).unwrap(), kmeans(&m, 3, 11).unwrap());
    }

    #[test]
    fn kmeans_preconditions() {
        let m = matrix(&[&[1.0, 0.0]]);
        assert!(matches!(kmeans(&m, 2, 0), Err(ClusterError::TooFewPoints { .. })));
        assert!(matches!(kmeans(&m, 1, 0), Err(ClusterError::InvalidK(1))));
        let same = matrix(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(kmeans(&same, 2, 0), Err(ClusterError::DegenerateData { .. })));
    }

    #[test]
    fn lloyd_inertia_never_increases() {
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.91).sin() * 3.0 + (i % 3) as f64 * 4.0, (t * 0.53).cos()]
            })
            .collect();
        for seed in 0..20 {
            let init = kmeans_plus_plus(&pts, 4, &mut rng::seeded(seed));
            let run = lloyd(&pts, init);
            for w in run.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", run.history);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn lloyd_inertia_is_monotone_on_random_data(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 4..40),
            k in 2usize..5,
            seed in 0u64..1000,
        ) {
            proptest::prop_assume!(distinct_points(&pts) >= k);
            let init = kmeans_plus_plus(&pts, k, &mut rng::seeded(seed));
            let run = lloyd(&pts, init);
            for w in run.history.windows(2) {
                proptest::prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", run.history);
            }
        }
    }

    #[test]
    fn empty_cluster_is_repaired() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0], vec![10.0]];
        // the third centre starts far from every point and would be empty
        let run = lloyd(&pts, vec![vec![0.0], vec![10.0], vec![100.0]]);
        let mut sizes = [0; 3];
        for &a in &run.assignments {
            sizes[a] += 1;
        }
        assert!(sizes.iter().all(|&s| s > 0), "{sizes:?}");
    }

    #[test]
    fn silhouette_tight_pairs() {
        let m = matrix(&[&[1.0, 0.0], &[1.0, 0.01], &[0.0, 1.0], &[0.01, 1.0]]);
        let s = silhouette_score(&m, &[0, 0, 1, 1]).unwrap();
        // per point: a ~ 5e-5, b ~ 0.995, so s ~ 0.99995
        assert!(s > 0.9, "{s}");
    }

    #[test]
    fn silhouette_identical_points_is_zero() {
        let m = matrix(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(silhouette_score(&m, &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_single_cluster() {
        let m = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(silhouette_score(&m, &[0, 0]), Err(ClusterError::SingleCluster)));
    }

    #[test]
    fn silhouette_singletons_score_zero() {
        let m = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(silhouette_score(&m, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn choice_follows_reported_silhouettes() {
        // Sarcasm row: 0.174 (k=2) vs 0.203 (k=3)
        assert_eq!(choose_by_silhouette(&[(2, 0.174), (3, 0.203)]), Some(1));
        // Parl Single row: 0.031 (k=2) vs 0.021 (k=3)
        assert_eq!(choose_by_silhouette(&[(2, 0.031), (3, 0.021)]), Some(0));
        assert_eq!(choose_by_silhouette(&[(3, 0.5), (2, 0.5)]), Some(1));
        assert_eq!(choose_by_silhouette(&[]), None);
    }

    #[test]
    fn single_cluster_candidate() {
        let m = matrix(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0]]);
        let models = fit_candidates(&m, &[1, 2], 0).unwrap();
        assert_eq!(models[0].k, 1);
        assert_eq!(models[0].silhouette, 0.0);
    }

    #[test]
    fn matrix_rejects_bad_rows() {
        assert!(EmbeddingMatrix::new(vec!["a".into()], vec![], "m").is_err());
        assert!(EmbeddingMatrix::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![1.0, 2.0]], "m").is_err());
        assert!(EmbeddingMatrix::new(vec!["a".into()], vec![vec![f64::NAN]], "m").is_err());
    }
}
