//! Small dense-vector helpers.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VectorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero or non-finite vector")]
    ZeroVector,
    #[error("no centroids to compare against")]
    NoCentroids,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unit-length copy of `a`.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>, VectorError> {
    let n = norm(a);
    if !(n > 0.0 && n.is_finite()) {
        return Err(VectorError::ZeroVector);
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, VectorError> {
    if a.len() != b.len() {
        return Err(VectorError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && na.is_finite() && nb > 0.0 && nb.is_finite()) {
        return Err(VectorError::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Index and cosine similarity of the most similar centroid; ties go to the
/// lowest index.
pub fn nearest_centroid<C: AsRef<[f64]>>(
    v: &[f64],
    centroids: &[C],
) -> Result<(usize, f64), VectorError> {
    if centroids.is_empty() {
        return Err(VectorError::NoCentroids);
    }
    let nv = norm(v);
    if !(nv > 0.0 && nv.is_finite()) {
        return Err(VectorError::ZeroVector);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centroids.iter().enumerate() {
        let c = c.as_ref();
        if c.len() != v.len() {
            return Err(VectorError::DimensionMismatch {
                expected: c.len(),
                got: v.len(),
            });
        }
        let sim = cosine(v, c)?;
        if best.is_none_or(|(_, s)| sim > s) {
            best = Some((i, sim));
        }
    }
    Ok(best.expect("non-empty"))
}
