//! User prototypes: k-means clustering, representative selection and the
//! clip-plus-Laplace local differential privacy step applied before upload.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::OverlapRegistry;
use crate::linalg::{squared_distance, Matrix};
use crate::rng::{derive_seed, open_unit};

#[derive(Debug, Error, PartialEq)]
pub enum ProtoError {
    #[error("invalid cluster count {k} for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("max_iters must be at least 1")]
    InvalidIterations,
    #[error("all points are identical; cannot form {0} clusters")]
    DegenerateInput(usize),
    #[error("no cluster contains an overlapping user")]
    NoOverlapClusters,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("privacy budget is unbounded when the noise scale is zero")]
    DivisionByZero,
}

/// Cluster centroids plus the assignment of every user to one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub k: usize,
    pub iterations: usize,
    /// Sum of squared distances after each Lloyd update.
    pub objective_history: Vec<f64>,
}

/// k-means++ seeding: first centre uniform, the rest proportional to squared
/// distance from the nearest chosen centre.
pub fn kmeans_plus_plus_init<R: Rng + ?Sized>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut nearest: Vec<f64> = (0..n)
        .map(|p| squared_distance(points.row(p), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (p, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = p;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (p, best) in nearest.iter_mut().enumerate() {
            let d = squared_distance(points.row(p), centroids.row(c));
            if d < *best {
                *best = d;
            }
        }
    }
    centroids
}

fn nearest_centroid(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from the given initial centroids.
///
/// Each iteration assigns every point to its nearest centroid (lowest index on
/// ties), repairs empty clusters by moving in the point farthest from its
/// centroid, then recomputes means. Stops once the largest centroid shift is
/// below `tol` or after `max_iters` iterations.
pub fn lloyd(points: &Matrix, init: Matrix, max_iters: usize, tol: f64) -> PrototypeSet {
    let n = points.rows();
    let k = init.rows();
    let dim = points.cols();
    let mut centroids = init;
    let mut assignments = vec![0usize; n];
    let mut objective_history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let mut dist = vec![0.0; n];
        for p in 0..n {
            let (c, d) = nearest_centroid(points.row(p), &centroids);
            assignments[p] = c;
            dist[p] = d;
        }

        let mut counts = vec![0usize; k];
        for &c in &assignments {
            counts[c] += 1;
        }
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&p| counts[assignments[p]] > 1)
                .fold(None, |best: Option<usize>, p| match best {
                    Some(b) if dist[b] >= dist[p] => Some(b),
                    _ => Some(p),
                });
            if let Some(p) = donor {
                counts[assignments[p]] -= 1;
                assignments[p] = empty;
                counts[empty] = 1;
                dist[p] = 0.0;
            }
        }

        let mut sums = Matrix::zeros(k, dim);
        for p in 0..n {
            let row = sums.row_mut(assignments[p]);
            for (s, x) in row.iter_mut().zip(points.row(p)) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let row = sums.row_mut(c);
            row.iter_mut().for_each(|s| *s *= inv);
            shift = shift.max(squared_distance(row, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(sums.row(c));
        }

        let objective = (0..n)
            .map(|p| squared_distance(points.row(p), centroids.row(assignments[p])))
            .sum();
        objective_history.push(objective);
        if shift < tol {
            break;
        }
    }

    PrototypeSet {
        centroids,
        assignments,
        k,
        iterations,
        objective_history,
    }
}

/// Clusters the rows of `points` into `k` groups.
pub fn kmeans(points: &Matrix, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<PrototypeSet, ProtoError> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(ProtoError::InvalidK { k, n });
    }
    if max_iters == 0 {
        return Err(ProtoError::InvalidIterations);
    }
    if k > 1 && (1..n).all(|p| points.row(p) == points.row(0)) {
        return Err(ProtoError::DegenerateInput(k));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let init = kmeans_plus_plus_init(points, k, &mut rng);
    Ok(lloyd(points, init, max_iters, tol))
}

/// Prototypes whose clusters contain at least one overlapping user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativePrototypes {
    /// Source cluster ids, ascending.
    pub cluster_ids: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub overlap_members: Vec<BTreeSet<String>>,
}

impl RepresentativePrototypes {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

pub fn select_representative(
    protos: &PrototypeSet,
    registry: &OverlapRegistry,
    domain_id: usize,
) -> Result<RepresentativePrototypes, ProtoError> {
    let mut members: Vec<BTreeSet<String>> = vec![BTreeSet::new(); protos.k];
    if let Some(index) = registry.per_domain_index.get(&domain_id) {
        for (user_id, &u) in index {
            if registry.contains(user_id) {
                members[protos.assignments[u]].insert(user_id.clone());
            }
        }
    }
    let mut out = RepresentativePrototypes {
        cluster_ids: Vec::new(),
        centroids: Vec::new(),
        overlap_members: Vec::new(),
    };
    for (c, m) in members.into_iter().enumerate() {
        if !m.is_empty() {
            out.cluster_ids.push(c);
            out.centroids.push(protos.centroids.row(c).to_vec());
            out.overlap_members.push(m);
        }
    }
    if out.is_empty() {
        return Err(ProtoError::NoOverlapClusters);
    }
    Ok(out)
}

/// Clipped and noised prototypes, ready to leave the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialPrototypeSet {
    pub centroids: Vec<Vec<f64>>,
    pub beta: f64,
    pub eta: f64,
}

pub fn clip(x: f64, beta: f64) -> f64 {
    x.clamp(-beta, beta)
}

/// Inverse-CDF Laplace(0, scale) draw from a uniform in (0, 1).
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    let centered = u - 0.5;
    -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// Noise for one coordinate, addressed by `(seed, cluster, coordinate)` so
/// results do not depend on evaluation order.
pub fn laplace_noise(seed: u64, cluster: usize, coordinate: usize, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let bits = derive_seed(seed, "laplace", &[cluster as u64, coordinate as u64]);
    laplace_from_uniform(open_unit(bits), scale)
}

/// Per-coordinate clip to `[-beta, beta]` followed by Laplace(0, eta) noise.
///
/// `seed` should already encode the round and domain; the cluster position and
/// coordinate index select the individual draw.
pub fn apply_ldp(
    rep: &RepresentativePrototypes,
    beta: f64,
    eta: f64,
    seed: u64,
) -> Result<DifferentialPrototypeSet, ProtoError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(ProtoError::InvalidParam(format!("beta must be > 0, got {beta}")));
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(ProtoError::InvalidParam(format!("eta must be >= 0, got {eta}")));
    }
    let centroids = rep
        .centroids
        .iter()
        .enumerate()
        .map(|(j, c)| {
            c.iter()
                .enumerate()
                .map(|(i, &x)| clip(x, beta) + laplace_noise(seed, j, i, eta))
                .collect()
        })
        .collect();
    Ok(DifferentialPrototypeSet { centroids, beta, eta })
}

/// Upper bound `2β/η` on the per-coordinate privacy budget of one release.
pub fn privacy_budget(beta: f64, eta: f64) -> Result<f64, ProtoError> {
    if !(beta >= 0.0) || !(eta >= 0.0) {
        return Err(ProtoError::InvalidParam(format!("beta={beta}, eta={eta}")));
    }
    if eta == 0.0 {
        return Err(ProtoError::DivisionByZero);
    }
    Ok(2.0 * beta / eta)
}
