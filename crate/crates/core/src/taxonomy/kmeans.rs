//! k-means++ seeding followed by Lloyd iterations.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vectorlab::{EmbeddingVector, VectorError};

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KMeansError {
    #[error("k must be >= 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of points ({n})")]
    TooFewPoints { k: usize, n: usize },
    #[error(transparent)]
    Vector(#[from] VectorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k: usize,
    /// Cluster index of each input point, in input order.
    pub assignments: Vec<usize>,
    pub centroids: Vec<EmbeddingVector>,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, for convergence diagnostics.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusteringResult {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == cluster).then_some(i))
            .collect()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: the first center is uniform, each next one is drawn with
/// probability proportional to the squared distance to the nearest chosen
/// center. When every remaining point coincides with a center, the next center
/// is drawn uniformly from the points not yet chosen.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                free[rng.gen_range(0..free.len())]
            }
        };
        chosen[next] = true;
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    centers
}

fn inertia_of(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Clusters `points` into `k` groups.
///
/// Lloyd iterations run until the assignment is stable or `max_iters` is
/// reached, followed by single-point transfer refinement. An emptied cluster
/// is re-seeded with the point farthest from its current centroid.
/// Deterministic for a given `seed`.
pub fn kmeans_pp(
    points: &[EmbeddingVector],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusteringResult, KMeansError> {
    if k == 0 {
        return Err(KMeansError::ZeroK);
    }
    if k > points.len() {
        return Err(KMeansError::TooFewPoints { k, n: points.len() });
    }
    let dim = points[0].dim();
    if let Some(p) = points.iter().find(|p| p.dim() != dim) {
        return Err(VectorError::DimensionMismatch {
            expected: dim,
            found: p.dim(),
        }
        .into());
    }
    let pts: Vec<Vec<f64>> = points.iter().map(EmbeddingVector::to_f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centers(&pts, k, &mut rng);

    let mut assignments: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        repair_empty(&pts, &centroids, &mut assignments, k);
        trace.push(inertia_of(&pts, &centroids, &assignments));
        if iterations >= max_iters {
            break;
        }
        iterations += 1;
        update_centroids(&pts, &assignments, &mut centroids);
        let mut changed = false;
        for (p, a) in pts.iter().zip(assignments.iter_mut()) {
            let (c, d) = nearest(p, &centroids);
            // ties keep the current assignment
            if c != *a && d < sq_dist(p, &centroids[*a]) {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            trace.push(inertia_of(&pts, &centroids, &assignments));
            break;
        }
    }
    if transfer_refine(&pts, &mut centroids, &mut assignments, max_iters) {
        trace.push(inertia_of(&pts, &centroids, &assignments));
    }
    let inertia = inertia_of(&pts, &centroids, &assignments);
    let centroids = centroids
        .iter()
        .map(|c| EmbeddingVector::from_f64(c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ClusteringResult {
        k,
        assignments,
        centroids,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}

fn update_centroids(points: &[Vec<f64>], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

/// Single-point transfers after Lloyd has converged: moving `x` from
/// cluster `a` (size `n_a`) to `b` changes inertia by
/// `n_b/(n_b+1)·‖x−c_b‖² − n_a/(n_a−1)·‖x−c_a‖²`. Lloyd fixed points can still
/// admit improving moves; the best one is applied until none is left (or
/// `max_moves` is hit). Returns whether anything moved.
fn transfer_refine(
    points: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
    max_moves: usize,
) -> bool {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    // squared distance of every point to every centroid; a move only
    // invalidates the two columns it touches
    let n = points.len();
    let mut dist = vec![0.0; n * k];
    for (i, p) in points.iter().enumerate() {
        for (c, centroid) in centroids.iter().enumerate() {
            dist[i * k + c] = sq_dist(p, centroid);
        }
    }
    let mut moves = 0;
    while moves < max_moves {
        // (gain, point, target)
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let row = &dist[i * k..(i + 1) * k];
            let na = counts[a] as f64;
            let cost_out = na / (na - 1.0) * row[a];
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let gain = cost_out - nb / (nb + 1.0) * row[b];
                // relative slack keeps rounding noise from cycling points
                if gain > 1e-12 * cost_out && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, i, b));
                }
            }
        }
        let Some((_, i, b)) = best else { break };
        let a = assignments[i];
        let (na, nb) = (counts[a] as f64, counts[b] as f64);
        for (c, x) in centroids[a].iter_mut().zip(&points[i]) {
            *c = (*c * na - x) / (na - 1.0);
        }
        for (c, x) in centroids[b].iter_mut().zip(&points[i]) {
            *c = (*c * nb + x) / (nb + 1.0);
        }
        counts[a] -= 1;
        counts[b] += 1;
        assignments[i] = b;
        for (j, p) in points.iter().enumerate() {
            dist[j * k + a] = sq_dist(p, &centroids[a]);
            dist[j * k + b] = sq_dist(p, &centroids[b]);
        }
        moves += 1;
    }
    if moves > 0 {
        // recompute exactly to shed incremental-update drift
        update_centroids(points, assignments, centroids);
    }
    moves > 0
}

/// Moves the point farthest from its centroid into each empty cluster, as
/// long as that point does not sit exactly on its centroid.
fn repair_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let far = points
            .iter()
            .zip(assignments.iter())
            .enumerate()
            .filter(|(_, (_, &a))| counts[a] > 1)
            .map(|(i, (p, &a))| (i, sq_dist(p, &centroids[a])))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        match far {
            Some((i, d)) if d > 0.0 => assignments[i] = empty,
            _ => return,
        }
    }
}
