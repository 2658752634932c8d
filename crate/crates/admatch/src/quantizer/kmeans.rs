//! Seeded k-means: k-means++ initialization plus Lloyd iterations.
//!
//! All arithmetic is f64. Output centroids are rounded to single precision
//! (the serialized model precision) and the reported distortion and
//! assignments are recomputed against those rounded centroids, so a model
//! written to disk reproduces the reported numbers exactly.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::util::seeded_rng;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// k centroids; every value is exactly representable in f32.
    pub centroids: Vec<Vec<f64>>,
    /// Index of the nearest centroid per input point (ties to the lowest
    /// index).
    pub assignments: Vec<usize>,
    /// Mean squared distance to the assigned centroid.
    pub distortion: f64,
    /// Distortion after each Lloyd assignment pass, before rounding;
    /// nonincreasing.
    pub trace: Vec<f64>,
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance, ties to the lowest index.
pub(crate) fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn kmeanspp_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let idx = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // All remaining distances are zero (duplicate-heavy data):
            // any point works, pick uniformly.
            Err(_) => rng.gen_range(0..points.len()),
        };
        let chosen = points[idx].clone();
        for (di, p) in d2.iter_mut().zip(points) {
            let d = squared_distance(p, &chosen);
            if d < *di {
                *di = d;
            }
        }
        centroids.push(chosen);
    }
    centroids
}

fn mean_distortion(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    let total: f64 = points
        .iter()
        .zip(assign)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum();
    total / points.len() as f64
}

fn round_to_f32(centroids: &mut [Vec<f64>]) {
    for c in centroids.iter_mut() {
        for v in c.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Lloyd iterations from the given starting centroids. Used directly for
/// warm starts (OPQ alternations) and by [`kmeans`] after k-means++ init.
pub(crate) fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
) -> KmeansResult {
    let k = centroids.len();
    let dim = centroids[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();

    for _ in 0..max_iters.max(1) {
        // Assignment pass.
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (a, _) = nearest(p, &centroids);
            if assignments[i] != a {
                assignments[i] = a;
                changed = true;
            }
        }
        trace.push(mean_distortion(points, &centroids, &assignments));
        if !changed {
            break;
        }

        // Update pass: cluster means; empty clusters reseed from the point
        // currently farthest from its own centroid.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut used_for_reseed: Vec<usize> = Vec::new();
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            } else {
                // Farthest point (by current assignment distance) not
                // already consumed by another empty cluster this pass.
                let mut far_idx = 0;
                let mut far_d = -1.0;
                for (i, p) in points.iter().enumerate() {
                    if used_for_reseed.contains(&i) {
                        continue;
                    }
                    let d = squared_distance(p, &centroids[assignments[i]]);
                    if d > far_d {
                        far_d = d;
                        far_idx = i;
                    }
                }
                used_for_reseed.push(far_idx);
                centroids[j] = points[far_idx].clone();
            }
        }
    }

    // Materialize at serialized precision and restate the result against
    // exactly those values.
    round_to_f32(&mut centroids);
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    let distortion = mean_distortion(points, &centroids, &assignments);
    KmeansResult {
        centroids,
        assignments,
        distortion,
        trace,
    }
}

/// Cluster `points` into k groups. Deterministic per seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<KmeansResult> {
    if k == 0 {
        return Err(Error::Quantizer("kmeans requires k >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::Quantizer(format!(
            "kmeans requires at least k points: {} < {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Quantizer(
            "kmeans points must share a nonzero dimension".into(),
        ));
    }
    let mut rng = seeded_rng(seed, "kmeans-init");
    let centroids = kmeanspp_init(points, k, &mut rng);
    Ok(lloyd(points, centroids, max_iters))
}
