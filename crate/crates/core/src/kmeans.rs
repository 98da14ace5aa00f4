//! Lloyd's k-means with seeded initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster index of each input point.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each centroid update.
    pub sse_history: Vec<f64>,
    /// Number of empty clusters that had to be reseeded.
    pub repairs: usize,
}

impl KMeans {
    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters `points` into `k` groups, starting from `k` distinct input points
/// drawn with `seed`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, points.len(), k).into_vec();
    picks.sort_unstable();
    let init = picks.iter().map(|&i| points[i].clone()).collect();
    kmeans_from(points, init, max_iters)
}

/// Lloyd iterations from explicit initial centroids.
///
/// A cluster left empty by an assignment step is reseeded with the point of
/// the largest cluster that lies farthest from that cluster's centroid.
pub fn kmeans_from(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iters: usize) -> Result<KMeans> {
    let k = init.len();
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().chain(&init).find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }

    let mut centroids = init;
    let mut assignment = vec![usize::MAX; points.len()];
    let mut sse_history = Vec::new();
    let mut repairs = 0;
    let mut iterations = 0;

    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (p, slot) in points.iter().zip(assignment.iter_mut()) {
            let best = nearest(&centroids, p);
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        let repaired = repair_empty(points, &centroids, &mut assignment);
        repairs += repaired;
        if !changed && repaired == 0 && iterations > 1 {
            break;
        }

        centroids = recompute(points, &assignment, k, dim);
        sse_history.push(
            points
                .iter()
                .zip(&assignment)
                .map(|(p, &c)| sq_dist(p, &centroids[c]))
                .sum(),
        );
    }

    Ok(KMeans {
        assignment,
        centroids,
        iterations,
        sse_history,
        repairs,
    })
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn repair_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &mut [usize]) -> usize {
    let k = centroids.len();
    let mut repairs = 0;
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return repairs;
        };
        // Largest cluster, lowest index on ties.
        let largest = (0..k).rev().max_by_key(|&c| sizes[c]).unwrap();
        let centre = &centroids[largest];
        let farthest = (0..points.len())
            .filter(|&i| assignment[i] == largest)
            .rev()
            .max_by(|&a, &b| sq_dist(&points[a], centre).total_cmp(&sq_dist(&points[b], centre)))
            .unwrap();
        log::debug!("k-means: reseeding empty cluster {empty} from point {farthest}");
        assignment[farthest] = empty;
        repairs += 1;
    }
}

fn recompute(points: &[Vec<f64>], assignment: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}
