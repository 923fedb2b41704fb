//! Seeded Lloyd's k-means with k-means++ initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Clusters that went empty and were refilled with the farthest point.
    pub reassigned: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Clusters `points` into `k` groups with `iters` Lloyd iterations.
///
/// A cluster that empties takes the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::Config(format!("{} points cannot fill {k} clusters", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut assignments = vec![0; points.len()];
    let mut reassigned = 0;
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, _) = nearest(p, &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                // farthest point from its own centroid, among clusters that can spare one
                let far = (0..points.len()).filter(|&i| counts[assignments[i]] > 1).max_by(|&a, &b| {
                    dist2(&points[a], &centroids[assignments[a]])
                        .total_cmp(&dist2(&points[b], &centroids[assignments[b]]))
                        .then(b.cmp(&a))
                });
                if let Some(i) = far {
                    log::warn!("k-means cluster {j} emptied; reassigning point {i}");
                    counts[assignments[i]] -= 1;
                    assignments[i] = j;
                    counts[j] = 1;
                    reassigned += 1;
                    changed = true;
                }
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (a, p) in assignments.iter().zip(points) {
            for (s, x) in sums[*a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(KMeans { assignments, centroids, reassigned })
}
