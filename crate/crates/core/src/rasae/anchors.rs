use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rasae::AnchorStrategy;
use crate::rng::named_stream;
use crate::tensorio::FeatureMatrix;

pub const KMEANS_MAX_ITERS: usize = 50;

/// Picks `m` anchor rows for the archetypal dictionary, returned as a flat
/// `m x d` buffer.
///
/// `Random` samples rows without replacement; `Kmeans` runs k-means++
/// seeding followed by at most fifty Lloyd iterations.
pub fn fit_anchors(
    data: &FeatureMatrix,
    m: usize,
    strategy: AnchorStrategy,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, d) = (data.rows(), data.cols());
    if m == 0 {
        return Err(Error::Argument("need at least one anchor".into()));
    }
    match strategy {
        AnchorStrategy::Random => {
            if m > n {
                return Err(Error::Argument(format!(
                    "cannot sample {m} anchors without replacement from {n} rows"
                )));
            }
            let mut rng = named_stream(seed, "anchors/random");
            let picks = sample(&mut rng, n, m);
            let mut out = Vec::with_capacity(m * d);
            for i in picks.iter() {
                out.extend(data.row(i).iter().map(|&v| f64::from(v)));
            }
            Ok(out)
        }
        AnchorStrategy::Kmeans => {
            if n == 0 {
                return Err(Error::Argument("k-means needs at least one row".into()));
            }
            Ok(kmeans(&data.to_f64(), n, d, m, seed).centroids)
        }
    }
}

pub struct KmeansResult {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, cent);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

pub fn kmeans(data: &[f64], n: usize, d: usize, m: usize, seed: u64) -> KmeansResult {
    let mut rng = named_stream(seed, "anchors/kmeans");
    let mut centroids = Vec::with_capacity(m * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * d..(first + 1) * d]);
    let mut min_d2: Vec<f64> = data
        .par_chunks_exact(d)
        .map(|x| sq_dist(x, &centroids[..d]))
        .collect();
    for _ in 1..m {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data[pick * d..(pick + 1) * d].to_vec();
        min_d2
            .par_iter_mut()
            .zip(data.par_chunks_exact(d))
            .for_each(|(md, x)| *md = md.min(sq_dist(x, &c)));
        centroids.extend_from_slice(&c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let next: Vec<usize> = data
            .par_chunks_exact(d)
            .map(|x| nearest(x, &centroids, d).0)
            .collect();
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
        let mut sums = vec![0.0; m * d];
        let mut counts = vec![0usize; m];
        for (x, &a) in data.chunks_exact(d).zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    KmeansResult {
        centroids,
        assignments,
        iterations,
    }
}
