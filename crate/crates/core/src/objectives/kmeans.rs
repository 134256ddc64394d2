use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Fitted clustering model used to turn features into discrete targets.
#[derive(Clone, Debug, PartialEq)]
pub struct KmeansModel {
    /// `k` centroids of dimension `d`.
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment step of the retained run.
    pub inertia_history: Vec<f64>,
}

impl KmeansModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

/// Restarts per fit; the lowest-inertia run is kept.
const RESTARTS: u64 = 64;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance; ties go to the lower index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(features: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KmeansModel> {
    let n = features.len();
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs 1 <= k <= N, got k={k}, N={n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(crate::error::dim_err("ragged k-means features"));
    }
    let mut best: Option<KmeansModel> = None;
    for restart in 0..RESTARTS {
        let model = lloyd(features, k, iters.max(1), rng::derive(seed, &[restart]));
        if best.as_ref().is_none_or(|b| model.inertia() < b.inertia()) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(features: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> KmeansModel {
    let n = features.len();
    let d = features[0].len();
    let mut r = rng::rng_for(seed, "kmeans++", &[]);
    let mut centroids = vec![features[r.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            r.random_range(0..n)
        };
        centroids.push(features[pick].clone());
        for (dv, f) in dist.iter_mut().zip(features) {
            *dv = dv.min(sq_dist(f, centroids.last().expect("pushed")));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..iters {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for (i, f) in features.iter().enumerate() {
            let (j, dv) = nearest(f, &centroids);
            changed |= assign[i] != j;
            assign[i] = j;
            dists[i] = dv;
            inertia += dv;
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (f, &j) in features.iter().zip(&assign) {
            counts[j] += 1;
            sums[j].iter_mut().zip(f).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // re-seed an empty cluster on the point farthest from its centroid
                let far = (0..n).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
                centroids[j] = features[far].clone();
                dists[far] = 0.0;
            }
        }
    }
    KmeansModel { centroids, inertia_history: history }
}

pub fn kmeans_assign(features: &[Vec<f64>], model: &KmeansModel) -> Result<Vec<usize>> {
    let d = model.centroids.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != d) {
        return Err(crate::error::dim_err(format!("k-means expects {d}-dim features")));
    }
    Ok(features.iter().map(|f| nearest(f, &model.centroids).0).collect())
}
