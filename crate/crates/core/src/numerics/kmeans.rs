//! Lloyd's algorithm with k-means++ seeding, best of several restarts.

use super::matrix::Matrix;
use super::rng::RngStream;
use crate::error::{Error, Result};

pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_ITERS: usize = 300;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: Matrix,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Cluster the rows of `points` into `k` groups.
pub fn kmeans(points: &Matrix, k: usize, rng: &mut RngStream) -> Result<KMeans> {
    kmeans_with(points, k, DEFAULT_RESTARTS, rng)
}

pub fn kmeans_with(points: &Matrix, k: usize, restarts: usize, rng: &mut RngStream) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Domain("k-means needs k >= 1".into()));
    }
    if k > points.rows() {
        return Err(Error::Domain(format!("k = {k} exceeds {} points", points.rows())));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut local = rng.derive(r as u64);
        let run = lloyd(points, k, &mut local);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(canonical_labels(best.expect("at least one restart")))
}

/// Relabel clusters in order of first appearance so equal partitions get
/// equal label vectors.
fn canonical_labels(mut km: KMeans) -> KMeans {
    let k = km.centers.rows();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in &km.labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    for m in map.iter_mut() {
        if *m == usize::MAX {
            *m = next;
            next += 1;
        }
    }
    let mut centers = Matrix::zeros(k, km.centers.cols());
    for (old, &new) in map.iter().enumerate() {
        centers.row_mut(new).copy_from_slice(km.centers.row(old));
    }
    km.labels.iter_mut().for_each(|l| *l = map[*l]);
    km.centers = centers;
    km
}

fn seed_plus_plus(points: &Matrix, k: usize, rng: &mut RngStream) -> Matrix {
    let (n, d) = points.shape();
    let mut centers = Matrix::zeros(k, d);
    centers.row_mut(0).copy_from_slice(points.row(rng.below(n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &di) in dist.iter().enumerate() {
                acc += di;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(points: &Matrix, k: usize, rng: &mut RngStream) -> KMeans {
    let (n, d) = points.shape();
    let mut centers = seed_plus_plus(points, k, rng);
    let mut labels = vec![0usize; n];
    for iter in 0..MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let p = points.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let dd = sq_dist(p, centers.row(c));
                if dd < best.1 {
                    best = (c, dd);
                }
            }
            if labels[i] != best.0 {
                labels[i] = best.0;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums.row_mut(c).iter_mut() {
                    *s /= counts[c] as f64;
                }
                centers.row_mut(c).copy_from_slice(sums.row(c));
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points.row(i), centers.row(labels[i]))).sum();
    KMeans { labels, centers, inertia }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
