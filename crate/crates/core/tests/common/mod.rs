//! Brute-force reference implementations and random data for integration tests.
//! Each oracle is written from the definition, sharing no code with the crate.

#![allow(dead_code)]

pub mod triggers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    unit(&v)
}

/// `unit(center + noise)` with noise of expected norm about `sigma`.
pub fn jitter(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    let s = sigma / (center.len() as f64).sqrt();
    let v: Vec<f64> = center.iter().map(|c| c + s * rng.sample::<f64, _>(StandardNormal)).collect();
    unit(&v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Class centroid: normalized sum of normalized examples.
pub fn oracle_centroid(examples: &[Vec<f64>]) -> Vec<f64> {
    let dim = examples[0].len();
    let mut sum = vec![0.0; dim];
    for e in examples {
        for (s, x) in sum.iter_mut().zip(unit(e)) {
            *s += x;
        }
    }
    unit(&sum)
}

/// Index of the centroid with the highest cosine; lowest index on ties.
pub fn oracle_argmax(centroids: &[Vec<f64>], query: &[f64]) -> usize {
    let q = unit(query);
    let mut best = 0;
    for i in 1..centroids.len() {
        if dot(&centroids[i], &q) > dot(&centroids[best], &q) {
            best = i;
        }
    }
    best
}

/// Person index with the nearest template, or `None` beyond `threshold`.
pub fn oracle_nearest_face(templates: &[Vec<Vec<f64>>], query: &[f64], threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (p, ts) in templates.iter().enumerate() {
        for t in ts {
            let d = dist(t, query);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((p, d));
            }
        }
    }
    best.filter(|&(_, d)| d <= threshold).map(|(p, _)| p)
}

/// DBSCAN from its definition: core points by full distance matrix, clusters
/// as connected components of the core graph numbered by their smallest core
/// index, border points joining the lowest-numbered adjacent cluster.
pub fn naive_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> (Vec<i32>, Vec<bool>) {
    let n = points.len();
    let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(&points[i], &points[j])).collect()).collect();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| d[i][j] <= eps).count() >= min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..n {
        for j in 0..i {
            if core[i] && core[j] && d[i][j] <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut labels = vec![-1i32; n];
    let mut component_id = std::collections::HashMap::new();
    for i in 0..n {
        if core[i] {
            let root = find(&mut parent, i);
            let next = component_id.len() as i32;
            labels[i] = *component_id.entry(root).or_insert(next);
        }
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = (0..n).filter(|&j| core[j] && d[i][j] <= eps).map(|j| labels[j]).min().unwrap_or(-1);
        }
    }
    (labels, core)
}

/// Gaussian blobs plus uniform background points.
pub fn blobs(rng: &mut ChaCha8Rng, n: usize, dim: usize, centers: usize, spread: f64) -> Vec<Vec<f64>> {
    let cs: Vec<Vec<f64>> = (0..centers).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect()
            } else {
                let c = &cs[rng.random_range(0..centers)];
                c.iter().map(|x| x + spread * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        })
        .collect()
}

/// True when the two labelings induce the same partition (noise excluded
/// from relabeling and required identical).
pub fn same_partition(a: &[i32], b: &[i32]) -> bool {
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x == -1) != (y == -1) {
            return false;
        }
        if x == -1 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}
