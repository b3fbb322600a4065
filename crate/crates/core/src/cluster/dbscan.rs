//! Density-based clustering with deterministic ids.
//!
//! A point is core when at least `min_pts` points (itself included) lie within
//! `eps`. Clusters are the maximal density-connected sets. Scanning points in
//! input order, each unassigned core point opens the next cluster id and the
//! cluster is expanded breadth-first before the scan continues, so a border
//! point reachable from several clusters belongs to the one opened first.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::embedding::euclidean;
use crate::exec::ExecMode;

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DbscanParamsError {
    #[error("eps must be positive and finite, got {0}")]
    Eps(f64),
    #[error("min_pts must be at least 1")]
    MinPts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct DbscanParams {
    eps: f64,
    min_pts: usize,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    eps: f64,
    min_pts: usize,
}

impl TryFrom<RawParams> for DbscanParams {
    type Error = DbscanParamsError;
    fn try_from(r: RawParams) -> Result<Self, Self::Error> {
        DbscanParams::new(r.eps, r.min_pts)
    }
}

impl From<DbscanParams> for RawParams {
    fn from(p: DbscanParams) -> Self {
        RawParams { eps: p.eps, min_pts: p.min_pts }
    }
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams { eps: 0.5, min_pts: 5 }
    }
}

impl DbscanParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self, DbscanParamsError> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(DbscanParamsError::Eps(eps));
        }
        if min_pts == 0 {
            return Err(DbscanParamsError::MinPts);
        }
        Ok(DbscanParams { eps, min_pts })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn min_pts(&self) -> usize {
        self.min_pts
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DbscanResult {
    /// Cluster id per input point, [`NOISE`] for noise.
    pub labels: Vec<i32>,
    pub core: Vec<bool>,
    pub n_clusters: usize,
}

/// Indices within `eps` of each point, self included, ascending.
pub fn neighbor_lists<P>(points: &[P], eps: f64, exec: ExecMode) -> Vec<Vec<usize>>
where
    P: AsRef<[f64]> + Sync,
{
    exec.map_range(points.len(), |i| {
        let a = points[i].as_ref();
        (0..points.len())
            .filter(|&j| euclidean(a, points[j].as_ref()) <= eps)
            .collect()
    })
}

pub fn dbscan<P>(points: &[P], params: &DbscanParams, exec: ExecMode) -> DbscanResult
where
    P: AsRef<[f64]> + Sync,
{
    if let Some(first) = points.first() {
        let d = first.as_ref().len();
        assert!(points.iter().all(|p| p.as_ref().len() == d), "dbscan points must share one dimension");
    }
    let neighbors = neighbor_lists(points, params.eps, exec);
    let core: Vec<bool> = neighbors.iter().map(|n| n.len() >= params.min_pts).collect();

    let mut labels = vec![NOISE; points.len()];
    let mut next = 0i32;
    let mut queue = VecDeque::new();
    for i in 0..points.len() {
        if labels[i] != NOISE || !core[i] {
            continue;
        }
        labels[i] = next;
        queue.extend(neighbors[i].iter().copied());
        while let Some(j) = queue.pop_front() {
            if labels[j] != NOISE {
                continue;
            }
            labels[j] = next;
            if core[j] {
                queue.extend(neighbors[j].iter().copied());
            }
        }
        next += 1;
    }
    DbscanResult { labels, core, n_clusters: next as usize }
}
