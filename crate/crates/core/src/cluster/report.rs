use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dbscan::{dbscan, DbscanParams, NOISE};
use super::geo::GeoBin;
use crate::embedding::{euclidean, Embedding};
use crate::exec::ExecMode;

pub const DEFAULT_EXEMPLARS: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError {
    #[error("frames span several geo bins ({first} and {other})")]
    MixedBins { first: GeoBin, other: GeoBin },
}

/// A buffered frame eligible for clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterFrame {
    pub frame_id: String,
    pub bin: GeoBin,
    pub captured_at: i64,
    pub embedding: Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub member_frame_ids: Vec<String>,
    pub medoid_frame_id: String,
    pub exemplar_frame_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub bin: GeoBin,
    pub clusters: Vec<ClusterSummary>,
    pub noise_frame_ids: Vec<String>,
    /// Latest capture time among the bin's input frames.
    pub last_seen: Option<i64>,
}

impl ClusterReport {
    pub fn frame_count(&self) -> usize {
        self.noise_frame_ids.len() + self.clusters.iter().map(|c| c.member_frame_ids.len()).sum::<usize>()
    }
}

/// Index of the member minimizing summed distance to the others; earliest wins ties.
pub fn medoid<P>(members: &[P], exec: ExecMode) -> Option<usize>
where
    P: AsRef<[f64]> + Sync,
{
    let sums = exec.map_range(members.len(), |i| {
        members.iter().map(|m| euclidean(members[i].as_ref(), m.as_ref())).sum::<f64>()
    });
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in sums.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Clusters one bin's frames. Output depends only on the frames and their order.
pub fn cluster_bin(
    frames: &[ClusterFrame],
    params: &DbscanParams,
    exemplars: usize,
    exec: ExecMode,
) -> Result<ClusterReport, ClusterError> {
    let bin = frames.first().map_or(GeoBin::NoGeo, |f| f.bin.clone());
    if let Some(other) = frames.iter().find(|f| f.bin != bin) {
        return Err(ClusterError::MixedBins { first: bin, other: other.bin.clone() });
    }
    let embeddings: Vec<&[f64]> = frames.iter().map(|f| f.embedding.as_slice()).collect();
    let result = dbscan(&embeddings, params, exec);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); result.n_clusters];
    let mut noise_frame_ids = Vec::new();
    for (i, &label) in result.labels.iter().enumerate() {
        if label == NOISE {
            noise_frame_ids.push(frames[i].frame_id.clone());
        } else {
            members[label as usize].push(i);
        }
    }

    let clusters = members
        .iter()
        .enumerate()
        .map(|(cluster_id, idx)| {
            let pts: Vec<&[f64]> = idx.iter().map(|&i| embeddings[i]).collect();
            let m = idx[medoid(&pts, exec).expect("clusters are non-empty")];
            let mut by_distance: Vec<(f64, usize)> = idx.iter().map(|&i| (euclidean(embeddings[i], embeddings[m]), i)).collect();
            by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ClusterSummary {
                cluster_id,
                member_frame_ids: idx.iter().map(|&i| frames[i].frame_id.clone()).collect(),
                medoid_frame_id: frames[m].frame_id.clone(),
                exemplar_frame_ids: by_distance.iter().take(exemplars).map(|&(_, i)| frames[i].frame_id.clone()).collect(),
            }
        })
        .collect();

    Ok(ClusterReport {
        bin,
        clusters,
        noise_frame_ids,
        last_seen: frames.iter().map(|f| f.captured_at).max(),
    })
}

/// Clusters every bin independently; bins are processed in parallel under
/// [`ExecMode::Parallel`]. Reports come back in bin order.
pub fn cluster_bins(
    bins: &BTreeMap<GeoBin, Vec<ClusterFrame>>,
    params: &DbscanParams,
    exemplars: usize,
    exec: ExecMode,
) -> Vec<ClusterReport> {
    let groups: Vec<&Vec<ClusterFrame>> = bins.values().filter(|v| !v.is_empty()).collect();
    // Inner loops run sequentially when bins already fan out.
    exec.map(&groups, |frames| {
        cluster_bin(frames, params, exemplars, ExecMode::Sequential).expect("buffer groups share a bin")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::geo::geo_bin;
    use crate::embedding::normalize;

    fn frame(id: &str, bin: &GeoBin, v: &[f64]) -> ClusterFrame {
        ClusterFrame { frame_id: id.into(), bin: bin.clone(), captured_at: 0, embedding: normalize(v).unwrap() }
    }

    #[test]
    fn identical_frames_form_one_cluster() {
        let bin = geo_bin(1.0, 2.0, 3).unwrap();
        let frames: Vec<_> = (0..6).map(|i| frame(&format!("f{i}"), &bin, &[1.0, 0.0, 0.0])).collect();
        let r = cluster_bin(&frames, &DbscanParams::default(), 5, ExecMode::Sequential).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].medoid_frame_id, "f0");
        assert_eq!(r.clusters[0].exemplar_frame_ids, vec!["f0", "f1", "f2", "f3", "f4"]);
        assert!(r.noise_frame_ids.is_empty());
    }

    #[test]
    fn sparse_frames_are_all_noise() {
        let bin = GeoBin::NoGeo;
        let frames = vec![
            frame("a", &bin, &[1.0, 0.0, 0.0]),
            frame("b", &bin, &[0.0, 1.0, 0.0]),
            frame("c", &bin, &[0.0, 0.0, 1.0]),
        ];
        let r = cluster_bin(&frames, &DbscanParams::default(), 5, ExecMode::Sequential).unwrap();
        assert!(r.clusters.is_empty());
        assert_eq!(r.noise_frame_ids, vec!["a", "b", "c"]);
        assert_eq!(r.frame_count(), 3);
    }

    #[test]
    fn mixed_bins_rejected() {
        let a = geo_bin(1.0, 2.0, 3).unwrap();
        let frames = vec![frame("a", &a, &[1.0, 0.0]), frame("b", &GeoBin::NoGeo, &[1.0, 0.0])];
        assert!(matches!(
            cluster_bin(&frames, &DbscanParams::default(), 5, ExecMode::Sequential),
            Err(ClusterError::MixedBins { .. })
        ));
    }

    #[test]
    fn medoid_is_central_member() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0], vec![10.0]];
        assert_eq!(medoid(&pts, ExecMode::Sequential), Some(1));
        assert_eq!(medoid::<Vec<f64>>(&[], ExecMode::Sequential), None);
        // equal sums: first wins
        assert_eq!(medoid(&[vec![0.0], vec![1.0]], ExecMode::Parallel), Some(0));
    }

    #[test]
    fn report_json_shape() {
        let bin = geo_bin(42.3601, -71.0942, 3).unwrap();
        let frames: Vec<_> = (0..5).map(|i| frame(&format!("f{i}"), &bin, &[1.0, 0.01 * i as f64])).collect();
        let r = cluster_bin(&frames, &DbscanParams::default(), 2, ExecMode::Sequential).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["bin"], "42.360,-71.094");
        assert_eq!(v["clusters"][0]["cluster_id"], 0);
        assert_eq!(v["clusters"][0]["exemplar_frame_ids"].as_array().unwrap().len(), 2);
        let back: ClusterReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
