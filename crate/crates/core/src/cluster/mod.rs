//! Geolocation-partitioned clustering of unlabeled frames.

pub mod dbscan;
pub mod geo;
pub mod report;

pub use dbscan::{dbscan, neighbor_lists, DbscanParams, DbscanParamsError, DbscanResult, NOISE};
pub use geo::{geo_bin, geo_bin_opt, GeoBin, GeoError, DEFAULT_GEO_PRECISION};
pub use report::{cluster_bin, cluster_bins, medoid, ClusterError, ClusterFrame, ClusterReport, ClusterSummary, DEFAULT_EXEMPLARS};
