//! Clustering, label-geometry and projection metrics.

pub mod geometry;
pub mod kmeans;
pub mod projection;
pub mod theory;
pub mod vmeasure;

pub use geometry::{avg_cos_sim, cd_r, pearson};
pub use kmeans::{spherical_kmeans, ClusteringResult};
pub use projection::{mds_project, pca_project, PcaResult};
pub use theory::{theory_check_sincere_simplex, SimplexCheckConfig, SimplexReport};
pub use vmeasure::{v_measure, VMeasure};
