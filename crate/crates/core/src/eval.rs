//! End-to-end evaluation of an embedding set against an ECM.

use rayon::prelude::*;

use crate::autodiff::NormMode;
use crate::data::EmbeddingDataset;
use crate::ecm::EcmConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadParams};
use crate::metrics::kmeans::{spherical_kmeans_with, DEFAULT_MAX_ITER, DEFAULT_RESTARTS};
use crate::metrics::{avg_cos_sim, cd_r, mds_project, pca_project, v_measure, PcaResult, VMeasure};
use crate::tensor::{dot, norm, Tensor};

const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
    /// Samples per label fed to MDS.
    pub mds_per_label: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
            seed: 42,
            mds_per_label: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub labels: Vec<usize>,
    pub clusters: Vec<usize>,
    pub inertia: f64,
    pub scores: VMeasure,
    pub avg_cos_sim: Tensor,
    /// `None` when the correlation is undefined (fewer than 3 labels or a constant series).
    pub cd_r: Option<f64>,
    pub pca: PcaResult,
    pub mds: Tensor,
    pub mds_labels: Vec<usize>,
}

/// Pooled unit embeddings of every record, in dataset order.
pub fn embed_dataset(params: &HeadParams, cfg: &HeadConfig, dataset: &EmbeddingDataset) -> Result<Tensor> {
    if dataset.d() != cfg.d {
        return Err(Error::Dimension(format!(
            "dataset d = {} but head d = {}",
            dataset.d(),
            cfg.d
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Contract("dataset has no records".into()));
    }
    let parts: Vec<Tensor> = dataset
        .records()
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let samples: Vec<&Tensor> = chunk.iter().map(|r| &r.tokens).collect();
            params.embed(cfg, &samples, NormMode::Checked)
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(dataset.len(), cfg.d, data)
}

/// First `per_label` indices of each label, in order.
pub fn per_label_indices(labels: &[usize], per_label: usize) -> Vec<usize> {
    let mut seen = std::collections::HashMap::new();
    (0..labels.len())
        .filter(|&i| {
            let c = seen.entry(labels[i]).or_insert(0);
            *c += 1;
            *c <= per_label
        })
        .collect()
}

pub fn rows_of(x: &Tensor, indices: &[usize]) -> Tensor {
    let data: Vec<f64> = indices.iter().flat_map(|&i| x.row_slice(i).iter().copied()).collect();
    Tensor::from_raw(indices.len(), x.cols(), data)
}

pub fn evaluate(emb: &Tensor, labels: &[usize], ecm: &EcmConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    if emb.rows() != labels.len() {
        return Err(Error::Dimension(format!("{} embeddings, {} labels", emb.rows(), labels.len())));
    }
    let avg = avg_cos_sim(emb, labels, ecm)?;
    let km = spherical_kmeans_with(emb, ecm.len(), cfg.restarts, cfg.max_iter, cfg.seed)?;
    let scores = v_measure(labels, &km.assignments)?;
    let cd = match cd_r(&avg, ecm) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    let pca = pca_project(emb, 2.min(emb.cols()).min(emb.rows()))?;
    let keep = per_label_indices(labels, cfg.mds_per_label);
    let mds = mds_project(&rows_of(emb, &keep), 2)?;
    Ok(EvalReport {
        labels: labels.to_vec(),
        clusters: km.assignments,
        inertia: km.inertia,
        scores,
        avg_cos_sim: avg,
        cd_r: cd,
        pca,
        mds,
        mds_labels: keep.iter().map(|&i| labels[i]).collect(),
    })
}

pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::DegenerateNorm(format!("row {r} projects to the origin")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// V-measure after projecting to `dim` principal components and renormalizing rows.
/// At `dim ≥ d` the projection is a rotation, so the embeddings are clustered unchanged.
pub fn v_measure_at_dim(emb: &Tensor, labels: &[usize], k: usize, dim: usize, cfg: &EvalConfig) -> Result<VMeasure> {
    let reduced = if dim >= emb.cols() {
        emb.clone()
    } else {
        normalize_rows(&pca_project(emb, dim)?.coords)?
    };
    let km = spherical_kmeans_with(&reduced, k, cfg.restarts, cfg.max_iter, cfg.seed)?;
    v_measure(labels, &km.assignments)
}

/// Label mean directions (normalized per-label sums), `E×d`.
pub fn label_centroids(emb: &Tensor, labels: &[usize], n_labels: usize) -> Result<Tensor> {
    let d = emb.cols();
    let mut sums = Tensor::zeros(n_labels, d);
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_labels {
            return Err(Error::InvalidLabel { index: l, count: n_labels });
        }
        for (s, v) in sums.row_slice_mut(l).iter_mut().zip(emb.row_slice(i)) {
            *s += v;
        }
    }
    normalize_rows(&sums)
}

/// Smallest angle in radians between two distinct label mean directions.
pub fn min_centroid_angle(emb: &Tensor, labels: &[usize], n_labels: usize) -> Result<f64> {
    let c = label_centroids(emb, labels, n_labels)?;
    let mut best = f64::INFINITY;
    for i in 0..n_labels {
        for j in i + 1..n_labels {
            best = best.min(dot(c.row_slice(i), c.row_slice(j)).clamp(-1.0, 1.0).acos());
        }
    }
    Ok(best)
}
