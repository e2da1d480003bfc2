//! Linear (PCA) and classical metric (MDS) projections.
//!
//! Both flip each component so that its largest-magnitude entry is positive; ties in magnitude
//! go to the lowest index.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `N×out_dim` projected coordinates.
    pub coords: Tensor,
    /// `out_dim×d` principal axes, unit rows.
    pub components: Tensor,
    pub variance_ratios: Vec<f64>,
}

/// Eigenpairs sorted by descending eigenvalue (stable for ties), as `(value, vector)`.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, eig.eigenvectors.column(i).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, v) in &mut pairs {
        orient(v);
    }
    pairs
}

fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn pca_project(x: &Tensor, out_dim: usize) -> Result<PcaResult> {
    let (n, d) = (x.rows(), x.cols());
    if out_dim == 0 || out_dim > n.min(d) {
        return Err(Error::Config(format!("PCA output dimension {out_dim} not in [1, {}]", n.min(d))));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row_slice(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |r, c| x.get(r, c) - mean[c]);
    let cov = centered.transpose() * &centered;
    let pairs = sorted_eigen(cov);
    let total: f64 = pairs.iter().map(|(v, _)| v.max(0.0)).sum();

    let mut components = Tensor::zeros(out_dim, d);
    let mut ratios = Vec::with_capacity(out_dim);
    for (k, (value, vec)) in pairs.iter().take(out_dim).enumerate() {
        components.row_slice_mut(k).copy_from_slice(vec);
        ratios.push(if total > 0.0 { value.max(0.0) / total } else { 0.0 });
    }
    let mut coords = Tensor::zeros(n, out_dim);
    for r in 0..n {
        for k in 0..out_dim {
            let v: f64 = (0..d).map(|c| centered[(r, c)] * components.get(k, c)).sum();
            coords.set(r, k, v);
        }
    }
    Ok(PcaResult {
        coords,
        components,
        variance_ratios: ratios,
    })
}

/// Classical (Torgerson) MDS on Euclidean distances between rows.
pub fn mds_project(x: &Tensor, out_dim: usize) -> Result<Tensor> {
    let n = x.rows();
    if n < 3 {
        return Err(Error::Contract(format!("MDS needs at least 3 points, got {n}")));
    }
    if out_dim == 0 || out_dim > n {
        return Err(Error::Config(format!("MDS output dimension {out_dim} not in [1, {n}]")));
    }
    let mut sq = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d2: f64 = x
                .row_slice(i)
                .iter()
                .zip(x.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if !d2.is_finite() {
                return Err(Error::Contract(format!("distance between rows {i} and {j} is not finite")));
            }
            sq[(i, j)] = d2;
        }
    }
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let pairs = sorted_eigen(b);
    let mut out = Tensor::zeros(n, out_dim);
    for (k, (value, vec)) in pairs.iter().take(out_dim).enumerate() {
        let s = value.max(0.0).sqrt();
        for i in 0..n {
            out.set(i, k, vec[i] * s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rank_ratios_sum_to_one() {
        let x = Tensor::from_rows(&[
            vec![1.0, 2.0, 0.5],
            vec![-1.0, 0.3, 2.0],
            vec![0.2, -0.7, 1.0],
            vec![0.0, 0.0, -1.0],
        ])
        .unwrap();
        let p = pca_project(&x, 3).unwrap();
        assert!((p.variance_ratios.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(p.variance_ratios.windows(2).all(|w| w[0] >= w[1]));
        assert!(pca_project(&x, 4).is_err());
    }

    #[test]
    fn three_point_toy() {
        // points (0,0), (2,0), (1,3): covariance (unnormalized) [[2,0],[0,6]]
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let p = pca_project(&x, 2).unwrap();
        assert!((p.variance_ratios[0] - 0.75).abs() < 1e-12);
        assert!((p.variance_ratios[1] - 0.25).abs() < 1e-12);
        assert!((p.components.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((p.components.get(1, 0) - 1.0).abs() < 1e-12);
        assert!((p.coords.get(2, 0) - 2.0).abs() < 1e-12);
        assert!((p.coords.get(0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mds_equilateral() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let y = mds_project(&x, 2).unwrap();
        let dist = |i: usize, j: usize| {
            ((y.get(i, 0) - y.get(j, 0)).powi(2) + (y.get(i, 1) - y.get(j, 1)).powi(2)).sqrt()
        };
        let base = dist(0, 1);
        assert!((base - 2f64.sqrt()).abs() < 1e-9);
        assert!((dist(0, 2) / base - 1.0).abs() < 1e-9);
        assert!((dist(1, 2) / base - 1.0).abs() < 1e-9);
        assert!(mds_project(&Tensor::row(&[1.0, 2.0]), 2).is_err());
    }
}
