//! Spherical k-means: cosine assignment, renormalized mean centroids, best of several restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    /// `k×d`, unit rows.
    pub centroids: Tensor,
    /// `Σ (1 − cos)` to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
    /// Index of the winning restart.
    pub restart: usize,
}

pub fn spherical_kmeans(x: &Tensor, k: usize, restarts: usize, seed: u64) -> Result<ClusteringResult> {
    spherical_kmeans_with(x, k, restarts, DEFAULT_MAX_ITER, seed)
}

/// Restart `r` draws from stream `r` of the seed, so the winner (lowest inertia, then lowest
/// restart index) does not depend on scheduling.
pub fn spherical_kmeans_with(
    x: &Tensor,
    k: usize,
    restarts: usize,
    max_iter: usize,
    seed: u64,
) -> Result<ClusteringResult> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must lie in [1, {n}]")));
    }
    if restarts == 0 || max_iter == 0 {
        return Err(Error::Config("restarts and max_iter must be at least 1".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let runs: Vec<ClusteringResult> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let init = plus_plus_init(x, k, &mut rng);
            let mut out = lloyd(x, init, max_iter).0;
            out.restart = r;
            out
        })
        .collect();
    Ok(runs
        .into_iter()
        .min_by(|a, b| a.inertia.total_cmp(&b.inertia).then(a.restart.cmp(&b.restart)))
        .expect("at least one restart"))
}

/// k-means++ seeding with `1 − cos` as the sampling weight.
fn plus_plus_init(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| cos_dist(x.row_slice(i), x.row_slice(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(cos_dist(x.row_slice(i), x.row_slice(next)));
        }
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| unit_or_first_axis(x.row_slice(i))).collect();
    Tensor::from_raw(k, x.cols(), rows.concat())
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b) / (norm(a) * norm(b))).max(0.0)
}

fn unit_or_first_axis(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        e
    }
}

/// Index of the most similar centroid; ties go to the lowest index.
fn nearest(x: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..centroids.rows() {
        let s = dot(x, centroids.row_slice(c));
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn assign(x: &Tensor, centroids: &Tensor) -> Vec<usize> {
    (0..x.rows()).map(|i| nearest(x.row_slice(i), centroids).0).collect()
}

fn inertia(x: &Tensor, centroids: &Tensor, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| 1.0 - dot(x.row_slice(i), centroids.row_slice(c)))
        .sum()
}

/// Mean directions of each cluster. A cluster that is empty, or whose members sum to zero,
/// takes the point farthest from its current centroid.
fn update(x: &Tensor, old: &Tensor, assignments: &mut [usize]) -> Tensor {
    let (k, d) = (old.rows(), x.cols());
    let mut sums = vec![0.0; k * d];
    for (i, &c) in assignments.iter().enumerate() {
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row_slice(i)) {
            *s += v;
        }
    }
    let mut centroids = Tensor::zeros(k, d);
    let mut taken = vec![false; x.rows()];
    for c in 0..k {
        let s = &sums[c * d..(c + 1) * d];
        let n = norm(s);
        if n > 0.0 {
            centroids.row_slice_mut(c).iter_mut().zip(s).for_each(|(o, v)| *o = v / n);
            continue;
        }
        let far = (0..x.rows())
            .filter(|&i| !taken[i])
            .max_by(|&a, &b| {
                let da = 1.0 - dot(x.row_slice(a), old.row_slice(assignments[a]));
                let db = 1.0 - dot(x.row_slice(b), old.row_slice(assignments[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k ≤ n leaves a free point");
        taken[far] = true;
        assignments[far] = c;
        centroids
            .row_slice_mut(c)
            .copy_from_slice(&unit_or_first_axis(x.row_slice(far)));
    }
    centroids
}

/// Lloyd iterations from the given centroids. Also returns the inertia after every centroid
/// update, which never increases.
pub fn lloyd(x: &Tensor, init: Tensor, max_iter: usize) -> (ClusteringResult, Vec<f64>) {
    let mut centroids = init;
    let mut assignments = assign(x, &centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        centroids = update(x, &centroids, &mut assignments);
        history.push(inertia(x, &centroids, &assignments));
        let next = assign(x, &centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let inertia = inertia(x, &centroids, &assignments);
    (
        ClusteringResult {
            assignments,
            centroids,
            inertia,
            iterations,
            restart: 0,
        },
        history,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antipodal_bundles() {
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.001],
            vec![-1.0, 0.0],
            vec![-1.0, -0.001],
        ])
        .unwrap();
        let x = normalize(&x);
        let r = spherical_kmeans(&x, 2, 10, 1).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        assert!(r.inertia < 1e-6);
    }

    fn normalize(x: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = x.to_rows().iter().map(|r| unit_or_first_axis(r)).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean_direction() {
        let x = normalize(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let r = spherical_kmeans(&x, 1, 3, 0).unwrap();
        assert_eq!(r.assignments, vec![0, 0, 0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.centroids.get(0, 0) - h).abs() < 1e-15);
        assert!((r.centroids.get(0, 1) - h).abs() < 1e-15);
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        let x = Tensor::row(&[1.0, 0.0]);
        assert!(matches!(spherical_kmeans(&x, 2, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_cluster_takes_farthest_point() {
        let x = normalize(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![-1.0, 0.2]]).unwrap());
        // both centroids start on the first point; the second is empty after assignment
        let init = Tensor::from_rows(&[x.row_slice(0).to_vec(), x.row_slice(0).to_vec()]).unwrap();
        let (r, _) = lloyd(&x, init, 50);
        assert_eq!(r.assignments, vec![0, 0, 1]);
        assert!(r.centroids.row_norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
    }
}
