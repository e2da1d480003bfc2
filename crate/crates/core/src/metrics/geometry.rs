//! Label-level geometry of an embedding set: mean cross-label cosine and its correlation with
//! circumplex distance.

use crate::ecm::EcmConfig;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// `E×E` matrix whose `(i, j)` entry is the mean of `e_kᵀe_l` over all `N_i·N_j` pairs with
/// `y_k = i`, `y_l = j` (self pairs included on the diagonal).
pub fn avg_cos_sim(x: &Tensor, labels: &[usize], ecm: &EcmConfig) -> Result<Tensor> {
    if x.rows() != labels.len() {
        return Err(Error::Dimension(format!("{} embeddings, {} labels", x.rows(), labels.len())));
    }
    let e = ecm.len();
    let d = x.cols();
    let mut sums = vec![0.0; e * d];
    let mut counts = vec![0usize; e];
    for (i, &l) in labels.iter().enumerate() {
        if l >= e {
            return Err(Error::InvalidLabel { index: l, count: e });
        }
        counts[l] += 1;
        for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(x.row_slice(i)) {
            *s += v;
        }
    }
    let missing: Vec<&str> = ecm
        .labels()
        .iter()
        .filter(|l| counts[l.index] == 0)
        .map(|l| l.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLabel(missing.join(", ")));
    }
    let mut out = Tensor::zeros(e, e);
    for i in 0..e {
        for j in 0..e {
            let s = dot(&sums[i * d..(i + 1) * d], &sums[j * d..(j + 1) * d]);
            out.set(i, j, s / (counts[i] * counts[j]) as f64);
        }
    }
    Ok(out)
}

/// Pearson correlation of two equal-length series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!("pearson needs two equal series of length ≥ 2, got {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Circumplex distance and `1 − AvgCosSim` for every unordered label pair `i < j`.
pub fn cd_pairs(avg: &Tensor, ecm: &EcmConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let e = ecm.len();
    if avg.shape() != [e, e] {
        return Err(Error::Dimension(format!("AvgCosSim is {:?}, ECM has {e} labels", avg.shape())));
    }
    let mut cd = Vec::new();
    let mut dissim = Vec::new();
    for i in 0..e {
        for j in i + 1..e {
            cd.push(ecm.circumplex_distance(i, j)?);
            dissim.push(1.0 - avg.get(i, j));
        }
    }
    Ok((cd, dissim))
}

pub fn cd_r(avg: &Tensor, ecm: &EcmConfig) -> Result<f64> {
    if ecm.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "CD-r needs at least 3 labels, got {}",
            ecm.len()
        )));
    }
    let (cd, dissim) = cd_pairs(avg, ecm)?;
    pearson(&cd, &dissim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::Polarity;

    fn ecm3() -> EcmConfig {
        EcmConfig::from_ordered(vec![
            ("a".into(), Polarity::Positive),
            ("b".into(), Polarity::Neutral),
            ("c".into(), Polarity::Negative),
        ])
        .unwrap()
    }

    #[test]
    fn one_sample_per_label_is_the_gram_matrix() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        let m = avg_cos_sim(&x, &[0, 1, 2], &ecm3()).unwrap();
        assert_eq!(m, x.matmul(&x.transpose()).unwrap());
    }

    #[test]
    fn identical_embeddings_give_ones() {
        let x = Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        let m = avg_cos_sim(&x, &[0, 1, 2, 0], &ecm3()).unwrap();
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn missing_label_is_named() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        match avg_cos_sim(&x, &[0, 2], &ecm3()) {
            Err(Error::MissingLabel(names)) => assert_eq!(names, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pearson_extremes() {
        assert!((pearson(&[1.0, 2.0, 3.0, 7.0], &[3.0, 5.0, 7.0, 15.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 4.5 / (2f64 * 61.0 / 6.0).sqrt()).abs() < 1e-14);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    }
}
