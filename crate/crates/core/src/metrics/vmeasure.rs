//! Homogeneity, completeness and V-measure from the class/cluster contingency table.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `H(A|B)` from joint counts keyed `(a, b)` and marginal counts of `b`.
fn conditional_entropy(joint: &BTreeMap<(usize, usize), usize>, given: &BTreeMap<usize, usize>, n: f64, b_of: impl Fn(&(usize, usize)) -> usize) -> f64 {
    joint
        .iter()
        .map(|(key, &c)| {
            let nb = given[&b_of(key)] as f64;
            -(c as f64 / n) * (c as f64 / nb).ln()
        })
        .sum()
}

pub fn v_measure(true_labels: &[usize], pred: &[usize]) -> Result<VMeasure> {
    if true_labels.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} predictions",
            true_labels.len(),
            pred.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::Contract("v_measure needs at least one sample".into()));
    }
    let n = true_labels.len() as f64;
    let mut joint = BTreeMap::new();
    let mut classes = BTreeMap::new();
    let mut clusters = BTreeMap::new();
    for (&c, &k) in true_labels.iter().zip(pred) {
        *joint.entry((c, k)).or_insert(0) += 1;
        *classes.entry(c).or_insert(0) += 1;
        *clusters.entry(k).or_insert(0) += 1;
    }
    let h_c = entropy(classes.values().copied(), n);
    let h_k = entropy(clusters.values().copied(), n);
    let h_c_given_k = conditional_entropy(&joint, &clusters, n, |&(_, k)| k);
    let h_k_given_c = conditional_entropy(&joint, &classes, n, |&(c, _)| c);

    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v,
    })
}
