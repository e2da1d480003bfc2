//! Contrastive objectives over a batch of unit embeddings.
//!
//! Each objective comes in two forms: a tape form taking the embedding matrix as a [`Var`] (used
//! for training and gradient checks) and a value form over a validated [`LabeledBatch`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Var};
use crate::ecm::EcmConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sincere,
    Softcse,
    Circularcse,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Sincere, LossKind::Softcse, LossKind::Circularcse];

    pub fn display_name(self) -> &'static str {
        match self {
            LossKind::Sincere => "SINCERE",
            LossKind::Softcse => "SoftCSE",
            LossKind::Circularcse => "CircularCSE",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Sincere => "sincere",
            LossKind::Softcse => "softcse",
            LossKind::Circularcse => "circularcse",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sincere" => Ok(LossKind::Sincere),
            "softcse" => Ok(LossKind::Softcse),
            "circularcse" => Ok(LossKind::Circularcse),
            _ => Err(Error::Config(format!("unknown loss '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            margin: 0.0,
        }
    }
}

impl LossConfig {
    pub fn new(tau: f64, margin: f64) -> Result<Self> {
        let cfg = Self { tau, margin };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Unit-norm embeddings with one label index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    embeddings: Tensor,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} embeddings but {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::Contract("a batch needs at least two samples".into()));
        }
        for (i, n) in embeddings.row_norms().into_iter().enumerate() {
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!("embedding {i} has norm {n}, not 1")));
            }
        }
        Ok(Self { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_labels(labels: &[usize], ecm: Option<&EcmConfig>, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{rows} embeddings but {} labels", labels.len())));
    }
    if rows < 2 {
        return Err(Error::Contract("a batch needs at least two samples".into()));
    }
    if let Some(ecm) = ecm {
        if let Some(&bad) = labels.iter().find(|&&l| l >= ecm.len()) {
            return Err(Error::InvalidLabel {
                index: bad,
                count: ecm.len(),
            });
        }
    }
    Ok(())
}

/// Constant matrices describing which pairs enter the softmax objectives.
struct PairWeights {
    /// Negative-term weight per (anchor, other) pair.
    negatives: Tensor,
    /// Averaging weight per (anchor, positive) pair; sums to 1 over all valid anchors.
    positives: Tensor,
}

fn pair_weights(labels: &[usize], ecm: Option<&EcmConfig>) -> Result<PairWeights> {
    let b = labels.len();
    let mut negatives = Tensor::zeros(b, b);
    let mut positives = Tensor::zeros(b, b);
    let mut pos_counts = vec![0usize; b];
    for i in 0..b {
        let neg: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[i]).collect();
        pos_counts[i] = (0..b).filter(|&j| j != i && labels[j] == labels[i]).count();
        match ecm {
            None => neg.iter().for_each(|&k| negatives.set(i, k, 1.0)),
            Some(ecm) if !neg.is_empty() => {
                let raw: Vec<f64> = neg
                    .iter()
                    .map(|&k| ecm.target_cosine(labels[i], labels[k]).map(|c| 1.0 - c))
                    .collect::<Result<_>>()?;
                let mean = raw.iter().sum::<f64>() / raw.len() as f64;
                if mean <= 0.0 {
                    return Err(Error::DegenerateGeometry(format!(
                        "anchor {i}: negative weights have zero mean"
                    )));
                }
                for (&k, r) in neg.iter().zip(raw) {
                    negatives.set(i, k, r / mean);
                }
            }
            Some(_) => {}
        }
    }
    let valid = pos_counts.iter().filter(|&&c| c > 0).count();
    if valid == 0 {
        return Err(Error::EmptyObjective("no anchor has a same-label partner".into()));
    }
    for i in 0..b {
        for j in 0..b {
            if j != i && labels[j] == labels[i] {
                positives.set(i, j, 1.0 / (pos_counts[i] as f64 * valid as f64));
            }
        }
    }
    Ok(PairWeights {
        negatives,
        positives,
    })
}

/// Per-pair term `log(1 + Σ_k w_ik exp((s_ik − s_ij)/τ))`, averaged by the positive weights.
fn weighted_sincere<'t>(emb: Var<'t>, w: PairWeights, tau: f64) -> Result<Var<'t>> {
    let tape = emb.tape();
    let s = emb.matmul(emb.transpose()?)?;
    let neg_mass = s
        .add_scalar(-1.0)?
        .scale(1.0 / tau)?
        .exp()?
        .mul(tape.leaf(w.negatives))?
        .sum(Reduce::Cols)?;
    let pos_boost = s.scale(-1.0 / tau)?.add_scalar(1.0 / tau)?.exp()?;
    let terms = pos_boost.mul(neg_mass)?.add_scalar(1.0)?.log()?;
    terms.mul(tape.leaf(w.positives))?.sum(Reduce::All)
}

pub fn sincere_loss_var<'t>(emb: Var<'t>, labels: &[usize], cfg: &LossConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    check_labels(labels, None, emb.shape()[0])?;
    weighted_sincere(emb, pair_weights(labels, None)?, cfg.tau)
}

pub fn softcse_loss_var<'t>(
    emb: Var<'t>,
    labels: &[usize],
    cfg: &LossConfig,
    ecm: &EcmConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    check_labels(labels, Some(ecm), emb.shape()[0])?;
    weighted_sincere(emb, pair_weights(labels, Some(ecm))?, cfg.tau)
}

pub fn circularcse_loss_var<'t>(
    emb: Var<'t>,
    labels: &[usize],
    cfg: &LossConfig,
    ecm: &EcmConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let b = emb.shape()[0];
    check_labels(labels, Some(ecm), b)?;
    let mut target = Tensor::zeros(b, b);
    let mut same = Tensor::zeros(b, b);
    let mut cross = Tensor::zeros(b, b);
    let norm = 1.0 / (b * (b - 1)) as f64;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            target.set(i, j, ecm.target_cosine(labels[i], labels[j])?);
            if labels[i] == labels[j] {
                same.set(i, j, norm);
            } else {
                cross.set(i, j, norm);
            }
        }
    }
    let tape = emb.tape();
    let diff = emb.matmul(emb.transpose()?)?.sub(tape.leaf(target))?;
    let hinge = diff
        .abs()?
        .add_scalar(-cfg.margin)?
        .relu()?
        .square()?
        .mul(tape.leaf(same))?;
    let fit = diff.square()?.mul(tape.leaf(cross))?;
    hinge.add(fit)?.sum(Reduce::All)
}

pub fn loss_var<'t>(
    kind: LossKind,
    emb: Var<'t>,
    labels: &[usize],
    cfg: &LossConfig,
    ecm: &EcmConfig,
) -> Result<Var<'t>> {
    match kind {
        LossKind::Sincere => sincere_loss_var(emb, labels, cfg),
        LossKind::Softcse => softcse_loss_var(emb, labels, cfg, ecm),
        LossKind::Circularcse => circularcse_loss_var(emb, labels, cfg, ecm),
    }
}

fn eval_batch(
    batch: &LabeledBatch,
    f: impl for<'t> FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let tape = Tape::checked();
    let emb = tape.leaf(batch.embeddings.clone());
    let v = f(emb)?.item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss evaluated to {v}")))
    }
}

pub fn sincere_loss(batch: &LabeledBatch, cfg: &LossConfig) -> Result<f64> {
    eval_batch(batch, |e| sincere_loss_var(e, &batch.labels, cfg))
}

pub fn softcse_loss(batch: &LabeledBatch, cfg: &LossConfig, ecm: &EcmConfig) -> Result<f64> {
    eval_batch(batch, |e| softcse_loss_var(e, &batch.labels, cfg, ecm))
}

pub fn circularcse_loss(batch: &LabeledBatch, cfg: &LossConfig, ecm: &EcmConfig) -> Result<f64> {
    eval_batch(batch, |e| circularcse_loss_var(e, &batch.labels, cfg, ecm))
}

pub fn loss(kind: LossKind, batch: &LabeledBatch, cfg: &LossConfig, ecm: &EcmConfig) -> Result<f64> {
    eval_batch(batch, |e| loss_var(kind, e, &batch.labels, cfg, ecm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::Polarity;

    fn batch(rows: &[&[f64]], labels: &[usize]) -> LabeledBatch {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        LabeledBatch::new(Tensor::from_rows(&rows).unwrap(), labels.to_vec()).unwrap()
    }

    fn ring4() -> EcmConfig {
        EcmConfig::from_ordered(vec![
            ("a".into(), Polarity::Positive),
            ("b".into(), Polarity::Positive),
            ("c".into(), Polarity::Negative),
            ("d".into(), Polarity::Negative),
        ])
        .unwrap()
    }

    #[test]
    fn sincere_hand_values() {
        let cfg = LossConfig::new(1.0, 0.0).unwrap();
        let b = batch(&[&[1.0, 0.0], &[1.0, 0.0]], &[0, 0]);
        assert_eq!(sincere_loss(&b, &cfg).unwrap(), 0.0);

        let b = batch(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]], &[0, 0, 1]);
        let expected = (1.0 + (-1.0_f64).exp()).ln();
        assert!((sincere_loss(&b, &cfg).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn sincere_needs_a_positive() {
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert!(matches!(
            sincere_loss(&b, &LossConfig::default()),
            Err(Error::EmptyObjective(_))
        ));
    }

    #[test]
    fn softcse_weights_follow_angles() {
        // labels a, a, b (π/2 away), c (π away) on a 4-ring
        let ecm = ring4();
        let w = pair_weights(&[0, 0, 1, 2], Some(&ecm)).unwrap();
        assert!((w.negatives.get(0, 2) - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.negatives.get(0, 3) - 4.0 / 3.0).abs() < 1e-15);

        let cfg = LossConfig::new(1.0, 0.0).unwrap();
        let b = batch(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &[0, 0, 1, 2]);
        let anchor0 = -(1.0_f64.exp() / (1.0_f64.exp() + 2.0)).ln();
        assert!((anchor0 - 0.5514).abs() < 1e-4);
        // both valid anchors see the same configuration
        assert!((softcse_loss(&b, &cfg, &ecm).unwrap() - anchor0).abs() < 1e-12);
        assert_eq!(w.positives.get(0, 1), 0.5);
    }

    #[test]
    fn circular_hinge_values() {
        let ecm = ring4();
        let s: f64 = 0.9;
        let other = [s, (1.0 - s * s).sqrt()];
        let b = batch(&[&[1.0, 0.0], &other], &[1, 1]);
        let l = circularcse_loss(&b, &LossConfig::new(0.05, 0.0).unwrap(), &ecm).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
        let l = circularcse_loss(&b, &LossConfig::new(0.05, 0.15).unwrap(), &ecm).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn circular_zero_on_exact_ring() {
        let ecm = EcmConfig::default();
        let rows: Vec<Vec<f64>> = (0..ecm.len()).map(|i| ecm.circle_point(i).unwrap().to_vec()).collect();
        let labels: Vec<usize> = (0..ecm.len()).collect();
        let b = LabeledBatch::new(Tensor::from_rows(&rows).unwrap(), labels).unwrap();
        assert!(circularcse_loss(&b, &LossConfig::default(), &ecm).unwrap() < 1e-28);
    }

    #[test]
    fn batch_validation() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.0]]).unwrap();
        assert!(LabeledBatch::new(t, vec![0, 0]).is_err());
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(LabeledBatch::new(t, vec![0]).is_err());
        let b = batch(&[&[1.0, 0.0], &[1.0, 0.0]], &[0, 7]);
        assert!(matches!(
            circularcse_loss(&b, &LossConfig::default(), &ring4()),
            Err(Error::InvalidLabel { index: 7, count: 4 })
        ));
        assert!(LossConfig::new(0.0, 0.0).is_err());
        assert!(LossConfig::new(0.1, -1.0).is_err());
    }

    #[test]
    fn parse_kinds() {
        for k in LossKind::ALL {
            assert_eq!(k.to_string().parse::<LossKind>().unwrap(), k);
        }
        assert_eq!("SoftCSE".parse::<LossKind>().unwrap(), LossKind::Softcse);
    }
}
