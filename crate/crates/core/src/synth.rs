//! Planted-circumplex synthetic datasets.
//!
//! Each label's mean direction is its circle point in the first two axes of ℝ^d. The signal
//! token is `normalize(κ·μ + z)` with standard Gaussian `z`; extra tokens are random unit
//! vectors scaled by `distractor_scale`, and token order is shuffled per record.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, Record};
use crate::ecm::EcmConfig;
use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub ecm: EcmConfig,
    pub n_per_label: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Concentration; `None` means noise-free.
    pub kappa: Option<f64>,
    pub distractor_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(ecm: EcmConfig, n_per_label: usize, d: usize, t: usize, kappa: Option<f64>, seed: u64) -> Result<Self> {
        let cfg = Self {
            ecm,
            n_per_label,
            d,
            t,
            kappa,
            distractor_scale: 1.0,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::Config(format!("synthetic d must be at least 3, got {}", self.d)));
        }
        if self.n_per_label == 0 || self.t == 0 {
            return Err(Error::Config("n_per_label and T must be at least 1".into()));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::Config(format!("concentration must be positive, got {k}")));
            }
        }
        if !(self.distractor_scale >= 0.0 && self.distractor_scale.is_finite()) {
            return Err(Error::Config("distractor_scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Label mean direction in ℝ^d.
    pub fn mean_direction(&self, label: usize) -> Result<Vec<f64>> {
        let [x, y] = self.ecm.circle_point(label)?;
        let mut mu = vec![0.0; self.d];
        mu[0] = x;
        mu[1] = y;
        Ok(mu)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Deterministic in `(cfg.seed, split)`; records are ordered label by label.
pub fn synth_generate(cfg: &SynthConfig, split: Split) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream());
    let names = cfg.ecm.names();
    let mut records = Vec::with_capacity(cfg.ecm.len() * cfg.n_per_label);
    for (label, name) in names.iter().enumerate() {
        let mu = cfg.mean_direction(label)?;
        for k in 0..cfg.n_per_label {
            let signal = match cfg.kappa {
                None => mu.clone(),
                Some(kappa) => {
                    let z = gaussian(&mut rng, cfg.d);
                    unit(mu.iter().zip(z).map(|(m, z)| kappa * m + z).collect())
                }
            };
            let mut tokens = vec![signal];
            for _ in 1..cfg.t {
                let dir = unit(gaussian(&mut rng, cfg.d));
                tokens.push(dir.into_iter().map(|v| v * cfg.distractor_scale).collect());
            }
            tokens.shuffle(&mut rng);
            records.push(Record {
                id: format!("{split}-{name}-{k:05}"),
                label_index: label,
                tokens: Tensor::from_rows(&tokens)?,
            });
        }
    }
    EmbeddingDataset::new(cfg.d, names, records)
}
