//! The empirical circumplex model: emotion labels placed at equal angular steps on a circle,
//! each carrying a polarity, plus the label-pair distances used by the losses and metrics.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ECM_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub index: usize,
    pub name: String,
    pub slot: usize,
    pub polarity: Polarity,
}

/// Additive distance between two polarities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarityConstants {
    pub same: f64,
    pub neutral_cross: f64,
    pub opposite: f64,
}

impl Default for PolarityConstants {
    fn default() -> Self {
        Self {
            same: 0.0,
            neutral_cross: 2.0,
            opposite: 4.0,
        }
    }
}

impl PolarityConstants {
    pub fn between(&self, a: Polarity, b: Polarity) -> f64 {
        use Polarity::*;
        match (a, b) {
            _ if a == b => self.same,
            (Neutral, _) | (_, Neutral) => self.neutral_cross,
            _ => self.opposite,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelEntry {
    name: String,
    slot: usize,
    polarity: Polarity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EcmFile {
    version: u32,
    labels: Vec<LabelEntry>,
    polarity_constants: PolarityConstants,
}

/// A validated circumplex layout. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EcmFile", into = "EcmFile")]
pub struct EcmConfig {
    labels: Vec<EmotionLabel>,
    polarity_constants: PolarityConstants,
}

impl From<EcmConfig> for EcmFile {
    fn from(cfg: EcmConfig) -> Self {
        EcmFile {
            version: ECM_CONFIG_VERSION,
            labels: cfg
                .labels
                .into_iter()
                .map(|l| LabelEntry {
                    name: l.name,
                    slot: l.slot,
                    polarity: l.polarity,
                })
                .collect(),
            polarity_constants: cfg.polarity_constants,
        }
    }
}

impl TryFrom<EcmFile> for EcmConfig {
    type Error = Error;

    fn try_from(file: EcmFile) -> Result<Self> {
        if file.version != ECM_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported ECM config version {}",
                file.version
            )));
        }
        Self::new(
            file.labels
                .into_iter()
                .map(|l| (l.name, l.slot, l.polarity))
                .collect(),
            file.polarity_constants,
        )
    }
}

const DEFAULT_LAYOUT: [(&str, Polarity); 12] = [
    ("love", Polarity::Positive),
    ("joy", Polarity::Positive),
    ("excitement", Polarity::Positive),
    ("surprise", Polarity::Neutral),
    ("anger", Polarity::Negative),
    ("fear", Polarity::Negative),
    ("disgust", Polarity::Negative),
    ("sadness", Polarity::Negative),
    ("boredom", Polarity::Negative),
    ("calmness", Polarity::Positive),
    ("relief", Polarity::Positive),
    ("trust", Polarity::Positive),
];

impl Default for EcmConfig {
    /// The twelve-label layout: love at 0°, calmness at 270°, trust at 330°.
    fn default() -> Self {
        let labels = DEFAULT_LAYOUT
            .iter()
            .map(|&(name, polarity)| (name.to_string(), polarity))
            .collect::<Vec<_>>();
        Self::from_ordered(labels).expect("default layout is valid")
    }
}

impl EcmConfig {
    /// Builds a config from `(name, slot, polarity)` triples. The list position is the label index.
    pub fn new(
        labels: Vec<(String, usize, Polarity)>,
        polarity_constants: PolarityConstants,
    ) -> Result<Self> {
        let count = labels.len();
        if count < 2 {
            return Err(Error::Config(format!(
                "an ECM needs at least 2 labels, got {count}"
            )));
        }
        let pc = polarity_constants;
        if !(pc.same < pc.neutral_cross && pc.neutral_cross < pc.opposite) {
            return Err(Error::Config(format!(
                "polarity constants must satisfy same < neutral_cross < opposite, got {} / {} / {}",
                pc.same, pc.neutral_cross, pc.opposite
            )));
        }
        let mut slots = HashSet::new();
        let mut names = HashSet::new();
        for (name, slot, _) in &labels {
            if *slot >= count {
                return Err(Error::Config(format!(
                    "label '{name}' has slot {slot}, outside 0..{count}"
                )));
            }
            if !slots.insert(*slot) {
                return Err(Error::Config(format!(
                    "slot {slot} is assigned to more than one label (at '{name}')"
                )));
            }
            if !names.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate label name '{name}'")));
            }
        }
        let labels = labels
            .into_iter()
            .enumerate()
            .map(|(index, (name, slot, polarity))| EmotionLabel {
                index,
                name,
                slot,
                polarity,
            })
            .collect();
        Ok(Self {
            labels,
            polarity_constants,
        })
    }

    /// Labels placed on consecutive slots in list order.
    pub fn from_ordered(labels: Vec<(String, Polarity)>) -> Result<Self> {
        let labels = labels
            .into_iter()
            .enumerate()
            .map(|(slot, (name, polarity))| (name, slot, polarity))
            .collect();
        Self::new(labels, PolarityConstants::default())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[EmotionLabel] {
        &self.labels
    }

    pub fn polarity_constants(&self) -> PolarityConstants {
        self.polarity_constants
    }

    pub fn label(&self, index: usize) -> Result<&EmotionLabel> {
        self.labels.get(index).ok_or(Error::InvalidLabel {
            index,
            count: self.labels.len(),
        })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    pub fn step_angle(&self) -> f64 {
        2.0 * PI / self.labels.len() as f64
    }

    pub fn angle(&self, index: usize) -> Result<f64> {
        Ok(self.label(index)?.slot as f64 * self.step_angle())
    }

    /// Unit 2D position of a label on the circle.
    pub fn circle_point(&self, index: usize) -> Result<[f64; 2]> {
        let theta = self.angle(index)?;
        Ok([theta.cos(), theta.sin()])
    }

    pub fn angle_distance_steps(&self, i: usize, j: usize) -> Result<usize> {
        let a = self.label(i)?.slot;
        let b = self.label(j)?.slot;
        let diff = a.abs_diff(b);
        Ok(diff.min(self.labels.len() - diff))
    }

    /// Shortest angular separation on the circle, in `[0, π]`.
    pub fn delta_theta(&self, i: usize, j: usize) -> Result<f64> {
        Ok(self.angle_distance_steps(i, j)? as f64 * self.step_angle())
    }

    pub fn circumplex_distance(&self, i: usize, j: usize) -> Result<f64> {
        let c = self
            .polarity_constants
            .between(self.label(i)?.polarity, self.label(j)?.polarity);
        Ok(c + self.angle_distance_steps(i, j)? as f64)
    }

    pub fn target_cosine(&self, i: usize, j: usize) -> Result<f64> {
        let steps = self.angle_distance_steps(i, j)?;
        if steps == 0 {
            return Ok(1.0);
        }
        Ok(self.delta_theta(i, j)?.cos())
    }

    /// E×E matrix of target cosines, row-major.
    pub fn target_cosine_matrix(&self) -> Vec<f64> {
        let e = self.len();
        let mut out = vec![0.0; e * e];
        for i in 0..e {
            for j in 0..e {
                out[i * e + j] = self.target_cosine(i, j).expect("indices in range");
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EcmFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read ECM config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}
