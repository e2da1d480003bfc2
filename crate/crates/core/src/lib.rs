//! Emotion-circumplex geometry on the unit hypersphere: projection heads, contrastive
//! objectives, a small training loop and the metrics used to evaluate embedding geometry.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod ecm;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use ecm::{EcmConfig, EmotionLabel, Polarity, PolarityConstants};
pub use error::{Error, Result};
pub use heads::{HeadConfig, HeadKind, HeadParams, Pooling};
pub use tensor::Tensor;
