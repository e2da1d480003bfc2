//! Head checkpoint files: one JSON header line, then every parameter as little-endian `f64`
//! in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, HeadParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "ecm-sphere-head";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    head_kind: HeadKind,
    config: HeadConfig,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: HeadConfig,
    pub params: HeadParams,
}

impl Checkpoint {
    pub fn new(config: HeadConfig, params: HeadParams) -> Result<Self> {
        config.validate()?;
        let shapes = HeadParams::shapes(params.kind(), &config);
        let actual: Vec<[usize; 2]> = params.tensors().iter().map(|t| t.shape()).collect();
        if shapes != actual {
            return Err(Error::Dimension("parameters do not match the head config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let kind = self.params.kind();
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            head_kind: kind,
            config: self.config.clone(),
            params: HeadParams::names(kind, &self.config)
                .into_iter()
                .zip(self.params.tensors())
                .map(|(name, t)| ParamMeta {
                    name,
                    shape: t.shape(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend(param_bytes(&self.params));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, detail: String| Error::Format {
            offset: offset as u64,
            detail,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt(bytes.len(), "checkpoint header line is not terminated".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| fmt(e.column().saturating_sub(1), format!("invalid checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(fmt(0, format!("unsupported checkpoint {} v{}", header.format, header.version)));
        }
        header.config.validate()?;
        let names = HeadParams::names(header.head_kind, &header.config);
        let shapes = HeadParams::shapes(header.head_kind, &header.config);
        let listed_names: Vec<&str> = header.params.iter().map(|p| p.name.as_str()).collect();
        let listed_shapes: Vec<[usize; 2]> = header.params.iter().map(|p| p.shape).collect();
        if listed_names != names.iter().map(String::as_str).collect::<Vec<_>>() || listed_shapes != shapes {
            return Err(fmt(0, "parameter list does not match the head config".into()));
        }
        let start = nl + 1;
        let expected: usize = shapes.iter().map(|[r, c]| r * c * 8).sum();
        let actual = bytes.len() - start;
        if actual != expected {
            return Err(fmt(
                start + actual.min(expected),
                format!("payload holds {actual} bytes, expected {expected}"),
            ));
        }
        let mut offset = start;
        let mut tensors = Vec::with_capacity(shapes.len());
        for [r, c] in shapes {
            let data: Vec<f64> = bytes[offset..offset + r * c * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(r, c, data).map_err(|e| fmt(offset, e.to_string()))?);
            offset += r * c * 8;
        }
        let params = HeadParams::from_tensors(header.head_kind, &header.config, tensors)?;
        Self::new(header.config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn param_bytes(params: &HeadParams) -> Vec<u8> {
    params.tensors().iter().flat_map(|t| t.to_le_bytes()).collect()
}

/// SHA-256 over every parameter's little-endian bytes in declaration order.
pub fn param_digest(params: &HeadParams) -> String {
    hex::encode(Sha256::digest(param_bytes(params)))
}
