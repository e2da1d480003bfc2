//! Frozen token-state datasets and the `ECM1` binary format.
//!
//! Layout: `b"ECM1"`, a little-endian `u32` header length, a UTF-8 JSON header, then every
//! record's `T×d` token matrix as row-major little-endian `f32`, in record order.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ecm::EcmConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ECM1";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub label_index: usize,
    /// `T×d` token states, `T ≥ 1`.
    pub tokens: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    d: usize,
    label_names: Vec<String>,
    records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    d: usize,
    label_names: Vec<String>,
    records: Vec<RecordMeta>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    id: String,
    label_index: usize,
    #[serde(rename = "T")]
    t: usize,
}

impl EmbeddingDataset {
    pub fn new(d: usize, label_names: Vec<String>, records: Vec<Record>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("dataset dimension must be positive".into()));
        }
        let mut ids = HashSet::new();
        for r in &records {
            if r.tokens.cols() != d {
                return Err(Error::Dimension(format!(
                    "record '{}' has width {}, dataset d = {d}",
                    r.id,
                    r.tokens.cols()
                )));
            }
            if r.label_index >= label_names.len() {
                return Err(Error::InvalidLabel {
                    index: r.label_index,
                    count: label_names.len(),
                });
            }
            if !r.tokens.is_finite() {
                return Err(Error::NonFinite(format!("record '{}' has non-finite token states", r.id)));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Contract(format!("duplicate record id '{}'", r.id)));
            }
        }
        Ok(Self {
            d,
            label_names,
            records,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label_index).collect()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_names.len()];
        for r in &self.records {
            counts[r.label_index] += 1;
        }
        counts
    }

    /// Errors unless the dataset's label names are exactly the ECM's, in order.
    pub fn check_labels(&self, ecm: &EcmConfig) -> Result<()> {
        if self.label_names != ecm.names() {
            return Err(Error::Config(format!(
                "dataset labels {:?} do not match ECM labels {:?}",
                self.label_names,
                ecm.names()
            )));
        }
        Ok(())
    }

    /// Records at the given positions, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            d: self.d,
            label_names: self.label_names.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Up to `per_label` records of each label, keeping the first ones in dataset order.
    pub fn take_per_label(&self, per_label: usize) -> Self {
        let mut seen = vec![0; self.label_names.len()];
        let keep: Vec<usize> = (0..self.records.len())
            .filter(|&i| {
                let l = self.records[i].label_index;
                seen[l] += 1;
                seen[l] <= per_label
            })
            .collect();
        self.subset(&keep)
    }

    /// Rounds every token state through `f32`, the storage precision.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.tokens.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            d: self.d,
            label_names: self.label_names.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordMeta {
                    id: r.id.clone(),
                    label_index: r.label_index,
                    t: r.tokens.rows(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::Config("dataset header exceeds 4 GiB".into()))?;
        let payload: usize = self.records.iter().map(|r| r.tokens.len() * 4).sum();
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for r in &self.records {
            for &v in r.tokens.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, detail: String| Error::Format {
            offset: offset as u64,
            detail,
        };
        if bytes.len() < PREAMBLE {
            return Err(fmt(bytes.len(), format!("file is {} bytes, shorter than the 8-byte preamble", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let payload_start = PREAMBLE + header_len;
        if bytes.len() < payload_start {
            return Err(fmt(
                bytes.len(),
                format!("header declares {header_len} bytes but the file ends first"),
            ));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start]).map_err(|e| {
            fmt(
                PREAMBLE + e.column().saturating_sub(1),
                format!("invalid header JSON: {e}"),
            )
        })?;
        if header.version != FORMAT_VERSION {
            return Err(fmt(PREAMBLE, format!("unsupported version {}", header.version)));
        }
        if header.d == 0 {
            return Err(fmt(PREAMBLE, "header d must be positive".into()));
        }
        if let Some(m) = header.records.iter().find(|m| m.t == 0) {
            return Err(fmt(PREAMBLE, format!("record '{}' has T = 0", m.id)));
        }

        let expected: usize = header.records.iter().map(|m| m.t * header.d * 4).sum();
        let actual = bytes.len() - payload_start;
        if actual < expected {
            return Err(fmt(
                bytes.len(),
                format!("payload truncated: {actual} of {expected} bytes present"),
            ));
        }
        if actual > expected {
            return Err(fmt(
                payload_start + expected,
                format!("{} unexpected bytes after the payload", actual - expected),
            ));
        }

        let mut offset = payload_start;
        let mut records = Vec::with_capacity(header.records.len());
        for m in header.records {
            let n = m.t * header.d;
            let mut data = Vec::with_capacity(n);
            for k in 0..n {
                let at = offset + 4 * k;
                let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(fmt(at, format!("non-finite value in record '{}'", m.id)));
                }
                data.push(v as f64);
            }
            offset += 4 * n;
            records.push(Record {
                id: m.id,
                label_index: m.label_index,
                tokens: Tensor::from_raw(m.t, header.d, data),
            });
        }
        Self::new(header.d, header.label_names, records).map_err(|e| fmt(PREAMBLE, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Reads JSON lines `{"id", "label", "vectors": [[..], ..]}` with labels named as in `ecm`.
    /// Blank lines are skipped; errors carry the byte offset of the offending line.
    pub fn import_jsonl(reader: impl Read, ecm: &EcmConfig) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            label: String,
            vectors: Vec<Vec<f64>>,
        }

        let mut reader = BufReader::new(reader);
        let mut records = Vec::new();
        let mut d = None;
        let mut offset = 0u64;
        let mut line = String::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let start = offset;
            offset += n as u64;
            if line.trim().is_empty() {
                continue;
            }
            let err = |detail: String| Error::Format {
                offset: start,
                detail: format!("line {line_no}: {detail}"),
            };
            let parsed: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let label_index = ecm
                .index_of(&parsed.label)
                .ok_or_else(|| err(format!("unknown label '{}'", parsed.label)))?;
            let tokens = Tensor::from_rows(&parsed.vectors).map_err(|e| err(e.to_string()))?;
            match d {
                None => d = Some(tokens.cols()),
                Some(d) if d != tokens.cols() => {
                    return Err(err(format!("vector width {} differs from {d}", tokens.cols())))
                }
                Some(_) => {}
            }
            records.push(Record {
                id: parsed.id,
                label_index,
                tokens,
            });
        }
        let d = d.ok_or(Error::Format {
            offset,
            detail: "no records; the dimension cannot be inferred".into(),
        })?;
        Self::new(d, ecm.names(), records)
    }
}
