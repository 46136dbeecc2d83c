//! Checkpoint layout: the 8-byte magic, a little-endian u64 header length,
//! a JSON header describing every array, then all arrays as little-endian
//! f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MaskConfig, ModelConfig, ModelParams, DENSE, NAMES};
use crate::autodiff::{Parameter, Tensor};
use crate::embeddings::{EmbeddingTable, KeyMode, Scope, Vocab};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, WordTables};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ZSVQACK1";

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    relative_lr: f64,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    array: ArrayHeader,
    key_mode: KeyMode,
    scope: Scope,
    keys: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TablesHeader {
    question: usize,
    answer: usize,
    class: Option<usize>,
    tables: Vec<TableHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    features: FeatureConfig,
    mask: MaskConfig,
    params: Vec<ArrayHeader>,
    tables: Option<TablesHeader>,
}

/// A trained model with the configuration needed to feed it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub features: FeatureConfig,
    pub mask: MaskConfig,
}

fn array_header(p: &Parameter) -> ArrayHeader {
    ArrayHeader {
        name: p.name.clone(),
        rows: p.value.rows(),
        cols: p.value.cols(),
        trainable: p.trainable,
        relative_lr: p.relative_lr,
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", 0, msg)
}

struct Blob<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Blob<'_> {
    fn take(&mut self, h: &ArrayHeader) -> Result<Parameter> {
        let n = h.rows.checked_mul(h.cols).ok_or_else(|| bad("array size overflows"))?;
        let end = self.pos + n * 4;
        if end > self.bytes.len() {
            return Err(bad(format!("data ends inside array '{}'", h.name)));
        }
        let data: Vec<f64> = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        self.pos = end;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("array '{}' has non-finite values", h.name)));
        }
        let mut p = Parameter::new(h.name.clone(), Tensor::from_vec(h.rows, h.cols, data));
        p.trainable = h.trainable;
        p.relative_lr = h.relative_lr;
        Ok(p)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.params.is_finite() {
            return Err(Error::Numerical("refusing to save non-finite parameters".into()));
        }
        let tables = self.params.tables().map(|t| TablesHeader {
            question: t.question,
            answer: t.answer,
            class: t.class,
            tables: t
                .tables
                .iter()
                .map(|e| TableHeader {
                    array: array_header(e.parameter()),
                    key_mode: e.key_mode(),
                    scope: e.scope(),
                    keys: e.vocab().keys().to_vec(),
                })
                .collect(),
        });
        let header = Header {
            model: *self.params.config(),
            features: self.features.clone(),
            mask: self.mask,
            params: self.params.dense().iter().map(array_header).collect(),
            tables,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays = self
            .params
            .dense()
            .iter()
            .chain(self.params.tables().into_iter().flat_map(|t| t.tables.iter().map(EmbeddingTable::parameter)));
        for p in arrays {
            for x in p.value.data() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.params.len() != DENSE || header.params.iter().zip(NAMES).any(|(h, n)| h.name != n) {
            return Err(bad("unexpected dense parameter list"));
        }
        let mut blob = Blob { bytes, pos: 16 + len };
        let dense = header.params.iter().map(|h| blob.take(h)).collect::<Result<Vec<_>>>()?;
        let tables = match header.tables {
            None => None,
            Some(th) => {
                let mut tables = Vec::with_capacity(th.tables.len());
                for t in &th.tables {
                    if t.keys.len() != t.array.rows {
                        return Err(bad(format!("table '{}' has {} keys for {} rows", t.array.name, t.keys.len(), t.array.rows)));
                    }
                    let p = blob.take(&t.array)?;
                    let mut e = EmbeddingTable::new(p.name.clone(), Vocab::new(t.keys.iter().cloned()), p.value, t.key_mode, t.scope)?;
                    e.set_trainable(p.trainable);
                    e.set_relative_lr(p.relative_lr)?;
                    tables.push(e);
                }
                let n = tables.len();
                if th.question >= n || th.answer >= n || th.class.is_some_and(|c| c >= n) {
                    return Err(bad("table role index out of range"));
                }
                Some(WordTables { tables, question: th.question, answer: th.answer, class: th.class })
            }
        };
        if blob.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - blob.pos)));
        }
        let params = ModelParams::from_parts(header.model, dense, tables)?;
        Ok(Checkpoint { params, features: header.features, mask: header.mask })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { line, message, .. } => Error::format(path.display().to_string(), line, message),
            other => other,
        })
    }
}
