//! Versioned JSON checkpoint.
//!
//! Layout:
//!
//! ```json
//! {
//!   "format": "taco-checkpoint",
//!   "version": 1,
//!   "encoder": { ...EncoderConfig... },
//!   "vocab": ["[CLS]", "[SEP]", "[UNK]", ...],
//!   "idf": { "corpus_size": 500, "df": { "word": 3, ... } },
//!   "params": [ { "name": "video.proj.w", "shape": [128, 32], "values": [...] }, ... ]
//! }
//! ```
//!
//! Parameters appear in registration order. Values are written with
//! shortest round-trip formatting, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::toi::IdfTable;

use super::{EncoderConfig, Model, Vocab};

pub const CHECKPOINT_FORMAT: &str = "taco-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub vocab: Vocab,
    pub idf: Option<IdfTable>,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocab, idf: Option<&IdfTable>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder: model.config().clone(),
            vocab: vocab.clone(),
            idf: idf.cloned(),
            params,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        for p in &self.params {
            if store.id(&p.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", p.name)));
            }
            let t = Tensor::new(p.shape.clone(), p.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", p.name)))?;
            store.insert(p.name.clone(), t);
        }
        if self.vocab.len() != self.encoder.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but encoder expects {}",
                self.vocab.len(),
                self.encoder.vocab_size
            )));
        }
        Model::from_params(self.encoder.clone(), store)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let h: Header =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint header: {e}")))?;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown checkpoint format {:?}", h.format)));
        }
        if h.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                h.version
            )));
        }
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
