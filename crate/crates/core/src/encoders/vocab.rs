use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusRecord, Token};
use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// Token-text to id mapping. Ids 0..3 are `[CLS]`, `[SEP]`, `[UNK]`; the rest
/// are the case-folded corpus tokens in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn build(records: &[CorpusRecord]) -> Self {
        let words: BTreeSet<String> = records
            .iter()
            .flat_map(|r| r.tokens.iter().map(|t| t.text.to_lowercase()))
            .collect();
        let mut tokens = vec![CLS.to_string(), SEP.to_string(), UNK.to_string()];
        tokens.extend(words.into_iter().filter(|w| w != CLS && w != SEP && w != UNK));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("token id {id} outside vocabulary of {}", self.len())))
    }

    /// `[CLS] tokens... [SEP]`; unseen tokens map to `[UNK]`.
    pub fn encode(&self, tokens: &[Token]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(CLS_ID);
        ids.extend(tokens.iter().map(|t| self.id(&t.text).unwrap_or(UNK_ID)));
        ids.push(SEP_ID);
        ids
    }
}
