use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One text token with its Universal POS tag and the index of the source word
/// it belongs to (subword pieces of one word share a `word_id`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Token {
    pub text: String,
    pub pos: String,
    pub word_id: usize,
}

/// One video-text pair. `tokens` never contains `[CLS]`/`[SEP]`; the text
/// encoder adds them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub video_features: Vec<Vec<f64>>,
    pub tokens: Vec<Token>,
}

impl CorpusRecord {
    pub fn num_frames(&self) -> usize {
        self.video_features.len()
    }

    pub fn feature_width(&self) -> usize {
        self.video_features.first().map_or(0, Vec::len)
    }

    /// Checks the record invariants; `line` is used for error reporting.
    pub fn validate(&self, line: usize) -> Result<()> {
        let fail = |message: String| Error::Validation { line, message };
        if self.video_features.is_empty() {
            return Err(fail(format!("record {}: video has no frames", self.id)));
        }
        let w = self.feature_width();
        if w == 0 {
            return Err(fail(format!("record {}: zero-width video features", self.id)));
        }
        for (i, row) in self.video_features.iter().enumerate() {
            if row.len() != w {
                return Err(fail(format!(
                    "record {}: frame {i} has width {}, expected {w}",
                    self.id,
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("record {}: non-finite feature in frame {i}", self.id)));
            }
        }
        for pair in self.tokens.windows(2) {
            if pair[1].word_id < pair[0].word_id {
                return Err(fail(format!("record {}: word_id decreases", self.id)));
            }
        }
        if let Some(t) = self.tokens.iter().find(|t| t.text == "[CLS]" || t.text == "[SEP]") {
            return Err(fail(format!(
                "record {}: special token {} must not appear in the corpus",
                self.id, t.text
            )));
        }
        Ok(())
    }
}

/// Parses JSON-lines text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        rec.validate(line_no)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
