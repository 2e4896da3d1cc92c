//! Token-of-interest selection and IDF weighting for the token-level loss.
//!
//! A document is one caption. Words are rebuilt from subword pieces by
//! `word_id` (a leading `##` on a piece is dropped) and case-folded before
//! counting. `idf(w) = ln(|D| / (1 + df(w)))`, which is negative for words
//! that occur in every caption; weights clamp each idf at [`IDF_FLOOR`]
//! before normalising to sum one per sentence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusRecord, Token};
use crate::error::{Error, Result};

pub const IDF_FLOOR: f64 = 1e-6;

/// Set of Universal POS tags that mark tokens of interest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetPos(BTreeSet<String>);

impl Default for TargetPos {
    fn default() -> Self {
        Self::new(["NOUN", "VERB"])
    }
}

impl TargetPos {
    pub fn new<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(tags.into_iter().map(|t| t.as_ref().to_uppercase()).collect())
    }

    /// Parses `noun+verb`, `det+adp`, ... (case-insensitive, `+` or `,`).
    pub fn parse(spec: &str) -> Result<Self> {
        let tags: Vec<&str> = spec
            .split(['+', ','])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        if tags.is_empty() {
            return Err(Error::Config(format!("empty POS target set {spec:?}")));
        }
        Ok(Self::new(tags))
    }

    pub fn contains(&self, pos: &str) -> bool {
        self.0.contains(&pos.to_uppercase())
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

fn is_special(t: &Token) -> bool {
    t.text == "[CLS]" || t.text == "[SEP]"
}

/// Case-folded surface form of every word in a sentence, keyed by `word_id`.
pub fn sentence_words(tokens: &[Token]) -> BTreeMap<usize, String> {
    let mut words: BTreeMap<usize, String> = BTreeMap::new();
    for t in tokens.iter().filter(|t| !is_special(t)) {
        let piece = t.text.strip_prefix("##").unwrap_or(&t.text).to_lowercase();
        words.entry(t.word_id).or_default().push_str(&piece);
    }
    words
}

/// Document frequencies over a caption corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    corpus_size: usize,
    df: BTreeMap<String, usize>,
}

impl IdfTable {
    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn df(&self, word: &str) -> usize {
        self.df.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    /// `ln(|D| / (1 + df))`; unknown words use `df = 0`.
    pub fn idf(&self, word: &str) -> f64 {
        (self.corpus_size as f64 / (1.0 + self.df(word) as f64)).ln()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.df.keys().map(String::as_str)
    }

    /// `{word: idf}` for every counted word.
    pub fn idf_map(&self) -> BTreeMap<String, f64> {
        self.df.keys().map(|w| (w.clone(), self.idf(w))).collect()
    }
}

pub fn compute_idf<'a, I>(sentences: I) -> Result<IdfTable>
where
    I: IntoIterator<Item = &'a [Token]>,
{
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    let mut n = 0;
    for s in sentences {
        n += 1;
        let distinct: BTreeSet<String> = sentence_words(s).into_values().collect();
        for w in distinct {
            *df.entry(w).or_insert(0) += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("cannot compute idf over an empty corpus".into()));
    }
    Ok(IdfTable { corpus_size: n, df })
}

pub fn compute_idf_records(records: &[CorpusRecord]) -> Result<IdfTable> {
    compute_idf(records.iter().map(|r| r.tokens.as_slice()))
}

/// Indices (into `tokens`) of every token whose tag is in `target`.
pub fn select_toi(tokens: &[Token], target: &TargetPos) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !is_special(t) && target.contains(&t.pos))
        .map(|(i, _)| i)
        .collect()
}

/// Normalised weights over the tokens of interest of one sentence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToiWeights {
    /// Token indices into the sentence (excluding `[CLS]`).
    pub positions: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ToiWeights {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Same positions with every weight set to one.
    pub fn unweighted(&self) -> Self {
        Self {
            positions: self.positions.clone(),
            weights: vec![1.0; self.positions.len()],
        }
    }
}

pub fn sentence_weights(tokens: &[Token], idf: &IdfTable, target: &TargetPos) -> ToiWeights {
    let positions = select_toi(tokens, target);
    if positions.is_empty() {
        return ToiWeights::default();
    }
    let words = sentence_words(tokens);
    let raw: Vec<f64> = positions
        .iter()
        .map(|p| idf.idf(&words[&tokens[*p].word_id]).max(IDF_FLOOR))
        .collect();
    let total: f64 = raw.iter().sum();
    ToiWeights {
        positions,
        weights: raw.iter().map(|w| w / total).collect(),
    }
}

/// Four-caption reference corpus: "stir" occurs in one caption, "the"
/// (in either case) in all four.
pub fn toy_corpus() -> Vec<Vec<Token>> {
    let sentence = |words: &[(&str, &str)]| -> Vec<Token> {
        words
            .iter()
            .enumerate()
            .map(|(i, (w, p))| Token {
                text: w.to_string(),
                pos: p.to_string(),
                word_id: i,
            })
            .collect()
    };
    vec![
        sentence(&[("stir", "VERB"), ("the", "DET"), ("soup", "NOUN")]),
        sentence(&[("cut", "VERB"), ("the", "DET"), ("onion", "NOUN")]),
        sentence(&[("add", "VERB"), ("the", "DET"), ("salt", "NOUN")]),
        sentence(&[("The", "DET"), ("pan", "NOUN")]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str, pos: &str, word_id: usize) -> Token {
        Token {
            text: text.into(),
            pos: pos.into(),
            word_id,
        }
    }

    fn sentence(words: &[(&str, &str)]) -> Vec<Token> {
        words.iter().enumerate().map(|(i, (w, p))| tok(w, p, i)).collect()
    }

    fn fig1() -> Vec<Token> {
        sentence(&[
            ("add", "VERB"),
            ("tomatoes", "NOUN"),
            ("to", "ADP"),
            ("pan", "NOUN"),
            ("and", "CCONJ"),
            ("stir", "VERB"),
        ])
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn idf_matches_closed_form() {
        let c = toy_corpus();
        let t = compute_idf(c.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(t.corpus_size(), 4);
        assert!((t.idf("stir") - 2f64.ln()).abs() < 1e-12);
        assert!((t.idf("the") - (4.0f64 / 5.0).ln()).abs() < 1e-12);
        assert!((t.idf("stir") - 0.6931).abs() < 1e-4);
        assert!((t.idf("the") + 0.2231).abs() < 1e-4);
        // unseen word: df = 0
        assert!((t.idf("gymnast") - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_document_corpus() {
        let c = [sentence(&[("stir", "VERB")])];
        let t = compute_idf(c.iter().map(Vec::as_slice)).unwrap();
        assert!((t.idf("stir") - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        let c: Vec<Vec<Token>> = vec![];
        assert!(matches!(compute_idf(c.iter().map(Vec::as_slice)), Err(Error::Input(_))));
    }

    #[test]
    fn selects_nouns_and_verbs() {
        let s = fig1();
        assert_eq!(select_toi(&s, &TargetPos::default()), vec![0, 1, 3, 5]);
        assert_eq!(select_toi(&s, &TargetPos::parse("det+adp").unwrap()), vec![2]);
        assert_eq!(select_toi(&s, &TargetPos::parse("noun").unwrap()), vec![1, 3]);
        let none = sentence(&[("the", "DET"), ("of", "ADP")]);
        assert!(select_toi(&none, &TargetPos::default()).is_empty());
    }

    #[test]
    fn special_tokens_are_never_selected() {
        let s = vec![tok("[CLS]", "NOUN", 0), tok("pan", "NOUN", 1), tok("[SEP]", "VERB", 2)];
        assert_eq!(select_toi(&s, &TargetPos::default()), vec![1]);
    }

    #[test]
    fn equal_idf_gives_uniform_weights() {
        let c = toy_corpus();
        let t = compute_idf(c.iter().map(Vec::as_slice)).unwrap();
        let s = sentence(&[("stir", "VERB"), ("the", "DET"), ("soup", "NOUN")]);
        let w = sentence_weights(&s, &t, &TargetPos::default());
        assert_eq!(w.positions, vec![0, 2]);
        assert!((w.weights[0] - 0.5).abs() < 1e-15 && (w.weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn subword_pieces_share_the_word_weight() {
        let c = toy_corpus();
        let t = compute_idf(c.iter().map(Vec::as_slice)).unwrap();
        let s = vec![
            tok("the", "DET", 0),
            tok("gym", "NOUN", 1),
            tok("##na", "NOUN", 1),
            tok("##st", "NOUN", 1),
        ];
        assert_eq!(sentence_words(&s)[&1], "gymnast");
        let w = sentence_weights(&s, &t, &TargetPos::default());
        assert_eq!(w.positions, vec![1, 2, 3]);
        for x in &w.weights {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_positive_idfs_clamp_to_uniform() {
        // every word occurs in every document -> idf = ln(2/3) < 0
        let c = [
            sentence(&[("stir", "VERB"), ("pan", "NOUN")]),
            sentence(&[("pan", "NOUN"), ("stir", "VERB")]),
        ];
        let t = compute_idf(c.iter().map(Vec::as_slice)).unwrap();
        assert!(t.idf("stir") < 0.0);
        let w = sentence_weights(&c[0], &t, &TargetPos::default());
        assert_eq!(w.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn no_targets_gives_empty_weights() {
        let c = toy_corpus();
        let t = compute_idf(c.iter().map(Vec::as_slice)).unwrap();
        let s = sentence(&[("the", "DET")]);
        assert!(sentence_weights(&s, &t, &TargetPos::default()).is_empty());
    }
}
