//! Corpus records, JSONL ingestion and the planted-alignment generator.

mod corpus;
mod synthetic;

pub use corpus::{load_corpus, parse_corpus, write_corpus, CorpusRecord, Token};
pub use synthetic::{
    default_vocab, generate_synthetic, generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec, VocabEntry,
    FILLER_WORDS,
};
