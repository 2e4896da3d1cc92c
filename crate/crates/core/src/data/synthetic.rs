//! Planted-alignment synthetic corpus.
//!
//! Each record draws between `min_concepts` and `max_concepts` distinct latent
//! concepts (count uniform, concepts uniform without replacement). The text
//! is a sequence of `<filler> <concept word>` pairs in draw order, where the
//! filler is a DET/ADP word from [`FILLER_WORDS`]. The video has `m` frames
//! (`m` uniform in `max(count, min_frames)..=max_frames`). Every frame starts
//! as isotropic Gaussian noise of expected norm `noise_sigma` (per-coordinate
//! standard deviation `noise_sigma / sqrt(d_video_in)`); one distinct,
//! uniformly chosen frame per concept additionally carries that concept's
//! unit-norm latent vector. Latent vectors are orthonormal when
//! `concepts <= d_video_in` and independent unit Gaussians otherwise.
//!
//! With `unambiguous` set, a drawn concept set that equals, contains or is
//! contained in the set of an earlier record is redrawn, so no text matches
//! a foreign video as well as its own.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::corpus::{CorpusRecord, Token};

/// Function words used as fillers, with their Universal POS tags.
pub const FILLER_WORDS: [(&str, &str); 10] = [
    ("the", "DET"),
    ("a", "DET"),
    ("this", "DET"),
    ("some", "DET"),
    ("to", "ADP"),
    ("in", "ADP"),
    ("with", "ADP"),
    ("on", "ADP"),
    ("of", "ADP"),
    ("into", "ADP"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub word: String,
    pub pos: String,
}

/// Default vocabulary: `concepts` content words alternating NOUN (`noun017`)
/// and VERB (`verb004`), followed by the filler inventory.
pub fn default_vocab(concepts: usize) -> Vec<VocabEntry> {
    let mut v: Vec<VocabEntry> = (0..concepts)
        .map(|i| {
            if i % 2 == 0 {
                VocabEntry {
                    word: format!("noun{:03}", i / 2),
                    pos: "NOUN".into(),
                }
            } else {
                VocabEntry {
                    word: format!("verb{:03}", i / 2),
                    pos: "VERB".into(),
                }
            }
        })
        .collect();
    v.extend(FILLER_WORDS.iter().map(|(w, p)| VocabEntry {
        word: (*w).into(),
        pos: (*p).into(),
    }));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_pairs: usize,
    pub d_video_in: usize,
    pub vocab: Vec<VocabEntry>,
    pub concepts: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub min_concepts: usize,
    pub max_concepts: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Redraw concept sets comparable (by inclusion) to an earlier record's.
    pub unambiguous: bool,
}

/// Redraw attempts per record before an unambiguous corpus is declared
/// infeasible.
const MAX_REDRAWS: usize = 10_000;

impl SyntheticSpec {
    /// Desk-scale defaults used by the acceptance benchmark.
    pub fn desk(num_pairs: usize, noise_sigma: f64, seed: u64) -> Self {
        let concepts = 128;
        Self {
            num_pairs,
            d_video_in: 128,
            vocab: default_vocab(concepts),
            concepts,
            noise_sigma,
            seed,
            min_concepts: 1,
            max_concepts: 3,
            min_frames: 3,
            max_frames: 5,
            unambiguous: true,
        }
    }

    fn content_words(&self) -> Vec<&VocabEntry> {
        self.vocab
            .iter()
            .filter(|e| e.pos == "NOUN" || e.pos == "VERB")
            .collect()
    }

    fn filler_words(&self) -> Vec<&VocabEntry> {
        self.vocab.iter().filter(|e| e.pos == "DET" || e.pos == "ADP").collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_video_in == 0 {
            return bad("d_video_in must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.concepts == 0 || self.concepts > self.vocab.len() {
            return bad(format!(
                "concepts ({}) must be in 1..=vocab size ({})",
                self.concepts,
                self.vocab.len()
            ));
        }
        if self.content_words().len() < self.concepts {
            return bad("vocabulary has fewer NOUN/VERB words than concepts".into());
        }
        if self.filler_words().is_empty() {
            return bad("vocabulary needs at least one DET/ADP filler".into());
        }
        if self.min_concepts == 0 || self.min_concepts > self.max_concepts || self.max_concepts > self.concepts {
            return bad(format!(
                "concepts per record {}..={} invalid for {} concepts",
                self.min_concepts, self.max_concepts, self.concepts
            ));
        }
        if self.max_frames < self.max_concepts || self.min_frames > self.max_frames {
            return bad(format!(
                "frames {}..={} cannot hold {} concepts",
                self.min_frames, self.max_frames, self.max_concepts
            ));
        }
        Ok(())
    }
}

/// Generated records together with the latent ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<CorpusRecord>,
    /// Concept indices of each record, in text order.
    pub assignments: Vec<Vec<usize>>,
    /// Unit-norm latent vector per concept.
    pub concept_vectors: Vec<Vec<f64>>,
    /// Surface word per concept.
    pub concept_words: Vec<String>,
}

fn latent_vectors(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if n <= dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

/// One set contains the other.
fn comparable(a: &[usize], b: &[usize]) -> bool {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().all(|c| large.contains(c))
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let concept_vectors = latent_vectors(spec.concepts, spec.d_video_in, &mut rng);
    let content = spec.content_words();
    let fillers = spec.filler_words();
    let concept_words: Vec<String> = content[..spec.concepts].iter().map(|e| e.word.to_lowercase()).collect();
    let pool: Vec<usize> = (0..spec.concepts).collect();
    let noise_sd = spec.noise_sigma / (spec.d_video_in as f64).sqrt();

    let mut records = Vec::with_capacity(spec.num_pairs);
    let mut assignments = Vec::with_capacity(spec.num_pairs);
    for idx in 0..spec.num_pairs {
        let mut draws = 0;
        let chosen = loop {
            let count = spec.min_concepts + rng.below(spec.max_concepts - spec.min_concepts + 1);
            let chosen = rng.sample_without_replacement(&pool, count);
            if !spec.unambiguous || !assignments.iter().any(|a: &Vec<usize>| comparable(a, &chosen)) {
                break chosen;
            }
            draws += 1;
            if draws == MAX_REDRAWS {
                return Err(Error::Config(format!(
                    "no unambiguous concept set found for record {idx} after {MAX_REDRAWS} draws"
                )));
            }
        };
        let count = chosen.len();
        let lo = count.max(spec.min_frames);
        let m = lo + rng.below(spec.max_frames - lo + 1);
        let mut frames: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..spec.d_video_in).map(|_| noise_sd * rng.normal()).collect())
            .collect();
        let frame_pool: Vec<usize> = (0..m).collect();
        let slots = rng.sample_without_replacement(&frame_pool, count);
        for (c, slot) in chosen.iter().zip(&slots) {
            frames[*slot]
                .iter_mut()
                .zip(&concept_vectors[*c])
                .for_each(|(f, v)| *f += v);
        }
        let mut tokens = Vec::with_capacity(2 * count);
        for (k, c) in chosen.iter().enumerate() {
            let filler = fillers[rng.below(fillers.len())];
            tokens.push(Token {
                text: filler.word.to_lowercase(),
                pos: filler.pos.clone(),
                word_id: 2 * k,
            });
            tokens.push(Token {
                text: concept_words[*c].clone(),
                pos: content[*c].pos.clone(),
                word_id: 2 * k + 1,
            });
        }
        records.push(CorpusRecord {
            id: format!("syn-{}-{idx:05}", spec.seed),
            video_features: frames,
            tokens,
        });
        assignments.push(chosen);
    }
    Ok(SyntheticCorpus {
        records,
        assignments,
        concept_vectors,
        concept_words,
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<CorpusRecord>> {
    generate_synthetic_corpus(spec).map(|c| c.records)
}
