//! Corpus round trips and properties of the planted-alignment generator.

use std::collections::BTreeMap;

use taco::data::{
    default_vocab, generate_synthetic, generate_synthetic_corpus, load_corpus, write_corpus, SyntheticCorpus,
    SyntheticSpec,
};
use taco::eval::{InferenceWeights, StageMask, StageScores};
use taco::numerics::{Packed, Tensor};
use taco::toi::{compute_idf_records, sentence_weights, TargetPos, ToiWeights};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn write_then_load_is_bit_exact() {
    let records = generate_synthetic(&SyntheticSpec::desk(40, 0.3, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    write_corpus(&path, &records).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back, records);
    for (a, b) in back.iter().zip(&records) {
        for (fa, fb) in a.video_features.iter().flatten().zip(b.video_features.iter().flatten()) {
            assert_eq!(fa.to_bits(), fb.to_bits());
        }
    }
}

#[test]
fn fixed_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let spec = SyntheticSpec::desk(30, 0.1, 77);
    write_corpus(&a, &generate_synthetic(&spec).unwrap()).unwrap();
    write_corpus(&b, &generate_synthetic(&spec).unwrap()).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn noiseless_planted_frame_scores_highest() {
    let c = generate_synthetic_corpus(&SyntheticSpec::desk(200, 0.0, 8)).unwrap();
    for (r, concepts) in c.records.iter().zip(&c.assignments) {
        for &k in concepts {
            let s: Vec<f64> = r.video_features.iter().map(|f| dot(f, &c.concept_vectors[k])).collect();
            let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((best - 1.0).abs() < 1e-12);
            assert_eq!(s.iter().filter(|v| **v > 0.5).count(), 1);
        }
    }
}

/// Token scores under an encoder that copies video features and embeds each
/// concept word as its latent vector (other tokens as zero).
fn oracle_token_scores(c: &SyntheticCorpus) -> Tensor {
    let d = c.concept_vectors[0].len();
    let word_vec: BTreeMap<&str, &Vec<f64>> = c
        .concept_words
        .iter()
        .map(String::as_str)
        .zip(&c.concept_vectors)
        .collect();
    let videos: Vec<Tensor> = c
        .records
        .iter()
        .map(|r| Tensor::from_rows(&r.video_features).unwrap())
        .collect();
    let texts: Vec<Tensor> = c
        .records
        .iter()
        .map(|r| {
            let mut rows = vec![vec![0.0; d]];
            rows.extend(
                r.tokens
                    .iter()
                    .map(|t| word_vec.get(t.text.as_str()).map_or(vec![0.0; d], |v| (*v).clone())),
            );
            rows.push(vec![0.0; d]);
            Tensor::from_rows(&rows).unwrap()
        })
        .collect();
    let idf = compute_idf_records(&c.records).unwrap();
    let target = TargetPos::parse("NOUN+VERB").unwrap();
    let toi: Vec<ToiWeights> = c
        .records
        .iter()
        .map(|r| sentence_weights(&r.tokens, &idf, &target))
        .collect();
    let x = Packed::from_seqs(&videos).unwrap();
    let y = Packed::from_seqs(&texts).unwrap();
    let mean = |p: &Packed| {
        let rows: Vec<Vec<f64>> = (0..p.len())
            .map(|i| {
                let s = p.seq(i);
                (0..d)
                    .map(|j| (0..s.rows()).map(|r| s.get(r, j)).sum::<f64>() / s.rows() as f64)
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let stages = StageScores::pre_fusion(&mean(&x), &x, &mean(&y), &y, &toi).unwrap();
    stages
        .combine(&InferenceWeights::new(0.0, 1.0, 0.0), StageMask::TOKEN)
        .unwrap()
}

#[test]
fn oracle_encoder_ranks_every_own_pair_first() {
    let c = generate_synthetic_corpus(&SyntheticSpec::desk(150, 0.0, 21)).unwrap();
    let s = oracle_token_scores(&c);
    let n = c.records.len();
    for i in 0..n {
        for j in (0..n).filter(|j| *j != i) {
            // Text i against video j, and video i against text j.
            assert!(s.get(i, i) > s.get(i, j), "text {i} vs video {j}");
            assert!(s.get(i, i) > s.get(j, i), "video {i} vs text {j}");
        }
    }
}

#[test]
fn without_the_inclusion_check_a_subset_caption_ties() {
    let mut spec = SyntheticSpec::desk(300, 0.0, 21);
    spec.unambiguous = false;
    let c = generate_synthetic_corpus(&spec).unwrap();
    let s = oracle_token_scores(&c);
    let n = c.records.len();
    let tied = (0..n).any(|i| (0..n).any(|j| j != i && s.get(i, j) >= s.get(i, i)));
    assert!(tied);
}

#[test]
fn concept_counts_match_the_sampling_distribution() {
    let concepts = 8;
    let mut spec = SyntheticSpec::desk(1000, 0.1, 13);
    spec.concepts = concepts;
    spec.vocab = default_vocab(concepts);
    spec.unambiguous = false;
    let c = generate_synthetic_corpus(&spec).unwrap();
    let n = c.assignments.len() as f64;
    // Count uniform on 1..=3, concepts uniform without replacement.
    let mean_count = 2.0;
    let mean_pairs = (0.0 + 2.0 + 6.0) / 3.0;
    let cf = concepts as f64;
    let p_single = mean_count / cf;
    let p_pair = mean_pairs / (cf * (cf - 1.0));
    let within = |count: usize, p: f64| {
        let (mu, sd) = (n * p, (n * p * (1.0 - p)).sqrt());
        (count as f64 - mu).abs() <= 3.0 * sd
    };
    for a in 0..concepts {
        let single = c.assignments.iter().filter(|s| s.contains(&a)).count();
        assert!(within(single, p_single), "concept {a}: {single}");
        for b in a + 1..concepts {
            let pair = c
                .assignments
                .iter()
                .filter(|s| s.contains(&a) && s.contains(&b))
                .count();
            assert!(within(pair, p_pair), "pair ({a}, {b}): {pair}");
        }
    }
}

#[test]
fn every_record_validates_and_carries_its_concepts() {
    let c = generate_synthetic_corpus(&SyntheticSpec::desk(300, 0.1, 3)).unwrap();
    for (i, (r, a)) in c.records.iter().zip(&c.assignments).enumerate() {
        r.validate(i + 1).unwrap();
        assert!((1..=3).contains(&a.len()));
        let words: Vec<&str> = r
            .tokens
            .iter()
            .filter(|t| t.pos == "NOUN" || t.pos == "VERB")
            .map(|t| t.text.as_str())
            .collect();
        let want: Vec<&str> = a.iter().map(|k| c.concept_words[*k].as_str()).collect();
        assert_eq!(words, want);
        assert!(r
            .tokens
            .iter()
            .all(|t| ["NOUN", "VERB", "DET", "ADP"].contains(&t.pos.as_str())));
    }
}
