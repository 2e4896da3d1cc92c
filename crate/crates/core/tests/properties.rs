//! Property tests of selection, ranking, losses and word weighting against
//! brute-force references.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use taco::cascade::{cascade_select, random_select, CombinedScoreMatrix};
use taco::data::Token;
use taco::eval::rank_metrics;
use taco::losses::{sentence_loss, token_loss};
use taco::numerics::{Graph, Rng, Tensor};
use taco::toi::{compute_idf, sentence_weights, TargetPos, ToiWeights};
use taco::train::{cascade_oracle, rank_oracle, sentence_loss_oracle, token_loss_oracle};

/// Square matrix with entries from a small integer range, so ties occur.
fn coarse_matrix(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec((-3i32..4).prop_map(f64::from), k), k)
}

fn sized_matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (2usize..9).prop_flat_map(|k| (coarse_matrix(k), 1..k))
}

fn scores(rows: &[Vec<f64>]) -> CombinedScoreMatrix {
    CombinedScoreMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
}

fn random_tensor(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cascade_matches_sort_oracle((s, kp) in sized_matrix()) {
        let got = cascade_select(&scores(&s), kp).unwrap();
        prop_assert_eq!(&got, &cascade_oracle(&s, kp));
        prop_assert_eq!(got, cascade_select(&scores(&s), kp).unwrap());
    }

    #[test]
    fn raising_a_selected_negative_keeps_it((s, kp) in sized_matrix(), anchor in 0usize..8, bump in 0.5f64..5.0) {
        let k = s.len();
        let i = anchor % k;
        let before = cascade_select(&scores(&s), kp).unwrap();
        let j = before.text_anchor_negs[i][0];
        let mut raised = s.clone();
        raised[j][i] += bump;
        let after = cascade_select(&scores(&raised), kp).unwrap();
        prop_assert!(after.text_anchor_negs[i].contains(&j));
    }

    #[test]
    fn raising_an_unselected_entry_above_the_cut_admits_it((s, kp) in sized_matrix(), anchor in 0usize..8) {
        let k = s.len();
        let i = anchor % k;
        let sel = cascade_select(&scores(&s), kp).unwrap();
        let left: Vec<usize> = (0..k).filter(|j| *j != i && !sel.text_anchor_negs[i].contains(j)).collect();
        prop_assume!(!left.is_empty());
        let j = left[0];
        let cut = sel.text_anchor_negs[i].iter().map(|&v| s[v][i]).fold(f64::INFINITY, f64::min);
        let mut raised = s.clone();
        raised[j][i] = cut + 0.5;
        let after = cascade_select(&scores(&raised), kp).unwrap();
        prop_assert!(after.text_anchor_negs[i].contains(&j));
        // The video-anchored side is read along rows.
        let row_left: Vec<usize> = (0..k).filter(|t| *t != i && !sel.video_anchor_negs[i].contains(t)).collect();
        prop_assume!(!row_left.is_empty());
        let t = row_left[0];
        let row_cut = sel.video_anchor_negs[i].iter().map(|&v| s[i][v]).fold(f64::INFINITY, f64::min);
        let mut raised = s;
        raised[i][t] = row_cut + 0.5;
        let after = cascade_select(&scores(&raised), kp).unwrap();
        prop_assert!(after.video_anchor_negs[i].contains(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn rank_metrics_match_sort_oracle(
        (s, truth) in (1usize..8, 1usize..8).prop_flat_map(|(q, c)| (
            prop::collection::vec(prop::collection::vec((-3i32..4).prop_map(f64::from), c), q),
            prop::collection::vec(0..c, q),
        ))
    ) {
        let c = s[0].len();
        let t = Tensor::from_rows(&s).unwrap();
        let m = rank_metrics(&t, &truth, &[1, c]).unwrap();
        prop_assert_eq!(&m.ranks, &rank_oracle(&s, &truth));
        prop_assert_eq!(m.recall(c), 1.0);
        // A strictly increasing transform changes nothing.
        let warped: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| (0.7 * v).exp() - 3.0).collect()).collect();
        let w = rank_metrics(&Tensor::from_rows(&warped).unwrap(), &truth, &[1, c]).unwrap();
        prop_assert_eq!(&w.ranks, &m.ranks);
        prop_assert_eq!(w.median_rank, m.median_rank);
        prop_assert_eq!(w.recall(1), m.recall(1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in 0u64..1_000_000, c in 1usize..7, shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let x = random_tensor(&mut rng, 3, c);
        let shifted = Tensor::matrix(3, c, x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(shifted));
        let (pa, pb) = (g.softmax_rows(a), g.softmax_rows(b));
        for r in 0..3 {
            prop_assert!((g.value(pa).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (u, v) in g.value(pa).row(r).iter().zip(g.value(pb).row(r)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn losses_match_oracles_and_ignore_batch_order(seed in 0u64..1_000_000, k in 2usize..6, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let x = random_tensor(&mut rng, k, d);
        let y = random_tensor(&mut rng, k, d);
        let tau = rng.uniform(0.2, 2.0);
        let l1 = sentence_loss(&x, &y, tau).unwrap();
        prop_assert!(l1 >= 0.0);
        prop_assert!((l1 - sentence_loss_oracle(&x, &y, tau)).abs() < 1e-10);

        let videos: Vec<Tensor> = (0..k).map(|_| { let m = 1 + rng.below(4); random_tensor(&mut rng, m, d) }).collect();
        let texts: Vec<Tensor> = (0..k).map(|_| { let n = 3 + rng.below(3); random_tensor(&mut rng, n, d) }).collect();
        let toi: Vec<ToiWeights> = texts.iter().map(|t| {
            let positions: Vec<usize> = (0..t.rows() - 2).collect();
            let raw: Vec<f64> = positions.iter().map(|_| rng.uniform(0.1, 1.0)).collect();
            let sum: f64 = raw.iter().sum();
            ToiWeights { positions, weights: raw.iter().map(|w| w / sum).collect() }
        }).collect();
        let l2 = token_loss(&videos, &texts, &toi, tau).unwrap();
        prop_assert!(l2 >= 0.0);
        prop_assert!((l2 - token_loss_oracle(&videos, &texts, &toi, tau)).abs() < 1e-10);

        let perm: Vec<usize> = { let mut p: Vec<usize> = (0..k).collect(); rng.shuffle(&mut p); p };
        let rows = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!((sentence_loss(&rows(&x), &rows(&y), tau).unwrap() - l1).abs() < 1e-10);
        let pv: Vec<Tensor> = perm.iter().map(|&i| videos[i].clone()).collect();
        let pt: Vec<Tensor> = perm.iter().map(|&i| texts[i].clone()).collect();
        let pw: Vec<ToiWeights> = perm.iter().map(|&i| toi[i].clone()).collect();
        prop_assert!((token_loss(&pv, &pt, &pw, tau).unwrap() - l2).abs() < 1e-10);
    }

    #[test]
    fn raising_a_positive_lowers_the_sentence_loss(seed in 0u64..1_000_000, k in 2usize..6, anchor in 0usize..6, bump in 0.01f64..3.0) {
        let mut rng = Rng::new(seed);
        let x = random_tensor(&mut rng, k, k);
        // Basis-vector texts: moving video i along text i changes only the
        // positive score of anchor i.
        let y = Tensor::matrix(k, k, (0..k * k).map(|e| if e / k == e % k { 1.0 } else { 0.0 }).collect()).unwrap();
        let i = anchor % k;
        let mut raised = x.clone();
        raised.data_mut()[i * k + i] += bump;
        prop_assert!(sentence_loss(&raised, &y, 1.0).unwrap() < sentence_loss(&x, &y, 1.0).unwrap());
    }
}

fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<(usize, bool)>>> {
    // Each sentence: words from a 6-word pool, each flagged upper-case or not.
    prop::collection::vec(prop::collection::vec((0usize..6, any::<bool>()), 1..6), 1..8)
}

fn to_tokens(sentence: &[(usize, bool)]) -> Vec<Token> {
    const WORDS: [(&str, &str); 6] = [
        ("pour", "VERB"),
        ("milk", "NOUN"),
        ("the", "DET"),
        ("cup", "NOUN"),
        ("into", "ADP"),
        ("stir", "VERB"),
    ];
    sentence
        .iter()
        .enumerate()
        .map(|(i, &(w, upper))| Token {
            text: if upper {
                WORDS[w].0.to_uppercase()
            } else {
                WORDS[w].0.to_string()
            },
            pos: WORDS[w].1.to_string(),
            word_id: i,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn idf_matches_brute_force_count(corpus in corpus_strategy(), scale in 0.1f64..10.0) {
        let sentences: Vec<Vec<Token>> = corpus.iter().map(|s| to_tokens(s)).collect();
        let table = compute_idf(sentences.iter().map(Vec::as_slice)).unwrap();
        let n = sentences.len() as f64;
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for s in &sentences {
            let words: BTreeSet<String> = s.iter().map(|t| t.text.to_lowercase()).collect();
            for w in words {
                *df.entry(w).or_default() += 1;
            }
        }
        for (w, c) in &df {
            prop_assert!((table.idf(w) - (n / (1.0 + *c as f64)).ln()).abs() < 1e-12);
        }
        let target = TargetPos::parse("NOUN+VERB").unwrap();
        for s in &sentences {
            let w = sentence_weights(s, &table, &target);
            if !w.is_empty() {
                prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.weights.iter().all(|v| *v >= 0.0));
                // Normalisation removes a common positive scale.
                let raw: Vec<f64> = w.positions.iter().map(|p| table.idf(&s[*p].text).max(1e-6) * scale).collect();
                let sum: f64 = raw.iter().sum();
                for (a, b) in w.weights.iter().zip(&raw) {
                    prop_assert!((a - b / sum).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn random_selection_is_uniform() {
    let mut rng = Rng::new(11);
    let draws = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let sel = random_select(4, 1, &mut rng).unwrap();
        counts[sel.text_anchor_negs[0][0]] += 1;
        assert_ne!(sel.text_anchor_negs[0][0], 0);
    }
    for c in &counts[1..] {
        let p = *c as f64 / draws as f64;
        assert!((p - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
}
