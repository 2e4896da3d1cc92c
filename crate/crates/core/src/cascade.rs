//! Hard-negative selection for the fusion stage.
//!
//! Pre-fusion similarities already computed for the sentence and token losses
//! are reused to pick, per anchor, the `k'` wrong partners the model currently
//! finds most plausible. Only those pairs are run through the fusion encoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::token_score_matrix;
use crate::numerics::{matmul_into, Packed, Rng, Tensor, Transpose};
use crate::toi::ToiWeights;

/// `K×K` pre-fusion alignment scores; entry `[j][i]` scores video `j`
/// against text `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedScoreMatrix {
    s: Tensor,
}

impl CombinedScoreMatrix {
    pub fn new(s: Tensor) -> Result<Self> {
        if s.shape().len() != 2 || s.rows() != s.cols() {
            return Err(Error::Dimension(format!(
                "score matrix must be square, got {:?}",
                s.shape()
            )));
        }
        Ok(Self { s })
    }

    pub fn k(&self) -> usize {
        self.s.rows()
    }

    pub fn get(&self, video: usize, text: usize) -> f64 {
        self.s.get(video, text)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.s
    }

    /// Rows of `[j][i]` as nested vectors.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.k()).map(|j| self.s.row(j).to_vec()).collect()
    }
}

/// `S[j][i] = x̄_j·ȳ_i + Σ_{p∈P_i} s(x_j, y_i^p)`.
///
/// The token term is an unweighted sum unless `weighted` is set, in which case
/// each token contributes with its normalised IDF weight. `y` rows follow the
/// encoder layout (`[CLS]` first), so TOI position `p` is row `p + 1`.
pub fn combined_scores(
    x_bar: &Tensor,
    x: &Packed,
    y_bar: &Tensor,
    y: &Packed,
    toi: &[ToiWeights],
    weighted: bool,
) -> Result<CombinedScoreMatrix> {
    let k = x_bar.rows();
    let d = x_bar.cols();
    if y_bar.rows() != k || y_bar.cols() != d || x.len() != k || y.len() != k {
        return Err(Error::Dimension(format!(
            "combined_scores: {k} pooled videos, {} texts, {} video seqs, {} text seqs",
            y_bar.rows(),
            x.len(),
            y.len()
        )));
    }
    let mut s = vec![0.0; k * k];
    matmul_into(
        k,
        d,
        k,
        x_bar.data(),
        Transpose::No,
        y_bar.data(),
        Transpose::Yes,
        0.0,
        &mut s,
    );
    let tok = token_score_matrix(x, y, toi, weighted)?;
    s.iter_mut().zip(tok.data()).for_each(|(a, b)| *a += b);
    CombinedScoreMatrix::new(Tensor::matrix(k, k, s)?)
}

/// Per-anchor negatives chosen for the fusion stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeSelection {
    /// For each text `i`, the selected negative videos.
    pub text_anchor_negs: Vec<Vec<usize>>,
    /// For each video `j`, the selected negative texts.
    pub video_anchor_negs: Vec<Vec<usize>>,
}

/// Pairs to fuse and how they populate the fusion-loss logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionLayout {
    /// `(video, text)` pairs to run through the fusion encoder.
    pub pairs: Vec<(usize, usize)>,
    /// For each anchor, `k'+1` indices into `pairs`, positive first.
    pub slots: Vec<usize>,
    pub group: usize,
}

impl CascadeSelection {
    pub fn k(&self) -> usize {
        self.text_anchor_negs.len()
    }

    pub fn k_prime(&self) -> usize {
        self.text_anchor_negs.first().map_or(0, Vec::len)
    }

    /// Checks every invariant of a selection: no anchor among its own
    /// negatives, `k'` distinct in-range entries per list.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let kp = self.k_prime();
        if self.video_anchor_negs.len() != k {
            return Err(Error::Internal("text and video anchor counts differ".into()));
        }
        for lists in [&self.text_anchor_negs, &self.video_anchor_negs] {
            for (a, negs) in lists.iter().enumerate() {
                let mut seen = vec![false; k];
                if negs.len() != kp {
                    return Err(Error::Internal(format!(
                        "anchor {a} has {} negatives, expected {kp}",
                        negs.len()
                    )));
                }
                for &n in negs {
                    if n >= k || n == a || seen[n] {
                        return Err(Error::Internal(format!("anchor {a} has invalid negative {n}")));
                    }
                    seen[n] = true;
                }
            }
        }
        Ok(())
    }

    /// All `2K·(k'+1)` `(video, text)` pairs, anchor by anchor with the
    /// positive first: text anchors `0..K`, then video anchors `0..K`.
    /// Negatives appear in ascending index order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.k() * (self.k_prime() + 1));
        for (i, negs) in self.text_anchor_negs.iter().enumerate() {
            out.push((i, i));
            out.extend(sorted(negs).into_iter().map(|j| (j, i)));
        }
        for (j, negs) in self.video_anchor_negs.iter().enumerate() {
            out.push((j, j));
            out.extend(sorted(negs).into_iter().map(|i| (j, i)));
        }
        out
    }

    /// Fusion work list. With `dedup`, a pair selected from both sides (and
    /// every positive) is fused once and its score reused; the loss value is
    /// unchanged.
    pub fn layout(&self, dedup: bool) -> FusionLayout {
        let all = self.pairs();
        let group = self.k_prime() + 1;
        if !dedup {
            let slots = (0..all.len()).collect();
            return FusionLayout {
                pairs: all,
                slots,
                group,
            };
        }
        let mut index = HashMap::new();
        let mut pairs = Vec::new();
        let slots = all
            .into_iter()
            .map(|p| {
                *index.entry(p).or_insert_with(|| {
                    pairs.push(p);
                    pairs.len() - 1
                })
            })
            .collect();
        FusionLayout { pairs, slots, group }
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

fn check_k_prime(k: usize, k_prime: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::BatchSize(format!(
            "hard-negative selection needs K >= 2, got {k}"
        )));
    }
    if k_prime == 0 || k_prime >= k {
        return Err(Error::Config(format!(
            "k_prime must be in 1..={}, got {k_prime}",
            k - 1
        )));
    }
    Ok(())
}

/// Indices `c != anchor` with the largest `score(c)`, ties to the lower index.
fn top_k(k: usize, anchor: usize, k_prime: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut cands: Vec<usize> = (0..k).filter(|&c| c != anchor).collect();
    cands.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    cands.truncate(k_prime);
    cands
}

/// Top-`k'` negatives per anchor by combined score, in descending score order.
pub fn cascade_select(s: &CombinedScoreMatrix, k_prime: usize) -> Result<CascadeSelection> {
    let k = s.k();
    check_k_prime(k, k_prime)?;
    Ok(CascadeSelection {
        text_anchor_negs: (0..k).map(|i| top_k(k, i, k_prime, |j| s.get(j, i))).collect(),
        video_anchor_negs: (0..k).map(|j| top_k(k, j, k_prime, |i| s.get(j, i))).collect(),
    })
}

/// Uniform sampling without replacement among the `K−1` non-anchor indices.
pub fn random_select(k: usize, k_prime: usize, rng: &mut Rng) -> Result<CascadeSelection> {
    check_k_prime(k, k_prime)?;
    let mut draw = |anchor: usize| {
        let pool: Vec<usize> = (0..k).filter(|&c| c != anchor).collect();
        rng.sample_without_replacement(&pool, k_prime)
    };
    let text_anchor_negs = (0..k).map(&mut draw).collect();
    let video_anchor_negs = (0..k).map(&mut draw).collect();
    Ok(CascadeSelection {
        text_anchor_negs,
        video_anchor_negs,
    })
}

/// Every non-anchor index, ascending.
pub fn full_select(k: usize) -> Result<CascadeSelection> {
    check_k_prime(k, k.saturating_sub(1))?;
    let all = |a: usize| (0..k).filter(|&c| c != a).collect::<Vec<_>>();
    Ok(CascadeSelection {
        text_anchor_negs: (0..k).map(all).collect(),
        video_anchor_negs: (0..k).map(all).collect(),
    })
}

/// How fusion-stage negatives are chosen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeMode {
    Cascade,
    Random,
    Full,
}

impl std::str::FromStr for CascadeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cascade" => Ok(Self::Cascade),
            "random" => Ok(Self::Random),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown cascade mode {other:?}"))),
        }
    }
}

impl CascadeMode {
    /// Selection for one batch. `scores` is only consulted in cascade mode.
    pub fn select(
        self,
        scores: impl FnOnce() -> Result<CombinedScoreMatrix>,
        k: usize,
        k_prime: usize,
        rng: &mut Rng,
    ) -> Result<CascadeSelection> {
        match self {
            Self::Cascade => cascade_select(&scores()?, k_prime),
            Self::Random => random_select(k, k_prime, rng),
            Self::Full => full_select(k),
        }
    }
}
