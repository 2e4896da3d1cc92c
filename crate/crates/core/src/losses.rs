//! Sentence-, token- and fusion-level NCE losses and their combination.
//!
//! Each loss has a graph form (used for training and gradient checks) and a
//! plain tensor form. The tensor forms run the graph forms on constants, so
//! both always agree.
//!
//! Text sequences follow the encoder layout: row 0 is `[CLS]`, so the TOI
//! position `p` (an index into the caption's tokens) is row `p + 1`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeSelection, FusionLayout};
use crate::error::{Error, Result};
use crate::numerics::{matmul_into, Graph, Packed, Tensor, Transpose, Var};
use crate::toi::ToiWeights;

/// How per-anchor NCE terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    /// Divide each loss by its number of anchors.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub lambda_t: f64,
    pub k_prime: usize,
    /// Include the sentence-level loss.
    pub sentence: bool,
    /// Include the fusion-level loss.
    pub fusion: bool,
    /// Add video-anchored terms to the sentence-level loss.
    pub symmetric: bool,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 1.0,
            tau2: 1.0,
            lambda_t: 0.5,
            k_prime: 8,
            sentence: true,
            fusion: true,
            symmetric: false,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau1 > 0.0 && self.tau1.is_finite() && self.tau2 > 0.0 && self.tau2.is_finite()) {
            return bad(format!(
                "temperatures must be positive, got {} and {}",
                self.tau1, self.tau2
            ));
        }
        if !(self.lambda_t >= 0.0 && self.lambda_t.is_finite()) {
            return bad(format!("lambda_t must be >= 0, got {}", self.lambda_t));
        }
        if self.k_prime == 0 || self.k_prime + 1 > batch_size {
            return bad(format!(
                "k_prime must be in 1..={}, got {}",
                batch_size.saturating_sub(1),
                self.k_prime
            ));
        }
        if !self.sentence && self.lambda_t == 0.0 && !self.fusion {
            return bad("every loss is disabled".into());
        }
        Ok(())
    }
}

/// Component values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l1: f64, l2: f64, l3: f64, lambda_t: f64) -> Self {
        Self {
            l1,
            l2,
            l3,
            total: total_objective(l1, l2, l3, lambda_t),
        }
    }
}

/// Linear scoring of a fused `[CLS]` output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringHead {
    pub w: Vec<f64>,
    pub bias: f64,
}

impl ScoringHead {
    pub fn score(&self, z_cls: &[f64]) -> f64 {
        self.w.iter().zip(z_cls).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }
}

pub fn total_objective(l1: f64, l2: f64, l3: f64, lambda_t: f64) -> f64 {
    l1 + lambda_t * l2 + l3
}

fn check_batch(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::BatchSize(format!("contrastive loss needs K >= 2, got {k}")));
    }
    Ok(())
}

fn anchor_weight(reduction: Reduction, anchors: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / anchors as f64,
    }
}

/// Sentence-level loss on `K×d` pooled videos and `[CLS]` texts.
pub fn sentence_nce(
    g: &mut Graph,
    x_bar: Var,
    y_bar: Var,
    tau1: f64,
    symmetric: bool,
    reduction: Reduction,
) -> Result<Var> {
    let k = g.value(x_bar).rows();
    check_batch(k)?;
    if g.value(y_bar).rows() != k {
        return Err(Error::Dimension(format!(
            "{k} videos but {} texts",
            g.value(y_bar).rows()
        )));
    }
    let w = anchor_weight(reduction, k);
    // Row i holds ȳ_i·x̄_j over videos j.
    let dots = g.matmul_t(y_bar, x_bar, Transpose::Yes)?;
    let logits = g.scale(dots, 1.0 / tau1);
    let loss = g.cross_entropy(logits, (0..k).collect(), vec![w; k])?;
    if !symmetric {
        return Ok(loss);
    }
    let back = g.transpose(logits);
    let rev = g.cross_entropy(back, (0..k).collect(), vec![w; k])?;
    g.add(loss, rev)
}

/// Encoded-row index, owning sentence and weight of every token of interest.
fn toi_rows(text_segs: &[(usize, usize)], toi: &[ToiWeights]) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    if toi.len() != text_segs.len() {
        return Err(Error::Internal(format!(
            "{} TOI lists for {} sentences",
            toi.len(),
            text_segs.len()
        )));
    }
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    let mut weights = Vec::new();
    for (i, (t, &(start, len))) in toi.iter().zip(text_segs).enumerate() {
        if t.positions.len() != t.weights.len() {
            return Err(Error::Internal(format!(
                "sentence {i}: positions and weights differ in length"
            )));
        }
        for (&p, &w) in t.positions.iter().zip(&t.weights) {
            if p + 1 >= len {
                return Err(Error::Input(format!(
                    "sentence {i}: TOI position {p} outside {len} encoded rows"
                )));
            }
            rows.push(start + 1 + p);
            owner.push(i);
            weights.push(w);
        }
    }
    Ok((rows, owner, weights))
}

/// Token-level loss on packed video tokens and packed text tokens.
pub fn token_nce(
    g: &mut Graph,
    video: (Var, &[(usize, usize)]),
    text: (Var, &[(usize, usize)]),
    toi: &[ToiWeights],
    tau2: f64,
    reduction: Reduction,
) -> Result<Var> {
    let k = video.1.len();
    check_batch(k)?;
    if text.1.len() != k {
        return Err(Error::Dimension(format!("{k} videos but {} texts", text.1.len())));
    }
    let (rows, owner, mut weights) = toi_rows(text.1, toi)?;
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let w = anchor_weight(reduction, k);
    weights.iter_mut().for_each(|x| *x *= w);
    let t = g.gather_rows(text.0, rows)?;
    let sim = g.matmul_t(t, video.0, Transpose::Yes)?;
    let s = g.group_max_cols(sim, video.1)?;
    let logits = g.scale(s, 1.0 / tau2);
    g.cross_entropy(logits, owner, weights)
}

/// Fusion-level loss from one head score per fused pair (`P×1`).
pub fn fusion_nce(g: &mut Graph, scores: Var, layout: &FusionLayout, reduction: Reduction) -> Result<Var> {
    let n = g.value(scores).rows();
    if let Some(bad) = layout.slots.iter().find(|s| **s >= n) {
        return Err(Error::Internal(format!("fused score {bad} missing ({n} computed)")));
    }
    if layout.group == 0 || !layout.slots.len().is_multiple_of(layout.group) {
        return Err(Error::Internal("fusion layout is not a whole number of anchors".into()));
    }
    let anchors = layout.slots.len() / layout.group;
    let picked = g.gather_rows(scores, layout.slots.clone())?;
    let logits = g.reshape(picked, vec![anchors, layout.group])?;
    let w = anchor_weight(reduction, anchors);
    g.cross_entropy(logits, vec![0; anchors], vec![w; anchors])
}

/// `[j][i] = Σ_{p∈P_i} c_p · s(x_j, y_i^p)` where `c_p` is the token weight
/// when `weighted`, else 1. Shape is videos × texts.
pub fn token_score_matrix(x: &Packed, y: &Packed, toi: &[ToiWeights], weighted: bool) -> Result<Tensor> {
    let (nv, nt) = (x.len(), y.len());
    let mut out = vec![0.0; nv * nt];
    let (rows, owner, weights) = toi_rows(&y.segs, toi)?;
    if rows.is_empty() || nv == 0 {
        return Tensor::matrix(nv, nt, out);
    }
    let d = x.width();
    if y.width() != d {
        return Err(Error::Dimension(format!("video width {d} != text width {}", y.width())));
    }
    let mut t = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        t.extend_from_slice(y.tokens.row(r));
    }
    let cols = x.tokens.rows();
    let mut sim = vec![0.0; rows.len() * cols];
    matmul_into(
        rows.len(),
        d,
        cols,
        &t,
        Transpose::No,
        x.tokens.data(),
        Transpose::Yes,
        0.0,
        &mut sim,
    );
    for (r, (&i, &w)) in owner.iter().zip(&weights).enumerate() {
        let c = if weighted { w } else { 1.0 };
        let srow = &sim[r * cols..(r + 1) * cols];
        for (j, &(start, len)) in x.segs.iter().enumerate() {
            let best = srow[start..start + len]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            out[j * nt + i] += c * best;
        }
    }
    Tensor::matrix(nv, nt, out)
}

/// Sentence-level loss summed over text anchors.
pub fn sentence_loss(x_bar: &Tensor, y_bar: &Tensor, tau1: f64) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(x_bar.clone());
    let y = g.constant(y_bar.clone());
    let l = sentence_nce(&mut g, x, y, tau1, false, Reduction::Sum)?;
    Ok(g.value(l).item())
}

/// Maximum dot product between `token` and any row of `video_tokens`.
pub fn token_similarity(video_tokens: &Tensor, token: &[f64]) -> Result<f64> {
    if video_tokens.rows() == 0 || video_tokens.is_empty() {
        return Err(Error::EmptySequence("token similarity over zero video tokens".into()));
    }
    if video_tokens.cols() != token.len() {
        return Err(Error::Dimension(format!(
            "video token width {} != token width {}",
            video_tokens.cols(),
            token.len()
        )));
    }
    Ok((0..video_tokens.rows())
        .map(|r| video_tokens.row(r).iter().zip(token).map(|(a, b)| a * b).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Token-level loss over `K` videos (`m_j×d`) and `K` encoded texts (`n_i×d`).
pub fn token_loss(videos: &[Tensor], texts: &[Tensor], toi: &[ToiWeights], tau2: f64) -> Result<f64> {
    check_batch(videos.len())?;
    let x = Packed::from_seqs(videos)?;
    let y = Packed::from_seqs(texts)?;
    let mut g = Graph::new();
    let xv = g.constant(x.tokens);
    let yv = g.constant(y.tokens);
    let l = token_nce(&mut g, (xv, &x.segs), (yv, &y.segs), toi, tau2, Reduction::Sum)?;
    Ok(g.value(l).item())
}

/// Fusion-level loss over the `2K` anchors of `selection`, given the fused
/// `[CLS]` output of every selected `(video, text)` pair.
pub fn fusion_loss(
    selection: &CascadeSelection,
    fused_cls: &HashMap<(usize, usize), Tensor>,
    head: &ScoringHead,
) -> Result<f64> {
    selection.validate()?;
    let layout = selection.layout(true);
    let mut scores = Vec::with_capacity(layout.pairs.len());
    for p in &layout.pairs {
        let z = fused_cls
            .get(p)
            .ok_or_else(|| Error::Internal(format!("no fused output for pair {p:?}")))?;
        if z.len() != head.w.len() {
            return Err(Error::Dimension(format!(
                "fused width {} != head width {}",
                z.len(),
                head.w.len()
            )));
        }
        scores.push(head.score(z.data()));
    }
    let mut g = Graph::new();
    let s = g.constant(Tensor::matrix(scores.len(), 1, scores)?);
    let l = fusion_nce(&mut g, s, &layout, Reduction::Sum)?;
    Ok(g.value(l).item())
}
