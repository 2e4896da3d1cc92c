//! One forward pass of the combined objective through the whole model.

use crate::cascade::{combined_scores, CascadeMode, CascadeSelection};
use crate::encoders::{EncodedBatch, Model};
use crate::error::{Error, Result};
use crate::losses::{fusion_nce, sentence_nce, token_nce, LossBreakdown, LossConfig};
use crate::numerics::{Graph, Packed, Rng, Var};
use crate::toi::ToiWeights;

/// Model inputs of one batch of `K` pairs.
#[derive(Debug, Clone)]
pub struct BatchInput<'a> {
    pub videos: Vec<&'a [Vec<f64>]>,
    /// `[CLS] ... [SEP]` token ids.
    pub texts: Vec<Vec<usize>>,
    pub toi: Vec<ToiWeights>,
}

impl BatchInput<'_> {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// How fusion-stage negatives are obtained.
pub enum Selector<'a> {
    Mode {
        mode: CascadeMode,
        rng: &'a mut Rng,
        /// Weight the token term of the cascade score by IDF.
        weighted: bool,
    },
    /// A precomputed selection, e.g. to hold it fixed under perturbation.
    Fixed(CascadeSelection),
}

/// Graph handles and values of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub total: Var,
    pub l1: Option<Var>,
    pub l2: Option<Var>,
    pub l3: Option<Var>,
    pub breakdown: LossBreakdown,
    pub selection: Option<CascadeSelection>,
}

fn packed(g: &Graph, tokens: Var, segs: &[(usize, usize)]) -> Packed {
    Packed {
        tokens: g.value(tokens).clone(),
        segs: segs.to_vec(),
    }
}

/// Hard-negative selection from the current batch encodings. With the token
/// loss disabled the cascade score uses the global similarity only.
fn select(
    g: &Graph,
    enc: &EncodedBatch,
    batch: &BatchInput<'_>,
    cfg: &LossConfig,
    selector: Selector<'_>,
) -> Result<CascadeSelection> {
    let k = batch.len();
    match selector {
        Selector::Fixed(sel) => {
            sel.validate()?;
            if sel.k() != k {
                return Err(Error::Internal(format!(
                    "selection for {} pairs, batch has {k}",
                    sel.k()
                )));
            }
            Ok(sel)
        }
        Selector::Mode { mode, rng, weighted } => {
            let scores = || {
                let no_toi;
                let toi = if cfg.lambda_t > 0.0 {
                    &batch.toi
                } else {
                    no_toi = vec![ToiWeights::default(); k];
                    &no_toi
                };
                combined_scores(
                    g.value(enc.video.mean),
                    &packed(g, enc.video.tokens, &enc.video.segs),
                    g.value(enc.text.cls),
                    &packed(g, enc.text.tokens, &enc.text.segs),
                    toi,
                    weighted,
                )
            };
            mode.select(scores, k, cfg.k_prime, rng)
        }
    }
}

/// Encodes the batch and builds `l1 + λ_t·l2 + l3` (disabled parts omitted).
pub fn forward(
    g: &mut Graph,
    model: &Model,
    batch: &BatchInput<'_>,
    cfg: &LossConfig,
    selector: Selector<'_>,
    dedup: bool,
) -> Result<Forward> {
    build(g, model, batch, cfg, selector, dedup, false)
}

/// [`forward`] with the sign of the sentence-loss gradient reversed, used to
/// confirm the gradient check catches a broken backward rule.
pub(crate) fn forward_flipped_sentence_grad(
    g: &mut Graph,
    model: &Model,
    batch: &BatchInput<'_>,
    cfg: &LossConfig,
    selector: Selector<'_>,
) -> Result<Forward> {
    build(g, model, batch, cfg, selector, false, true)
}

fn build(
    g: &mut Graph,
    model: &Model,
    batch: &BatchInput<'_>,
    cfg: &LossConfig,
    selector: Selector<'_>,
    dedup: bool,
    flip_sentence: bool,
) -> Result<Forward> {
    let k = batch.len();
    cfg.validate(k)?;
    if batch.texts.len() != k || batch.toi.len() != k {
        return Err(Error::Input("batch parts differ in length".into()));
    }
    let enc = model.encode_batch(g, &batch.videos, &batch.texts)?;
    let l1 = if cfg.sentence {
        let l = sentence_nce(g, enc.video.mean, enc.text.cls, cfg.tau1, cfg.symmetric, cfg.reduction)?;
        Some(if flip_sentence { g.reverse_grad(l) } else { l })
    } else {
        None
    };
    let l2 = if cfg.lambda_t > 0.0 {
        Some(token_nce(
            g,
            (enc.video.tokens, &enc.video.segs),
            (enc.text.tokens, &enc.text.segs),
            &batch.toi,
            cfg.tau2,
            cfg.reduction,
        )?)
    } else {
        None
    };
    let (l3, selection) = if cfg.fusion {
        let sel = select(g, &enc, batch, cfg, selector)?;
        let layout = sel.layout(dedup);
        let fused = model.fuse_pairs(
            g,
            (enc.video.tokens, &enc.video.segs),
            (enc.text.tokens, &enc.text.segs),
            &layout.pairs,
            true,
        )?;
        let scores = model.head_scores(g, fused.cls)?;
        (Some(fusion_nce(g, scores, &layout, cfg.reduction)?), Some(sel))
    } else {
        (None, None)
    };

    let mut parts = Vec::new();
    if let Some(v) = l1 {
        parts.push(v);
    }
    if let Some(v) = l2 {
        parts.push(g.scale(v, cfg.lambda_t));
    }
    if let Some(v) = l3 {
        parts.push(v);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let breakdown = LossBreakdown::new(val(l1), val(l2), val(l3), cfg.lambda_t);
    Ok(Forward {
        total,
        l1,
        l2,
        l3,
        breakdown,
        selection,
    })
}
