//! Inference scoring and retrieval metrics.
//!
//! Score matrices are oriented text-to-video: row `q` is a text query and
//! column `c` a candidate video.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::CorpusRecord;
use crate::encoders::{Checkpoint, Model, Vocab};
use crate::error::{Error, Result};
use crate::losses::token_score_matrix;
use crate::numerics::{matmul_into, Graph, Packed, Tensor, Transpose};
use crate::toi::{select_toi, sentence_weights, IdfTable, TargetPos, ToiWeights};

/// Per-stage multipliers of the summed inference score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceWeights {
    pub w_sentence: f64,
    pub w_token: f64,
    pub w_fusion: f64,
}

impl Default for InferenceWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

impl InferenceWeights {
    pub fn new(w_sentence: f64, w_token: f64, w_fusion: f64) -> Self {
        Self {
            w_sentence,
            w_token,
            w_fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.w_sentence, self.w_token, self.w_fusion];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(format!(
                "inference weights must be finite and >= 0, got {w:?}"
            )));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("inference weights are all zero".into()));
        }
        Ok(())
    }

    pub fn with_token(self, w_token: f64) -> Self {
        Self { w_token, ..self }
    }
}

/// Which scoring stages contribute to the summed score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageMask {
    pub sentence: bool,
    pub token: bool,
    pub fusion: bool,
}

impl Default for StageMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl StageMask {
    pub const ALL: Self = Self {
        sentence: true,
        token: true,
        fusion: true,
    };
    pub const SENTENCE: Self = Self {
        sentence: true,
        token: false,
        fusion: false,
    };
    pub const TOKEN: Self = Self {
        sentence: false,
        token: true,
        fusion: false,
    };
    pub const FUSION: Self = Self {
        sentence: false,
        token: false,
        fusion: true,
    };

    /// `all`, or stage names joined by `+`, e.g. `sentence+fusion`.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec.trim() == "all" {
            return Ok(Self::ALL);
        }
        let mut m = Self {
            sentence: false,
            token: false,
            fusion: false,
        };
        for part in spec.split('+').map(str::trim) {
            match part {
                "sentence" => m.sentence = true,
                "token" => m.token = true,
                "fusion" => m.fusion = true,
                other => return Err(Error::Config(format!("unknown stage {other:?}"))),
            }
        }
        if m.is_empty() {
            return Err(Error::Config("stage mask selects nothing".into()));
        }
        Ok(m)
    }

    pub fn is_empty(&self) -> bool {
        !(self.sentence || self.token || self.fusion)
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [
            (self.sentence, "sentence"),
            (self.token, "token"),
            (self.fusion, "fusion"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        parts.join("+")
    }
}

/// Text-by-video score matrix of each stage. Stages that were not computed
/// are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct StageScores {
    pub sentence: Option<Tensor>,
    pub token: Option<Tensor>,
    pub fusion: Option<Tensor>,
}

impl StageScores {
    /// Sentence and token stages from encoded videos and texts. `toi`
    /// weights multiply the per-token similarities.
    pub fn pre_fusion(x_bar: &Tensor, x: &Packed, y_bar: &Tensor, y: &Packed, toi: &[ToiWeights]) -> Result<Self> {
        let (c, q, d) = (x_bar.rows(), y_bar.rows(), x_bar.cols());
        if y_bar.cols() != d {
            return Err(Error::Dimension(format!(
                "video width {d} != text width {}",
                y_bar.cols()
            )));
        }
        let mut s = vec![0.0; q * c];
        matmul_into(
            q,
            d,
            c,
            y_bar.data(),
            Transpose::No,
            x_bar.data(),
            Transpose::Yes,
            0.0,
            &mut s,
        );
        let tok = token_score_matrix(x, y, toi, true)?;
        let mut t = vec![0.0; q * c];
        for j in 0..c {
            for i in 0..q {
                t[i * c + j] = tok.get(j, i);
            }
        }
        Ok(Self {
            sentence: Some(Tensor::matrix(q, c, s)?),
            token: Some(Tensor::matrix(q, c, t)?),
            fusion: None,
        })
    }

    /// `Σ_stage weight · mask · score`.
    pub fn combine(&self, weights: &InferenceWeights, mask: StageMask) -> Result<Tensor> {
        if mask.is_empty() {
            return Err(Error::Config("stage mask selects nothing".into()));
        }
        let stages = [
            (mask.sentence, weights.w_sentence, &self.sentence, "sentence"),
            (mask.token, weights.w_token, &self.token, "token"),
            (mask.fusion, weights.w_fusion, &self.fusion, "fusion"),
        ];
        let mut out: Option<Tensor> = None;
        for (on, w, t, name) in stages {
            if !on {
                continue;
            }
            let t = t
                .as_ref()
                .ok_or_else(|| Error::Internal(format!("{name} scores were not computed")))?;
            match &mut out {
                None => {
                    let mut z = t.clone();
                    z.data_mut().iter_mut().for_each(|v| *v *= w);
                    out = Some(z);
                }
                Some(acc) => {
                    if acc.shape() != t.shape() {
                        return Err(Error::Dimension("stage score matrices differ in shape".into()));
                    }
                    acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += w * b);
                }
            }
        }
        Ok(out.expect("non-empty mask"))
    }
}

/// Retrieval quality of one score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub ranks: Vec<usize>,
}

impl RetrievalMetrics {
    pub fn recall(&self, n: usize) -> f64 {
        let hits = self.ranks.iter().filter(|r| **r <= n).count();
        hits as f64 / self.ranks.len().max(1) as f64
    }
}

/// Ranks, Recall@n and median rank of `scores` (queries × candidates).
///
/// A candidate tying the correct one counts as ranked above it.
pub fn rank_metrics(scores: &Tensor, truth: &[usize], ns: &[usize]) -> Result<RetrievalMetrics> {
    let (q, c) = (scores.rows(), scores.cols());
    if truth.len() != q {
        return Err(Error::Input(format!(
            "{q} queries but {} ground-truth indices",
            truth.len()
        )));
    }
    if q == 0 {
        return Err(Error::Input("no queries".into()));
    }
    if !scores.all_finite() {
        return Err(Error::Numeric("non-finite retrieval score".into()));
    }
    let mut ranks = Vec::with_capacity(q);
    for (r, &t) in truth.iter().enumerate() {
        if t >= c {
            return Err(Error::Input(format!(
                "query {r}: ground truth {t} outside {c} candidates"
            )));
        }
        let row = scores.row(r);
        let above = row.iter().enumerate().filter(|&(i, s)| i != t && *s >= row[t]).count();
        ranks.push(1 + above);
    }
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let median_rank = if q % 2 == 1 {
        sorted[q / 2] as f64
    } else {
        (sorted[q / 2 - 1] + sorted[q / 2]) as f64 / 2.0
    };
    let mut m = RetrievalMetrics {
        recall_at: BTreeMap::new(),
        median_rank,
        ranks,
    };
    for &n in ns {
        let r = m.recall(n);
        m.recall_at.insert(n, r);
    }
    Ok(m)
}

/// A trained model together with the text-side preprocessing it was
/// trained with.
#[derive(Debug, Clone)]
pub struct Retriever {
    pub model: Model,
    pub vocab: Vocab,
    pub idf: Option<IdfTable>,
    pub target: TargetPos,
}

/// Encoded corpus side used for scoring.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub pooled: Tensor,
    pub tokens: Packed,
}

/// Pairs fused per graph when scoring a full matrix.
const FUSION_CHUNK: usize = 512;

impl Retriever {
    pub fn from_checkpoint(ck: &Checkpoint, target: TargetPos) -> Result<Self> {
        Ok(Self {
            model: ck.to_model()?,
            vocab: ck.vocab.clone(),
            idf: ck.idf.clone(),
            target,
        })
    }

    /// Normalised IDF weights of a caption's tokens of interest; uniform
    /// when no IDF table is available.
    pub fn toi_weights(&self, record: &CorpusRecord) -> ToiWeights {
        match &self.idf {
            Some(idf) => sentence_weights(&record.tokens, idf, &self.target),
            None => {
                let positions = select_toi(&record.tokens, &self.target);
                let n = positions.len();
                ToiWeights {
                    weights: vec![1.0 / n as f64; n],
                    positions,
                }
            }
        }
    }

    pub fn encode_videos(&self, records: &[CorpusRecord]) -> Result<Encoded> {
        let mut g = Graph::new();
        let refs: Vec<&[Vec<f64>]> = records.iter().map(|r| r.video_features.as_slice()).collect();
        let v = self.model.encode_videos(&mut g, &refs)?;
        Ok(Encoded {
            pooled: g.value(v.mean).clone(),
            tokens: Packed {
                tokens: g.value(v.tokens).clone(),
                segs: v.segs,
            },
        })
    }

    pub fn encode_texts(&self, records: &[CorpusRecord]) -> Result<Encoded> {
        let mut g = Graph::new();
        let ids: Vec<Vec<usize>> = records.iter().map(|r| self.vocab.encode(&r.tokens)).collect();
        let t = self.model.encode_texts(&mut g, &ids)?;
        Ok(Encoded {
            pooled: g.value(t.cls).clone(),
            tokens: Packed {
                tokens: g.value(t.tokens).clone(),
                segs: t.segs,
            },
        })
    }

    /// Head score of every (text q, video c) pair, as a `Q×C` matrix.
    pub fn fusion_scores(&self, videos: &Encoded, texts: &Encoded) -> Result<Tensor> {
        let (c, q) = (videos.tokens.len(), texts.tokens.len());
        let pairs: Vec<(usize, usize)> = (0..q).flat_map(|i| (0..c).map(move |j| (j, i))).collect();
        let mut out = Vec::with_capacity(q * c);
        for chunk in pairs.chunks(FUSION_CHUNK) {
            let mut g = Graph::new();
            let vt = g.constant(videos.tokens.tokens.clone());
            let tt = g.constant(texts.tokens.tokens.clone());
            let f = self
                .model
                .fuse_pairs(&mut g, (vt, &videos.tokens.segs), (tt, &texts.tokens.segs), chunk, true)?;
            let s = self.model.head_scores(&mut g, f.cls)?;
            out.extend_from_slice(g.value(s).data());
        }
        Tensor::matrix(q, c, out)
    }

    /// Per-stage text-by-video scores; only stages in `mask` are computed.
    pub fn stage_scores(
        &self,
        videos: &[CorpusRecord],
        texts: &[CorpusRecord],
        mask: StageMask,
    ) -> Result<StageScores> {
        if mask.fusion && !self.model.has_fusion() {
            return Err(Error::Checkpoint(
                "fusion stage requested but the model has no fusion parameters".into(),
            ));
        }
        let ev = self.encode_videos(videos)?;
        let et = self.encode_texts(texts)?;
        let toi: Vec<ToiWeights> = texts.iter().map(|r| self.toi_weights(r)).collect();
        let mut s = StageScores::pre_fusion(&ev.pooled, &ev.tokens, &et.pooled, &et.tokens, &toi)?;
        if !mask.sentence {
            s.sentence = None;
        }
        if !mask.token {
            s.token = None;
        }
        if mask.fusion {
            s.fusion = Some(self.fusion_scores(&ev, &et)?);
        }
        Ok(s)
    }

    /// Summed alignment score of one video-text pair.
    pub fn score_pair(
        &self,
        video: &CorpusRecord,
        text: &CorpusRecord,
        weights: &InferenceWeights,
        mask: StageMask,
    ) -> Result<f64> {
        let s = self.stage_scores(std::slice::from_ref(video), std::slice::from_ref(text), mask)?;
        Ok(s.combine(weights, mask)?.data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::encoders::EncoderConfig;
    use crate::numerics::Rng;
    use crate::toi::compute_idf_records;

    fn retriever(records: &[CorpusRecord], fusion: bool) -> Retriever {
        let vocab = Vocab::build(records);
        let cfg = EncoderConfig {
            d: 8,
            heads: 2,
            ffn_dim: 16,
            ..EncoderConfig::desk(records[0].feature_width(), vocab.len())
        };
        let model = Model::new(cfg, &mut Rng::new(1)).unwrap();
        let mut ck = Checkpoint::from_model(&model, &vocab, Some(&compute_idf_records(records).unwrap()));
        if !fusion {
            ck.params
                .retain(|p| !p.name.starts_with("fusion.") && !p.name.starts_with("head."));
        }
        Retriever::from_checkpoint(&ck, TargetPos::default()).unwrap()
    }

    fn corpus(n: usize) -> Vec<CorpusRecord> {
        let mut spec = SyntheticSpec::desk(n, 0.1, 4);
        spec.d_video_in = 16;
        spec.concepts = 16;
        spec.vocab = crate::data::default_vocab(16);
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn dominant_diagonal_is_perfect() {
        let s = Tensor::from_rows(&[vec![3.0, 1.0, 0.0], vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 5.0]]).unwrap();
        let m = rank_metrics(&s, &[0, 1, 2], &[1, 5]).unwrap();
        assert_eq!(m.recall_at[&1], 1.0);
        assert_eq!(m.median_rank, 1.0);
    }

    #[test]
    fn ties_rank_against_the_query() {
        let s = Tensor::matrix(10, 10, vec![0.5; 100]).unwrap();
        let truth: Vec<usize> = (0..10).collect();
        let m = rank_metrics(&s, &truth, &[1, 10]).unwrap();
        assert!(m.ranks.iter().all(|r| *r == 10));
        assert_eq!(m.recall_at[&1], 0.0);
        assert_eq!(m.recall_at[&10], 1.0);
        assert_eq!(m.median_rank, 10.0);
    }

    #[test]
    fn even_count_median_is_central_mean() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let m = rank_metrics(&s, &[0, 1], &[1]).unwrap();
        assert_eq!(m.ranks, vec![1, 2]);
        assert_eq!(m.median_rank, 1.5);
    }

    #[test]
    fn out_of_range_truth_is_input_error() {
        let s = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(rank_metrics(&s, &[2], &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn stage_mask_parsing() {
        assert_eq!(StageMask::parse("all").unwrap(), StageMask::ALL);
        assert_eq!(StageMask::parse("fusion").unwrap(), StageMask::FUSION);
        let m = StageMask::parse("sentence+fusion").unwrap();
        assert!(m.sentence && !m.token && m.fusion);
        assert_eq!(m.name(), "sentence+fusion");
        assert!(StageMask::parse("bogus").is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(InferenceWeights::default().validate().is_ok());
        assert!(InferenceWeights::new(0.0, 0.0, 0.0).validate().is_err());
        assert!(InferenceWeights::new(1.0, -0.1, 0.0).validate().is_err());
    }

    #[test]
    fn sentence_only_score_is_the_dot_product() {
        let recs = corpus(3);
        let r = retriever(&recs, true);
        let (_, x_bar) = r.model.encode_video(&recs[0].video_features).unwrap();
        let (_, y_bar) = r.model.encode_text(&r.vocab.encode(&recs[1].tokens)).unwrap();
        let want: f64 = x_bar.data().iter().zip(y_bar.data()).map(|(a, b)| a * b).sum();
        let got = r
            .score_pair(&recs[0], &recs[1], &InferenceWeights::default(), StageMask::SENTENCE)
            .unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn doubling_weights_doubles_scores() {
        let recs = corpus(6);
        let r = retriever(&recs, true);
        let s = r.stage_scores(&recs, &recs, StageMask::ALL).unwrap();
        let w = InferenceWeights::new(1.0, 0.5, 1.0);
        let a = s.combine(&w, StageMask::ALL).unwrap();
        let b = s
            .combine(&InferenceWeights::new(2.0, 1.0, 2.0), StageMask::ALL)
            .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let truth: Vec<usize> = (0..6).collect();
        let ma = rank_metrics(&a, &truth, &[1]).unwrap();
        let mb = rank_metrics(&b, &truth, &[1]).unwrap();
        assert_eq!(ma.ranks, mb.ranks);
    }

    #[test]
    fn pair_score_matches_scalar_recomputation() {
        let recs = corpus(2);
        let r = retriever(&recs, true);
        let (video, text) = (&recs[0], &recs[1]);
        let (x, x_bar) = r.model.encode_video(&video.video_features).unwrap();
        let (y, y_bar) = r.model.encode_text(&r.vocab.encode(&text.tokens)).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let toi = r.toi_weights(text);
        let mut tok = 0.0;
        for (&p, &w) in toi.positions.iter().zip(&toi.weights) {
            let s = (0..x.rows())
                .map(|m| dot(x.row(m), y.row(p + 1)))
                .fold(f64::NEG_INFINITY, f64::max);
            tok += w * s;
        }
        let fused = r.model.fuse(&x, &y).unwrap();
        let (hw, hb) = r.model.head_ids().unwrap();
        let p = r.model.params();
        let head = dot(p.get(hw).data(), fused.z_cls.data()) + p.get(hb).data()[0];
        let w = InferenceWeights::new(1.0, 0.5, 2.0);
        let want = dot(x_bar.data(), y_bar.data()) + 0.5 * tok + 2.0 * head;
        let got = r.score_pair(video, text, &w, StageMask::ALL).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn fusion_without_parameters_is_checkpoint_error() {
        let recs = corpus(2);
        let r = retriever(&recs, false);
        let err = r.score_pair(&recs[0], &recs[1], &InferenceWeights::default(), StageMask::ALL);
        assert!(matches!(err, Err(Error::Checkpoint(_))));
        assert!(r
            .score_pair(&recs[0], &recs[1], &InferenceWeights::default(), StageMask::SENTENCE)
            .is_ok());
    }
}
