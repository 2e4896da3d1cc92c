//! Video encoder, text encoder and multi-modal fusion.
//!
//! All three are stacks of [`Block`]s. Sequences in a batch are packed
//! back-to-back (no padding rows); each sequence is described by its
//! `(start, len)` row range and attention never crosses a range boundary.

mod checkpoint;
mod layers;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

pub use checkpoint::{Checkpoint, ParamEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{Block, LayerNorm, Linear};
pub use vocab::{Vocab, CLS, CLS_ID, SEP, SEP_ID, UNK, UNK_ID};

use layers::{embed, param, score_rows, Fill, Init};

/// Where the text sits in the fused sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    /// `[CLS] text [SEP] video`: the `[CLS]` output is row 0.
    TextFirst,
    /// `video [CLS] text [SEP]`: the `[CLS]` output is row `m`.
    VideoFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub d_video_in: usize,
    pub vocab_size: usize,
    pub max_video_tokens: usize,
    pub max_text_tokens: usize,
    pub fusion_order: FusionOrder,
}

impl EncoderConfig {
    /// d=32, 2 heads, 1 video / 1 text / 2 fusion layers, m≤8, n≤12.
    pub fn desk(d_video_in: usize, vocab_size: usize) -> Self {
        Self {
            d: 32,
            heads: 2,
            ffn_dim: 64,
            video_layers: 1,
            text_layers: 1,
            fusion_layers: 2,
            d_video_in,
            vocab_size,
            max_video_tokens: 8,
            max_text_tokens: 12,
            fusion_order: FusionOrder::TextFirst,
        }
    }

    /// Full-scale sequence lengths and layer counts (48 video / 30 text
    /// tokens). Documented for reference only.
    pub fn full_scale(d_video_in: usize, vocab_size: usize) -> Self {
        Self {
            d: 768,
            heads: 12,
            ffn_dim: 3072,
            video_layers: 2,
            text_layers: 12,
            fusion_layers: 2,
            d_video_in,
            vocab_size,
            max_video_tokens: 48,
            max_text_tokens: 30,
            fusion_order: FusionOrder::TextFirst,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d ({}) must be a positive multiple of heads ({})",
                self.d, self.heads
            ));
        }
        if self.ffn_dim == 0 || self.d_video_in == 0 {
            return bad("ffn_dim and d_video_in must be positive".into());
        }
        if self.max_video_tokens < 1 {
            return bad("max_video_tokens must be >= 1".into());
        }
        if self.max_text_tokens < 3 {
            return bad("max_text_tokens must be >= 3 ([CLS], one word, [SEP])".into());
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must cover the special tokens".into());
        }
        Ok(())
    }
}

/// Packed video encodings for a batch.
#[derive(Debug, Clone)]
pub struct VideoEncoding {
    /// `(Σ m_i) × d` token embeddings.
    pub tokens: Var,
    pub segs: Vec<(usize, usize)>,
    /// `K × d` mean over each video's own frames.
    pub mean: Var,
}

/// Packed text encodings for a batch.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    /// `(Σ n_i) × d` token embeddings, `[CLS]` first in each sequence.
    pub tokens: Var,
    pub segs: Vec<(usize, usize)>,
    /// `K × d` `[CLS]` rows.
    pub cls: Var,
}

/// Video and text encodings of one batch (`X`, `Y`, `x̄`, `ȳ`).
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub video: VideoEncoding,
    pub text: TextEncoding,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.video.segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video.segs.is_empty()
    }

    /// Dense `m_i × d` copy of video `i`'s tokens.
    pub fn video_tokens_of(&self, g: &Graph, i: usize) -> Tensor {
        slice_rows(g.value(self.video.tokens), self.video.segs[i])
    }

    /// Dense `n_i × d` copy of text `i`'s tokens.
    pub fn text_tokens_of(&self, g: &Graph, i: usize) -> Tensor {
        slice_rows(g.value(self.text.tokens), self.text.segs[i])
    }
}

pub(crate) fn slice_rows(t: &Tensor, (start, len): (usize, usize)) -> Tensor {
    let c = t.cols();
    Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec()).expect("in range")
}

/// Fusion outputs for a list of (video, text) pairs.
#[derive(Debug, Clone)]
pub struct FusedBatch {
    /// Full fused sequences, absent when only `[CLS]` rows were computed.
    pub z: Option<Var>,
    pub segs: Vec<(usize, usize)>,
    /// One `[CLS]` output row per pair.
    pub cls: Var,
}

/// Fused sequence of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// `(m+n) × d`.
    pub z: Tensor,
    /// `[d]`, equal to the `[CLS]` row of `z`.
    pub z_cls: Tensor,
}

#[derive(Debug, Clone)]
struct VideoParams {
    proj: Linear,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
struct TextParams {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
struct FusionParams {
    type_emb: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

const VIDEO_TYPE: usize = 0;
const TEXT_TYPE: usize = 1;

/// The three encoders plus the fusion scoring head.
#[derive(Debug, Clone)]
pub struct Model {
    config: EncoderConfig,
    params: ParamStore,
    video: VideoParams,
    text: TextParams,
    fusion: Option<FusionParams>,
}

impl Model {
    /// Fresh model with seeded scaled-uniform initialisation.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::Fresh(rng);
        let (video, text, fusion) = Self::wire(&config, &mut store, &mut init, true)?;
        Ok(Self {
            config,
            params: store,
            video,
            text,
            fusion,
        })
    }

    /// Binds an existing parameter store; fusion parameters are optional.
    pub fn from_params(config: EncoderConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let has_fusion = store.id("head.w").is_some();
        let mut init = Init::Existing;
        let (video, text, fusion) = Self::wire(&config, &mut store, &mut init, has_fusion)?;
        Ok(Self {
            config,
            params: store,
            video,
            text,
            fusion,
        })
    }

    fn wire(
        c: &EncoderConfig,
        store: &mut ParamStore,
        init: &mut Init<'_>,
        with_fusion: bool,
    ) -> Result<(VideoParams, TextParams, Option<FusionParams>)> {
        let d = c.d;
        let emb = Fill::fan_in(d);
        let video = VideoParams {
            proj: Linear::build(store, init, "video.proj", c.d_video_in, d)?,
            blocks: (0..c.video_layers)
                .map(|i| Block::build(store, init, &format!("video.layer{i}"), d, c.ffn_dim, c.heads))
                .collect::<Result<_>>()?,
        };
        let text = TextParams {
            tok: param(store, init, "text.tok_emb".into(), vec![c.vocab_size, d], emb)?,
            pos: param(store, init, "text.pos_emb".into(), vec![c.max_text_tokens, d], emb)?,
            blocks: (0..c.text_layers)
                .map(|i| Block::build(store, init, &format!("text.layer{i}"), d, c.ffn_dim, c.heads))
                .collect::<Result<_>>()?,
        };
        let fusion = if with_fusion {
            Some(FusionParams {
                type_emb: param(store, init, "fusion.type_emb".into(), vec![2, d], emb)?,
                pos: param(
                    store,
                    init,
                    "fusion.pos_emb".into(),
                    vec![c.max_video_tokens + c.max_text_tokens, d],
                    emb,
                )?,
                blocks: (0..c.fusion_layers)
                    .map(|i| Block::build(store, init, &format!("fusion.layer{i}"), d, c.ffn_dim, c.heads))
                    .collect::<Result<_>>()?,
                head_w: param(store, init, "head.w".into(), vec![d], emb)?,
                head_b: param(store, init, "head.b".into(), vec![1], emb)?,
            })
        } else {
            None
        };
        Ok((video, text, fusion))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn has_fusion(&self) -> bool {
        self.fusion.is_some()
    }

    fn fusion_params(&self) -> Result<&FusionParams> {
        self.fusion
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("model has no fusion parameters".into()))
    }

    /// Ids of the scoring head weight and bias.
    pub fn head_ids(&self) -> Result<(ParamId, ParamId)> {
        let f = self.fusion_params()?;
        Ok((f.head_w, f.head_b))
    }

    /// Encodes a batch of videos, each given as `m_i × d_video_in` frames.
    pub fn encode_videos(&self, g: &mut Graph, videos: &[&[Vec<f64>]]) -> Result<VideoEncoding> {
        let c = &self.config;
        let mut data = Vec::new();
        let mut segs = Vec::with_capacity(videos.len());
        for v in videos {
            if v.is_empty() {
                return Err(Error::EmptySequence("video with zero frames".into()));
            }
            if v.len() > c.max_video_tokens {
                return Err(Error::Input(format!(
                    "video has {} frames, limit is {}",
                    v.len(),
                    c.max_video_tokens
                )));
            }
            segs.push((data.len() / c.d_video_in, v.len()));
            for frame in v.iter() {
                if frame.len() != c.d_video_in {
                    return Err(Error::Dimension(format!(
                        "video feature width {} != {}",
                        frame.len(),
                        c.d_video_in
                    )));
                }
                data.extend_from_slice(frame);
            }
        }
        let rows = data.len() / c.d_video_in;
        let x = g.constant(Tensor::matrix(rows, c.d_video_in, data)?);
        let mut h = self.video.proj.forward(g, &self.params, x)?;
        for b in &self.video.blocks {
            h = b.forward(g, &self.params, h, &segs, None)?;
        }
        let mean = g.segment_mean(h, segs.clone())?;
        Ok(VideoEncoding { tokens: h, segs, mean })
    }

    /// Encodes a batch of token-id sequences (each `[CLS] ... [SEP]`).
    pub fn encode_texts(&self, g: &mut Graph, texts: &[Vec<usize>]) -> Result<TextEncoding> {
        let c = &self.config;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::with_capacity(texts.len());
        for t in texts {
            if t.len() < 2 || t[0] != CLS_ID || t[t.len() - 1] != SEP_ID {
                return Err(Error::Input("text must start with [CLS] and end with [SEP]".into()));
            }
            if t.len() > c.max_text_tokens {
                return Err(Error::Input(format!(
                    "text has {} tokens, limit is {}",
                    t.len(),
                    c.max_text_tokens
                )));
            }
            if let Some(bad) = t.iter().find(|i| **i >= c.vocab_size) {
                return Err(Error::Vocabulary(format!(
                    "token id {bad} outside vocabulary of {}",
                    c.vocab_size
                )));
            }
            segs.push((ids.len(), t.len()));
            ids.extend_from_slice(t);
            pos.extend(0..t.len());
        }
        let tok = embed(g, &self.params, self.text.tok, ids)?;
        let p = embed(g, &self.params, self.text.pos, pos)?;
        let mut h = g.add(tok, p)?;
        for b in &self.text.blocks {
            h = b.forward(g, &self.params, h, &segs, None)?;
        }
        let cls = g.gather_rows(h, segs.iter().map(|s| s.0).collect())?;
        Ok(TextEncoding { tokens: h, segs, cls })
    }

    pub fn encode_batch(&self, g: &mut Graph, videos: &[&[Vec<f64>]], texts: &[Vec<usize>]) -> Result<EncodedBatch> {
        if videos.len() != texts.len() {
            return Err(Error::Input(format!(
                "{} videos but {} texts",
                videos.len(),
                texts.len()
            )));
        }
        let video = self.encode_videos(g, videos)?;
        let text = self.encode_texts(g, texts)?;
        Ok(EncodedBatch { video, text })
    }

    /// Fuses `(video j, text i)` pairs drawn from packed encodings.
    ///
    /// With `cls_only`, the last fusion layer evaluates only the `[CLS]`
    /// query row of each pair; the `[CLS]` outputs are identical to the full
    /// computation.
    pub fn fuse_pairs(
        &self,
        g: &mut Graph,
        video: (Var, &[(usize, usize)]),
        text: (Var, &[(usize, usize)]),
        pairs: &[(usize, usize)],
        cls_only: bool,
    ) -> Result<FusedBatch> {
        let f = self.fusion_params()?;
        let c = &self.config;
        let (vtok, vsegs) = video;
        let (ttok, tsegs) = text;
        if g.value(vtok).cols() != c.d || g.value(ttok).cols() != c.d {
            return Err(Error::Dimension(format!(
                "fusion inputs must have width {}, got {} and {}",
                c.d,
                g.value(vtok).cols(),
                g.value(ttok).cols()
            )));
        }
        let text_rows = g.value(ttok).rows();
        let src = g.concat_rows(ttok, vtok)?;
        let mut idx = Vec::new();
        let mut types = Vec::new();
        let mut segs = Vec::with_capacity(pairs.len());
        let mut cls_offsets = Vec::with_capacity(pairs.len());
        for &(j, i) in pairs {
            let (vs, m) = *vsegs
                .get(j)
                .ok_or_else(|| Error::Internal(format!("video {j} not in batch")))?;
            let (ts, n) = *tsegs
                .get(i)
                .ok_or_else(|| Error::Internal(format!("text {i} not in batch")))?;
            if m + n > c.max_video_tokens + c.max_text_tokens {
                return Err(Error::Input(format!("fused length {} exceeds positional table", m + n)));
            }
            segs.push((idx.len(), m + n));
            let text_part = (ts..ts + n).map(|r| (r, TEXT_TYPE));
            let video_part = (vs..vs + m).map(|r| (text_rows + r, VIDEO_TYPE));
            let ordered: Vec<(usize, usize)> = match c.fusion_order {
                FusionOrder::TextFirst => {
                    cls_offsets.push(0);
                    text_part.chain(video_part).collect()
                }
                FusionOrder::VideoFirst => {
                    cls_offsets.push(m);
                    video_part.chain(text_part).collect()
                }
            };
            for (r, t) in ordered {
                idx.push(r);
                types.push(t);
            }
        }
        let positions: Vec<usize> = segs.iter().flat_map(|&(_, len)| 0..len).collect();
        let x = g.gather_rows(src, idx)?;
        let te = embed(g, &self.params, f.type_emb, types)?;
        let pe = embed(g, &self.params, f.pos, positions)?;
        let x = g.add(x, te)?;
        let mut h = g.add(x, pe)?;
        let last = f.blocks.len().checked_sub(1);
        for (l, b) in f.blocks.iter().enumerate() {
            if cls_only && Some(l) == last {
                h = b.forward(g, &self.params, h, &segs, Some(&cls_offsets))?;
                return Ok(FusedBatch { z: None, segs, cls: h });
            }
            h = b.forward(g, &self.params, h, &segs, None)?;
        }
        let rows = segs.iter().zip(&cls_offsets).map(|(s, o)| s.0 + o).collect();
        let cls = g.gather_rows(h, rows)?;
        Ok(FusedBatch { z: Some(h), segs, cls })
    }

    /// Linear scoring head `w · z_cls + b`, one row per fused pair.
    pub fn head_scores(&self, g: &mut Graph, cls: Var) -> Result<Var> {
        let f = self.fusion_params()?;
        score_rows(g, &self.params, cls, f.head_w, f.head_b)
    }

    /// Single video: `m × d` tokens and the `[d]` pooled mean.
    pub fn encode_video(&self, features: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let v = self.encode_videos(&mut g, &[features])?;
        let d = self.config.d;
        Ok((
            g.value(v.tokens).clone(),
            Tensor::new(vec![d], g.value(v.mean).data().to_vec())?,
        ))
    }

    /// Single text: `n × d` tokens and the `[d]` `[CLS]` output.
    pub fn encode_text(&self, token_ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let t = self.encode_texts(&mut g, &[token_ids.to_vec()])?;
        let d = self.config.d;
        Ok((
            g.value(t.tokens).clone(),
            Tensor::new(vec![d], g.value(t.cls).data().to_vec())?,
        ))
    }

    /// Fuses one video token sequence with one text token sequence.
    pub fn fuse(&self, video_tokens: &Tensor, text_tokens: &Tensor) -> Result<FusionOutput> {
        if video_tokens.rows() == 0 || text_tokens.rows() == 0 {
            return Err(Error::EmptySequence("fusion input without tokens".into()));
        }
        let mut g = Graph::new();
        let v = g.constant(video_tokens.clone());
        let t = g.constant(text_tokens.clone());
        let vs = [(0, video_tokens.rows())];
        let ts = [(0, text_tokens.rows())];
        let out = self.fuse_pairs(&mut g, (v, &vs), (t, &ts), &[(0, 0)], false)?;
        let z = g.value(out.z.expect("full fusion")).clone();
        let z_cls = Tensor::new(vec![self.config.d], g.value(out.cls).data().to_vec())?;
        Ok(FusionOutput { z, z_cls })
    }

    /// Ids of every fusion-stage parameter (type/position tables, blocks, head).
    pub fn fusion_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with("fusion.") || n.starts_with("head."))
            .map(|(id, _, _)| id)
            .collect()
    }
}

#[cfg(test)]
mod tests;
