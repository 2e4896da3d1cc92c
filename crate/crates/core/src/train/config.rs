use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeMode;
use crate::encoders::{EncoderConfig, FusionOrder};
use crate::error::{Error, Result};
use crate::eval::{InferenceWeights, StageMask};
use crate::losses::LossConfig;
use crate::toi::TargetPos;

/// Encoder shape. Input width and vocabulary size come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub max_video_tokens: usize,
    pub max_text_tokens: usize,
    pub fusion_order: FusionOrder,
}

impl ArchConfig {
    pub fn desk() -> Self {
        Self::from_encoder(&EncoderConfig::desk(1, 3))
    }

    pub fn full_scale() -> Self {
        Self::from_encoder(&EncoderConfig::full_scale(1, 3))
    }

    pub fn from_encoder(e: &EncoderConfig) -> Self {
        Self {
            d: e.d,
            heads: e.heads,
            ffn_dim: e.ffn_dim,
            video_layers: e.video_layers,
            text_layers: e.text_layers,
            fusion_layers: e.fusion_layers,
            max_video_tokens: e.max_video_tokens,
            max_text_tokens: e.max_text_tokens,
            fusion_order: e.fusion_order,
        }
    }

    pub fn encoder(&self, d_video_in: usize, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            video_layers: self.video_layers,
            text_layers: self.text_layers,
            fusion_layers: self.fusion_layers,
            d_video_in,
            vocab_size,
            max_video_tokens: self.max_video_tokens,
            max_text_tokens: self.max_text_tokens,
            fusion_order: self.fusion_order,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub weights: InferenceWeights,
    pub stage_mask: StageMask,
    /// Token weights to sweep; empty evaluates `weights` once.
    pub token_weight_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            weights: InferenceWeights::new(1.0, 0.5, 1.0),
            stage_mask: StageMask::ALL,
            token_weight_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub scores_csv: Option<PathBuf>,
}

/// Everything a run depends on besides its input files. Top-level fields
/// missing from a JSON config take their desk values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ArchConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub cascade_mode: CascadeMode,
    /// Weight the token term of the cascade score by IDF.
    pub cascade_weighted: bool,
    /// Fuse each distinct pair once per step (same loss, less work).
    pub dedup_fused_pairs: bool,
    /// POS tags of tokens of interest, e.g. `NOUN+VERB`.
    pub target_pos: String,
    pub seed: u64,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// d=32, K=16, k'=4, 2000 steps at learning rate 1e-3.
    pub fn desk() -> Self {
        Self {
            model: ArchConfig::desk(),
            loss: LossConfig {
                k_prime: 4,
                ..LossConfig::default()
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                weight_decay: 0.01,
                warmup_steps: 200,
                total_steps: 2000,
                batch_size: 16,
            },
            cascade_mode: CascadeMode::Cascade,
            cascade_weighted: false,
            dedup_fused_pairs: false,
            target_pos: "NOUN+VERB".into(),
            seed: 0,
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }

    /// Batch 128, 30k steps with 5k warmup at learning rate 1e-4 and the
    /// larger encoder. Documented for reference; far beyond desk scale.
    pub fn full_scale() -> Self {
        Self {
            model: ArchConfig::full_scale(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                learning_rate: 1e-4,
                weight_decay: 0.01,
                warmup_steps: 5000,
                total_steps: 30000,
                batch_size: 128,
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", o.batch_size)));
        }
        if o.total_steps < 1 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                o.learning_rate
            )));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                o.weight_decay
            )));
        }
        self.loss.validate(o.batch_size)?;
        self.model.encoder(1, 3).validate()?;
        self.eval.weights.validate()?;
        if self.eval.stage_mask.is_empty() {
            return Err(Error::Config("eval stage mask selects nothing".into()));
        }
        if self
            .eval
            .token_weight_sweep
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config(
                "token weight sweep values must be finite and >= 0".into(),
            ));
        }
        self.target()?;
        Ok(())
    }

    pub fn target(&self) -> Result<TargetPos> {
        TargetPos::parse(&self.target_pos)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
