//! Training and evaluation drivers plus run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{load_corpus, CorpusRecord};
use crate::encoders::{Checkpoint, Model, Vocab};
use crate::error::{Error, Result};
use crate::eval::{rank_metrics, InferenceWeights, RetrievalMetrics, Retriever, StageMask};
use crate::losses::LossBreakdown;
use crate::numerics::{Graph, Rng};
use crate::toi::{compute_idf_records, sentence_weights, ToiWeights};

use super::config::{ArchConfig, EvalConfig, RunConfig};
use super::objective::{forward, BatchInput, Selector};
use super::optim::{learning_rate, AdamW};

/// Result of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub last: LossBreakdown,
    pub steps: usize,
}

/// Seeded epoch-wise batch order; the incomplete tail of each epoch is dropped.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    k: usize,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, k: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            k,
            rng,
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.cursor + self.k > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        self.cursor += self.k;
        &self.order[self.cursor - self.k..self.cursor]
    }
}

fn check_width(records: &[CorpusRecord], width: usize) -> Result<()> {
    match records.iter().find(|r| r.feature_width() != width) {
        Some(r) => Err(Error::Dimension(format!(
            "record {} has feature width {}, expected {width}",
            r.id,
            r.feature_width()
        ))),
        None => Ok(()),
    }
}

/// Trains a fresh model on `records`, writing one JSON loss line per step.
pub fn train(cfg: &RunConfig, records: &[CorpusRecord], log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = cfg.optimizer.batch_size;
    if records.len() < k {
        return Err(Error::Config(format!(
            "corpus has {} records, fewer than batch_size {k}",
            records.len()
        )));
    }
    let width = records[0].feature_width();
    check_width(records, width)?;
    let target = cfg.target()?;
    let vocab = Vocab::build(records);
    let idf = compute_idf_records(records)?;
    let encoder = cfg.model.encoder(width, vocab.len());
    let texts: Vec<Vec<usize>> = records.iter().map(|r| vocab.encode(&r.tokens)).collect();
    let toi: Vec<ToiWeights> = records
        .iter()
        .map(|r| sentence_weights(&r.tokens, &idf, &target))
        .collect();

    let root = Rng::new(cfg.seed);
    let mut model = Model::new(encoder, &mut root.fork(1))?;
    let mut batches = Batches::new(records.len(), k, root.fork(2));
    let mut select_rng = root.fork(3);
    let mut opt = AdamW::new(model.params(), cfg.optimizer.weight_decay);
    let o = &cfg.optimizer;
    let mut last = LossBreakdown::new(0.0, 0.0, 0.0, cfg.loss.lambda_t);

    for step in 0..o.total_steps {
        let idx = batches.next().to_vec();
        let batch = BatchInput {
            videos: idx.iter().map(|&i| records[i].video_features.as_slice()).collect(),
            texts: idx.iter().map(|&i| texts[i].clone()).collect(),
            toi: idx.iter().map(|&i| toi[i].clone()).collect(),
        };
        let mut g = Graph::new();
        let selector = Selector::Mode {
            mode: cfg.cascade_mode,
            rng: &mut select_rng,
            weighted: cfg.cascade_weighted,
        };
        let f = forward(&mut g, &model, &batch, &cfg.loss, selector, cfg.dedup_fused_pairs)?;
        let b = f.breakdown;
        if ![b.l1, b.l2, b.l3, b.total].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: l1={} l2={} l3={} total={}",
                b.l1, b.l2, b.l3, b.total
            )));
        }
        let grads = g.backward(f.total)?;
        let store = model.params_mut();
        g.accumulate_param_grads(&grads, store);
        if let Some((_, name, _)) = store
            .iter()
            .find(|(_, _, t)| t.grad().is_some_and(|gr| gr.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::Numeric(format!("non-finite gradient for {name} at step {step}")));
        }
        opt.step(
            store,
            learning_rate(o.learning_rate, step, o.warmup_steps, o.total_steps),
        );
        store.zero_grads();
        writeln!(
            log,
            "{}",
            json!({"step": step, "l1": b.l1, "l2": b.l2, "l3": b.l3, "total": b.total})
        )?;
        last = b;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, &vocab, Some(&idf)),
        last,
        steps: o.total_steps,
    })
}

/// R@1/5/10 and median rank of one score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "MR")]
    pub mr: f64,
}

impl From<&RetrievalMetrics> for StageReport {
    fn from(m: &RetrievalMetrics) -> Self {
        Self {
            r1: m.recall(1),
            r5: m.recall(5),
            r10: m.recall(10),
            mr: m.median_rank,
        }
    }
}

/// Text-to-video retrieval report for one weight setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "MR")]
    pub mr: f64,
    /// Each available stage scored on its own.
    pub per_stage: BTreeMap<String, StageReport>,
    pub weights: InferenceWeights,
    pub stage_mask: String,
    /// Rank of the correct video for each text query.
    pub ranks: Vec<usize>,
}

/// Reports plus the combined score matrix of the first one.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reports: Vec<EvalReport>,
    pub scores: crate::numerics::Tensor,
}

/// Scores every text of `records` against every video (pair `i` is correct
/// for query `i`) and reports retrieval metrics for each token weight.
pub fn evaluate(retriever: &Retriever, records: &[CorpusRecord], cfg: &EvalConfig) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    let enc = retriever.model.config();
    if let Some(r) = records.iter().find(|r| r.feature_width() != enc.d_video_in) {
        return Err(Error::Checkpoint(format!(
            "record {} has feature width {}, checkpoint expects {}",
            r.id,
            r.feature_width(),
            enc.d_video_in
        )));
    }
    let has_fusion = retriever.model.has_fusion();
    if cfg.stage_mask.fusion && !has_fusion {
        return Err(Error::Checkpoint(
            "fusion stage requested but the model has no fusion parameters".into(),
        ));
    }
    let available = StageMask {
        fusion: has_fusion,
        ..StageMask::ALL
    };
    let stages = retriever.stage_scores(records, records, available)?;
    let truth: Vec<usize> = (0..records.len()).collect();
    let ns = [1, 5, 10];
    let mut per_stage = BTreeMap::new();
    let unit = InferenceWeights::default();
    for (name, mask) in [
        ("sentence", StageMask::SENTENCE),
        ("token", StageMask::TOKEN),
        ("fusion", StageMask::FUSION),
    ] {
        if mask.fusion && !has_fusion {
            continue;
        }
        let m = rank_metrics(&stages.combine(&unit, mask)?, &truth, &ns)?;
        per_stage.insert(name.to_string(), StageReport::from(&m));
    }
    let weights: Vec<InferenceWeights> = if cfg.token_weight_sweep.is_empty() {
        vec![cfg.weights]
    } else {
        cfg.token_weight_sweep
            .iter()
            .map(|w| cfg.weights.with_token(*w))
            .collect()
    };
    let mut reports = Vec::with_capacity(weights.len());
    let mut first = None;
    for w in weights {
        let s = stages.combine(&w, cfg.stage_mask)?;
        let m = rank_metrics(&s, &truth, &ns)?;
        let st = StageReport::from(&m);
        reports.push(EvalReport {
            r1: st.r1,
            r5: st.r5,
            r10: st.r10,
            mr: st.mr,
            per_stage: per_stage.clone(),
            weights: w,
            stage_mask: cfg.stage_mask.name(),
            ranks: m.ranks,
        });
        first.get_or_insert(s);
    }
    Ok(Evaluation {
        reports,
        scores: first.expect("at least one weight setting"),
    })
}

/// Inputs, outputs and settings of one CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each file written.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            seed,
            config,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes the manifest to `<primary>.manifest.json` and returns that path.
    pub fn write_beside(&self, primary: &Path) -> Result<PathBuf> {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("missing path: {what}")))
}

fn config_value(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Loads the corpus, trains, saves the checkpoint and its manifest. Loss
/// lines go to `paths.log` when set, otherwise to `log`.
pub fn run_train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = required(&cfg.paths.corpus, "corpus")?;
    let ck_path = required(&cfg.paths.checkpoint, "checkpoint")?;
    let records = load_corpus(corpus)?;
    let outcome = match &cfg.paths.log {
        Some(p) => {
            let mut w = BufWriter::new(fs::File::create(p)?);
            let o = train(cfg, &records, &mut w)?;
            w.flush()?;
            o
        }
        None => train(cfg, &records, log)?,
    };
    outcome.checkpoint.save(ck_path)?;
    let mut m = Manifest::new("train", cfg.seed, config_value(cfg)?);
    m.input(corpus)?;
    m.artifact(ck_path)?;
    if let Some(p) = &cfg.paths.log {
        m.artifact(p)?;
    }
    m.write_beside(ck_path)?;
    Ok(outcome)
}

fn check_arch(cfg: &ArchConfig, ck: &Checkpoint) -> Result<()> {
    let have = ArchConfig::from_encoder(&ck.encoder);
    if &have != cfg {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {} does not match the configured {}",
            serde_json::to_string(&have)?,
            serde_json::to_string(cfg)?
        )));
    }
    Ok(())
}

fn write_scores_csv(path: &Path, scores: &crate::numerics::Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in 0..scores.rows() {
        let line: Vec<String> = scores.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint and the evaluation corpus, writes the JSON report
/// (an array when sweeping token weights) and its manifest.
pub fn run_eval(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let ck_path = required(&cfg.paths.checkpoint, "checkpoint")?;
    let corpus = cfg
        .paths
        .eval_corpus
        .as_ref()
        .or(cfg.paths.corpus.as_ref())
        .ok_or_else(|| Error::Config("missing path: eval_corpus".into()))?;
    let report_path = required(&cfg.paths.report, "report")?;
    let ck = Checkpoint::load(ck_path)?;
    check_arch(&cfg.model, &ck)?;
    let retriever = Retriever::from_checkpoint(&ck, cfg.target()?)?;
    let records = load_corpus(corpus)?;
    let ev = evaluate(&retriever, &records, &cfg.eval)?;
    let text = if cfg.eval.token_weight_sweep.is_empty() {
        serde_json::to_string_pretty(&ev.reports[0])?
    } else {
        serde_json::to_string_pretty(&ev.reports)?
    };
    fs::write(report_path, text + "\n")?;
    let mut m = Manifest::new("eval", cfg.seed, config_value(cfg)?);
    m.input(ck_path)?;
    m.input(corpus)?;
    m.artifact(report_path)?;
    if let Some(p) = &cfg.paths.scores_csv {
        write_scores_csv(p, &ev.scores)?;
        m.artifact(p)?;
    }
    m.write_beside(report_path)?;
    Ok(ev.reports)
}

/// Writes `value` as pretty JSON to `out`.
pub fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}
