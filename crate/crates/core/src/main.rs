use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use taco::cascade::CascadeMode;
use taco::data::{default_vocab, generate_synthetic, load_corpus, write_corpus, SyntheticSpec};
use taco::encoders::Checkpoint;
use taco::eval::{InferenceWeights, StageMask};
use taco::toi::compute_idf_records;
use taco::train::{inspect_batch, print_json, run_eval, run_selfcheck, run_train, Manifest, Mutation, RunConfig};
use taco::{Error, Result};

#[derive(Parser)]
#[command(
    name = "taco",
    version,
    about = "Contrastive video-text retrieval with token-level alignment and cascaded hard negatives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus manifest.
    Train(RunFlags),
    /// Score a corpus with a checkpoint and write a retrieval report.
    Eval(EvalFlags),
    /// Compute document-frequency based word weights of a corpus.
    Idf {
        #[arg(long)]
        corpus: PathBuf,
        /// Output JSON; printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a planted-alignment corpus.
    GenSynthetic(GenFlags),
    /// Show the combined scores and selected negatives of one batch.
    SampleInspect {
        #[command(flatten)]
        run: RunFlags,
        /// Index of the first record of the batch.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Output JSON; printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run gradient checks and the loss, sampler, metric and idf oracles.
    Selfcheck {
        /// Random fixtures for the gradient checks.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Output JSON report; printed when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Flags overriding fields of the run configuration.
#[derive(Args, Clone)]
struct RunFlags {
    /// JSON run configuration; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-scale preset instead of the desk preset.
    #[arg(long, conflicts_with = "config")]
    full_scale: bool,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-step JSON loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    k_prime: Option<usize>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    lambda_t: Option<f64>,
    /// cascade, random or full.
    #[arg(long)]
    cascade_mode: Option<CascadeMode>,
    /// Drop the sentence-level loss.
    #[arg(long)]
    no_sentence: bool,
    /// Drop the fusion loss.
    #[arg(long)]
    no_fusion: bool,
    /// Add the video-anchored direction to the sentence loss.
    #[arg(long)]
    symmetric_losses: bool,
    /// Fuse each distinct pair once per step.
    #[arg(long)]
    dedup_fused_pairs: bool,
    /// POS tags of tokens of interest, e.g. NOUN+VERB.
    #[arg(long)]
    target_pos: Option<String>,
    /// Write the resolved configuration here and exit.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalFlags {
    #[command(flatten)]
    run: RunFlags,
    /// Evaluation corpus; falls back to --corpus.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Combined score matrix (text rows, video columns) as CSV.
    #[arg(long)]
    scores_csv: Option<PathBuf>,
    /// Stage weights `sentence,token,fusion`.
    #[arg(long)]
    weights: Option<String>,
    /// `all` or stages joined by `+`, e.g. `sentence+fusion`.
    #[arg(long)]
    stage_mask: Option<String>,
    /// Token weights to sweep, comma separated.
    #[arg(long)]
    sweep: Option<String>,
}

#[derive(Args)]
struct GenFlags {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator spec; desk defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    num_pairs: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    d_video_in: Option<usize>,
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("{what}: cannot parse {v:?}: {e}")))
        })
        .collect()
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, self.full_scale) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, true) => RunConfig::full_scale(),
            (None, false) => RunConfig::desk(),
        };
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut c.paths.corpus, &self.corpus);
        set(&mut c.paths.checkpoint, &self.checkpoint);
        set(&mut c.paths.log, &self.log);
        if let Some(v) = self.seed {
            c.seed = v;
        }
        let o = &mut c.optimizer;
        o.total_steps = self.total_steps.unwrap_or(o.total_steps);
        o.warmup_steps = self.warmup_steps.unwrap_or(o.warmup_steps);
        o.batch_size = self.batch_size.unwrap_or(o.batch_size);
        o.learning_rate = self.learning_rate.unwrap_or(o.learning_rate);
        o.weight_decay = self.weight_decay.unwrap_or(o.weight_decay);
        let l = &mut c.loss;
        l.k_prime = self.k_prime.unwrap_or(l.k_prime);
        l.tau1 = self.tau1.unwrap_or(l.tau1);
        l.tau2 = self.tau2.unwrap_or(l.tau2);
        l.lambda_t = self.lambda_t.unwrap_or(l.lambda_t);
        l.sentence &= !self.no_sentence;
        l.fusion &= !self.no_fusion;
        l.symmetric |= self.symmetric_losses;
        if let Some(m) = self.cascade_mode {
            c.cascade_mode = m;
        }
        c.dedup_fused_pairs |= self.dedup_fused_pairs;
        if let Some(t) = &self.target_pos {
            c.target_pos.clone_from(t);
        }
        c.validate()?;
        Ok(c)
    }

    /// Writes the resolved configuration if requested; true when done.
    fn dump(&self, c: &RunConfig) -> Result<bool> {
        match &self.dump_config {
            Some(p) => {
                fs::write(p, c.to_json()? + "\n")?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

impl EvalFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = self.run.resolve()?;
        if self.eval_corpus.is_some() {
            c.paths.eval_corpus.clone_from(&self.eval_corpus);
        }
        if self.report.is_some() {
            c.paths.report.clone_from(&self.report);
        }
        if self.scores_csv.is_some() {
            c.paths.scores_csv.clone_from(&self.scores_csv);
        }
        if let Some(w) = &self.weights {
            let v = parse_list(w, "--weights")?;
            if v.len() != 3 {
                return Err(Error::Config(format!("--weights needs 3 values, got {}", v.len())));
            }
            c.eval.weights = InferenceWeights::new(v[0], v[1], v[2]);
        }
        if let Some(m) = &self.stage_mask {
            c.eval.stage_mask = StageMask::parse(m)?;
        }
        if let Some(s) = &self.sweep {
            c.eval.token_weight_sweep = parse_list(s, "--sweep")?;
        }
        c.validate()?;
        Ok(c)
    }
}

impl GenFlags {
    fn resolve(&self) -> Result<SyntheticSpec> {
        let mut s = match &self.spec {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid synthetic spec: {e}")))?
            }
            None => SyntheticSpec::desk(600, 0.1, 0),
        };
        s.num_pairs = self.num_pairs.unwrap_or(s.num_pairs);
        s.noise_sigma = self.noise_sigma.unwrap_or(s.noise_sigma);
        s.seed = self.seed.unwrap_or(s.seed);
        s.d_video_in = self.d_video_in.unwrap_or(s.d_video_in);
        if let Some(n) = self.concepts {
            s.concepts = n;
            s.vocab = default_vocab(n);
        }
        s.validate()?;
        Ok(s)
    }
}

/// Writes `value` to `out` (with a manifest) or prints it.
fn emit<T: serde::Serialize>(value: &T, out: Option<&Path>, mut manifest: Manifest) -> Result<()> {
    match out {
        Some(p) => {
            fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
            manifest.artifact(p)?;
            manifest.write_beside(p)?;
            Ok(())
        }
        None => print_json(&mut io::stdout().lock(), value),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(flags) => {
            let cfg = flags.resolve()?;
            if flags.dump(&cfg)? {
                return Ok(true);
            }
            let out = run_train(&cfg, &mut io::stdout().lock())?;
            let summary = json!({"steps": out.steps, "final": out.last});
            eprintln!("{summary}");
        }
        Command::Eval(flags) => {
            let cfg = flags.resolve()?;
            if flags.run.dump(&cfg)? {
                return Ok(true);
            }
            let reports = run_eval(&cfg)?;
            for r in &reports {
                eprintln!(
                    "w_token={} R1={:.4} R5={:.4} R10={:.4} MR={}",
                    r.weights.w_token, r.r1, r.r5, r.r10, r.mr
                );
            }
        }
        Command::Idf { corpus, out } => {
            let records = load_corpus(&corpus)?;
            let table = compute_idf_records(&records)?;
            let value = json!({"corpus_size": table.corpus_size(), "idf": table.idf_map()});
            let mut m = Manifest::new("idf", 0, json!({"corpus": corpus}));
            m.input(&corpus)?;
            emit(&value, out.as_deref(), m)?;
        }
        Command::GenSynthetic(flags) => {
            let spec = flags.resolve()?;
            let records = generate_synthetic(&spec)?;
            write_corpus(&flags.out, &records)?;
            let mut m = Manifest::new("gen-synthetic", spec.seed, serde_json::to_value(&spec)?);
            m.artifact(&flags.out)?;
            m.write_beside(&flags.out)?;
        }
        Command::SampleInspect { run, start, out } => {
            let cfg = run.resolve()?;
            let corpus = cfg
                .paths
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Config("missing path: corpus".into()))?;
            let records = load_corpus(corpus)?;
            let ck = cfg.paths.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
            let report = inspect_batch(&cfg, &records, ck.as_ref(), start)?;
            let mut m = Manifest::new("sample-inspect", cfg.seed, serde_json::to_value(&cfg)?);
            m.input(corpus)?;
            if let Some(p) = &cfg.paths.checkpoint {
                m.input(p)?;
            }
            emit(&report, out.as_deref(), m)?;
        }
        Command::Selfcheck { seeds, report } => {
            let r = run_selfcheck(seeds, Mutation::None)?;
            for s in &r.suites {
                eprintln!(
                    "{} {} max_error={:e} threshold={:e}",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.max_error,
                    s.threshold
                );
            }
            let m = Manifest::new("selfcheck", 0, json!({"seeds": seeds}));
            emit(&r, report.as_deref(), m)?;
            if !r.passed() {
                eprintln!("failing: {}", r.failures().join(", "));
                return Ok(false);
            }
        }
    }
    io::stdout().flush()?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
