//! Built-in verification: gradient checks through the full model, loss and
//! sampler oracles, the retrieval-metric oracle and the IDF reference values.

use std::cell::RefCell;

use serde::Serialize;

use crate::cascade::{cascade_select, CascadeMode, CascadeSelection, CombinedScoreMatrix};
use crate::encoders::{EncoderConfig, Model, CLS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::eval::rank_metrics;
use crate::losses::{sentence_loss, token_loss, LossConfig};
use crate::numerics::{grad_check_outputs, GradCheckReport, Graph, ParamId, Rng, Tensor, Var};
use crate::toi::{compute_idf, toy_corpus, ToiWeights};

use super::objective::{forward, forward_flipped_sentence_grad, BatchInput, Selector};

pub const GRAD_THRESHOLD: f64 = 1e-4;
pub const ORACLE_THRESHOLD: f64 = 1e-10;
pub const GRAD_EPS: f64 = 1e-5;

/// Deliberate defects used to confirm that a suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Reverse the sign of the sentence-loss gradient.
    FlipSentenceGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub max_error: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, max_error: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            max_error,
            threshold,
            passed: max_error.is_finite() && max_error <= threshold,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub suites: Vec<SuiteResult>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.name.as_str())
            .collect()
    }
}

/// A small random model and batch for gradient checks.
#[derive(Debug, Clone)]
pub struct GradFixture {
    pub model: Model,
    pub videos: Vec<Vec<Vec<f64>>>,
    pub texts: Vec<Vec<usize>>,
    pub toi: Vec<ToiWeights>,
    pub loss: LossConfig,
    pub selection: CascadeSelection,
}

const FIXTURE_INPUT_WIDTH: usize = 6;
const FIXTURE_VOCAB: usize = 12;

impl GradFixture {
    /// `k` pairs of `m` frames and `n` text rows (including `[CLS]`/`[SEP]`)
    /// at width `d`, with a cascade selection of `k−2` negatives (at least 1)
    /// computed at the initial parameters.
    pub fn new(seed: u64, k: usize, d: usize, m: usize, n: usize) -> Result<Self> {
        if n < 3 || k < 2 {
            return Err(Error::Config("fixture needs n >= 3 and k >= 2".into()));
        }
        let mut rng = Rng::new(seed);
        let cfg = EncoderConfig {
            d,
            heads: 2,
            ffn_dim: 2 * d,
            video_layers: 1,
            text_layers: 1,
            fusion_layers: 2,
            d_video_in: FIXTURE_INPUT_WIDTH,
            vocab_size: FIXTURE_VOCAB,
            max_video_tokens: m,
            max_text_tokens: n,
            fusion_order: crate::encoders::FusionOrder::TextFirst,
        };
        let model = Model::new(cfg, &mut rng)?;
        let videos: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| {
                (0..m)
                    .map(|_| (0..FIXTURE_INPUT_WIDTH).map(|_| rng.normal()).collect())
                    .collect()
            })
            .collect();
        let texts: Vec<Vec<usize>> = (0..k)
            .map(|_| {
                let mut t = vec![CLS_ID];
                t.extend((0..n - 2).map(|_| 3 + rng.below(FIXTURE_VOCAB - 3)));
                t.push(SEP_ID);
                t
            })
            .collect();
        let toi = (0..k)
            .map(|_| {
                let positions: Vec<usize> = (0..n - 2).filter(|_| rng.below(3) > 0).collect();
                let raw: Vec<f64> = positions.iter().map(|_| rng.uniform(0.2, 1.0)).collect();
                let s: f64 = raw.iter().sum();
                ToiWeights {
                    positions,
                    weights: raw.iter().map(|w| w / s).collect(),
                }
            })
            .collect();
        let loss = LossConfig {
            k_prime: k.saturating_sub(2).max(1),
            ..LossConfig::default()
        };
        let mut fx = Self {
            model,
            videos,
            texts,
            toi,
            loss,
            selection: CascadeSelection {
                text_anchor_negs: Vec::new(),
                video_anchor_negs: Vec::new(),
            },
        };
        let mut g = Graph::new();
        let sel_rng = &mut rng;
        let f = forward(
            &mut g,
            &fx.model,
            &fx.batch(),
            &fx.loss,
            Selector::Mode {
                mode: CascadeMode::Cascade,
                rng: sel_rng,
                weighted: false,
            },
            false,
        )?;
        fx.selection = f.selection.expect("fusion loss enabled");
        Ok(fx)
    }

    pub fn batch(&self) -> BatchInput<'_> {
        BatchInput {
            videos: self.videos.iter().map(Vec::as_slice).collect(),
            texts: self.texts.clone(),
            toi: self.toi.clone(),
        }
    }

    /// Parameters whose exact gradient is zero for output `o` of
    /// `[l1, l2, l3, total]`, by an invariance of the loss:
    /// attention key biases shift every logit of a query alike, the head
    /// bias shifts every fusion score alike, the last video block's output
    /// bias shifts every video embedding alike (cancelling in the
    /// text-anchored sentence and token losses), and the last fusion block's
    /// output bias shifts every fusion score alike. Finite differences of
    /// these measure only roundoff, so they are checked to be zero instead.
    pub fn structural_zeros(&self, o: usize) -> Vec<ParamId> {
        let p = self.model.params();
        let c = self.model.config();
        let last_video = c.video_layers.checked_sub(1).map(|l| format!("video.layer{l}.ffn.2.b"));
        let last_fusion = c
            .fusion_layers
            .checked_sub(1)
            .map(|l| format!("fusion.layer{l}.ffn.2.b"));
        let extra = match o {
            0 | 1 => last_video,
            _ => last_fusion,
        };
        p.ids()
            .filter(|id| {
                let name = p.name(*id);
                name == "head.b" || name.ends_with(".attn.k.b") || extra.as_deref() == Some(name)
            })
            .collect()
    }

    fn objective(
        &self,
        mutation: Mutation,
    ) -> impl Fn(&mut Graph, &crate::numerics::ParamStore) -> Result<Vec<Var>> + '_ {
        // One model whose values are overwritten per evaluation.
        let cell = RefCell::new(self.model.clone());
        move |g, store| {
            let mut model = cell.borrow_mut();
            let own = model.params_mut();
            for id in store.ids() {
                own.get_mut(id).data_mut().copy_from_slice(store.get(id).data());
            }
            let sel = Selector::Fixed(self.selection.clone());
            let batch = self.batch();
            let out = match mutation {
                Mutation::None => forward(g, &model, &batch, &self.loss, sel, false)?,
                Mutation::FlipSentenceGrad => forward_flipped_sentence_grad(g, &model, &batch, &self.loss, sel)?,
            };
            let missing = || Error::Internal("loss part disabled".into());
            Ok(vec![
                out.l1.ok_or_else(missing)?,
                out.l2.ok_or_else(missing)?,
                out.l3.ok_or_else(missing)?,
                out.total,
            ])
        }
    }

    /// Gradient checks of `[l1, l2, l3, total]` with the selection held
    /// fixed, over every parameter not in [`Self::structural_zeros`].
    pub fn grad_check(&self, mutation: Mutation) -> Result<[GradCheckReport; 4]> {
        let all: Vec<ParamId> = self.model.params().ids().collect();
        let params: Vec<Vec<ParamId>> = (0..4)
            .map(|o| {
                let zeros = self.structural_zeros(o);
                all.iter().copied().filter(|id| !zeros.contains(id)).collect()
            })
            .collect();
        let reps = grad_check_outputs(self.objective(mutation), self.model.params(), &params, GRAD_EPS)?;
        reps.try_into()
            .map_err(|_| Error::Internal("expected four gradient reports".into()))
    }

    /// Largest analytic gradient magnitude over the structural zeros.
    pub fn structural_zero_max(&self, mutation: Mutation) -> Result<(f64, String)> {
        let store = self.model.params();
        let mut g = Graph::new();
        let outs = self.objective(mutation)(&mut g, store)?;
        let mut worst = (0.0, String::new());
        for (o, out) in outs.iter().enumerate() {
            let grads = g.backward(*out)?;
            let zeros = self.structural_zeros(o);
            for (id, v) in g.param_vars() {
                if !zeros.contains(&id) {
                    continue;
                }
                let m = grads
                    .wrt(v)
                    .map_or(0.0, |d| d.iter().fold(0.0, |a: f64, x| a.max(x.abs())));
                if m >= worst.0 {
                    worst = (m, format!("output {o}, {}", store.name(id)));
                }
            }
        }
        Ok(worst)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nce_term(pos: f64, all: &[f64]) -> f64 {
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + all.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - pos
}

/// Loop evaluation of the sentence loss, text-anchored.
pub fn sentence_loss_oracle(x_bar: &Tensor, y_bar: &Tensor, tau1: f64) -> f64 {
    let k = x_bar.rows();
    (0..k)
        .map(|i| {
            let all: Vec<f64> = (0..k).map(|j| dot(x_bar.row(j), y_bar.row(i)) / tau1).collect();
            nce_term(all[i], &all)
        })
        .sum()
}

/// Loop evaluation of the token loss; text row `p + 1` holds TOI position `p`.
pub fn token_loss_oracle(videos: &[Tensor], texts: &[Tensor], toi: &[ToiWeights], tau2: f64) -> f64 {
    let mut total = 0.0;
    for (i, t) in toi.iter().enumerate() {
        for (&p, &w) in t.positions.iter().zip(&t.weights) {
            let y = texts[i].row(p + 1);
            let all: Vec<f64> = videos
                .iter()
                .map(|v| {
                    let mut best = f64::NEG_INFINITY;
                    for r in 0..v.rows() {
                        best = best.max(dot(v.row(r), y));
                    }
                    best / tau2
                })
                .collect();
            total += w * nce_term(all[i], &all);
        }
    }
    total
}

/// Sort-and-take selection for one matrix.
pub fn cascade_oracle(s: &[Vec<f64>], k_prime: usize) -> CascadeSelection {
    let k = s.len();
    let take = |anchor: usize, score: &dyn Fn(usize) -> f64| {
        let mut c: Vec<(f64, usize)> = (0..k).filter(|&x| x != anchor).map(|x| (score(x), x)).collect();
        c.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        c.into_iter().take(k_prime).map(|(_, x)| x).collect::<Vec<_>>()
    };
    CascadeSelection {
        text_anchor_negs: (0..k).map(|i| take(i, &|j| s[j][i])).collect(),
        video_anchor_negs: (0..k).map(|j| take(j, &|i| s[j][i])).collect(),
    }
}

/// Ranks by sorting candidates (ties placed before the correct one).
pub fn rank_oracle(scores: &[Vec<f64>], truth: &[usize]) -> Vec<usize> {
    scores
        .iter()
        .zip(truth)
        .map(|(row, &t)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then((a == t).cmp(&(b == t))));
            1 + order.iter().position(|&c| c == t).unwrap()
        })
        .collect()
}

fn random_tensor(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).expect("sized")
}

fn grad_suites(seeds: u64, mutation: Mutation) -> Result<Vec<SuiteResult>> {
    let names = ["grad.l1", "grad.l2", "grad.l3", "grad.total"];
    let mut worst = [0.0f64; 4];
    let mut where_ = [String::new(), String::new(), String::new(), String::new()];
    let mut zero_worst = (0.0, String::new());
    for seed in 0..seeds {
        let fx = GradFixture::new(seed, 4, 8, 3, 5)?;
        let (z, at) = fx.structural_zero_max(mutation)?;
        if z >= zero_worst.0 {
            zero_worst = (z, format!("seed {seed}, {at}"));
        }
        for (i, r) in fx.grad_check(mutation)?.iter().enumerate() {
            if r.max_rel_error >= worst[i] {
                worst[i] = r.max_rel_error;
                where_[i] = format!(
                    "seed {seed}, {:?}, analytic {:e}, numeric {:e}",
                    r.worst, r.worst_analytic, r.worst_numeric
                );
            }
        }
    }
    let mut out: Vec<SuiteResult> = names
        .iter()
        .zip(worst)
        .zip(where_)
        .map(|((n, w), d)| SuiteResult::new(n, w, GRAD_THRESHOLD, d))
        .collect();
    out.push(SuiteResult::new(
        "grad.structural_zeros",
        zero_worst.0,
        ORACLE_THRESHOLD,
        zero_worst.1,
    ));
    Ok(out)
}

fn loss_oracle_suite(instances: usize) -> Result<SuiteResult> {
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let k = 2 + t % 4;
        let d = 3 + t % 5;
        let (x, y) = (random_tensor(&mut rng, k, d), random_tensor(&mut rng, k, d));
        let tau = rng.uniform(0.3, 2.0);
        worst = worst.max((sentence_loss(&x, &y, tau)? - sentence_loss_oracle(&x, &y, tau)).abs());
        let videos: Vec<Tensor> = (0..k)
            .map(|_| {
                let m = 1 + rng.below(4);
                random_tensor(&mut rng, m, d)
            })
            .collect();
        let texts: Vec<Tensor> = (0..k)
            .map(|_| {
                let n = 3 + rng.below(3);
                random_tensor(&mut rng, n, d)
            })
            .collect();
        let toi: Vec<ToiWeights> = texts
            .iter()
            .map(|t| {
                let positions: Vec<usize> = (0..t.rows() - 2).filter(|_| rng.below(2) == 0).collect();
                let n = positions.len();
                ToiWeights {
                    positions,
                    weights: vec![1.0 / n.max(1) as f64; n],
                }
            })
            .collect();
        worst =
            worst.max((token_loss(&videos, &texts, &toi, tau)? - token_loss_oracle(&videos, &texts, &toi, tau)).abs());
    }
    // Closed forms: equal dots give K ln K; the 2×2 hand case.
    let eq = Tensor::matrix(3, 2, vec![1.0; 6])?;
    worst = worst.max((sentence_loss(&eq, &eq, 1.0)? - 3.0 * 3f64.ln()).abs());
    let r = 2f64.sqrt();
    let diag = Tensor::from_rows(&[vec![r, 0.0], vec![0.0, r]])?;
    worst = worst.max((sentence_loss(&diag, &diag, 1.0)? - 2.0 * (1.0 + (-2f64).exp()).ln()).abs());
    Ok(SuiteResult::new(
        "oracle.losses",
        worst,
        ORACLE_THRESHOLD,
        format!("{instances} random batches"),
    ))
}

fn sampler_suite(instances: usize) -> Result<SuiteResult> {
    let mut rng = Rng::new(202);
    let mut mismatches = 0;
    for t in 0..instances {
        let k = 2 + t % 7;
        let k_prime = 1 + rng.below(k - 1);
        // Coarse values so ties occur.
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.below(5) as f64).collect()).collect();
        let s = CombinedScoreMatrix::new(Tensor::from_rows(&rows)?)?;
        if cascade_select(&s, k_prime)? != cascade_oracle(&rows, k_prime) {
            mismatches += 1;
        }
    }
    Ok(SuiteResult::new(
        "oracle.cascade",
        mismatches as f64,
        0.0,
        format!("{mismatches} of {instances} selections differ"),
    ))
}

fn metric_suite(instances: usize) -> Result<SuiteResult> {
    let mut rng = Rng::new(303);
    let mut mismatches = 0;
    for t in 0..instances {
        let q = 1 + t % 6;
        let c = 2 + t % 9;
        let rows: Vec<Vec<f64>> = (0..q)
            .map(|_| {
                (0..c)
                    .map(|_| rng.below(4) as f64 + if t % 2 == 0 { rng.normal() } else { 0.0 })
                    .collect()
            })
            .collect();
        let truth: Vec<usize> = (0..q).map(|_| rng.below(c)).collect();
        let m = rank_metrics(&Tensor::from_rows(&rows)?, &truth, &[1])?;
        if m.ranks != rank_oracle(&rows, &truth) {
            mismatches += 1;
        }
    }
    Ok(SuiteResult::new(
        "oracle.metrics",
        mismatches as f64,
        0.0,
        format!("{mismatches} of {instances} rank lists differ"),
    ))
}

fn idf_suite() -> Result<SuiteResult> {
    let c = toy_corpus();
    let t = compute_idf(c.iter().map(Vec::as_slice))?;
    let e1 = (t.idf("stir") - 2f64.ln()).abs();
    let e2 = (t.idf("the") - (4.0f64 / 5.0).ln()).abs();
    Ok(SuiteResult::new(
        "idf.toy_corpus",
        e1.max(e2),
        1e-12,
        "stir, the".into(),
    ))
}

/// Runs every suite. `grad_seeds` random fixtures are gradient-checked.
pub fn run_selfcheck(grad_seeds: u64, mutation: Mutation) -> Result<SelfCheckReport> {
    let mut suites = grad_suites(grad_seeds, mutation)?;
    suites.push(loss_oracle_suite(200)?);
    suites.push(sampler_suite(200)?);
    suites.push(metric_suite(500)?);
    suites.push(idf_suite()?);
    Ok(SelfCheckReport { suites })
}
