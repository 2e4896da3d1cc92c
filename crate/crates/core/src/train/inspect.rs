//! Hard-negative selection on one batch, for inspection.

use serde::Serialize;

use crate::cascade::{combined_scores, CascadeMode, CascadeSelection};
use crate::data::CorpusRecord;
use crate::encoders::{Checkpoint, Model, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Packed, Rng};
use crate::toi::{compute_idf_records, sentence_weights, ToiWeights};

use super::config::RunConfig;

/// Scores and negatives of one batch, with negatives named by record id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchInspection {
    pub ids: Vec<String>,
    pub cascade_mode: CascadeMode,
    pub k_prime: usize,
    /// `scores[video][text]`: global similarity plus summed token similarity.
    pub scores: Vec<Vec<f64>>,
    pub selection: CascadeSelection,
    /// Per text anchor, the ids of its negative videos.
    pub text_anchor_negatives: Vec<Vec<String>>,
    /// Per video anchor, the ids of its negative texts.
    pub video_anchor_negatives: Vec<Vec<String>>,
}

/// Encodes records `start..start + batch_size` with the checkpoint (or a
/// freshly initialised model when `None`) and runs the configured selection.
pub fn inspect_batch(
    cfg: &RunConfig,
    records: &[CorpusRecord],
    checkpoint: Option<&Checkpoint>,
    start: usize,
) -> Result<BatchInspection> {
    cfg.validate()?;
    let k = cfg.optimizer.batch_size;
    let batch = records.get(start..start + k).ok_or_else(|| {
        Error::Config(format!(
            "batch {start}..{} is outside the corpus of {} records",
            start + k,
            records.len()
        ))
    })?;
    let root = Rng::new(cfg.seed);
    let (model, vocab, idf) = match checkpoint {
        Some(ck) => {
            let idf = match &ck.idf {
                Some(t) => t.clone(),
                None => compute_idf_records(records)?,
            };
            (ck.to_model()?, ck.vocab.clone(), idf)
        }
        None => {
            let vocab = Vocab::build(records);
            let width = batch[0].feature_width();
            let model = Model::new(cfg.model.encoder(width, vocab.len()), &mut root.fork(1))?;
            (model, vocab, compute_idf_records(records)?)
        }
    };
    let target = cfg.target()?;
    let videos: Vec<&[Vec<f64>]> = batch.iter().map(|r| r.video_features.as_slice()).collect();
    let texts: Vec<Vec<usize>> = batch.iter().map(|r| vocab.encode(&r.tokens)).collect();
    let toi: Vec<ToiWeights> = batch
        .iter()
        .map(|r| sentence_weights(&r.tokens, &idf, &target))
        .collect();
    let toi = if cfg.loss.lambda_t > 0.0 {
        toi
    } else {
        vec![ToiWeights::default(); k]
    };

    let mut g = Graph::new();
    let enc = model.encode_batch(&mut g, &videos, &texts)?;
    let packed = |v, segs: &[(usize, usize)]| Packed {
        tokens: g.value(v).clone(),
        segs: segs.to_vec(),
    };
    let s = combined_scores(
        g.value(enc.video.mean),
        &packed(enc.video.tokens, &enc.video.segs),
        g.value(enc.text.cls),
        &packed(enc.text.tokens, &enc.text.segs),
        &toi,
        cfg.cascade_weighted,
    )?;
    let selection = cfg
        .cascade_mode
        .select(|| Ok(s.clone()), k, cfg.loss.k_prime, &mut root.fork(3))?;
    let ids: Vec<String> = batch.iter().map(|r| r.id.clone()).collect();
    let name = |negs: &Vec<Vec<usize>>| -> Vec<Vec<String>> {
        negs.iter()
            .map(|n| n.iter().map(|&i| ids[i].clone()).collect())
            .collect()
    };
    Ok(BatchInspection {
        text_anchor_negatives: name(&selection.text_anchor_negs),
        video_anchor_negatives: name(&selection.video_anchor_negs),
        ids: ids.clone(),
        cascade_mode: cfg.cascade_mode,
        k_prime: cfg.loss.k_prime,
        scores: s.to_rows(),
        selection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn cascade_negatives_are_top_scored() {
        let records = generate_synthetic(&SyntheticSpec::desk(20, 0.1, 4)).unwrap();
        let mut cfg = RunConfig::desk();
        cfg.optimizer.batch_size = 6;
        cfg.loss.k_prime = 2;
        let r = inspect_batch(&cfg, &records, None, 3).unwrap();
        assert_eq!(r.ids.len(), 6);
        assert_eq!(r.ids[0], records[3].id);
        for (i, negs) in r.selection.text_anchor_negs.iter().enumerate() {
            let worst_taken = negs.iter().map(|&j| r.scores[j][i]).fold(f64::INFINITY, f64::min);
            for j in (0..6).filter(|j| *j != i && !negs.contains(j)) {
                assert!(r.scores[j][i] <= worst_taken);
            }
        }
        assert!(inspect_batch(&cfg, &records, None, 15).is_err());
    }
}
