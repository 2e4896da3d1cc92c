use super::*;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        d: 8,
        heads: 2,
        ffn_dim: 16,
        video_layers: 2,
        text_layers: 1,
        fusion_layers: 2,
        d_video_in: 5,
        vocab_size: 10,
        max_video_tokens: 6,
        max_text_tokens: 7,
        fusion_order: FusionOrder::TextFirst,
    }
}

fn model(seed: u64) -> Model {
    Model::new(small_config(), &mut Rng::new(seed)).unwrap()
}

fn frames(m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..m).map(|_| (0..5).map(|_| rng.normal()).collect()).collect()
}

fn zero_params(model: &mut Model, prefix: &[&str]) {
    let ids: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, n, _)| prefix.iter().any(|p| n.starts_with(p)))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        model
            .params_mut()
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

#[test]
fn single_frame_mean_is_the_token() {
    let m = model(1);
    let (tokens, mean) = m.encode_video(&frames(1, 2)).unwrap();
    assert_eq!(tokens.shape(), &[1, 8]);
    assert_eq!(tokens.data(), mean.data());
}

#[test]
fn zero_projection_makes_mean_input_independent() {
    let mut m = model(1);
    zero_params(&mut m, &["video.proj"]);
    let (_, a) = m.encode_video(&frames(3, 2)).unwrap();
    let (_, b) = m.encode_video(&frames(3, 99)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn video_output_shape_and_finite() {
    let m = model(4);
    let (tokens, mean) = m.encode_video(&frames(4, 5)).unwrap();
    assert_eq!(tokens.shape(), &[4, 8]);
    assert_eq!(mean.shape(), &[8]);
    assert!(tokens.all_finite() && mean.all_finite());
}

#[test]
fn video_errors() {
    let m = model(1);
    assert!(matches!(m.encode_video(&[]), Err(Error::EmptySequence(_))));
    assert!(matches!(m.encode_video(&[vec![1.0; 4]]), Err(Error::Dimension(_))));
}

#[test]
fn pooled_mean_matches_independent_mean() {
    let m = model(3);
    let mut g = Graph::new();
    let vids = [frames(2, 1), frames(5, 2), frames(3, 3)];
    let refs: Vec<&[Vec<f64>]> = vids.iter().map(Vec::as_slice).collect();
    let enc = m.encode_videos(&mut g, &refs).unwrap();
    let means = g.value(enc.mean);
    let tokens = g.value(enc.tokens);
    for (i, &(start, len)) in enc.segs.iter().enumerate() {
        for c in 0..8 {
            let mean: f64 = (start..start + len).map(|r| tokens.get(r, c)).sum::<f64>() / len as f64;
            assert!((mean - means.get(i, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn minimal_sentence_encodes() {
    let m = model(1);
    let (tokens, cls) = m.encode_text(&[CLS_ID, SEP_ID]).unwrap();
    assert_eq!(tokens.shape(), &[2, 8]);
    assert_eq!(tokens.row(0), cls.data());
}

#[test]
fn text_is_deterministic_and_position_aware() {
    let m = model(1);
    let a = m.encode_text(&[CLS_ID, 4, 5, 6, SEP_ID]).unwrap();
    let b = m.encode_text(&[CLS_ID, 4, 5, 6, SEP_ID]).unwrap();
    assert_eq!(a, b);
    let c = m.encode_text(&[CLS_ID, 6, 5, 4, SEP_ID]).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn unknown_token_id_is_a_vocabulary_error() {
    let m = model(1);
    assert!(matches!(
        m.encode_text(&[CLS_ID, 10, SEP_ID]),
        Err(Error::Vocabulary(_))
    ));
}

#[test]
fn fusion_length_and_cls_row() {
    let m = model(2);
    let (v, _) = m.encode_video(&frames(3, 1)).unwrap();
    let (t, _) = m.encode_text(&[CLS_ID, 4, 5, SEP_ID]).unwrap();
    let out = m.fuse(&v, &t).unwrap();
    assert_eq!(out.z.shape(), &[7, 8]);
    assert_eq!(out.z.row(0), out.z_cls.data());
}

#[test]
fn video_first_order_puts_cls_after_video() {
    let mut cfg = small_config();
    cfg.fusion_order = FusionOrder::VideoFirst;
    let m = Model::new(cfg, &mut Rng::new(2)).unwrap();
    let (v, _) = m.encode_video(&frames(3, 1)).unwrap();
    let (t, _) = m.encode_text(&[CLS_ID, 4, 5, SEP_ID]).unwrap();
    let out = m.fuse(&v, &t).unwrap();
    assert_eq!(out.z.row(3), out.z_cls.data());
}

#[test]
fn swapping_type_embeddings_changes_output() {
    let mut m = model(2);
    let (v, _) = m.encode_video(&frames(3, 1)).unwrap();
    let (t, _) = m.encode_text(&[CLS_ID, 4, 5, SEP_ID]).unwrap();
    let before = m.fuse(&v, &t).unwrap();
    let id = m.params().id("fusion.type_emb").unwrap();
    let data = m.params_mut().get_mut(id).data_mut();
    let (a, b) = data.split_at_mut(8);
    a.swap_with_slice(b);
    let after = m.fuse(&v, &t).unwrap();
    assert_ne!(before.z, after.z);
}

#[test]
fn residual_pass_through_with_zeroed_fusion_branches() {
    let mut m = model(2);
    let out_layers: Vec<String> = (0..2)
        .flat_map(|l| [format!("fusion.layer{l}.attn.o"), format!("fusion.layer{l}.ffn.2")])
        .collect();
    let refs: Vec<&str> = out_layers.iter().map(String::as_str).collect();
    zero_params(&mut m, &refs);
    let (v, _) = m.encode_video(&frames(3, 1)).unwrap();
    let (t, _) = m.encode_text(&[CLS_ID, 4, 5, SEP_ID]).unwrap();
    let out = m.fuse(&v, &t).unwrap();
    let p = m.params();
    let te = p.get(p.id("fusion.type_emb").unwrap());
    let pe = p.get(p.id("fusion.pos_emb").unwrap());
    for c in 0..8 {
        let want = t.get(0, c) + te.get(1, c) + pe.get(0, c);
        assert!((out.z_cls.data()[c] - want).abs() < 1e-14);
    }
}

#[test]
fn fusion_width_mismatch_is_a_dimension_error() {
    let m = model(2);
    let v = Tensor::matrix(2, 7, vec![0.0; 14]).unwrap();
    let (t, _) = m.encode_text(&[CLS_ID, 4, SEP_ID]).unwrap();
    assert!(matches!(m.fuse(&v, &t), Err(Error::Dimension(_))));
}

#[test]
fn cls_only_fusion_matches_full_fusion() {
    let m = model(5);
    let mut g = Graph::new();
    let vids = [frames(2, 1), frames(4, 2), frames(3, 3)];
    let refs: Vec<&[Vec<f64>]> = vids.iter().map(Vec::as_slice).collect();
    let texts = vec![
        vec![CLS_ID, 3, SEP_ID],
        vec![CLS_ID, 4, 5, 6, SEP_ID],
        vec![CLS_ID, 7, 8, SEP_ID],
    ];
    let b = m.encode_batch(&mut g, &refs, &texts).unwrap();
    let pairs = [(0, 0), (1, 0), (2, 1), (0, 2), (2, 2)];
    let full = m
        .fuse_pairs(
            &mut g,
            (b.video.tokens, &b.video.segs),
            (b.text.tokens, &b.text.segs),
            &pairs,
            false,
        )
        .unwrap();
    let fast = m
        .fuse_pairs(
            &mut g,
            (b.video.tokens, &b.video.segs),
            (b.text.tokens, &b.text.segs),
            &pairs,
            true,
        )
        .unwrap();
    assert!(fast.z.is_none());
    let (x, y) = (g.value(full.cls), g.value(fast.cls));
    assert_eq!(x.shape(), y.shape());
    for (p, q) in x.data().iter().zip(y.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn batched_fusion_matches_single_pair_fusion() {
    let m = model(6);
    let mut g = Graph::new();
    let vids = [frames(2, 1), frames(4, 2)];
    let refs: Vec<&[Vec<f64>]> = vids.iter().map(Vec::as_slice).collect();
    let texts = vec![vec![CLS_ID, 3, SEP_ID], vec![CLS_ID, 4, 5, 6, SEP_ID]];
    let b = m.encode_batch(&mut g, &refs, &texts).unwrap();
    let out = m
        .fuse_pairs(
            &mut g,
            (b.video.tokens, &b.video.segs),
            (b.text.tokens, &b.text.segs),
            &[(1, 0)],
            false,
        )
        .unwrap();
    let single = m.fuse(&b.video_tokens_of(&g, 1), &b.text_tokens_of(&g, 0)).unwrap();
    assert_eq!(g.value(out.z.unwrap()).data(), single.z.data());
}

#[test]
fn same_seed_same_parameters() {
    assert_eq!(model(11).params(), model(11).params());
    assert_ne!(model(11).params(), model(12).params());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = model(8);
    let vocab = Vocab::from((0..10).map(|i| format!("t{i}")).collect::<Vec<_>>());
    let ck = Checkpoint::from_model(&m, &vocab, None);
    let text = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back, ck);
    let m2 = back.to_model().unwrap();
    assert_eq!(m2.params(), m.params());
    assert_eq!(back.to_json().unwrap(), text);
}

#[test]
fn checkpoint_version_mismatch_fails() {
    let m = model(8);
    let vocab = Vocab::from((0..10).map(|i| format!("t{i}")).collect::<Vec<_>>());
    let mut ck = Checkpoint::from_model(&m, &vocab, None);
    ck.version = 99;
    let text = serde_json::to_string(&ck).unwrap();
    assert!(matches!(Checkpoint::from_json(&text), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoint_without_fusion_loads_without_fusion() {
    let m = model(8);
    let vocab = Vocab::from((0..10).map(|i| format!("t{i}")).collect::<Vec<_>>());
    let mut ck = Checkpoint::from_model(&m, &vocab, None);
    ck.params
        .retain(|p| !p.name.starts_with("fusion.") && !p.name.starts_with("head."));
    let m2 = ck.to_model().unwrap();
    assert!(!m2.has_fusion());
    assert!(matches!(m2.head_ids(), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoint_shape_mismatch_fails() {
    let m = model(8);
    let vocab = Vocab::from((0..10).map(|i| format!("t{i}")).collect::<Vec<_>>());
    let mut ck = Checkpoint::from_model(&m, &vocab, None);
    ck.encoder.d = 4;
    ck.encoder.heads = 2;
    assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
}
