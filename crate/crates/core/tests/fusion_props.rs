use proptest::prelude::*;

use vlfuse::fusion::*;
use vlfuse::numerics::*;
use vlfuse::synth::*;

struct Desk {
    encoders: Vec<MockEncoder>,
    cfg: FusionConfig,
    store: ParamStore,
}

fn desk(seed: u64) -> Desk {
    let specs = desk_encoder_specs();
    let cfg = FusionConfig::for_encoders(&specs, 64);
    let mut store = ParamStore::new();
    init_resampler(&mut store, "meq", &cfg, &mut RngState::new(seed)).unwrap();
    Desk {
        encoders: specs.into_iter().map(|s| MockEncoder::new(s).unwrap()).collect(),
        cfg,
        store,
    }
}

fn bundle(d: &Desk, scene_seed: u64) -> FeatureBundle {
    let scene = Scene::random(&mut RngState::new(scene_seed));
    encode_all(&scene, &d.encoders, &RngState::new(scene_seed + 1)).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const TEXT: [usize; 4] = [1, 3, 4, 5];

#[test]
fn desk_kv_layout_and_row_removal() {
    let d = desk(1);
    let mut b = bundle(&d, 7);
    let kv = project_and_concat(&b, &d.store, &d.cfg, "meq").unwrap();
    assert_eq!(kv.matrix.shape(), &[21, 64]);
    let rows: Vec<_> = kv.segments.iter().map(|s| (s.id.as_str(), s.rows.clone())).collect();
    assert_eq!(rows, vec![("e1", 0..9), ("e2", 9..14), ("e3", 14..21)]);

    b.drop_mask[1] = true;
    let kv2 = project_and_concat(&b, &d.store, &d.cfg, "meq").unwrap();
    assert_eq!(kv2.matrix.shape(), &[16, 64]);
    let ids: Vec<_> = kv2.segments.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["e1", "e3"]);
    // Kept rows are unchanged by the removal.
    for r in 0..9 {
        assert_eq!(kv.matrix.row(r), kv2.matrix.row(r));
    }
    for r in 0..7 {
        assert_eq!(kv.matrix.row(14 + r), kv2.matrix.row(9 + r));
    }
}

#[test]
fn reference_geometry_and_compression() {
    let r = reference_config();
    assert_eq!(r.total_kv_len(), 1223);
    assert_eq!(r.d_proj, 1408);
    assert_eq!(r.num_queries(), 160);
    assert_eq!(r.d_h, 768);
    let expected = (1223.0 * 1408.0) / (160.0 * 768.0);
    assert!((compression_ratio(&r) - expected).abs() < 0.1);
    assert!((compression_ratio(&r) - 14.0).abs() < 0.1);

    // One CLIP-shaped encoder at the reference widths.
    let mut clip = r.single("clip").unwrap();
    clip.d_proj = 1024;
    assert_eq!((clip.total_kv_len(), clip.d_proj), (257, 1024));
    assert_eq!((clip.num_queries(), clip.d_h), (32, 768));
}

#[test]
fn query_count_scales_with_encoders() {
    let r = reference_config();
    for k in 1..=r.k() {
        let mut c = r.clone();
        c.encoder_ids.truncate(k);
        c.feat_dims.truncate(k);
        c.seq_lens.truncate(k);
        assert_eq!(c.num_queries(), 32 * k);
    }
    let d = desk(0);
    assert_eq!(d.cfg.num_queries(), 24);
    assert_eq!(d.cfg.single("e2").unwrap().num_queries(), 8);
}

fn prompt_for(d: &Desk, cfg: &FusionConfig, b: &FeatureBundle, layout: KvLayout) -> Tensor {
    let mut g = Graph::new();
    let kv = project_batch(&mut g, &d.store, cfg, "meq", std::slice::from_ref(b), layout).unwrap();
    let out = resample(&mut g, &d.store, cfg, "meq", &kv, Some(&[TEXT.to_vec()])).unwrap();
    g.value(out.prompt).clone()
}

#[test]
fn prompt_is_q_by_d_lm_for_every_kept_subset() {
    let d = desk(2);
    for mask in 1u32..8 {
        let mut b = bundle(&d, 11);
        for k in 0..3 {
            b.drop_mask[k] = mask & (1 << k) == 0;
        }
        for layout in [KvLayout::Masked, KvLayout::Compact] {
            assert_eq!(prompt_for(&d, &d.cfg, &b, layout).shape(), &[24, 64], "mask {mask:b}");
        }
    }
}

#[test]
fn prompt_shape_ignores_sequence_lengths() {
    let d = desk(3);
    for scale in [0.5, 1.0, 1.5] {
        let specs: Vec<EncoderSpec> = desk_encoder_specs()
            .into_iter()
            .map(|mut s| {
                s.seq_len = ((s.seq_len as f64 * scale).round() as usize).max(s.visible_attributes.len());
                s
            })
            .collect();
        let cfg = FusionConfig::for_encoders(&specs, 64);
        let encoders: Vec<MockEncoder> = specs.into_iter().map(|s| MockEncoder::new(s).unwrap()).collect();
        let scene = Scene::random(&mut RngState::new(5));
        let b = encode_all(&scene, &encoders, &RngState::new(6)).unwrap();
        assert_eq!(prompt_for(&d, &cfg, &b, KvLayout::Masked).shape(), &[24, 64], "scale {scale}");
    }
}

#[test]
fn masking_equals_physical_removal_bit_for_bit() {
    let d = desk(4);
    for dropped in 0..3 {
        let mut b = bundle(&d, 20 + dropped as u64);
        b.drop_mask[dropped] = true;
        let masked = prompt_for(&d, &d.cfg, &b, KvLayout::Masked);
        let compact = prompt_for(&d, &d.cfg, &b, KvLayout::Compact);
        assert!(masked.bit_eq(&compact), "dropped {dropped}");
        let kv = project_and_concat(&b, &d.store, &d.cfg, "meq").unwrap();
        let (single, _) = meq_forward(&d.store, &d.cfg, "meq", &kv, &TEXT).unwrap();
        assert!(masked.bit_eq(&single));
    }
}

#[test]
fn batched_forward_matches_per_sample_forward() {
    let d = desk(5);
    let mut bundles: Vec<FeatureBundle> = (0..3).map(|i| bundle(&d, 40 + i)).collect();
    bundles[1].drop_mask[0] = true;
    bundles[2].drop_mask = vec![true, false, true];
    let texts: Vec<Vec<usize>> = vec![TEXT.to_vec(); 3];
    let mut g = Graph::new();
    let kv = project_batch(&mut g, &d.store, &d.cfg, "meq", &bundles, KvLayout::Masked).unwrap();
    let out = resample(&mut g, &d.store, &d.cfg, "meq", &kv, Some(&texts)).unwrap();
    let all = g.value(out.prompt);
    for (i, b) in bundles.iter().enumerate() {
        let one = prompt_for(&d, &d.cfg, b, KvLayout::Masked);
        for r in 0..24 {
            assert_eq!(all.row(i * 24 + r), one.row(r), "sample {i} row {r}");
        }
    }
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let rows: Vec<Tensor> = order.iter().map(|&r| Tensor::new(vec![1, t.cols()], t.row(r).to_vec()).unwrap()).collect();
    Tensor::vstack(&rows.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn prompt_is_invariant_to_kv_row_and_encoder_order() {
    let d = desk(6);
    let b = bundle(&d, 50);
    let kv = project_and_concat(&b, &d.store, &d.cfg, "meq").unwrap();
    let (base, _) = meq_forward(&d.store, &d.cfg, "meq", &kv, &TEXT).unwrap();

    // Encoder order e3, e1, e2 with rows reversed inside each segment.
    let mut order = Vec::new();
    let mut segments = Vec::new();
    for k in [2, 0, 1] {
        let s = &kv.segments[k];
        let start = order.len();
        order.extend(s.rows.clone().rev());
        segments.push(Segment {
            id: s.id.clone(),
            rows: start..order.len(),
        });
    }
    let permuted = ConcatenatedKV {
        matrix: permute_rows(&kv.matrix, &order),
        segments,
    };
    let (p, rec) = meq_forward(&d.store, &d.cfg, "meq", &permuted, &TEXT).unwrap();
    assert!(max_diff(&base, &p) < 1e-9, "{}", max_diff(&base, &p));
    assert_eq!(rec.segments[0].id, "e3");
}

#[test]
fn duplicated_segments_get_equal_attribution() {
    // Two encoders with identical widths, weights and features.
    let mut cfg = FusionConfig::for_encoders(&desk_encoder_specs()[..1], 64);
    cfg.encoder_ids = vec!["a".into(), "b".into()];
    cfg.feat_dims = vec![32, 32];
    cfg.seq_lens = vec![9, 9];
    let mut store = ParamStore::new();
    init_resampler(&mut store, "meq", &cfg, &mut RngState::new(8)).unwrap();
    for suffix in ["w", "b"] {
        let a = store.get(&format!("meq.proj.a.{suffix}")).unwrap().clone();
        *store.get_mut(&format!("meq.proj.b.{suffix}")).unwrap() = a;
    }
    let enc = MockEncoder::new(desk_encoder_specs().remove(0)).unwrap();
    let feats = enc.encode(&Scene::random(&mut RngState::new(9)), &mut RngState::new(10));
    let b = FeatureBundle {
        features: vec![("a".into(), feats.clone()), ("b".into(), feats)],
        drop_mask: vec![false, false],
        token_mask: None,
    };
    let mut g = Graph::new();
    let kv = project_batch(&mut g, &store, &cfg, "meq", &[b], KvLayout::Masked).unwrap();
    let out = resample(&mut g, &store, &cfg, "meq", &kv, Some(&[TEXT.to_vec()])).unwrap();
    let a = attribution(&g, &out).unwrap();
    assert!((a[0] - a[1]).abs() < 1e-6, "{a:?}");
    assert!((a[0] + a[1] - 1.0).abs() < 1e-6);
}

#[test]
fn dropped_encoders_get_zero_attribution() {
    let d = desk(7);
    let mut bundles: Vec<FeatureBundle> = (0..4).map(|i| bundle(&d, 60 + i)).collect();
    for b in &mut bundles {
        b.drop_mask[2] = true;
    }
    bundles[0].drop_mask[0] = true;
    let texts = vec![TEXT.to_vec(); 4];
    for layout in [KvLayout::Masked] {
        let mut g = Graph::new();
        let kv = project_batch(&mut g, &d.store, &d.cfg, "meq", &bundles, layout).unwrap();
        let out = resample(&mut g, &d.store, &d.cfg, "meq", &kv, Some(&texts)).unwrap();
        let a = attribution(&g, &out).unwrap();
        assert_eq!(a[2], 0.0);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    // Compact layout with one shared pattern.
    let same: Vec<FeatureBundle> = bundles[1..].to_vec();
    let mut g = Graph::new();
    let kv = project_batch(&mut g, &d.store, &d.cfg, "meq", &same, KvLayout::Compact).unwrap();
    let out = resample(&mut g, &d.store, &d.cfg, "meq", &kv, Some(&texts[1..])).unwrap();
    let a = attribution(&g, &out).unwrap();
    assert_eq!(a[2], 0.0);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn dropout_p0_is_identity_and_eval_phase_never_drops() {
    let d = desk(0);
    let b = bundle(&d, 1);
    let mut rng = RngState::new(3);
    assert_eq!(encoder_dropout(&b, 0.0, DropoutMode::Encoder, &mut rng, Phase::Train), b);
    assert_eq!(encoder_dropout(&b, 1.0, DropoutMode::Encoder, &mut rng, Phase::Eval), b);
    let all = encoder_dropout(&b, 1.0, DropoutMode::Encoder, &mut rng, Phase::Train);
    assert_eq!(all.drop_mask, vec![false; 3]);
}

#[test]
fn dropout_keep_rate_monte_carlo() {
    let mut rng = RngState::new(2024);
    let n = 10_000;
    let (mut kept, mut fallbacks) = (0usize, 0usize);
    for _ in 0..n {
        let (keep, fallback) = draw_encoder_keep(3, 0.2, &mut rng);
        if fallback {
            // The raw draw dropped all three.
            fallbacks += 1;
        } else {
            kept += keep.iter().filter(|&&k| k).count();
        }
    }
    let rate = kept as f64 / (3 * n) as f64;
    assert!((rate - 0.8).abs() < 0.01, "keep rate {rate}");
    // 0.2^3 of draws fall back.
    let fb = fallbacks as f64 / n as f64;
    assert!((fb - 0.008).abs() < 0.004, "fallback rate {fb}");
}

#[test]
fn dropout_never_empties_the_kv_over_many_draws() {
    let mut rng = RngState::new(77);
    for i in 0..100_000u64 {
        let p = [0.2, 0.5, 0.9, 1.0][(i % 4) as usize];
        let k = 1 + (i % 5) as usize;
        let (keep, fallback) = draw_encoder_keep(k, p, &mut rng);
        assert!(keep.iter().any(|&x| x));
        if p == 1.0 {
            assert!(fallback && keep.iter().all(|&x| x));
        }
    }
    let d = desk(0);
    let b = bundle(&d, 3);
    let mut rng = RngState::new(78);
    for _ in 0..2_000 {
        let t = encoder_dropout(&b, 0.9, DropoutMode::Token, &mut rng, Phase::Train);
        let mask = t.token_mask.unwrap();
        assert!(mask.iter().flatten().any(|&dropped| !dropped));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_fallback_keeps_someone(k in 1usize..8, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let (keep, fallback) = draw_encoder_keep(k, p, &mut RngState::new(seed));
        prop_assert_eq!(keep.len(), k);
        prop_assert!(keep.iter().any(|&x| x));
        prop_assert!(!fallback || keep.iter().all(|&x| x));
    }

    #[test]
    fn prop_prompt_rows_fixed(mask in 1u32..8, scene_seed in 0u64..1000) {
        let d = desk(9);
        let mut b = bundle(&d, scene_seed);
        for k in 0..3 {
            b.drop_mask[k] = mask & (1 << k) == 0;
        }
        let p = prompt_for(&d, &d.cfg, &b, KvLayout::Masked);
        prop_assert_eq!(p.shape(), &[24, 64]);
    }
}

#[test]
fn qformer_reduces_one_encoder_and_matches_meq() {
    let d = desk(10);
    let cfg = d.cfg.single("e1").unwrap();
    let mut store = ParamStore::new();
    init_resampler(&mut store, "qf.e1", &cfg, &mut RngState::new(1)).unwrap();
    let b = bundle(&d, 70);
    let kv = project_and_concat(&b, &store, &cfg, "qf.e1").unwrap();
    assert_eq!(kv.matrix.rows(), 9);
    let p = qformer_forward(&store, &cfg, "qf.e1", &kv, &TEXT).unwrap();
    assert_eq!(p.shape(), &[8, 64]);
    let (m, _) = meq_forward(&store, &cfg, "qf.e1", &kv, &TEXT).unwrap();
    assert!(p.bit_eq(&m));
    assert!(qformer_forward(&d.store, &d.cfg, "meq", &kv, &TEXT).is_err());
}

#[test]
fn ensemble_prompt_stacks_members_and_ignores_dropout() {
    let d = desk(11);
    let bridge = Bridge::ensemble(&d.cfg).unwrap();
    assert!(bridge.dropout().is_none());
    let mut store = ParamStore::new();
    bridge.init(&mut store, &mut RngState::new(2)).unwrap();
    let b = bundle(&d, 80);
    let mut g = Graph::new();
    let out = bridge.forward(&mut g, &store, &[b.clone()], Some(&[TEXT.to_vec()]), KvLayout::Masked).unwrap();
    assert_eq!(g.value(out.prompt).shape(), &[24, 64]);

    let Bridge::Ensemble { members } = &bridge else { unreachable!() };
    let kvs: Vec<ConcatenatedKV> = members
        .iter()
        .map(|(p, c)| project_and_concat(&b, &store, c, p).unwrap())
        .collect();
    let stacked = ensemble_forward(&store, members, &kvs, &TEXT).unwrap();
    assert!(stacked.bit_eq(g.value(out.prompt)));
}

fn store_count(bridge: &Bridge) -> usize {
    let mut store = ParamStore::new();
    bridge.init(&mut store, &mut RngState::new(0)).unwrap();
    store.trainable_numel()
}

#[test]
fn parameter_counts_are_pinned() {
    let d = desk(0);
    let meq = Bridge::meq(d.cfg.clone());
    let ens = Bridge::ensemble(&d.cfg).unwrap();
    // Worked by hand from the desk dimensions.
    assert_eq!(meq.expected_param_count(), 41_344);
    assert_eq!(store_count(&meq), 41_344);
    assert_eq!(store_count(&Bridge::single(&d.cfg, "e1").unwrap()), 36_096);
    assert_eq!(ens.expected_param_count(), 108_800);
    assert_eq!(store_count(&ens), 108_800);
    let ratio = 41_344.0 / 108_800.0;
    assert!(ratio < 0.4 && 1.0 / ratio > 2.5);
}

#[test]
fn meq_is_smaller_than_the_sum_of_singles() {
    let d = desk(0);
    for cfg in [d.cfg.clone(), reference_config()] {
        let singles: usize = cfg.encoder_ids.iter().map(|id| cfg.single(id).unwrap().expected_param_count()).sum();
        assert!(cfg.expected_param_count() < singles);
    }
}

#[test]
fn param_table_counts_match_flags() {
    let mut d = desk(0);
    for e in &d.encoders {
        e.register(&mut d.store).unwrap();
    }
    let table = count_trainable_params(&d.store);
    assert_eq!(table.trainable, d.store.trainable_numel());
    assert_eq!(table.trainable_under("meq"), 41_344);
    assert_eq!(table.trainable_under("encoder"), 0);
    assert!(table.total > table.trainable);
}

#[test]
fn bad_shapes_are_config_errors() {
    let d = desk(0);
    let mut b = bundle(&d, 1);
    b.features[0].1 = Tensor::zeros(&[9, 31]);
    let mut g = Graph::new();
    let err = project_batch(&mut g, &d.store, &d.cfg, "meq", &[b], KvLayout::Masked).unwrap_err();
    assert_eq!(err.kind(), vlfuse::ErrorKind::Config);
    let mut cfg = d.cfg.clone();
    cfg.fc_layers = 3;
    assert!(cfg.validate().is_err());
}
