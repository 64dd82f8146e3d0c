use vlfuse::lm::*;
use vlfuse::numerics::*;
use vlfuse::synth::*;

fn fresh(tier: SizeTier, seed: u64) -> (LMConfig, ParamStore) {
    let cfg = LMConfig::tier(tier);
    let mut store = ParamStore::new();
    init_lm(&mut store, &cfg, &mut RngState::new(seed)).unwrap();
    (cfg, store)
}

fn caption_batch(n: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let scenes = generate_scenes(n, &RngState::new(seed)).unwrap();
    scenes
        .iter()
        .map(|s| {
            let c = caption_tokens(s);
            (c.prompt().to_vec(), c.targets().to_vec())
        })
        .unzip()
}

fn loss_of(store: &ParamStore, cfg: &LMConfig, soft: Option<&Tensor>, p: &[Vec<usize>], t: &[Vec<usize>]) -> f64 {
    let mut g = Graph::new();
    let soft = soft.map(|s| SoftInput {
        prompt: g.constant(s.clone()),
        rows: s.rows() / p.len(),
    });
    let out = lm_forward(&mut g, store, cfg, soft, p, t).unwrap();
    g.value(out.loss).item()
}

/// Plain AdamW loop over a fixed batch; returns the loss per step.
fn fit(store: &mut ParamStore, cfg: &LMConfig, p: &[Vec<usize>], t: &[Vec<usize>], steps: usize, lr: f64) -> Vec<f64> {
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut losses = Vec::new();
    for _ in 0..steps {
        let mut g = Graph::new();
        let out = lm_forward(&mut g, store, cfg, None, p, t).unwrap();
        losses.push(g.value(out.loss).item());
        let grads = g.backward(out.loss).unwrap().into_params();
        opt.step(store, &grads, lr).unwrap();
    }
    losses
}

#[test]
fn untrained_loss_is_near_uniform() {
    let (cfg, store) = fresh(SizeTier::Base, 3);
    let (p, t) = caption_batch(1000, 4);
    let loss = loss_of(&store, &cfg, None, &p, &t);
    assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 0.2, "loss {loss}");
}

#[test]
fn length_and_target_errors() {
    let (cfg, store) = fresh(SizeTier::Small, 0);
    let mut g = Graph::new();
    let err = lm_forward(&mut g, &store, &cfg, None, &[vec![1]], &[vec![]]).unwrap_err();
    assert!(matches!(err, vlfuse::Error::EmptyLoss));
    let long = vec![vec![1; 40]];
    let soft = SoftInput {
        prompt: g.constant(Tensor::zeros(&[10, cfg.d_lm])),
        rows: 10,
    };
    let err = lm_forward(&mut g, &store, &cfg, Some(soft), &long, &[vec![2]]).unwrap_err();
    match err {
        vlfuse::Error::SequenceTooLong { len, max } => assert_eq!((len, max), (50, 48)),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn target_logits_ignore_later_tokens() {
    let (cfg, store) = fresh(SizeTier::Base, 5);
    let soft = Tensor::new(vec![6, cfg.d_lm], RngState::new(6).normal_vec(6 * cfg.d_lm, 1.0)).unwrap();
    let (p, t) = caption_batch(1, 7);
    let logits = |targets: &[Vec<usize>]| {
        let mut g = Graph::new();
        let s = SoftInput {
            prompt: g.constant(soft.clone()),
            rows: 6,
        };
        let out = lm_forward(&mut g, &store, &cfg, Some(s), &p, targets).unwrap();
        g.value(out.logits).clone()
    };
    let base = logits(&t);
    for pos in 0..t[0].len() {
        let mut changed = t.clone();
        for later in pos..t[0].len() {
            changed[0][later] = (changed[0][later] + 17) % VOCAB_SIZE;
        }
        let l = logits(&changed);
        // Logits for targets up to `pos` only see tokens before `pos`.
        for r in 0..=pos {
            assert_eq!(base.row(r), l.row(r), "perturbing from {pos} moved row {r}");
        }
    }
}

#[test]
fn freeze_is_idempotent_and_blocks_updates() {
    let (cfg, mut store) = fresh(SizeTier::Small, 8);
    freeze(&mut store);
    let once = store.clone();
    freeze(&mut store);
    assert_eq!(
        once.iter().map(|(n, _, t)| (n.to_string(), t)).collect::<Vec<_>>(),
        store.iter().map(|(n, _, t)| (n.to_string(), t)).collect::<Vec<_>>(),
    );
    assert_eq!(store.trainable_numel(), 0);
    let (p, t) = caption_batch(4, 9);
    fit(&mut store, &cfg, &p, &t, 3, 1e-2);
    assert!(store.prefix_bit_eq(&once, "lm."));

    unfreeze(&mut store);
    fit(&mut store, &cfg, &p, &t, 1, 1e-2);
    assert!(!store.prefix_bit_eq(&once, "lm."));
}

#[test]
fn lora_starts_as_the_base_model() {
    let (mut cfg, mut store) = fresh(SizeTier::Base, 10);
    let (p, t) = caption_batch(8, 11);
    let soft = Tensor::new(vec![8 * 3, cfg.d_lm], RngState::new(12).normal_vec(24 * cfg.d_lm, 1.0)).unwrap();
    let logits = |store: &ParamStore, cfg: &LMConfig| {
        let mut g = Graph::new();
        let s = SoftInput {
            prompt: g.constant(soft.clone()),
            rows: 3,
        };
        let out = lm_forward(&mut g, store, cfg, Some(s), &p, &t).unwrap();
        (g.value(out.logits).clone(), g.value(out.loss).item())
    };
    let (before, loss_before) = logits(&store, &cfg);
    let total = store.numel();
    let added = lora_wrap(&mut store, &mut cfg, LoraConfig::new(8), &mut RngState::new(13)).unwrap();
    // Four attention projections per layer, r·(d_in + d_out) each.
    assert_eq!(added, cfg.layers * 4 * 8 * (cfg.d_lm + cfg.d_lm));
    assert_eq!(store.numel(), total + added);
    assert_eq!(store.trainable_numel(), added);
    let (after, loss_after) = logits(&store, &cfg);
    assert!(before.bit_eq(&after));
    assert_eq!(loss_before.to_bits(), loss_after.to_bits());
}

#[test]
fn lora_rank_limits() {
    let (mut cfg, mut store) = fresh(SizeTier::Small, 0);
    let mut rng = RngState::new(0);
    let too_big = LoraConfig::new(cfg.d_lm + 1);
    let err = lora_wrap(&mut store, &mut cfg, too_big, &mut rng).unwrap_err();
    assert_eq!(err.kind(), vlfuse::ErrorKind::Config);
    assert!(lora_wrap(&mut store, &mut cfg, LoraConfig::new(0), &mut rng).is_err());
    let mut bad = LoraConfig::new(2);
    bad.targets = vec!["ffn".into()];
    assert!(lora_wrap(&mut store, &mut cfg, bad, &mut rng).is_err());
}

#[test]
fn larger_rank_fits_at_least_as_well() {
    let (p, t) = caption_batch(16, 14);
    let run = |rank: usize| {
        let (mut cfg, mut store) = fresh(SizeTier::Base, 15);
        lora_wrap(&mut store, &mut cfg, LoraConfig::new(rank), &mut RngState::new(16)).unwrap();
        let losses = fit(&mut store, &cfg, &p, &t, 60, 1.25e-3);
        losses[losses.len() - 5..].iter().sum::<f64>() / 5.0
    };
    let (r4, r8) = (run(4), run(8));
    assert!(r8 <= r4, "r=8 {r8} vs r=4 {r4}");
}

#[test]
fn overfit_one_scene_reproduces_its_caption() {
    let (cfg, mut store) = fresh(SizeTier::Small, 17);
    let scene = Scene::from_values([2, 5, 3, 1]).unwrap();
    let ids = caption_tokens(&scene).ids;
    let (p, t) = (vec![ids[..1].to_vec()], vec![ids[1..].to_vec()]);
    let losses = fit(&mut store, &cfg, &p, &t, 150, 1e-2);
    assert!(losses.last().unwrap() < &0.01, "{:?}", losses.last());
    let out = greedy_decode(&store, &cfg, None, &ids[..1], 20).unwrap();
    assert_eq!(out, ids[1..].to_vec());
    assert_eq!(decode_caption(&out[3..]).unwrap(), scene);
}

#[test]
fn greedy_decode_contracts() {
    let (cfg, store) = fresh(SizeTier::Small, 18);
    let soft = Tensor::new(vec![4, cfg.d_lm], RngState::new(19).normal_vec(4 * cfg.d_lm, 1.0)).unwrap();
    let a = greedy_decode(&store, &cfg, Some(&soft), &[1, 3], 6).unwrap();
    let b = greedy_decode(&store, &cfg, Some(&soft), &[1, 3], 6).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 6);
    if let Some(pos) = a.iter().position(|&x| x == Vocabulary.id(Token::Eos)) {
        assert_eq!(pos + 1, a.len());
    }
    assert_eq!(greedy_decode(&store, &cfg, Some(&soft), &[1, 3], 1).unwrap().len(), 1);
    assert!(greedy_decode(&store, &cfg, None, &[1], 0).is_err());
    assert_eq!(argmax(&[0.5, 2.0, 2.0, -1.0]), 1);
}

#[test]
fn text_pretraining_learns_the_caption_grammar() {
    let cfg = LMConfig::tier(SizeTier::Small);
    let spec = TextPretrainSpec {
        steps: 150,
        ..TextPretrainSpec::default()
    };
    let (store, losses) = pretrain_text_lm(&cfg, &spec).unwrap();
    assert_eq!(store.trainable_numel(), 0);
    assert!(losses[losses.len() - 1] < losses[0] - 1.0, "{} -> {}", losses[0], losses[losses.len() - 1]);
    // Without context the template tokens are predictable; values are not.
    let out = greedy_decode(&store, &cfg, None, &[Vocabulary.id(Token::Bos)], 8).unwrap();
    assert_eq!(&out[..3], &[3, 4, 5]);
    assert_eq!(out[7], Vocabulary.id(Token::Eos));
}

#[test]
fn context_bag_holds_kept_values_and_fillers() {
    let scene = Scene::from_values([7, 0, 4, 2]).unwrap();
    let mut rng = RngState::new(1);
    for _ in 0..50 {
        let bag = context_bag(&scene, 8, 0.5, &mut rng);
        assert_eq!(bag.len(), 8);
        for &id in &bag {
            let ok = match Vocabulary.token(id).unwrap() {
                Token::Value(a, v) => scene.value(a) == v,
                Token::Reserved(_) => true,
                _ => false,
            };
            assert!(ok, "unexpected id {id} in {bag:?}");
        }
    }
    let mut all = context_bag(&scene, 4, 1.0, &mut rng);
    all.sort();
    assert_eq!(all, vec![17, 18, 30, 36]);
}
