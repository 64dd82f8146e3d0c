use std::rc::Rc;

use vlfuse::nn::*;
use vlfuse::numerics::*;

fn rand_tensor(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform() * 4.0 - 2.0).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn attention_store(cfg: AttentionConfig, kv_dim: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = RngState::new(seed);
    init_attention(&mut store, "att", cfg, kv_dim, &mut rng).unwrap();
    store
}

#[test]
fn single_key_gives_value_projection_for_every_query() {
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let store = attention_store(cfg, 6, 1);
    let mut rng = RngState::new(2);
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, 5, 8));
    let kv = g.constant(rand_tensor(&mut rng, 1, 6));
    let shape = AttnShape {
        batch: 1,
        tq: 5,
        tk: 1,
        heads: 2,
    };
    let out = multi_head_attention(&mut g, &store, "att", q, kv, cfg, shape, None, None).unwrap();
    let v = linear(&mut g, &store, "att.v", kv, None).unwrap();
    let expect = linear(&mut g, &store, "att.o", v, None).unwrap();
    let out = g.value(out.out);
    for i in 0..5 {
        for j in 0..8 {
            assert!((out.get(i, j) - g.value(expect).get(0, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn kv_row_permutation_invariance() {
    let cfg = AttentionConfig::new(8, 4).unwrap();
    let store = attention_store(cfg, 6, 3);
    let mut rng = RngState::new(4);
    let q = rand_tensor(&mut rng, 3, 8);
    let kv = rand_tensor(&mut rng, 7, 6);
    let keys = [true, true, false, true, true, false, true];
    let perm = [4usize, 0, 6, 2, 5, 1, 3];
    let kv_p = Tensor::vstack(&perm.map(|p| kv.slice_rows(p, 1)).iter().collect::<Vec<_>>()).unwrap();
    let keys_p: Vec<bool> = perm.iter().map(|&p| keys[p]).collect();
    let run = |kv: Tensor, keys: &[bool]| {
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let kvv = g.constant(kv);
        let mask = Rc::new(BatchMask::shared(AttentionMask::from_keys(3, keys)));
        let shape = AttnShape {
            batch: 1,
            tq: 3,
            tk: 7,
            heads: 4,
        };
        let a = multi_head_attention(&mut g, &store, "att", qv, kvv, cfg, shape, Some(mask), None)
            .unwrap();
        g.value(a.out).clone()
    };
    let base = run(kv, &keys);
    let permuted = run(kv_p, &keys_p);
    assert!(base.max_abs_diff(&permuted) < 1e-9);
}

#[test]
fn weights_are_distributions_over_allowed_keys() {
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let store = attention_store(cfg, 8, 5);
    let mut rng = RngState::new(6);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, 2 * 4, 8));
    let shape = AttnShape {
        batch: 2,
        tq: 4,
        tk: 4,
        heads: 2,
    };
    let mask = Rc::new(BatchMask::shared(causal_self_attention_mask(4).unwrap()));
    let a = multi_head_attention(&mut g, &store, "att", x, x, cfg, shape, Some(mask), None).unwrap();
    let (w, s) = g.attention_weights(a.weights).unwrap();
    for b in 0..s.batch {
        for h in 0..s.heads {
            for i in 0..s.tq {
                let row = &w[((b * s.heads + h) * s.tq + i) * s.tk..][..s.tk];
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn causal_mask_shapes() {
    let m = causal_self_attention_mask(1).unwrap();
    assert!(m.allowed(0, 0));
    assert_eq!(causal_self_attention_mask(3).unwrap().count_allowed(), 6);
    assert!(causal_self_attention_mask(0).is_err());
}

#[test]
fn attention_config_rejects_bad_heads() {
    assert!(AttentionConfig::new(10, 3).is_err());
    assert_eq!(AttentionConfig::new(12, 3).unwrap().head_dim(), 4);
}

fn layer_cfg(kv: Option<usize>) -> LayerConfig {
    LayerConfig {
        attn: AttentionConfig::new(8, 2).unwrap(),
        ffn_hidden: 16,
        kv_dim: kv,
    }
}

#[test]
fn zero_weights_make_layer_an_identity() {
    let cfg = layer_cfg(Some(5));
    let mut store = ParamStore::new();
    init_transformer_layer(&mut store, "l", &cfg, &mut RngState::new(1)).unwrap();
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".w"))
        .map(String::from)
        .collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let mut rng = RngState::new(2);
    let mut g = Graph::new();
    let x = rand_tensor(&mut rng, 6, 8);
    let xv = g.constant(x.clone());
    let kv = g.constant(rand_tensor(&mut rng, 4, 5));
    let cross = CrossInput {
        kv,
        tk: 2,
        mask: None,
        row_gate: None,
    };
    let out = transformer_layer(&mut g, &store, "l", xv, &cfg, 2, 3, None, Some(&cross), None).unwrap();
    assert!(g.value(out.x).bit_eq(&x));
}

#[test]
fn layer_preserves_query_shape() {
    let cfg = layer_cfg(Some(5));
    let mut store = ParamStore::new();
    init_transformer_layer(&mut store, "l", &cfg, &mut RngState::new(3)).unwrap();
    let mut rng = RngState::new(4);
    for (tq, tk) in [(1, 1), (3, 7), (9, 2)] {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, 2 * tq, 8));
        let kv = g.constant(rand_tensor(&mut rng, 2 * tk, 5));
        let cross = CrossInput {
            kv,
            tk,
            mask: None,
            row_gate: None,
        };
        let out =
            transformer_layer(&mut g, &store, "l", x, &cfg, 2, tq, None, Some(&cross), None).unwrap();
        assert_eq!(g.value(out.x).shape(), &[2 * tq, 8]);
    }
}

#[test]
fn four_stacked_layers_pass_gradient_audit() {
    let cfg = LayerConfig {
        attn: AttentionConfig::new(4, 2).unwrap(),
        ffn_hidden: 6,
        kv_dim: Some(3),
    };
    let mut store = ParamStore::new();
    let mut rng = RngState::new(10);
    for l in 0..4 {
        init_transformer_layer(&mut store, &format!("l{l}"), &cfg, &mut rng).unwrap();
    }
    let x = rand_tensor(&mut rng, 3, 4);
    let kv = rand_tensor(&mut rng, 2, 3);
    let w = rand_tensor(&mut rng, 3, 4);
    let f = |g: &mut Graph, s: &ParamStore| {
        let mut h = g.constant(x.clone());
        let kvv = g.constant(kv.clone());
        let cross = CrossInput {
            kv: kvv,
            tk: 2,
            mask: None,
            row_gate: Some(vec![1.0, 1.0, 0.0]),
        };
        for l in 0..4 {
            h = transformer_layer(g, s, &format!("l{l}"), h, &cfg, 1, 3, None, Some(&cross), None)?.x;
        }
        let wv = g.constant(w.clone());
        let p = g.mul(h, wv)?;
        g.sum(p)
    };
    let names: Vec<String> = store.names().map(String::from).collect();
    let rep = finite_diff_check_params(f, &store, &names, 1e-5, 1e-4).unwrap();
    assert!(rep.pass, "{rep:?}");
}
