//! Finite-difference audit of every differentiable op and of each composite
//! module up to the full fused training loss.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::model::{example, Model, Task};
use crate::error::Result;
use crate::fusion::{Bridge, FusionConfig, KvLayout};
use crate::lm::{init_lm, lm_forward, lora_wrap, LMConfig, LoraConfig, SizeTier, SoftInput};
use crate::nn::{feed_forward, init_feed_forward, init_transformer_layer, linear, transformer_layer, AttentionConfig, CrossInput, LayerConfig};
use crate::numerics::{
    finite_diff_check, finite_diff_check_params, AttentionMask, AttnShape, BatchMask, GradCheckReport, Graph,
    ParamStore, RngState, Tensor, Var,
};
use crate::synth::{desk_encoder_specs, Scene, ATTRIBUTES};

pub const AUDIT_EPS: f64 = 1e-5;
pub const AUDIT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub module: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn rand(rng: &mut RngState, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], rng.normal_vec(r * c, 1.0)).expect("shape")
}

/// Weighted sum, so every output element carries a distinct gradient.
fn probe(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpCase = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// Input-level checks for each graph op.
fn op_cases(rng: &mut RngState) -> Vec<(&'static str, Tensor, OpCase)> {
    let mut cases: Vec<(&'static str, Tensor, OpCase)> = Vec::new();

    let (b, w) = (rand(rng, 4, 5), rand(rng, 3, 5));
    cases.push(("matmul", rand(rng, 3, 4), Box::new(move |g, x| {
        let bv = g.constant(b.clone());
        let y = g.matmul(x, bv)?;
        probe(g, y, &w)
    })));

    let (o, bias, w) = (rand(rng, 3, 4), rand(rng, 1, 4), rand(rng, 3, 4));
    cases.push(("add/add_row/mul/scale/sum", rand(rng, 3, 4), Box::new(move |g, x| {
        let ov = g.constant(o.clone());
        let bv = g.constant(Tensor::new(vec![4], bias.data().to_vec())?);
        let y = g.add(x, ov)?;
        let y = g.add_row(y, bv)?;
        let y = g.mul(y, x)?;
        let y = g.scale(y, -0.7)?;
        probe(g, y, &w)
    })));

    let w = rand(rng, 3, 6);
    cases.push(("gelu", rand(rng, 3, 6), Box::new(move |g, x| {
        let y = g.gelu(x)?;
        probe(g, y, &w)
    })));

    let (gamma, beta, w) = (rand(rng, 1, 6), rand(rng, 1, 6), rand(rng, 3, 6));
    cases.push(("layer_norm", rand(rng, 3, 6), Box::new(move |g, x| {
        let gv = g.constant(Tensor::new(vec![6], gamma.data().to_vec())?);
        let bv = g.constant(Tensor::new(vec![6], beta.data().to_vec())?);
        let y = g.layer_norm(x, gv, bv, 1e-5)?;
        probe(g, y, &w)
    })));

    let w = rand(rng, 3, 5);
    cases.push(("softmax_rows", rand(rng, 3, 5), Box::new(move |g, x| {
        let y = g.softmax_rows(x)?;
        probe(g, y, &w)
    })));

    let shape = AttnShape {
        batch: 2,
        tq: 3,
        tk: 4,
        heads: 2,
    };
    let mask = Rc::new(BatchMask::per_sample(vec![
        AttentionMask::from_keys(3, &[true, false, true, true]),
        AttentionMask::new(3, 4, vec![true, false, false, false, true, true, false, false, true, true, true, false])
            .expect("mask shape"),
    ]));
    let (k, v, w) = (rand(rng, 2, 4), rand(rng, 8, 4), rand(rng, 6, 4));
    cases.push(("attention", rand(rng, 6, 4), Box::new(move |g, x| {
        let kv = g.constant(k.clone());
        let vv = g.constant(v.clone());
        // Queries also feed the keys so both paths are exercised.
        let k2 = g.concat_blocks(&[x, kv], &[3, 1], 2)?;
        let y = g.attention(x, k2, vv, shape, Some(mask.clone()))?;
        probe(g, y, &w)
    })));

    cases.push(("cross_entropy", rand(rng, 4, 7), Box::new(move |g, x| {
        g.cross_entropy(x, &[1, 6, 0, 3], &[true, false, true, true])
    })));

    let w = rand(rng, 10, 3);
    cases.push(("embedding/concat/slice/tile/row_scale", rand(rng, 5, 3), Box::new(move |g, x| {
        let e = g.embedding(x, &[4, 0, 4, 2])?;
        let c = g.concat_blocks(&[e, x], &[4, 5], 1)?;
        let c = g.slice_blocks(c, 9, 1, 5, 1)?;
        let t = g.tile(c, 2)?;
        let r = g.row_scale(t, &[1.0, 0.0, 2.0, -1.0, 0.5, 1.0, 1.0, 3.0, 0.0, 1.0])?;
        probe(g, r, &w)
    })));
    cases
}

fn check_store<F>(f: F, store: &ParamStore, skip: &str) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let names: Vec<String> = store.names().filter(|n| skip.is_empty() || !n.starts_with(skip)).map(String::from).collect();
    finite_diff_check_params(f, store, &names, AUDIT_EPS, AUDIT_TOL)
}

/// Perturb every parameter away from its structured init (zero LoRA
/// up-maps, unit gains) so no gradient path is trivially zero.
fn jitter(store: &mut ParamStore, rng: &mut RngState) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let t = store.get_mut(&n).expect("listed");
        for x in t.data_mut() {
            *x += 0.1 * rng.normal();
        }
    }
}

fn tiny_fusion(d_lm: usize) -> FusionConfig {
    let mut f = FusionConfig::for_encoders(&desk_encoder_specs(), d_lm);
    f.d_proj = 6;
    f.queries_per_encoder = 2;
    f.d_h = 4;
    f.layers = 2;
    f.heads = 2;
    f.ffn_hidden = 6;
    f.fc_layers = 2;
    f.text_cross_attends = false;
    f.cross_attn_cadence = crate::fusion::CrossAttnCadence::Alternating;
    f
}

fn tiny_lm() -> LMConfig {
    let mut c = LMConfig::tier(SizeTier::Small);
    c.d_lm = 4;
    c.heads = 2;
    c.ffn_hidden = 6;
    c.layers = 1;
    c.max_seq_len = 20;
    c
}

/// Parameter-level checks of the composite modules.
fn module_reports(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = RngState::new(seed).derive(1);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    store.init_linear("lin", 3, 4, &mut rng)?;
    store.insert("lin.lora_down", rand(&mut rng, 3, 2), true)?;
    store.insert("lin.lora_up", rand(&mut rng, 2, 4), true)?;
    init_feed_forward(&mut store, "ffn", 4, 5, &mut rng)?;
    let x = rand(&mut rng, 3, 3);
    let w = rand(&mut rng, 3, 4);
    out.push((
        "linear+lora/feed_forward",
        check_store(
            |g, s| {
                let xv = g.constant(x.clone());
                let h = linear(g, s, "lin", xv, Some(0.5))?;
                let y = feed_forward(g, s, "ffn", h, None)?;
                probe(g, y, &w)
            },
            &store,
            "",
        )?,
    ));

    let lc = LayerConfig {
        attn: AttentionConfig::new(4, 2)?,
        ffn_hidden: 5,
        kv_dim: Some(3),
    };
    let mut store = ParamStore::new();
    init_transformer_layer(&mut store, "layer", &lc, &mut rng)?;
    jitter(&mut store, &mut rng);
    let (x, kv, w) = (rand(&mut rng, 6, 4), rand(&mut rng, 4, 3), rand(&mut rng, 6, 4));
    let self_mask = Rc::new(BatchMask::shared(AttentionMask::causal(3)));
    let cross_mask = Rc::new(BatchMask::per_sample(vec![
        AttentionMask::from_keys(3, &[true, true]),
        AttentionMask::from_keys(3, &[false, true]),
    ]));
    out.push((
        "transformer_layer",
        check_store(
            |g, s| {
                let xv = g.constant(x.clone());
                let kvv = g.constant(kv.clone());
                let cross = CrossInput {
                    kv: kvv,
                    tk: 2,
                    mask: Some(cross_mask.clone()),
                    row_gate: Some(vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0]),
                };
                let y = transformer_layer(g, s, "layer", xv, &lc, 2, 3, Some(self_mask.clone()), Some(&cross), None)?;
                probe(g, y.x, &w)
            },
            &store,
            "",
        )?,
    ));

    // Resampler and LM inside one model, including a LoRA-adapted LM.
    let mut lm = tiny_lm();
    let mut lm_store = ParamStore::new();
    init_lm(&mut lm_store, &lm, &mut rng)?;
    lora_wrap(&mut lm_store, &mut lm, LoraConfig::new(2), &mut rng)?;
    jitter(&mut lm_store, &mut rng);
    let fusion = tiny_fusion(lm.d_lm);
    let mut model = Model::new(Bridge::meq(fusion), lm.clone(), &lm_store, &desk_encoder_specs(), seed)?;
    let names: Vec<String> = model.store.names().filter(|n| !n.starts_with("encoder.")).map(String::from).collect();
    jitter(&mut model.store, &mut rng);

    let noise = RngState::new(seed).derive(2);
    let mut bundles = Vec::new();
    let mut prompts = Vec::new();
    let mut targets = Vec::new();
    for b in 0..2 {
        let scene = Scene::random(&mut noise.derive(b));
        let mut bundle = model.encode(&scene, &noise.derive(10 + b))?;
        bundle.drop_mask[b as usize] = true;
        bundles.push(bundle);
        let (p, t) = example(&scene, Task::Qa, ATTRIBUTES[b as usize]);
        prompts.push(p);
        targets.push(t);
    }
    let w = rand(&mut rng, 2 * model.bridge.num_queries(), lm.d_lm);
    out.push((
        "projection+resampler",
        check_store(
            |g, s| {
                let o = model.bridge.forward(g, s, &bundles, Some(&prompts), KvLayout::Masked)?;
                probe(g, o.prompt, &w)
            },
            &model.store,
            "encoder.",
        )?,
    ));

    let soft = rand(&mut rng, 2 * 3, lm.d_lm);
    let lm_only: Vec<String> = names.iter().filter(|n| n.starts_with("lm.")).cloned().collect();
    let mut lm_params = ParamStore::new();
    for n in &lm_only {
        lm_params.insert(n, model.store.get(n).expect("listed").clone(), true)?;
    }
    let cap: Vec<Vec<usize>> = (0..2).map(|b| vec![1, 3 + b, 4]).collect();
    let tgt: Vec<Vec<usize>> = (0..2).map(|b| vec![10 + b, 20, 2]).collect();
    out.push((
        "lm+lora",
        check_store(
            |g, s| {
                let sv = g.constant(soft.clone());
                let o = lm_forward(g, s, &lm, Some(SoftInput { prompt: sv, rows: 3 }), &cap, &tgt)?;
                Ok(o.loss)
            },
            &lm_params,
            "",
        )?,
    ));

    out.push((
        "fused loss",
        check_store(
            |g, s| {
                let o = model.bridge.forward(g, s, &bundles, Some(&prompts), KvLayout::Masked)?;
                let soft = SoftInput {
                    prompt: o.prompt,
                    rows: o.num_queries,
                };
                Ok(lm_forward(g, s, &model.lm, Some(soft), &prompts, &targets)?.loss)
            },
            &model.store,
            "encoder.",
        )?,
    ));
    Ok(out)
}

/// Every op and module for each seed.
pub fn gradient_audit(seeds: &[u64]) -> Result<Vec<AuditRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut rng = RngState::new(seed);
        for (name, x, f) in op_cases(&mut rng) {
            let report = finite_diff_check(f, &x, AUDIT_EPS, AUDIT_TOL)?;
            rows.push(AuditRow {
                module: name.into(),
                seed,
                report,
            });
        }
        for (name, report) in module_reports(seed)? {
            rows.push(AuditRow {
                module: name.into(),
                seed,
                report,
            });
        }
    }
    Ok(rows)
}
