//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its output value and
//! whatever the backward pass needs. Nodes are appended in evaluation order,
//! so [`Graph::backward`] is a single reverse sweep. Gradients are only
//! propagated into nodes that (transitively) depend on a leaf requiring
//! gradients; frozen parameters therefore cost no weight-gradient work.
//!
//! Ops are deliberately coarse (fused attention, fused cross-entropy) so a
//! transformer step needs a few hundred nodes rather than tens of thousands.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean `[query × key]` matrix of allowed attention edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    tq: usize,
    tk: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(tq: usize, tk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != tq * tk {
            return Err(Error::Dimension {
                op: "attention mask",
                lhs: vec![tq, tk],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Self { tq, tk, allowed })
    }

    pub fn all(tq: usize, tk: usize) -> Self {
        Self {
            tq,
            tk,
            allowed: vec![true; tq * tk],
        }
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(t: usize) -> Self {
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allowed[i * t + j] = true;
            }
        }
        Self { tq: t, tk: t, allowed }
    }

    /// Same key subset for every query row.
    pub fn from_keys(tq: usize, keys: &[bool]) -> Self {
        let tk = keys.len();
        let mut allowed = Vec::with_capacity(tq * tk);
        for _ in 0..tq {
            allowed.extend_from_slice(keys);
        }
        Self { tq, tk, allowed }
    }

    pub fn tq(&self) -> usize {
        self.tq
    }

    pub fn tk(&self) -> usize {
        self.tk
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.tk + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Index of the first query row with no allowed key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.tq).find(|&i| !(0..self.tk).any(|j| self.allowed(i, j)))
    }
}

/// Masks for a batch: either one shared mask or one per sample.
#[derive(Debug, Clone)]
pub struct BatchMask {
    masks: Vec<AttentionMask>,
}

impl BatchMask {
    pub fn shared(mask: AttentionMask) -> Self {
        Self { masks: vec![mask] }
    }

    pub fn per_sample(masks: Vec<AttentionMask>) -> Self {
        Self { masks }
    }

    fn get(&self, b: usize) -> &AttentionMask {
        if self.masks.len() == 1 {
            &self.masks[0]
        } else {
            &self.masks[b]
        }
    }
}

/// Geometry of a batched attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatBlocks {
        parts: Vec<Var>,
        rows: Vec<usize>,
        batch: usize,
    },
    SliceBlocks {
        x: Var,
        block: usize,
        start: usize,
        len: usize,
        batch: usize,
    },
    Tile {
        x: Var,
        times: usize,
    },
    RowScale {
        x: Var,
        scales: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_all_params: bool,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Treat every parameter as differentiable regardless of its trainable
    /// flag. Used by gradient audits of frozen components.
    pub fn with_grad_all_params() -> Self {
        Self {
            grad_all_params: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable free variable.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; created once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let rg = self.grad_all_params || store.is_trainable(name);
        let v = self.push(p.clone(), Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Attention weights `[batch × heads × tq × tk]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], AttnShape)> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, shape, .. } => Some((weights, *shape)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n, false);
        check_finite("matmul", &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        check_finite("add", &out)?;
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x[i, :] + bias` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(dim_err("add_row", tx, tb));
        }
        let c = tx.cols();
        let b = tb.data();
        let out: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        check_finite("add_row", &out)?;
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        check_finite("mul", &out)?;
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|v| v * s).collect();
        check_finite("scale", &out)?;
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale(x, s), rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out: Vec<f64> = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        check_finite("gelu", &out)?;
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gelu(x), rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` over the last dim.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps {eps} must be > 0")));
        }
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_finite("softmax_rows input", tx.data())?;
        let c = tx.cols();
        let mut out = vec![0.0; tx.len()];
        for r in 0..tx.rows() {
            softmax_into(tx.row(r), &mut out[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch·tq × d]`, `k` and `v` are `[batch·tk × d]`; sample `b`
    /// owns rows `b·tq..` of `q` and `b·tk..` of `k`/`v`. Disallowed keys are
    /// skipped entirely, so their weight is exactly zero and the result is
    /// bit-identical to attending over the allowed rows alone.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        mask: Option<Rc<BatchMask>>,
    ) -> Result<Var> {
        let AttnShape {
            batch,
            tq,
            tk,
            heads,
        } = shape;
        let (tq_t, tk_t, tv_t) = (self.value(q), self.value(k), self.value(v));
        let d = tq_t.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden dim {d} not divisible by {heads} heads"
            )));
        }
        if tq_t.rows() != batch * tq || tk_t.rows() != batch * tk || tk_t.shape() != tv_t.shape()
        {
            return Err(dim_err("attention", tq_t, tk_t));
        }
        if tk_t.cols() != d {
            return Err(dim_err("attention", tq_t, tk_t));
        }
        if let Some(m) = &mask {
            if m.masks.len() != 1 && m.masks.len() != batch {
                return Err(Error::InvalidArgument(format!(
                    "{} masks for batch of {batch}",
                    m.masks.len()
                )));
            }
            for (i, mm) in m.masks.iter().enumerate() {
                if mm.tq != tq || mm.tk != tk {
                    return Err(Error::Dimension {
                        op: "attention mask",
                        lhs: vec![tq, tk],
                        rhs: vec![mm.tq, mm.tk],
                    });
                }
                if let Some(row) = mm.first_empty_row() {
                    return Err(Error::FullyMasked { row: i * tq + row });
                }
            }
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (tq_t.data(), tk_t.data(), tv_t.data());
        let mut weights = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; batch * tq * d];
        let mut scores = vec![0.0; tk];
        let mut allowed = vec![true; tk];
        for b in 0..batch {
            let m = mask.as_ref().map(|m| m.get(b));
            for h in 0..heads {
                let off = h * hd;
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * d + off..(b * tq + i) * d + off + hd];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        allowed[j] = m.map_or(true, |m| m.allowed(i, j));
                        if allowed[j] {
                            let krow = &kd[(b * tk + j) * d + off..(b * tk + j) * d + off + hd];
                            let s = super::kernels::dot(qrow, krow) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let wbase = ((b * heads + h) * tq + i) * tk;
                    let mut sum = 0.0;
                    for j in 0..tk {
                        if allowed[j] {
                            let e = (scores[j] - max).exp();
                            weights[wbase + j] = e;
                            sum += e;
                        }
                    }
                    let orow = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + hd];
                    for j in 0..tk {
                        if allowed[j] {
                            let w = weights[wbase + j] / sum;
                            weights[wbase + j] = w;
                            let vrow = &vd[(b * tk + j) * d + off..(b * tk + j) * d + off + hd];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o += w * vv;
                            }
                        }
                    }
                }
            }
        }
        check_finite("attention", &out)?;
        let t = Tensor::new(vec![batch * tq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows whose `mask` entry is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, vsz) = (tl.rows(), tl.cols());
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= vsz) {
            return Err(Error::InvalidArgument(format!(
                "target id {bad} out of range for vocabulary {vsz}"
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        check_finite("cross_entropy logits", tl.data())?;
        let mut probs = vec![0.0; t * vsz];
        let mut loss = 0.0;
        for r in 0..t {
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..vsz {
                probs[r * vsz + j] = (row[j] - lse).exp();
            }
            if mask[r] {
                loss += lse - row[targets[r]];
            }
        }
        let loss = loss / count as f64;
        check_finite("cross_entropy", &[loss])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} out of range for table of {v} rows"
                )));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Per-sample row concatenation. Part `p` holds `batch` blocks of
    /// `rows[p]` rows; sample `b` of the output is `[part0_b; part1_b; ...]`.
    pub fn concat_blocks(&mut self, parts: &[Var], rows: &[usize], batch: usize) -> Result<Var> {
        if parts.is_empty() || parts.len() != rows.len() {
            return Err(Error::InvalidArgument("concat_blocks arity".into()));
        }
        let d = self.value(parts[0]).cols();
        for (p, &r) in parts.iter().zip(rows) {
            let t = self.value(*p);
            if t.cols() != d || t.rows() != r * batch {
                return Err(Error::Dimension {
                    op: "concat_blocks",
                    lhs: vec![r * batch, d],
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let total: usize = rows.iter().sum();
        let mut out = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for (p, &r) in parts.iter().zip(rows) {
                let data = self.value(*p).data();
                out.extend_from_slice(&data[b * r * d..(b + 1) * r * d]);
            }
        }
        let t = Tensor::new(vec![batch * total, d], out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::ConcatBlocks {
                parts: parts.to_vec(),
                rows: rows.to_vec(),
                batch,
            },
            rg,
        ))
    }

    /// Rows `start..start+len` of every `block`-row sample.
    pub fn slice_blocks(
        &mut self,
        x: Var,
        block: usize,
        start: usize,
        len: usize,
        batch: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != block * batch || start + len > block || len == 0 {
            return Err(Error::Dimension {
                op: "slice_blocks",
                lhs: tx.shape().to_vec(),
                rhs: vec![batch, block, start, len],
            });
        }
        let d = tx.cols();
        let mut out = Vec::with_capacity(batch * len * d);
        for b in 0..batch {
            let s = (b * block + start) * d;
            out.extend_from_slice(&tx.data()[s..s + len * d]);
        }
        let t = Tensor::new(vec![batch * len, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SliceBlocks {
                x,
                block,
                start,
                len,
                batch,
            },
            rg,
        ))
    }

    /// Repeat all rows of `x` `times` times.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.value(x);
        let mut out = Vec::with_capacity(tx.len() * times);
        for _ in 0..times {
            out.extend_from_slice(tx.data());
        }
        let t = Tensor::new(vec![tx.rows() * times, tx.cols()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Tile { x, times }, rg))
    }

    /// Multiply row `i` by the constant `scales[i]`.
    pub fn row_scale(&mut self, x: Var, scales: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if scales.len() != tx.rows() {
            return Err(Error::Dimension {
                op: "row_scale",
                lhs: tx.shape().to_vec(),
                rhs: vec![scales.len()],
            });
        }
        let c = tx.cols();
        let out: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * scales[i / c])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::RowScale {
                x,
                scales: scales.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(name, v)| {
                let g = grads[v.0].as_ref()?;
                let shape = self.value(*v).shape().to_vec();
                Some((name.clone(), Tensor::new(shape, g.clone()).ok()?))
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(grads, *a, &|s| gemm_nt(g, tb.data(), s, m, n, k, true));
                acc(grads, *b, &|s| gemm_tn(ta.data(), g, s, m, k, n, true));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(grads, *v, &|s| {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    });
                }
            }
            Op::AddRow(x, bias) => {
                acc(grads, *x, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let c = self.value(*bias).len();
                acc(grads, *bias, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % c] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * tb.data()[i];
                    }
                });
                acc(grads, *b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ta.data()[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(grads, *x, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                acc(grads, *x, &|s| {
                    for (i, &v) in tx.data().iter().enumerate() {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        let d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                        s[i] += g[i] * d;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma).data();
                let d = tg.len();
                let rows = rstd.len();
                acc(grads, *x, &|s| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xh = 0.0;
                        for j in 0..d {
                            let dy = gr[j] * tg[j];
                            mean_dy += dy;
                            mean_dy_xh += dy * xh[j];
                        }
                        mean_dy /= d as f64;
                        mean_dy_xh /= d as f64;
                        for j in 0..d {
                            let dy = gr[j] * tg[j];
                            s[r * d + j] += rstd[r] * (dy - mean_dy - xh[j] * mean_dy_xh);
                        }
                    }
                });
                acc(grads, *gamma, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % d] += gv * xhat[i];
                    }
                });
                acc(grads, *beta, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % d] += gv;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(grads, *x, &|s| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[r * c + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            } => self.backprop_attention(*q, *k, *v, *shape, weights, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vsz = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                acc(grads, *logits, &|s| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..vsz {
                            s[r * vsz + j] += scale * probs[r * vsz + j];
                        }
                        s[r * vsz + targets[r]] -= scale;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                acc(grads, *table, &|s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatBlocks { parts, rows, batch } => {
                let d = node.value.cols();
                let total: usize = rows.iter().sum();
                let mut off = 0;
                for (p, &r) in parts.iter().zip(rows) {
                    acc(grads, *p, &|s| {
                        for b in 0..*batch {
                            let src = &g[(b * total + off) * d..(b * total + off + r) * d];
                            let dst = &mut s[b * r * d..(b + 1) * r * d];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    off += r;
                }
            }
            Op::SliceBlocks {
                x,
                block,
                start,
                len,
                batch,
            } => {
                let d = node.value.cols();
                acc(grads, *x, &|s| {
                    for b in 0..*batch {
                        let dst = &mut s[(b * block + start) * d..(b * block + start + len) * d];
                        let src = &g[b * len * d..(b + 1) * len * d];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Tile { x, times } => {
                let n = self.value(*x).len();
                acc(grads, *x, &|s| {
                    for t in 0..*times {
                        s.iter_mut()
                            .zip(&g[t * n..(t + 1) * n])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::RowScale { x, scales } => {
                let c = node.value.cols();
                acc(grads, *x, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i] += gv * scales[i / c];
                    }
                });
            }
            Op::Sum(x) => {
                acc(grads, *x, &|s| s.iter_mut().for_each(|v| *v += g[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        weights: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnShape {
            batch,
            tq,
            tk,
            heads,
        } = shape;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let d = self.value(q).cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let need = |x: Var| self.nodes[x.0].requires_grad;
        let mut dq = need(q).then(|| vec![0.0; qd.len()]);
        let mut dk = need(k).then(|| vec![0.0; kd.len()]);
        let mut dv = need(v).then(|| vec![0.0; vd.len()]);
        let mut dw = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..tq {
                    let qi = (b * tq + i) * d + off;
                    let grow = &g[qi..qi + hd];
                    let wrow = &weights[((b * heads + h) * tq + i) * tk..][..tk];
                    let mut wdot = 0.0;
                    for j in 0..tk {
                        if wrow[j] == 0.0 {
                            dw[j] = 0.0;
                            continue;
                        }
                        let vj = (b * tk + j) * d + off;
                        dw[j] = super::kernels::dot(grow, &vd[vj..vj + hd]);
                        wdot += wrow[j] * dw[j];
                        if let Some(dv) = dv.as_mut() {
                            for (x, &y) in dv[vj..vj + hd].iter_mut().zip(grow) {
                                *x += wrow[j] * y;
                            }
                        }
                    }
                    for j in 0..tk {
                        if wrow[j] == 0.0 {
                            continue;
                        }
                        let ds = wrow[j] * (dw[j] - wdot) * scale;
                        let kj = (b * tk + j) * d + off;
                        if let Some(dq) = dq.as_mut() {
                            for (x, &y) in dq[qi..qi + hd].iter_mut().zip(&kd[kj..kj + hd]) {
                                *x += ds * y;
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            for (x, &y) in dk[kj..kj + hd].iter_mut().zip(&qd[qi..qi + hd]) {
                                *x += ds * y;
                            }
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(delta) = delta {
                let slot =
                    grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
                slot.iter_mut().zip(&delta).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Row softmax into a preallocated slice.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any node, if it was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0)?.as_deref()
    }

    /// Gradients of the named parameter leaves that required them.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
