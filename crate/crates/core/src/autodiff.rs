//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every primitive records its inputs on a [`Graph`] as it runs. Node ids only
//! ever point backwards, so replaying the tape in reverse order is a valid
//! topological sweep.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    MeanRows(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Mask(Var, Vec<f64>),
    Mse(Var, Var),
    CrossEntropy(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. A graph in training mode owns the RNG that draws dropout
/// masks; in evaluation mode dropout is the identity.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::Shape {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `a (m×k) · b (k×n)`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

/// `a (m×n) · bᵀ` where `b` is `k×n`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · d` where `a` is `m×k` and `d` is `m×n`.
fn mm_tn(a: &[f64], d: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o += s * dv;
            }
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax of a plain slice; shared with code that scores outside a graph.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Draws an inverted-dropout mask: kept entries are `1/(1-rate)`, dropped are 0.
pub fn dropout_mask(rng: &mut impl Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

impl Graph {
    /// Evaluation-mode graph: dropout is disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: None,
        }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Records a leaf that accumulates gradient but is not tied to a parameter path.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "variable")
    }

    /// Looks up a parameter by path, recording it once per graph. Frozen
    /// parameters enter as constants.
    pub fn param(&mut self, tree: &ParamTree, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let t = tree.get(path)?;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        let v = self.push(value, Op::Leaf, !tree.is_frozen(path), "param")?;
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims(ta, "matmul")?;
        let (k2, n) = dims(tb, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = mm(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg, "add")
    }

    /// `x + b` with `b` (length = columns of `x`) broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (r, c) = dims(tx, "add_row")?;
        if tb.numel() != c {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for (o, &bv) in out[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(Tensor::new(vec![r, c], out)?, Op::AddRow(x, b), rg, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg, "mul")
    }

    /// `x ⊙ g` with `g` (length = columns of `x`) broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let (r, c) = dims(tx, "mul_row")?;
        if tg.numel() != c {
            return Err(mismatch("mul_row", tx, tg));
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for (o, &gv) in out[i * c..(i + 1) * c].iter_mut().zip(tg.data()) {
                *o *= gv;
            }
        }
        let rg = self.rg(&[x, g]);
        self.push(Tensor::new(vec![r, c], out)?, Op::MulRow(x, g), rg, "mul_row")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v + s).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::AddScalar(x), rg, "add_scalar")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * s).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Scale(x, s), rg, "scale")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims(tx, "transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg, "transpose")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims(tx, "softmax")?;
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(x), rg, "softmax")
    }

    /// Row-wise layer normalization `gain ⊙ (x - mean)/sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tgain, tbias) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = dims(tx, "layer_norm")?;
        if tgain.numel() != c {
            return Err(mismatch("layer_norm", tx, tgain));
        }
        if tbias.numel() != c {
            return Err(mismatch("layer_norm", tx, tbias));
        }
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let n = (row[j] - mean) * inv;
                normalized[i * c + j] = n;
                out[i * c + j] = tgain.data()[j] * n + tbias.data()[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push(Tensor::new(vec![r, c], out)?, op, rg, "layer_norm")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Sigmoid(x), rg, "sigmoid")
    }

    /// Mean over rows, producing a `1×c` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims(tx, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in tx.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), rg, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg, "sum")
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols: no inputs".into()))?;
        let (r, _) = dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (r, c) = dims(tt, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Input("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("gather_rows: index {bad} out of range for {r} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows(table, idx.to_vec()),
            rg,
            "gather_rows",
        )
    }

    /// Multiplies by a fixed mask; the mask receives no gradient.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::Shape {
                op: "apply_mask",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Mask(x, mask), rg, "apply_mask")
    }

    /// Inverted dropout. Identity in evaluation mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let n = self.value(x).numel();
        match self.rng.as_mut() {
            Some(rng) if rate > 0.0 => {
                let mask = dropout_mask(rng, n, rate);
                self.apply_mask(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        let n = ta.numel() as f64;
        let loss = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(loss), Op::Mse(a, b), rg, "mse")
    }

    /// Softmax cross-entropy of a single logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = dims(tl, "cross_entropy")?;
        if r != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![1, c],
            });
        }
        if label >= c {
            return Err(Error::Input(format!("cross_entropy: label {label} out of range for {c} classes")));
        }
        let max = tl.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + tl.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - tl.data()[label];
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, label), rg, "cross_entropy")
    }

    /// Reverse sweep from a scalar `loss`. Nodes that do not require a
    /// gradient are skipped; reachable leaves accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("loss node {} not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(upstream);
                continue;
            }
            for (input, g) in self.local_grads(id, &upstream)? {
                if input.0 >= id {
                    return Err(Error::Graph(format!("cycle: node {id} depends on {}", input.0)));
                }
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `id` with respect to each input.
    fn local_grads(&self, id: usize, dy: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).cols();
                if needs(*a) {
                    out.push((*a, mm_nt(dy, val(*b).data(), m, n, k)));
                }
                if needs(*b) {
                    out.push((*b, mm_tn(val(*a).data(), dy, m, k, n)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::AddRow(x, b) => {
                let c = val(*b).numel();
                let mut db = vec![0.0; c];
                for row in dy.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                out.push((*x, dy.to_vec()));
                out.push((*b, db));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    out.push((*a, dy.iter().zip(tb).map(|(g, y)| g * y).collect()));
                }
                if needs(*b) {
                    out.push((*b, dy.iter().zip(ta).map(|(g, x)| g * x).collect()));
                }
            }
            Op::MulRow(x, gate) => {
                let tx = val(*x).data();
                let tg = val(*gate).data();
                let c = tg.len();
                if needs(*x) {
                    let dx = dy
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(tg).map(|(d, g)| d * g))
                        .collect();
                    out.push((*x, dx));
                }
                if needs(*gate) {
                    let mut dg = vec![0.0; c];
                    for (drow, xrow) in dy.chunks(c).zip(tx.chunks(c)) {
                        for j in 0..c {
                            dg[j] += drow[j] * xrow[j];
                        }
                    }
                    out.push((*gate, dg));
                }
            }
            Op::AddScalar(x) => out.push((*x, dy.to_vec())),
            Op::Scale(x, s) => out.push((*x, dy.iter().map(|g| g * s).collect())),
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j * r + i];
                    }
                }
                out.push((*x, dx));
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yrow, grow), drow) in y.chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let c = node.value.cols();
                let tg = val(*gain).data();
                if needs(*bias) {
                    let mut db = vec![0.0; c];
                    for row in dy.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    out.push((*bias, db));
                }
                if needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for (grow, nrow) in dy.chunks(c).zip(normalized.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * nrow[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if needs(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    let cf = c as f64;
                    for (i, ((grow, nrow), drow)) in
                        dy.chunks(c).zip(normalized.chunks(c)).zip(dx.chunks_mut(c)).enumerate()
                    {
                        let dn: Vec<f64> = grow.iter().zip(tg).map(|(g, w)| g * w).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] = inv_std[i] / cf * (cf * dn[j] - sum_dn - nrow[j] * sum_dn_n);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Relu(x) => {
                let tx = val(*x).data();
                out.push((*x, dy.iter().zip(tx).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                out.push((*x, dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()));
            }
            Op::MeanRows(x) => {
                let (r, _) = val(*x).dims2().unwrap();
                let scale = 1.0 / r as f64;
                let dx = (0..r).flat_map(|_| dy.iter().map(|g| g * scale)).collect();
                out.push((*x, dx));
            }
            Op::Sum(x) => out.push((*x, vec![dy[0]; val(*x).numel()])),
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if needs(*p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        out.push((*p, dp));
                    }
                    offset += w;
                }
            }
            Op::GatherRows(table, idx) => {
                let c = val(*table).cols();
                let mut dt = vec![0.0; val(*table).numel()];
                for (row, &i) in dy.chunks(c).zip(idx) {
                    dt[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                out.push((*table, dt));
            }
            Op::Mask(x, mask) => out.push((*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect())),
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let k = 2.0 * dy[0] / ta.len() as f64;
                let da: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| k * (x - y)).collect();
                if needs(*b) {
                    out.push((*b, da.iter().map(|v| -v).collect()));
                }
                out.push((*a, da));
            }
            Op::CrossEntropy(logits, label) => {
                let mut p = softmax(val(*logits).data());
                p[*label] -= 1.0;
                out.push((*logits, p.into_iter().map(|v| v * dy[0]).collect()));
            }
        }
        Ok(out)
    }

    /// Gradients of every parameter recorded via [`Graph::param`].
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(path, &v)| {
                let g = grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
                (path.clone(), g)
            })
            .collect()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node was unreachable from the loss or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Runs the reverse sweep and accumulates parameter gradients into `tree`.
/// Every non-frozen parameter ends up with a gradient buffer; ones the loss
/// does not reach receive zeros.
pub fn backward_pass(graph: &Graph, loss: Var, tree: &mut ParamTree) -> Result<()> {
    let grads = graph.backward(loss)?;
    tree.accumulate(&graph.param_grads(&grads), 1.0)?;
    tree.ensure_grads();
    Ok(())
}
