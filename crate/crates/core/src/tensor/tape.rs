//! Reverse-mode autodiff over a flat operation tape.
//!
//! Each forward pass builds its own tape, so independent passes can run on
//! separate workers without sharing mutable state. Parameters enter as shared
//! leaves (`Arc<Tensor>`); gradients come back as a name-keyed map.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tensor::{
    gelu, gelu_grad, log_sum_exp, mm_nn, mm_nt, mm_tn, row_moments, softmax_rows_masked, Tensor,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub type Gradients = BTreeMap<String, Vec<f32>>;

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

/// Row spec for the fused token-embedding op: which content table and which
/// row of it, with the position row implied by the output row index.
#[derive(Debug, Clone, Copy)]
pub struct TokenRow {
    pub table: u8,
    pub token: u32,
}

enum Op {
    Leaf { name: Option<String> },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    Gelu { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f32 },
    Dropout { x: Var, keep: Vec<bool>, inv_keep: f32 },
    EmbedTokens { tables: Vec<Var>, pos: Var, rows: Arc<Vec<TokenRow>> },
    Cols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    Row { x: Var, index: usize },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, indices: Arc<Vec<usize>> },
    SmoothedNllMean { logits: Var, targets: Arc<Vec<usize>>, alpha: f32 },
    PgLossMean { logits: Var, actions: Arc<Vec<usize>>, advantages: Arc<Vec<f32>> },
    EntropyMean { logits: Var },
    MseMean { pred: Var, target: Arc<Vec<f32>> },
    SumScaled { parts: Vec<(Var, f32)> },
}

struct Node {
    value: Value,
    grad: Option<Vec<f32>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    // ---- leaves ----

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { name: None })
    }

    pub fn param(&mut self, name: &str, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: Value::Shared(t),
            grad: None,
            op: Op::Leaf {
                name: Some(name.to_string()),
            },
        });
        Var(self.nodes.len() - 1)
    }

    // ---- ops ----

    /// C = A[m,k] @ B[k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0f32; m * n];
        mm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b })
    }

    /// C = A[m,k] @ B[n,k]^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (n, k2) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0f32; m * n];
        mm_nt(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNT { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Add { a, b })
    }

    /// x[r,c] + bias[c], broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        assert_eq!(self.value(bias).len(), c, "bias length mismatch");
        let xv = &self.value(x).data;
        let bv = &self.value(bias).data;
        let data = xv
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::AddBias { x, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let data = self.value(x).data.iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data.iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data.iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Sigmoid { x })
    }

    /// Row-wise softmax; `allowed[i*cols+j] == false` pins weight i->j to zero.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<Arc<Vec<bool>>>) -> Var {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let mut data = self.value(x).data.clone();
        softmax_rows_masked(&mut data, r, c, allowed.as_deref().map(Vec::as_slice));
        self.push(Tensor::new(vec![r, c], data), Op::SoftmaxRows { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Var {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.value(gain).len(), d);
        assert_eq!(self.value(bias).len(), d);
        let xv = &self.value(x).data;
        let gv = &self.value(gain).data;
        let bv = &self.value(bias).data;
        let rows = xv.len() / d;
        let mut out = vec![0.0f32; xv.len()];
        for i in 0..rows {
            let row = &xv[i * d..(i + 1) * d];
            let (mean, rstd) = row_moments(row, eps);
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gain, bias, eps })
    }

    /// Inverted dropout: survivors scaled by 1/keep_prob. The caller supplies
    /// the keep mask so randomness stays outside the tape.
    pub fn dropout(&mut self, x: Var, keep: Vec<bool>, keep_prob: f32) -> Var {
        assert_eq!(keep.len(), self.value(x).len());
        let inv_keep = 1.0 / keep_prob;
        let data = self
            .value(x)
            .data
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * inv_keep } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Dropout { x, keep, inv_keep })
    }

    /// Fused token embedding: output row i is `tables[rows[i].table]`'s row
    /// `rows[i].token` plus row i of the position table.
    pub fn embed_tokens(&mut self, tables: Vec<Var>, pos: Var, rows: Arc<Vec<TokenRow>>) -> Var {
        let dim = self.shape(tables[0])[1];
        let l = rows.len();
        assert!(
            self.shape(pos)[0] >= l,
            "sequence length {l} exceeds position table {}",
            self.shape(pos)[0]
        );
        let mut out = vec![0.0f32; l * dim];
        for (i, spec) in rows.iter().enumerate() {
            let table = self.value(tables[spec.table as usize]);
            let emb = &table.data[spec.token as usize * dim..(spec.token as usize + 1) * dim];
            let posv = &self.value(pos).data[i * dim..(i + 1) * dim];
            for j in 0..dim {
                out[i * dim + j] = emb[j] + posv[j];
            }
        }
        self.push(
            Tensor::new(vec![l, dim], out),
            Op::EmbedTokens { tables, pos, rows },
        )
    }

    /// Column slice [r, C] -> [r, len].
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        assert!(start + len <= c);
        let xv = &self.value(x).data;
        let mut out = vec![0.0f32; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new(vec![r, len], out), Op::Cols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let r = self.shape(parts[0])[0];
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).collect::<Vec<_>>().iter().sum();
        let mut out = vec![0.0f32; r * total];
        let mut offset = 0;
        for &p in &parts {
            let c = self.shape(p)[1];
            assert_eq!(self.shape(p)[0], r);
            let pv = &self.value(p).data;
            for i in 0..r {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(Tensor::new(vec![r, total], out), Op::ConcatCols { parts })
    }

    /// Row extraction [r,c] -> [1,c].
    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let c = self.shape(x)[1];
        let data = self.value(x).data[index * c..(index + 1) * c].to_vec();
        self.push(Tensor::new(vec![1, c], data), Op::Row { x, index })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let c = self.shape(parts[0])[1];
        let total: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
        let mut out = Vec::with_capacity(total * c);
        for &p in &parts {
            assert_eq!(self.shape(p)[1], c);
            out.extend_from_slice(&self.value(p).data);
        }
        self.push(Tensor::new(vec![total, c], out), Op::ConcatRows { parts })
    }

    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Var {
        let c = self.shape(x)[1];
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            out.extend_from_slice(&self.value(x).data[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::new(vec![indices.len(), c], out),
            Op::GatherRows { x, indices },
        )
    }

    /// Mean over rows of label-smoothed cross-entropy against integer targets.
    pub fn smoothed_nll_mean(&mut self, logits: Var, targets: Arc<Vec<usize>>, alpha: f32) -> Var {
        let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        assert_eq!(targets.len(), r);
        let xv = &self.value(logits).data;
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            debug_assert!(t < c);
            let row = &xv[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            // q = (1-alpha) one-hot + alpha/c uniform
            let mut ce = 0.0f64;
            for (j, &z) in row.iter().enumerate() {
                let q = if j == t {
                    f64::from(1.0 - alpha) + f64::from(alpha) / c as f64
                } else {
                    f64::from(alpha) / c as f64
                };
                ce -= q * (f64::from(z) - lse);
            }
            total += ce;
        }
        let mean = (total / r as f64) as f32;
        self.push(
            Tensor::scalar(mean),
            Op::SmoothedNllMean { logits, targets, alpha },
        )
    }

    /// -mean(adv * log pi(a)) over rows.
    pub fn pg_loss_mean(
        &mut self,
        logits: Var,
        actions: Arc<Vec<usize>>,
        advantages: Arc<Vec<f32>>,
    ) -> Var {
        let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        assert_eq!(actions.len(), r);
        assert_eq!(advantages.len(), r);
        let xv = &self.value(logits).data;
        let mut total = 0.0f64;
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            let logp = f64::from(row[actions[i]]) - lse;
            total -= f64::from(advantages[i]) * logp;
        }
        let mean = (total / r as f64) as f32;
        self.push(
            Tensor::scalar(mean),
            Op::PgLossMean { logits, actions, advantages },
        )
    }

    /// mean(H(softmax(row))) over rows.
    pub fn entropy_mean(&mut self, logits: Var) -> Var {
        let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        let xv = &self.value(logits).data;
        let mut total = 0.0f64;
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for &z in row {
                let logp = f64::from(z) - lse;
                total -= logp.exp() * logp;
            }
        }
        let mean = (total / r as f64) as f32;
        self.push(Tensor::scalar(mean), Op::EntropyMean { logits })
    }

    pub fn mse_mean(&mut self, pred: Var, target: Arc<Vec<f32>>) -> Var {
        assert_eq!(self.value(pred).len(), target.len());
        let xv = &self.value(pred).data;
        let total: f64 = xv
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| {
                let d = f64::from(p) - f64::from(t);
                d * d
            })
            .sum();
        let mean = (total / target.len() as f64) as f32;
        self.push(Tensor::scalar(mean), Op::MseMean { pred, target })
    }

    /// Weighted sum of scalar nodes.
    pub fn sum_scaled(&mut self, parts: Vec<(Var, f32)>) -> Var {
        let total: f64 = parts
            .iter()
            .map(|&(v, w)| f64::from(self.value(v).data[0]) * f64::from(w))
            .sum();
        self.push(Tensor::scalar(total as f32), Op::SumScaled { parts })
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: Var) {
        self.backward_seeded(loss, 1.0);
    }

    /// Reverse sweep from `loss`, seeding d(loss)/d(loss) = `seed`.
    pub fn backward_seeded(&mut self, loss: Var, seed: f32) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.ensure_grad(loss);
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = seed;
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.nodes[v.0].grad.is_none() {
            let n = self.nodes[v.0].value.tensor().len();
            self.nodes[v.0].grad = Some(vec![0.0f32; n]);
        }
    }

    /// Named-leaf gradients; parameters never touched by the loss yield zeros.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::new();
        for node in &self.nodes {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![0.0f32; node.value.tensor().len()]);
                out.insert(name.clone(), g);
            }
        }
        out
    }

    fn take_grad(&mut self, i: usize) -> Vec<f32> {
        self.nodes[i].grad.take().unwrap()
    }

    fn put_grad(&mut self, i: usize, g: Vec<f32>) {
        self.nodes[i].grad = Some(g);
    }

    fn add_to_grad(&mut self, v: Var, contrib: &[f32]) {
        self.ensure_grad(v);
        let g = self.nodes[v.0].grad.as_mut().unwrap();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&mut self, i: usize) {
        // Take the node's grad to satisfy the borrow checker, then restore it.
        let g = self.take_grad(i);
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let mut da = vec![0.0f32; m * k];
                mm_nt(&g, &self.value(b).data, &mut da, m, n, k);
                let mut db = vec![0.0f32; k * n];
                mm_tn(&self.value(a).data, &g, &mut db, m, k, n);
                self.add_to_grad(a, &da);
                self.add_to_grad(b, &db);
            }
            Op::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                let mut da = vec![0.0f32; m * k];
                mm_nn(&g, &self.value(b).data, &mut da, m, n, k);
                let mut db = vec![0.0f32; n * k];
                mm_tn(&g, &self.value(a).data, &mut db, m, n, k);
                self.add_to_grad(a, &da);
                self.add_to_grad(b, &db);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_to_grad(a, &g);
                self.add_to_grad(b, &g);
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let c = self.value(bias).len();
                let mut db = vec![0.0f32; c];
                for (i, gi) in g.iter().enumerate() {
                    db[i % c] += gi;
                }
                self.add_to_grad(x, &g);
                self.add_to_grad(bias, &db);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f32> = g.iter().zip(&self.value(b).data).map(|(gi, bv)| gi * bv).collect();
                let db: Vec<f32> = g.iter().zip(&self.value(a).data).map(|(gi, av)| gi * av).collect();
                self.add_to_grad(a, &da);
                self.add_to_grad(b, &db);
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                let dx: Vec<f32> = g.iter().map(|gi| gi * factor).collect();
                self.add_to_grad(x, &dx);
            }
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&self.value(x).data)
                    .map(|(gi, &xv)| gi * gelu_grad(xv))
                    .collect();
                self.add_to_grad(x, &dx);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&self.value(x).data)
                    .map(|(gi, &xv)| if xv > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.add_to_grad(x, &dx);
            }
            Op::Tanh { x } => {
                let x = *x;
                let yv = &self.nodes[i].value.tensor().data;
                let dx: Vec<f32> = g.iter().zip(yv).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                self.add_to_grad(x, &dx);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let yv = &self.nodes[i].value.tensor().data;
                let dx: Vec<f32> = g.iter().zip(yv).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                self.add_to_grad(x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let yv = &self.nodes[i].value.tensor().data;
                let mut dx = vec![0.0f32; r * c];
                for row in 0..r {
                    let y = &yv[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = y
                        .iter()
                        .zip(gr)
                        .map(|(&yi, &gi)| f64::from(yi) * f64::from(gi))
                        .sum();
                    for j in 0..c {
                        dx[row * c + j] = y[j] * (gr[j] - dot as f32);
                    }
                }
                self.add_to_grad(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let d = self.value(gain).len();
                let xv = &self.value(x).data;
                let gv = &self.value(gain).data;
                let rows = xv.len() / d;
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgain = vec![0.0f32; d];
                let mut dbias = vec![0.0f32; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = row_moments(row, eps);
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dy = f64::from(gr[j]) * f64::from(gv[j]);
                        sum_dy += dy;
                        sum_dy_xhat += dy * f64::from(xhat);
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = f64::from((row[j] - mean) * rstd);
                        let dy = f64::from(gr[j]) * f64::from(gv[j]);
                        dx[r * d + j] =
                            (f64::from(rstd) * (dy - sum_dy * inv_d - xhat * sum_dy_xhat * inv_d)) as f32;
                    }
                }
                self.add_to_grad(x, &dx);
                self.add_to_grad(gain, &dgain);
                self.add_to_grad(bias, &dbias);
            }
            Op::Dropout { x, keep, inv_keep } => {
                let (x, inv_keep) = (*x, *inv_keep);
                let dx: Vec<f32> = g
                    .iter()
                    .zip(keep.clone())
                    .map(|(gi, k)| if k { gi * inv_keep } else { 0.0 })
                    .collect();
                self.add_to_grad(x, &dx);
            }
            Op::EmbedTokens { tables, pos, rows } => {
                let tables = tables.clone();
                let pos = *pos;
                let rows = rows.clone();
                let dim = self.shape(tables[0])[1];
                for (r, spec) in rows.iter().enumerate() {
                    let gr = g[r * dim..(r + 1) * dim].to_vec();
                    let tvar = tables[spec.table as usize];
                    self.ensure_grad(tvar);
                    {
                        let tg = self.nodes[tvar.0].grad.as_mut().unwrap();
                        let base = spec.token as usize * dim;
                        for j in 0..dim {
                            tg[base + j] += gr[j];
                        }
                    }
                    self.ensure_grad(pos);
                    let pg = self.nodes[pos.0].grad.as_mut().unwrap();
                    for j in 0..dim {
                        pg[r * dim + j] += gr[j];
                    }
                }
            }
            Op::Cols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.add_to_grad(x, &dx);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let r = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(p)[1];
                    let mut dp = vec![0.0f32; r * c];
                    for i in 0..r {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    self.add_to_grad(p, &dp);
                    offset += c;
                }
            }
            Op::Row { x, index } => {
                let (x, index) = (*x, *index);
                let c = self.shape(x)[1];
                let mut dx = vec![0.0f32; self.value(x).len()];
                dx[index * c..(index + 1) * c].copy_from_slice(&g);
                self.add_to_grad(x, &dx);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).len();
                    let dp = g[offset..offset + n].to_vec();
                    self.add_to_grad(p, &dp);
                    offset += n;
                }
            }
            Op::GatherRows { x, indices } => {
                let x = *x;
                let indices = indices.clone();
                let c = self.shape(x)[1];
                let mut dx = vec![0.0f32; self.value(x).len()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[r * c + j];
                    }
                }
                self.add_to_grad(x, &dx);
            }
            Op::SmoothedNllMean { logits, targets, alpha } => {
                let logits = *logits;
                let targets = targets.clone();
                let alpha = *alpha;
                let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                let seed = g[0] / r as f32;
                let xv = &self.value(logits).data;
                let mut dx = vec![0.0f32; r * c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &xv[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (f64::from(row[j]) - lse).exp() as f32;
                        let q = if j == t {
                            (1.0 - alpha) + alpha / c as f32
                        } else {
                            alpha / c as f32
                        };
                        dx[i * c + j] = seed * (p - q);
                    }
                }
                self.add_to_grad(logits, &dx);
            }
            Op::PgLossMean { logits, actions, advantages } => {
                let logits = *logits;
                let actions = actions.clone();
                let advantages = advantages.clone();
                let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                let seed = g[0] / r as f32;
                let xv = &self.value(logits).data;
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (f64::from(row[j]) - lse).exp() as f32;
                        let onehot = if j == actions[i] { 1.0 } else { 0.0 };
                        dx[i * c + j] = -seed * advantages[i] * (onehot - p);
                    }
                }
                self.add_to_grad(logits, &dx);
            }
            Op::EntropyMean { logits } => {
                let logits = *logits;
                let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                let seed = g[0] / r as f32;
                let xv = &self.value(logits).data;
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    let mut h = 0.0f64;
                    for &z in row {
                        let logp = f64::from(z) - lse;
                        h -= logp.exp() * logp;
                    }
                    for j in 0..c {
                        let logp = f64::from(row[j]) - lse;
                        let p = logp.exp();
                        dx[i * c + j] = seed * (-(p * (logp + h))) as f32;
                    }
                }
                self.add_to_grad(logits, &dx);
            }
            Op::MseMean { pred, target } => {
                let pred = *pred;
                let target = target.clone();
                let n = target.len();
                let seed = g[0] / n as f32;
                let dx: Vec<f32> = self
                    .value(pred)
                    .data
                    .iter()
                    .zip(target.iter())
                    .map(|(&p, &t)| 2.0 * seed * (p - t))
                    .collect();
                self.add_to_grad(pred, &dx);
            }
            Op::SumScaled { parts } => {
                let parts = parts.clone();
                for (p, w) in parts {
                    self.add_to_grad(p, &[g[0] * w]);
                }
            }
        }
        self.put_grad(i, g);
    }
}

/// Causal mask over `l` positions: row i may attend to j <= i.
pub fn causal_mask(l: usize) -> Arc<Vec<bool>> {
    let mut m = vec![false; l * l];
    for i in 0..l {
        for j in 0..=i {
            m[i * l + j] = true;
        }
    }
    Arc::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_gradient() {
        // loss = mean((x - 0)^2) over [1,2] -> d/dx = 2x/n = [1, 2]
        let mut tape = Tape::new();
        let x = tape.param("x", Arc::new(Tensor::new(vec![1, 2], vec![1.0, 2.0])));
        let loss = tape.mse_mean(x, Arc::new(vec![0.0, 0.0]));
        tape.backward(loss);
        let grads = tape.param_grads();
        assert_eq!(grads["x"], vec![1.0, 2.0]);
    }

    #[test]
    fn matmul_chain_backward_is_finite_and_nonzero() {
        let mut rng = crate::rng::stream_rng(5, 0);
        let mut tape = Tape::new();
        let a = tape.param("a", Arc::new(Tensor::trunc_normal(&[3, 4], 0.5, &mut rng)));
        let b = tape.param("b", Arc::new(Tensor::trunc_normal(&[4, 2], 0.5, &mut rng)));
        let c = tape.matmul(a, b);
        let s = tape.softmax_rows(c, None);
        let loss = tape.smoothed_nll_mean(s, Arc::new(vec![0, 1, 0]), 0.0);
        tape.backward(loss);
        let grads = tape.param_grads();
        assert!(grads["a"].iter().any(|&g| g != 0.0));
        assert!(grads["a"].iter().all(|g| g.is_finite()));
        assert!(grads["b"].iter().all(|g| g.is_finite()));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let _unused = tape.param("unused", Arc::new(Tensor::ones(&[2])));
        let x = tape.param("x", Arc::new(Tensor::new(vec![1, 1], vec![3.0])));
        let loss = tape.mse_mean(x, Arc::new(vec![0.0]));
        tape.backward(loss);
        let grads = tape.param_grads();
        assert_eq!(grads["unused"], vec![0.0, 0.0]);
    }
}
