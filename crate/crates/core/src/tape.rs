//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A forward pass records every kernel application as a node; nodes only
//! reference earlier nodes, so tape order is already topological and the
//! backward sweep is a single reverse walk. Gradients propagate only into
//! subgraphs that can reach a trainable leaf (`needs_grad`), which keeps
//! the frozen-backbone portions of a forward pass out of the backward cost.
//!
//! Kernel set: matmul, transpose, elementwise add/sub/mul/div, scalar
//! scale/offset, bias broadcast, GELU, ln, constant powers, clamp,
//! layer norm, row softmax, two-way softmax, row cosine, sum/mean
//! reductions, row/column concatenation and slicing, row gather, reshape,
//! and corner-aligned bilinear resize.

use crate::error::{Error, Result};
use crate::tensor::{resize_coords, softmax_pair, Tensor};

/// A learnable or frozen tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn trainable(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, gradient, trainable: true }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, gradient, trainable: false }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddBias(usize, usize),
    Gelu(usize),
    Ln(usize),
    PowConst(usize, f64),
    ClampConst(usize, f64, f64),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    SoftmaxRows(usize),
    TwoWaySoftmax(usize, usize),
    CosineRows { mat: usize, vec: usize },
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows { x: usize, start: usize, end: usize },
    SliceCols { x: usize, start: usize, end: usize },
    SelectRows { x: usize, indices: Vec<usize> },
    Reshape(usize),
    BilinearResize { x: usize, out_h: usize, out_w: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
}

/// Records a forward computation and replays it in reverse for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected 2-D shape, got {shape:?}");
    (shape[0], shape[1])
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, grad: Vec::new(), needs_grad });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Materialize a node as a standalone tensor.
    pub fn tensor(&self, v: Value) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape consistent")
    }

    /// Gradient of the last `backward` target w.r.t. this node.
    pub fn grad(&self, v: Value) -> Tensor {
        let node = &self.nodes[v.0];
        if node.grad.is_empty() {
            Tensor::zeros(&node.shape)
        } else {
            Tensor::new(node.shape.clone(), node.grad.clone()).expect("grad shape consistent")
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant input: participates in the forward pass only.
    pub fn constant(&mut self, t: &Tensor) -> Value {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Parameter leaf; gradients flow to it iff the parameter is trainable.
    pub fn leaf(&mut self, p: &Parameter) -> Value {
        self.push(Op::Leaf, p.value.shape().to_vec(), p.value.data().to_vec(), p.trainable)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a.0, b.0), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a.0, b.0), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a.0, b.0), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x / y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Div(a.0, b.0), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(Op::Scale(a.0, c), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let ng = self.needs(a);
        self.push(Op::AddScalar(a.0), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn gelu(&mut self, a: Value) -> Value {
        let data = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let ng = self.needs(a);
        self.push(Op::Gelu(a.0), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn ln(&mut self, a: Value) -> Value {
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        let ng = self.needs(a);
        self.push(Op::Ln(a.0), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn pow_const(&mut self, a: Value, p: f64) -> Value {
        let data = self.data(a).iter().map(|x| x.powf(p)).collect();
        let ng = self.needs(a);
        self.push(Op::PowConst(a.0, p), self.nodes[a.0].shape.clone(), data, ng)
    }

    pub fn clamp_const(&mut self, a: Value, lo: f64, hi: f64) -> Value {
        let data = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let ng = self.needs(a);
        self.push(Op::ClampConst(a.0, lo, hi), self.nodes[a.0].shape.clone(), data, ng)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..m {
            for p in 0..k {
                let aik = da[i * k + p];
                if aik == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a.0, b.0), vec![m, n], out, ng)
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let (m, n) = rows_cols(self.shape(a));
        let da = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(Op::Transpose(a.0), vec![n, m], out, ng)
    }

    /// Broadcast-add a bias vector over the rows of a matrix.
    pub fn add_bias(&mut self, a: Value, bias: Value) -> Value {
        let (m, n) = rows_cols(self.shape(a));
        assert_eq!(self.shape(bias), &[n], "bias length mismatch");
        let (da, dbias) = (self.data(a), self.data(bias));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = da[i * n + j] + dbias[j];
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(Op::AddBias(a.0, bias.0), vec![m, n], out, ng)
    }

    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: f64) -> Value {
        let (m, n) = rows_cols(self.shape(x));
        assert_eq!(self.shape(gamma), &[n]);
        assert_eq!(self.shape(beta), &[n]);
        let (dx, dg, db) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &dx[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * dg[j] + db[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, vec![m, n], out, ng)
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, x: Value) -> Value {
        let (m, n) = rows_cols(self.shape(x));
        let dx = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &dx[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let ng = self.needs(x);
        self.push(Op::SoftmaxRows(x.0), vec![m, n], out, ng)
    }

    /// Elementwise abnormal branch of the two-way exp-normalization:
    /// `exp(a) / (exp(a) + exp(b))`.
    pub fn two_way_softmax(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "two_way_softmax shape mismatch");
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| softmax_pair(x, y).expect("finite similarity scores").0)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::TwoWaySoftmax(a.0, b.0), self.nodes[a.0].shape.clone(), data, ng)
    }

    /// Cosine similarity of each matrix row against a fixed-length vector,
    /// clamped to [-1, 1]. The clamp passes gradients through.
    pub fn cosine_rows(&mut self, mat: Value, vec: Value) -> Value {
        let (m, n) = rows_cols(self.shape(mat));
        assert_eq!(self.shape(vec), &[n], "cosine_rows vector length mismatch");
        let (dm, dv) = (self.data(mat), self.data(vec));
        let nv = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(nv > 0.0, "cosine_rows on zero-norm vector");
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &dm[i * n..(i + 1) * n];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(nr > 0.0, "cosine_rows on zero-norm row {i}");
            let dot: f64 = row.iter().zip(dv).map(|(a, b)| a * b).sum();
            out[i] = (dot / (nr * nv)).clamp(-1.0, 1.0);
        }
        let ng = self.needs(mat) || self.needs(vec);
        self.push(Op::CosineRows { mat: mat.0, vec: vec.0 }, vec![m], out, ng)
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Value) -> Value {
        let s = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll(a.0), vec![], vec![s], ng)
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let len = self.data(a).len().max(1);
        let s = self.data(a).iter().sum::<f64>() / len as f64;
        let ng = self.needs(a);
        self.push(Op::MeanAll(a.0), vec![], vec![s], ng)
    }

    /// Column means of a matrix: (m, n) -> (n,).
    pub fn mean_rows(&mut self, a: Value) -> Value {
        let (m, n) = rows_cols(self.shape(a));
        let da = self.data(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += da[i * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let ng = self.needs(a);
        self.push(Op::MeanRows(a.0), vec![n], out, ng)
    }

    // ── Shape ────────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: Value, b: Value) -> Value {
        let (ma, n) = rows_cols(self.shape(a));
        let (mb, n2) = rows_cols(self.shape(b));
        assert_eq!(n, n2, "concat_rows column mismatch");
        let mut data = Vec::with_capacity((ma + mb) * n);
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows(a.0, b.0), vec![ma + mb, n], data, ng)
    }

    pub fn concat_cols(&mut self, a: Value, b: Value) -> Value {
        let (m, na) = rows_cols(self.shape(a));
        let (m2, nb) = rows_cols(self.shape(b));
        assert_eq!(m, m2, "concat_cols row mismatch");
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&da[i * na..(i + 1) * na]);
            data.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a.0, b.0), vec![m, na + nb], data, ng)
    }

    pub fn slice_rows(&mut self, x: Value, start: usize, end: usize) -> Value {
        let (m, n) = rows_cols(self.shape(x));
        assert!(start < end && end <= m, "slice_rows {start}..{end} of {m}");
        let data = self.data(x)[start * n..end * n].to_vec();
        let ng = self.needs(x);
        self.push(Op::SliceRows { x: x.0, start, end }, vec![end - start, n], data, ng)
    }

    pub fn slice_cols(&mut self, x: Value, start: usize, end: usize) -> Value {
        let (m, n) = rows_cols(self.shape(x));
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let dx = self.data(x);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&dx[i * n + start..i * n + end]);
        }
        let ng = self.needs(x);
        self.push(Op::SliceCols { x: x.0, start, end }, vec![m, w], data, ng)
    }

    /// Gather rows by index; duplicate indices are allowed.
    pub fn select_rows(&mut self, x: Value, indices: &[usize]) -> Value {
        let (m, n) = rows_cols(self.shape(x));
        assert!(!indices.is_empty(), "select_rows with empty index set");
        let dx = self.data(x);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &r in indices {
            assert!(r < m, "select_rows index {r} out of {m}");
            data.extend_from_slice(&dx[r * n..(r + 1) * n]);
        }
        let ng = self.needs(x);
        self.push(
            Op::SelectRows { x: x.0, indices: indices.to_vec() },
            vec![indices.len(), n],
            data,
            ng,
        )
    }

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Value {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data(x).len(),
            "reshape element count mismatch"
        );
        let data = self.data(x).to_vec();
        let ng = self.needs(x);
        self.push(Op::Reshape(x.0), shape, data, ng)
    }

    /// Corner-aligned bilinear interpolation of a 2-D grid.
    pub fn bilinear_resize(&mut self, x: Value, out_h: usize, out_w: usize) -> Value {
        let (in_h, in_w) = rows_cols(self.shape(x));
        assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0, "bilinear_resize zero extent");
        let grid = self.tensor(x);
        let out = crate::tensor::bilinear_resize(&grid, out_h, out_w).expect("validated extents");
        let ng = self.needs(x);
        self.push(
            Op::BilinearResize { x: x.0, out_h, out_w },
            vec![out_h, out_w],
            out.data().to_vec(),
            ng,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a single-element loss node. Node gradients are
    /// reset first, so calling this twice on one tape is idempotent;
    /// accumulation across calls happens at parameter extraction.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::usage(format!(
                "backward target must be a single value, got shape {:?}",
                node.shape
            )));
        }
        if !node.needs_grad {
            return Err(Error::usage(
                "backward target has no trainable inputs (graph-less scalar)".to_string(),
            ));
        }
        for node in &mut self.nodes {
            node.grad.clear();
        }
        self.ensure_grad(loss.0);
        self.nodes[loss.0].grad[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_empty() {
                continue;
            }
            self.backprop_node(id);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: usize) {
        if self.nodes[id].grad.is_empty() {
            let len = self.nodes[id].data.len();
            self.nodes[id].grad = vec![0.0; len];
        }
    }

    /// Add `contribution` into the gradient of node `id` if it wants one.
    fn accumulate(&mut self, id: usize, contribution: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        self.ensure_grad(id);
        let g = &mut self.nodes[id].grad;
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }

    fn backprop_node(&mut self, id: usize) {
        let op = self.nodes[id].op.clone();
        let g = std::mem::take(&mut self.nodes[id].grad);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.data(Value(b))).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.data(Value(a))).map(|(g, x)| g * x).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Div(a, b) => {
                let xb = self.data(Value(b));
                let xa = self.data(Value(a));
                let da: Vec<f64> = g.iter().zip(xb).map(|(g, y)| g / y).collect();
                let db: Vec<f64> =
                    g.iter().zip(xa.iter().zip(xb)).map(|(g, (x, y))| -g * x / (y * y)).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddScalar(a) => {
                self.accumulate(a, &g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a].shape.clone());
                let n = self.nodes[b].shape[1];
                // dA = G @ B^T
                let mut da = vec![0.0; m * k];
                {
                    let bd = self.data(Value(b));
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                }
                // dB = A^T @ G
                let mut db = vec![0.0; k * n];
                {
                    let ad = self.data(Value(a));
                    for p in 0..k {
                        for i in 0..m {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(a) => {
                let (m, n) = rows_cols(&self.nodes[a].shape.clone());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(a, &g);
                let (m, n) = rows_cols(&self.nodes[a].shape.clone());
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                self.accumulate(bias, &db);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> =
                    g.iter().zip(self.data(Value(a))).map(|(g, &x)| g * gelu_bwd(x)).collect();
                self.accumulate(a, &da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> =
                    g.iter().zip(self.data(Value(a))).map(|(g, x)| g / x).collect();
                self.accumulate(a, &da);
            }
            Op::PowConst(a, p) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(Value(a)))
                    .map(|(g, &x)| if p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::ClampConst(a, lo, hi) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(Value(a)))
                    .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = rows_cols(&self.nodes[x].shape.clone());
                let xd = self.data(Value(x)).to_vec();
                let gd = self.data(Value(gamma)).to_vec();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(&gd).map(|(g, gm)| g * gm).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dx[i * n + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = rows_cols(&self.nodes[id].shape.clone());
                let p = &self.nodes[id].data;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let prow = &p[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        da[i * n + j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::TwoWaySoftmax(a, b) => {
                let p = &self.nodes[id].data;
                let da: Vec<f64> =
                    g.iter().zip(p).map(|(g, &p)| g * p * (1.0 - p)).collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::CosineRows { mat, vec } => {
                let (m, n) = rows_cols(&self.nodes[mat].shape.clone());
                let md = self.data(Value(mat)).to_vec();
                let vd = self.data(Value(vec)).to_vec();
                let nv = vd.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut dmat = vec![0.0; m * n];
                let mut dvec = vec![0.0; n];
                for i in 0..m {
                    let row = &md[i * n..(i + 1) * n];
                    let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = row.iter().zip(&vd).map(|(a, b)| a * b).sum();
                    let c = dot / (nr * nv);
                    let gi = g[i];
                    for j in 0..n {
                        dmat[i * n + j] = gi * (vd[j] / (nr * nv) - c * row[j] / (nr * nr));
                        dvec[j] += gi * (row[j] / (nr * nv) - c * vd[j] / (nv * nv));
                    }
                }
                self.accumulate(mat, &dmat);
                self.accumulate(vec, &dvec);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.nodes[a].data.len()];
                self.accumulate(a, &da);
            }
            Op::MeanAll(a) => {
                let len = self.nodes[a].data.len().max(1);
                let da = vec![g[0] / len as f64; self.nodes[a].data.len()];
                self.accumulate(a, &da);
            }
            Op::MeanRows(a) => {
                let (m, n) = rows_cols(&self.nodes[a].shape.clone());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / m as f64;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ConcatRows(a, b) => {
                let alen = self.nodes[a].data.len();
                self.accumulate(a, &g[..alen]);
                self.accumulate(b, &g[alen..]);
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = rows_cols(&self.nodes[a].shape.clone());
                let nb = self.nodes[b].shape[1];
                let n = na + nb;
                let mut da = vec![0.0; m * na];
                let mut db = vec![0.0; m * nb];
                for i in 0..m {
                    da[i * na..(i + 1) * na].copy_from_slice(&g[i * n..i * n + na]);
                    db[i * nb..(i + 1) * nb].copy_from_slice(&g[i * n + na..(i + 1) * n]);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::SliceRows { x, start, end } => {
                let (m, n) = rows_cols(&self.nodes[x].shape.clone());
                let mut dx = vec![0.0; m * n];
                dx[start * n..end * n].copy_from_slice(&g);
                self.accumulate(x, &dx);
            }
            Op::SliceCols { x, start, end } => {
                let (m, n) = rows_cols(&self.nodes[x].shape.clone());
                let w = end - start;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(x, &dx);
            }
            Op::SelectRows { x, indices } => {
                let (m, n) = rows_cols(&self.nodes[x].shape.clone());
                let mut dx = vec![0.0; m * n];
                for (i, &r) in indices.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += g[i * n + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape(x) => {
                self.accumulate(x, &g);
            }
            Op::BilinearResize { x, out_h, out_w } => {
                let (in_h, in_w) = rows_cols(&self.nodes[x].shape.clone());
                let ys = resize_coords(in_h, out_h);
                let xs = resize_coords(in_w, out_w);
                let mut dx = vec![0.0; in_h * in_w];
                for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let go = g[i * out_w + j];
                        dx[y0 * in_w + x0] += go * (1.0 - fy) * (1.0 - fx);
                        dx[y0 * in_w + x1] += go * (1.0 - fy) * fx;
                        dx[y1 * in_w + x0] += go * fy * (1.0 - fx);
                        dx[y1 * in_w + x1] += go * fy * fx;
                    }
                }
                self.accumulate(x, &dx);
            }
        }
        self.nodes[id].grad = g;
    }
}

/// Binds parameters to tape leaves, one leaf per parameter name, so a
/// parameter used in several places accumulates a single gradient.
#[derive(Debug, Default)]
pub struct Binder {
    by_name: std::collections::HashMap<String, Value>,
    bindings: Vec<(String, Value)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, p: &Parameter) -> Value {
        if let Some(&v) = self.by_name.get(&p.name) {
            return v;
        }
        let v = tape.leaf(p);
        self.by_name.insert(p.name.clone(), v);
        self.bindings.push((p.name.clone(), v));
        v
    }

    pub fn bindings(&self) -> &[(String, Value)] {
        &self.bindings
    }

    pub fn value_of(&self, name: &str) -> Option<Value> {
        self.by_name.get(name).copied()
    }

    /// Gradients of every bound leaf after a `backward` call, by name.
    pub fn collect_gradients(&self, tape: &Tape) -> std::collections::HashMap<String, Tensor> {
        self.bindings.iter().map(|(name, v)| (name.clone(), tape.grad(*v))).collect()
    }
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Max relative error between `param.gradient` and a central-difference
/// estimate of `f`'s gradient at `param.value`.
///
/// Per coordinate the error is `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check<F>(mut f: F, param: &Parameter, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::usage("finite_diff_check step must be positive".to_string()));
    }
    let mut probe = param.value.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = original - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = original;
        let numeric = (up - down) / (2.0 * step);
        let analytic = param.gradient.data()[i];
        let err = (analytic - numeric).abs() / numeric.abs().max(1e-8);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
