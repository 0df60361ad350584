//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and the
//! backward sweep simply walks it in reverse.

use crate::error::{Error, Result};
use crate::tensor::{self, axis_split, gelu, gelu_grad, matmul_into, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax { input: Var, axis: usize },
    MaskedSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    GatherCols { input: Var, idx: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().expect("2-D value")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn shape_of(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `a[m×n] + b[n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape_of(a)?;
        if self.value(b).len() != n {
            return Err(Error::Dimension(format!(
                "row bias of length {} for {m}×{n}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension("scale_by expects a scalar".into()));
        }
        let c = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Row softmax where `mask[i*n + j] == false` entries get exactly zero
    /// probability. Every row must admit at least one entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.shape_of(a)?;
        if mask.len() != m * n {
            return Err(Error::Dimension("mask size differs from scores".into()));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let admit = &mask[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(admit)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Dimension(format!("mask row {i} admits nothing")));
            }
            let mut sum = 0.0;
            for j in 0..n {
                if admit[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MaskedSoftmaxRows(a), &[a]))
    }

    /// Normalizes each row of `x`, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.shape_of(x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Dimension(format!(
                "layer_norm affine params must have length {n}"
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape_of(a)?;
        if start + len > m {
            return Err(Error::Dimension(format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.push(out, Op::SliceRows { input: a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape_of(a)?;
        if start + len > n {
            return Err(Error::Dimension(format!("cols {start}..{} of {n}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols { input: a, start }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape_of(parts[0])?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.shape_of(p)?;
            if c != n {
                return Err(Error::Dimension("concat_rows: column counts differ".into()));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape_of(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape_of(p)?;
            if r != m {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape_of(table)?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            if r >= m {
                return Err(Error::Dimension(format!("gather row {r} of {m}")));
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(vec![idx.len(), n], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape_of(a)?;
        if let Some(&bad) = idx.iter().find(|&&c| c >= n) {
            return Err(Error::Dimension(format!("gather col {bad} of {n}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            for &c in idx {
                data.push(src[i * n + c]);
            }
        }
        let out = Tensor::new(vec![m, idx.len()], data)?;
        Ok(self.push(
            out,
            Op::GatherCols {
                input: a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Column means, producing a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape_of(a)?;
        if m == 0 {
            return Err(Error::Dimension("mean over zero rows".into()));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for row in src.chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let out = Tensor::new(vec![1, n], out)?;
        Ok(self.push(out, Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean cross-entropy over the rows of `logits` whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.shape_of(logits)?;
        if targets.len() != m {
            return Err(Error::Dimension(format!(
                "{} targets for {m} logit rows",
                targets.len()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyInput("cross_entropy with no supervised rows".into()));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                probs[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                probs[i * n + j] /= sum;
            }
            if let Some(t) = targets[i] {
                if t >= n {
                    return Err(Error::Dimension(format!("target {t} outside vocab {n}")));
                }
                loss += sum.ln() + max - row[t];
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from `output`, seeded with `seed`.
    ///
    /// Gradients from fan-out are summed. Leaves created without
    /// `requires_grad` receive no gradient.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.shape() != seed.shape() {
            return Err(Error::Dimension(format!(
                "seed shape {:?} differs from output shape {:?}",
                seed.shape(),
                out_val.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.data().to_vec());
        }

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        // Intermediate nodes keep their gradients too; callers read leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(val(*a));
                let n = dims(val(*b)).1;
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let bt = val(*b).transpose().expect("matrix");
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut da, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let at = val(*a).transpose().expect("matrix");
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut db, k, m, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims(val(*a));
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &d);
                }
                if needs(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    let n = val(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(grads, *a, &d);
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s).data()[0];
                if needs(*a) {
                    let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(grads, *a, &d);
                }
                if needs(*s) {
                    let d: f64 = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    accumulate(grads, *s, &[d]);
                }
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, y)| x * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &v)| x * gelu_grad(v))
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("axis");
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::MaskedSoftmaxRows(input) => {
                let (m, n) = dims(&node.value);
                let y = node.value.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = dims(&node.value);
                let gam = val(*gamma).data();
                if needs(*gamma) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    accumulate(grads, *gamma, &dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *beta, &db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[i * n + j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g[i * n + j] * gam[j];
                            dx[i * n + j] =
                                inv_std[i] / nf * (nf * dh - sum_dh - xhat[i * n + j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::SliceRows { input, start } => {
                let (m, n) = dims(val(*input));
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(grads, *input, &d);
            }
            Op::SliceCols { input, start } => {
                let (m, n) = dims(val(*input));
                let len = dims(&node.value).1;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(grads, *input, &d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        accumulate(grads, p, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims(&node.value);
                let mut col = 0;
                for &p in parts {
                    let w = dims(val(p)).1;
                    if needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        accumulate(grads, p, &d);
                    }
                    col += w;
                }
            }
            Op::GatherRows { table, idx } => {
                let (m, n) = dims(val(*table));
                let mut d = vec![0.0; m * n];
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[r * n + j] += g[i * n + j];
                    }
                }
                accumulate(grads, *table, &d);
            }
            Op::GatherCols { input, idx } => {
                let (m, n) = dims(val(*input));
                let k = idx.len();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for (p, &c) in idx.iter().enumerate() {
                        d[i * n + c] += g[i * k + p];
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::MeanRows(a) => {
                let (m, n) = dims(val(*a));
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j] / m as f64;
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; val(*a).len()];
                accumulate(grads, *a, &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (m, n) = dims(val(*logits));
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; m * n];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..n {
                            d[i * n + j] = probs[i * n + j] * scale;
                        }
                        d[i * n + t] -= scale;
                    }
                }
                accumulate(grads, *logits, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.leaf(Tensor::scalar(-2.0), true);
        let f = g.mul(x, y).unwrap();
        let grads = g.backward(f, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get_slice(x).unwrap(), &[-2.0]);
        assert_eq!(grads.get_slice(y).unwrap(), &[3.0]);
    }

    #[test]
    fn sum_rule_and_frozen_leaf() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let c = g.constant(Tensor::full(&[2, 2], 5.0));
        let s = g.add(x, c).unwrap();
        let f = g.sum(s);
        let grads = g.backward(f, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get_slice(x).unwrap(), &[1.0; 4]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn diamond_fan_out_sums_paths() {
        // f = a*b + a*c with b = 2x, c = x*x, a = x  ->  f = 2x^2 + x^3
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5), true);
        let b = g.scale(x, 2.0);
        let c = g.mul(x, x).unwrap();
        let ab = g.mul(x, b).unwrap();
        let ac = g.mul(x, c).unwrap();
        let f = g.add(ab, ac).unwrap();
        let grads = g.backward(f, &Tensor::scalar(1.0)).unwrap();
        // per-path: d(2x^2)/dx = 4x, d(x^3)/dx = 3x^2
        let manual = 4.0 * 1.5 + 3.0 * 1.5 * 1.5;
        assert!((grads.get_slice(x).unwrap()[0] - manual).abs() < 1e-12);
    }

    #[test]
    fn seed_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        let f = g.sum(x);
        assert!(matches!(
            g.backward(f, &Tensor::zeros(&[2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn layer_norm_degenerate_and_formula() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4], 3.0));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let gamma2 = g.constant(Tensor::full(&[2], 1.0));
        let beta2 = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma2, beta2, 1e-5).unwrap();
        // mean 2, var 1
        let inv = 1.0 / (1.0f64 + 1e-5).sqrt();
        let expect = [-inv, inv];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let z = g.constant(Tensor::new(vec![1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap());
        let y = g.layer_norm(z, gamma, beta, 1e-12).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(z)) < 1e-6);
        assert!(matches!(
            g.layer_norm(z, gamma, beta, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 0.0, 0.0, 0.0]).unwrap(), true);
        let p = g
            .masked_softmax_rows(s, &[true, false, true, true, true, true])
            .unwrap();
        let v = g.value(p);
        assert_eq!(v.at(0, 1), 0.0);
        assert!((v.at(0, 0) + v.at(0, 2) - 1.0).abs() < 1e-15);
        assert!(g.masked_softmax_rows(s, &[false; 6]).is_err());
    }
}
