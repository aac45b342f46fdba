//! Reverse-mode differentiation over a fixed set of tensor ops.
//!
//! A [`Tape`] records every op of one forward computation in execution
//! order, which is therefore a topological order. [`Tape::backward`] walks
//! the record once in reverse and returns one gradient per registered
//! parameter slot.

use crate::error::{Error, Result};
use crate::tensor::{self, axpy, matmul_dims, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    /// softmax down each column of an `[m, d]` matrix
    SoftmaxColumns {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        offset: usize,
    },
    Gather {
        table: Var,
        row: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        gold: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient of the loss with respect to each registered parameter, in
/// registration order.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Tensor>);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant: receives no gradient slot.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Input });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter in the next gradient slot.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let v = self.input(value.clone());
        self.nodes[v.0].op = Op::Param;
        self.params.push(v);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(av.shape(), bv.shape())?;
        let out = av.matmul(bv)?;
        self.push(out, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).scale(factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).tanh();
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).exp()?;
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_vector() {
            return Err(Error::Dimension(format!(
                "softmax expects a vector, got {:?}",
                x.shape()
            )));
        }
        let out = x.softmax()?;
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// Softmax over the rows of an `[m, d]` matrix, independently for each
    /// of the `d` columns.
    pub fn softmax_columns(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = match *xv.shape() {
            [r, c] => (r, c),
            _ => {
                return Err(Error::Dimension(format!(
                    "softmax_columns expects a matrix, got {:?}",
                    xv.shape()
                )))
            }
        };
        let data = xv.data();
        let mut out = vec![0.0; rows * cols];
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| data[r * cols + c]).collect();
            for (r, p) in tensor::softmax(&col).into_iter().enumerate() {
                out[r * cols + c] = p;
            }
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        self.push(out, Op::SoftmaxColumns { x, rows, cols }, "softmax_columns")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Stacks equally long vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let width = rows.first().map(|&r| self.value(r).len());
        if let Some(bad) = rows
            .iter()
            .map(|&r| self.value(r))
            .find(|t| !t.is_vector() || Some(t.len()) != width)
        {
            return Err(Error::Dimension(format!(
                "stack expects vectors of length {width:?}, got {:?}",
                bad.shape()
            )));
        }
        let flat = self.concat(rows)?;
        let width = width.unwrap_or(0);
        // the concat node carries a vector shape; restate it as a matrix
        let node = &mut self.nodes[flat.0];
        node.value = Tensor::from_parts(
            vec![rows.len(), width],
            std::mem::replace(&mut node.value, Tensor::scalar(0.0)).into_data(),
        );
        Ok(flat)
    }

    /// Contiguous sub-vector `x[offset..offset + len]` of the flattened data.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || offset + len > xv.len() {
            return Err(Error::Dimension(format!(
                "slice [{offset}, {}) out of range for {:?}",
                offset + len,
                xv.shape()
            )));
        }
        let out = Tensor::from_parts(vec![len], xv.data()[offset..offset + len].to_vec());
        self.push(out, Op::Slice { x, offset }, "slice")
    }

    /// Row `row` of a matrix as a vector.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        match shape[..] {
            [r, c] if row < r => self.slice(x, row * c, c),
            _ => Err(Error::Dimension(format!("row {row} out of range for {shape:?}"))),
        }
    }

    /// Embedding lookup: row `row` of `table`, with scatter-add backward.
    pub fn gather(&mut self, table: Var, row: usize) -> Result<Var> {
        let shape = self.value(table).shape().to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::Dimension(format!(
                "gather expects a matrix table, got {shape:?}"
            )));
        };
        if row >= rows {
            return Err(Error::Vocab { id: row, size: rows });
        }
        let data = self.value(table).data()[row * cols..(row + 1) * cols].to_vec();
        self.push(
            Tensor::from_parts(vec![cols], data),
            Op::Gather { table, row },
            "gather",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    /// `-log softmax(logits)[gold]`, evaluated with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let lv = self.value(logits);
        if !lv.is_vector() || gold >= lv.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: gold {gold} for logits {:?}",
                lv.shape()
            )));
        }
        let loss = tensor::log_sum_exp(lv.data()) - lv.data()[gold];
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, gold }, "cross_entropy")
    }

    /// Sums several nodes of identical shape.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Backpropagates from the scalar `loss` and returns one gradient per
    /// parameter slot; parameters off every path get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let (av, bv) = (self.value(a).data(), self.value(b).data());
                    if n == 1 {
                        // matrix-vector product: dA += g·bᵀ, db += Aᵀ·g
                        let da = self.grad_buf(&mut grads, a);
                        for (row, &gi) in da.chunks_exact_mut(k).zip(&g) {
                            axpy(gi, bv, row);
                        }
                        let db = self.grad_buf(&mut grads, b);
                        for (row, &gi) in av.chunks_exact(k).zip(&g) {
                            axpy(gi, row, db);
                        }
                    } else {
                        // dA[m×k] += dC[m×n] · Bᵀ
                        let da = self.grad_buf(&mut grads, a);
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            let row = &mut da[i * k..(i + 1) * k];
                            for (p, r) in row.iter_mut().enumerate() {
                                *r += tensor::dot(gi, &bv[p * n..(p + 1) * n]);
                            }
                        }
                        // dB[k×n] += Aᵀ · dC
                        let db = self.grad_buf(&mut grads, b);
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                                axpy(aip, gi, &mut db[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                &Op::Add(a, b) => {
                    axpy(1.0, &g, self.grad_buf(&mut grads, a));
                    axpy(1.0, &g, self.grad_buf(&mut grads, b));
                }
                &Op::Sub(a, b) => {
                    axpy(1.0, &g, self.grad_buf(&mut grads, a));
                    axpy(-1.0, &g, self.grad_buf(&mut grads, b));
                }
                &Op::Mul(a, b) => {
                    let bv = self.value(b).data();
                    for ((d, &gi), &bi) in self.grad_buf(&mut grads, a).iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                    let av = self.value(a).data();
                    for ((d, &gi), &ai) in self.grad_buf(&mut grads, b).iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
                &Op::Scale(a, factor) => axpy(factor, &g, self.grad_buf(&mut grads, a)),
                &Op::Tanh(a) => {
                    let y = node.value.data();
                    for ((d, &gi), &t) in self.grad_buf(&mut grads, a).iter_mut().zip(&g).zip(y) {
                        *d += gi * (1.0 - t * t);
                    }
                }
                &Op::Sigmoid(a) => {
                    let y = node.value.data();
                    for ((d, &gi), &s) in self.grad_buf(&mut grads, a).iter_mut().zip(&g).zip(y) {
                        *d += gi * s * (1.0 - s);
                    }
                }
                &Op::Exp(a) => {
                    let y = node.value.data();
                    for ((d, &gi), &e) in self.grad_buf(&mut grads, a).iter_mut().zip(&g).zip(y) {
                        *d += gi * e;
                    }
                }
                &Op::Softmax(a) => {
                    let y = node.value.data();
                    let inner = tensor::dot(&g, y);
                    for ((d, &gi), &yi) in self.grad_buf(&mut grads, a).iter_mut().zip(&g).zip(y) {
                        *d += yi * (gi - inner);
                    }
                }
                &Op::SoftmaxColumns { x, rows, cols } => {
                    let y = node.value.data();
                    let dx = self.grad_buf(&mut grads, x);
                    for c in 0..cols {
                        let inner: f64 = (0..rows).map(|r| g[r * cols + c] * y[r * cols + c]).sum();
                        for r in 0..rows {
                            let idx = r * cols + c;
                            dx[idx] += y[idx] * (g[idx] - inner);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        axpy(1.0, &g[offset..offset + len], self.grad_buf(&mut grads, p));
                        offset += len;
                    }
                }
                &Op::Slice { x, offset } => {
                    let dx = self.grad_buf(&mut grads, x);
                    axpy(1.0, &g, &mut dx[offset..offset + g.len()]);
                }
                &Op::Gather { table, row } => {
                    let cols = g.len();
                    let dt = self.grad_buf(&mut grads, table);
                    axpy(1.0, &g, &mut dt[row * cols..(row + 1) * cols]);
                }
                &Op::Sum(x) => {
                    for d in self.grad_buf(&mut grads, x).iter_mut() {
                        *d += g[0];
                    }
                }
                &Op::CrossEntropy { logits, gold } => {
                    let p = tensor::softmax(self.value(logits).data());
                    let dl = self.grad_buf(&mut grads, logits);
                    for (j, (d, pj)) in dl.iter_mut().zip(p).enumerate() {
                        let onehot = if j == gold { 1.0 } else { 0.0 };
                        *d += g[0] * (pj - onehot);
                    }
                }
            }
        }

        let out = self
            .params
            .iter()
            .map(|&p| {
                let shape = self.value(p).shape().to_vec();
                match grads.get_mut(p.0).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        Ok(Gradients(out))
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()])
    }
}
