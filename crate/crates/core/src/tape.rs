//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends one node to a [`Tape`] and returns a [`Var`]
//! handle to it. Because a node can only reference handles that already
//! exist, the node list is always in topological order and
//! [`Tape::backward`] simply walks it in reverse, accumulating adjoints.
//!
//! ```
//! use linknet::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::row_vector(&[1.0, -2.0, 3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! All ops view their inputs as matrices (`rows × cols`, where `cols` is the
//! product of the trailing extents). A scalar is any one-element tensor.

use crate::error::{Error, Result};
use crate::tensor::{softmax, sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Transpose(Var),
    Binary(BinaryOp, Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    MeanCols(Var),
    NegSqDist(Var, Var),
    Sum(Var),
    Scale(Var, f64),
    CrossEntropy(Var, Vec<usize>),
    BinaryCrossEntropy(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// A trainable leaf. Its gradient is always populated by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("matmul shape"),
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                out[i * n + j] = dot(ar, br);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("matmul_t shape"),
            Op::MatMulTransB(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = transpose_raw(self.value(x).data(), m, n);
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::new(vec![n, m], out).expect("transpose shape"),
            Op::Transpose(x),
            rg,
        )
    }

    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("elementwise", ta.shape(), tb.shape()));
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Adds a `[1 × n]` bias to every row of `[m × n]` input.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let tb = self.value(bias);
        if tb.len() != n {
            return Err(Error::shape(
                "add_row_bias",
                self.value(x).shape(),
                tb.shape(),
            ));
        }
        let b = tb.data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, bj) in out[i * n..(i + 1) * n].iter_mut().zip(&b) {
                *o += bj;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(
            Tensor::new(shape, out).expect("bias shape"),
            Op::AddRowBias(x, bias),
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Element-wise logistic function.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Softmax along each row, with max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(softmax(t.row(i)));
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("softmax shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::RowSoftmax(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_cols of no parts".into()))?;
        let m = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![m, total], out).expect("concat shape"),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::Invalid(format!(
                "slice_cols [{start}, {end}) of width {n}"
            )));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![m, end - start], out).expect("slice shape"),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Row `indices[r]` of `x` becomes row `r` of the output. Indices may
    /// repeat, which is how a single row is broadcast.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if indices.is_empty() {
            return Err(Error::Invalid("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Invalid(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), n], out).expect("gather shape"),
            Op::GatherRows(x, indices.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean of each row: `[m × n] -> [m × 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols() as f64;
        let out = (0..t.rows()).map(|i| t.row(i).iter().sum::<f64>() / n).collect();
        let value = Tensor::new(vec![t.rows(), 1], out).expect("mean shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::MeanCols(x), rg)
    }

    /// `out[i][j] = -‖a_i − b_j‖²` for row vectors of equal width.
    pub fn neg_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "neg_sq_dist",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                out[i * n + j] = -ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("dist shape"),
            Op::NegSqDist(a, b),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Mean over rows of softmax cross-entropy against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::Invalid(format!(
                "cross_entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Invalid(format!(
                "cross_entropy: target {bad} out of range for {n} classes"
            )));
        }
        let t = self.value(logits);
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropy(logits, targets.to_vec()),
            rg,
        ))
    }

    /// Summed two-term binary cross-entropy of probabilities against
    /// targets in `[0, 1]`. Terms with zero weight are skipped, so an
    /// exact match of 0/1 targets gives a loss of exactly zero.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(probs);
        if targets.len() != t.len() {
            return Err(Error::Invalid(format!(
                "binary_cross_entropy: {} targets for {} probabilities",
                targets.len(),
                t.len()
            )));
        }
        if targets.iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(Error::Invalid("binary_cross_entropy: target outside [0, 1]".into()));
        }
        let mut total = 0.0;
        for (&p, &y) in t.data().iter().zip(targets) {
            if y > 0.0 {
                total -= y * p.ln();
            }
            if y < 1.0 {
                total -= (1.0 - y) * (1.0 - p).ln();
            }
        }
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BinaryCrossEntropy(probs, targets.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that
    /// requires a gradient has one; leaves unreachable from `loss` get
    /// zeros. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let shape = node.value.shape().to_vec();
                    match g {
                        Some(g) => Tensor::new(shape, g).expect("grad shape"),
                        None => Tensor::zeros(&shape),
                    }
                })
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = out.cols();
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let bd = self.value(*b).data();
                    let acc = self.acc(grads, *a);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            acc[i * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let ad = self.value(*a).data();
                    let acc = self.acc(grads, *b);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                axpy(&mut acc[p * n..(p + 1) * n], av, gr);
                            }
                        }
                    }
                }
            }
            Op::MatMulTransB(a, b) => {
                let (m, k) = self.dims(*a);
                let n = out.cols();
                if self.requires_grad(*a) {
                    // dA = dC · B
                    let bd = self.value(*b).data();
                    let acc = self.acc(grads, *a);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                axpy(&mut acc[i * k..(i + 1) * k], gv, &bd[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
                if self.requires_grad(*b) {
                    // dB = dCᵀ · A
                    let ad = self.value(*a).data();
                    let acc = self.acc(grads, *b);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                axpy(&mut acc[j * k..(j + 1) * k], gv, &ad[i * k..(i + 1) * k]);
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.requires_grad(*x) {
                    let (m, n) = self.dims(*x);
                    let gt = transpose_raw(g, n, m);
                    add_into(self.acc(grads, *x), &gt);
                }
            }
            Op::Binary(op, a, b) => {
                match op {
                    BinaryOp::Add | BinaryOp::Sub => {
                        if self.requires_grad(*a) {
                            add_into(self.acc(grads, *a), g);
                        }
                        if self.requires_grad(*b) {
                            let sign = if *op == BinaryOp::Add { 1.0 } else { -1.0 };
                            axpy(self.acc(grads, *b), sign, g);
                        }
                    }
                    BinaryOp::Mul => {
                        if self.requires_grad(*a) {
                            let bd = self.value(*b).data();
                            let acc = self.acc(grads, *a);
                            for ((o, gv), bv) in acc.iter_mut().zip(g).zip(bd) {
                                *o += gv * bv;
                            }
                        }
                        if self.requires_grad(*b) {
                            let ad = self.value(*a).data();
                            let acc = self.acc(grads, *b);
                            for ((o, gv), av) in acc.iter_mut().zip(g).zip(ad) {
                                *o += gv * av;
                            }
                        }
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.requires_grad(*x) {
                    add_into(self.acc(grads, *x), g);
                }
                if self.requires_grad(*bias) {
                    let n = out.cols();
                    let acc = self.acc(grads, *bias);
                    for row in g.chunks(n) {
                        add_into(acc, row);
                    }
                }
            }
            Op::Relu(x) => {
                if self.requires_grad(*x) {
                    let xd = self.value(*x).data();
                    let acc = self.acc(grads, *x);
                    for ((o, gv), xv) in acc.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.requires_grad(*x) {
                    let acc = self.acc(grads, *x);
                    for ((o, gv), y) in acc.iter_mut().zip(g).zip(out.data()) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::RowSoftmax(x) => {
                if self.requires_grad(*x) {
                    let n = out.cols();
                    let acc = self.acc(grads, *x);
                    for ((accr, gr), yr) in acc.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let inner = dot(gr, yr);
                        for ((o, gv), y) in accr.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - inner);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let acc = self.acc(grads, *p);
                        for (accr, gr) in acc.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(accr, &gr[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).cols();
                    let w = out.cols();
                    let acc = self.acc(grads, *x);
                    for (accr, gr) in acc.chunks_mut(n).zip(g.chunks(w)) {
                        add_into(&mut accr[*start..*start + w], gr);
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                if self.requires_grad(*x) {
                    let n = out.cols();
                    let acc = self.acc(grads, *x);
                    for (&i, gr) in indices.iter().zip(g.chunks(n)) {
                        add_into(&mut acc[i * n..(i + 1) * n], gr);
                    }
                }
            }
            Op::Reshape(x) => {
                if self.requires_grad(*x) {
                    add_into(self.acc(grads, *x), g);
                }
            }
            Op::MeanCols(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).cols();
                    let acc = self.acc(grads, *x);
                    for (accr, gv) in acc.chunks_mut(n).zip(g) {
                        let share = gv / n as f64;
                        accr.iter_mut().for_each(|o| *o += share);
                    }
                }
            }
            Op::NegSqDist(a, b) => {
                let (m, k) = self.dims(*a);
                let n = out.cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (ga, gb) = (self.requires_grad(*a), self.requires_grad(*b));
                let mut da = vec![0.0; if ga { m * k } else { 0 }];
                let mut db = vec![0.0; if gb { n * k } else { 0 }];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            let diff = ad[i * k + p] - bd[j * k + p];
                            if ga {
                                da[i * k + p] -= 2.0 * gv * diff;
                            }
                            if gb {
                                db[j * k + p] += 2.0 * gv * diff;
                            }
                        }
                    }
                }
                if ga {
                    add_into(self.acc(grads, *a), &da);
                }
                if gb {
                    add_into(self.acc(grads, *b), &db);
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let gv = g[0];
                    self.acc(grads, *x).iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Scale(x, factor) => {
                if self.requires_grad(*x) {
                    axpy(self.acc(grads, *x), *factor, g);
                }
            }
            Op::CrossEntropy(logits, targets) => {
                if self.requires_grad(*logits) {
                    let t = self.value(*logits);
                    let n = t.cols();
                    let share = g[0] / targets.len() as f64;
                    let probs: Vec<Vec<f64>> = (0..t.rows()).map(|i| softmax(t.row(i))).collect();
                    let acc = self.acc(grads, *logits);
                    for (i, (&target, p)) in targets.iter().zip(probs).enumerate() {
                        for (c, pc) in p.into_iter().enumerate() {
                            let indicator = if c == target { 1.0 } else { 0.0 };
                            acc[i * n + c] += share * (pc - indicator);
                        }
                    }
                }
            }
            Op::BinaryCrossEntropy(probs, targets) => {
                if self.requires_grad(*probs) {
                    let pd = self.value(*probs).data();
                    let gv = g[0];
                    let acc = self.acc(grads, *probs);
                    for ((o, &p), &y) in acc.iter_mut().zip(pd).zip(targets) {
                        let mut d = 0.0;
                        if y > 0.0 {
                            d -= y / p;
                        }
                        if y < 1.0 {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        *o += gv * d;
                    }
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += v;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(orow, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[[1.5, -2.0, 0.25], [3.0, 4.0, -1.0]]);
        let i2 = tape.constant(Tensor::identity(2));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i2, xv).unwrap();
        assert_eq!(tape.value(y), &x);

        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[[0.0], [1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &Tensor::from_rows(&[[2.0], [4.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_analytic_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[0.0, 3f64.ln()]]));
        let y = tape.row_softmax(x);
        assert!(close(tape.value(y).data(), &[0.25, 0.75], 1e-15));
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let s = tape.row_softmax(z);
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
    }

    #[test]
    fn single_element_softmax_is_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[-37.0]]));
        let y = tape.row_softmax(x);
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn elementwise_trivia() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[[1.0, -2.0], [3.0, 0.5]]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let p = tape.mul(v, z).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0; 4]);
        let n = tape.neg(v);
        let s = tape.add(v, n).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0; 4]);
        let bad = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(tape.add(v, bad).is_err());
    }

    #[test]
    fn concat_single_part_is_identity_and_order_is_kept() {
        let mut tape = Tape::new();
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::from_rows(&[[5.0, 6.0, 7.0], [8.0, 9.0, 10.0]]);
        let av = tape.param(a.clone());
        let bv = tape.param(b);
        let one = tape.concat_cols(&[av]).unwrap();
        assert_eq!(tape.value(one), &a);
        let both = tape.concat_cols(&[av, bv]).unwrap();
        assert_eq!(
            tape.value(both).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
        let loss = tape.sum(both);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(av).unwrap().data(), &[1.0; 4]);
        assert_eq!(tape.grad(bv).unwrap().data(), &[1.0; 6]);

        let short = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(tape.concat_cols(&[av, short]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[[0.3, -1.0, 2.0]]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn trace_of_gram_gives_twice_x() {
        let mut tape = Tape::new();
        let x0 = Tensor::from_rows(&[[0.5, -1.5, 2.0]]);
        let x = tape.param(x0.clone());
        let gram = tape.matmul_t(x, x).unwrap();
        let loss = tape.sum(gram);
        tape.backward(loss).unwrap();
        let expected: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
        assert!(close(tape.grad(x).unwrap().data(), &expected, 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::from_rows(&[[1.0]]));
        let unused = tape.param(Tensor::from_rows(&[[1.0, 2.0]]));
        let c = tape.constant(Tensor::from_rows(&[[4.0]]));
        let loss = tape.mul(used, c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(used).unwrap().data(), &[4.0]);
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3, 10]));
        let loss = tape.cross_entropy(x, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).item() - 10f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(x, &[0, 4, 10]).is_err());
    }

    #[test]
    fn bce_edge_values() {
        let mut tape = Tape::new();
        let exact = tape.constant(Tensor::row_vector(&[1.0, 0.0, 1.0]));
        let l = tape.binary_cross_entropy(exact, &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let half = tape.constant(Tensor::full(&[1, 6], 0.5));
        let l = tape
            .binary_cross_entropy(half, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
            .unwrap();
        assert!((tape.value(l).item() - 6.0 * 2f64.ln()).abs() < 1e-14);
    }
}
