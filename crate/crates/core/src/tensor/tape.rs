//! Wengert tape: records differentiable operations in execution order and
//! replays them in reverse to accumulate gradients.
//!
//! Values live in an arena owned by the tape; [`Var`] is a copyable handle.
//! Recording stops after [`Tape::backward`]; gradients stay readable until
//! the tape is dropped. Gradients sum at fan-out points.

use super::{check_finite, elu, elu_prime, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
}

enum Op {
    MatMul { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    AddScalar { x: Var, out: Var },
    MulScalar { x: Var, c: f64, out: Var },
    AddRow { x: Var, row: Var, out: Var },
    Exp { x: Var, out: Var },
    Log { x: Var, out: Var },
    Tanh { x: Var, out: Var },
    Elu { x: Var, out: Var },
    Sum { x: Var, out: Var },
    SoftmaxCrossEntropy {
        logits: Var,
        softmax: Vec<f64>,
        labels: Vec<usize>,
        out: Var,
    },
    ConcatCols { a: Var, b: Var, out: Var },
    SliceCols { x: Var, out: Var, start: usize, len: usize },
    PermuteCols { x: Var, out: Var, perm: Vec<usize> },
}

/// Ordered record of executed differentiable operations.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Vec<f64>>,
    done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            done: false,
        }
    }

    /// Register a tensor as a leaf (input or parameter). Data is copied;
    /// later mutation of the source does not affect the recorded value.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.guard()?;
        check_finite(t.data(), "tape leaf")?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec()))
    }

    /// Leaf from raw parts.
    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.guard()?;
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::dimension(format!(
                "leaf shape {:?} needs {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        check_finite(&data, "tape leaf")?;
        Ok(self.push(shape.to_vec(), data))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Copy a recorded value out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
            .expect("tape nodes hold validated tensors")
    }

    fn guard(&self) -> Result<()> {
        if self.done {
            return Err(Error::State(
                "tape already consumed by backward".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.nodes.push(Node { shape, data });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: impl FnOnce(Var) -> Op, name: &str) -> Result<Var> {
        check_finite(&data, name)?;
        let out = self.push(shape, data);
        self.ops.push(op(out));
        Ok(out)
    }

    fn dims2(&self, v: Var, name: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dimension(format!("{name}: expected rank-2, got shape {s:?}"))),
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul: lhs is {m}x{k}, rhs is {k2}x{n}"
            )));
        }
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.record(vec![m, n], out, |o| Op::MatMul { a, b, out: o }, "matmul")
    }

    fn binary_equal_shape(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: impl FnOnce(Var) -> Op) -> Result<Var> {
        self.guard()?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dimension(format!(
                "{name}: shapes {:?} and {:?} differ (only equal-shape and scalar broadcast supported)",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.record(shape, data, op, name)
    }

    /// Elementwise sum of two equal-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_equal_shape(a, b, "add", |x, y| x + y, |o| Op::Add { a, b, out: o })
    }

    /// Elementwise difference of two equal-shape tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_equal_shape(a, b, "sub", |x, y| x - y, |o| Op::Sub { a, b, out: o })
    }

    /// Hadamard product of two equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_equal_shape(a, b, "mul", |x, y| x * y, |o| Op::Mul { a, b, out: o })
    }

    /// Add a scalar constant to every element.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.guard()?;
        if !c.is_finite() {
            return Err(Error::numeric(format!("add_scalar: non-finite constant {c}")));
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.record(shape, data, |o| Op::AddScalar { x, out: o }, "add_scalar")
    }

    /// Multiply every element by a scalar constant.
    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.guard()?;
        if !c.is_finite() {
            return Err(Error::numeric(format!("mul_scalar: non-finite constant {c}")));
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.record(shape, data, |o| Op::MulScalar { x, c, out: o }, "mul_scalar")
    }

    /// Add a length-`n` row vector to every row of a `[rows, n]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.dims2(x, "add_row lhs")?;
        let rshape = self.nodes[row.0].shape.clone();
        if rshape != [c] {
            return Err(Error::dimension(format!(
                "add_row: row shape {rshape:?} does not match {c} columns"
            )));
        }
        let rv = self.nodes[row.0].data.clone();
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + rv[i % c])
            .collect();
        self.record(vec![r, c], data, |o| Op::AddRow { x, row, out: o }, "add_row")
    }

    fn unary(&mut self, x: Var, name: &str, f: impl Fn(f64) -> f64, op: impl FnOnce(Var) -> Op) -> Result<Var> {
        self.guard()?;
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| f(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.record(shape, data, op, name)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, |o| Op::Exp { x, out: o })
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.nodes[x.0].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive input {v}")));
        }
        self.unary(x, "log", f64::ln, |o| Op::Log { x, out: o })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, |o| Op::Tanh { x, out: o })
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "elu", elu, |o| Op::Elu { x, out: o })
    }

    /// Sum of all elements, as a scalar of shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.record(vec![1], vec![s], |o| Op::Sum { x, out: o }, "sum")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// per-row max subtraction. `logits` is `[batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.guard()?;
        let (batch, classes) = self.dims2(logits, "softmax_cross_entropy logits")?;
        if batch == 0 {
            return Err(Error::contract("softmax_cross_entropy: empty batch"));
        }
        if labels.len() != batch {
            return Err(Error::dimension(format!(
                "softmax_cross_entropy: {} labels for batch of {}",
                labels.len(),
                batch
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::Index(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        let lv = &self.nodes[logits.0].data;
        let mut softmax = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for i in 0..batch {
            let row = &lv[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                softmax[i * classes + j] = e;
                denom += e;
            }
            for j in 0..classes {
                softmax[i * classes + j] /= denom;
            }
            // -log softmax[label] = max + log(denom) - logit[label]
            loss += max + denom.ln() - row[labels[i]];
        }
        loss /= batch as f64;
        let labels = labels.to_vec();
        self.record(
            vec![1],
            vec![loss],
            |o| Op::SoftmaxCrossEntropy { logits, softmax, labels, out: o },
            "softmax_cross_entropy",
        )
    }

    /// Concatenate two rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let (ra, ca) = self.dims2(a, "concat_cols lhs")?;
        let (rb, cb) = self.dims2(b, "concat_cols rhs")?;
        if ra != rb {
            return Err(Error::dimension(format!(
                "concat_cols: {ra} rows vs {rb} rows"
            )));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&self.nodes[a.0].data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[i * cb..(i + 1) * cb]);
        }
        self.record(vec![ra, ca + cb], data, |o| Op::ConcatCols { a, b, out: o }, "concat_cols")
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::dimension(format!(
                "slice_cols: range {start}..{} of {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[x.0].data[i * c + start..i * c + start + len]);
        }
        self.record(vec![r, len], data, |o| Op::SliceCols { x, out: o, start, len }, "slice_cols")
    }

    /// Reorder columns: output column `j` takes input column `perm[j]`.
    pub fn permute_cols(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.dims2(x, "permute_cols")?;
        if !is_permutation(perm, c) {
            return Err(Error::contract(format!(
                "permute_cols: not a permutation of {c} columns"
            )));
        }
        let xv = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for (j, &p) in perm.iter().enumerate() {
                data[i * c + j] = xv[i * c + p];
            }
        }
        let perm = perm.to_vec();
        self.record(vec![r, c], data, |o| Op::PermuteCols { x, out: o, perm }, "permute_cols")
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of every recorded node are
    /// accumulated (summed at fan-out) and stay readable via [`Tape::grad`];
    /// the operation record is cleared and the tape stops recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.guard()?;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss has shape {:?}, expected a scalar",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        // Ops were recorded in execution order, so the reverse order is a
        // valid reverse-topological visit.
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backprop(op);
        }
        self.done = true;
        for (i, g) in self.grads.iter().enumerate() {
            check_finite(g, &format!("gradient of node {i}"))?;
        }
        Ok(())
    }

    fn backprop(&mut self, op: &Op) {
        match *op {
            Op::MatMul { a, b, out } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let go = std::mem::take(&mut self.grads[out.0]);
                // dA = dOut · Bᵀ
                {
                    let bv = &self.nodes[b.0].data;
                    let ga = &mut self.grads[a.0];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &go[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                // dB = Aᵀ · dOut
                {
                    let av = &self.nodes[a.0].data;
                    let gb = &mut self.grads[b.0];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &go[i * n..(i + 1) * n];
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += aip * grow[j];
                            }
                        }
                    }
                }
                self.grads[out.0] = go;
            }
            Op::Add { a, b, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for (i, g) in go.iter().enumerate() {
                    self.grads[a.0][i] += g;
                }
                for (i, g) in go.iter().enumerate() {
                    self.grads[b.0][i] += g;
                }
                self.grads[out.0] = go;
            }
            Op::Sub { a, b, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for (i, g) in go.iter().enumerate() {
                    self.grads[a.0][i] += g;
                }
                for (i, g) in go.iter().enumerate() {
                    self.grads[b.0][i] -= g;
                }
                self.grads[out.0] = go;
            }
            Op::Mul { a, b, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for i in 0..go.len() {
                    let bv = self.nodes[b.0].data[i];
                    self.grads[a.0][i] += go[i] * bv;
                }
                for i in 0..go.len() {
                    let av = self.nodes[a.0].data[i];
                    self.grads[b.0][i] += go[i] * av;
                }
                self.grads[out.0] = go;
            }
            Op::AddScalar { x, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for (i, g) in go.iter().enumerate() {
                    self.grads[x.0][i] += g;
                }
                self.grads[out.0] = go;
            }
            Op::MulScalar { x, c, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for (i, g) in go.iter().enumerate() {
                    self.grads[x.0][i] += c * g;
                }
                self.grads[out.0] = go;
            }
            Op::AddRow { x, row, out } => {
                let c = self.nodes[row.0].data.len();
                let go = std::mem::take(&mut self.grads[out.0]);
                for (i, g) in go.iter().enumerate() {
                    self.grads[x.0][i] += g;
                }
                for (i, g) in go.iter().enumerate() {
                    self.grads[row.0][i % c] += g;
                }
                self.grads[out.0] = go;
            }
            Op::Exp { x, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for i in 0..go.len() {
                    let y = self.nodes[out.0].data[i];
                    self.grads[x.0][i] += go[i] * y;
                }
                self.grads[out.0] = go;
            }
            Op::Log { x, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for i in 0..go.len() {
                    let v = self.nodes[x.0].data[i];
                    self.grads[x.0][i] += go[i] / v;
                }
                self.grads[out.0] = go;
            }
            Op::Tanh { x, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for i in 0..go.len() {
                    let y = self.nodes[out.0].data[i];
                    self.grads[x.0][i] += go[i] * (1.0 - y * y);
                }
                self.grads[out.0] = go;
            }
            Op::Elu { x, out } => {
                let go = std::mem::take(&mut self.grads[out.0]);
                for i in 0..go.len() {
                    let v = self.nodes[x.0].data[i];
                    self.grads[x.0][i] += go[i] * elu_prime(v);
                }
                self.grads[out.0] = go;
            }
            Op::Sum { x, out } => {
                let g = self.grads[out.0][0];
                for v in self.grads[x.0].iter_mut() {
                    *v += g;
                }
            }
            Op::SoftmaxCrossEntropy { logits, ref softmax, ref labels, out } => {
                let g = self.grads[out.0][0];
                let batch = labels.len();
                let classes = softmax.len() / batch;
                let scale = g / batch as f64;
                let gl = &mut self.grads[logits.0];
                for i in 0..batch {
                    for j in 0..classes {
                        let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                        gl[i * classes + j] += scale * (softmax[i * classes + j] - indicator);
                    }
                }
            }
            Op::ConcatCols { a, b, out } => {
                let ca = self.nodes[a.0].shape[1];
                let cb = self.nodes[b.0].shape[1];
                let rows = self.nodes[a.0].shape[0];
                let go = std::mem::take(&mut self.grads[out.0]);
                for i in 0..rows {
                    for j in 0..ca {
                        self.grads[a.0][i * ca + j] += go[i * (ca + cb) + j];
                    }
                    for j in 0..cb {
                        self.grads[b.0][i * cb + j] += go[i * (ca + cb) + ca + j];
                    }
                }
                self.grads[out.0] = go;
            }
            Op::SliceCols { x, out, start, len } => {
                let c = self.nodes[x.0].shape[1];
                let rows = self.nodes[x.0].shape[0];
                let go = std::mem::take(&mut self.grads[out.0]);
                for i in 0..rows {
                    for j in 0..len {
                        self.grads[x.0][i * c + start + j] += go[i * len + j];
                    }
                }
                self.grads[out.0] = go;
            }
            Op::PermuteCols { x, out, ref perm } => {
                let c = perm.len();
                let rows = self.nodes[x.0].shape[0];
                let go = std::mem::take(&mut self.grads[out.0]);
                for i in 0..rows {
                    for (j, &p) in perm.iter().enumerate() {
                        self.grads[x.0][i * c + p] += go[i * c + j];
                    }
                }
                self.grads[out.0] = go;
            }
        }
    }

    /// Gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        if !self.done {
            return Err(Error::State("grad queried before backward".into()));
        }
        Ok(&self.grads[v.0])
    }

    /// Write the gradient of `v` into `t.grad`; `t` must require grad and
    /// match the node's shape.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if !t.requires_grad_flag() {
            return Err(Error::contract(
                "write_grad target does not require grad",
            ));
        }
        if t.shape() != self.shape(v) {
            return Err(Error::dimension(format!(
                "write_grad: node shape {:?} vs tensor shape {:?}",
                self.shape(v),
                t.shape()
            )));
        }
        t.set_grad(self.grad(v)?.to_vec())
    }
}

fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
        let m = tape.leaf(&t(&[3, 2], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = tape.leaf(&t(&[2, 1], &[0., 1.])).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[4, 2]).unwrap()).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, -1.0, 2.0])).unwrap();
        let y = tape.elu(x).unwrap();
        assert_eq!(tape.value(y)[0], 0.0);
        assert_abs_diff_eq!(tape.value(y)[1], -0.6321205588285577, epsilon = 1e-15);
        assert_eq!(tape.value(y)[2], 2.0);

        let z = tape.leaf(&Tensor::zeros(&[4]).unwrap()).unwrap();
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.value(e), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert_abs_diff_eq!(tape.value(loss)[0], std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_is_overflow_stable() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 2], &[1000.0, 0.0])).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss)[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_direct_formula() {
        // -log softmax([1,2,3])[2], computed independently from the definition.
        let logits = [1.0f64, 2.0, 3.0];
        let denom: f64 = logits.iter().map(|v| (v - 3.0).exp()).sum();
        let expect = -((3.0f64 - 3.0).exp() / denom).ln();
        let mut tape = Tape::new();
        let l = tape.leaf(&t(&[1, 3], &logits)).unwrap();
        let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
        assert_abs_diff_eq!(tape.value(loss)[0], expect, epsilon = 1e-14);
        assert_abs_diff_eq!(tape.value(loss)[0], 0.40760596444438064, epsilon = 1e-14);
    }

    #[test]
    fn cross_entropy_bad_label_is_index_error() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[1, 2]).unwrap()).unwrap();
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let w = t(&[3], &[5.0, -2.0, 0.5]).requires_grad(true);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w).unwrap();
        // sum() needs rank-2 for slice-based ops but works on any shape.
        let loss = tape.sum(wv).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wv).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let w = t(&[2], &[1.0, 2.0]).requires_grad(true);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w).unwrap();
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wv).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3]).unwrap()).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_refuses_ops_after_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1]).unwrap()).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(
            tape.leaf(&Tensor::zeros(&[1]).unwrap()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x + x) => grad = 2 per element
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[3.0, 4.0])).unwrap();
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn write_grad_round_trip() {
        let mut w = t(&[2], &[1.0, 2.0]).requires_grad(true);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w).unwrap();
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.write_grad(wv, &mut w).unwrap();
        assert_eq!(w.grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn permute_and_slice_round_trip_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let p = tape.permute_cols(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p), &[3., 1., 2., 6., 4., 5.]);
        let s = tape.slice_cols(p, 1, 2).unwrap();
        assert_eq!(tape.value(s), &[1., 2., 4., 5.]);
        let c = tape.concat_cols(s, s).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
    }
}
