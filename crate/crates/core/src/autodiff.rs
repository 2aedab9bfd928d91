//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep. A fresh tape is built for every forward pass.
//!
//! ```
//! use graphonomy::autodiff::Tape;
//! use graphonomy::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
//! let b = tape.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
//! let c = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(c);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    /// Slope used by the attention scorer when none is configured.
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    fn forward(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x < 0.0 {
                    s * x
                } else {
                    x
                }
            }
            Activation::Identity => x,
        }
    }

    // Subgradient at 0: 0 for relu, slope for leaky.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    OuterAdd(Var, Var),
    Activate(Var, Activation),
    SoftmaxRows(Var),
    NormalizeRows(Var, f64),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not depend on any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_matrix("add_row")?;
        let rv = self.value(row);
        if rv.numel() != n {
            return Err(Error::shape("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += rv.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a: m×1`, `b: n×1`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, ac) = av.expect_matrix("outer_add")?;
        let (n, bc) = bv.expect_matrix("outer_add")?;
        if ac != 1 || bc != 1 {
            return Err(Error::shape("outer_add", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(av.data()[i] + bv.data()[j]);
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::OuterAdd(a, b), ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu(s) = kind {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Input(format!("leaky slope {s} outside (0, 1)")));
            }
        }
        let value = self.value(x).map(|v| kind.forward(v));
        let ng = self.ng(x);
        Ok(self.push(value, Op::Activate(x, kind), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
            .expect("relu has no failure mode")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries
    /// come out as exactly 0. A row with no allowed entry is a contract error.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_matrix("softmax_rows")?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::shape("softmax_rows mask", xv.shape(), &[mask.len()]));
            }
        }
        let allowed = |i: usize, j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(i, j) {
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "softmax row {i} has no allowed entries"
                )));
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(i, j) {
                    let e = (v - max).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SoftmaxRows(x), ng))
    }

    /// Scales every row to unit L2 norm, dividing by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_matrix("normalize_rows")?;
        let mut out = xv.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::NormalizeRows(x, eps), ng))
    }

    /// Concatenates along the last axis. Leading dimensions must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.is_empty() || ash.len() != bsh.len() || ash[..ash.len() - 1] != bsh[..bsh.len() - 1]
        {
            return Err(Error::shape("concat_channels", ash, bsh));
        }
        let c1 = *ash.last().unwrap();
        let c2 = *bsh.last().unwrap();
        let lead: usize = ash[..ash.len() - 1].iter().product();
        let mut data = Vec::with_capacity(lead * (c1 + c2));
        for r in 0..lead {
            data.extend_from_slice(&av.data()[r * c1..(r + 1) * c1]);
            data.extend_from_slice(&bv.data()[r * c2..(r + 1) * c2]);
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = c1 + c2;
        let value = Tensor::new(shape, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_matrix("slice_rows")?;
        if start > end || end > m {
            return Err(Error::Input(format!(
                "row slice {start}..{end} out of range for {m} rows"
            )));
        }
        let value = Tensor::new(vec![end - start, n], xv.data()[start * n..end * n].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceRows(x, start), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (p, l) = lv.expect_matrix("cross_entropy")?;
        if targets.len() != p {
            return Err(Error::Input(format!(
                "cross_entropy: {p} rows but {} targets",
                targets.len()
            )));
        }
        if p == 0 {
            return Err(Error::Input("cross_entropy over zero rows".into()));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= l {
                return Err(Error::Input(format!(
                    "target index {t} out of range for {l} classes"
                )));
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / p as f64);
        let ng = self.ng(logits);
        Ok(self.push(value, Op::CrossEntropy(logits, targets.to_vec()), ng))
    }

    /// Sign pattern of every rectifier input on the tape. Two evaluations of
    /// the same program with equal patterns lie on the same linear piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Activate(x, kind) = node.op {
                if kind != Activation::Identity {
                    out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
                }
            }
        }
        out
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.ng(a) {
                    let da = g.matmul(&self.value(b).transpose()?)?;
                    self.accumulate(grads, a, da);
                }
                if self.ng(b) {
                    let db = self.value(a).transpose()?.matmul(g)?;
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Transpose(a) => {
                self.accumulate(grads, a, g.transpose()?);
            }
            &Op::Reshape(a) => {
                let da = g.reshape(self.value(a).shape())?;
                self.accumulate(grads, a, da);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Scale(a, s) => {
                self.accumulate(grads, a, g.scale(s));
            }
            &Op::AddRow(x, row) => {
                self.accumulate(grads, x, g.clone());
                if self.ng(row) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for (j, d) in dr.iter_mut().enumerate() {
                            *d += g.data()[i * n + j];
                        }
                    }
                    let shape = self.value(row).shape().to_vec();
                    self.accumulate(grads, row, Tensor::new(shape, dr)?);
                }
            }
            &Op::OuterAdd(a, b) => {
                let (m, n) = (g.rows(), g.cols());
                if self.ng(a) {
                    let da: Vec<f64> = (0..m).map(|i| g.row(i).iter().sum()).collect();
                    self.accumulate(grads, a, Tensor::new(vec![m, 1], da)?);
                }
                if self.ng(b) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for (j, d) in db.iter_mut().enumerate() {
                            *d += g.data()[i * n + j];
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vec![n, 1], db)?);
                }
            }
            &Op::Activate(x, kind) => {
                let xv = self.value(x);
                let dx = g.zip_map(xv, |gi, xi| gi * kind.derivative(xi))?;
                self.accumulate(grads, x, dx);
            }
            &Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::new(vec![m, n], dx)?);
            }
            &Op::NormalizeRows(x, eps) => {
                let xv = self.value(x);
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let xr = xv.row(i);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yr = y.row(i);
                    let gr = g.row(i);
                    if norm > eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..n {
                            dx[i * n + j] = gr[j] / eps;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(vec![m, n], dx)?);
            }
            &Op::ConcatCols(a, b) => {
                let c1 = *self.value(a).shape().last().unwrap();
                let c2 = *self.value(b).shape().last().unwrap();
                let lead = g.numel() / (c1 + c2).max(1);
                let mut da = Vec::with_capacity(lead * c1);
                let mut db = Vec::with_capacity(lead * c2);
                for r in 0..lead {
                    let row = &g.data()[r * (c1 + c2)..(r + 1) * (c1 + c2)];
                    da.extend_from_slice(&row[..c1]);
                    db.extend_from_slice(&row[c1..]);
                }
                if self.ng(a) {
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(grads, a, Tensor::new(shape, da)?);
                }
                if self.ng(b) {
                    let shape = self.value(b).shape().to_vec();
                    self.accumulate(grads, b, Tensor::new(shape, db)?);
                }
            }
            &Op::SliceRows(x, start) => {
                let xv = self.value(x);
                let n = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, x, dx);
            }
            &Op::Sum(x) => {
                let gs = g.item();
                self.accumulate(grads, x, Tensor::filled(self.value(x).shape(), gs));
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = self.value(*logits);
                let (p, l) = (lv.rows(), lv.cols());
                let scale = g.item() / p as f64;
                let mut d = vec![0.0; p * l];
                for (i, &t) in targets.iter().enumerate() {
                    let row = lv.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..l {
                        d[i * l + j] = (row[j] - max).exp() / z * scale;
                    }
                    d[i * l + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![p, l], d)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn central_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let v = t.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let r = t.matmul(i, v).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 4.0]);

        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // d/dA sum(A·B) = 1·Bᵀ; every row is the row-sum vector of B = [11, 15].
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let a0 = Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.7]]);
        let numeric = central_diff(|a| a.matmul(&b).unwrap().sum(), &a0, 1e-5);
        for (i, v) in numeric.data().iter().enumerate() {
            let want = if i % 2 == 0 { 11.0 } else { 15.0 };
            assert!(close(*v, want, 1e-6), "{v} vs {want}");
        }

        let mut t = Tape::new();
        let a = t.param(a0);
        let bv = t.constant(b);
        let c = t.matmul(a, bv).unwrap();
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert!(g.get(bv).is_none());
    }

    #[test]
    fn relu_and_leaky_values_and_subgradients() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![-1.0, 0.0]).unwrap());
        let l = t.leaky_relu(x, 0.2).unwrap();
        assert!(close(t.value(l).data()[0], -0.2, 1e-15));
        let s = t.sum(l);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.2, 0.2]);
    }

    #[test]
    fn relu_gradient_against_upstream_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn leaky_slope_must_be_in_unit_interval() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[1]));
        assert!(t.leaky_relu(x, 0.0).is_err());
        assert!(t.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        let sa = t.softmax_rows(a).unwrap();
        assert_eq!(t.value(sa).data(), &[0.5, 0.5]);

        let b = t.constant(Tensor::from_rows(&[&[1000.0, 1000.0]]));
        let sb = t.softmax_rows(b).unwrap();
        assert_eq!(t.value(sb).data(), &[0.5, 0.5]);

        let c = t.constant(Tensor::from_rows(&[&[2f64.ln(), 0.0]]));
        let sc = t.softmax_rows(c).unwrap();
        assert!(close(t.value(sc).data()[0], 2.0 / 3.0, 1e-15));
        assert!(close(t.value(sc).data()[1], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn fully_masked_softmax_row_is_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 2]));
        let err = t.masked_softmax_rows(a, Some(&[true, false, false, false]));
        assert!(matches!(err, Err(Error::Contract(_))));
        let ok = t
            .masked_softmax_rows(a, Some(&[true, false, false, true]))
            .unwrap();
        assert_eq!(t.value(ok).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);

        let e = t.constant(Tensor::zeros(&[0]));
        let same = t.concat_channels(a, e).unwrap();
        assert_eq!(t.value(same), t.value(a));

        // Upstream [g1, g2, g3] splits into [g1, g2] and [g3].
        let w = t.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let c2 = t.reshape(c, &[1, 3]).unwrap();
        let y = t.matmul(c2, w).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn concat_rejects_leading_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(t.concat_channels(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[10.0, -10.0]]));
        let la = t.cross_entropy(a, &[0]).unwrap();
        assert!(t.value(la).item() < 1e-4);

        let b = t.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        let lb = t.cross_entropy(b, &[0]).unwrap();
        assert!(close(t.value(lb).item(), 2f64.ln(), 1e-15));

        let c = t.constant(Tensor::filled(&[3, 5], 0.7));
        let lc = t.cross_entropy(c, &[0, 4, 2]).unwrap();
        assert!(close(t.value(lc).item(), 5f64.ln(), 1e-14));

        assert!(matches!(t.cross_entropy(b, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn backward_of_sum_is_ones_and_reuse_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::filled(&[2, 3], 0.25));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut t = Tape::new();
        let x = t.param(Tensor::filled(&[2, 3], 0.25));
        let xx = t.concat_channels(x, x).unwrap();
        let s = t.sum(xx);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn composite_relu_matmul_matches_finite_differences() {
        let a0 = Tensor::from_rows(&[&[0.5, -1.3, 0.8], &[1.1, 0.4, -0.6]]);
        let b0 = Tensor::from_rows(&[&[0.9, -0.2], &[0.3, 1.7], &[-1.4, 0.6]]);
        let f = |a: &Tensor| a.matmul(&b0).unwrap().map(|v| v.max(0.0)).sum();
        let numeric = central_diff(f, &a0, 1e-5);

        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let b = t.constant(b0.clone());
        let c = t.matmul(a, b).unwrap();
        let r = t.relu(c);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        for (x, y) in g.get(a).unwrap().data().iter().zip(numeric.data()) {
            assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1.0));
        }
    }
}
