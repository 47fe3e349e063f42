//! Operation tape and reverse-mode sweep.
//!
//! Nodes are appended in evaluation order, so every parent has a smaller
//! index than its children and a reverse index walk is a valid reverse
//! topological order.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, inverse_perm, permute_data, Tensor};
use crate::KernelError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Additive mask value for excluded softmax logits.
pub const MASK_VALUE: f64 = -1e9;

const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Gather { table: Var, index: Vec<Option<usize>> },
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln { a: Var, floor: f64 },
    Mean(Var),
    Sum(Var),
    SumAxis { a: Var, axis: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    NormalizeLast(Var),
    Bce { pred: Var, labels: Vec<f64> },
    BceLogits { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Tensor>,
}

impl Gradients {
    /// Gradient with respect to any tape node; `None` if the node does not
    /// require a gradient or was not reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter; zero if the parameter was unused.
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.index()]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var, KernelError> {
        if !value.is_finite() {
            return Err(KernelError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Result<Var, KernelError> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A free input that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Result<Var, KernelError> {
        self.push(t, Op::Leaf, true, "variable")
    }

    /// Bring a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, KernelError> {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true, "param")?;
        self.params.push((id, v));
        Ok(v)
    }

    /// `a[.., k] · b[k, n]`, leading dims of `a` flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.rank() == 0 || ta.last_dim() != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let k = ta.last_dim();
        let n = tb.shape()[1];
        let rows = ta.len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm_acc(ta.data(), tb.data(), &mut out, rows, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// Batched product of `a[B, M, K]` with `b[B, K, N]`, or with `b[B, N, K]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("bmm", ta, tb));
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(shape_err("bmm", ta, tb));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let asl = &ta.data()[i * m * k..(i + 1) * m * k];
            let bsl = &tb.data()[i * k * n..(i + 1) * k * n];
            let osl = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt_acc(asl, bsl, osl, m, k, n);
            } else {
                gemm_acc(asl, bsl, osl, m, k, n);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            ng,
            "bmm",
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    /// `a[.., n] + bias[n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rank() != 1 || ta.last_dim() != tb.len() {
            return Err(shape_err("add_bias", ta, tb));
        }
        let n = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(bias);
        self.push(t, Op::AddBias(a, bias), ng, "add_bias")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, KernelError> {
        let t = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng, "scale")
    }

    /// Concatenate along the last dimension; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let first = self.value(parts[0]);
        let lead: Vec<usize> = first.shape()[..first.rank() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != lead.len() + 1 || t.shape()[..lead.len()] != lead[..] {
                return Err(shape_err("concat", first, t));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), ng, "concat")
    }

    /// Select rows of a `[V, d]` table. `None` yields a zero row.
    pub fn gather(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var, KernelError> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(KernelError::BadArgument(format!(
                "gather table must be rank 2, got {:?}",
                tt.shape()
            )));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(index.len() * d);
        for ix in index {
            match ix {
                Some(i) if *i < v => out.extend_from_slice(tt.row(*i)),
                Some(i) => {
                    return Err(KernelError::IndexOutOfRange { index: *i, len: v });
                }
                None => out.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        let ng = self.needs(table);
        self.push(
            Tensor::new(vec![index.len(), d], out)?,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            ng,
            "gather",
        )
    }

    /// Softmax over the last dimension of `a + mask`. Mask entries must be
    /// 0 or [`MASK_VALUE`] (or below).
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var, KernelError> {
        let ta = self.value(a);
        if let Some(m) = mask {
            if m.shape() != ta.shape() {
                return Err(shape_err("softmax", ta, m));
            }
            if m.data().iter().any(|&x| x != 0.0 && x > MASK_VALUE) {
                return Err(KernelError::BadArgument(
                    "softmax mask entries must be 0 or -1e9".into(),
                ));
            }
        }
        let c = ta.last_dim();
        let mut out = ta.data().to_vec();
        if let Some(m) = mask {
            for (o, mv) in out.iter_mut().zip(m.data()) {
                *o += mv;
            }
        }
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(a);
        self.push(t, Op::Softmax(a), ng, "softmax")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, KernelError> {
        let t = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, KernelError> {
        let t = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng, "relu")
    }

    /// Natural log with inputs floored at `floor` (gradient is zero below it).
    pub fn ln(&mut self, a: Var, floor: f64) -> Result<Var, KernelError> {
        let t = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.needs(a);
        self.push(t, Op::Ln { a, floor }, ng, "ln")
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var, KernelError> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(KernelError::BadArgument("mean of empty tensor".into()));
        }
        let t = Tensor::scalar(ta.sum() / ta.len() as f64);
        let ng = self.needs(a);
        self.push(t, Op::Mean(a), ng, "mean")
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, KernelError> {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(t, Op::Sum(a), ng, "sum")
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, KernelError> {
        let ta = self.value(a);
        if axis >= ta.rank() || ta.rank() < 2 {
            return Err(KernelError::BadArgument(format!(
                "sum_axis {axis} on shape {:?}",
                ta.shape()
            )));
        }
        let shape = ta.shape();
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &ta.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let ng = self.needs(a);
        self.push(Tensor::new(new_shape, out)?, Op::SumAxis { a, axis }, ng, "sum_axis")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let ta = self.value(a);
        let n: usize = shape.iter().product();
        if n != ta.len() {
            return Err(KernelError::ShapeMismatch {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let t = ta.reshaped(shape)?;
        let ng = self.needs(a);
        self.push(t, Op::Reshape(a), ng, "reshape")
    }

    /// Output axis `i` takes input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, KernelError> {
        let ta = self.value(a);
        let mut seen = vec![false; ta.rank()];
        if perm.len() != ta.rank() || perm.iter().any(|&p| p >= ta.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(KernelError::BadArgument(format!(
                "invalid permutation {perm:?} for shape {:?}",
                ta.shape()
            )));
        }
        let (shape, data) = permute_data(ta.data(), ta.shape(), perm);
        let ng = self.needs(a);
        self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            ng,
            "permute",
        )
    }

    /// Divide each last-dim row by its sum; all-zero rows stay zero.
    pub fn normalize_last(&mut self, a: Var) -> Result<Var, KernelError> {
        let ta = self.value(a);
        let c = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(a);
        self.push(t, Op::NormalizeLast(a), ng, "normalize_last")
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var, KernelError> {
        let tp = self.value(pred);
        if tp.len() != labels.len() || labels.is_empty() {
            return Err(KernelError::BadArgument(format!(
                "bce: {} predictions vs {} labels",
                tp.len(),
                labels.len()
            )));
        }
        let loss = tp
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            ng,
            "bce",
        )
    }

    /// Mean binary cross-entropy computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var, KernelError> {
        let tz = self.value(logits);
        if tz.len() != labels.len() || labels.is_empty() {
            return Err(KernelError::BadArgument(format!(
                "bce_with_logits: {} logits vs {} labels",
                tz.len(),
                labels.len()
            )));
        }
        let loss = tz
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            ng,
            "bce_with_logits",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, KernelError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(KernelError::NoForward);
        }
        if self.value(loss).len() != 1 {
            return Err(KernelError::BadArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let mut params: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for &(id, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params[id.index()] = g.clone();
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.last_dim();
                let n = tb.shape()[1];
                let rows = ta.len() / k.max(1);
                self.accumulate(grads, *a, |ga| gemm_nt_acc(gd, tb.data(), ga.data_mut(), rows, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn_acc(ta.data(), gd, gb.data_mut(), rows, k, n));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                let trans_b = *trans_b;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bs {
                        let gsl = &gd[i * m * n..(i + 1) * m * n];
                        let bsl = &tb.data()[i * k * n..(i + 1) * k * n];
                        let out = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            gemm_acc(gsl, bsl, out, m, n, k);
                        } else {
                            gemm_nt_acc(gsl, bsl, out, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bs {
                        let gsl = &gd[i * m * n..(i + 1) * m * n];
                        let asl = &ta.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm_tn_acc(gsl, asl, out, m, n, k);
                        } else {
                            gemm_tn_acc(asl, gsl, out, m, k, n);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| {
                    for (x, y) in gb.data_mut().iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((x, gv), bv) in ga.data_mut().iter_mut().zip(gd).zip(tb.data()) {
                        *x += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, gv), av) in gb.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                let n = self.value(*bias).len();
                self.accumulate(grads, *bias, |gb| {
                    for (i, gv) in gd.iter().enumerate() {
                        gb.data_mut()[i % n] += gv;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, gv) in ga.data_mut().iter_mut().zip(gd) {
                        *x += s * gv;
                    }
                });
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    self.accumulate(grads, p, |gp| {
                        let gpd = gp.data_mut();
                        for r in 0..rows {
                            for c in 0..w {
                                gpd[r * w + c] += gd[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Gather { table, index } => {
                let d = self.value(*table).shape()[1];
                self.accumulate(grads, *table, |gt| {
                    let gtd = gt.data_mut();
                    for (r, ix) in index.iter().enumerate() {
                        if let Some(i) = ix {
                            for c in 0..d {
                                gtd[i * d + c] += gd[r * d + c];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    let gad = ga.data_mut();
                    for r in 0..y.len() / c {
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &gd[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            gad[r * c + i] += ys[i] * (gs[i] - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, gv), yv) in ga.data_mut().iter_mut().zip(gd).zip(y) {
                        *x += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((x, gv), av) in ga.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        if *av > 0.0 {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Ln { a, floor } => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((x, gv), av) in ga.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        if *av > *floor {
                            *x += gv / av;
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = gd[0] / n;
                self.accumulate(grads, *a, |ga| ga.data_mut().iter_mut().for_each(|x| *x += gv));
            }
            Op::Sum(a) => {
                let gv = gd[0];
                self.accumulate(grads, *a, |ga| ga.data_mut().iter_mut().for_each(|x| *x += gv));
            }
            Op::SumAxis { a, axis } => {
                let shape = self.value(*a).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.accumulate(grads, *a, |ga| {
                    let gad = ga.data_mut();
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let dst = &mut gad[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, gv) in ga.data_mut().iter_mut().zip(gd) {
                        *x += gv;
                    }
                });
            }
            Op::Permute { a, perm } => {
                let (_, back) = permute_data(gd, node.value.shape(), &inverse_perm(perm));
                self.accumulate(grads, *a, |ga| {
                    for (x, gv) in ga.data_mut().iter_mut().zip(&back) {
                        *x += gv;
                    }
                });
            }
            Op::NormalizeLast(a) => {
                let ta = self.value(*a);
                let y = node.value.data();
                let c = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    let gad = ga.data_mut();
                    for r in 0..y.len() / c {
                        let s: f64 = ta.data()[r * c..(r + 1) * c].iter().sum();
                        if s == 0.0 {
                            continue;
                        }
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &gd[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            gad[r * c + i] += (gs[i] - dot) / s;
                        }
                    }
                });
            }
            Op::Bce { pred, labels } => {
                let tp = self.value(*pred);
                let n = labels.len() as f64;
                let gv = gd[0];
                self.accumulate(grads, *pred, |gp| {
                    for ((x, &p), &y) in gp.data_mut().iter_mut().zip(tp.data()).zip(labels) {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        *x += gv * (-y / p + (1.0 - y) / (1.0 - p)) / n;
                    }
                });
            }
            Op::BceLogits { logits, labels } => {
                let tz = self.value(*logits);
                let n = labels.len() as f64;
                let gv = gd[0];
                self.accumulate(grads, *logits, |gz| {
                    for ((x, &z), &y) in gz.data_mut().iter_mut().zip(tz.data()).zip(labels) {
                        *x += gv * (sigmoid(z) - y) / n;
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
