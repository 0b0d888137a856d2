//! Wengert tape: operations recorded during the forward pass are replayed in
//! reverse for gradients. Node ids are allocated in creation order, so walking
//! the op list backwards is a valid reverse-topological order.

use std::sync::Arc;

use super::{logsumexp_slice, matmul_into, Tensor, TensorError};

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Which axes of the larger operand the smaller one is replicated across.
///
/// `Trailing`: b's shape equals a leading prefix of a's shape (b indexes the
/// leading axes, its value is reused along the trailing ones).
/// `Leading`: b's shape equals a trailing suffix of a's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bcast {
    Trailing,
    Leading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Spread {
    Same,
    Scalar,
    Prefix, // b matches leading dims of a (replicated across trailing)
    Suffix, // b matches trailing dims of a (replicated across leading)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Bin { kind: BinKind, a: Var, b: Var, spread: Spread },
    Neg { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sqrt { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Matmul { a: Var, b: Var },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    LogSumExp { a: Var, axis: usize },
    Softmax { a: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    GatherRows { a: Var, indices: Arc<Vec<usize>> },
    MaskedFill { a: Var, mask: Arc<Vec<bool>> },
    CountMarginal { logp: Var, target: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient tape. Append-only during the forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise binaries -------------------------------------------

    fn spread_of(
        op: &'static str,
        a: &[usize],
        b: &[usize],
        requested: Option<Bcast>,
    ) -> Result<Spread, TensorError> {
        let mismatch = || TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() };
        match requested {
            None => {
                if a == b {
                    Ok(Spread::Same)
                } else if b.iter().product::<usize>() == 1 {
                    Ok(Spread::Scalar)
                } else {
                    Err(mismatch())
                }
            }
            Some(Bcast::Trailing) => {
                if b.len() <= a.len() && a[..b.len()] == *b {
                    Ok(Spread::Prefix)
                } else {
                    Err(mismatch())
                }
            }
            Some(Bcast::Leading) => {
                if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
                    Ok(Spread::Suffix)
                } else {
                    Err(mismatch())
                }
            }
        }
    }

    fn bin(
        &mut self,
        kind: BinKind,
        a: Var,
        b: Var,
        requested: Option<Bcast>,
    ) -> Result<Var, TensorError> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let spread =
            Self::spread_of(name, self.shape(a), self.shape(b), requested)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = av.numel();
        let bn = bv.numel();
        let block = match spread {
            Spread::Same | Spread::Scalar => 0,
            Spread::Prefix => n / bn, // contiguous run per b element
            Spread::Suffix => bn,     // b index = flat % bn
        };
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let mut out = Vec::with_capacity(n);
        match spread {
            Spread::Same => {
                out.extend(av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            }
            Spread::Scalar => {
                let y = bv.data()[0];
                out.extend(av.data().iter().map(|&x| f(x, y)));
            }
            Spread::Prefix => {
                for (i, &x) in av.data().iter().enumerate() {
                    out.push(f(x, bv.data()[i / block]));
                }
            }
            Spread::Suffix => {
                for (i, &x) in av.data().iter().enumerate() {
                    out.push(f(x, bv.data()[i % block]));
                }
            }
        }
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Bin { kind, a, b, spread }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Add, a, b, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Sub, a, b, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Mul, a, b, None)
    }

    pub fn add_b(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var, TensorError> {
        self.bin(BinKind::Add, a, b, Some(bc))
    }

    pub fn sub_b(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var, TensorError> {
        self.bin(BinKind::Sub, a, b, Some(bc))
    }

    pub fn mul_b(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var, TensorError> {
        self.bin(BinKind::Mul, a, b, Some(bc))
    }

    // ---- elementwise unaries --------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0].value.map(f);
        self.push(out, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// Natural log. Inputs must be positive (documented range).
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul { a, b }))
    }

    // ---- reductions -------------------------------------------------------

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, mid, inner)
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op,
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        Ok(())
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        Self::check_axis("sum_axis", self.shape(a), axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, mid, inner) = Self::axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        let shape = Self::reduced_shape(t.shape(), axis);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { a, axis }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    /// Max-shifted log-sum-exp reduction over `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        Self::check_axis("logsumexp", self.shape(a), axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, mid, inner) = Self::axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for k in 0..mid {
                    m = m.max(t.data()[(o * mid + k) * inner + i]);
                }
                let mut s = 0.0;
                for k in 0..mid {
                    s += (t.data()[(o * mid + k) * inner + i] - m).exp();
                }
                out[o * inner + i] = m + s.ln();
            }
        }
        let shape = Self::reduced_shape(t.shape(), axis);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSumExp { a, axis }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        Self::check_axis("softmax", self.shape(a), axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, mid, inner) = Self::axis_split(t.shape(), axis);
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for k in 0..mid {
                    m = m.max(t.data()[(o * mid + k) * inner + i]);
                }
                let mut s = 0.0;
                for k in 0..mid {
                    let e = (t.data()[(o * mid + k) * inner + i] - m).exp();
                    out[(o * mid + k) * inner + i] = e;
                    s += e;
                }
                for k in 0..mid {
                    out[(o * mid + k) * inner + i] /= s;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a, axis }))
    }

    // ---- structural ops ---------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "no parts".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        Self::check_axis("concat", &first, axis)?;
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = Self::axis_split(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let mid = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * mid * inner..(o + 1) * mid * inner];
                let dst_base = (o * axis_total + offset) * inner;
                out[dst_base..dst_base + mid * inner].copy_from_slice(src);
            }
            offset += mid;
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        Self::check_axis("slice", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {}..{} exceeds axis size {}", start, start + len, shape[axis]),
            });
        }
        let (outer, mid, inner) = Self::axis_split(&shape, axis);
        let t = &self.nodes[a.0].value;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&t.data()[src..src + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Slice { a, axis, start }))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {:?} not a permutation of 0..{}", axes, rank),
            });
        }
        let out = permute_tensor(&self.nodes[a.0].value, axes);
        Ok(self.push(out, Op::Permute { a, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if new_shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", t.shape(), new_shape),
            });
        }
        let out = Tensor::new(new_shape, t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Embedding lookup / row gather along axis 0. Backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid { op: "gather_rows", msg: "rank-0 input".into() });
        }
        let rows = shape[0];
        let block: usize = shape[1..].iter().product();
        for &ix in indices {
            if ix >= rows {
                return Err(TensorError::IndexOutOfBounds { op: "gather_rows", index: ix, size: rows });
            }
        }
        let t = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(indices.len() * block);
        for &ix in indices {
            out.extend_from_slice(&t.data()[ix * block..(ix + 1) * block]);
        }
        let mut new_shape = shape;
        new_shape[0] = indices.len();
        Ok(self.push(
            Tensor::new(&new_shape, out)?,
            Op::GatherRows { a, indices: Arc::new(indices.to_vec()) },
        ))
    }

    /// Entries where `mask` is true are replaced by `value` and receive zero
    /// gradient.
    pub fn masked_fill(
        &mut self,
        a: Var,
        mask: &Arc<Vec<bool>>,
        value: f64,
    ) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if mask.len() != t.numel() {
            return Err(TensorError::Invalid {
                op: "masked_fill",
                msg: format!("mask length {} vs tensor numel {}", mask.len(), t.numel()),
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, data)?, Op::MaskedFill { a, mask: Arc::clone(mask) }))
    }

    /// Log-probability that independent per-position counts sum to `target`.
    ///
    /// `logp` has shape (n, k_max+1); row i holds the normalized
    /// log-distribution over the count contributed by position i. Computed by
    /// a forward convolution over positions in log space; the backward pass
    /// distributes the gradient by posterior responsibilities.
    pub fn count_marginal(&mut self, logp: Var, target: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[logp.0].value;
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "count_marginal",
                msg: format!("expected (n, k+1) log-probs, got {:?}", t.shape()),
            });
        }
        let (n, kp1) = (t.shape()[0], t.shape()[1]);
        if target > n * (kp1 - 1) {
            return Err(TensorError::Invalid {
                op: "count_marginal",
                msg: format!("target {} unreachable with n={} k_max={}", target, n, kp1 - 1),
            });
        }
        let alpha = count_forward(t.data(), n, kp1, target);
        let ll = alpha[n][target];
        Ok(self.push(Tensor::scalar(ll), Op::CountMarginal { logp, target }))
    }

    // ---- backward -----------------------------------------------------------

    /// Replay the tape in reverse from a scalar loss. Gradients of vars not on
    /// any path to the loss are absent (treated as zero).
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Tensor::fill(&seed_shape, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            let op = self.nodes[id].op.clone();
            self.backprop_op(id, &op, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn reduce_to_b(&self, spread: Spread, a_shape: &[usize], b_numel: usize, full: &[f64]) -> Vec<f64> {
        let n: usize = a_shape.iter().product();
        match spread {
            Spread::Same => full.to_vec(),
            Spread::Scalar => vec![full.iter().sum()],
            Spread::Prefix => {
                let block = n / b_numel;
                let mut out = vec![0.0; b_numel];
                for (i, &v) in full.iter().enumerate() {
                    out[i / block] += v;
                }
                out
            }
            Spread::Suffix => {
                let mut out = vec![0.0; b_numel];
                for (i, &v) in full.iter().enumerate() {
                    out[i % b_numel] += v;
                }
                out
            }
        }
    }

    fn backprop_op(&mut self, id: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::Bin { kind, a, b, spread } => {
                let a_shape = self.shape(*a).to_vec();
                let b_shape = self.shape(*b).to_vec();
                let b_numel: usize = b_shape.iter().product();
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        self.accumulate(*a, g.clone());
                        let mut gb = self.reduce_to_b(*spread, &a_shape, b_numel, g.data());
                        if *kind == BinKind::Sub {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        self.accumulate(*b, Tensor::new(&b_shape, gb).unwrap());
                    }
                    BinKind::Mul => {
                        let an: usize = a_shape.iter().product();
                        let block = match spread {
                            Spread::Prefix => an / b_numel,
                            Spread::Suffix => b_numel,
                            _ => 0,
                        };
                        let bval = |i: usize| -> f64 {
                            let bd = self.nodes[b.0].value.data();
                            match spread {
                                Spread::Same => bd[i],
                                Spread::Scalar => bd[0],
                                Spread::Prefix => bd[i / block],
                                Spread::Suffix => bd[i % block],
                            }
                        };
                        let ga: Vec<f64> =
                            g.data().iter().enumerate().map(|(i, &gi)| gi * bval(i)).collect();
                        let prod: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(&gi, &ai)| gi * ai)
                            .collect();
                        let gb = self.reduce_to_b(*spread, &a_shape, b_numel, &prod);
                        self.accumulate(*a, Tensor::new(&a_shape, ga).unwrap());
                        self.accumulate(*b, Tensor::new(&b_shape, gb).unwrap());
                    }
                }
            }
            Op::Neg { a } => {
                let ga = g.map(|v| -v);
                self.accumulate(*a, ga);
            }
            Op::Exp { a } => {
                let out = &self.nodes[id].value;
                let ga: Vec<f64> =
                    g.data().iter().zip(out.data()).map(|(&gi, &yi)| gi * yi).collect();
                self.accumulate(*a, Tensor::new(out.shape(), ga).unwrap());
            }
            Op::Log { a } => {
                let x = &self.nodes[a.0].value;
                let ga: Vec<f64> =
                    g.data().iter().zip(x.data()).map(|(&gi, &xi)| gi / xi).collect();
                self.accumulate(*a, Tensor::new(x.shape(), ga).unwrap());
            }
            Op::Sqrt { a } => {
                let out = &self.nodes[id].value;
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &yi)| gi * 0.5 / yi)
                    .collect();
                self.accumulate(*a, Tensor::new(out.shape(), ga).unwrap());
            }
            Op::Tanh { a } => {
                let out = &self.nodes[id].value;
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                    .collect();
                self.accumulate(*a, Tensor::new(out.shape(), ga).unwrap());
            }
            Op::Sigmoid { a } => {
                let out = &self.nodes[id].value;
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                    .collect();
                self.accumulate(*a, Tensor::new(out.shape(), ga).unwrap());
            }
            Op::Scale { a, c } => {
                self.accumulate(*a, g.map(|v| v * c));
            }
            Op::AddScalar { a } => {
                self.accumulate(*a, g.clone());
            }
            Op::Matmul { a, b } => {
                let at = self.nodes[a.0].value.clone();
                let bt = self.nodes[b.0].value.clone();
                let ga = g
                    .matmul(&bt.transpose2().unwrap())
                    .expect("matmul backward shapes");
                let gb = at
                    .transpose2()
                    .unwrap()
                    .matmul(g)
                    .expect("matmul backward shapes");
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::SumAxis { a, axis } => {
                let a_shape = self.shape(*a).to_vec();
                let (outer, mid, inner) = Self::axis_split(&a_shape, *axis);
                let mut ga = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            ga[(o * mid + m) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(*a, Tensor::new(&a_shape, ga).unwrap());
            }
            Op::SumAll { a } => {
                let a_shape = self.shape(*a).to_vec();
                let gv = g.data()[0];
                self.accumulate(*a, Tensor::fill(&a_shape, gv));
            }
            Op::LogSumExp { a, axis } => {
                let a_shape = self.shape(*a).to_vec();
                let (outer, mid, inner) = Self::axis_split(&a_shape, *axis);
                let x = self.nodes[a.0].value.data();
                let out = self.nodes[id].value.data();
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lane = o * inner + i;
                        let (gv, ov) = (g.data()[lane], out[lane]);
                        if gv == 0.0 {
                            continue;
                        }
                        for k in 0..mid {
                            let idx = (o * mid + k) * inner + i;
                            ga[idx] = gv * (x[idx] - ov).exp();
                        }
                    }
                }
                self.accumulate(*a, Tensor::new(&a_shape, ga).unwrap());
            }
            Op::Softmax { a, axis } => {
                let a_shape = self.shape(*a).to_vec();
                let (outer, mid, inner) = Self::axis_split(&a_shape, *axis);
                let y = self.nodes[id].value.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for k in 0..mid {
                            let idx = (o * mid + k) * inner + i;
                            dot += g.data()[idx] * y[idx];
                        }
                        for k in 0..mid {
                            let idx = (o * mid + k) * inner + i;
                            ga[idx] = y[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                self.accumulate(*a, Tensor::new(&a_shape, ga).unwrap());
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shape(Var(id)).to_vec();
                let (outer, axis_total, inner) = Self::axis_split(&out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let p_shape = self.shape(p).to_vec();
                    let mid = p_shape[*axis];
                    let mut gp = vec![0.0; p_shape.iter().product()];
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        gp[o * mid * inner..(o + 1) * mid * inner]
                            .copy_from_slice(&g.data()[src..src + mid * inner]);
                    }
                    self.accumulate(p, Tensor::new(&p_shape, gp).unwrap());
                    offset += mid;
                }
            }
            Op::Slice { a, axis, start } => {
                let a_shape = self.shape(*a).to_vec();
                let (outer, mid, inner) = Self::axis_split(&a_shape, *axis);
                let len = self.shape(Var(id))[*axis];
                let mut ga = vec![0.0; a_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    ga[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(*a, Tensor::new(&a_shape, ga).unwrap());
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (d, &ax) in axes.iter().enumerate() {
                    inverse[ax] = d;
                }
                let ga = permute_tensor(g, &inverse);
                self.accumulate(*a, ga);
            }
            Op::Reshape { a } => {
                let a_shape = self.shape(*a).to_vec();
                self.accumulate(*a, Tensor::new(&a_shape, g.data().to_vec()).unwrap());
            }
            Op::GatherRows { a, indices } => {
                let a_shape = self.shape(*a).to_vec();
                let block: usize = a_shape[1..].iter().product();
                let mut ga = vec![0.0; a_shape.iter().product()];
                for (r, &ix) in indices.iter().enumerate() {
                    for c in 0..block {
                        ga[ix * block + c] += g.data()[r * block + c];
                    }
                }
                self.accumulate(*a, Tensor::new(&a_shape, ga).unwrap());
            }
            Op::MaskedFill { a, mask } => {
                let a_shape = self.shape(*a).to_vec();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gi, &m)| if m { 0.0 } else { gi })
                    .collect();
                self.accumulate(*a, Tensor::new(&a_shape, ga).unwrap());
            }
            Op::CountMarginal { logp, target } => {
                let t = self.nodes[logp.0].value.clone();
                let (n, kp1) = (t.shape()[0], t.shape()[1]);
                let gv = g.data()[0];
                let ga = count_backward(t.data(), n, kp1, *target, gv);
                self.accumulate(*logp, Tensor::new(t.shape(), ga).unwrap());
            }
        }
    }
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();

    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let strides_for_out: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

    let numel = t.numel();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = t.data()[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides_for_out[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= strides_for_out[d] * out_shape[d];
        }
    }
    Tensor::new(&out_shape, out).unwrap()
}

/// alpha[i][c] = log P(counts of the first i positions sum to c), c <= target.
fn count_forward(logp: &[f64], n: usize, kp1: usize, target: usize) -> Vec<Vec<f64>> {
    let mut alpha = vec![vec![f64::NEG_INFINITY; target + 1]; n + 1];
    alpha[0][0] = 0.0;
    let mut lane = Vec::with_capacity(kp1);
    for i in 0..n {
        for c in 0..=target {
            lane.clear();
            for k in 0..kp1.min(c + 1) {
                let prev = alpha[i][c - k];
                if prev > f64::NEG_INFINITY {
                    lane.push(prev + logp[i * kp1 + k]);
                }
            }
            if !lane.is_empty() {
                alpha[i + 1][c] = logsumexp_slice(&lane);
            }
        }
    }
    alpha
}

/// Gradient of the count marginal w.r.t. the per-position log-probabilities:
/// posterior responsibility of (position, count) given the total.
fn count_backward(logp: &[f64], n: usize, kp1: usize, target: usize, g: f64) -> Vec<f64> {
    let alpha = count_forward(logp, n, kp1, target);
    let ll = alpha[n][target];
    let mut ga = vec![0.0; n * kp1];
    if ll == f64::NEG_INFINITY || g == 0.0 {
        return ga;
    }
    // beta[i][r] = log P(counts of positions i..n sum to r)
    let mut beta = vec![f64::NEG_INFINITY; target + 1];
    beta[0] = 0.0;
    let mut next = vec![f64::NEG_INFINITY; target + 1];
    let mut lane = Vec::with_capacity(kp1);
    for i in (0..n).rev() {
        for (r, slot) in next.iter_mut().enumerate() {
            lane.clear();
            for k in 0..kp1.min(r + 1) {
                let after = beta[r - k];
                if after > f64::NEG_INFINITY {
                    lane.push(logp[i * kp1 + k] + after);
                }
            }
            *slot = if lane.is_empty() { f64::NEG_INFINITY } else { logsumexp_slice(&lane) };
        }
        // posterior over k at position i uses alpha before i and beta after i;
        // counts above the target have zero responsibility
        for k in 0..kp1.min(target + 1) {
            let lp = logp[i * kp1 + k];
            let mut acc = Vec::new();
            for c in 0..=target - k {
                let before = alpha[i][c];
                let after = beta[target - c - k];
                if before > f64::NEG_INFINITY && after > f64::NEG_INFINITY {
                    acc.push(before + lp + after - ll);
                }
            }
            if !acc.is_empty() {
                ga[i * kp1 + k] = g * logsumexp_slice(&acc).exp();
            }
        }
        std::mem::swap(&mut beta, &mut next);
    }
    ga
}
