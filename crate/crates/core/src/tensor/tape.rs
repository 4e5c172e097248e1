use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{NodeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Saved view of an operand: value, shape, and (when it requires grad) the
/// producing node. Values are Arc clones, so saving is cheap.
struct Operand<F> {
    node: Option<usize>,
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

enum Op<F> {
    Leaf,
    Add { a: Operand<F>, b: Operand<F> },
    Sub { a: Operand<F>, b: Operand<F> },
    Mul { a: Operand<F>, b: Operand<F> },
    Scale { a: Operand<F>, factor: F },
    Matmul { a: Operand<F>, b: Operand<F>, m: usize, k: usize, n: usize },
    Concat { parts: Vec<Operand<F>>, axis: usize },
    Slice { a: Operand<F>, axis: usize, start: usize, len: usize },
    Reshape { a: Operand<F> },
    Exp { a: Operand<F>, out: Arc<Vec<F>> },
    Log { a: Operand<F> },
    Tanh { a: Operand<F>, out: Arc<Vec<F>> },
    Sigmoid { a: Operand<F>, out: Arc<Vec<F>> },
    Softplus { a: Operand<F> },
    Softmax { a: Operand<F>, out: Arc<Vec<F>>, width: usize },
    LogSoftmax { a: Operand<F>, probs: Arc<Vec<F>>, width: usize },
    Sum { a: Operand<F>, axis: Option<usize> },
    Mean { a: Operand<F>, axis: Option<usize> },
    GatherRows { table: Operand<F>, ids: Arc<Vec<usize>> },
    KlCategorical { q: Operand<F>, p: Operand<F>, width: usize },
}

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
}

/// Record of primitive applications for one optimization step. Confined to a
/// single thread; consumed by one [`Tape::backward`] call.
pub struct Tape<F> {
    id: u64,
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
    checked: bool,
}

/// Gradients of a scalar loss with respect to watched leaves, keyed by the
/// leaf's tape node.
pub struct GradMap<F> {
    tape: u64,
    by_node: HashMap<usize, Tensor<F>>,
}

impl<F: Scalar> GradMap<F> {
    /// Gradient w.r.t. a watched tensor, if any path reached it.
    pub fn wrt(&self, leaf: &Tensor<F>) -> Option<&Tensor<F>> {
        let node = leaf.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.by_node.get(&node.index)
    }

    /// Gradient w.r.t. a watched tensor, zeros when no path reached it.
    pub fn wrt_or_zeros(&self, leaf: &Tensor<F>) -> Tensor<F> {
        self.wrt(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// How a binary elementwise pair broadcasts.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    /// Right operand repeats across the left's leading axis (or is rank-0).
    RightSmaller,
    /// Left operand repeats across the right's leading axis (or is rank-0).
    LeftSmaller,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let suffix = |big: &[usize], small: &[usize]| {
        small.is_empty() || (big.len() == small.len() + 1 && &big[1..] == small)
    };
    if suffix(a, b) {
        return Ok(Bcast::RightSmaller);
    }
    if suffix(b, a) {
        return Ok(Bcast::LeftSmaller);
    }
    Err(Error::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() })
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            checked: false,
        }
    }

    /// Checked mode: every primitive result is scanned and a non-finite
    /// value is a numeric error. Used by the verification suites.
    pub fn new_checked() -> Self {
        Tape { checked: true, ..Self::new() }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    fn operand(&self, t: &Tensor<F>) -> Result<Operand<F>> {
        let node = match t.node() {
            Some(r) if r.tape == self.id => Some(r.index),
            Some(r) => return Err(Error::TapeMismatch { expected: self.id, found: r.tape }),
            None => None,
        };
        Ok(Operand { node, shape: t.shape().to_vec(), data: t.data_arc() })
    }

    fn finite_check(&self, op: &'static str, data: &[F]) -> Result<()> {
        if self.checked {
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric { op, index });
            }
        }
        Ok(())
    }

    /// Push a node when any operand requires grad; otherwise the result is a
    /// plain constant and nothing is recorded.
    fn record(&self, op_name: &'static str, op: Op<F>, shape: Vec<usize>, data: Vec<F>) -> Result<Tensor<F>> {
        self.finite_check(op_name, &data)?;
        let tracked = match &op {
            Op::Leaf => true,
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                a.node.is_some() || b.node.is_some()
            }
            Op::Matmul { a, b, .. } => a.node.is_some() || b.node.is_some(),
            Op::KlCategorical { q, p, .. } => q.node.is_some() || p.node.is_some(),
            Op::Concat { parts, .. } => parts.iter().any(|p| p.node.is_some()),
            Op::Scale { a, .. }
            | Op::Slice { a, .. }
            | Op::Reshape { a }
            | Op::Exp { a, .. }
            | Op::Log { a }
            | Op::Tanh { a, .. }
            | Op::Sigmoid { a, .. }
            | Op::Softplus { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Sum { a, .. }
            | Op::Mean { a, .. } => a.node.is_some(),
            Op::GatherRows { table, .. } => table.node.is_some(),
        };
        let data = Arc::new(data);
        let node = if tracked {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { op, shape: shape.clone() });
            Some(NodeRef { tape: self.id, index: nodes.len() - 1 })
        } else {
            None
        };
        Ok(Tensor::with_node(shape, data, node))
    }

    /// Register a leaf: the returned tensor shares `t`'s values and
    /// accumulates gradients on this tape.
    pub fn watch(&self, t: &Tensor<F>) -> Tensor<F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, shape: t.shape().to_vec() });
        let node = Some(NodeRef { tape: self.id, index: nodes.len() - 1 });
        Tensor::with_node(t.shape().to_vec(), t.data_arc(), node)
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &self,
        op_name: &'static str,
        a: &Tensor<F>,
        b: &Tensor<F>,
        f: impl Fn(F, F) -> F,
        make: impl FnOnce(Operand<F>, Operand<F>) -> Op<F>,
    ) -> Result<Tensor<F>> {
        let kind = broadcast_kind(op_name, a.shape(), b.shape())?;
        let (out_shape, data) = match kind {
            Bcast::Same => {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (a.shape().to_vec(), data)
            }
            Bcast::RightSmaller => {
                let bn = b.numel().max(1);
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % bn]))
                    .collect();
                (a.shape().to_vec(), data)
            }
            Bcast::LeftSmaller => {
                let an = a.numel().max(1);
                let data = b
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(a.data()[i % an], y))
                    .collect();
                (b.shape().to_vec(), data)
            }
        };
        self.record(op_name, make(self.operand(a)?, self.operand(b)?), out_shape, data)
    }

    pub fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Multiply by a plain scalar.
    pub fn scale(&self, a: &Tensor<F>, factor: F) -> Result<Tensor<F>> {
        let data = a.data().iter().map(|&x| x * factor).collect();
        self.record("scale", Op::Scale { a: self.operand(a)?, factor }, a.shape().to_vec(), data)
    }

    pub fn neg(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        self.scale(a, -F::one())
    }

    // ---- matmul -------------------------------------------------------------

    pub fn matmul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), a.data(), (k as isize, 1), b.data(), (n as isize, 1), F::zero(), &mut out);
        self.record(
            "matmul",
            Op::Matmul { a: self.operand(a)?, b: self.operand(b)?, m, k, n },
            vec![m, n],
            out,
        )
    }

    // ---- shape ops ----------------------------------------------------------

    pub fn concat(&self, parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::invalid(format!("concat axis {axis} out of rank {rank}")));
        }
        for p in parts {
            if p.shape().len() != rank
                || p.shape()[..axis] != parts[0].shape()[..axis]
                || p.shape()[axis + 1..] != parts[0].shape()[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = total_axis;
        let mut data = vec![F::zero(); outer * total_axis * inner];
        for o in 0..outer {
            let mut written = 0usize;
            for p in parts {
                let alen = p.shape()[axis];
                let src = &p.data()[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = (o * total_axis + written) * inner;
                data[dst_start..dst_start + alen * inner].copy_from_slice(src);
                written += alen;
            }
        }
        let ops: Result<Vec<_>> = parts.iter().map(|p| self.operand(p)).collect();
        self.record("concat", Op::Concat { parts: ops?, axis }, shape, data)
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, a: &Tensor<F>, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        let rank = a.shape().len();
        if axis >= rank || start + len > a.shape()[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: a.shape().to_vec(),
                reason: format!("range {start}..{} along axis {axis}", start + len),
            });
        }
        let outer: usize = a.shape()[..axis].iter().product();
        let alen = a.shape()[axis];
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let mut data = vec![F::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * alen + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&a.data()[src..src + len * inner]);
        }
        self.record("slice", Op::Slice { a: self.operand(a)?, axis, start, len }, shape, data)
    }

    pub fn reshape(&self, a: &Tensor<F>, shape: Vec<usize>) -> Result<Tensor<F>> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count differs from source {:?}", a.shape()),
            });
        }
        let data = a.data().to_vec();
        self.record("reshape", Op::Reshape { a: self.operand(a)? }, shape, data)
    }

    // ---- unary --------------------------------------------------------------

    pub fn exp(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = a.data().iter().map(|&x| x.exp()).collect();
        let out = Arc::new(data.clone());
        self.record("exp", Op::Exp { a: self.operand(a)?, out }, a.shape().to_vec(), data)
    }

    pub fn log(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = a.data().iter().map(|&x| x.ln()).collect();
        self.record("log", Op::Log { a: self.operand(a)? }, a.shape().to_vec(), data)
    }

    pub fn tanh(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = a.data().iter().map(|&x| x.tanh()).collect();
        let out = Arc::new(data.clone());
        self.record("tanh", Op::Tanh { a: self.operand(a)?, out }, a.shape().to_vec(), data)
    }

    pub fn sigmoid(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = a.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Arc::new(data.clone());
        self.record("sigmoid", Op::Sigmoid { a: self.operand(a)?, out }, a.shape().to_vec(), data)
    }

    pub fn softplus(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = a.data().iter().map(|&x| softplus(x)).collect();
        self.record("softplus", Op::Softplus { a: self.operand(a)? }, a.shape().to_vec(), data)
    }

    // ---- row ops (over the last axis) ----------------------------------------

    fn last_width(&self, op: &'static str, a: &Tensor<F>) -> Result<usize> {
        match a.shape().last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(Error::InvalidShape {
                op,
                shape: a.shape().to_vec(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    pub fn softmax(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let width = self.last_width("softmax", a)?;
        let mut data = vec![F::zero(); a.numel()];
        for (row_out, row_in) in data.chunks_mut(width).zip(a.data().chunks(width)) {
            softmax_row(row_in, row_out);
        }
        let out = Arc::new(data.clone());
        self.record("softmax", Op::Softmax { a: self.operand(a)?, out, width }, a.shape().to_vec(), data)
    }

    pub fn log_softmax(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let width = self.last_width("log_softmax", a)?;
        let mut data = vec![F::zero(); a.numel()];
        let mut probs = vec![F::zero(); a.numel()];
        for ((row_out, row_p), row_in) in data
            .chunks_mut(width)
            .zip(probs.chunks_mut(width))
            .zip(a.data().chunks(width))
        {
            let max = row_in.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut lse = F::zero();
            for &x in row_in {
                lse += (x - max).exp();
            }
            let log_z = max + lse.ln();
            for ((o, p), &x) in row_out.iter_mut().zip(row_p.iter_mut()).zip(row_in) {
                *o = x - log_z;
                *p = (x - log_z).exp();
            }
        }
        self.record(
            "log_softmax",
            Op::LogSoftmax { a: self.operand(a)?, probs: Arc::new(probs), width },
            a.shape().to_vec(),
            data,
        )
    }

    // ---- reductions ----------------------------------------------------------

    fn reduce_shape(&self, op: &'static str, a: &Tensor<F>, axis: Option<usize>) -> Result<Vec<usize>> {
        match axis {
            None => Ok(vec![]),
            Some(ax) if ax < a.shape().len() => {
                let mut s = a.shape().to_vec();
                s.remove(ax);
                Ok(s)
            }
            Some(ax) => Err(Error::InvalidShape {
                op,
                shape: a.shape().to_vec(),
                reason: format!("reduction axis {ax} out of range"),
            }),
        }
    }

    pub fn sum(&self, a: &Tensor<F>, axis: Option<usize>) -> Result<Tensor<F>> {
        let shape = self.reduce_shape("sum", a, axis)?;
        let data = reduce_sum(a.data(), a.shape(), axis);
        self.record("sum", Op::Sum { a: self.operand(a)?, axis }, shape, data)
    }

    pub fn mean(&self, a: &Tensor<F>, axis: Option<usize>) -> Result<Tensor<F>> {
        let shape = self.reduce_shape("mean", a, axis)?;
        let count = match axis {
            None => a.numel(),
            Some(ax) => a.shape()[ax],
        };
        if count == 0 {
            return Err(Error::invalid("mean over zero elements"));
        }
        let inv = F::one() / F::from_f64(count as f64);
        let data = reduce_sum(a.data(), a.shape(), axis).into_iter().map(|v| v * inv).collect();
        self.record("mean", Op::Mean { a: self.operand(a)?, axis }, shape, data)
    }

    // ---- gather --------------------------------------------------------------

    /// Row lookup into a 2-D table; duplicate ids accumulate gradient.
    pub fn gather_rows(&self, table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
        if table.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather-rows",
                shape: table.shape().to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let rows = table.shape()[0];
        let dim = table.shape()[1];
        if let Some(position) = ids.iter().position(|&id| id >= rows) {
            return Err(Error::TokenOutOfRange { id: ids[position], vocab: rows, position });
        }
        let mut data = vec![F::zero(); ids.len() * dim];
        for (r, &id) in ids.iter().enumerate() {
            data[r * dim..(r + 1) * dim].copy_from_slice(&table.data()[id * dim..(id + 1) * dim]);
        }
        self.record(
            "gather-rows",
            Op::GatherRows { table: self.operand(table)?, ids: Arc::new(ids.to_vec()) },
            vec![ids.len(), dim],
            data,
        )
    }

    // ---- categorical KL -----------------------------------------------------

    /// Per-row KL(q || p) for rows on the simplex, with 0·log 0 = 0.
    pub fn kl_categorical(&self, q: &Tensor<F>, p: &Tensor<F>) -> Result<Tensor<F>> {
        let width = self.last_width("kl_categorical", q)?;
        let kind = broadcast_kind("kl_categorical", q.shape(), p.shape())?;
        if kind == Bcast::LeftSmaller {
            return Err(Error::ShapeMismatch {
                op: "kl_categorical",
                left: q.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        if p.shape().last() != Some(&width) {
            return Err(Error::ShapeMismatch {
                op: "kl_categorical",
                left: q.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        let tol = simplex_tol::<F>();
        let pn = p.numel();
        let rows = q.numel() / width;
        let mut data = vec![F::zero(); rows];
        for r in 0..rows {
            let qrow = &q.data()[r * width..(r + 1) * width];
            check_simplex("kl_categorical", qrow, tol)?;
            let prow_start = (r * width) % pn;
            let prow = &p.data()[prow_start..prow_start + width];
            check_simplex("kl_categorical", prow, tol)?;
            let mut acc = F::zero();
            for (&qi, &pi) in qrow.iter().zip(prow) {
                if qi > F::zero() {
                    if pi <= F::zero() {
                        return Err(Error::invalid(
                            "kl_categorical: q has mass where p is zero",
                        ));
                    }
                    acc += qi * (qi / pi).ln();
                }
            }
            data[r] = acc;
        }
        let mut shape = q.shape().to_vec();
        shape.pop();
        self.record(
            "kl_categorical",
            Op::KlCategorical { q: self.operand(q)?, p: self.operand(p)?, width },
            shape,
            data,
        )
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the tape: a second call is
    /// an error.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<GradMap<F>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let root = match loss.node() {
            Some(r) if r.tape == self.id => r.index,
            Some(r) => return Err(Error::TapeMismatch { expected: self.id, found: r.tape }),
            None => return Err(Error::LossNotOnTape),
        };
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![F::one()]);

        for i in (0..=root).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes[i].op, &g, &mut grads, &nodes);
        }

        let mut by_node = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = grads[i].take() {
                    by_node.insert(
                        i,
                        Tensor::with_node(node.shape.clone(), Arc::new(g), None),
                    );
                }
            }
        }
        Ok(GradMap { tape: self.id, by_node })
    }
}

// ---- forward helpers ----------------------------------------------------------

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_row<F: Scalar>(row_in: &[F], row_out: &mut [F]) {
    let max = row_in.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &x) in row_out.iter_mut().zip(row_in) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in row_out.iter_mut() {
        *o = *o / sum;
    }
}

fn simplex_tol<F: Scalar>() -> F {
    if F::BITS == 32 {
        F::from_f64(1e-4)
    } else {
        F::from_f64(1e-9)
    }
}

fn check_simplex<F: Scalar>(op: &'static str, row: &[F], tol: F) -> Result<()> {
    let mut sum = F::zero();
    for &v in row {
        if v < -tol {
            return Err(Error::invalid(format!("{op}: negative probability {v}")));
        }
        sum += v;
    }
    if (sum - F::one()).abs() > tol * F::from_f64(10.0) {
        return Err(Error::invalid(format!("{op}: row sums to {sum}, not 1")));
    }
    Ok(())
}

fn reduce_sum<F: Scalar>(data: &[F], shape: &[usize], axis: Option<usize>) -> Vec<F> {
    match axis {
        None => vec![data.iter().cloned().sum()],
        Some(ax) => {
            let outer: usize = shape[..ax].iter().product();
            let alen = shape[ax];
            let inner: usize = shape[ax + 1..].iter().product();
            let mut out = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for t in 0..alen {
                    let base = (o * alen + t) * inner;
                    let obase = o * inner;
                    for i in 0..inner {
                        out[obase + i] += data[base + i];
                    }
                }
            }
            out
        }
    }
}

// ---- backward helpers -----------------------------------------------------------

fn ensure<'a, F: Scalar>(
    grads: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    idx: usize,
) -> &'a mut Vec<F> {
    if grads[idx].is_none() {
        let numel: usize = nodes[idx].shape.iter().product();
        grads[idx] = Some(vec![F::zero(); numel]);
    }
    grads[idx].as_mut().unwrap()
}

/// Accumulate `g` (shaped like the op output) into a possibly-broadcast
/// operand: full-size adds elementwise, smaller operands sum over the
/// leading axis.
fn acc_bcast<F: Scalar>(target: &mut [F], g: &[F], weight: Option<&dyn Fn(usize) -> F>) {
    let tn = target.len().max(1);
    match weight {
        None => {
            for (i, &gv) in g.iter().enumerate() {
                target[i % tn] += gv;
            }
        }
        Some(w) => {
            for (i, &gv) in g.iter().enumerate() {
                target[i % tn] += gv * w(i);
            }
        }
    }
}

fn propagate<F: Scalar>(op: &Op<F>, g: &[F], grads: &mut [Option<Vec<F>>], nodes: &[Node<F>]) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if let Some(ai) = a.node {
                acc_bcast(ensure(grads, nodes, ai), g, None);
            }
            if let Some(bi) = b.node {
                acc_bcast(ensure(grads, nodes, bi), g, None);
            }
        }
        Op::Sub { a, b } => {
            if let Some(ai) = a.node {
                acc_bcast(ensure(grads, nodes, ai), g, None);
            }
            if let Some(bi) = b.node {
                let t = ensure(grads, nodes, bi);
                let tn = t.len().max(1);
                for (i, &gv) in g.iter().enumerate() {
                    t[i % tn] -= gv;
                }
            }
        }
        Op::Mul { a, b } => {
            // Each side scales by the other side's value at the broadcast
            // position.
            if let Some(ai) = a.node {
                let bn = b.data.len().max(1);
                let bdata = &b.data;
                acc_bcast(ensure(grads, nodes, ai), g, Some(&|i| bdata[i % bn]));
            }
            if let Some(bi) = b.node {
                let an = a.data.len().max(1);
                let adata = &a.data;
                acc_bcast(ensure(grads, nodes, bi), g, Some(&|i| adata[i % an]));
            }
        }
        Op::Scale { a, factor } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for (tv, &gv) in t.iter_mut().zip(g) {
                    *tv += gv * *factor;
                }
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                // dA = g @ B^T
                F::gemm(*m, *n, *k, F::one(), g, (*n as isize, 1), &b.data, (1, *n as isize), F::one(), t);
            }
            if let Some(bi) = b.node {
                let t = ensure(grads, nodes, bi);
                // dB = A^T @ g
                F::gemm(*k, *m, *n, F::one(), &a.data, (1, *k as isize), g, (*n as isize, 1), F::one(), t);
            }
        }
        Op::Concat { parts, axis } => {
            let outer: usize = parts[0].shape[..*axis].iter().product();
            let inner: usize = parts[0].shape[*axis + 1..].iter().product();
            let total_axis: usize = parts.iter().map(|p| p.shape[*axis]).sum();
            let mut offset = 0usize;
            for p in parts {
                let alen = p.shape[*axis];
                if let Some(pi) = p.node {
                    let t = ensure(grads, nodes, pi);
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * alen * inner;
                        for i in 0..alen * inner {
                            t[dst + i] += g[src + i];
                        }
                    }
                }
                offset += alen;
            }
        }
        Op::Slice { a, axis, start, len } => {
            if let Some(ai) = a.node {
                let outer: usize = a.shape[..*axis].iter().product();
                let alen = a.shape[*axis];
                let inner: usize = a.shape[*axis + 1..].iter().product();
                let t = ensure(grads, nodes, ai);
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        t[dst + i] += g[src + i];
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for (tv, &gv) in t.iter_mut().zip(g) {
                    *tv += gv;
                }
            }
        }
        Op::Exp { a, out } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for ((tv, &gv), &ov) in t.iter_mut().zip(g).zip(out.iter()) {
                    *tv += gv * ov;
                }
            }
        }
        Op::Log { a } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for ((tv, &gv), &xv) in t.iter_mut().zip(g).zip(a.data.iter()) {
                    *tv += gv / xv;
                }
            }
        }
        Op::Tanh { a, out } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for ((tv, &gv), &ov) in t.iter_mut().zip(g).zip(out.iter()) {
                    *tv += gv * (F::one() - ov * ov);
                }
            }
        }
        Op::Sigmoid { a, out } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for ((tv, &gv), &ov) in t.iter_mut().zip(g).zip(out.iter()) {
                    *tv += gv * ov * (F::one() - ov);
                }
            }
        }
        Op::Softplus { a } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for ((tv, &gv), &xv) in t.iter_mut().zip(g).zip(a.data.iter()) {
                    *tv += gv * sigmoid(xv);
                }
            }
        }
        Op::Softmax { a, out, width } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for r in 0..g.len() / width {
                    let range = r * width..(r + 1) * width;
                    let grow = &g[range.clone()];
                    let srow = &out[range.clone()];
                    let dot: F = grow.iter().zip(srow).map(|(&gv, &sv)| gv * sv).sum();
                    for ((tv, &gv), &sv) in t[range].iter_mut().zip(grow).zip(srow) {
                        *tv += sv * (gv - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { a, probs, width } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                for r in 0..g.len() / width {
                    let range = r * width..(r + 1) * width;
                    let grow = &g[range.clone()];
                    let prow = &probs[range.clone()];
                    let sum_g: F = grow.iter().cloned().sum();
                    for ((tv, &gv), &pv) in t[range].iter_mut().zip(grow).zip(prow) {
                        *tv += gv - pv * sum_g;
                    }
                }
            }
        }
        Op::Sum { a, axis } => {
            if let Some(ai) = a.node {
                let t = ensure(grads, nodes, ai);
                scatter_reduce(t, g, &a.shape, *axis, F::one());
            }
        }
        Op::Mean { a, axis } => {
            if let Some(ai) = a.node {
                let count = match axis {
                    None => a.data.len(),
                    Some(ax) => a.shape[*ax],
                };
                let inv = F::one() / F::from_f64(count as f64);
                let t = ensure(grads, nodes, ai);
                scatter_reduce(t, g, &a.shape, *axis, inv);
            }
        }
        Op::GatherRows { table, ids } => {
            if let Some(ti) = table.node {
                let dim = table.shape[1];
                let t = ensure(grads, nodes, ti);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = id * dim;
                    let src = r * dim;
                    for i in 0..dim {
                        t[dst + i] += g[src + i];
                    }
                }
            }
        }
        Op::KlCategorical { q, p, width } => {
            let pn = p.data.len().max(1);
            if let Some(qi) = q.node {
                let t = ensure(grads, nodes, qi);
                for (r, &gv) in g.iter().enumerate() {
                    for i in 0..*width {
                        let qv = q.data[r * width + i];
                        if qv > F::zero() {
                            let pv = p.data[(r * width + i) % pn];
                            t[r * width + i] += gv * ((qv / pv).ln() + F::one());
                        }
                    }
                }
            }
            if let Some(pi) = p.node {
                let t = ensure(grads, nodes, pi);
                let tn = t.len().max(1);
                for (r, &gv) in g.iter().enumerate() {
                    for i in 0..*width {
                        let qv = q.data[r * width + i];
                        if qv > F::zero() {
                            let pv = p.data[(r * width + i) % pn];
                            t[(r * width + i) % tn] -= gv * qv / pv;
                        }
                    }
                }
            }
        }
    }
}

/// Spread a reduced gradient back over the reduced axis (or everywhere for a
/// full reduction), scaled by `w`.
fn scatter_reduce<F: Scalar>(t: &mut [F], g: &[F], in_shape: &[usize], axis: Option<usize>, w: F) {
    match axis {
        None => {
            let gv = g[0] * w;
            for tv in t.iter_mut() {
                *tv += gv;
            }
        }
        Some(ax) => {
            let outer: usize = in_shape[..ax].iter().product();
            let alen = in_shape[ax];
            let inner: usize = in_shape[ax + 1..].iter().product();
            for o in 0..outer {
                for tstep in 0..alen {
                    let base = (o * alen + tstep) * inner;
                    let gbase = o * inner;
                    for i in 0..inner {
                        t[base + i] += g[gbase + i] * w;
                    }
                }
            }
        }
    }
}
