//! Reverse-mode differentiation over a linear tape of matrix primitives.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling [`Tape::backward`] on a
//! `1×1` output replays the record in reverse and returns a gradient for every recorded node.
//! A tape is confined to one thread; run independent tapes for parallel work.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// Floor added under the square root of a row norm while training.
pub const TRAINING_NORM_FLOOR: f64 = 1e-12;

/// Value written by [`Var::masked_fill`] for attention masks. Finite so that softmax stays NaN-free.
pub const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalizing a zero row is an error.
    Checked,
    /// Row norms get a small floor; never errors.
    Training,
}

/// Which dimension a reduction collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Whole tensor to `1×1`.
    All,
    /// Collapse the rows: `m×n` to `1×n`.
    Rows,
    /// Collapse the columns: `m×n` to `m×1`.
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatAxis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Softmax(usize),
    Silu(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Abs(usize),
    Normalize { src: usize, norms: Vec<f64> },
    Mean { src: usize, reduce: Reduce },
    Sum { src: usize, reduce: Reduce },
    Concat { parts: Vec<usize>, axis: ConcatAxis },
    Transpose(usize),
    MaskedFill { src: usize, mask: Vec<bool> },
    SliceRows { src: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    mode: NormMode,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by the node a [`Var`] refers to.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient with respect to `var`; all zeros when `var` does not influence the output.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2], what: &str) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::Dimension(format!(
            "{what}: cannot broadcast {}x{} with {}x{}",
            a[0], a[1], b[0], b[1]
        ))),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [rows, cols] = out;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows() == 1 { 0 } else { r };
        let rb = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols() == 1 { 0 } else { c };
            let cb = if b.cols() == 1 { 0 } else { c };
            data.push(f(a.get(ra, ca), b.get(rb, cb)));
        }
    }
    Tensor::from_raw(rows, cols, data)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(grad: &Tensor, shape: [usize; 2]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for r in 0..grad.rows() {
        let ro = if shape[0] == 1 { 0 } else { r };
        for c in 0..grad.cols() {
            let co = if shape[1] == 1 { 0 } else { c };
            let v = out.get(ro, co) + grad.get(r, c);
            out.set(ro, co, v);
        }
    }
    out
}

fn reduce_sum(t: &Tensor, reduce: Reduce) -> Tensor {
    match reduce {
        Reduce::All => Tensor::scalar(t.data().iter().sum()),
        Reduce::Rows => {
            let mut out = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::from_raw(1, t.cols(), out)
        }
        Reduce::Cols => Tensor::from_raw(
            t.rows(),
            1,
            (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect(),
        ),
    }
}

fn reduce_count(shape: [usize; 2], reduce: Reduce) -> usize {
    match reduce {
        Reduce::All => shape[0] * shape[1],
        Reduce::Rows => shape[0],
        Reduce::Cols => shape[1],
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new(mode: NormMode) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            mode,
        }
    }

    pub fn checked() -> Self {
        Self::new(NormMode::Checked)
    }

    pub fn training() -> Self {
        Self::new(NormMode::Training)
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check_owner(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable recorded on a different tape"
        );
    }

    fn unary(&self, x: Var<'_>, f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>) -> Result<Var<'_>> {
        self.check_owner(x);
        let (value, op) = {
            let nodes = self.nodes.borrow();
            f(&nodes[x.id].value)?
        };
        Ok(self.push(value, op))
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<(Tensor, Op)>,
    ) -> Result<Var<'_>> {
        self.check_owner(a);
        self.check_owner(b);
        let (value, op) = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.id].value, &nodes[b.id].value)?
        };
        Ok(self.push(value, op))
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn with_value<R>(&self, v: Var<'_>, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var<'_>) -> [usize; 2] {
        self.nodes.borrow()[v.id].value.shape()
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check_owner(output);
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if out_shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {}x{}",
                out_shape[0], out_shape[1]
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::scalar(1.0));

        fn accum(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_raw(&g, &val(*b).transpose());
                    let gb = matmul_raw(&val(*a).transpose(), &g);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, reduce_to(&g, val(*a).shape()));
                    accum(&mut grads, *b, reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, reduce_to(&g, val(*a).shape()));
                    accum(&mut grads, *b, reduce_to(&g.map(|v| -v), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let ga = broadcast_zip(&g, tb, g.shape(), |x, y| x * y);
                    let gb = broadcast_zip(&g, ta, g.shape(), |x, y| x * y);
                    accum(&mut grads, *a, reduce_to(&ga, ta.shape()));
                    accum(&mut grads, *b, reduce_to(&gb, tb.shape()));
                }
                Op::Scale(a, f) => accum(&mut grads, *a, g.map(|v| v * f)),
                Op::AddScalar(a) => accum(&mut grads, *a, g.clone()),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut out = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in out.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accum(&mut grads, *a, out);
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let d = broadcast_zip(&g, x, g.shape(), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    });
                    accum(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = broadcast_zip(&g, &node.value, g.shape(), |gv, y| gv * y);
                    accum(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let d = broadcast_zip(&g, val(*a), g.shape(), |gv, x| gv / x);
                    accum(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = broadcast_zip(&g, val(*a), g.shape(), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accum(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let d = broadcast_zip(&g, val(*a), g.shape(), |gv, x| gv * x.signum() * f64::from(x != 0.0));
                    accum(&mut grads, *a, d);
                }
                Op::Normalize { src, norms } => {
                    // dx = (dy - y (y·dy)) / r
                    let y = &node.value;
                    let mut out = Tensor::zeros(y.rows(), y.cols());
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in out.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (gv - yv * inner) / n;
                        }
                    }
                    accum(&mut grads, *src, out);
                }
                Op::Mean { src, reduce } | Op::Sum { src, reduce } => {
                    let shape = val(*src).shape();
                    let scale = if matches!(node.op, Op::Mean { .. }) {
                        1.0 / reduce_count(shape, *reduce) as f64
                    } else {
                        1.0
                    };
                    let zero = Tensor::zeros(shape[0], shape[1]);
                    accum(
                        &mut grads,
                        *src,
                        broadcast_zip(&zero, &g, shape, |_, gv| gv * scale),
                    );
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let [pr, pc] = val(p).shape();
                        let mut piece = Tensor::zeros(pr, pc);
                        for r in 0..pr {
                            for c in 0..pc {
                                let v = match axis {
                                    ConcatAxis::Rows => g.get(offset + r, c),
                                    ConcatAxis::Cols => g.get(r, offset + c),
                                };
                                piece.set(r, c, v);
                            }
                        }
                        offset += match axis {
                            ConcatAxis::Rows => pr,
                            ConcatAxis::Cols => pc,
                        };
                        accum(&mut grads, p, piece);
                    }
                }
                Op::Transpose(a) => accum(&mut grads, *a, g.transpose()),
                Op::MaskedFill { src, mask } => {
                    let mut d = g.clone();
                    for (v, &m) in d.data_mut().iter_mut().zip(mask) {
                        if m {
                            *v = 0.0;
                        }
                    }
                    accum(&mut grads, *src, d);
                }
                Op::SliceRows { src, start } => {
                    let [sr, sc] = val(*src).shape();
                    let mut full = Tensor::zeros(sr, sc);
                    full.data_mut()[start * sc..start * sc + g.len()].copy_from_slice(g.data());
                    accum(&mut grads, *src, full);
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.shape(*self)
    }

    /// The single entry of a `1×1` variable.
    pub fn item(&self) -> f64 {
        self.tape.with_value(*self, |t| t.data()[0])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, |a, b| {
            if a.cols() != b.rows() {
                return Err(Error::Dimension(format!(
                    "matmul {}x{} by {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
            Ok((matmul_raw(a, b), Op::MatMul(self.id, other.id)))
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, |a, b| {
            let shape = broadcast_shape(a.shape(), b.shape(), "add")?;
            Ok((broadcast_zip(a, b, shape, |x, y| x + y), Op::Add(self.id, other.id)))
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, |a, b| {
            let shape = broadcast_shape(a.shape(), b.shape(), "sub")?;
            Ok((broadcast_zip(a, b, shape, |x, y| x - y), Op::Sub(self.id, other.id)))
        })
    }

    /// Element-wise product with row/column broadcasting.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, |a, b| {
            let shape = broadcast_shape(a.shape(), b.shape(), "hadamard")?;
            Ok((broadcast_zip(a, b, shape, |x, y| x * y), Op::Mul(self.id, other.id)))
        })
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.tape
            .unary(self, |x| Ok((x.map(|v| v * factor), Op::Scale(self.id, factor))))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.tape
            .unary(self, |x| Ok((x.map(|v| v + c), Op::AddScalar(self.id))))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.tape.unary(self, |x| {
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = out.row_slice_mut(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Ok((out, Op::Softmax(self.id)))
        })
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.tape
            .unary(self, |x| Ok((x.map(|v| v * sigmoid(v)), Op::Silu(self.id))))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.unary(self, |x| Ok((x.map(f64::exp), Op::Exp(self.id))))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.unary(self, |x| {
            if let Some(v) = x.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::NonFinite(format!("log of non-positive value {v}")));
            }
            Ok((x.map(f64::ln), Op::Log(self.id)))
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape
            .unary(self, |x| Ok((x.map(|v| v.max(0.0)), Op::Relu(self.id))))
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.tape.unary(self, |x| Ok((x.map(f64::abs), Op::Abs(self.id))))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Row-wise ℓ2 normalization following the tape's [`NormMode`].
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        match self.tape.mode {
            NormMode::Checked => self.normalize_rows_inner(0.0),
            NormMode::Training => self.normalize_rows_inner(TRAINING_NORM_FLOOR),
        }
    }

    /// `x / sqrt(‖x‖² + eps)` per row; `eps` must be positive.
    pub fn normalize_rows_eps(self, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("normalization eps must be positive, got {eps}")));
        }
        self.normalize_rows_inner(eps)
    }

    fn normalize_rows_inner(self, eps: f64) -> Result<Var<'t>> {
        self.tape.unary(self, |x| {
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let sq: f64 = x.row_slice(r).iter().map(|v| v * v).sum();
                let n = (sq + eps).sqrt();
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::DegenerateNorm(format!(
                        "row {r} of a {}x{} tensor has norm {n}",
                        x.rows(),
                        x.cols()
                    )));
                }
                for v in out.row_slice_mut(r) {
                    *v /= n;
                }
                norms.push(n);
            }
            Ok((out, Op::Normalize { src: self.id, norms }))
        })
    }

    pub fn mean(self, reduce: Reduce) -> Result<Var<'t>> {
        self.tape.unary(self, |x| {
            let n = reduce_count(x.shape(), reduce) as f64;
            Ok((reduce_sum(x, reduce).map(|v| v / n), Op::Mean { src: self.id, reduce }))
        })
    }

    pub fn sum(self, reduce: Reduce) -> Result<Var<'t>> {
        self.tape
            .unary(self, |x| Ok((reduce_sum(x, reduce), Op::Sum { src: self.id, reduce })))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape
            .unary(self, |x| Ok((x.transpose(), Op::Transpose(self.id))))
    }

    /// Replaces entries where `mask` is true with [`MASKED`]; no gradient flows through them.
    pub fn masked_fill(self, mask: &[bool]) -> Result<Var<'t>> {
        self.tape.unary(self, |x| {
            if mask.len() != x.len() {
                return Err(Error::Dimension(format!(
                    "mask of length {} for a {}x{} tensor",
                    mask.len(),
                    x.rows(),
                    x.cols()
                )));
            }
            let mut out = x.clone();
            for (v, &m) in out.data_mut().iter_mut().zip(mask) {
                if m {
                    *v = MASKED;
                }
            }
            Ok((out, Op::MaskedFill { src: self.id, mask: mask.to_vec() }))
        })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.unary(self, |x| {
            if len == 0 || start + len > x.rows() {
                return Err(Error::Dimension(format!(
                    "row slice {start}..{} of a tensor with {} rows",
                    start + len,
                    x.rows()
                )));
            }
            let c = x.cols();
            let data = x.data()[start * c..(start + len) * c].to_vec();
            Ok((Tensor::from_raw(len, c, data), Op::SliceRows { src: self.id, start }))
        })
    }

    pub fn concat(parts: &[Var<'t>], axis: ConcatAxis) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let tape = first.tape;
        for p in parts {
            tape.check_owner(*p);
        }
        let value = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            match axis {
                ConcatAxis::Rows => {
                    let cols = vals[0].cols();
                    if vals.iter().any(|v| v.cols() != cols) {
                        return Err(Error::Dimension("row concat with differing widths".into()));
                    }
                    let rows = vals.iter().map(|v| v.rows()).sum();
                    let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                    Tensor::from_raw(rows, cols, data)
                }
                ConcatAxis::Cols => {
                    let rows = vals[0].rows();
                    if vals.iter().any(|v| v.rows() != rows) {
                        return Err(Error::Dimension("column concat with differing heights".into()));
                    }
                    let cols = vals.iter().map(|v| v.cols()).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for v in &vals {
                            data.extend_from_slice(v.row_slice(r));
                        }
                    }
                    Tensor::from_raw(rows, cols, data)
                }
            }
        };
        Ok(tape.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }
}
