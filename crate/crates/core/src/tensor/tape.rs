//! Wengert-list reverse-mode autodiff.
//!
//! A `Tape` owns an append-only arena of nodes; every operation records its
//! output value, parent ids, and a backward closure mapping the upstream
//! gradient to per-parent gradients. Construction order is the topological
//! order, so `backward` is a single reverse sweep visiting each node once.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

/// Per-parent gradients produced by one node's backward rule.
type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    op: &'static str,
    is_leaf: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Values a backward closure may read: parent values and the node's own output.
struct BackwardCtx<'a> {
    nodes: &'a [Node],
    parents: &'a [usize],
    out: usize,
}

impl BackwardCtx<'_> {
    fn parent(&self, i: usize) -> &Tensor {
        &self.nodes[self.parents[i]].value
    }

    fn output(&self) -> &Tensor {
        &self.nodes[self.out].value
    }
}

#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable input: gradients are reported for leaves.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.alloc(value, true)
    }

    /// Non-differentiable input: labels, frozen noise draws, dropout masks.
    pub fn constant(&self, value: Tensor) -> Var {
        self.alloc(value, false)
    }

    fn alloc(&self, value: Tensor, is_leaf: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            op: if is_leaf { "leaf" } else { "constant" },
            is_leaf,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            parents,
            backward: Some(backward),
            op,
            is_leaf: false,
        });
        Ok(Var {
            tape: self.clone(),
            id,
        })
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one tape node. Cheap to clone; all arithmetic records new nodes.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the swept loss with respect to `v`; zeros when `v` was not
    /// on any path to the loss.
    pub fn get(&self, v: &Var) -> Tensor {
        assert!(
            self.tape.same_tape(&v.tape),
            "gradient requested for a variable from a different tape"
        );
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.tape.inner.borrow().nodes[v.id].value.shape()),
        }
    }

    /// True when a nonzero gradient reached `v`.
    pub fn is_nonzero(&self, v: &Var) -> bool {
        assert!(self.tape.same_tape(&v.tape));
        match &self.grads[v.id] {
            Some(g) => g.data().iter().any(|&x| x != 0.0),
            None => false,
        }
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.numel()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn is_leaf(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].is_leaf
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn check_mate(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch { op })
        }
    }

    /// Reverse sweep from a scalar loss. Each node's backward rule fires at
    /// most once; produced gradients are checked for finiteness and attributed
    /// to the producing operation on failure.
    pub fn backward(&self) -> Result<Gradients> {
        let inner = self.tape.inner.borrow();
        let loss = &inner.nodes[self.id].value;
        if !loss.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(inner.nodes.len());
        grads.resize_with(inner.nodes.len(), || None);
        grads[self.id] = Some(Tensor::full(loss.shape(), 1.0));
        for id in (0..=self.id).rev() {
            let node = &inner.nodes[id];
            let Some(back) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                nodes: &inner.nodes,
                parents: &node.parents,
                out: id,
            };
            let parent_grads = back(&ctx, &upstream);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            grads[id] = Some(upstream);
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !pg.all_finite() {
                    return Err(TensorError::NonFinite { op: node.op });
                }
                debug_assert_eq!(pg.shape(), inner.nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        drop(inner);
        Ok(Gradients {
            tape: self.tape.clone(),
            grads,
        })
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: BackwardFn,
    ) -> Result<Var> {
        self.check_mate(other, op)?;
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[other.id].value;
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        drop(inner);
        self.tape.push(op, value, vec![self.id, other.id], back)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "add",
            |x, y| x + y,
            Box::new(|_, g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "sub",
            |x, y| x - y,
            Box::new(|_, g| {
                let neg = Tensor::from_parts(g.shape().to_vec(), g.data().iter().map(|x| -x).collect());
                vec![g.clone(), neg]
            }),
        )
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "mul",
            |x, y| x * y,
            Box::new(|ctx, g| {
                let a = ctx.parent(0);
                let b = ctx.parent(1);
                let ga = zip_map(g, b, |g, b| g * b);
                let gb = zip_map(g, a, |g, a| g * a);
                vec![ga, gb]
            }),
        )
    }

    /// Broadcast-add a row vector `[C]` over the rows of `[.., C]`.
    pub fn add_rowvec(&self, bias: &Var) -> Result<Var> {
        self.check_mate(bias, "add_rowvec")?;
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let b = &inner.nodes[bias.id].value;
        let c = *x.shape().last().unwrap_or(&0);
        if b.rank() != 1 || b.shape()[0] != c || x.rank() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let bd = b.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        drop(inner);
        self.tape.push(
            "add_rowvec",
            value,
            vec![self.id, bias.id],
            Box::new(move |_, g| {
                let mut gb = vec![0.0; c];
                for (i, &v) in g.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                vec![g.clone(), Tensor::from_parts(vec![c], gb)]
            }),
        )
    }

    // ---- elementwise unary / scalar --------------------------------------

    fn unary(&self, op: &'static str, f: impl Fn(f64) -> f64, back: BackwardFn) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        drop(inner);
        self.tape.push(op, value, vec![self.id], back)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary("add_scalar", |x| x + c, Box::new(|_, g| vec![g.clone()]))
    }

    pub fn sub_scalar(&self, c: f64) -> Result<Var> {
        self.unary("sub_scalar", |x| x - c, Box::new(|_, g| vec![g.clone()]))
    }

    /// Multiply by a compile-time-known constant (`scale`).
    pub fn mul_scalar(&self, c: f64) -> Result<Var> {
        self.unary(
            "mul_scalar",
            |x| x * c,
            Box::new(move |_, g| vec![scale_tensor(g, c)]),
        )
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(
            "relu",
            |x| x.max(0.0),
            Box::new(|ctx, g| {
                let x = ctx.parent(0);
                vec![zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 })]
            }),
        )
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary(
            "softplus",
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Box::new(|ctx, g| {
                let x = ctx.parent(0);
                vec![zip_map(g, x, |g, x| g / (1.0 + (-x).exp()))]
            }),
        )
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(
            "exp",
            |x| x.exp(),
            Box::new(|ctx, g| {
                let y = ctx.output();
                vec![zip_map(g, y, |g, y| g * y)]
            }),
        )
    }

    pub fn log(&self) -> Result<Var> {
        {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            if let Some(&bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(TensorError::LogDomain {
                    op: "log",
                    value: bad,
                });
            }
        }
        self.unary(
            "log",
            |x| x.ln(),
            Box::new(|ctx, g| {
                let x = ctx.parent(0);
                vec![zip_map(g, x, |g, x| g / x)]
            }),
        )
    }

    // ---- matmul / transpose ----------------------------------------------

    /// Matrix product. Accepts `[K]`, `[M,K]`, or `[B,M,K]` on the left and
    /// `[K,N]` or `[B,K,N]` on the right; a missing batch dimension broadcasts.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_mate(other, "matmul")?;
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[other.id].value;
        let dims = MatmulDims::resolve(a.shape(), b.shape())?;
        let value = dims.forward(a, b);
        drop(inner);
        self.tape.push(
            "matmul",
            value,
            vec![self.id, other.id],
            Box::new(move |ctx, g| dims.backward(ctx.parent(0), ctx.parent(1), g)),
        )
    }

    pub fn transpose(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        if x.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "rank-2 tensor".into(),
                got: x.shape().to_vec(),
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let value = transpose2(x, m, n);
        drop(inner);
        self.tape.push(
            "transpose",
            value,
            vec![self.id],
            Box::new(move |_, g| vec![transpose2(g, n, m)]),
        )
    }

    // ---- structured ops ---------------------------------------------------

    /// Row-stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        if x.rank() == 0 {
            return Err(TensorError::BadShape {
                op: "softmax_lastdim",
                expected: "rank >= 1".into(),
                got: x.shape().to_vec(),
            });
        }
        let n = *x.shape().last().unwrap();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        drop(inner);
        self.tape.push(
            "softmax_lastdim",
            value,
            vec![self.id],
            Box::new(move |ctx, g| {
                let y = ctx.output();
                let mut gx = vec![0.0; y.numel()];
                for (r, (yrow, grow)) in y.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for (j, out) in gx[r * n..(r + 1) * n].iter_mut().enumerate() {
                        *out = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![Tensor::from_parts(y.shape().to_vec(), gx)]
            }),
        )
    }

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat_lastdim(parts: &[&Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(TensorError::BadShape {
                op: "concat_lastdim",
                expected: "non-empty part list".into(),
                got: vec![],
            });
        };
        for p in &parts[1..] {
            first.check_mate(p, "concat_lastdim")?;
        }
        let tape = first.tape.clone();
        let inner = tape.inner.borrow();
        let lead: Vec<usize> = {
            let s = inner.nodes[first.id].value.shape();
            if s.is_empty() {
                return Err(TensorError::BadShape {
                    op: "concat_lastdim",
                    expected: "rank >= 1 parts".into(),
                    got: s.to_vec(),
                });
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = inner.nodes[p.id].value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: inner.nodes[first.id].value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = inner.nodes[p.id].value.data();
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let value = Tensor::from_parts(shape, data);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        drop(inner);
        tape.push(
            "concat_lastdim",
            value,
            ids,
            Box::new(move |_, g| {
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut part = vec![0.0; rows * w];
                    for r in 0..rows {
                        part[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    let mut shape = lead.clone();
                    shape.push(w);
                    out.push(Tensor::from_parts(shape, part));
                    off += w;
                }
                out
            }),
        )
    }

    /// Columns `[start, start+width)` of the last axis.
    pub fn slice_lastdim(&self, start: usize, width: usize) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let last = x.shape().last().copied().unwrap_or(0);
        if x.rank() == 0 || width == 0 || start + width > last {
            return Err(TensorError::BadShape {
                op: "slice_lastdim",
                expected: format!("rank >= 1 with last dim >= {}", start + width),
                got: x.shape().to_vec(),
            });
        }
        let rows = x.numel() / last;
        let mut data = vec![0.0; rows * width];
        for r in 0..rows {
            data[r * width..(r + 1) * width]
                .copy_from_slice(&x.data()[r * last + start..r * last + start + width]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let full_shape = x.shape().to_vec();
        let value = Tensor::from_parts(shape, data);
        drop(inner);
        self.tape.push(
            "slice_lastdim",
            value,
            vec![self.id],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; rows * last];
                for r in 0..rows {
                    gx[r * last + start..r * last + start + width]
                        .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                vec![Tensor::from_parts(full_shape.clone(), gx)]
            }),
        )
    }

    /// Reinterpret the value with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.contains(&0) {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("shape with {} elements and no zero dims", x.numel()),
                got: shape.to_vec(),
            });
        }
        let old_shape = x.shape().to_vec();
        let value = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        drop(inner);
        self.tape.push(
            "reshape",
            value,
            vec![self.id],
            Box::new(move |_, g| {
                vec![Tensor::from_parts(old_shape.clone(), g.data().to_vec())]
            }),
        )
    }

    /// Select index `i` along the first axis, dropping that axis.
    pub fn slice_axis0(&self, i: usize) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        if x.rank() < 2 || i >= x.shape()[0] {
            return Err(TensorError::BadShape {
                op: "slice_axis0",
                expected: format!("rank >= 2 with first dim > {i}"),
                got: x.shape().to_vec(),
            });
        }
        let stride: usize = x.shape()[1..].iter().product();
        let sub_shape = x.shape()[1..].to_vec();
        let full = x.shape()[0];
        let data = x.data()[i * stride..(i + 1) * stride].to_vec();
        let value = Tensor::from_parts(sub_shape, data);
        drop(inner);
        self.tape.push(
            "slice_axis0",
            value,
            vec![self.id],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; full * stride];
                gx[i * stride..(i + 1) * stride].copy_from_slice(g.data());
                let mut shape = vec![full];
                shape.extend_from_slice(g.shape());
                vec![Tensor::from_parts(shape, gx)]
            }),
        )
    }

    /// Shift rows of `[L, D]` down by `offset` (up when negative); vacated
    /// rows are zero. Linear, so backward shifts the other way.
    pub fn shift_rows(&self, offset: i64) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        if x.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "shift_rows",
                expected: "rank-2 tensor".into(),
                got: x.shape().to_vec(),
            });
        }
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let value = shifted(x, l, d, offset);
        drop(inner);
        self.tape.push(
            "shift_rows",
            value,
            vec![self.id],
            Box::new(move |_, g| vec![shifted(g, l, d, -offset)]),
        )
    }

    /// Truncate or zero-pad rows of `[L, D]` to exactly `target` rows.
    pub fn fit_rows(&self, target: usize) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        if x.rank() != 2 || target == 0 {
            return Err(TensorError::BadShape {
                op: "fit_rows",
                expected: format!("rank-2 tensor and target > 0 (target={target})"),
                got: x.shape().to_vec(),
            });
        }
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let keep = l.min(target);
        let mut data = vec![0.0; target * d];
        data[..keep * d].copy_from_slice(&x.data()[..keep * d]);
        let value = Tensor::from_parts(vec![target, d], data);
        drop(inner);
        self.tape.push(
            "fit_rows",
            value,
            vec![self.id],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; l * d];
                gx[..keep * d].copy_from_slice(&g.data()[..keep * d]);
                vec![Tensor::from_parts(vec![l, d], gx)]
            }),
        )
    }

    /// Arithmetic mean over the sequence axis: `[T, D] -> [D]`.
    pub fn mean_over_time(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        if x.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "mean_over_time",
                expected: "rank-2 tensor".into(),
                got: x.shape().to_vec(),
            });
        }
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (acc, &v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / t as f64;
        for v in data.iter_mut() {
            *v *= inv;
        }
        let value = Tensor::from_parts(vec![d], data);
        drop(inner);
        self.tape.push(
            "mean_over_time",
            value,
            vec![self.id],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; t * d];
                for row in gx.chunks_mut(d) {
                    for (o, &v) in row.iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                vec![Tensor::from_parts(vec![t, d], gx)]
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let total: f64 = x.data().iter().sum();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar_unchecked(total);
        drop(inner);
        self.tape.push(
            "sum",
            value,
            vec![self.id],
            Box::new(move |_, g| vec![Tensor::from_parts(shape.clone(), vec![g.item(); shape.iter().product()])]),
        )
    }
}

impl Tensor {
    /// Scalar without the finiteness assert; `push` re-validates.
    fn scalar_unchecked(v: f64) -> Tensor {
        Tensor::from_parts(Vec::new(), vec![v])
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn scale_tensor(t: &Tensor, c: f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())
}

fn transpose2(x: &Tensor, m: usize, n: usize) -> Tensor {
    let src = x.data();
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = src[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], data)
}

fn shifted(x: &Tensor, l: usize, d: usize, offset: i64) -> Tensor {
    let mut data = vec![0.0; l * d];
    for t in 0..l as i64 {
        let s = t - offset;
        if s >= 0 && s < l as i64 {
            let (t, s) = (t as usize, s as usize);
            data[t * d..(t + 1) * d].copy_from_slice(&x.data()[s * d..(s + 1) * d]);
        }
    }
    Tensor::from_parts(vec![l, d], data)
}

/// Resolved matmul geometry: batch-broadcast `[B?,M,K] x [B?,K,N]`, with a
/// rank-1 left operand treated as `[1,K]` and squeezed back.
#[derive(Clone, Copy)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    a_vec: bool,
}

impl MatmulDims {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        let (a_batch, m, k1, a_vec) = match a.len() {
            1 => (1, 1, a[0], true),
            2 => (1, a[0], a[1], false),
            3 => (a[0], a[1], a[2], false),
            _ => return Err(err()),
        };
        let (b_batch, k2, n) = match b.len() {
            2 => (1, b[0], b[1]),
            3 => (b[0], b[1], b[2]),
            _ => return Err(err()),
        };
        if k1 != k2 {
            return Err(err());
        }
        let a_batched = a.len() == 3;
        let b_batched = b.len() == 3;
        let batch = match (a_batched, b_batched) {
            (true, true) if a_batch != b_batch => return Err(err()),
            (true, _) => a_batch,
            (_, true) => b_batch,
            _ => 1,
        };
        if a_vec && b_batched {
            return Err(err());
        }
        Ok(MatmulDims {
            batch,
            m,
            k: k1,
            n,
            a_batched,
            b_batched,
            a_vec,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_vec {
            vec![self.n]
        } else if self.a_batched || self.b_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }

    fn forward(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; self.batch * m * n];
        for bi in 0..self.batch {
            let asl = slice_batch(a.data(), bi, self.a_batched, m * k);
            let bsl = slice_batch(b.data(), bi, self.b_batched, k * n);
            mm_nn_acc(asl, bsl, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        Tensor::from_parts(self.out_shape(), out)
    }

    fn backward(&self, a: &Tensor, b: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = vec![0.0; if self.a_batched { self.batch } else { 1 } * m * k];
        let mut gb = vec![0.0; if self.b_batched { self.batch } else { 1 } * k * n];
        for bi in 0..self.batch {
            let gsl = &g.data()[bi * m * n..(bi + 1) * m * n];
            let asl = slice_batch(a.data(), bi, self.a_batched, m * k);
            let bsl = slice_batch(b.data(), bi, self.b_batched, k * n);
            let ga_sl = if self.a_batched {
                &mut ga[bi * m * k..(bi + 1) * m * k]
            } else {
                &mut ga[..]
            };
            mm_nt_acc(gsl, bsl, m, n, k, ga_sl);
            let gb_sl = if self.b_batched {
                &mut gb[bi * k * n..(bi + 1) * k * n]
            } else {
                &mut gb[..]
            };
            mm_tn_acc(asl, gsl, m, k, n, gb_sl);
        }
        vec![
            Tensor::from_parts(a.shape().to_vec(), ga),
            Tensor::from_parts(b.shape().to_vec(), gb),
        ]
    }
}

fn slice_batch(data: &[f64], bi: usize, batched: bool, stride: usize) -> &[f64] {
    if batched {
        &data[bi * stride..(bi + 1) * stride]
    } else {
        &data[..stride]
    }
}

/// out[m,n] += a[m,k] * b[k,n]
fn mm_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T  (i.e. g · b-transposed)
fn mm_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (l, o) in orow.iter_mut().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn mm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        Tensor::new(&[r, c], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.leaf(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.leaf(t2(&[&[3.0, 4.0], &[5.0, 6.0]]));
        assert_eq!(i.matmul(&b).unwrap().value(), b.value());

        let a = tape.leaf(t2(&[&[1.0, 2.0]]));
        let c = tape.leaf(t2(&[&[3.0], &[4.0]]));
        assert_eq!(a.matmul(&c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_grad_matches_frozen_hand_value() {
        // d/dA sum(A x B) = ones · B^T; with B all-ones that is [[2,2],[2,2]].
        let tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(t2(&[&[1.0, 1.0], &[1.0, 1.0]]));
        let loss = a.matmul(&b).unwrap().sum().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&a).data(), &[2.0, 2.0, 2.0, 2.0]);
        // dL/dB = A^T · ones: each row of the gradient repeats a column sum of A.
        assert_eq!(grads.get(&b).data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_batched_matches_per_slice() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin()));
        let b = tape.leaf(Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.11).cos()));
        let batched = a.matmul(&b).unwrap().value();
        for bi in 0..2 {
            let asl = tape.leaf(Tensor::new(&[3, 4], a.value().data()[bi * 12..(bi + 1) * 12].to_vec()).unwrap());
            let single = asl.matmul(&b).unwrap().value();
            assert_eq!(&batched.data()[bi * 15..(bi + 1) * 15], single.data());
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn elementwise_frozen_values() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!(x.add(&y).unwrap().value().data(), &[4.0, 6.0]);

        let z = tape.leaf(Tensor::scalar(0.0));
        let sp = z.softplus().unwrap().item();
        assert!((sp - std::f64::consts::LN_2).abs() < 1e-15, "softplus(0) = ln 2, got {sp}");

        let r = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(r.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softplus_is_stable_far_from_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![-745.0, 745.0]).unwrap());
        let y = x.softplus().unwrap().value();
        assert!(y.data()[0] >= 0.0 && y.data()[0] < 1e-300);
        assert!((y.data()[1] - 745.0).abs() < 1e-9);
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            x.log(),
            Err(TensorError::LogDomain { op: "log", value }) if value == 0.0
        ));
    }

    #[test]
    fn softmax_frozen_values_and_row_sums() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        assert_eq!(x.softmax_lastdim().unwrap().value().data(), &[0.5, 0.5]);

        let big = tape.leaf(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        assert_eq!(big.softmax_lastdim().unwrap().value().data(), &[0.5, 0.5]);

        // closed form: e^0 / (e^0 + e^{ln 3}) = 1/4.
        let skew = tape.leaf(Tensor::new(&[2], vec![0.0, 3.0_f64.ln()]).unwrap());
        let y = skew.softmax_lastdim().unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);

        let m = tape.leaf(Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.7).sin() * 4.0));
        let y = m.softmax_lastdim().unwrap().value();
        for row in y.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_invariant_to_constant_logit_shift() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.9).cos() * 3.0));
        let y0 = x.softmax_lastdim().unwrap().value();
        let y1 = x.add_scalar(17.25).unwrap().softmax_lastdim().unwrap().value();
        assert!(y0.max_abs_diff(&y1) < 1e-12);
    }

    #[test]
    fn concat_laws() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(&[1], vec![3.0]).unwrap());
        let cat = Var::concat_lastdim(&[&a, &b]).unwrap();
        assert_eq!(cat.value().data(), &[1.0, 2.0, 3.0]);

        let single = Var::concat_lastdim(&[&a]).unwrap();
        assert_eq!(single.value(), a.value());

        let p = tape.leaf(Tensor::zeros(&[2, 2]));
        let wide = Var::concat_lastdim(&[&p, &p, &p]).unwrap();
        assert_eq!(wide.shape(), vec![2, 6]);

        assert!(Var::concat_lastdim(&[]).is_err());
    }

    #[test]
    fn concat_backward_partitions_gradient_exactly() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 + 10.0));
        let cat = Var::concat_lastdim(&[&a, &b]).unwrap();
        let w = tape.constant(Tensor::from_fn(&[2, 5], |i| (i + 1) as f64));
        let loss = cat.mul(&w).unwrap().sum().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&a).data(), &[1.0, 2.0, 6.0, 7.0]);
        assert_eq!(grads.get(&b).data(), &[3.0, 4.0, 5.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn mean_over_time_frozen_values_and_grad() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[&[2.0, 4.0], &[4.0, 8.0]]));
        let m = x.mean_over_time().unwrap();
        assert_eq!(m.value().data(), &[3.0, 6.0]);

        let one_row = tape.leaf(t2(&[&[5.0, 7.0]]));
        assert_eq!(one_row.mean_over_time().unwrap().value().data(), &[5.0, 7.0]);

        let grads = m.sum().unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn backward_frozen_values() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap());
        let grads = x.sum().unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[1.0, 1.0, 1.0]);

        let y = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let loss = y.mul(&y).unwrap().sum().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let grads = x.sum().unwrap().backward().unwrap();
        assert_eq!(grads.get(&unused).data(), &[0.0, 0.0, 0.0]);
        assert!(!grads.is_nonzero(&unused));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            x.backward(),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn cross_tape_operands_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(2.0));
        assert!(matches!(
            a.add(&b),
            Err(TensorError::TapeMismatch { op: "add" })
        ));
    }

    #[test]
    fn overflow_is_reported_with_producing_op() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1], vec![1000.0]).unwrap());
        assert!(matches!(
            x.exp(),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn shift_and_fit_rows_laws() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let down = x.shift_rows(1).unwrap();
        assert_eq!(down.value().data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let up = x.shift_rows(-1).unwrap();
        assert_eq!(up.value().data(), &[3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);

        let trunc = x.fit_rows(2).unwrap();
        assert_eq!(trunc.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let pad = x.fit_rows(4).unwrap();
        assert_eq!(&pad.value().data()[6..], &[0.0, 0.0]);

        // gradient of sum through truncation: kept rows 1, dropped rows 0.
        let grads = trunc.sum().unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_lastdim_inverts_concat() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 6], |i| i as f64));
        let a = x.slice_lastdim(0, 2).unwrap();
        let b = x.slice_lastdim(2, 4).unwrap();
        assert_eq!(a.shape(), vec![3, 2]);
        assert_eq!(a.value().data(), &[0.0, 1.0, 6.0, 7.0, 12.0, 13.0]);
        let cat = Var::concat_lastdim(&[&a, &b]).unwrap();
        assert_eq!(cat.value(), x.value());

        let grads = a.sum().unwrap().backward().unwrap();
        let gx = grads.get(&x);
        for r in 0..3 {
            assert_eq!(&gx.data()[r * 6..r * 6 + 2], &[1.0, 1.0]);
            assert_eq!(&gx.data()[r * 6 + 2..(r + 1) * 6], &[0.0; 4]);
        }
    }

    #[test]
    fn reshape_preserves_data_and_routes_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let flat = x.reshape(&[6]).unwrap();
        assert_eq!(flat.value().data(), x.value().data());
        assert!(x.reshape(&[4]).is_err());

        let scalar = tape.leaf(Tensor::new(&[1], vec![2.0]).unwrap()).reshape(&[]).unwrap();
        let grads = scalar.backward().unwrap();
        assert_eq!(grads.grads.len(), tape.len());
    }

    #[test]
    fn slice_axis0_selects_and_routes_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let s = x.slice_axis0(1).unwrap();
        assert_eq!(s.value().data(), &[4.0, 5.0, 6.0, 7.0]);
        let grads = s.sum().unwrap().backward().unwrap();
        let gx = grads.get(&x);
        assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn add_rowvec_broadcasts_and_sums_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(Tensor::new(&[2], vec![10.0, 20.0]).unwrap());
        let y = x.add_rowvec(&b).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 13.0, 24.0]);
        let grads = y.sum().unwrap().backward().unwrap();
        assert_eq!(grads.get(&b).data(), &[2.0, 2.0]);
        assert_eq!(grads.get(&x).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn transpose_round_trip_and_grad() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let tr = x.transpose().unwrap();
        assert_eq!(tr.shape(), vec![3, 2]);
        assert_eq!(tr.value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tr.transpose().unwrap();
        assert_eq!(back.value(), x.value());

        let w = tape.constant(Tensor::from_fn(&[3, 2], |i| (i + 1) as f64));
        let grads = tr.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let build = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.61).sin()));
            let w = tape.leaf(Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.23).cos()));
            let y = x
                .matmul(&w)
                .unwrap()
                .softplus()
                .unwrap()
                .softmax_lastdim()
                .unwrap()
                .sum()
                .unwrap();
            let grads = y.backward().unwrap();
            (y.item(), grads.get(&x), grads.get(&w))
        };
        let (v1, gx1, gw1) = build();
        let (v2, gx2, gw2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
