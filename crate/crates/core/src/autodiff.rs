//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and `backward` is a single reverse sweep.
//! Graphs are cheap and single-use: build one per training step, call
//! [`Graph::backward`], read the parameter gradients, drop it.
//!
//! Broadcasting is restricted to a `[1, c]` row operand against an `[r, c]`
//! batch operand in `add`, `sub` and `mul`. Everything else must match
//! exactly.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

/// Arguments above this are clamped before exponentiation.
pub const EXP_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

impl Axis {
    fn from_index(axis: usize) -> Result<Self, TensorError> {
        match axis {
            0 => Ok(Axis::Rows),
            1 => Ok(Axis::Cols),
            _ => Err(TensorError::Invalid {
                op: "axis",
                detail: format!("axis {axis} is not 0 or 1"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    RowDot(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sqrt(Var),
    LogSigmoid(Var),
    Scale(Var, f64),
    SumAxis(Var, Axis),
    SumAll(Var),
    SqNorm(Var),
    Softmax(Var, Axis),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    WeightedSum(Var, Vec<Var>),
    GradReverse(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    exp_clamps: usize,
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols() && b.shape().len() == 2)
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Sums `g` over rows when it was broadcast from a `[1, c]` operand.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(1, c);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j] += g.data()[i * c + j];
        }
    }
    out
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

    /// Number of times an exponential argument was clamped at [`EXP_CLAMP`].
    pub fn exp_clamp_count(&self) -> usize {
        self.exp_clamps
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        check_finite(name, &value)?;
        Ok(self.push(value, op))
    }

    /// A leaf with no gradient tracking beyond its own slot.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter as a leaf. Repeated calls with the same name
    /// return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name).ok_or_else(|| TensorError::Invalid {
            op: "param",
            detail: format!("unknown parameter '{name}'"),
        })?;
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.checked("matmul", out, Op::MatMul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.dims2(name)?;
        tb.dims2(name)?;
        if !broadcast_ok(ta, tb) {
            return Err(TensorError::Shape {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let c = ta.cols();
        let same = ta.shape() == tb.shape();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if same { tb.data()[i] } else { tb.data()[i % c] };
                f(x, y)
            })
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.checked("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.checked("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.checked("mul", out, Op::Mul(a, b))
    }

    /// `x[r, :] * s[r, 0]` for an `[r, c]` matrix and an `[r, 1]` column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = tx.dims2("scale_rows")?;
        if ts.shape() != [r, 1] {
            return Err(TensorError::Shape {
                op: "scale_rows",
                lhs: tx.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let mut out = tx.clone();
        for i in 0..r {
            let f = ts.data()[i];
            for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                *v *= f;
            }
        }
        self.checked("scale_rows", out, Op::ScaleRows(x, s))
    }

    /// Row-wise inner product: `[r, c] x [r, c] -> [r, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = ta.dims2("row_dot")?;
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: "row_dot",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = (0..r)
            .map(|i| {
                ta.data()[i * c..(i + 1) * c]
                    .iter()
                    .zip(&tb.data()[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let out = Tensor::new(vec![r, 1], data)?;
        self.checked("row_dot", out, Op::RowDot(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let out = self.value(a).map(f);
        self.checked(name, out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `exp(min(x, EXP_CLAMP))`; each clamped element bumps the warning counter.
    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let clamped = self.value(a).data().iter().filter(|&&x| x > EXP_CLAMP).count();
        self.exp_clamps += clamped;
        self.unary("exp", a, |x| x.min(EXP_CLAMP).exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "ln",
                detail: format!("non-positive argument {bad}"),
            });
        }
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative argument {bad}"),
            });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.scale(a, -1.0)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let axis = Axis::from_index(axis)?;
        let t = self.value(a);
        let (r, c) = t.dims2("sum_axis")?;
        let out = match axis {
            Axis::Rows => {
                let mut out = Tensor::zeros(1, c);
                for i in 0..r {
                    for j in 0..c {
                        out.data_mut()[j] += t.data()[i * c + j];
                    }
                }
                out
            }
            Axis::Cols => {
                let data = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
                Tensor::new(vec![r, 1], data)?
            }
        };
        self.checked("sum_axis", out, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2("mean_axis")?;
        let n = if axis == 0 { r } else { c };
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean_axis",
                detail: "mean over an empty axis".into(),
            });
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).sum();
        self.checked("sum_all", Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean_all",
                detail: "mean of an empty tensor".into(),
            });
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Squared L2 norm of all elements, as a scalar.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).sq_norm();
        self.checked("sq_norm", Tensor::scalar(s), Op::SqNorm(a))
    }

    /// Max-shifted softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let axis = Axis::from_index(axis)?;
        let t = self.value(a);
        let (r, c) = t.dims2("softmax")?;
        let mut out = t.clone();
        let lanes: Vec<Vec<usize>> = match axis {
            Axis::Cols => (0..r).map(|i| (0..c).map(|j| i * c + j).collect()).collect(),
            Axis::Rows => (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect(),
        };
        for lane in lanes {
            let max = lane.iter().map(|&k| t.data()[k]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &k in &lane {
                let e = (t.data()[k] - max).exp();
                out.data_mut()[k] = e;
                total += e;
            }
            for &k in &lane {
                out.data_mut()[k] /= total;
            }
        }
        self.checked("softmax", out, Op::Softmax(a, axis))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(*parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_cols",
            detail: "nothing to concatenate".into(),
        })?)
        .rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for i in 0..rows {
                out.data_mut()[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.checked("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Vertical stacking.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.value(*parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            detail: "nothing to concatenate".into(),
        })?)
        .cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2("concat_rows")?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.checked("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = t.dims2("slice_cols")?;
        if start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                detail: format!("columns {start}..{} out of {c}", start + len),
            });
        }
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.data_mut()[i * len..(i + 1) * len].copy_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        // Width is recoverable from the output shape.
        self.checked("slice_cols", out, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = t.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    detail: format!("row {i} out of {r}"),
                });
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        self.checked("gather_rows", out, Op::GatherRows(a, rows.to_vec()))
    }

    /// `Σ_j weights[:, j] ⊙ values[j]` with `weights: [r, n]` and each value `[r, c]`.
    pub fn weighted_sum(&mut self, weights: Var, values: &[Var]) -> Result<Var, TensorError> {
        let tw = self.value(weights);
        let (r, n) = tw.dims2("weighted_sum")?;
        if n != values.len() || n == 0 {
            return Err(TensorError::Invalid {
                op: "weighted_sum",
                detail: format!("{n} weight columns for {} values", values.len()),
            });
        }
        let first = self.value(values[0]);
        let (vr, c) = first.dims2("weighted_sum")?;
        if vr != r {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                lhs: tw.shape().to_vec(),
                rhs: first.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(r, c);
        for (j, &v) in values.iter().enumerate() {
            let tv = self.value(v);
            if tv.shape() != [r, c] {
                return Err(TensorError::Shape {
                    op: "weighted_sum",
                    lhs: vec![r, c],
                    rhs: tv.shape().to_vec(),
                });
            }
            for i in 0..r {
                let w = tw.data()[i * n + j];
                for k in 0..c {
                    out.data_mut()[i * c + k] += w * tv.data()[i * c + k];
                }
            }
        }
        self.checked("weighted_sum", out, Op::WeightedSum(weights, values.to_vec()))
    }

    /// Identity forward; multiplies the incoming gradient by `-scale` backward.
    pub fn grad_reverse(&mut self, a: Var, scale: f64) -> Result<Var, TensorError> {
        let out = self.value(a).clone();
        Ok(self.push(out, Op::GradReverse(a, scale)))
    }

    /// Copies the value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.constant(out)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        if !self.value(root).is_scalar() {
            return Err(TensorError::Invalid {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(1, 1, 1.0).reshaped_like(self.value(root)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite("backward", g).map_err(|_| TensorError::NonFinite {
                    op: op_name(&self.nodes[i].op),
                })?;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&tb.transpose()?)?);
                acc(*b, ta.transpose()?.matmul(g)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, reduce_to(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, reduce_to(&g.map(|v| -v), self.value(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let same = ta.shape() == tb.shape();
                let mut ga = g.clone();
                let mut gb_full = g.clone();
                for (i, v) in ga.data_mut().iter_mut().enumerate() {
                    *v *= if same { tb.data()[i] } else { tb.data()[i % c] };
                }
                for (i, v) in gb_full.data_mut().iter_mut().enumerate() {
                    *v *= ta.data()[i];
                }
                acc(*a, ga);
                acc(*b, reduce_to(&gb_full, tb.shape()));
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let (r, c) = (tx.rows(), tx.cols());
                let mut gx = g.clone();
                let mut gs = Tensor::zeros(r, 1);
                for i in 0..r {
                    let f = ts.data()[i];
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += g.data()[i * c + k] * tx.data()[i * c + k];
                        gx.data_mut()[i * c + k] *= f;
                    }
                    gs.data_mut()[i] = dot;
                }
                acc(*x, gx);
                acc(*s, gs);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let mut ga = tb.clone();
                let mut gb = ta.clone();
                for (k, (va, vb)) in ga.data_mut().iter_mut().zip(gb.data_mut().iter_mut()).enumerate() {
                    let gi = g.data()[k / c];
                    *va *= gi;
                    *vb *= gi;
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Tanh(a) => acc(*a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => acc(*a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Exp(a) => {
                let x = self.value(*a);
                let mut d = zip_map(g, y, |gv, yv| gv * yv);
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv > EXP_CLAMP {
                        *dv = 0.0;
                    }
                }
                acc(*a, d);
            }
            Op::Ln(a) => acc(*a, zip_map(g, self.value(*a), |gv, xv| gv / xv)),
            Op::Square(a) => acc(*a, zip_map(g, self.value(*a), |gv, xv| 2.0 * gv * xv)),
            Op::Sqrt(a) => acc(*a, zip_map(g, y, |gv, yv| if yv > 0.0 { 0.5 * gv / yv } else { 0.0 })),
            Op::LogSigmoid(a) => acc(*a, zip_map(g, self.value(*a), |gv, xv| gv * sigmoid(-xv))),
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::SumAxis(a, axis) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        d.data_mut()[i * c + j] = match axis {
                            Axis::Rows => g.data()[j],
                            Axis::Cols => g.data()[i],
                        };
                    }
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                acc(*a, self.value(*a).map(|_| gv));
            }
            Op::SqNorm(a) => {
                let gv = g.item();
                acc(*a, self.value(*a).map(|x| 2.0 * gv * x));
            }
            Op::Softmax(a, axis) => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = Tensor::zeros(r, c);
                match axis {
                    Axis::Cols => {
                        for i in 0..r {
                            let row = i * c..(i + 1) * c;
                            let dot: f64 = g.data()[row.clone()].iter().zip(&y.data()[row]).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                let k = i * c + j;
                                d.data_mut()[k] = y.data()[k] * (g.data()[k] - dot);
                            }
                        }
                    }
                    Axis::Rows => {
                        for j in 0..c {
                            let dot: f64 = (0..r).map(|i| g.data()[i * c + j] * y.data()[i * c + j]).sum();
                            for i in 0..r {
                                let k = i * c + j;
                                d.data_mut()[k] = y.data()[k] * (g.data()[k] - dot);
                            }
                        }
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Tensor::zeros(r, w);
                    for i in 0..r {
                        d.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, d);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let d = Tensor::new(vec![r, c], g.data()[offset * c..(offset + r) * c].to_vec())?;
                    acc(p, d);
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let len = y.cols();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.data_mut()[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                acc(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = x.zeros_like();
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        d.data_mut()[i * c + j] += g.data()[k * c + j];
                    }
                }
                acc(*a, d);
            }
            Op::WeightedSum(w, values) => {
                let tw = self.value(*w);
                let (r, n) = (tw.rows(), tw.cols());
                let c = y.cols();
                let mut gw = Tensor::zeros(r, n);
                for (j, &v) in values.iter().enumerate() {
                    let tv = self.value(v);
                    let mut gv = Tensor::zeros(r, c);
                    for i in 0..r {
                        let wij = tw.data()[i * n + j];
                        let mut dot = 0.0;
                        for k in 0..c {
                            let gk = g.data()[i * c + k];
                            dot += gk * tv.data()[i * c + k];
                            gv.data_mut()[i * c + k] = wij * gk;
                        }
                        gw.data_mut()[i * n + j] = dot;
                    }
                    acc(v, gv);
                }
                acc(*w, gw);
            }
            Op::GradReverse(a, scale) => acc(*a, g.map(|v| -scale * v)),
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::ScaleRows(..) => "scale_rows",
        Op::RowDot(..) => "row_dot",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Square(..) => "square",
        Op::Sqrt(..) => "sqrt",
        Op::LogSigmoid(..) => "log_sigmoid",
        Op::Scale(..) => "scale",
        Op::SumAxis(..) => "sum_axis",
        Op::SumAll(..) => "sum_all",
        Op::SqNorm(..) => "sq_norm",
        Op::Softmax(..) => "softmax",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::WeightedSum(..) => "weighted_sum",
        Op::GradReverse(..) => "grad_reverse",
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map keeps the shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Tensor {
    fn reshaped_like(self, other: &Tensor) -> Tensor {
        Tensor::new(other.shape().to_vec(), self.into_data()).expect("scalar reshape")
    }
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collects gradients for every parameter bound in `graph`. Parameters
    /// that do not reach the root get an explicit zero tensor.
    pub fn for_params(&self, graph: &Graph) -> IndexMap<String, Tensor> {
        graph
            .bound_params()
            .map(|(name, &v)| {
                let g = self.get(v).cloned().unwrap_or_else(|| graph.value(v).zeros_like());
                (name.clone(), g)
            })
            .collect()
    }
}

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
}

/// Relative error with a floor on the denominator, so that coordinates whose
/// true derivative is ~0 are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares backward() gradients against central differences, coordinate by
/// coordinate, for every parameter in `params` (or only those in `only`).
///
/// `f` builds the scalar objective on a fresh graph from a parameter store.
pub fn grad_check<F, E>(
    params: &ParamStore,
    only: Option<&[&str]>,
    step: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            detail: format!("step must be positive, got {step}"),
        }
        .into());
    }
    if !(tolerance >= 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            detail: format!("tolerance must be non-negative, got {tolerance}"),
        }
        .into());
    }
    let mut graph = Graph::new();
    let root = f(&mut graph, params)?;
    let grads = graph.backward(root)?.for_params(&graph);

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let r = f(&mut g, store)?;
        let v = g.scalar(r);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut failures = Vec::new();
    let mut checked = 0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        if let Some(filter) = only {
            if !filter.contains(&name.as_str()) {
                continue;
            }
        }
        let n = params.get(&name).map_or(0, Tensor::len);
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(analytic, numeric);
            max_rel = max_rel.max(rel);
            checked += 1;
            if !(rel < tolerance) {
                failures.push(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(GradCheckReport {
        passed: failures.is_empty() && checked > 0,
        max_rel_error: max_rel,
        checked,
        failures,
    })
}

/// Convenience for tests and the `check` command: binds each name once.
pub fn bind_all(graph: &mut Graph, store: &ParamStore) -> Result<HashMap<String, Var>, TensorError> {
    store
        .names()
        .map(|n| graph.param(store, n).map(|v| (n.clone(), v)))
        .collect()
}
