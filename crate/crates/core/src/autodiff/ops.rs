//! Primitive operations and their vector-Jacobian products.
//!
//! Every VJP is written in terms of the public primitives below, so running a
//! backward pass with recording enabled yields a graph that can itself be
//! differentiated.

use super::element::Element;
use super::tensor::{strict_finite, Tensor};
use super::AutodiffError;

#[derive(Debug, Clone)]
pub(crate) enum Op<T: Element> {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Square,
    NormalCdf,
    SoftmaxLast,
    MatMul { shared_rhs: bool },
    TransposeLast2,
    Reshape,
    SumAxis { axis: usize },
    ExpandAxis { axis: usize },
    ConcatLast { widths: Vec<usize> },
    SliceLast { start: usize },
    PadLast { start: usize },
    GatherRows { index: Vec<usize> },
    ScatterRows { index: Vec<usize> },
}

/// Identifier of a primitive, used by [`apply_primitive`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sqrt,
    Square,
    NormalCdf,
    SoftmaxLast,
    MatMul,
    TransposeLast2,
    Reshape(Vec<usize>),
    SumAxis(usize),
    ExpandAxis { axis: usize, extent: usize },
    ConcatLast,
    SliceLast { start: usize, len: usize },
    PadLast { start: usize, total: usize },
    GatherRows(Vec<usize>),
    ScatterRows { index: Vec<usize>, rows: usize },
}

impl<T: Element> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::NormalCdf => "normal_cdf",
            Op::SoftmaxLast => "softmax",
            Op::MatMul { .. } => "matmul",
            Op::TransposeLast2 => "transpose",
            Op::Reshape => "reshape",
            Op::SumAxis { .. } => "sum_axis",
            Op::ExpandAxis { .. } => "expand_axis",
            Op::ConcatLast { .. } => "concat",
            Op::SliceLast { .. } => "slice",
            Op::PadLast { .. } => "pad",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }
}

/// Applies a primitive by identifier.
pub fn apply_primitive<T: Element>(
    kind: &Primitive,
    inputs: &[&Tensor<T>],
) -> Result<Tensor<T>, AutodiffError> {
    let arity = match kind {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => 2,
        Primitive::ConcatLast => inputs.len().max(1),
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(AutodiffError::Arity {
            op: primitive_name(kind),
            expected: arity,
            got: inputs.len(),
        });
    }
    let a = inputs[0];
    match kind {
        Primitive::Add => a.add(inputs[1]),
        Primitive::Sub => a.sub(inputs[1]),
        Primitive::Mul => a.mul(inputs[1]),
        Primitive::Div => a.div(inputs[1]),
        Primitive::Neg => a.neg(),
        Primitive::Scale(c) => a.scale(T::from_f64_lossy(*c)),
        Primitive::AddScalar(c) => a.add_scalar(T::from_f64_lossy(*c)),
        Primitive::Exp => a.exp(),
        Primitive::Log => a.log(),
        Primitive::Sqrt => a.sqrt(),
        Primitive::Square => a.square(),
        Primitive::NormalCdf => a.normal_cdf(),
        Primitive::SoftmaxLast => a.softmax_last(),
        Primitive::MatMul => a.matmul(inputs[1]),
        Primitive::TransposeLast2 => a.transpose_last2(),
        Primitive::Reshape(shape) => a.reshape(shape),
        Primitive::SumAxis(axis) => a.sum_axis(*axis),
        Primitive::ExpandAxis { axis, extent } => a.expand_axis(*axis, *extent),
        Primitive::ConcatLast => Tensor::concat_last(inputs),
        Primitive::SliceLast { start, len } => a.slice_last(*start, *len),
        Primitive::PadLast { start, total } => a.pad_last(*start, *total),
        Primitive::GatherRows(index) => a.gather_rows(index),
        Primitive::ScatterRows { index, rows } => a.scatter_rows(index, *rows),
    }
}

fn primitive_name(kind: &Primitive) -> &'static str {
    match kind {
        Primitive::Add => "add",
        Primitive::Sub => "sub",
        Primitive::Mul => "mul",
        Primitive::Div => "div",
        Primitive::Neg => "neg",
        Primitive::Scale(_) => "scale",
        Primitive::AddScalar(_) => "add_scalar",
        Primitive::Exp => "exp",
        Primitive::Log => "log",
        Primitive::Sqrt => "sqrt",
        Primitive::Square => "square",
        Primitive::NormalCdf => "normal_cdf",
        Primitive::SoftmaxLast => "softmax",
        Primitive::MatMul => "matmul",
        Primitive::TransposeLast2 => "transpose",
        Primitive::Reshape(_) => "reshape",
        Primitive::SumAxis(_) => "sum_axis",
        Primitive::ExpandAxis { .. } => "expand_axis",
        Primitive::ConcatLast => "concat",
        Primitive::SliceLast { .. } => "slice",
        Primitive::PadLast { .. } => "pad",
        Primitive::GatherRows(_) => "gather_rows",
        Primitive::ScatterRows { .. } => "scatter_rows",
    }
}

fn check_finite<T: Element>(op: &'static str, inputs: &[&Tensor<T>]) -> Result<(), AutodiffError> {
    if strict_finite() && inputs.iter().any(|t| !t.all_finite()) {
        return Err(AutodiffError::NonFinite { op });
    }
    Ok(())
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn invalid<T: Element>(op: &'static str, t: &Tensor<T>, reason: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_kernel<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    fn zip_with(
        &self,
        other: &Tensor<T>,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, AutodiffError> {
        let name = op.name();
        same_shape(name, self, other)?;
        check_finite(name, &[self, other])?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, op, &[self, other]))
    }

    fn map_unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>, AutodiffError> {
        check_finite(op.name(), &[self])?;
        let data = self.data().iter().map(|&a| f(a)).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, op, &[self]))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.zip_with(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.zip_with(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.zip_with(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.zip_with(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Tensor<T>, AutodiffError> {
        self.map_unary(Op::Neg, |a| -a)
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>, AutodiffError> {
        self.map_unary(Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>, AutodiffError> {
        self.map_unary(Op::AddScalar, |a| a + c)
    }

    pub fn exp(&self) -> Result<Tensor<T>, AutodiffError> {
        self.map_unary(Op::Exp, |a| a.exp())
    }

    pub fn log(&self) -> Result<Tensor<T>, AutodiffError> {
        self.map_unary(Op::Log, |a| a.ln())
    }

    pub fn sqrt(&self) -> Result<Tensor<T>, AutodiffError> {
        self.map_unary(Op::Sqrt, |a| a.sqrt())
    }

    pub fn square(&self) -> Result<Tensor<T>, AutodiffError> {
        self.map_unary(Op::Square, |a| a * a)
    }

    /// Standard normal CDF, `0.5 * (1 + erf(x / sqrt(2)))`.
    pub fn normal_cdf(&self) -> Result<Tensor<T>, AutodiffError> {
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        self.map_unary(Op::NormalCdf, |a| half * (T::one() + (a * inv_sqrt2).erf()))
    }

    /// Softmax over the last axis, computed with a max shift.
    pub fn softmax_last(&self) -> Result<Tensor<T>, AutodiffError> {
        let width = *self
            .shape()
            .last()
            .ok_or_else(|| invalid("softmax", self, "needs at least one axis"))?;
        if width == 0 {
            return Err(invalid("softmax", self, "last axis must be non-empty"));
        }
        check_finite("softmax", &[self])?;
        let mut data = self.to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::SoftmaxLast, &[self]))
    }

    /// Matrix product over the last two axes.
    ///
    /// `rhs` is either a plain `[K, N]` matrix shared by every leading index of
    /// `self`, or carries exactly the same leading axes as `self`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if self.ndim() < 2 || rhs.ndim() < 2 {
            return Err(mismatch());
        }
        check_finite("matmul", &[self, rhs])?;
        let (m, k) = (self.shape()[self.ndim() - 2], self.shape()[self.ndim() - 1]);
        let (k2, n) = (rhs.shape()[rhs.ndim() - 2], rhs.shape()[rhs.ndim() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lead = &self.shape()[..self.ndim() - 2];
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let shared_rhs = rhs.ndim() == 2;
        if shared_rhs {
            matmul_kernel(self.data(), rhs.data(), &mut out, batch * m, k, n);
        } else {
            if &rhs.shape()[..rhs.ndim() - 2] != lead {
                return Err(mismatch());
            }
            for b in 0..batch {
                matmul_kernel(
                    &self.data()[b * m * k..(b + 1) * m * k],
                    &rhs.data()[b * k * n..(b + 1) * k * n],
                    &mut out[b * m * n..(b + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        Ok(Tensor::from_op(out_shape, out, Op::MatMul { shared_rhs }, &[self, rhs]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>, AutodiffError> {
        if self.ndim() < 2 {
            return Err(invalid("transpose", self, "needs at least two axes"));
        }
        let nd = self.ndim();
        let (r, c) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let batch = self.numel() / (r * c).max(1);
        let src = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        Ok(Tensor::from_op(shape, out, Op::TransposeLast2, &[self]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>, AutodiffError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape, &[self]))
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>, AutodiffError> {
        if axis >= self.ndim() {
            return Err(invalid("sum_axis", self, format!("axis {axis} out of range")));
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Tensor::from_op(shape, out, Op::SumAxis { axis }, &[self]))
    }

    /// Repeats an extent-1 `axis` to `extent` copies.
    pub fn expand_axis(&self, axis: usize, extent: usize) -> Result<Tensor<T>, AutodiffError> {
        if axis >= self.ndim() || self.shape()[axis] != 1 {
            return Err(invalid(
                "expand_axis",
                self,
                format!("axis {axis} must exist and have extent 1"),
            ));
        }
        let (outer, _, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            let row = &src[o * inner..(o + 1) * inner];
            for _ in 0..extent {
                out.extend_from_slice(row);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = extent;
        Ok(Tensor::from_op(shape, out, Op::ExpandAxis { axis }, &[self]))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(parts: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Arity {
            op: "concat",
            expected: 1,
            got: 0,
        })?;
        if first.ndim() == 0 {
            return Err(invalid("concat", first, "needs at least one axis"));
        }
        let lead = &first.shape()[..first.ndim() - 1];
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape()[..p.ndim() - 1] != lead {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        check_finite("concat", parts)?;
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[p.ndim() - 1]).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_op(shape, out, Op::ConcatLast { widths }, parts))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor<T>, AutodiffError> {
        let width = *self
            .shape()
            .last()
            .ok_or_else(|| invalid("slice", self, "needs at least one axis"))?;
        if start + len > width {
            return Err(invalid(
                "slice",
                self,
                format!("range {start}..{} exceeds width {width}", start + len),
            ));
        }
        let rows = self.numel() / width.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(Tensor::from_op(shape, out, Op::SliceLast { start }, &[self]))
    }

    /// Embeds the last axis at offset `start` inside zeros of width `total`.
    pub fn pad_last(&self, start: usize, total: usize) -> Result<Tensor<T>, AutodiffError> {
        let width = *self
            .shape()
            .last()
            .ok_or_else(|| invalid("pad", self, "needs at least one axis"))?;
        if start + width > total {
            return Err(invalid(
                "pad",
                self,
                format!("offset {start} + width {width} exceeds {total}"),
            ));
        }
        let rows = self.numel() / width.max(1);
        let mut out = vec![T::zero(); rows * total];
        for r in 0..rows {
            out[r * total + start..r * total + start + width]
                .copy_from_slice(&self.data()[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = total;
        Ok(Tensor::from_op(shape, out, Op::PadLast { start }, &[self]))
    }

    /// Embedding lookup: rows of a `[V, D]` table.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<T>, AutodiffError> {
        if self.ndim() != 2 {
            return Err(invalid("gather_rows", self, "table must be 2-D"));
        }
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(invalid("gather_rows", self, format!("row {i} out of range")));
            }
            out.extend_from_slice(&self.data()[i * width..(i + 1) * width]);
        }
        Ok(Tensor::from_op(
            vec![index.len(), width],
            out,
            Op::GatherRows {
                index: index.to_vec(),
            },
            &[self],
        ))
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): accumulates rows into a `[rows, D]` table.
    pub fn scatter_rows(&self, index: &[usize], rows: usize) -> Result<Tensor<T>, AutodiffError> {
        if self.ndim() != 2 || self.shape()[0] != index.len() {
            return Err(invalid("scatter_rows", self, "expects one 2-D row per index"));
        }
        let width = self.shape()[1];
        let mut out = vec![T::zero(); rows * width];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(invalid("scatter_rows", self, format!("row {i} out of range")));
            }
            let dst = &mut out[i * width..(i + 1) * width];
            for (d, &s) in dst.iter_mut().zip(&self.data()[r * width..(r + 1) * width]) {
                *d = *d + s;
            }
        }
        Ok(Tensor::from_op(
            vec![rows, width],
            out,
            Op::ScatterRows {
                index: index.to_vec(),
            },
            &[self],
        ))
    }
}

/// Cotangents for each parent of a node. `needs[i]` marks parents that lie on
/// a path to a requested gradient; others come back as `None`.
pub(crate) fn vjp<T: Element>(
    op: &Op<T>,
    parents: &[Tensor<T>],
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>, AutodiffError> {
    let two = T::from_f64_lossy(2.0);
    let one = |i: usize, f: &dyn Fn() -> Result<Tensor<T>, AutodiffError>| -> Result<Option<Tensor<T>>, AutodiffError> {
        if needs[i] {
            f().map(Some)
        } else {
            Ok(None)
        }
    };
    let x = &parents[0];
    let grads = match op {
        Op::Add => vec![one(0, &|| Ok(g.clone()))?, one(1, &|| Ok(g.clone()))?],
        Op::Sub => vec![one(0, &|| Ok(g.clone()))?, one(1, &|| g.neg())?],
        Op::Mul => {
            let y = &parents[1];
            vec![one(0, &|| g.mul(y))?, one(1, &|| g.mul(x))?]
        }
        Op::Div => {
            let y = &parents[1];
            vec![
                one(0, &|| g.div(y))?,
                one(1, &|| g.mul(x)?.div(&y.square()?)?.neg())?,
            ]
        }
        Op::Neg => vec![one(0, &|| g.neg())?],
        Op::Scale(c) => vec![one(0, &|| g.scale(*c))?],
        Op::AddScalar => vec![one(0, &|| Ok(g.clone()))?],
        Op::Exp => vec![one(0, &|| g.mul(&x.exp()?))?],
        Op::Log => vec![one(0, &|| g.div(x))?],
        Op::Sqrt => vec![one(0, &|| g.div(&x.sqrt()?.scale(two)?))?],
        Op::Square => vec![one(0, &|| g.mul(&x.scale(two)?))?],
        Op::NormalCdf => vec![one(0, &|| {
            let inv_sqrt_2pi = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let pdf = x
                .square()?
                .scale(T::from_f64_lossy(-0.5))?
                .exp()?
                .scale(inv_sqrt_2pi)?;
            g.mul(&pdf)
        })?],
        Op::SoftmaxLast => vec![one(0, &|| {
            let y = x.softmax_last()?;
            let last = y.ndim() - 1;
            let width = y.shape()[last];
            let inner = g.mul(&y)?.sum_axis(last)?.expand_axis(last, width)?;
            y.mul(&g.sub(&inner)?)
        })?],
        Op::MatMul { shared_rhs } => {
            let w = &parents[1];
            let ga = one(0, &|| g.matmul(&w.transpose_last2()?))?;
            let gb = one(1, &|| {
                if *shared_rhs {
                    let k = x.shape()[x.ndim() - 1];
                    let n = g.shape()[g.ndim() - 1];
                    let rows = x.numel() / k.max(1);
                    x.reshape(&[rows, k])?
                        .transpose_last2()?
                        .matmul(&g.reshape(&[rows, n])?)
                } else {
                    x.transpose_last2()?.matmul(g)
                }
            })?;
            vec![ga, gb]
        }
        Op::TransposeLast2 => vec![one(0, &|| g.transpose_last2())?],
        Op::Reshape => vec![one(0, &|| g.reshape(x.shape()))?],
        Op::SumAxis { axis } => vec![one(0, &|| g.expand_axis(*axis, x.shape()[*axis]))?],
        Op::ExpandAxis { axis } => vec![one(0, &|| g.sum_axis(*axis))?],
        Op::ConcatLast { widths } => {
            let mut out = Vec::with_capacity(widths.len());
            let mut start = 0;
            for (i, &w) in widths.iter().enumerate() {
                out.push(one(i, &|| g.slice_last(start, w))?);
                start += w;
            }
            out
        }
        Op::SliceLast { start } => {
            let total = x.shape()[x.ndim() - 1];
            vec![one(0, &|| g.pad_last(*start, total))?]
        }
        Op::PadLast { start } => {
            let width = x.shape()[x.ndim() - 1];
            vec![one(0, &|| g.slice_last(*start, width))?]
        }
        Op::GatherRows { index } => vec![one(0, &|| g.scatter_rows(index, x.shape()[0]))?],
        Op::ScatterRows { index } => vec![one(0, &|| g.gather_rows(index))?],
    };
    Ok(grads)
}
