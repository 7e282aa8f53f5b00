//! Composite operations built from the primitives.

use super::element::Element;
use super::tensor::Tensor;
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Sum of every element, as a 0-d tensor.
pub fn sum_all<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.reshape(&[x.numel()])?.sum_axis(0)?.reshape(&[])
}

pub fn mean_all<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = T::from_usize(x.numel().max(1)).unwrap();
    sum_all(x)?.scale(T::one() / n)
}

/// Mean over `axis`, kept with extent 1.
pub fn mean_axis<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let n = T::from_usize(x.shape()[axis].max(1)).unwrap();
    x.sum_axis(axis)?.scale(T::one() / n)
}

/// Repeats `x` over new leading axes `lead`.
pub fn broadcast_leading<T: Element>(x: &Tensor<T>, lead: &[usize]) -> Result<Tensor<T>> {
    let copies: usize = lead.iter().product();
    let mut shape = lead.to_vec();
    shape.extend_from_slice(x.shape());
    x.reshape(&[1, x.numel()])?
        .expand_axis(0, copies)?
        .reshape(&shape)
}

/// Adds a trailing-shape tensor (e.g. a bias of shape `[D]`) to every leading index of `x`.
pub fn add_broadcast<T: Element>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = x.ndim().checked_sub(b.ndim()).filter(|_| x.shape().ends_with(b.shape()));
    let Some(k) = k else {
        return Err(AutodiffError::ShapeMismatch {
            op: "add_broadcast",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    };
    x.add(&broadcast_leading(b, &x.shape()[..k])?)
}

/// Expands an extent-1 last axis back to `width`.
pub fn expand_last<T: Element>(x: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
    x.expand_axis(x.ndim() - 1, width)
}

/// Layer normalization over the last axis with affine `gain`/`shift` of shape `[D]`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let last = x.ndim() - 1;
    let width = x.shape()[last];
    let centered = x.sub(&expand_last(&mean_axis(x, last)?, width)?)?;
    let var = mean_axis(&centered.square()?, last)?;
    let denom = expand_last(&var.add_scalar(eps)?.sqrt()?, width)?;
    let normed = centered.div(&denom)?;
    add_broadcast(&normed.mul(&broadcast_leading(gain, &x.shape()[..last])?)?, shift)
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.mul(&x.normal_cdf()?)
}

/// One-hot rows `[labels.len(), classes]`.
pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(AutodiffError::InvalidShape {
                op: "one_hot",
                shape: vec![labels.len(), classes],
                reason: format!("label {l} out of range"),
            });
        }
        data[r * classes + l] = T::one();
    }
    Tensor::from_vec(&[labels.len(), classes], data)
}

/// Row-wise log-sum-exp of `[B, K]` logits, shape `[B, 1]`.
///
/// The max shift is a detached constant; the value is shift-invariant so the
/// gradient is unaffected.
pub fn logsumexp_rows<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = logits.shape()[1];
    let maxes: Vec<T> = logits
        .data()
        .chunks(k)
        .map(|row| row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)))
        .collect();
    let shift = Tensor::from_vec(&[maxes.len(), 1], maxes)?;
    let z = logits.sub(&expand_last(&shift, k)?)?;
    z.exp()?.sum_axis(1)?.log()?.add(&shift)
}

/// Mean cross-entropy of `[B, K]` logits against integer labels.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(AutodiffError::InvalidShape {
            op: "cross_entropy",
            shape: logits.shape().to_vec(),
            reason: format!("expected [{}, K] logits", labels.len()),
        });
    }
    let picked = logits
        .mul(&one_hot(labels, logits.shape()[1])?)?
        .sum_axis(1)?;
    mean_all(&logsumexp_rows(logits)?.sub(&picked)?)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<T: Element>(x: &Tensor<T>) -> Vec<usize> {
    let k = *x.shape().last().unwrap_or(&1);
    x.data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
