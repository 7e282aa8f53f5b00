//! Per-head input gradients and the orthogonality regularizer built on them.
//!
//! For each example, the gradient of the top predicted score with respect to
//! the tokens entering the regularized block is split into one contribution
//! per attention head. The regularizer penalizes the squared cosine similarity
//! between those contributions, token by token, over every ordered pair of
//! distinct heads.

use thiserror::Error;

use crate::autodiff::functional::{argmax_rows, cross_entropy, expand_last, mean_all, one_hot, sum_all};
use crate::autodiff::{grad, vjp, AutodiffError, Element, Tensor};
use crate::model::{ForwardTrace, ModelError};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("block input is not connected to the graph; cannot take input gradients")]
    Disconnected,
    #[error("{field} must be {requirement}, got {value}")]
    Invalid {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

/// Which quantity of the predicted class is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum TopScore {
    /// Pre-softmax logit of the predicted class.
    #[default]
    Logit,
    /// Softmax probability of the predicted class.
    Probability,
}

impl std::str::FromStr for TopScore {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logit" => Ok(Self::Logit),
            "probability" => Ok(Self::Probability),
            other => Err(format!("expected `logit` or `probability`, got {other:?}")),
        }
    }
}

impl std::fmt::Display for TopScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Logit => "logit",
            Self::Probability => "probability",
        })
    }
}

/// Input gradients of the top score at one block, for a batch.
#[derive(Debug, Clone)]
pub struct HeadGradients<T: Element> {
    /// One `[B, N, D]` tensor per head; zeros for pruned heads.
    pub per_head: Vec<Tensor<T>>,
    /// Gradient through every path, `[B, N, D]`.
    pub full: Tensor<T>,
    pub layer: usize,
    /// Predicted class per example (the differentiated score's class).
    pub predicted: Vec<usize>,
}

impl<T: Element> HeadGradients<T> {
    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    /// Max-abs difference between `Σ_i per_head[i]` and `full`.
    pub fn decomposition_gap(&self) -> Result<f64, AutodiffError> {
        let mut sum = Tensor::zeros(self.full.shape());
        for g in &self.per_head {
            sum = sum.add(&g.detach())?;
        }
        Ok(sum
            .data()
            .iter()
            .zip(self.full.data())
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max))
    }
}

/// Computes the per-head input gradients of the top predicted score.
///
/// The cotangent of the concatenated head block is computed once; head `i`'s
/// gradient is its slice pulled back through `h_i` alone, which is the full
/// gradient with every other head held constant. With `differentiable` the
/// results stay on the graph for a second-order step.
pub fn per_head_input_gradients<T: Element>(
    trace: &ForwardTrace<T>,
    layer: usize,
    score: TopScore,
    differentiable: bool,
) -> Result<HeadGradients<T>, DiversityError> {
    let x = &trace.block_input;
    if !x.requires_grad() {
        return Err(DiversityError::Disconnected);
    }
    let logits = &trace.logits;
    let predicted = argmax_rows(logits);
    let scores = match score {
        TopScore::Logit => logits.clone(),
        TopScore::Probability => logits.softmax_last()?,
    };
    // Examples are independent, so one backward of the summed selected scores
    // yields every per-example gradient at once.
    let selected = sum_all(&scores.mul(&one_hot(&predicted, logits.shape()[1])?)?)?;
    let concat = &trace.attention.concat;
    let mut both = grad(&selected, &[x, concat], differentiable)?;
    let concat_cot = both.pop().expect("two gradients");
    let full = both.pop().expect("two gradients");

    let dim = x.shape()[x.ndim() - 1];
    let mut per_head = Vec::with_capacity(trace.attention.heads.len());
    for (i, head) in trace.attention.heads.iter().enumerate() {
        match head {
            Some(h) => {
                let cot = concat_cot.slice_last(i * dim, dim)?;
                per_head.push(vjp(&[h], &[&cot], &[x], differentiable)?.remove(0));
            }
            None => per_head.push(Tensor::zeros(x.shape())),
        }
    }
    Ok(HeadGradients {
        per_head,
        full,
        layer,
        predicted,
    })
}

/// Value and per-pair detail of the orthogonality regularizer.
#[derive(Debug, Clone)]
pub struct DiversityLossBreakdown<T: Element> {
    /// Batch mean of the per-example regularizer (0-d, graph-attached when the
    /// gradients are).
    pub total: Tensor<T>,
    pub per_example: Vec<f64>,
    /// `per_pair[i][j]`: batch mean over examples of the token-mean `c²` for
    /// heads `(i, j)`; the diagonal is zero.
    pub per_pair: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl<T: Element> DiversityLossBreakdown<T> {
    pub fn value(&self) -> f64 {
        self.total.data()[0].to_f64_lossy()
    }
}

/// Row-normalizes `[B, N, D]` gradients over `D`.
///
/// The denominator is `sqrt(‖g‖² + ε²)`: zero rows map to zero and the
/// derivative of the norm stays finite there.
fn normalize_rows<T: Element>(g: &Tensor<T>, epsilon: T) -> Result<Tensor<T>, AutodiffError> {
    let width = g.shape()[g.ndim() - 1];
    let norm = g.square()?.sum_axis(g.ndim() - 1)?.add_scalar(epsilon * epsilon)?.sqrt()?;
    g.div(&expand_last(&norm, width)?)
}

/// `(1/N) Σ_{i≠j} Σ_n c²_{n,i,j}` per example, averaged over the batch,
/// where `c_{n,i,j}` is the cosine similarity of token `n`'s gradients in
/// heads `i` and `j`.
pub fn diversity_loss<T: Element>(
    grads: &HeadGradients<T>,
    epsilon: f64,
) -> Result<DiversityLossBreakdown<T>, DiversityError> {
    if !(epsilon > 0.0) {
        return Err(DiversityError::Invalid {
            field: "epsilon",
            requirement: "positive",
            value: epsilon,
        });
    }
    let heads = grads.heads();
    let shape = grads.full.shape();
    let (batch, tokens) = (shape[0], shape[1]);
    let mut per_pair = vec![vec![0.0; heads]; heads];
    let mut per_example = vec![0.0; batch];
    if heads < 2 {
        return Ok(DiversityLossBreakdown {
            total: Tensor::scalar(T::zero()),
            per_example,
            per_pair,
            epsilon,
        });
    }
    let eps = T::from_f64_lossy(epsilon);
    let units = grads
        .per_head
        .iter()
        .map(|g| normalize_rows(g, eps))
        .collect::<Result<Vec<_>, _>>()?;
    let last = shape.len() - 1;
    let mut pair_sum: Option<Tensor<T>> = None;
    for i in 0..heads {
        for j in i + 1..heads {
            // [B, N, 1] cosine per token, then squared and summed over tokens.
            let c2 = units[i].mul(&units[j])?.sum_axis(last)?.square()?;
            let per_ex = c2.sum_axis(1)?.reshape(&[batch])?;
            let inv_n = 1.0 / tokens as f64;
            let mut mean = 0.0;
            for (b, v) in per_ex.data().iter().enumerate() {
                let v = v.to_f64_lossy() * inv_n;
                per_example[b] += 2.0 * v;
                mean += v / batch as f64;
            }
            per_pair[i][j] = mean;
            per_pair[j][i] = mean;
            pair_sum = Some(match pair_sum {
                Some(acc) => acc.add(&per_ex)?,
                None => per_ex,
            });
        }
    }
    // Ordered pairs: each unordered pair counts twice.
    let scale = T::from_f64_lossy(2.0 / tokens as f64);
    let total = mean_all(&pair_sum.expect("at least one pair").scale(scale)?)?;
    Ok(DiversityLossBreakdown {
        total,
        per_example,
        per_pair,
        epsilon,
    })
}

/// Terms of the training objective.
#[derive(Debug, Clone)]
pub struct Objective<T: Element> {
    pub total: Tensor<T>,
    pub erm: Tensor<T>,
    pub diversity: Option<DiversityLossBreakdown<T>>,
}

/// Mean cross-entropy plus `lambda` times the batch-mean regularizer.
///
/// With `lambda == 0` the regularizer is not evaluated and the objective is
/// exactly the cross-entropy.
pub fn total_loss<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    grads: Option<&HeadGradients<T>>,
    lambda: f64,
    epsilon: f64,
) -> Result<Objective<T>, DiversityError> {
    if !(lambda >= 0.0) {
        return Err(DiversityError::Invalid {
            field: "lambda",
            requirement: "non-negative",
            value: lambda,
        });
    }
    let erm = cross_entropy(logits, labels)?;
    if lambda == 0.0 {
        return Ok(Objective {
            total: erm.clone(),
            erm,
            diversity: None,
        });
    }
    let grads = grads.ok_or(DiversityError::Invalid {
        field: "head gradients",
        requirement: "present when lambda > 0",
        value: lambda,
    })?;
    let div = diversity_loss(grads, epsilon)?;
    let total = erm.add(&div.total.scale(T::from_f64_lossy(lambda))?)?;
    Ok(Objective {
        total,
        erm,
        diversity: Some(div),
    })
}
