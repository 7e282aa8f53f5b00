use crate::autodiff::{Element, Tensor};

use super::{TrainConfig, TrainError};

/// First and second moment estimates, kept in `f64` regardless of the
/// parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of applied (non-skipped) steps.
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Element>(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

pub struct StepOutcome<T: Element> {
    /// Updated parameters as fresh leaves (the inputs when the step was skipped).
    pub params: Vec<Tensor<T>>,
    pub skipped: bool,
}

/// Bias-corrected Adam update. A non-finite gradient anywhere skips the whole
/// step, leaving parameters and moments untouched.
pub fn adam_step<T: Element>(
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<StepOutcome<T>, TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config {
            field: "adam",
            reason: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Config {
                field: "adam",
                reason: format!("param shape {:?} vs grad shape {:?}", p.shape(), g.shape()),
            });
        }
    }
    if !grads.iter().all(Tensor::all_finite) {
        return Ok(StepOutcome {
            params: params.iter().map(Tensor::detach).collect(),
            skipped: true,
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let mut out = Vec::with_capacity(params.len());
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let data: Vec<T> = p
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(i, (&theta, &grad))| {
                let grad = grad.to_f64_lossy();
                m[i] = b1 * m[i] + (1.0 - b1) * grad;
                v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                T::from_f64_lossy(theta.to_f64_lossy() - config.learning_rate * m_hat / (v_hat.sqrt() + config.eps))
            })
            .collect();
        out.push(Tensor::parameter(p.shape(), data)?);
    }
    Ok(StepOutcome {
        params: out,
        skipped: false,
    })
}
