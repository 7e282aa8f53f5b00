//! Accuracy under prune masks, oracle head selection, per-head specialization
//! profiles and multi-seed reports.

mod report;

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{Element, NoGradGuard};
use crate::data::{DataError, DatasetSplit, SplitRole};
use crate::model::{ModelError, PruneMask, Vit};

pub use report::{emit_report, summarize, table_rows, EvalReport, HeadEval, MethodRow, ReportFiles, SeedEval, Stat, METRIC_NAME};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty `{0}` split")]
    EmptySplit(String),
    #[error("{what} requires correlation {expected}, split has {actual}")]
    Correlation {
        what: &'static str,
        expected: f64,
        actual: f64,
    },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialize: {0}")]
    Serialize(String),
}

/// Field that predictions are scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Label,
    Spurious,
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label" => Ok(Target::Label),
            "spurious" => Ok(Target::Spurious),
            other => Err(format!("unknown target {other:?}; expected label or spurious")),
        }
    }
}

/// Argmax class for every example of the split, in order.
pub fn predictions<T: Element>(model: &Vit<T>, split: &DatasetSplit, mask: Option<&PruneMask>) -> Result<Vec<usize>, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit(split.role.to_string()));
    }
    let _guard = NoGradGuard::new();
    let mut out = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let images = split.images_tensor::<T>(chunk)?;
        out.extend(model.predict(&images, mask)?);
    }
    Ok(out)
}

/// Fraction of predictions that match `target`.
pub fn score(predicted: &[usize], split: &DatasetSplit, target: Target) -> f64 {
    let hits = predicted
        .iter()
        .zip(&split.examples)
        .filter(|(&p, e)| {
            let truth = match target {
                Target::Label => e.label,
                Target::Spurious => e.spurious,
            };
            p == truth as usize
        })
        .count();
    hits as f64 / predicted.len() as f64
}

pub fn evaluate<T: Element>(
    model: &Vit<T>,
    split: &DatasetSplit,
    mask: Option<&PruneMask>,
    target: Target,
) -> Result<f64, EvalError> {
    Ok(score(&predictions(model, split, mask)?, split, target))
}

/// Label accuracy of every single-head mask on `layer`.
pub fn single_head_accuracies<T: Element>(model: &Vit<T>, split: &DatasetSplit, layer: usize) -> Result<Vec<f64>, EvalError> {
    (0..model.config.heads)
        .map(|h| {
            let mask = PruneMask::single(&model.config, layer, h)?;
            evaluate(model, split, Some(&mask), Target::Label)
        })
        .collect()
}

/// Single head with the best OOD-validation accuracy; ties go to the lowest index.
pub fn oracle_select_head<T: Element>(model: &Vit<T>, ood_val: &DatasetSplit, layer: usize) -> Result<(usize, f64), EvalError> {
    let accs = single_head_accuracies(model, ood_val, layer)?;
    Ok(argmax_first(&accs))
}

pub(crate) fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Per-head accuracy against the robust label and the spurious attribute.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadProfile {
    pub head: usize,
    pub robust_acc: f64,
    pub spurious_acc: f64,
}

impl HeadProfile {
    /// Whether the head predicts one attribute much better than the other.
    pub fn is_specialized(&self, margin: f64) -> bool {
        (self.robust_acc - self.spurious_acc).abs() > margin
    }
}

pub fn profile_heads<T: Element>(model: &Vit<T>, probe: &DatasetSplit, layer: usize) -> Result<Vec<HeadProfile>, EvalError> {
    if (probe.correlation - 0.5).abs() > 1e-12 {
        return Err(EvalError::Correlation {
            what: "head profiling",
            expected: 0.5,
            actual: probe.correlation,
        });
    }
    (0..model.config.heads)
        .map(|head| {
            let mask = PruneMask::single(&model.config, layer, head)?;
            let predicted = predictions(model, probe, Some(&mask))?;
            Ok(HeadProfile {
                head,
                robust_acc: score(&predicted, probe, Target::Label),
                spurious_acc: score(&predicted, probe, Target::Spurious),
            })
        })
        .collect()
}

/// Number of heads whose robust and spurious accuracies differ by more than `margin`.
pub fn count_specialized(profile: &[HeadProfile], margin: f64) -> usize {
    profile.iter().filter(|p| p.is_specialized(margin)).count()
}

fn require<'a>(splits: &'a BTreeMap<SplitRole, DatasetSplit>, role: SplitRole) -> Result<&'a DatasetSplit, EvalError> {
    splits.get(&role).ok_or_else(|| EvalError::EmptySplit(role.to_string()))
}

/// Full evaluation of one trained model: ID/OOD test accuracy with all heads,
/// oracle head selection on OOD validation, and the per-head profile on the probe.
pub fn evaluate_model<T: Element>(
    model: &Vit<T>,
    splits: &BTreeMap<SplitRole, DatasetSplit>,
    seed: u64,
    lambda: f64,
    learning_rate: f64,
) -> Result<SeedEval, EvalError> {
    let layer = model.config.regularized_layer;
    let id_test = require(splits, SplitRole::IdTest)?;
    let ood_val = require(splits, SplitRole::OodVal)?;
    let ood_test = require(splits, SplitRole::OodTest)?;
    let probe = require(splits, SplitRole::BalancedProbe)?;

    let ood_val_accs = single_head_accuracies(model, ood_val, layer)?;
    let (selected_head, _) = argmax_first(&ood_val_accs);
    let profile = profile_heads(model, probe, layer)?;
    let mut per_head = Vec::with_capacity(model.config.heads);
    for (head, p) in profile.into_iter().enumerate() {
        let mask = PruneMask::single(&model.config, layer, head)?;
        per_head.push(HeadEval {
            head,
            ood_val_acc: ood_val_accs[head],
            ood_test_acc: evaluate(model, ood_test, Some(&mask), Target::Label)?,
            robust_acc: p.robust_acc,
            spurious_acc: p.spurious_acc,
        });
    }
    let selected = PruneMask::single(&model.config, layer, selected_head)?;
    Ok(SeedEval {
        seed,
        lambda,
        learning_rate,
        id_acc: evaluate(model, id_test, None, Target::Label)?,
        ood_acc: evaluate(model, ood_test, None, Target::Label)?,
        selected_head,
        selected_id_acc: evaluate(model, id_test, Some(&selected), Target::Label)?,
        selected_ood_acc: per_head[selected_head].ood_test_acc,
        per_head,
    })
}
