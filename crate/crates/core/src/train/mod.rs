//! Mini-batch optimization of cross-entropy plus the weighted diversity
//! regularizer, with Adam, divergence checks, checkpoints and grid selection.

mod adam;

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{grad, AutodiffError, Element, NoGradGuard, Tensor};
use crate::data::{DataError, DatasetSplit, SplitRole};
use crate::diversity::{diversity_loss, per_head_input_gradients, total_loss, DiversityError, TopScore, DEFAULT_EPSILON};
use crate::eval::{evaluate, EvalError, Target};
use crate::model::{save_checkpoint, ModelConfig, ModelError, Vit};

pub use adam::{adam_step, AdamState, StepOutcome};

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e4;
/// Examples of the training split used to measure the initial and final loss.
const LOSS_PROBE: usize = 512;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("missing `{0}` split")]
    MissingSplit(SplitRole),
    #[error("diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("every grid configuration diverged ({0} runs)")]
    AllDiverged(usize),
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("expected f32 or f64, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Weight of the diversity regularizer.
    pub lambda: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between history records; 0 records only at the end.
    pub eval_every: usize,
    pub top_score: TopScore,
    /// Normalization floor inside the regularizer.
    pub div_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            precision: Precision::F32,
            eval_every: 0,
            top_score: TopScore::Logit,
            div_epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: &str| {
            Err(TrainError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return bad("beta1", "must lie in (0, 1)");
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta2", "must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.div_epsilon > 0.0) {
            return bad("div_epsilon", "must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lambda={}\nlearning_rate={}\nbeta1={}\nbeta2={}\neps={}\nepochs={}\nbatch_size={}\nseed={}\nprecision={}\neval_every={}\ntop_score={}\ndiv_epsilon={}\n",
            self.lambda,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
            self.epochs,
            self.batch_size,
            self.seed,
            self.precision,
            self.eval_every,
            self.top_score,
            self.div_epsilon
        )
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        fn parse<V: FromStr>(field: &'static str, value: &str) -> Result<V, TrainError>
        where
            V::Err: fmt::Display,
        {
            value.trim().parse().map_err(|e: V::Err| TrainError::Config {
                field,
                reason: format!("cannot parse {value:?}: {e}"),
            })
        }
        match key {
            "lambda" => self.lambda = parse("lambda", value)?,
            "learning_rate" | "lr" => self.learning_rate = parse("learning_rate", value)?,
            "beta1" => self.beta1 = parse("beta1", value)?,
            "beta2" => self.beta2 = parse("beta2", value)?,
            "eps" => self.eps = parse("eps", value)?,
            "epochs" => self.epochs = parse("epochs", value)?,
            "batch_size" => self.batch_size = parse("batch_size", value)?,
            "seed" => self.seed = parse("seed", value)?,
            "precision" => self.precision = parse("precision", value)?,
            "eval_every" => self.eval_every = parse("eval_every", value)?,
            "top_score" => self.top_score = parse("top_score", value)?,
            "div_epsilon" => self.div_epsilon = parse("div_epsilon", value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    /// Mean training cross-entropy over the steps since the previous record.
    pub l_erm: f64,
    /// Mean regularizer value over the same steps; absent when `lambda == 0`.
    pub l_div: Option<f64>,
    pub id_val_acc: Option<f64>,
    pub ood_val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    /// Cross-entropy on a fixed slice of the training split before the first step.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub steps: usize,
    pub skipped_steps: usize,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    pub fn final_ood_val_acc(&self) -> f64 {
        self.last().map_or(0.0, |r| r.ood_val_acc)
    }

    /// CSV with columns `step,l_erm,l_div,id_val_acc,ood_val_acc`; the `l_div`
    /// column is omitted entirely when no record carries it.
    pub fn to_csv(&self) -> String {
        let with_div = self.records.iter().any(|r| r.l_div.is_some());
        let mut out = String::from(if with_div {
            "step,l_erm,l_div,id_val_acc,ood_val_acc\n"
        } else {
            "step,l_erm,id_val_acc,ood_val_acc\n"
        });
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            if with_div {
                writeln!(out, "{},{},{},{},{}", r.step, r.l_erm, opt(r.l_div), opt(r.id_val_acc), r.ood_val_acc).unwrap();
            } else {
                writeln!(out, "{},{},{},{}", r.step, r.l_erm, opt(r.id_val_acc), r.ood_val_acc).unwrap();
            }
        }
        out
    }
}

fn split<'a>(splits: &'a BTreeMap<SplitRole, DatasetSplit>, role: SplitRole) -> Result<&'a DatasetSplit, TrainError> {
    match splits.get(&role) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(TrainError::MissingSplit(role)),
    }
}

/// Loss terms of one mini-batch and their parameter gradients.
pub struct BatchLoss<T: Element> {
    pub total: f64,
    pub erm: f64,
    pub diversity: Option<f64>,
    pub grads: Vec<Tensor<T>>,
}

/// Forward, objective and parameter gradients for one batch.
pub fn batch_gradients<T: Element>(
    model: &Vit<T>,
    images: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<BatchLoss<T>, TrainError> {
    let trace = model.forward(images, None)?;
    let head_grads = if config.lambda > 0.0 {
        Some(per_head_input_gradients(&trace, model.config.regularized_layer, config.top_score, true)?)
    } else {
        None
    };
    let objective = total_loss(&trace.logits, labels, head_grads.as_ref(), config.lambda, config.div_epsilon)?;
    let params = model.parameters();
    let refs: Vec<&Tensor<T>> = params.iter().collect();
    let grads = grad(&objective.total, &refs, false)?;
    Ok(BatchLoss {
        total: objective.total.item()?.to_f64_lossy(),
        erm: objective.erm.item()?.to_f64_lossy(),
        diversity: objective.diversity.as_ref().map(|d| d.value()),
        grads,
    })
}

/// Batch-mean regularizer value of a model on the first `max_examples` of a
/// split, computed without building a second-order graph.
pub fn measure_diversity<T: Element>(
    model: &Vit<T>,
    split: &DatasetSplit,
    max_examples: usize,
    top_score: TopScore,
    epsilon: f64,
) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..split.len().min(max_examples)).collect();
    let images = split.images_tensor::<T>(&idx)?;
    let trace = model.forward(&images, None)?;
    let grads = per_head_input_gradients(&trace, model.config.regularized_layer, top_score, false)?;
    Ok(diversity_loss(&grads, epsilon)?.value())
}

/// Mean cross-entropy on the first `LOSS_PROBE` training examples.
fn probe_loss<T: Element>(model: &Vit<T>, train: &DatasetSplit) -> Result<f64, TrainError> {
    let _guard = NoGradGuard::new();
    let idx: Vec<usize> = (0..train.len().min(LOSS_PROBE)).collect();
    let images = train.images_tensor::<T>(&idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| train.examples[i].label as usize).collect();
    let logits = model.logits(&images, None)?;
    Ok(crate::autodiff::functional::cross_entropy(&logits, &labels)?.item()?.to_f64_lossy())
}

pub fn train<T: Element>(
    model: Vit<T>,
    splits: &BTreeMap<SplitRole, DatasetSplit>,
    config: &TrainConfig,
) -> Result<(Vit<T>, TrainHistory), TrainError> {
    train_with_checkpoints(model, splits, config, None)
}

/// Like [`train`], additionally writing `step-NNNNNN.ckpt` into
/// `checkpoint_dir` at every history record.
pub fn train_with_checkpoints<T: Element>(
    mut model: Vit<T>,
    splits: &BTreeMap<SplitRole, DatasetSplit>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Vit<T>, TrainHistory), TrainError> {
    config.validate()?;
    let train_split = split(splits, SplitRole::Train)?;
    let ood_val = split(splits, SplitRole::OodVal)?;
    let id_val = splits.get(&SplitRole::IdVal).filter(|s| !s.is_empty());
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    let mut history = TrainHistory {
        initial_train_loss: probe_loss(&model, train_split)?,
        ..TrainHistory::default()
    };
    let mut adam = AdamState::new(&model.parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let (mut erm_sum, mut div_sum, mut window) = (0.0, 0.0, 0usize);
    let mut step = 0;

    let record = |model: &Vit<T>, step: usize, erm_sum: f64, div_sum: f64, window: usize, history: &mut TrainHistory| -> Result<(), TrainError> {
        let n = window.max(1) as f64;
        history.records.push(HistoryRecord {
            step,
            l_erm: erm_sum / n,
            l_div: (config.lambda > 0.0).then_some(div_sum / n),
            id_val_acc: id_val.map(|s| evaluate(model, s, None, Target::Label)).transpose()?,
            ood_val_acc: evaluate(model, ood_val, None, Target::Label)?,
        });
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(model, &dir.join(format!("step-{step:06}.ckpt")))?;
        }
        Ok(())
    };

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let images = train_split.images_tensor::<T>(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_split.examples[i].label as usize).collect();
            let loss = batch_gradients(&model, &images, &labels, config)?;
            step += 1;
            if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_LIMIT {
                return Err(TrainError::Diverged { step, loss: loss.total });
            }
            let outcome = adam_step(&model.parameters(), &loss.grads, &mut adam, config)?;
            if outcome.skipped {
                history.skipped_steps += 1;
                log::warn!("step {step}: non-finite gradient, update skipped");
            }
            model.set_parameters(outcome.params)?;
            erm_sum += loss.erm;
            div_sum += loss.diversity.unwrap_or(0.0);
            window += 1;
            if config.eval_every > 0 && step % config.eval_every == 0 {
                record(&model, step, erm_sum, div_sum, window, &mut history)?;
                (erm_sum, div_sum, window) = (0.0, 0.0, 0);
            }
        }
    }
    if history.records.last().map_or(true, |r| r.step != step) {
        record(&model, step, erm_sum, div_sum, window, &mut history)?;
    }
    history.steps = step;
    history.final_train_loss = probe_loss(&model, train_split)?;
    Ok((model, history))
}

/// Result of one grid run.
pub struct GridRun<T: Element> {
    pub config: TrainConfig,
    pub model: Vit<T>,
    pub history: TrainHistory,
}

/// Trains every configuration from a fresh initialization seeded by its own
/// `seed` and returns the one with the best final OOD-validation accuracy.
/// Ties go to the smaller `lambda`, then the lower learning rate. Runs execute
/// concurrently; diverged runs are skipped.
pub fn grid_select<T: Element>(
    model_config: &ModelConfig,
    grid: &[TrainConfig],
    splits: &BTreeMap<SplitRole, DatasetSplit>,
) -> Result<GridRun<T>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let results: Vec<Result<(Vit<T>, TrainHistory), TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|config| {
                scope.spawn(move || {
                    let model = Vit::<T>::init(model_config, config.seed)?;
                    train(model, splits, config)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    let mut best: Option<GridRun<T>> = None;
    for (config, result) in grid.iter().zip(results) {
        let (model, history) = match result {
            Ok(run) => run,
            Err(TrainError::Diverged { step, loss }) => {
                log::warn!("grid run lambda={} lr={} diverged at step {step} (loss {loss})", config.lambda, config.learning_rate);
                continue;
            }
            Err(e) => return Err(e),
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let (acc, best_acc) = (history.final_ood_val_acc(), b.history.final_ood_val_acc());
                acc > best_acc
                    || (acc == best_acc
                        && (config.lambda, config.learning_rate) < (b.config.lambda, b.config.learning_rate))
            }
        };
        if better {
            best = Some(GridRun {
                config: config.clone(),
                model,
                history,
            });
        }
    }
    best.ok_or(TrainError::AllDiverged(grid.len()))
}

/// Cartesian product of `lambdas` and `learning_rates` over a base config.
pub fn make_grid(base: &TrainConfig, lambdas: &[f64], learning_rates: &[f64]) -> Vec<TrainConfig> {
    lambdas
        .iter()
        .flat_map(|&lambda| {
            learning_rates.iter().map(move |&learning_rate| TrainConfig {
                lambda,
                learning_rate,
                ..base.clone()
            })
        })
        .collect()
}

pub const DEFAULT_LAMBDA_GRID: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_LR_GRID: [f64; 2] = [1e-4, 3e-4];

#[cfg(test)]
mod tests;
