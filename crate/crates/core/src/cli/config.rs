//! Flat `key=value` run configuration with per-dataset presets.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{CollageConfig, SplitCounts, SyntheticConfig};
use crate::model::{ModelConfig, ModelError};
use crate::train::{TrainConfig, TrainError, DEFAULT_LAMBDA_GRID, DEFAULT_LR_GRID};

use super::CliError;

/// Environment variable that overrides the dataset root. The root is expected
/// to hold `mnist/` (IDX files) and `cifar-10-batches-bin/`.
pub const DATA_ROOT_ENV: &str = "DIVERSE_VIT_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    MnistCifar,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::MnistCifar => "mnist-cifar",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "mnist-cifar" => Ok(DatasetKind::MnistCifar),
            other => Err(format!("expected synthetic or mnist-cifar, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rho: f64,
    pub counts: SplitCounts,
    pub mnist_dir: Option<PathBuf>,
    pub cifar_dir: Option<PathBuf>,
    /// Previously prepared splits; skips building.
    pub splits_dir: Option<PathBuf>,
    pub synthetic_size: usize,
    pub spurious_strength: f64,
    pub robust_strength: f64,
    pub noise: f64,
    pub seeds: Vec<u64>,
    pub lambda_grid: Vec<f64>,
    pub lr_grid: Vec<f64>,
    /// `train` runs a grid search instead of a single configuration.
    pub grid: bool,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Heads kept at the regularized layer by `eval`; empty keeps all.
    pub keep_heads: Vec<usize>,
}

impl RunConfig {
    pub fn preset(dataset: DatasetKind) -> Self {
        match dataset {
            DatasetKind::MnistCifar => Self {
                dataset,
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                rho: 0.9,
                counts: SplitCounts::default(),
                mnist_dir: None,
                cifar_dir: None,
                splits_dir: None,
                synthetic_size: 16,
                spurious_strength: 0.8,
                robust_strength: 0.05,
                noise: 0.25,
                seeds: vec![0, 1, 2],
                lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
                lr_grid: DEFAULT_LR_GRID.to_vec(),
                grid: false,
                out_dir: PathBuf::from("runs/latest"),
                checkpoint: None,
                keep_heads: Vec::new(),
            },
            DatasetKind::Synthetic => {
                let synthetic = SyntheticConfig::default();
                Self {
                    dataset,
                    model: ModelConfig {
                        image_height: synthetic.height,
                        image_width: synthetic.width,
                        channels: 1,
                        patch_size: 4,
                        dim: 16,
                        heads: 4,
                        mlp_hidden: 32,
                        use_residual: true,
                        ..ModelConfig::default()
                    },
                    train: TrainConfig {
                        learning_rate: 1e-3,
                        epochs: 5,
                        ..TrainConfig::default()
                    },
                    counts: synthetic.counts,
                    synthetic_size: synthetic.height,
                    spurious_strength: synthetic.spurious_strength,
                    robust_strength: 0.05,
                    noise: synthetic.noise,
                    lambda_grid: vec![0.003, 0.01],
                    lr_grid: vec![1e-3],
                    ..Self::preset(DatasetKind::MnistCifar)
                }
            }
        }
    }

    pub fn synthetic_config(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            height: self.synthetic_size,
            width: self.synthetic_size,
            rho: self.rho,
            seed,
            counts: self.counts,
            spurious_strength: self.spurious_strength,
            robust_strength: self.robust_strength,
            noise: self.noise,
        }
    }

    pub fn collage_config(&self, seed: u64) -> CollageConfig {
        CollageConfig {
            rho: self.rho,
            seed,
            counts: self.counts,
        }
    }

    /// Resolves a configuration from defaults, an optional config file, the
    /// dataset-root environment variable and `--key value` overrides, in that order.
    pub fn resolve(file_text: Option<&str>, env_root: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        if let Some(text) = file_text {
            pairs.extend(parse_kv(text)?);
        }
        let dataset = overrides
            .iter()
            .chain(pairs.iter())
            .find(|(k, _)| k == "dataset")
            .map(|(_, v)| v.parse::<DatasetKind>())
            .transpose()
            .map_err(|reason| CliError::Invalid {
                field: "dataset".into(),
                reason,
            })?
            .unwrap_or(DatasetKind::MnistCifar);
        let mut config = Self::preset(dataset);
        for (k, v) in &pairs {
            config.set(k, v)?;
        }
        if let Some(root) = env_root {
            config.mnist_dir = Some(root.join("mnist"));
            config.cifar_dir = Some(root.join("cifar-10-batches-bin"));
        }
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let invalid = |reason: String| CliError::Invalid {
            field: key.to_string(),
            reason,
        };
        fn parse<V: FromStr>(value: &str) -> Result<V, String>
        where
            V::Err: fmt::Display,
        {
            value.trim().parse().map_err(|e: V::Err| format!("cannot parse {value:?}: {e}"))
        }
        fn list<V: FromStr>(value: &str) -> Result<Vec<V>, String>
        where
            V::Err: fmt::Display,
        {
            value.split(',').filter(|s| !s.trim().is_empty()).map(parse).collect()
        }
        let path = |v: &str| (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()));
        match key {
            "dataset" => self.dataset = parse(value).map_err(invalid)?,
            "rho" => self.rho = parse(value).map_err(invalid)?,
            "train_count" => self.counts.train = parse(value).map_err(invalid)?,
            "id_val_count" => self.counts.id_val = parse(value).map_err(invalid)?,
            "id_test_count" => self.counts.id_test = parse(value).map_err(invalid)?,
            "ood_val_count" => self.counts.ood_val = parse(value).map_err(invalid)?,
            "ood_test_count" => self.counts.ood_test = parse(value).map_err(invalid)?,
            "probe_count" => self.counts.balanced_probe = parse(value).map_err(invalid)?,
            "mnist_dir" => self.mnist_dir = path(value),
            "cifar_dir" => self.cifar_dir = path(value),
            "splits_dir" => self.splits_dir = path(value),
            "synthetic_size" => {
                self.synthetic_size = parse(value).map_err(invalid)?;
                if self.dataset == DatasetKind::Synthetic {
                    self.model.image_height = self.synthetic_size;
                    self.model.image_width = self.synthetic_size;
                }
            }
            "spurious_strength" => self.spurious_strength = parse(value).map_err(invalid)?,
            "robust_strength" => self.robust_strength = parse(value).map_err(invalid)?,
            "noise" => self.noise = parse(value).map_err(invalid)?,
            "seeds" => {
                // A bare count `n` means seeds 0..n; a comma list is taken literally.
                self.seeds = if value.contains(',') {
                    list(value).map_err(invalid)?
                } else {
                    (0..parse::<u64>(value).map_err(invalid)?).collect()
                }
            }
            "lambda_grid" => self.lambda_grid = list(value).map_err(invalid)?,
            "lr_grid" => self.lr_grid = list(value).map_err(invalid)?,
            "grid" => self.grid = parse(value).map_err(invalid)?,
            "out_dir" => self.out_dir = path(value).ok_or_else(|| invalid("must not be empty".into()))?,
            "checkpoint" => self.checkpoint = path(value),
            "keep_heads" => self.keep_heads = list(value).map_err(invalid)?,
            _ => {
                let owned = self.model.set(key, value).map_err(|e| invalid(e.to_string()))?
                    || self.train.set(key, value).map_err(|e| invalid(e.to_string()))?;
                if !owned {
                    return Err(CliError::UnknownKey(key.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |field: &str, reason: &str| {
            Err(CliError::Invalid {
                field: field.into(),
                reason: reason.into(),
            })
        };
        self.model.validate().map_err(|e| match e {
            ModelError::Config { field, reason } => CliError::Invalid {
                field: field.into(),
                reason,
            },
            other => CliError::Invalid {
                field: "model".into(),
                reason: other.to_string(),
            },
        })?;
        self.train.validate().map_err(|e| match e {
            TrainError::Config { field, reason } => CliError::Invalid {
                field: field.into(),
                reason,
            },
            other => CliError::Invalid {
                field: "train".into(),
                reason: other.to_string(),
            },
        })?;
        if !(0.0..=1.0).contains(&self.rho) {
            return invalid("rho", "must lie in [0, 1]");
        }
        if self.seeds.is_empty() {
            return invalid("seeds", "must name at least one seed");
        }
        if self.lambda_grid.iter().any(|&l| !(l >= 0.0)) {
            return invalid("lambda_grid", "entries must be >= 0");
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&l| !(l > 0.0)) {
            return invalid("lr_grid", "must be non-empty with positive entries");
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                self.synthetic_config(0).validate().map_err(|e| CliError::Invalid {
                    field: "synthetic".into(),
                    reason: e.to_string(),
                })?;
                let expected = [self.synthetic_size, self.synthetic_size, 1];
                if self.model.image_shape() != expected {
                    return invalid("image_height", &format!("model input must match synthetic images {expected:?}"));
                }
            }
            DatasetKind::MnistCifar => {
                if self.model.image_shape() != crate::data::COLLAGE_SHAPE {
                    return invalid("image_height", "model input must be 64x32x3 for collages");
                }
            }
        }
        Ok(())
    }

    /// Dataset paths are only required by commands that build collages.
    pub fn require_sources(&self) -> Result<(&Path, &Path), CliError> {
        let mnist = self.mnist_dir.as_deref().ok_or(CliError::MissingPath("mnist_dir"))?;
        let cifar = self.cifar_dir.as_deref().ok_or(CliError::MissingPath("cifar_dir"))?;
        if !mnist.is_dir() {
            return Err(CliError::PathNotFound("mnist_dir", mnist.to_path_buf()));
        }
        if !cifar.is_dir() {
            return Err(CliError::PathNotFound("cifar_dir", cifar.to_path_buf()));
        }
        Ok((mnist, cifar))
    }

    /// Resolved snapshot; feeding it back through `--config` reproduces this config.
    pub fn to_kv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        writeln!(out, "dataset={}", self.dataset).unwrap();
        out.push_str(&self.model.to_kv());
        out.push_str(&self.train.to_kv());
        writeln!(out, "rho={}", self.rho).unwrap();
        writeln!(out, "train_count={}", self.counts.train).unwrap();
        writeln!(out, "id_val_count={}", self.counts.id_val).unwrap();
        writeln!(out, "id_test_count={}", self.counts.id_test).unwrap();
        writeln!(out, "ood_val_count={}", self.counts.ood_val).unwrap();
        writeln!(out, "ood_test_count={}", self.counts.ood_test).unwrap();
        writeln!(out, "probe_count={}", self.counts.balanced_probe).unwrap();
        writeln!(out, "mnist_dir={}", opt(&self.mnist_dir)).unwrap();
        writeln!(out, "cifar_dir={}", opt(&self.cifar_dir)).unwrap();
        writeln!(out, "splits_dir={}", opt(&self.splits_dir)).unwrap();
        writeln!(out, "synthetic_size={}", self.synthetic_size).unwrap();
        writeln!(out, "spurious_strength={}", self.spurious_strength).unwrap();
        writeln!(out, "robust_strength={}", self.robust_strength).unwrap();
        writeln!(out, "noise={}", self.noise).unwrap();
        // A single seed with a trailing comma stays a list rather than a count.
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        writeln!(out, "seeds={seeds},").unwrap();
        writeln!(out, "lambda_grid={}", join(&self.lambda_grid)).unwrap();
        writeln!(out, "lr_grid={}", join(&self.lr_grid)).unwrap();
        writeln!(out, "grid={}", self.grid).unwrap();
        writeln!(out, "out_dir={}", self.out_dir.display()).unwrap();
        writeln!(out, "checkpoint={}", opt(&self.checkpoint)).unwrap();
        let keep = self.keep_heads.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        writeln!(out, "keep_heads={keep}").unwrap();
        out
    }
}

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, CliError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Invalid {
                    field: "config".into(),
                    reason: format!("line without '=': {line:?}"),
                })
        })
        .collect()
}
