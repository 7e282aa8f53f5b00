//! Dataset parsers, collage construction with a controlled spurious
//! correlation, a synthetic analogue that needs no external files, and an
//! on-disk split store.

mod cifar;
mod collage;
mod idx;
mod store;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Element, Tensor};

pub use cifar::{parse_cifar10, write_cifar10, CifarBatch, CIFAR_AUTOMOBILE, CIFAR_PIXELS, CIFAR_RECORD, CIFAR_SIDE, CIFAR_TRUCK};
pub use collage::{build_mnist_cifar, compose_collage, load_source_pools, CollageConfig, SourcePools, COLLAGE_SHAPE};
pub use idx::{parse_idx, write_idx, IdxArray, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use store::{load_splits, save_splits, MANIFEST_FILE};
pub use synthetic::{build_synthetic_spurious, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{format} parse error at byte {offset}: {reason}")]
    Parse {
        format: &'static str,
        offset: usize,
        reason: String,
    },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("insufficient source pool for {what}: need {needed}, have {available}")]
    InsufficientPool {
        what: String,
        needed: usize,
        available: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum SplitRole {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "id-val")]
    IdVal,
    #[serde(rename = "id-test")]
    IdTest,
    #[serde(rename = "ood-val")]
    OodVal,
    #[serde(rename = "ood-test")]
    OodTest,
    #[serde(rename = "balanced-probe")]
    BalancedProbe,
}

impl SplitRole {
    pub const ALL: [SplitRole; 6] = [
        SplitRole::Train,
        SplitRole::IdVal,
        SplitRole::IdTest,
        SplitRole::OodVal,
        SplitRole::OodTest,
        SplitRole::BalancedProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::IdVal => "id-val",
            SplitRole::IdTest => "id-test",
            SplitRole::OodVal => "ood-val",
            SplitRole::OodTest => "ood-test",
            SplitRole::BalancedProbe => "balanced-probe",
        }
    }

    /// Label/attribute alignment of this split given the training correlation.
    pub fn correlation(self, train_rho: f64) -> f64 {
        match self {
            SplitRole::Train | SplitRole::IdVal | SplitRole::IdTest => train_rho,
            SplitRole::OodVal | SplitRole::OodTest => 1.0 - train_rho,
            SplitRole::BalancedProbe => 0.5,
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitRole {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitRole::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| DataError::Invalid {
            field: "role",
            reason: format!("unknown split role {s:?}"),
        })
    }
}

/// Number of examples to build per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub id_val: usize,
    pub id_test: usize,
    pub ood_val: usize,
    pub ood_test: usize,
    pub balanced_probe: usize,
}

impl Default for SplitCounts {
    /// Sized so the eval splits exhaust exactly the vehicles left over after
    /// a 10k training split (6000 per class in CIFAR-10).
    fn default() -> Self {
        Self {
            train: 10_000,
            id_val: 200,
            id_test: 400,
            ood_val: 400,
            ood_test: 600,
            balanced_probe: 400,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, role: SplitRole) -> usize {
        match role {
            SplitRole::Train => self.train,
            SplitRole::IdVal => self.id_val,
            SplitRole::IdTest => self.id_test,
            SplitRole::OodVal => self.ood_val,
            SplitRole::OodTest => self.ood_test,
            SplitRole::BalancedProbe => self.balanced_probe,
        }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            train: n,
            id_val: n,
            id_test: n,
            ood_val: n,
            ood_test: n,
            balanced_probe: n,
        }
    }
}

/// One stacked image with its robust label and spurious attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct CollageExample {
    /// `H x W x C`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// Robust class: 0 = car, 1 = truck.
    pub label: u8,
    /// Spurious attribute: the digit (0 or 1).
    pub spurious: u8,
    /// Indices into the spurious and robust source pools.
    pub source: [u32; 2],
}

impl CollageExample {
    pub fn group(&self) -> (u8, u8) {
        (self.label, self.spurious)
    }

    /// `2 * label + spurious`.
    pub fn group_id(&self) -> usize {
        2 * self.label as usize + self.spurious as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    /// Fraction of examples whose spurious attribute equals the label.
    pub correlation: f64,
    pub seed: u64,
    pub image_shape: [usize; 3],
    pub examples: Vec<CollageExample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label as usize).collect()
    }

    pub fn spurious(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.spurious as usize).collect()
    }

    /// Counts indexed by [`CollageExample::group_id`].
    pub fn group_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for e in &self.examples {
            counts[e.group_id()] += 1;
        }
        counts
    }

    /// Stacks the selected examples into a `[B, H, W, C]` tensor.
    pub fn images_tensor<T: Element>(&self, indices: &[usize]) -> Result<Tensor<T>, DataError> {
        let [h, w, c] = self.image_shape;
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            let e = self.examples.get(i).ok_or_else(|| DataError::Invalid {
                field: "index",
                reason: format!("example {i} out of range for split of {}", self.len()),
            })?;
            data.extend(e.image.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(Tensor::from_vec(&[indices.len(), h, w, c], data)?)
    }
}

/// Returns the `(label, spurious)` pairs of a split of size `n` with label
/// balance `n/2` and `round(rho * n_c)` aligned examples per class, shuffled.
pub(crate) fn assign_groups(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> Vec<(u8, u8)> {
    let per_class = [n / 2, n - n / 2];
    let mut pairs = Vec::with_capacity(n);
    for (label, &count) in per_class.iter().enumerate() {
        let aligned = ((rho * count as f64).round() as usize).min(count);
        let label = label as u8;
        pairs.extend(std::iter::repeat((label, label)).take(aligned));
        pairs.extend(std::iter::repeat((label, 1 - label)).take(count - aligned));
    }
    pairs.shuffle(rng);
    pairs
}

pub(crate) fn check_rho(rho: f64) -> Result<(), DataError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(DataError::Invalid {
            field: "rho",
            reason: format!("must lie in [0, 1], got {rho}"),
        });
    }
    Ok(())
}

/// Independent generator per (seed, stream), so splits do not depend on build order.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests;
