//! Minimal vision transformer with per-head attention parameters and head pruning.

mod checkpoint;
mod mask;
mod vit;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mask::PruneMask;
pub use vit::{mhsa_forward, patchify, patchify_embed, AttentionOutput, AttentionParams, Block, ForwardTrace, Mlp, Vit};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("invalid prune mask: {0}")]
    Mask(String),
    #[error("input of shape {got:?} does not match expected {expected:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Token width `D`; every head maps `D -> D`.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the per-block MLP; 0 disables it.
    pub mlp_hidden: usize,
    pub use_residual: bool,
    pub num_classes: usize,
    /// Block whose input carries the diversity regularizer.
    pub regularized_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            dim: 32,
            heads: 8,
            layers: 1,
            mlp_hidden: 0,
            use_residual: false,
            num_classes: 2,
            regularized_layer: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, reason: &str| {
            Err(ModelError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.patch_size == 0 {
            return bad("patch_size", "must be positive");
        }
        if self.image_height == 0 || self.image_height % self.patch_size != 0 {
            return bad("image_height", "must be a positive multiple of patch_size");
        }
        if self.image_width == 0 || self.image_width % self.patch_size != 0 {
            return bad("image_width", "must be a positive multiple of patch_size");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.dim == 0 {
            return bad("dim", "must be positive");
        }
        if self.heads == 0 {
            return bad("heads", "must be positive");
        }
        if self.layers == 0 {
            return bad("layers", "must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2");
        }
        if self.regularized_layer >= self.layers {
            return bad("regularized_layer", "must be below layers");
        }
        Ok(())
    }

    /// Number of tokens `N`.
    pub fn num_tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Flattened patch length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_height, self.image_width, self.channels]
    }

    /// Serializes as `key=value` lines, the same flat format used by run configs.
    pub fn to_kv(&self) -> String {
        format!(
            "image_height={}\nimage_width={}\nchannels={}\npatch_size={}\ndim={}\nheads={}\nlayers={}\nmlp_hidden={}\nuse_residual={}\nnum_classes={}\nregularized_layer={}\n",
            self.image_height,
            self.image_width,
            self.channels,
            self.patch_size,
            self.dim,
            self.heads,
            self.layers,
            self.mlp_hidden,
            self.use_residual,
            self.num_classes,
            self.regularized_layer
        )
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        fn parse<V: FromStr>(field: &'static str, value: &str) -> Result<V, ModelError>
        where
            V::Err: fmt::Display,
        {
            value.trim().parse().map_err(|e: V::Err| ModelError::Config {
                field,
                reason: format!("cannot parse {value:?}: {e}"),
            })
        }
        match key {
            "image_height" => self.image_height = parse("image_height", value)?,
            "image_width" => self.image_width = parse("image_width", value)?,
            "channels" => self.channels = parse("channels", value)?,
            "patch_size" => self.patch_size = parse("patch_size", value)?,
            "dim" => self.dim = parse("dim", value)?,
            "heads" => self.heads = parse("heads", value)?,
            "layers" => self.layers = parse("layers", value)?,
            "mlp_hidden" => self.mlp_hidden = parse("mlp_hidden", value)?,
            "use_residual" => self.use_residual = parse("use_residual", value)?,
            "num_classes" => self.num_classes = parse("num_classes", value)?,
            "regularized_layer" => self.regularized_layer = parse("regularized_layer", value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let mut config = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line.split_once('=').ok_or_else(|| ModelError::Config {
                field: "config",
                reason: format!("line without '=': {line:?}"),
            })?;
            if !config.set(key.trim(), value)? {
                return Err(ModelError::Config {
                    field: "config",
                    reason: format!("unknown key {:?}", key.trim()),
                });
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests;
