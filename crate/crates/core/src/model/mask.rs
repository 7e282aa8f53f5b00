use super::{ModelConfig, ModelError};

/// Per-layer keep/drop flags over attention heads.
///
/// Kept heads are multiplied by `heads / kept` before concatenation so the
/// projected output stays in the range seen with every head active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    keep: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn new(keep: Vec<Vec<bool>>) -> Result<Self, ModelError> {
        if keep.is_empty() {
            return Err(ModelError::Mask("no layers".into()));
        }
        for (layer, flags) in keep.iter().enumerate() {
            if !flags.iter().any(|&k| k) {
                return Err(ModelError::Mask(format!("every head of layer {layer} is pruned")));
            }
        }
        Ok(Self { keep })
    }

    pub fn all(layers: usize, heads: usize) -> Self {
        Self {
            keep: vec![vec![true; heads]; layers],
        }
    }

    /// Keeps only `head` in `layer`; other layers keep every head.
    pub fn single(config: &ModelConfig, layer: usize, head: usize) -> Result<Self, ModelError> {
        Self::subset(config, layer, &[head])
    }

    pub fn subset(config: &ModelConfig, layer: usize, heads: &[usize]) -> Result<Self, ModelError> {
        if layer >= config.layers {
            return Err(ModelError::Mask(format!("layer {layer} out of range")));
        }
        let mut keep = vec![vec![true; config.heads]; config.layers];
        keep[layer] = vec![false; config.heads];
        for &h in heads {
            if h >= config.heads {
                return Err(ModelError::Mask(format!("head {h} out of range")));
            }
            keep[layer][h] = true;
        }
        Self::new(keep)
    }

    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.keep.len() != config.layers || self.keep.iter().any(|k| k.len() != config.heads) {
            return Err(ModelError::Mask(format!(
                "mask covers {} layers, model has {} layers of {} heads",
                self.keep.len(),
                config.layers,
                config.heads
            )));
        }
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> &[bool] {
        &self.keep[layer]
    }

    pub fn kept(&self, layer: usize) -> usize {
        self.keep[layer].iter().filter(|&&k| k).count()
    }

    /// `heads / kept` for `layer`; exactly 1 when nothing is pruned.
    pub fn rescale(&self, layer: usize) -> f64 {
        self.keep[layer].len() as f64 / self.kept(layer) as f64
    }

    pub fn is_all_kept(&self) -> bool {
        self.keep.iter().flatten().all(|&k| k)
    }
}
