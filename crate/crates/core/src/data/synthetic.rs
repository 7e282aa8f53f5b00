//! Synthetic stand-in for the digit/vehicle collages.
//!
//! The top half carries a bright bar (horizontal for attribute 0, vertical for
//! attribute 1) that plays the part of the digit. The bottom half carries a
//! faint stripe texture (horizontal stripes for label 0, vertical for label 1)
//! under pixel noise, which plays the part of the vehicle.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{assign_groups, check_rho, stream_rng, CollageExample, DataError, DatasetSplit, SplitCounts, SplitRole};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub rho: f64,
    pub seed: u64,
    pub counts: SplitCounts,
    /// Bar intensity above a zero background.
    pub spurious_strength: f64,
    /// Stripe amplitude around a 0.5 background.
    pub robust_strength: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            rho: 0.9,
            seed: 0,
            counts: SplitCounts {
                train: 2000,
                id_val: 400,
                id_test: 1000,
                ood_val: 400,
                ood_test: 1000,
                balanced_probe: 1000,
            },
            spurious_strength: 0.8,
            robust_strength: 0.1,
            noise: 0.25,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        check_rho(self.rho)?;
        if self.height < 4 || self.height % 2 != 0 || self.width < 4 {
            return Err(DataError::Invalid {
                field: "image size",
                reason: format!("need even height >= 4 and width >= 4, got {}x{}", self.height, self.width),
            });
        }
        for (field, v) in [
            ("spurious_strength", self.spurious_strength),
            ("robust_strength", self.robust_strength),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::Invalid {
                    field,
                    reason: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }

    fn render(&self, label: u8, spurious: u8, rng: &mut impl Rng) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let half = h / 2;
        let noise = Normal::new(0.0, self.noise).expect("validated noise");
        let mut image = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let clean = if y < half {
                    let on_bar = if spurious == 0 {
                        y == half / 2 || y + 1 == half / 2
                    } else {
                        x == w / 2 || x + 1 == w / 2
                    };
                    if on_bar {
                        self.spurious_strength
                    } else {
                        0.0
                    }
                } else {
                    let phase = if label == 0 { y } else { x };
                    let sign = if phase % 2 == 0 { 1.0 } else { -1.0 };
                    0.5 + sign * self.robust_strength
                };
                image.push((clean + noise.sample(rng)).clamp(0.0, 1.0) as f32);
            }
        }
        image
    }
}

/// Builds all six splits; the source index is a running example counter.
pub fn build_synthetic_spurious(config: &SyntheticConfig) -> Result<BTreeMap<SplitRole, DatasetSplit>, DataError> {
    config.validate()?;
    let mut out = BTreeMap::new();
    let mut counter = 0u32;
    for role in SplitRole::ALL {
        let rho = role.correlation(config.rho);
        let mut rng = stream_rng(config.seed, role.stream());
        let pairs = assign_groups(config.counts.get(role), rho, &mut rng);
        let examples = pairs
            .into_iter()
            .map(|(label, spurious)| {
                counter += 1;
                CollageExample {
                    image: config.render(label, spurious, &mut rng),
                    label,
                    spurious,
                    source: [counter - 1, counter - 1],
                }
            })
            .collect();
        out.insert(
            role,
            DatasetSplit {
                role,
                correlation: rho,
                seed: config.seed,
                image_shape: [config.height, config.width, 1],
                examples,
            },
        );
    }
    Ok(out)
}
