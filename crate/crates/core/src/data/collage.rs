//! Digit-over-vehicle collages: a 28x28 MNIST digit, zero-padded to 32x32 and
//! replicated to three channels, stacked above a 32x32 CIFAR-10 vehicle.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{
    assign_groups, check_rho, parse_cifar10, parse_idx, stream_rng, CollageExample, DataError, DatasetSplit,
    SplitCounts, SplitRole, CIFAR_AUTOMOBILE, CIFAR_SIDE, CIFAR_TRUCK,
};

pub const COLLAGE_SHAPE: [usize; 3] = [2 * CIFAR_SIDE, CIFAR_SIDE, 3];
const DIGIT_SIDE: usize = 28;
const PAD: usize = (CIFAR_SIDE - DIGIT_SIDE) / 2;

/// Raw source images grouped by class.
#[derive(Debug, Clone, Default)]
pub struct SourcePools {
    /// `[digit 0, digit 1]`, each image 28x28 grayscale bytes.
    pub digits: [Vec<Vec<u8>>; 2],
    /// `[car, truck]`, each image 32x32x3 bytes.
    pub vehicles: [Vec<Vec<u8>>; 2],
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CollageConfig {
    pub rho: f64,
    pub seed: u64,
    pub counts: SplitCounts,
}

impl Default for CollageConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            seed: 0,
            counts: SplitCounts::default(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the standard MNIST IDX files and CIFAR-10 binary batches, keeping
/// digits 0/1 and the automobile/truck classes. Train and test files are pooled.
pub fn load_source_pools(mnist_dir: &Path, cifar_dir: &Path) -> Result<SourcePools, DataError> {
    let mut pools = SourcePools::default();
    for (images, labels) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let images = parse_idx(&read_file(&mnist_dir.join(images))?)?;
        let labels = parse_idx(&read_file(&mnist_dir.join(labels))?)?;
        if images.dims.len() != 3 || images.dims[1..] != [DIGIT_SIDE, DIGIT_SIDE] || labels.dims.len() != 1 {
            return Err(DataError::Invalid {
                field: "mnist",
                reason: format!("unexpected dims {:?} / {:?}", images.dims, labels.dims),
            });
        }
        if images.dims[0] != labels.dims[0] {
            return Err(DataError::Invalid {
                field: "mnist",
                reason: format!("{} images but {} labels", images.dims[0], labels.dims[0]),
            });
        }
        let pixels = DIGIT_SIDE * DIGIT_SIDE;
        for (i, &label) in labels.data.iter().enumerate() {
            if label < 2 {
                pools.digits[label as usize].push(images.data[i * pixels..(i + 1) * pixels].to_vec());
            }
        }
    }
    let batches = (1..=5).map(|i| format!("data_batch_{i}.bin")).chain(["test_batch.bin".to_string()]);
    for name in batches {
        let batch = parse_cifar10(&read_file(&cifar_dir.join(name))?)?;
        for i in 0..batch.len() {
            let class = match batch.labels[i] {
                CIFAR_AUTOMOBILE => 0,
                CIFAR_TRUCK => 1,
                _ => continue,
            };
            pools.vehicles[class].push(batch.image(i).to_vec());
        }
    }
    Ok(pools)
}

/// Stacks a 28x28 digit over a 32x32x3 vehicle into a 64x32x3 image in `[0, 1]`.
pub fn compose_collage(digit: &[u8], vehicle: &[u8]) -> Vec<f32> {
    let [_, w, c] = COLLAGE_SHAPE;
    let mut image = vec![0f32; COLLAGE_SHAPE.iter().product()];
    for y in 0..DIGIT_SIDE {
        for x in 0..DIGIT_SIDE {
            let v = digit[y * DIGIT_SIDE + x] as f32 / 255.0;
            let base = ((y + PAD) * w + x + PAD) * c;
            image[base..base + c].fill(v);
        }
    }
    let offset = CIFAR_SIDE * w * c;
    for (dst, &src) in image[offset..].iter_mut().zip(vehicle) {
        *dst = src as f32 / 255.0;
    }
    image
}

/// Builds all six splits. Source images are drawn without replacement from
/// seed-shuffled pools, so no source index appears in two splits.
pub fn build_mnist_cifar(
    pools: &SourcePools,
    config: &CollageConfig,
) -> Result<BTreeMap<SplitRole, DatasetSplit>, DataError> {
    check_rho(config.rho)?;
    let mut digit_order: [Vec<usize>; 2] = Default::default();
    let mut vehicle_order: [Vec<usize>; 2] = Default::default();
    for class in 0..2 {
        digit_order[class] = (0..pools.digits[class].len()).collect();
        digit_order[class].shuffle(&mut stream_rng(config.seed, 100 + class as u64));
        vehicle_order[class] = (0..pools.vehicles[class].len()).collect();
        vehicle_order[class].shuffle(&mut stream_rng(config.seed, 200 + class as u64));
    }
    let mut next_digit = [0usize; 2];
    let mut next_vehicle = [0usize; 2];

    let mut out = BTreeMap::new();
    for role in SplitRole::ALL {
        let rho = role.correlation(config.rho);
        let pairs = assign_groups(config.counts.get(role), rho, &mut stream_rng(config.seed, role.stream()));
        for class in 0..2u8 {
            let need_vehicles = pairs.iter().filter(|p| p.0 == class).count();
            let need_digits = pairs.iter().filter(|p| p.1 == class).count();
            let c = class as usize;
            if next_vehicle[c] + need_vehicles > vehicle_order[c].len() {
                return Err(DataError::InsufficientPool {
                    what: format!("{role} vehicles of class {class}"),
                    needed: next_vehicle[c] + need_vehicles,
                    available: vehicle_order[c].len(),
                });
            }
            if next_digit[c] + need_digits > digit_order[c].len() {
                return Err(DataError::InsufficientPool {
                    what: format!("{role} digits {class}"),
                    needed: next_digit[c] + need_digits,
                    available: digit_order[c].len(),
                });
            }
        }
        let examples = pairs
            .into_iter()
            .map(|(label, spurious)| {
                let d = digit_order[spurious as usize][next_digit[spurious as usize]];
                next_digit[spurious as usize] += 1;
                let v = vehicle_order[label as usize][next_vehicle[label as usize]];
                next_vehicle[label as usize] += 1;
                CollageExample {
                    image: compose_collage(&pools.digits[spurious as usize][d], &pools.vehicles[label as usize][v]),
                    label,
                    spurious,
                    source: [d as u32, v as u32],
                }
            })
            .collect();
        out.insert(
            role,
            DatasetSplit {
                role,
                correlation: rho,
                seed: config.seed,
                image_shape: COLLAGE_SHAPE,
                examples,
            },
        );
    }
    Ok(out)
}
