use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn fake_pools(per_class: usize, seed: u64) -> SourcePools {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = SourcePools::default();
    for class in 0..2 {
        pools.digits[class] = (0..per_class).map(|_| (0..784).map(|_| rng.gen()).collect()).collect();
        pools.vehicles[class] = (0..per_class).map(|_| (0..3072).map(|_| rng.gen()).collect()).collect();
    }
    pools
}

fn only_train(n: usize) -> SplitCounts {
    SplitCounts {
        train: n,
        ..SplitCounts::uniform(0)
    }
}

#[test]
fn train_group_counts_follow_rho() {
    let pools = fake_pools(5000, 1);
    let config = CollageConfig {
        rho: 0.9,
        seed: 3,
        counts: only_train(10_000),
    };
    let splits = build_mnist_cifar(&pools, &config).unwrap();
    let train = &splits[&SplitRole::Train];
    // group id = 2 * label + digit: (car,0), (car,1), (truck,0), (truck,1)
    assert_eq!(train.group_counts(), [4500, 500, 500, 4500]);
    // Binomial(10000, 0.9) expectation with a 3-sigma band.
    let aligned = (4500 + 4500) as f64;
    let sigma = (10_000.0f64 * 0.9 * 0.1).sqrt();
    assert!((aligned - 9000.0).abs() <= 3.0 * sigma);
    assert_eq!(train.image_shape, [64, 32, 3]);
}

#[test]
fn group_arithmetic_is_exact_at_degenerate_rhos() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [0, 1, 7, 100, 1001] {
        for (rho, expect_aligned) in [(0.0, 0usize), (1.0, n)] {
            let pairs = assign_groups(n, rho, &mut rng);
            assert_eq!(pairs.len(), n);
            assert_eq!(pairs.iter().filter(|p| p.0 == p.1).count(), expect_aligned);
        }
        let pairs = assign_groups(n, 0.5, &mut rng);
        let per_class = [n / 2, n - n / 2];
        for (label, &count) in per_class.iter().enumerate() {
            let aligned = pairs.iter().filter(|p| p.0 as usize == label && p.1 as usize == label).count();
            assert_eq!(aligned, (count as f64 * 0.5).round() as usize);
        }
    }
}

#[test]
fn derived_splits_get_reversed_and_balanced_correlation() {
    let pools = fake_pools(600, 2);
    let config = CollageConfig {
        rho: 0.9,
        seed: 0,
        counts: SplitCounts::uniform(200),
    };
    let splits = build_mnist_cifar(&pools, &config).unwrap();
    for (role, split) in &splits {
        let aligned = split.examples.iter().filter(|e| e.label == e.spurious).count();
        let expected = (role.correlation(0.9) * 100.0).round() as usize * 2;
        assert_eq!(aligned, expected, "{role}");
    }
    // Predicting the label from the attribute alone is at chance on the probe.
    let probe = &splits[&SplitRole::BalancedProbe];
    let hits = probe.examples.iter().filter(|e| e.label == e.spurious).count();
    assert_eq!(hits * 2, probe.len());
    assert!((splits[&SplitRole::OodTest].correlation - 0.1).abs() < 1e-12);
}

#[test]
fn source_indices_are_never_reused() {
    let pools = fake_pools(600, 4);
    let config = CollageConfig {
        rho: 0.9,
        seed: 9,
        counts: SplitCounts::uniform(200),
    };
    let splits = build_mnist_cifar(&pools, &config).unwrap();
    let mut digits = HashSet::new();
    let mut vehicles = HashSet::new();
    for split in splits.values() {
        for e in &split.examples {
            assert!(digits.insert((e.spurious, e.source[0])), "digit reused");
            assert!(vehicles.insert((e.label, e.source[1])), "vehicle reused");
        }
    }
    assert_eq!(vehicles.len(), 1200);
}

#[test]
fn insufficient_pool_is_an_error() {
    let pools = fake_pools(100, 0);
    let config = CollageConfig {
        rho: 0.9,
        seed: 0,
        counts: only_train(1000),
    };
    let err = build_mnist_cifar(&pools, &config).unwrap_err();
    assert!(matches!(err, DataError::InsufficientPool { .. }), "{err}");
    let bad_rho = CollageConfig {
        rho: 1.5,
        ..CollageConfig::default()
    };
    assert!(build_mnist_cifar(&pools, &bad_rho).is_err());
}

#[test]
fn collage_builds_are_deterministic() {
    let pools = fake_pools(300, 5);
    let config = CollageConfig {
        rho: 0.9,
        seed: 11,
        counts: SplitCounts::uniform(50),
    };
    let a = build_mnist_cifar(&pools, &config).unwrap();
    let b = build_mnist_cifar(&pools, &config).unwrap();
    assert_eq!(a, b);
    let c = build_mnist_cifar(&pools, &CollageConfig { seed: 12, ..config }).unwrap();
    assert_ne!(a[&SplitRole::Train].examples, c[&SplitRole::Train].examples);
}

#[test]
fn collage_layout_pads_digit_and_stacks_vehicle() {
    let digit: Vec<u8> = (0..784).map(|i| (i % 251) as u8).collect();
    let vehicle: Vec<u8> = (0..3072).map(|i| (i % 253) as u8).collect();
    let image = compose_collage(&digit, &vehicle);
    assert_eq!(image.len(), 64 * 32 * 3);
    let at = |y: usize, x: usize, c: usize| image[(y * 32 + x) * 3 + c];
    for y in 0..32 {
        for x in 0..32 {
            let inside = (2..30).contains(&y) && (2..30).contains(&x);
            let expect = if inside { digit[(y - 2) * 28 + x - 2] as f32 / 255.0 } else { 0.0 };
            for c in 0..3 {
                assert_eq!(at(y, x, c), expect);
            }
        }
    }
    for (i, &v) in image[32 * 32 * 3..].iter().enumerate() {
        assert_eq!(v, vehicle[i] as f32 / 255.0);
    }
    assert!(image.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn source_pools_load_from_standard_files() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = dir.path().join("mnist");
    let cifar = dir.path().join("cifar");
    std::fs::create_dir_all(&mnist).unwrap();
    std::fs::create_dir_all(&cifar).unwrap();
    for (prefix, labels) in [("train", vec![0u8, 1, 7]), ("t10k", vec![1u8, 3])] {
        let n = labels.len();
        let images = IdxArray {
            dims: vec![n, 28, 28],
            data: (0..n * 784).map(|i| (i / 784) as u8).collect(),
        };
        let labels = IdxArray {
            dims: vec![n],
            data: labels,
        };
        std::fs::write(mnist.join(format!("{prefix}-images-idx3-ubyte")), write_idx(&images).unwrap()).unwrap();
        std::fs::write(mnist.join(format!("{prefix}-labels-idx1-ubyte")), write_idx(&labels).unwrap()).unwrap();
    }
    for name in ["data_batch_1", "data_batch_2", "data_batch_3", "data_batch_4", "data_batch_5", "test_batch"] {
        let batch = CifarBatch {
            images: vec![5; 3 * 3072],
            labels: vec![CIFAR_AUTOMOBILE, 4, CIFAR_TRUCK],
        };
        std::fs::write(cifar.join(format!("{name}.bin")), write_cifar10(&batch)).unwrap();
    }
    let pools = load_source_pools(&mnist, &cifar).unwrap();
    assert_eq!(pools.digits[0].len(), 1);
    assert_eq!(pools.digits[1].len(), 2);
    assert_eq!(pools.digits[1][1], vec![0u8; 784]);
    assert_eq!(pools.vehicles[0].len(), 6);
    assert_eq!(pools.vehicles[1].len(), 6);

    std::fs::remove_file(cifar.join("test_batch.bin")).unwrap();
    let err = load_source_pools(&mnist, &cifar).unwrap_err();
    assert!(err.to_string().contains("test_batch.bin"), "{err}");
}

fn small_synthetic(seed: u64, rho: f64) -> SyntheticConfig {
    SyntheticConfig {
        rho,
        seed,
        counts: SplitCounts::uniform(200),
        ..SyntheticConfig::default()
    }
}

#[test]
fn synthetic_full_correlation_ties_attribute_to_label() {
    let splits = build_synthetic_spurious(&small_synthetic(0, 1.0)).unwrap();
    for e in &splits[&SplitRole::Train].examples {
        assert_eq!(e.spurious, e.label);
    }
    for e in &splits[&SplitRole::OodTest].examples {
        assert_ne!(e.spurious, e.label);
    }
}

#[test]
fn synthetic_empty_split_is_allowed() {
    let config = SyntheticConfig {
        counts: SplitCounts::uniform(0),
        ..SyntheticConfig::default()
    };
    let splits = build_synthetic_spurious(&config).unwrap();
    assert_eq!(splits.len(), 6);
    assert!(splits.values().all(DatasetSplit::is_empty));
}

#[test]
fn synthetic_pixels_are_finite_and_in_unit_range() {
    let splits = build_synthetic_spurious(&small_synthetic(3, 0.9)).unwrap();
    for split in splits.values() {
        for e in &split.examples {
            assert_eq!(e.image.len(), 16 * 16);
            assert!(e.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
    let a = build_synthetic_spurious(&small_synthetic(3, 0.9)).unwrap();
    assert_eq!(a, splits);
}

#[test]
fn synthetic_rejects_invalid_config() {
    let mut config = SyntheticConfig::default();
    config.noise = -1.0;
    assert!(matches!(build_synthetic_spurious(&config), Err(DataError::Invalid { field: "noise", .. })));
    config = SyntheticConfig {
        height: 5,
        ..SyntheticConfig::default()
    };
    assert!(build_synthetic_spurious(&config).is_err());
}

/// Logistic regression by full-batch gradient descent, used as an independent probe.
fn fit_logistic(features: &[Vec<f64>], labels: &[u8], steps: usize, lr: f64) -> Vec<f64> {
    let d = features[0].len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..steps {
        let mut g = vec![0.0; d + 1];
        for (f, &y) in features.iter().zip(labels) {
            let z: f64 = w[d] + f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let r = p - y as f64;
            for k in 0..d {
                g[k] += r * f[k];
            }
            g[d] += r;
        }
        for k in 0..=d {
            w[k] -= lr * g[k] / features.len() as f64;
        }
    }
    w
}

#[test]
fn robust_half_alone_is_linearly_solvable() {
    let config = SyntheticConfig {
        seed: 21,
        ..SyntheticConfig::default()
    };
    let splits = build_synthetic_spurious(&config).unwrap();
    let half = config.height / 2 * config.width;
    // Spurious region zeroed: keep only the bottom half.
    let features = |split: &DatasetSplit| -> Vec<Vec<f64>> {
        split
            .examples
            .iter()
            .map(|e| e.image[half..].iter().map(|&v| v as f64 - 0.5).collect())
            .collect()
    };
    let train = &splits[&SplitRole::Train];
    let w = fit_logistic(&features(train), &train.examples.iter().map(|e| e.label).collect::<Vec<_>>(), 300, 1.0);
    let test = &splits[&SplitRole::OodTest];
    let correct = features(test)
        .iter()
        .zip(&test.examples)
        .filter(|(f, e)| {
            let z: f64 = w[half] + f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) as u8 == e.label
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.95, "robust probe accuracy {acc}");
}

#[test]
fn split_store_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let splits = build_synthetic_spurious(&small_synthetic(7, 0.8)).unwrap();
    save_splits(dir.path(), &splits).unwrap();
    let loaded = load_splits(dir.path()).unwrap();
    assert_eq!(loaded, splits);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["splits"][0]["role"], "train");
    assert_eq!(manifest["splits"][0]["image_shape"], serde_json::json!([16, 16, 1]));

    let meta = dir.path().join("ood-test.meta.bin");
    let bytes = std::fs::read(&meta).unwrap();
    std::fs::write(&meta, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_splits(dir.path()).is_err());
    std::fs::write(&meta, &bytes).unwrap();
    let mut flipped = bytes.clone();
    flipped[0] ^= 1;
    std::fs::write(&meta, &flipped).unwrap();
    assert!(matches!(load_splits(dir.path()), Err(DataError::Manifest(_))));
}

#[test]
fn images_tensor_stacks_selected_examples() {
    let splits: BTreeMap<_, _> = build_synthetic_spurious(&small_synthetic(1, 0.9)).unwrap();
    let train = &splits[&SplitRole::Train];
    let t = train.images_tensor::<f64>(&[3, 0]).unwrap();
    assert_eq!(t.shape(), &[2, 16, 16, 1]);
    assert_eq!(t.data()[0], train.examples[3].image[0] as f64);
    assert!(train.images_tensor::<f32>(&[10_000]).is_err());
    assert_eq!("ood-val".parse::<SplitRole>().unwrap(), SplitRole::OodVal);
    assert!("val".parse::<SplitRole>().is_err());
}
