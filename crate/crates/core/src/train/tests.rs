use std::collections::BTreeMap;

use super::*;
use crate::data::{build_synthetic_spurious, SplitCounts, SyntheticConfig};

fn scalar_config(lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        ..TrainConfig::default()
    }
}

fn scalar(v: f64) -> Tensor<f64> {
    Tensor::parameter(&[1], vec![v]).unwrap()
}

#[test]
fn first_adam_step_moves_by_learning_rate() {
    let config = scalar_config(0.1);
    let theta = [scalar(1.0)];
    let mut state = AdamState::new(&theta);
    let out = adam_step(&theta, &[scalar(1.0)], &mut state, &config).unwrap();
    assert!(!out.skipped);
    let expected = 1.0 - 0.1 * 1.0 / (1.0 + config.eps);
    assert!((out.params[0].data()[0] - expected).abs() < 1e-15);
    assert!((out.params[0].data()[0] - 0.9).abs() < 1e-7);
    assert!(out.params[0].requires_grad() && out.params[0].is_leaf());
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let config = scalar_config(0.1);
    let params = [Tensor::parameter(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap()];
    let mut state = AdamState::new(&params);
    let mut current = params.to_vec();
    for _ in 0..5 {
        current = adam_step(&current, &[Tensor::zeros(&[2, 2])], &mut state, &config).unwrap().params;
    }
    assert_eq!(current[0].data(), params[0].data());
}

#[test]
fn adam_on_a_parabola_matches_the_scalar_recursion() {
    let config = scalar_config(0.1);
    // Independent scalar recursion for f(t) = t^2.
    let (mut t, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut oracle = Vec::new();
    for k in 1..=100 {
        let g = 2.0 * t;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(k));
        let v_hat = v / (1.0 - 0.999f64.powi(k));
        t -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        oracle.push(t);
    }
    let mut theta = vec![scalar(1.0)];
    let mut state = AdamState::new(&theta);
    for expected in &oracle {
        let x = theta[0].data()[0];
        theta = adam_step(&theta, &[scalar(2.0 * x)], &mut state, &config).unwrap().params;
        assert!((theta[0].data()[0] - expected).abs() < 1e-12);
    }
    assert!(theta[0].data()[0].abs() < 0.1, "{}", theta[0].data()[0]);
    assert_eq!(state.t, 100);
}

#[test]
fn non_finite_gradient_skips_the_step() {
    let config = scalar_config(0.1);
    let params = [scalar(1.0), scalar(2.0)];
    let mut state = AdamState::new(&params);
    let before = state.clone();
    let out = adam_step(&params, &[scalar(1.0), scalar(f64::NAN)], &mut state, &config).unwrap();
    assert!(out.skipped);
    assert_eq!(out.params[0].data(), &[1.0]);
    assert_eq!(state, before);
    assert!(adam_step(&params, &[scalar(1.0)], &mut state, &config).is_err());
    assert!(adam_step(&params, &[scalar(1.0), Tensor::zeros(&[2])], &mut state, &config).is_err());
}

fn tiny_splits(seed: u64) -> BTreeMap<SplitRole, DatasetSplit> {
    build_synthetic_spurious(&SyntheticConfig {
        height: 8,
        width: 8,
        seed,
        counts: SplitCounts {
            train: 256,
            id_val: 64,
            ood_val: 64,
            ..SplitCounts::uniform(0)
        },
        robust_strength: 0.15,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_height: 8,
        image_width: 8,
        channels: 1,
        patch_size: 4,
        dim: 8,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn tiny_train(lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lambda,
        learning_rate: 3e-3,
        epochs: 3,
        batch_size: 32,
        seed,
        eval_every: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn erm_run_has_no_diversity_column() {
    let splits = tiny_splits(0);
    let model = Vit::<f32>::init(&tiny_model(), 0).unwrap();
    let (_, history) = train(model, &splits, &tiny_train(0.0, 0)).unwrap();
    assert_eq!(history.steps, 24);
    assert_eq!(history.records.iter().map(|r| r.step).collect::<Vec<_>>(), [8, 16, 24]);
    assert!(history.records.iter().all(|r| r.l_div.is_none() && r.l_erm.is_finite()));
    let csv = history.to_csv();
    assert!(csv.starts_with("step,l_erm,id_val_acc,ood_val_acc\n"), "{csv}");
    assert_eq!(csv.lines().count(), 4);
    assert!(history.final_train_loss < history.initial_train_loss);
}

#[test]
fn regularized_run_records_diversity_and_learns() {
    let splits = tiny_splits(1);
    let model = Vit::<f32>::init(&tiny_model(), 1).unwrap();
    let (_, history) = train(model, &splits, &tiny_train(1.0, 1)).unwrap();
    assert!(history.records.iter().all(|r| r.l_div.is_some_and(f64::is_finite)));
    assert!(history.to_csv().starts_with("step,l_erm,l_div,id_val_acc,ood_val_acc\n"));
    assert!(history.final_train_loss < history.initial_train_loss);
    let steps: Vec<usize> = history.records.iter().map(|r| r.step).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn training_is_reproducible() {
    let splits = tiny_splits(2);
    let run = || {
        let model = Vit::<f32>::init(&tiny_model(), 5).unwrap();
        train(model, &splits, &tiny_train(0.5, 5)).unwrap()
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    for (x, y) in a.parameters().iter().zip(b.parameters()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn regularizer_lowers_diversity_against_erm_baseline() {
    let mut wins = 0;
    for seed in 0..3 {
        let splits = tiny_splits(10 + seed);
        let train_split = &splits[&SplitRole::Train];
        let measure = |lambda: f64| {
            let model = Vit::<f32>::init(&tiny_model(), seed).unwrap();
            let (model, _) = train(model, &splits, &tiny_train(lambda, seed)).unwrap();
            measure_diversity(&model, train_split, 256, TopScore::Logit, DEFAULT_EPSILON).unwrap()
        };
        let (erm, div) = (measure(0.0), measure(1.0));
        if div < erm {
            wins += 1;
        }
    }
    assert_eq!(wins, 3);
}

#[test]
fn diversity_is_non_increasing_in_lambda() {
    let mut ordered = 0;
    for seed in 0..3 {
        let splits = tiny_splits(20 + seed);
        let values: Vec<f64> = [0.0, 0.1, 1.0]
            .iter()
            .map(|&lambda| {
                let model = Vit::<f32>::init(&tiny_model(), seed).unwrap();
                let (model, _) = train(model, &splits, &tiny_train(lambda, seed)).unwrap();
                measure_diversity(&model, &splits[&SplitRole::Train], 256, TopScore::Logit, DEFAULT_EPSILON).unwrap()
            })
            .collect();
        if values.windows(2).all(|w| w[1] <= w[0]) {
            ordered += 1;
        }
    }
    assert!(ordered >= 2, "ordered in {ordered} of 3 seeds");
}

#[test]
fn huge_learning_rate_is_reported_as_divergence() {
    let splits = tiny_splits(3);
    let model = Vit::<f32>::init(&tiny_model(), 3).unwrap();
    let config = TrainConfig {
        learning_rate: 1e4,
        epochs: 20,
        ..tiny_train(0.0, 3)
    };
    let err = train(model, &splits, &config).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
}

#[test]
fn missing_splits_and_bad_config_are_rejected() {
    let mut splits = tiny_splits(4);
    let model = Vit::<f32>::init(&tiny_model(), 0).unwrap();
    let bad = TrainConfig {
        beta1: 1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(model.clone(), &splits, &bad), Err(TrainError::Config { field: "beta1", .. })));
    splits.remove(&SplitRole::OodVal);
    assert!(matches!(train(model, &splits, &tiny_train(0.0, 0)), Err(TrainError::MissingSplit(SplitRole::OodVal))));
}

#[test]
fn config_round_trips_through_key_values() {
    let config = TrainConfig {
        lambda: 0.25,
        precision: Precision::F64,
        top_score: TopScore::Probability,
        ..TrainConfig::default()
    };
    let mut parsed = TrainConfig::default();
    for line in config.to_kv().lines() {
        let (k, v) = line.split_once('=').unwrap();
        assert!(parsed.set(k, v).unwrap(), "{k}");
    }
    assert_eq!(parsed, config);
    assert!(!parsed.set("heads", "4").unwrap());
    assert!(parsed.set("lambda", "abc").is_err());
    let negative = TrainConfig {
        lambda: -1.0,
        ..TrainConfig::default()
    };
    assert!(negative.validate().is_err());
}

#[test]
fn grid_of_one_returns_that_config() {
    let splits = tiny_splits(5);
    let config = TrainConfig {
        epochs: 1,
        ..tiny_train(0.5, 2)
    };
    let run = grid_select::<f32>(&tiny_model(), std::slice::from_ref(&config), &splits).unwrap();
    assert_eq!(run.config, config);
    assert!(grid_select::<f32>(&tiny_model(), &[], &splits).is_err());
}

#[test]
fn grid_ties_prefer_smaller_lambda_then_lower_rate() {
    let splits = tiny_splits(6);
    // No steps: every run keeps the same initialization and the same accuracy.
    let base = TrainConfig {
        epochs: 0,
        ..tiny_train(0.0, 7)
    };
    let grid = make_grid(&base, &[1.0, 0.5, 2.0], &[3e-4, 1e-4]);
    assert_eq!(grid.len(), 6);
    let run = grid_select::<f32>(&tiny_model(), &grid, &splits).unwrap();
    assert_eq!((run.config.lambda, run.config.learning_rate), (0.5, 1e-4));
}

#[test]
fn checkpoints_are_written_at_each_record() {
    let dir = tempfile::tempdir().unwrap();
    let splits = tiny_splits(7);
    let model = Vit::<f32>::init(&tiny_model(), 0).unwrap();
    let (trained, _) = train_with_checkpoints(model, &splits, &tiny_train(0.0, 0), Some(dir.path())).unwrap();
    let last = crate::model::load_checkpoint::<f32>(&dir.path().join("step-000024.ckpt")).unwrap();
    for (x, y) in trained.parameters().iter().zip(last.parameters()) {
        assert_eq!(x.data(), y.data());
    }
    assert!(dir.path().join("step-000008.ckpt").exists());
}
