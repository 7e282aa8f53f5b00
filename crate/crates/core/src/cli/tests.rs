use std::path::{Path, PathBuf};

use super::*;

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn overrides(list: &[(&str, &str)]) -> Vec<(String, String)> {
    list.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn flags_accept_dashes_and_inline_values() {
    let inv = parse_args(&args(&["train", "--lambda-grid", "0.1,1", "--lr=0.001", "--config", "run.txt"])).unwrap();
    assert_eq!(inv.command, "train");
    assert_eq!(inv.config_file, Some(PathBuf::from("run.txt")));
    assert_eq!(inv.overrides, overrides(&[("lambda_grid", "0.1,1"), ("lr", "0.001")]));
}

#[test]
fn unknown_command_and_dangling_flag_are_usage_errors() {
    assert!(matches!(parse_args(&args(&["fit"])), Err(CliError::UnknownCommand(_))));
    assert!(matches!(parse_args(&args(&[])), Err(CliError::MissingCommand)));
    assert!(matches!(parse_args(&args(&["train", "--epochs"])), Err(CliError::MissingValue(_))));
    assert!(matches!(parse_args(&args(&["train", "epochs"])), Err(CliError::UnexpectedArgument(_))));
}

#[test]
fn unknown_key_is_rejected() {
    let err = RunConfig::resolve(None, None, &overrides(&[("warp_factor", "9")])).unwrap_err();
    assert!(matches!(err, CliError::UnknownKey(k) if k == "warp_factor"));
}

#[test]
fn invalid_value_names_its_field() {
    let err = RunConfig::resolve(None, None, &overrides(&[("dataset", "synthetic"), ("rho", "1.5")])).unwrap_err();
    assert!(err.to_string().contains("rho"), "{err}");
    let err = RunConfig::resolve(None, None, &overrides(&[("dataset", "synthetic"), ("heads", "0")])).unwrap_err();
    assert!(err.to_string().contains("heads"), "{err}");
}

#[test]
fn lambda_override_touches_only_lambda() {
    let base = overrides(&[("dataset", "synthetic")]);
    let with = |lambda: &str| {
        let mut o = base.clone();
        o.push(("lambda".into(), lambda.into()));
        RunConfig::resolve(None, None, &o).unwrap()
    };
    let (a, mut b) = (with("0"), with("1"));
    assert_eq!(b.train.lambda, 1.0);
    b.train.lambda = 0.0;
    assert_eq!(a, b);
}

#[test]
fn precedence_is_file_then_env_then_flags() {
    let file = "dataset=mnist-cifar\nmnist_dir=/from/file\nepochs=3\n# comment\n";
    let config = RunConfig::resolve(Some(file), Some(Path::new("/env")), &overrides(&[("epochs", "4")])).unwrap();
    assert_eq!(config.mnist_dir, Some(PathBuf::from("/env/mnist")));
    assert_eq!(config.cifar_dir, Some(PathBuf::from("/env/cifar-10-batches-bin")));
    assert_eq!(config.train.epochs, 4);
    let flagged = RunConfig::resolve(Some(file), Some(Path::new("/env")), &overrides(&[("mnist_dir", "/flag")])).unwrap();
    assert_eq!(flagged.mnist_dir, Some(PathBuf::from("/flag")));
}

#[test]
fn seeds_accept_count_or_list() {
    let count = RunConfig::resolve(None, None, &overrides(&[("seeds", "3")])).unwrap();
    assert_eq!(count.seeds, vec![0, 1, 2]);
    let list = RunConfig::resolve(None, None, &overrides(&[("seeds", "7,9")])).unwrap();
    assert_eq!(list.seeds, vec![7, 9]);
    let single = RunConfig::resolve(None, None, &overrides(&[("seeds", "5,")])).unwrap();
    assert_eq!(single.seeds, vec![5]);
}

#[test]
fn snapshot_resolves_to_the_same_config() {
    for dataset in ["synthetic", "mnist-cifar"] {
        let config = RunConfig::resolve(
            None,
            Some(Path::new("/data")),
            &overrides(&[("dataset", dataset), ("seeds", "4"), ("lambda", "0.5"), ("keep_heads", "1,2"), ("top_score", "probability")]),
        )
        .unwrap();
        let again = RunConfig::resolve(Some(&config.to_kv()), None, &[]).unwrap();
        assert_eq!(config, again, "{dataset}");
    }
}

#[test]
fn synthetic_size_resizes_the_model_input() {
    let config = RunConfig::resolve(None, None, &overrides(&[("dataset", "synthetic"), ("synthetic_size", "8")])).unwrap();
    assert_eq!(config.model.image_shape(), [8, 8, 1]);
}

#[test]
fn collage_dataset_requires_collage_shaped_input() {
    let err = RunConfig::resolve(None, None, &overrides(&[("image_height", "32")])).unwrap_err();
    assert!(err.to_string().contains("image_height"), "{err}");
}
