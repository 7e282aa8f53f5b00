use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::autodiff::Element;
use crate::data::{build_mnist_cifar, build_synthetic_spurious, load_source_pools, load_splits, save_splits, DatasetSplit, SplitRole};
use crate::eval::{emit_report, evaluate, evaluate_model, oracle_select_head, profile_heads, single_head_accuracies, EvalReport, Target};
use crate::model::{load_checkpoint, save_checkpoint, PruneMask, Vit};
use crate::train::{grid_select, make_grid, train_with_checkpoints, Precision, TrainConfig, TrainHistory};

use super::config::{DatasetKind, RunConfig};
use super::CliError;

pub const RUN_MANIFEST_FORMAT: &str = "diverse-vit-run";
const CONFIG_SNAPSHOT: &str = "config.txt";

type Splits = BTreeMap<SplitRole, DatasetSplit>;

#[derive(Serialize)]
struct RunManifest<'a> {
    format: &'static str,
    version: u32,
    command: &'a str,
    config: &'static str,
    files: Vec<String>,
}

/// Collects everything written into the run directory for the manifest.
struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(config: &RunConfig) -> Result<Self> {
        let root = config.out_dir.clone();
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let mut dir = Self { root, files: Vec::new() };
        dir.write(CONFIG_SNAPSHOT, config.to_kv())?;
        Ok(dir)
    }

    fn path(&mut self, relative: &str) -> Result<PathBuf> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.files.push(relative.to_string());
        Ok(path)
    }

    fn write(&mut self, relative: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(relative)?;
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn write_json(&mut self, relative: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(relative, text)
    }

    fn finish(mut self, command: &str) -> Result<()> {
        self.files.sort();
        self.files.dedup();
        let manifest = RunManifest {
            format: RUN_MANIFEST_FORMAT,
            version: 1,
            command,
            config: CONFIG_SNAPSHOT,
            files: std::mem::take(&mut self.files),
        };
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn dispatch(command: &str, config: &RunConfig) -> Result<()> {
    match config.train.precision {
        Precision::F32 => dispatch_typed::<f32>(command, config),
        Precision::F64 => dispatch_typed::<f64>(command, config),
    }
}

fn dispatch_typed<T: Element>(command: &str, config: &RunConfig) -> Result<()> {
    // Checked before the run directory is touched so usage errors leave no trace.
    match command {
        "prepare-data" | "train" | "reproduce" => {
            if config.splits_dir.is_none() && config.dataset == DatasetKind::MnistCifar {
                config.require_sources()?;
            }
        }
        "eval" | "select-head" | "profile-heads" => {
            config.checkpoint.as_ref().ok_or(CliError::MissingPath("checkpoint"))?;
            if config.splits_dir.is_none() && config.dataset == DatasetKind::MnistCifar {
                config.require_sources()?;
            }
        }
        _ => {}
    }
    let mut dir = RunDir::create(config)?;
    match command {
        "prepare-data" => prepare_data(config, &mut dir)?,
        "train" => train_command::<T>(config, &mut dir)?,
        "eval" => eval_command::<T>(config, &mut dir)?,
        "select-head" => select_head_command::<T>(config, &mut dir)?,
        "profile-heads" => profile_command::<T>(config, &mut dir)?,
        "report" => report_command(config, &mut dir)?,
        "reproduce" => reproduce::<T>(config, &mut dir)?,
        other => return Err(CliError::UnknownCommand(other.to_string()).into()),
    }
    dir.finish(command)
}

/// Splits for one seed: loaded from `splits_dir` when set, otherwise built.
pub fn build_splits(config: &RunConfig, seed: u64) -> Result<Splits> {
    if let Some(dir) = &config.splits_dir {
        return load_splits(dir).with_context(|| format!("loading splits from {}", dir.display()));
    }
    match config.dataset {
        DatasetKind::Synthetic => Ok(build_synthetic_spurious(&config.synthetic_config(seed))?),
        DatasetKind::MnistCifar => {
            let (mnist, cifar) = config.require_sources()?;
            let pools = load_source_pools(mnist, cifar)?;
            Ok(build_mnist_cifar(&pools, &config.collage_config(seed))?)
        }
    }
}

fn prepare_data(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let seed = config.seeds[0];
    let splits = build_splits(config, seed)?;
    let target = dir.root.join("splits");
    save_splits(&target, &splits)?;
    for role in splits.keys() {
        dir.files.push(format!("splits/{role}.images.f32"));
        dir.files.push(format!("splits/{role}.meta.bin"));
    }
    dir.files.push("splits/manifest.json".into());
    for (role, split) in &splits {
        log::info!("{role}: {} examples, groups {:?}", split.len(), split.group_counts());
    }
    Ok(())
}

fn history_files<T: Element>(dir: &mut RunDir, prefix: &str, model: &Vit<T>, history: &TrainHistory) -> Result<()> {
    save_checkpoint(model, &dir.path(&format!("{prefix}model.ckpt"))?)?;
    dir.write(&format!("{prefix}history.csv"), history.to_csv())?;
    dir.write_json(&format!("{prefix}history.json"), history)
}

fn train_command<T: Element>(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let splits = build_splits(config, config.train.seed)?;
    if config.grid {
        let grid = make_grid(&config.train, &config.lambda_grid, &config.lr_grid);
        let run = grid_select::<T>(&config.model, &grid, &splits)?;
        log::info!("selected lambda={} lr={}", run.config.lambda, run.config.learning_rate);
        dir.write("selected.txt", run.config.to_kv())?;
        history_files(dir, "", &run.model, &run.history)?;
    } else {
        let model = Vit::<T>::init(&config.model, config.train.seed)?;
        let checkpoints = (config.train.eval_every > 0).then(|| dir.root.join("checkpoints"));
        let (model, history) = train_with_checkpoints(model, &splits, &config.train, checkpoints.as_deref())?;
        if checkpoints.is_some() {
            for record in &history.records {
                dir.files.push(format!("checkpoints/step-{:06}.ckpt", record.step));
            }
        }
        history_files(dir, "", &model, &history)?;
    }
    Ok(())
}

fn load_model<T: Element>(config: &RunConfig) -> Result<Vit<T>> {
    let path = config.checkpoint.as_deref().ok_or(CliError::MissingPath("checkpoint"))?;
    let model = load_checkpoint::<T>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if model.config.image_shape() != config.model.image_shape() {
        bail!(
            "checkpoint expects images {:?}, dataset provides {:?}",
            model.config.image_shape(),
            config.model.image_shape()
        );
    }
    Ok(model)
}

fn split_of(splits: &Splits, role: SplitRole) -> Result<&DatasetSplit> {
    splits.get(&role).with_context(|| format!("missing `{role}` split"))
}

#[derive(Serialize)]
struct EvalSummary {
    keep_heads: Vec<usize>,
    id_test_acc: f64,
    ood_test_acc: f64,
}

fn eval_command<T: Element>(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let model = load_model::<T>(config)?;
    let splits = build_splits(config, config.seeds[0])?;
    let layer = model.config.regularized_layer;
    let mask = if config.keep_heads.is_empty() {
        None
    } else {
        Some(PruneMask::subset(&model.config, layer, &config.keep_heads)?)
    };
    let summary = EvalSummary {
        keep_heads: if config.keep_heads.is_empty() {
            (0..model.config.heads).collect()
        } else {
            config.keep_heads.clone()
        },
        id_test_acc: evaluate(&model, split_of(&splits, SplitRole::IdTest)?, mask.as_ref(), Target::Label)?,
        ood_test_acc: evaluate(&model, split_of(&splits, SplitRole::OodTest)?, mask.as_ref(), Target::Label)?,
    };
    println!("id_test_acc={:.4} ood_test_acc={:.4}", summary.id_test_acc, summary.ood_test_acc);
    dir.write_json("eval.json", &summary)
}

#[derive(Serialize)]
struct Selection {
    layer: usize,
    selected_head: usize,
    ood_val_acc: f64,
    per_head_ood_val_acc: Vec<f64>,
}

fn select_head_command<T: Element>(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let model = load_model::<T>(config)?;
    let splits = build_splits(config, config.seeds[0])?;
    let layer = model.config.regularized_layer;
    let ood_val = split_of(&splits, SplitRole::OodVal)?;
    let (selected_head, ood_val_acc) = oracle_select_head(&model, ood_val, layer)?;
    let selection = Selection {
        layer,
        selected_head,
        ood_val_acc,
        per_head_ood_val_acc: single_head_accuracies(&model, ood_val, layer)?,
    };
    println!("selected_head={selected_head} ood_val_acc={ood_val_acc:.4}");
    dir.write_json("selection.json", &selection)
}

fn profile_command<T: Element>(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let model = load_model::<T>(config)?;
    let splits = build_splits(config, config.seeds[0])?;
    let probe = split_of(&splits, SplitRole::BalancedProbe)?;
    let profile = profile_heads(&model, probe, model.config.regularized_layer)?;
    let mut csv = String::from("head,robust_acc,spurious_acc\n");
    for p in &profile {
        csv.push_str(&format!("{},{},{}\n", p.head, p.robust_acc, p.spurious_acc));
        println!("head {}: robust {:.4} spurious {:.4}", p.head, p.robust_acc, p.spurious_acc);
    }
    dir.write("profile.csv", csv)?;
    dir.write_json("profile.json", &profile)
}

fn methods_dir(config: &RunConfig) -> PathBuf {
    config.out_dir.join("methods")
}

fn emit(dir: &mut RunDir, reports: &[EvalReport]) -> Result<()> {
    let files = emit_report(reports, &dir.root)?;
    for path in [&files.json, &files.table_csv, &files.heads_csv] {
        if let Ok(rel) = path.strip_prefix(&dir.root) {
            dir.files.push(rel.display().to_string());
        }
    }
    for row in &files.rows {
        println!(
            "{:<10} id {:.4} ± {:.4}  ood {:.4} ± {:.4}",
            row.method, row.id_acc.mean, row.id_acc.std, row.ood_acc.mean, row.ood_acc.std
        );
    }
    Ok(())
}

fn report_command(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let methods = methods_dir(config);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&methods)
        .with_context(|| format!("reading {}", methods.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for path in &paths {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        reports.push(serde_json::from_str::<EvalReport>(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    // ERM first so the table reads ERM, Div, ERM+Sel, Div+Sel.
    reports.sort_by_key(|r| (r.method != "ERM", r.method.clone()));
    emit(dir, &reports)
}

fn reproduce<T: Element>(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    if config.lambda_grid.iter().all(|&l| l == 0.0) {
        bail!(CliError::Invalid {
            field: "lambda_grid".into(),
            reason: "needs a positive lambda for the Div method".into(),
        });
    }
    let mut erm = EvalReport {
        method: "ERM".into(),
        seeds: Vec::new(),
    };
    let mut div = EvalReport {
        method: "Div".into(),
        seeds: Vec::new(),
    };
    let div_lambdas: Vec<f64> = config.lambda_grid.iter().copied().filter(|&l| l > 0.0).collect();
    for &seed in &config.seeds {
        let splits = build_splits(config, seed)?;
        let base = TrainConfig {
            seed,
            ..config.train.clone()
        };
        for (report, lambdas) in [(&mut erm, vec![0.0]), (&mut div, div_lambdas.clone())] {
            let grid = make_grid(&base, &lambdas, &config.lr_grid);
            let run = grid_select::<T>(&config.model, &grid, &splits)?;
            let prefix = format!("seed-{seed}/{}-", report.method.to_lowercase());
            history_files(dir, &prefix, &run.model, &run.history)?;
            let eval = evaluate_model(&run.model, &splits, seed, run.config.lambda, run.config.learning_rate)?;
            log::info!(
                "seed {seed} {}: lambda={} lr={} id={:.4} ood={:.4} sel_ood={:.4}",
                report.method,
                eval.lambda,
                eval.learning_rate,
                eval.id_acc,
                eval.ood_acc,
                eval.selected_ood_acc
            );
            report.seeds.push(eval);
        }
    }
    for report in [&erm, &div] {
        dir.write_json(&format!("methods/{}.json", report.method), report)?;
    }
    emit(dir, &[erm, div])
}
