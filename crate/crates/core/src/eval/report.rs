//! Multi-seed report: `report.json` with raw per-seed values and aggregates,
//! `table.csv` with one row per method, `heads.csv` with the per-head profile.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalError, HeadProfile};

/// Name recorded in reports for the per-head specialization metric.
pub const METRIC_NAME: &str = "attribute-prediction accuracy of the single-head model";
const SPECIALIZATION_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEval {
    pub head: usize,
    pub ood_val_acc: f64,
    pub ood_test_acc: f64,
    pub robust_acc: f64,
    pub spurious_acc: f64,
}

impl HeadEval {
    pub fn profile(&self) -> HeadProfile {
        HeadProfile {
            head: self.head,
            robust_acc: self.robust_acc,
            spurious_acc: self.spurious_acc,
        }
    }
}

/// Evaluation of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub selected_head: usize,
    pub selected_id_acc: f64,
    pub selected_ood_acc: f64,
    pub per_head: Vec<HeadEval>,
}

impl SeedEval {
    pub fn specialized_heads(&self) -> usize {
        self.per_head
            .iter()
            .filter(|h| h.profile().is_specialized(SPECIALIZATION_MARGIN))
            .count()
    }
}

/// All seeds of one training method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seeds: Vec<SeedEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

pub fn summarize(values: &[f64]) -> Result<Stat, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty("seed list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Stat {
        mean,
        std,
        values: values.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub id_acc: Stat,
    pub ood_acc: Stat,
}

impl EvalReport {
    /// The full-model row and the selected-head row.
    pub fn rows(&self) -> Result<[MethodRow; 2], EvalError> {
        let col = |f: fn(&SeedEval) -> f64| summarize(&self.seeds.iter().map(f).collect::<Vec<_>>());
        Ok([
            MethodRow {
                method: self.method.clone(),
                id_acc: col(|s| s.id_acc)?,
                ood_acc: col(|s| s.ood_acc)?,
            },
            MethodRow {
                method: format!("{}+Sel", self.method),
                id_acc: col(|s| s.selected_id_acc)?,
                ood_acc: col(|s| s.selected_ood_acc)?,
            },
        ])
    }
}

#[derive(Serialize)]
struct ReportJson<'a> {
    metric: &'static str,
    specialization_margin: f64,
    methods: &'a [EvalReport],
    rows: Vec<MethodRow>,
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub table_csv: PathBuf,
    pub heads_csv: PathBuf,
    pub rows: Vec<MethodRow>,
}

/// Rows ordered as the full models first, then their selected-head variants.
pub fn table_rows(reports: &[EvalReport]) -> Result<Vec<MethodRow>, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty("report list"));
    }
    let mut full = Vec::new();
    let mut selected = Vec::new();
    for r in reports {
        let [a, b] = r.rows()?;
        full.push(a);
        selected.push(b);
    }
    full.extend(selected);
    Ok(full)
}

pub fn emit_report(reports: &[EvalReport], dir: &Path) -> Result<ReportFiles, EvalError> {
    let rows = table_rows(reports)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;

    let json = dir.join("report.json");
    let body = ReportJson {
        metric: METRIC_NAME,
        specialization_margin: SPECIALIZATION_MARGIN,
        methods: reports,
        rows: rows.clone(),
    };
    let text = serde_json::to_string_pretty(&body).map_err(|e| EvalError::Serialize(e.to_string()))?;
    std::fs::write(&json, text).map_err(io(&json))?;

    let table_csv = dir.join("table.csv");
    let mut text = String::from("method,id_acc_mean,id_acc_std,ood_acc_mean,ood_acc_std,seeds\n");
    for r in &rows {
        writeln!(
            text,
            "{},{},{},{},{},{}",
            r.method,
            r.id_acc.mean,
            r.id_acc.std,
            r.ood_acc.mean,
            r.ood_acc.std,
            r.ood_acc.values.len()
        )
        .unwrap();
    }
    std::fs::write(&table_csv, text).map_err(io(&table_csv))?;

    let heads_csv = dir.join("heads.csv");
    let mut text = String::from("method,seed,head,ood_val_acc,ood_test_acc,robust_acc,spurious_acc,selected\n");
    for r in reports {
        for s in &r.seeds {
            for h in &s.per_head {
                writeln!(
                    text,
                    "{},{},{},{},{},{},{},{}",
                    r.method,
                    s.seed,
                    h.head,
                    h.ood_val_acc,
                    h.ood_test_acc,
                    h.robust_acc,
                    h.spurious_acc,
                    h.head == s.selected_head
                )
                .unwrap();
            }
        }
    }
    std::fs::write(&heads_csv, text).map_err(io(&heads_csv))?;
    Ok(ReportFiles {
        json,
        table_csv,
        heads_csv,
        rows,
    })
}
