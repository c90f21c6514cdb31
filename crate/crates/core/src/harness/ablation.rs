//! Architecture × context-window ablation grids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::train::{train_on_dataset, ModelChoice, TrainConfig};
use crate::audio::AudioArchitecture;
use crate::error::{Error, Result};
use crate::fusion::Architecture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
}

impl Modality {
    /// The context-free model filling the `N = 0` column.
    pub fn baseline(self) -> ModelChoice {
        match self {
            Modality::Text => ModelChoice::Text(Architecture::Concat),
            Modality::Audio => ModelChoice::Audio(AudioArchitecture::HubertStyle),
        }
    }

    pub fn baseline_label(self) -> &'static str {
        match self {
            Modality::Text => "Transformer (No Context)",
            Modality::Audio => AudioArchitecture::HubertStyle.table_label(),
        }
    }

    pub fn default_architectures(self) -> Vec<ModelChoice> {
        match self {
            Modality::Text => Architecture::ALL
                .iter()
                .map(|&a| ModelChoice::Text(a))
                .collect(),
            Modality::Audio => vec![ModelChoice::Audio(AudioArchitecture::TemporalAvg)],
        }
    }
}

pub fn row_label(model: ModelChoice) -> &'static str {
    match model {
        ModelChoice::Text(a) => a.table_label(),
        ModelChoice::Audio(a) => a.table_label(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub modality: Modality,
    /// Context architectures evaluated at every `N >= 1`.
    pub architectures: Vec<ModelChoice>,
    /// Window sizes; `0` adds the context-free baseline cell.
    pub windows: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Shared training settings; model, window and seed are overridden per cell.
    pub base: TrainConfig,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: String,
    pub model: ModelChoice,
    pub window: usize,
    pub seeds: Vec<u64>,
    pub macro_f1: Vec<f64>,
    pub mean_macro_f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub modality: Modality,
    pub windows: Vec<usize>,
    pub rows: Vec<String>,
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CellKey {
    row: usize,
    model: ModelChoice,
    window: usize,
}

fn cell_keys(spec: &AblationSpec) -> (Vec<String>, Vec<CellKey>) {
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    if spec.windows.contains(&0) {
        rows.push(spec.modality.baseline_label().to_string());
        keys.push(CellKey {
            row: 0,
            model: spec.modality.baseline(),
            window: 0,
        });
    }
    let ctx_windows: Vec<usize> = spec.windows.iter().copied().filter(|&n| n > 0).collect();
    if !ctx_windows.is_empty() {
        for &model in &spec.architectures {
            rows.push(row_label(model).to_string());
            let row = rows.len() - 1;
            keys.extend(
                ctx_windows
                    .iter()
                    .map(|&window| CellKey { row, model, window }),
            );
        }
    }
    (rows, keys)
}

fn run_cell(dataset: &Dataset, spec: &AblationSpec, rows: &[String], key: CellKey) -> CellResult {
    let mut scores = Vec::new();
    let mut error = None;
    for &seed in &spec.seeds {
        let mut cfg = spec.base.clone();
        cfg.model = key.model;
        cfg.context_window = key.window;
        cfg.seed = seed;
        match train_on_dataset(dataset, &cfg, key.model.slug()) {
            Ok(run) => scores.push(run.report.macro_f1),
            Err(e) => {
                error = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    let mean = (error.is_none() && !scores.is_empty())
        .then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    CellResult {
        row: rows[key.row].clone(),
        model: key.model,
        window: key.window,
        seeds: spec.seeds.clone(),
        macro_f1: scores,
        mean_macro_f1: mean,
        error,
    }
}

/// Trains and scores every requested cell. Cells are independent, so the
/// result does not depend on `workers`; a failing cell is recorded and the
/// run continues. All cells share one train/validation split.
pub fn run_ablation(dataset: &Dataset, spec: &AblationSpec) -> Result<AblationResult> {
    if spec.windows.is_empty() || spec.seeds.is_empty() {
        return Err(Error::contract(
            "ablation needs at least one window and one seed",
        ));
    }
    if spec.windows.iter().any(|&n| n > 6) {
        return Err(Error::contract("window sizes must lie in 0..=6"));
    }
    let modality_ok = spec
        .architectures
        .iter()
        .all(|m| m.is_text() == (spec.modality == Modality::Text));
    if !modality_ok {
        return Err(Error::contract(
            "architectures do not match the ablation modality",
        ));
    }
    spec.base.validate()?;
    let (rows, keys) = cell_keys(spec);
    if keys.is_empty() {
        return Err(Error::contract("the requested grid has no cells"));
    }
    let cells = if spec.workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        pool.install(|| {
            keys.par_iter()
                .map(|&k| run_cell(dataset, spec, &rows, k))
                .collect()
        })
    } else {
        keys.iter()
            .map(|&k| run_cell(dataset, spec, &rows, k))
            .collect()
    };
    let mut windows = spec.windows.clone();
    windows.sort_unstable();
    windows.dedup();
    Ok(AblationResult {
        modality: spec.modality,
        windows,
        rows,
        cells,
    })
}

pub fn column_label(n: usize) -> String {
    if n == 0 {
        "N=0 (No Ctx)".into()
    } else {
        format!("N={n}")
    }
}

impl AblationResult {
    pub fn cell(&self, row: &str, window: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.row == row && c.window == window)
    }

    /// Aligned text table: one row per architecture, one column per window,
    /// `-` for cells outside the grid and `failed` for failed cells.
    pub fn render(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Architecture".to_string()];
        header.extend(self.windows.iter().map(|&n| column_label(n)));
        grid.push(header);
        for row in &self.rows {
            let mut line = vec![row.clone()];
            for &n in &self.windows {
                line.push(match self.cell(row, n) {
                    None => "-".into(),
                    Some(c) => match c.mean_macro_f1 {
                        Some(v) => format!("{v:.4}"),
                        None => "failed".into(),
                    },
                });
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for line in &grid {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, &w))| {
                    if i == 0 {
                        format!("{v:<w$}")
                    } else {
                        format!("{v:>w$}")
                    }
                })
                .collect();
            writeln!(s, "{}", cells.join(" | ").trim_end()).unwrap();
        }
        s
    }

    /// One JSON object per cell.
    pub fn to_jsonl(&self) -> String {
        self.cells
            .iter()
            .map(|c| serde_json::to_string(c).expect("cell serializes") + "\n")
            .collect()
    }
}
