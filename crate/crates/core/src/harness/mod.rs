//! Experiments over method presets: pretrain, checkpoint and probe per seed,
//! then aggregate rows into ablation tables.

mod config;
mod preset;
pub mod selftest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::StrategyName;
use crate::data::{load, Image, ImageDataset};
use crate::error::{Error, Result};
use crate::eval::{collapse_metrics, extract_embeddings, linear_probe, summarize, CollapseMetrics};
use crate::method::Method;
use crate::nn::checkpoint;
use crate::pretrain::{pretrain, write_loss_log};

pub use config::{apply_override, DataConfig, ExperimentConfig, ECHO_PREFIX};
pub use preset::{DeskScale, MethodPreset, RunShape, DESK_EPSILON, REFERENCE_BATCH};

/// Columns of every results CSV, one line per trial.
pub const RESULTS_COLUMNS: &str = "preset,augmentation,predictor,momentum,seed,top1,collapsed,diverged";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    /// Absent when the trial diverged.
    pub top1: Option<f64>,
    pub collapse: Option<CollapseMetrics>,
    pub collapsed: bool,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub preset: Method,
    pub augmentation: StrategyName,
    pub predictor: bool,
    pub momentum: bool,
    pub trials: Vec<TrialResult>,
    /// Over non-diverged trials; absent when every trial diverged.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub diverged: usize,
}

impl ResultsRow {
    pub fn any_collapsed(&self) -> bool {
        self.trials.iter().any(|t| t.collapsed)
    }

    pub fn all_diverged(&self) -> bool {
        self.diverged == self.trials.len()
    }

    pub fn csv_lines(&self) -> String {
        self.trials
            .iter()
            .map(|t| {
                let top1 = t.top1.map_or(String::new(), |v| v.to_string());
                format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.preset, self.augmentation, self.predictor, self.momentum, t.seed, top1, t.collapsed, t.diverged
                )
            })
            .collect()
    }

    /// `mean ± std` in percent, with collapse and divergence marks.
    pub fn cell_text(&self) -> String {
        let mut s = match (self.mean, self.std) {
            (Some(m), Some(sd)) => format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd),
            (Some(m), None) => format!("{:.1}", 100.0 * m),
            (None, _) => "diverged".to_string(),
        };
        if self.any_collapsed() {
            s.push_str(" (collapsed)");
        }
        if self.diverged > 0 && !self.all_diverged() {
            let _ = write!(s, " ({} diverged)", self.diverged);
        }
        s
    }
}

/// The three datasets of an experiment, loaded once and shared by all seeds.
pub struct Datasets {
    pub pretrain: ImageDataset,
    pub probe_train: ImageDataset,
    pub probe_test: ImageDataset,
}

impl Datasets {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let pretrain = load(&cfg.pretrain)?.without_labels();
        let (probe_train, probe_test) = (load(&cfg.probe_train)?, load(&cfg.probe_test)?);
        if probe_train.labels().is_none() || probe_test.labels().is_none() {
            return Err(Error::config("probe datasets must carry labels"));
        }
        Ok(Datasets { pretrain, probe_train, probe_test })
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn run_trial(cfg: &ExperimentConfig, data: &Datasets, seed: u64) -> Result<TrialResult> {
    let train_cfg = cfg.train_config(seed)?;
    let outcome = match pretrain(&train_cfg, &data.pretrain) {
        Ok(o) => o,
        Err(e) if e.is_divergence() => {
            return Ok(TrialResult { seed, top1: None, collapse: None, collapsed: false, diverged: true })
        }
        Err(e) => return Err(e),
    };
    let dir = seed_dir(&cfg.out, seed);
    std::fs::create_dir_all(&dir)?;
    write_loss_log(&dir.join("loss.csv"), &outcome.log)?;
    let ckpt = dir.join("checkpoint.bin");
    checkpoint::save(&outcome.state.left, &ckpt)?;
    let weights = checkpoint::load_matching(&ckpt, &outcome.state.left)?;

    let tower = &outcome.model.tower;
    let top1 = linear_probe(tower, &weights, &data.probe_train, &data.probe_test, &cfg.probe, seed)?;
    let sample: Vec<Image> =
        (0..cfg.collapse_sample.min(data.probe_test.len())).map(|i| data.probe_test.image(i)).collect();
    let metrics = collapse_metrics(&extract_embeddings(tower, &weights, &sample)?)?;
    Ok(TrialResult {
        seed,
        top1: Some(top1),
        collapse: Some(metrics),
        collapsed: metrics.mean_std < cfg.collapse_threshold,
        diverged: false,
    })
}

/// Run every seed of `cfg` on already-loaded datasets and aggregate one row.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Datasets) -> Result<ResultsRow> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut trials = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        trials.push(run_trial(cfg, data, seed).map_err(|e| Error::Trial { seed, source: Box::new(e) })?);
    }
    let accs: Vec<f64> = trials.iter().filter_map(|t| t.top1).collect();
    let summary = (!accs.is_empty()).then(|| summarize(&accs)).transpose()?;
    let row = ResultsRow {
        preset: cfg.preset,
        augmentation: cfg.strategy(),
        predictor: cfg.predictor_enabled(),
        momentum: cfg.momentum_enabled(),
        diverged: trials.iter().filter(|t| t.diverged).count(),
        mean: summary.as_ref().map(|s| s.mean),
        std: summary.and_then(|s| s.std),
        trials,
    };
    write_results(cfg, &row)?;
    Ok(row)
}

/// Pretrain, checkpoint and probe every seed; diverged trials are counted and excluded from the mean.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsRow> {
    cfg.validate()?;
    let data = Datasets::load(&cfg.data)?;
    run_experiment_on(cfg, &data)
}

/// `results.csv` (config echo, then one line per trial), `results.json`, `resolved_config.toml`.
fn write_results(cfg: &ExperimentConfig, row: &ResultsRow) -> Result<()> {
    let echo = cfg.echo()?;
    write_atomic(&cfg.out.join("resolved_config.toml"), cfg.to_toml()?.as_bytes())?;
    let csv = format!("{echo}{RESULTS_COLUMNS}\n{}", row.csv_lines());
    write_atomic(&cfg.out.join("results.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(row).map_err(|e| Error::config(format!("cannot serialize results: {e}")))?;
    write_atomic(&cfg.out.join("results.json"), json.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    /// One row per augmentation strategy.
    Augmentations,
    /// One row per (predictor, momentum) combination.
    Algorithms,
}

impl std::str::FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augmentations" => Ok(GridKind::Augmentations),
            "algorithms" => Ok(GridKind::Algorithms),
            _ => Err(Error::config(format!("unknown grid kind `{s}`"))),
        }
    }
}

/// A row setting of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridRow {
    Strategy(StrategyName),
    Flags { predictor: bool, momentum: bool },
}

impl GridRow {
    pub fn rows(kind: GridKind) -> Vec<GridRow> {
        match kind {
            GridKind::Augmentations => StrategyName::ALL.into_iter().map(GridRow::Strategy).collect(),
            GridKind::Algorithms => [(false, false), (false, true), (true, false), (true, true)]
                .into_iter()
                .map(|(predictor, momentum)| GridRow::Flags { predictor, momentum })
                .collect(),
        }
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        match self {
            GridRow::Strategy(s) => s.to_string(),
            GridRow::Flags { predictor, momentum } => format!("predictor={} momentum={}", mark(*predictor), mark(*momentum)),
        }
    }

    fn slug(&self) -> String {
        match self {
            GridRow::Strategy(s) => s.to_string(),
            GridRow::Flags { predictor, momentum } => format!("pred{}-mom{}", u8::from(*predictor), u8::from(*momentum)),
        }
    }

    /// The cell config: `base` with this row's setting and the preset applied.
    pub fn apply(&self, base: &ExperimentConfig, preset: Method, grid_out: &Path) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.preset = preset;
        match *self {
            GridRow::Strategy(s) => cfg.augmentation = Some(s),
            GridRow::Flags { predictor, momentum } => {
                cfg.predictor = Some(predictor);
                cfg.momentum = Some(momentum);
            }
        }
        cfg.out = grid_out.join(preset.name()).join(self.slug());
        cfg
    }
}

/// Outcome of one cell; failures are kept as messages so the grid can continue.
pub type CellOutcome = std::result::Result<ResultsRow, String>;

pub struct GridResult {
    pub kind: GridKind,
    pub presets: Vec<Method>,
    pub rows: Vec<GridRow>,
    /// `cells[row][preset]`.
    pub cells: Vec<Vec<CellOutcome>>,
}

impl GridResult {
    /// Rows × presets table of `mean ± std` cells, first column the row label.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("setting");
        for p in &self.presets {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
        for (row, cells) in self.rows.iter().zip(&self.cells) {
            s.push_str(&row.label());
            for c in cells {
                let text = match c {
                    Ok(r) => r.cell_text(),
                    Err(e) => format!("error: {e}"),
                };
                let _ = write!(s, ",\"{}\"", text.replace('"', "'"));
            }
            s.push('\n');
        }
        s
    }

    pub fn table_markdown(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("setting".to_string())
            .chain(self.presets.iter().map(|p| p.to_string()))
            .collect()];
        for (row, cells) in self.rows.iter().zip(&self.cells) {
            let mut line = vec![row.label()];
            line.extend(cells.iter().map(|c| match c {
                Ok(r) => r.cell_text(),
                Err(e) => format!("error: {e}"),
            }));
            grid.push(line);
        }
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|j| grid.iter().map(|l| l[j].chars().count()).max().unwrap_or(0)).collect();
        let fmt_line = |cells: &[String]| {
            let padded: Vec<String> =
                cells.iter().zip(&widths).map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut s = fmt_line(&grid[0]);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        s.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        for line in &grid[1..] {
            s.push_str(&fmt_line(line));
        }
        s
    }

    /// Every trial of every successful cell, in the results-CSV columns.
    pub fn long_csv(&self) -> String {
        let mut s = format!("{RESULTS_COLUMNS}\n");
        for cells in &self.cells {
            for row in cells.iter().flatten() {
                s.push_str(&row.csv_lines());
            }
        }
        s
    }

    pub fn failures(&self) -> impl Iterator<Item = &String> {
        self.cells.iter().flatten().filter_map(|c| c.as_ref().err())
    }
}

/// Cartesian product of grid rows and presets, each cell a full experiment.
/// Datasets load once; `base.out` receives `table.csv`, `table.md` and `grid.csv`.
pub fn run_grid(base: &ExperimentConfig, kind: GridKind, presets: &[Method]) -> Result<GridResult> {
    if presets.is_empty() {
        return Err(Error::config("grid needs at least one preset"));
    }
    base.validate()?;
    let data = Datasets::load(&base.data)?;
    let rows = GridRow::rows(kind);
    let cells = rows
        .iter()
        .map(|row| {
            presets
                .iter()
                .map(|&p| run_experiment_on(&row.apply(base, p, &base.out), &data).map_err(|e| e.to_string()))
                .collect()
        })
        .collect();
    let grid = GridResult { kind, presets: presets.to_vec(), rows, cells };
    std::fs::create_dir_all(&base.out)?;
    write_atomic(&base.out.join("table.csv"), grid.table_csv().as_bytes())?;
    write_atomic(&base.out.join("table.md"), grid.table_markdown().as_bytes())?;
    write_atomic(&base.out.join("grid.csv"), grid.long_csv().as_bytes())?;
    Ok(grid)
}
