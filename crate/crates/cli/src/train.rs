//! `train`: staged grid search and multi-seed retraining.
//!
//! 1. Every architecture is trained unregularized on every seed; the lowest
//!    mean validation loss wins.
//! 2. At that architecture each regularizer is trained at every grid weight on
//!    every seed; the lowest mean validation loss picks its weight.
//! 3. The unregularized model and each regularizer at its chosen weight are
//!    collected per seed.
//!
//! Cells are keyed by (kind, weight, architecture, seed), so the final models
//! reuse the search cells instead of retraining.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use expo_core::data::{DatasetManifest, StandardizedDataset, TaskKind};
use expo_core::engine::{predictive_loss, train, MlpModel, OutputKind};
use expo_core::explain::Explainer;
use expo_core::metrics::{EvalSettings, NamedExplainer};
use expo_core::regularize::RegularizerKind;
use expo_core::task::TaskSettings;
use serde::{Deserialize, Serialize};

use crate::artifacts::{checkpoint_path, ensure_writable_dir, history_path, write_atomic, write_json, Cell, CheckpointFile};
use crate::config::{AgentSweep, ExperimentConfig};
use crate::error::{CliError, Result};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// The grid point, at the first trial seed.
    pub cell: Cell,
    /// First-seed checkpoint, relative to the run directory.
    pub checkpoint: String,
    /// Mean over trial seeds; `None` when any seed diverged.
    pub val_loss: Option<f64>,
    /// Per-seed validation losses, in seed order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed_val_losses: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSearch {
    pub kind: RegularizerKind,
    pub candidates: Vec<CellResult>,
    pub selected_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalModels {
    pub kind: RegularizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_weight: Option<f64>,
    /// One per seed, in seed order.
    pub checkpoints: Vec<String>,
}

/// The two models behind the interactive task and the agent simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyPair {
    pub none: String,
    pub expo: String,
    pub relative_weight: f64,
}

/// Everything `evaluate`, `simulate-agent` and `serve` need from a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset: PathBuf,
    pub seeds: Vec<u64>,
    pub width: usize,
    pub depth: usize,
    pub architecture_search: Vec<CellResult>,
    pub weight_search: Vec<WeightSearch>,
    /// Unregularized first.
    pub models: Vec<FinalModels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyPair>,
    pub eval: EvalSettings,
    pub explainers: Vec<NamedExplainer>,
    pub task: TaskSettings,
    pub agent: AgentSweep,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        crate::artifacts::read_json(&run_dir.join(RUN_MANIFEST))
    }

    /// The explainer behind the task.
    pub fn task_explainer(&self) -> Explainer {
        self.explainers[0].explainer
    }
}

/// Split seed of trial `seed`.
pub fn split_seed(manifest: &DatasetManifest, seed: u64) -> u64 {
    manifest.seed.wrapping_add(seed)
}

/// Load `manifest` with the split of trial `split_seed`.
pub fn load_split(manifest: &DatasetManifest, split_seed: u64) -> Result<StandardizedDataset> {
    let mut m = manifest.clone();
    m.seed = split_seed;
    Ok(m.load()?)
}

fn relative(path: &Path, run_dir: &Path) -> String {
    path.strip_prefix(run_dir).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

struct Trainer<'a> {
    config: &'a ExperimentConfig,
    manifest: DatasetManifest,
    datasets: HashMap<u64, StandardizedDataset>,
    done: HashMap<String, Option<f64>>,
}

impl Trainer<'_> {
    fn dataset(&mut self, split: u64) -> Result<&StandardizedDataset> {
        if !self.datasets.contains_key(&split) {
            let ds = load_split(&self.manifest, split)?;
            self.datasets.insert(split, ds);
        }
        Ok(&self.datasets[&split])
    }

    /// Train `cell` unless this run already has. Divergence is fatal unless
    /// `searching`, where it just removes the cell from contention.
    fn run(&mut self, cell: Cell, searching: bool) -> Result<CellResult> {
        let dir = &self.config.output_dir;
        let path = checkpoint_path(dir, &cell);
        let result = |val_loss| CellResult { cell, checkpoint: relative(&path, dir), val_loss, seed_val_losses: Vec::new() };
        if let Some(&v) = self.done.get(&cell.name()) {
            return Ok(result(v));
        }
        let split = split_seed(&self.manifest, cell.seed);
        let settings = &self.config.train;
        let train_cfg = settings.config_for(cell.kind, cell.relative_weight, cell.seed);
        let ds = self.dataset(split)?;
        let (kind, outputs) = match ds.task_kind {
            TaskKind::Regression => (OutputKind::Linear, 1),
            TaskKind::BinaryClassification => (OutputKind::Logits, 2),
        };
        let model = MlpModel::init(&cell.layer_widths(ds.d(), outputs), settings.leaky_slope, kind, cell.seed)?;
        let started = std::time::Instant::now();
        let outcome = match train(model, ds, &train_cfg) {
            Ok(o) => o,
            Err(e @ expo_core::Error::Diverged { .. }) if searching => {
                log::warn!("{}: {e}; excluded from selection", cell.name());
                self.done.insert(cell.name(), None);
                return Ok(result(None));
            }
            Err(e) => return Err(e.into()),
        };
        let val_loss = match outcome.history.last() {
            Some(r) => r.val_predictive,
            None => predictive_loss(&outcome.model, &ds.rows(&ds.splits.val), &ds.targets_at(&ds.splits.val))?,
        };
        log::info!("{}: val loss {val_loss:.5} in {:.1}s", cell.name(), started.elapsed().as_secs_f64());
        write_atomic(&history_path(dir, &cell), outcome.history_jsonl().as_bytes())?;
        let file = CheckpointFile {
            cell,
            split_seed: split,
            train: train_cfg,
            calibration: outcome.calibration,
            val_loss,
            model: outcome.model,
        };
        write_json(&path, &file)?;
        self.done.insert(cell.name(), Some(val_loss));
        Ok(result(Some(val_loss)))
    }

    /// Train one grid point on every trial seed and average the validation
    /// losses, so selection is not decided by a single split.
    fn search(&mut self, cell: Cell) -> Result<CellResult> {
        let mut first: Option<CellResult> = None;
        let mut losses = Vec::new();
        for &seed in &self.config.seeds {
            let r = self.run(Cell { seed, ..cell }, true)?;
            losses.push(r.val_loss);
            first.get_or_insert(r);
        }
        let mut out = first.expect("seeds are non-empty");
        out.val_loss = losses.iter().copied().sum::<Option<f64>>().map(|s| s / losses.len() as f64);
        out.seed_val_losses = losses;
        Ok(out)
    }
}

/// Index of the lowest validation loss; the first wins ties.
pub fn argmin_val_loss(results: &[CellResult]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in results.iter().enumerate() {
        if let Some(v) = r.val_loss {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Largest ExpO-F weight within `tolerance` of the unregularized validation
/// loss, falling back to `selected` when none qualifies.
pub fn study_weight(candidates: &[CellResult], none_val_loss: f64, tolerance: f64, selected: f64) -> f64 {
    let budget = none_val_loss * (1.0 + tolerance);
    candidates
        .iter()
        .filter(|c| c.val_loss.is_some_and(|v| v <= budget))
        .filter_map(|c| c.cell.relative_weight)
        .fold(None, |best: Option<f64>, w| Some(best.map_or(w, |b| b.max(w))))
        .unwrap_or(selected)
}

pub fn cmd_train(config_path: &Path) -> Result<RunManifest> {
    let config = ExperimentConfig::from_file(config_path)?;
    run_experiment(&config)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let dir = &config.output_dir;
    ensure_writable_dir(dir)?;
    let manifest = DatasetManifest::from_file(&config.dataset)?;
    let mut trainer = Trainer { config, manifest, datasets: HashMap::new(), done: HashMap::new() };
    let first = config.seeds[0];

    let mut architecture_search = Vec::new();
    for (width, depth) in config.architectures.cells() {
        let cell = Cell { kind: RegularizerKind::None, relative_weight: None, width, depth, seed: first };
        architecture_search.push(trainer.search(cell)?);
    }
    let best = argmin_val_loss(&architecture_search)
        .ok_or_else(|| CliError::Config("every architecture diverged".into()))?;
    let Cell { width, depth, .. } = architecture_search[best].cell;
    let none_val = architecture_search[best].val_loss.expect("argmin has a loss");

    let mut weight_search = Vec::new();
    for grid in &config.regularizers {
        let mut candidates = Vec::new();
        for &w in &grid.weights {
            let cell = Cell { kind: grid.kind, relative_weight: Some(w), width, depth, seed: first };
            candidates.push(trainer.search(cell)?);
        }
        let i = argmin_val_loss(&candidates)
            .ok_or_else(|| CliError::Config(format!("every {} weight diverged", grid.kind)))?;
        let selected_weight = candidates[i].cell.relative_weight.expect("regularized cell");
        weight_search.push(WeightSearch { kind: grid.kind, candidates, selected_weight });
    }

    let mut models = Vec::new();
    let finals = std::iter::once((RegularizerKind::None, None))
        .chain(weight_search.iter().map(|s| (s.kind, Some(s.selected_weight))));
    for (kind, relative_weight) in finals {
        let mut checkpoints = Vec::new();
        for &seed in &config.seeds {
            let cell = Cell { kind, relative_weight, width, depth, seed };
            checkpoints.push(trainer.run(cell, false)?.checkpoint);
        }
        models.push(FinalModels { kind, relative_weight, checkpoints });
    }

    let study = weight_search.iter().find(|s| s.kind == RegularizerKind::ExpoFidelity).map(|s| {
        let w = study_weight(&s.candidates, none_val, config.study_tolerance, s.selected_weight);
        let expo = s.candidates.iter().find(|c| c.cell.relative_weight == Some(w)).expect("weight from the grid");
        StudyPair { none: models[0].checkpoints[0].clone(), expo: expo.checkpoint.clone(), relative_weight: w }
    });

    let run = RunManifest {
        dataset: config.dataset.clone(),
        seeds: config.seeds.clone(),
        width,
        depth,
        architecture_search,
        weight_search,
        models,
        study,
        eval: config.eval.clone(),
        explainers: config.explainers.clone(),
        task: config.task,
        agent: config.agent.clone(),
    };
    write_json(&dir.join(RUN_MANIFEST), &run)?;
    Ok(run)
}
