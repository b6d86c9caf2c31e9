//! Experiment configuration, read from JSON.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use expo_core::engine::TrainConfig;
use expo_core::explain::Explainer;
use expo_core::metrics::{EvalSettings, NamedExplainer};
use expo_core::neighborhood::{NeighborhoodSpec, Role};
use expo_core::regularize::{RegularizerKind, RELATIVE_WEIGHT_GRID};
use expo_core::task::TaskSettings;
use serde::{Deserialize, Serialize};

use crate::artifacts::read_json;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureGrid {
    pub widths: Vec<usize>,
    /// Hidden layer counts.
    pub depths: Vec<usize>,
}

impl Default for ArchitectureGrid {
    fn default() -> Self {
        ArchitectureGrid { widths: vec![32, 64, 128], depths: vec![1, 2] }
    }
}

impl ArchitectureGrid {
    /// `(width, depth)` pairs, widths varying fastest.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.depths.iter().flat_map(|&d| self.widths.iter().map(move |&w| (w, d))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerGrid {
    pub kind: RegularizerKind,
    #[serde(default = "default_weights")]
    pub weights: Vec<f64>,
}

fn default_weights() -> Vec<f64> {
    RELATIVE_WEIGHT_GRID.to_vec()
}

fn default_regularizers() -> Vec<RegularizerGrid> {
    [RegularizerKind::ExpoFidelity, RegularizerKind::L1, RegularizerKind::L2]
        .map(|kind| RegularizerGrid { kind, weights: default_weights() })
        .to_vec()
}

/// Training hyper-parameters shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub leaky_slope: f64,
    pub neighborhood: NeighborhoodSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSettings {
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            leaky_slope: expo_core::engine::DEFAULT_LEAKY_SLOPE,
            neighborhood: NeighborhoodSpec::resolve_defaults(Role::Regularization),
            m: None,
        }
    }
}

impl TrainSettings {
    pub fn config_for(&self, kind: RegularizerKind, relative_weight: Option<f64>, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            regularizer: kind,
            relative_weight: relative_weight.unwrap_or(TrainConfig::default().relative_weight),
            neighborhood: self.neighborhood,
            m: self.m,
            seed,
            absolute_gamma: None,
            sparse_top_k: None,
        }
    }
}

/// The agent sweep run by `simulate-agent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSweep {
    pub lambdas: Vec<f64>,
    pub rounds: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for AgentSweep {
    fn default() -> Self {
        AgentSweep { lambdas: vec![0.0, 3.0, 10.0, 30.0, 100.0], rounds: 200, max_steps: 100, seed: 0 }
    }
}

fn default_explainers() -> Vec<NamedExplainer> {
    vec![NamedExplainer { name: "lime".into(), explainer: Explainer::default() }]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_study_tolerance() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Dataset manifest. Relative paths resolve against the config file.
    pub dataset: PathBuf,
    #[serde(default)]
    pub architectures: ArchitectureGrid,
    /// Regularizers to compare with the unregularized model, which is always
    /// trained.
    #[serde(default = "default_regularizers")]
    pub regularizers: Vec<RegularizerGrid>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    /// The first explainer also drives the task and the agent.
    #[serde(default = "default_explainers")]
    pub explainers: Vec<NamedExplainer>,
    /// Trial seeds. Trial `s` uses split seed `manifest.seed + s`; model
    /// selection runs on the first.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// The task model is the largest ExpO-F weight whose validation loss is
    /// within this fraction of the unregularized model's.
    #[serde(default = "default_study_tolerance")]
    pub study_tolerance: f64,
    #[serde(default)]
    pub task: TaskSettings,
    #[serde(default)]
    pub agent: AgentSweep,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let a = &self.architectures;
        if a.widths.is_empty() || a.depths.is_empty() {
            return bad("architecture grid is empty".into());
        }
        if a.widths.contains(&0) || a.depths.contains(&0) {
            return bad("widths and depths must be positive".into());
        }
        let mut kinds = HashSet::new();
        for r in &self.regularizers {
            if r.kind == RegularizerKind::None {
                return bad("the unregularized model is always trained; drop it from the regularizer grid".into());
            }
            if !kinds.insert(r.kind) {
                return bad(format!("{} listed twice", r.kind));
            }
            if r.weights.is_empty() {
                return bad(format!("{} has no weights", r.kind));
            }
            if let Some(w) = r.weights.iter().find(|w| !(**w > 0.0 && **w <= 1.0)) {
                return bad(format!("{} weight {w} is outside (0, 1]", r.kind));
            }
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("duplicate seeds".into());
        }
        if self.explainers.is_empty() {
            return bad("no explainers".into());
        }
        if self.study_tolerance.is_nan() || self.study_tolerance < 0.0 {
            return bad("study_tolerance must be non-negative".into());
        }
        if self.train.epochs > 0 && (self.train.batch_size == 0 || self.train.learning_rate.is_nan() || self.train.learning_rate <= 0.0) {
            return bad("batch size and learning rate must be positive".into());
        }
        self.task.validate()?;
        Ok(())
    }
}
