//! `simulate-agent`: the softmax agent plays paired rounds against the
//! unregularized and the ExpO model across a λ sweep.

use std::path::Path;

use expo_core::data::StandardizedDataset;
use expo_core::engine::MlpModel;
use expo_core::explain::Explainer;
use expo_core::metrics::Summary;
use expo_core::rng::SeedStream;
use expo_core::task::{new_round, run_agent, AgentConfig, Condition, TaskSettings};
use serde::{Deserialize, Serialize};

use crate::artifacts::{write_atomic, write_json, CheckpointFile};
use crate::config::AgentSweep;
use crate::error::{CliError, Result};
use crate::significance::{paired_t_test, TTest};
use crate::train::{load_split, RunManifest};

pub const AGENT_CSV: &str = "agent.csv";
pub const AGENT_TESTS_CSV: &str = "agent_tests.csv";
pub const AGENT_ROUNDS_CSV: &str = "agent_rounds.csv";
pub const AGENT_JSON: &str = "agent.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub lambda: f64,
    pub condition: Condition,
    pub steps: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTest {
    pub lambda: f64,
    /// Over rounds, unregularized minus ExpO steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_test: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub rows: Vec<AgentRow>,
    pub tests: Vec<AgentTest>,
    /// `steps[λ][round] = (none, expo)`.
    pub steps: Vec<Vec<(usize, usize)>>,
}

impl AgentReport {
    pub fn test_at(&self, lambda: f64) -> Option<&AgentTest> {
        self.tests.iter().find(|t| t.lambda == lambda)
    }

    pub fn mean_steps(&self, lambda: f64, condition: Condition) -> Option<f64> {
        self.rows.iter().find(|r| r.lambda == lambda && r.condition == condition).map(|r| r.steps.mean)
    }
}

/// Round `r` of the sweep shares its start point and target across all λ.
pub fn simulate(
    none: &MlpModel,
    expo: &MlpModel,
    dataset: &StandardizedDataset,
    explainer: &Explainer,
    task: &TaskSettings,
    sweep: &AgentSweep,
) -> Result<AgentReport> {
    if sweep.rounds == 0 || sweep.lambdas.is_empty() || sweep.max_steps == 0 {
        return Err(CliError::Config("agent sweep needs rounds, λ values and a step limit".into()));
    }
    let root = SeedStream::new(sweep.seed);
    let rounds = (0..sweep.rounds as u64)
        .map(|r| new_round(none, expo, dataset, explainer, task, root.derive(&[0, r]).value()))
        .collect::<expo_core::Result<Vec<_>>>()?;

    let mut report = AgentReport { rows: Vec::new(), tests: Vec::new(), steps: Vec::new() };
    for (li, &lambda) in sweep.lambdas.iter().enumerate() {
        let mut pairs = Vec::with_capacity(rounds.len());
        for (r, (a, b)) in rounds.iter().enumerate() {
            let cfg = AgentConfig { lambda, max_steps: sweep.max_steps, seed: root.derive(&[1, li as u64, r as u64]).value() };
            let (mut a, mut b) = (a.clone(), b.clone());
            pairs.push((run_agent(none, explainer, &mut a, &cfg)?, run_agent(expo, explainer, &mut b, &cfg)?));
        }
        let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        report.rows.push(AgentRow { lambda, condition: Condition::NoneModel, steps: Summary::of(&xs) });
        report.rows.push(AgentRow { lambda, condition: Condition::ExpoModel, steps: Summary::of(&ys) });
        report.tests.push(AgentTest { lambda, t_test: paired_t_test(&xs, &ys) });
        report.steps.push(pairs);
    }
    Ok(report)
}

fn condition_label(c: Condition) -> &'static str {
    match c {
        Condition::NoneModel => "none",
        Condition::ExpoModel => "expo",
    }
}

impl AgentReport {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("lambda,condition,mean_steps,std_error,n\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.lambda,
                condition_label(r.condition),
                r.steps.mean,
                r.steps.std_error,
                r.steps.n
            ));
        }
        out
    }

    pub fn tests_csv(&self) -> String {
        let mut out = String::from("lambda,n,mean_diff,t,p_value\n");
        for t in &self.tests {
            match &t.t_test {
                Some(tt) => out.push_str(&format!("{},{},{},{},{}\n", t.lambda, tt.n, tt.mean_diff, tt.t, tt.p_value)),
                None => out.push_str(&format!("{},,,,\n", t.lambda)),
            }
        }
        out
    }

    pub fn rounds_csv(&self, lambdas: &[f64]) -> String {
        let mut out = String::from("lambda,round,none_steps,expo_steps\n");
        for (lambda, pairs) in lambdas.iter().zip(&self.steps) {
            for (r, (a, b)) in pairs.iter().enumerate() {
                out.push_str(&format!("{lambda},{r},{a},{b}\n"));
            }
        }
        out
    }

    pub fn write(&self, dir: &Path, lambdas: &[f64]) -> Result<()> {
        write_atomic(&dir.join(AGENT_CSV), self.steps_csv().as_bytes())?;
        write_atomic(&dir.join(AGENT_TESTS_CSV), self.tests_csv().as_bytes())?;
        write_atomic(&dir.join(AGENT_ROUNDS_CSV), self.rounds_csv(lambdas).as_bytes())?;
        write_json(&dir.join(AGENT_JSON), self)
    }
}

/// The study pair of a run with the split it was trained on.
pub struct StudyModelsOnDisk {
    pub none: CheckpointFile,
    pub expo: CheckpointFile,
    pub dataset: StandardizedDataset,
}

/// Load two checkpoints and the split they share.
pub fn load_pair(none: &Path, expo: &Path, dataset_manifest: &Path) -> Result<StudyModelsOnDisk> {
    for p in [none, expo] {
        if !p.exists() {
            return Err(CliError::Missing(p.into()));
        }
    }
    let none = CheckpointFile::load(none)?;
    let expo = CheckpointFile::load(expo)?;
    if none.split_seed != expo.split_seed {
        return Err(CliError::Config(format!(
            "checkpoints were trained on different splits ({} and {})",
            none.split_seed, expo.split_seed
        )));
    }
    let manifest = expo_core::data::DatasetManifest::from_file(dataset_manifest)?;
    let dataset = load_split(&manifest, none.split_seed)?;
    Ok(StudyModelsOnDisk { none, expo, dataset })
}

/// Load the study pair named by a run manifest.
pub fn load_run_pair(run_dir: &Path) -> Result<(RunManifest, StudyModelsOnDisk)> {
    let run = RunManifest::load(run_dir)?;
    let study = run
        .study
        .as_ref()
        .ok_or_else(|| CliError::Config("the run trained no ExpO-F model".into()))?;
    let pair = load_pair(&run_dir.join(&study.none), &run_dir.join(&study.expo), &run.dataset)?;
    Ok((run, pair))
}

pub fn cmd_simulate_agent(run_dir: &Path, sweep: Option<AgentSweep>) -> Result<AgentReport> {
    let (run, pair) = load_run_pair(run_dir)?;
    let sweep = sweep.unwrap_or_else(|| run.agent.clone());
    let report = simulate(&pair.none.model, &pair.expo.model, &pair.dataset, &run.task_explainer(), &run.task, &sweep)?;
    report.write(run_dir, &sweep.lambdas)?;
    Ok(report)
}
