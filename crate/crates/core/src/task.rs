//! The "move the prediction into the target range" task.
//!
//! Each button press changes one feature by a fixed step. The sign of the
//! step is taken from the hidden sign of the current explanation's coefficient,
//! so "plus" is always expected to raise the prediction by the displayed
//! magnitude `δ·|βₖ|`. All quantities are in standardized units.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::StandardizedDataset;
use crate::engine::{Differentiable, MlpModel, Predictor};
use crate::error::{ensure, Result};
use crate::explain::{Explainer, LinearExplanation};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoneModel,
    ExpoModel,
}

impl Condition {
    fn stream_label(self) -> u64 {
        match self {
            Condition::NoneModel => 0,
            Condition::ExpoModel => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Plus,
    Minus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Active,
    Solved,
    Abandoned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub feature: usize,
    pub direction: Direction,
    pub prediction_before: f64,
    pub prediction_after: f64,
}

/// Step size and target placement. `delta_target` and `half_width` are in
/// target standard deviations, `step_size` in feature standard deviations.
/// Defaults put the median agent round on housing at 5 to 15 presses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSettings {
    pub step_size: f64,
    pub delta_target: f64,
    pub half_width: f64,
    pub max_redraws: usize,
}

impl Default for TaskSettings {
    fn default() -> Self {
        TaskSettings {
            step_size: 1.0,
            delta_target: 2.0,
            half_width: 0.05,
            max_redraws: 100,
        }
    }
}

impl TaskSettings {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.step_size > 0.0, Config, "step size must be positive");
        ensure!(self.half_width > 0.0, Config, "target half-width must be positive");
        ensure!(self.max_redraws >= 1, Config, "max_redraws must be at least 1");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRound {
    pub condition: Condition,
    pub current_x: Vec<f64>,
    pub current_prediction: f64,
    pub target_low: f64,
    pub target_high: f64,
    pub step_size: f64,
    pub step_count: usize,
    pub history: Vec<StepRecord>,
    pub status: RoundStatus,
    /// The explanation currently shown; its coefficient signs stay server-side.
    pub explanation: LinearExplanation,
    /// Seed from which explanation substreams are derived.
    pub seed: u64,
}

impl TaskRound {
    /// Start a round at `x` for `model`.
    pub fn start(
        condition: Condition,
        model: &MlpModel,
        explainer: &Explainer,
        x: Vec<f64>,
        settings: &TaskSettings,
        seed: u64,
    ) -> Result<TaskRound> {
        settings.validate()?;
        let prediction = model.predict_one(&x, 0);
        let center = prediction + settings.delta_target;
        let explanation = explainer.explain(model, &x, 0, SeedStream::new(seed).child(0))?;
        Ok(TaskRound {
            condition,
            current_x: x,
            current_prediction: prediction,
            target_low: center - settings.half_width,
            target_high: center + settings.half_width,
            step_size: settings.step_size,
            step_count: 0,
            history: Vec::new(),
            status: RoundStatus::Active,
            explanation,
            seed,
        })
    }

    pub fn target_midpoint(&self) -> f64 {
        0.5 * (self.target_low + self.target_high)
    }

    pub fn in_range(&self, y: f64) -> bool {
        (self.target_low..=self.target_high).contains(&y)
    }

    pub fn is_active(&self) -> bool {
        self.status == RoundStatus::Active
    }

    /// Magnitudes shown next to each feature: `δ·|βᵢ|`.
    pub fn displayed_magnitudes(&self) -> Vec<f64> {
        self.explanation
            .coefficients
            .iter()
            .map(|b| self.step_size * b.abs())
            .collect()
    }

    pub fn abandon(&mut self) -> Result<()> {
        ensure!(self.is_active(), Contract, "only an active round can be abandoned");
        self.status = RoundStatus::Abandoned;
        Ok(())
    }
}

/// `sign` with `sign(0) = +1`.
pub fn hidden_sign(beta: f64) -> f64 {
    if beta < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Draw a shared initial test point and start one round per condition. A
/// point whose prediction already sits in either target range is redrawn.
pub fn new_round(
    none_model: &MlpModel,
    expo_model: &MlpModel,
    dataset: &StandardizedDataset,
    explainer: &Explainer,
    settings: &TaskSettings,
    round_seed: u64,
) -> Result<(TaskRound, TaskRound)> {
    settings.validate()?;
    let test = &dataset.splits.test;
    ensure!(!test.is_empty(), Contract, "no test points to start a round from");
    let stream = SeedStream::new(round_seed);
    let mut rng = stream.child(0x70).rng();
    for _ in 0..settings.max_redraws {
        let idx = *test.choose(&mut rng).expect("non-empty");
        let x = dataset.features.row(idx).to_vec();
        let a = TaskRound::start(
            Condition::NoneModel,
            none_model,
            explainer,
            x.clone(),
            settings,
            stream.child(Condition::NoneModel.stream_label()).value(),
        )?;
        let b = TaskRound::start(
            Condition::ExpoModel,
            expo_model,
            explainer,
            x,
            settings,
            stream.child(Condition::ExpoModel.stream_label()).value(),
        )?;
        if !a.in_range(a.current_prediction) && !b.in_range(b.current_prediction) {
            return Ok((a, b));
        }
    }
    Err(crate::error::Error::Contract(format!(
        "no valid starting point after {} draws",
        settings.max_redraws
    )))
}

/// Press `direction` on `feature`: move it by `±δ·sign(βₖ)`, re-predict and
/// re-explain. Returns the new explanation (also stored in the round).
pub fn apply_step(
    round: &mut TaskRound,
    model: &impl Differentiable,
    explainer: &Explainer,
    feature: usize,
    direction: Direction,
) -> Result<LinearExplanation> {
    ensure!(
        round.is_active(),
        Contract,
        "round is {:?}; steps are only allowed on active rounds",
        round.status
    );
    ensure!(
        feature < round.current_x.len(),
        Contract,
        "feature {} out of range for {} features",
        feature,
        round.current_x.len()
    );
    let s = hidden_sign(round.explanation.coefficients[feature]);
    let delta = match direction {
        Direction::Plus => round.step_size * s,
        Direction::Minus => -round.step_size * s,
    };
    let before = round.current_prediction;
    round.current_x[feature] += delta;
    round.current_prediction = model.predict_one(&round.current_x, 0);
    round.step_count += 1;
    round.history.push(StepRecord {
        feature,
        direction,
        prediction_before: before,
        prediction_after: round.current_prediction,
    });
    let stream = SeedStream::new(round.seed).child(round.step_count as u64);
    round.explanation = explainer.explain(model, &round.current_x, 0, stream)?;
    if round.in_range(round.current_prediction) {
        round.status = RoundStatus::Solved;
    }
    Ok(round.explanation.clone())
}

/// `softmax(−λ·| |cᵢ| − |y − t| |)` over features.
pub fn agent_policy(effects: &[f64], y: f64, t: f64, lambda: f64) -> Vec<f64> {
    let gap = (y - t).abs();
    let scores: Vec<f64> = effects
        .iter()
        .map(|c| -lambda * (c.abs() - gap).abs())
        .collect();
    softmax(&scores)
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub lambda: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            lambda: 10.0,
            max_steps: 100,
            seed: 0,
        }
    }
}

/// Play `round` with the softmax agent until it is solved or `max_steps`
/// presses have been made. Returns the number of presses.
pub fn run_agent(
    model: &impl Differentiable,
    explainer: &Explainer,
    round: &mut TaskRound,
    config: &AgentConfig,
) -> Result<usize> {
    ensure!(config.max_steps >= 1, Config, "max_steps must be at least 1");
    ensure!(config.lambda >= 0.0, Config, "lambda must be non-negative");
    ensure!(round.is_active(), Contract, "agent needs an active round");
    let mut rng = SeedStream::new(config.seed).rng();
    let start = round.step_count;
    while round.is_active() && round.step_count - start < config.max_steps {
        let t = round.target_midpoint();
        let y = round.current_prediction;
        let probs = agent_policy(&round.displayed_magnitudes(), y, t, config.lambda);
        let feature = WeightedIndex::new(&probs)
            .map_err(|e| crate::error::Error::Numerical(format!("agent policy: {e}")))?
            .sample(&mut rng);
        let direction = if t > y { Direction::Plus } else { Direction::Minus };
        apply_step(round, model, explainer, feature, direction)?;
    }
    Ok(round.step_count - start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::ExplainerConfig;

    fn exact() -> Explainer {
        Explainer::LocalLinear(ExplainerConfig {
            m: 20,
            ridge: 0.0,
            ..ExplainerConfig::default()
        })
    }

    fn round_for(model: &MlpModel, x: Vec<f64>) -> TaskRound {
        TaskRound::start(Condition::NoneModel, model, &exact(), x, &TaskSettings::default(), 3).unwrap()
    }

    #[test]
    fn plus_raises_prediction_by_displayed_amount() {
        let model = MlpModel::affine(&[0.3, -0.4], 0.0);
        let mut r = round_for(&model, vec![0.0, 0.0]);
        assert_eq!(r.step_count, 0);
        assert_eq!(r.status, RoundStatus::Active);
        let before = r.current_prediction;
        apply_step(&mut r, &model, &exact(), 0, Direction::Plus).unwrap();
        assert!((r.current_prediction - before - 0.3).abs() < 1e-8);
        let before = r.current_prediction;
        apply_step(&mut r, &model, &exact(), 1, Direction::Plus).unwrap();
        assert!((r.current_prediction - before - 0.4).abs() < 1e-8);
        assert_eq!(r.step_count, r.history.len());
        assert_eq!(r.current_x, vec![1.0, -1.0]);
    }

    #[test]
    fn solved_round_rejects_steps() {
        let model = MlpModel::affine(&[2.0], 0.0);
        let mut r = round_for(&model, vec![0.0]);
        apply_step(&mut r, &model, &exact(), 0, Direction::Plus).unwrap();
        assert_eq!(r.status, RoundStatus::Solved);
        assert!(apply_step(&mut r, &model, &exact(), 0, Direction::Plus).is_err());
        assert!(r.abandon().is_err());
    }

    #[test]
    fn zero_coefficient_counts_as_positive() {
        assert_eq!(hidden_sign(0.0), 1.0);
        assert_eq!(hidden_sign(-0.0), 1.0);
        assert_eq!(hidden_sign(-2.0), -1.0);
    }

    #[test]
    fn policy_limits() {
        let p = agent_policy(&[0.1, 0.5, 0.9, 2.0], 0.0, 1.0, 0.0);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = agent_policy(&[0.1, 0.5, 0.9, 2.0], 0.0, 1.0, 1e6);
        assert!(p[2] > 0.999);
    }

    #[test]
    fn agent_solves_adjacent_round_in_one_step() {
        let model = MlpModel::affine(&[2.0], 0.0);
        let mut r = round_for(&model, vec![0.0]);
        let cfg = AgentConfig {
            lambda: 1.0,
            max_steps: 1,
            seed: 0,
        };
        assert_eq!(run_agent(&model, &exact(), &mut r, &cfg).unwrap(), 1);
        assert_eq!(r.status, RoundStatus::Solved);
    }

    #[test]
    fn agent_stops_at_max_steps() {
        // the step overshoots the target range every time
        let model = MlpModel::affine(&[3.0], 0.0);
        let mut r = round_for(&model, vec![0.0]);
        let cfg = AgentConfig {
            lambda: 1.0,
            max_steps: 7,
            seed: 0,
        };
        assert_eq!(run_agent(&model, &exact(), &mut r, &cfg).unwrap(), 7);
        assert!(r.is_active());
    }
}
