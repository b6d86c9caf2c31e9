//! Post-hoc local linear explanations.
//!
//! The local linear explainer samples the evaluation neighborhood and fits an
//! unweighted ridge regression of the model output on the samples (with an
//! unpenalized intercept). The Taylor explainer is the first-order expansion at
//! the anchor.

use serde::{Deserialize, Serialize};

use crate::engine::{Differentiable, Predictor};
use crate::error::{ensure, Result};
use crate::linalg::{fit_affine, Matrix};
use crate::neighborhood::{NeighborhoodSpec, Role};
use crate::rng::{Rng, SeedStream};

pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_EXPLAINER_SAMPLES: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearExplanation {
    pub anchor: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Neighborhood scale used for the fit; zero for Taylor explanations.
    pub sigma: f64,
    /// Samples used for the fit; zero for Taylor explanations.
    pub m: usize,
    pub output_index: usize,
}

impl LinearExplanation {
    pub fn eval(&self, x: &[f64]) -> f64 {
        crate::linalg::dot(&self.coefficients, x) + self.intercept
    }
}

fn default_samples() -> usize {
    DEFAULT_EXPLAINER_SAMPLES
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

fn default_neighborhood() -> NeighborhoodSpec {
    NeighborhoodSpec::resolve_defaults(Role::Evaluation)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    #[serde(default = "default_samples")]
    pub m: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_neighborhood")]
    pub neighborhood: NeighborhoodSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            m: default_samples(),
            ridge: default_ridge(),
            neighborhood: default_neighborhood(),
            seed: 0,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        ensure!(
            self.m >= d + 2,
            Config,
            "explainer needs m >= d + 2 = {}, got {}",
            d + 2,
            self.m
        );
        ensure!(
            self.ridge.is_finite() && self.ridge >= 0.0,
            Config,
            "ridge must be non-negative"
        );
        self.neighborhood.validate(d)
    }
}

fn check_output(model: &impl Predictor, x: &[f64], output: usize) -> Result<()> {
    ensure!(
        x.len() == model.input_dim(),
        Contract,
        "anchor has {} features, model expects {}",
        x.len(),
        model.input_dim()
    );
    ensure!(
        output < model.output_dim(),
        Contract,
        "output index {} out of range for {} outputs",
        output,
        model.output_dim()
    );
    Ok(())
}

/// Local linear explanation seeded by `config.seed`.
pub fn local_linear_explain(
    model: &impl Predictor,
    x: &[f64],
    config: &ExplainerConfig,
    output: usize,
) -> Result<LinearExplanation> {
    local_linear_explain_with(model, x, config, output, &mut SeedStream::new(config.seed).rng())
}

/// Local linear explanation drawing its neighborhood from `rng`.
pub fn local_linear_explain_with(
    model: &impl Predictor,
    x: &[f64],
    config: &ExplainerConfig,
    output: usize,
    rng: &mut Rng,
) -> Result<LinearExplanation> {
    check_output(model, x, output)?;
    config.validate(x.len())?;
    let samples = config.neighborhood.sample(x, config.m, rng)?;
    let targets = model.predict_output(&samples, output);
    let fit = fit_affine(&samples, &targets, config.ridge)?;
    Ok(LinearExplanation {
        anchor: x.to_vec(),
        coefficients: fit.coefficients,
        intercept: fit.intercept,
        sigma: config.neighborhood.sigma,
        m: config.m,
        output_index: output,
    })
}

/// First-order Taylor expansion of `model` at `x`.
pub fn taylor_explain(
    model: &impl Differentiable,
    x: &[f64],
    output: usize,
) -> Result<LinearExplanation> {
    check_output(model, x, output)?;
    let grad = model.gradient_at(x, output)?;
    let fx = model.predict_one(x, output);
    Ok(LinearExplanation {
        anchor: x.to_vec(),
        intercept: fx - crate::linalg::dot(&grad, x),
        coefficients: grad,
        sigma: 0.0,
        m: 0,
        output_index: output,
    })
}

/// Gradient-magnitude importance of each input for output `class`.
pub fn saliency(model: &impl Differentiable, x: &[f64], class: usize) -> Result<Vec<f64>> {
    check_output(model, x, class)?;
    Ok(model.gradient_at(x, class)?.into_iter().map(f64::abs).collect())
}

/// An explanation procedure `e(x, f)`, configurable from JSON.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Explainer {
    LocalLinear(ExplainerConfig),
    Taylor,
}

impl Default for Explainer {
    fn default() -> Self {
        Explainer::LocalLinear(ExplainerConfig::default())
    }
}

impl Explainer {
    pub fn name(&self) -> &'static str {
        match self {
            Explainer::LocalLinear(_) => "local_linear",
            Explainer::Taylor => "taylor",
        }
    }

    /// Explain `model` at `x`; sampling explainers draw from `stream`.
    pub fn explain(
        &self,
        model: &impl Differentiable,
        x: &[f64],
        output: usize,
        stream: SeedStream,
    ) -> Result<LinearExplanation> {
        match self {
            Explainer::LocalLinear(cfg) => {
                local_linear_explain_with(model, x, cfg, output, &mut stream.rng())
            }
            Explainer::Taylor => taylor_explain(model, x, output),
        }
    }
}

/// Explanations at several anchors, one substream each.
pub fn explain_rows(
    model: &impl Differentiable,
    xs: &Matrix,
    explainer: &Explainer,
    output: usize,
    stream: SeedStream,
) -> Result<Vec<LinearExplanation>> {
    xs.iter_rows()
        .enumerate()
        .map(|(i, x)| explainer.explain(model, x, output, stream.child(i as u64)))
        .collect()
}
