//! Explanation-quality regularizers and the classical weight penalties.
//!
//! The neighborhood-fidelity regularizer fits a local affine model to the
//! network's outputs on points sampled around an anchor and penalizes the mean
//! squared residual. The fitted coefficients are read from a stop-gradient
//! copy of the predictions: because they minimize the residual, the derivative
//! of the residual with respect to them vanishes, and the gradient that flows
//! only through the predictions is exact.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::engine::{Gradient, Graph, MlpModel, ParamVars, Predictor, Var};
use crate::error::{ensure, Result};
use crate::linalg::{fit_affine, fit_line, Matrix};
use crate::neighborhood::NeighborhoodSpec;
use crate::rng::Rng;

/// The paper-scale grid of relative weights.
pub const RELATIVE_WEIGHT_GRID: [f64; 6] = [0.1, 0.05, 0.025, 0.01, 0.005, 0.001];

/// Below this the regularizer counts as already satisfied at initialization.
pub const CALIBRATION_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    ExpoFidelity,
    #[serde(rename = "expo_fidelity_1d")]
    ExpoFidelity1d,
    ExpoStability,
    L1,
    L2,
}

impl RegularizerKind {
    pub fn label(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::ExpoFidelity => "expo_fidelity",
            RegularizerKind::ExpoFidelity1d => "expo_fidelity_1d",
            RegularizerKind::ExpoStability => "expo_stability",
            RegularizerKind::L1 => "l1",
            RegularizerKind::L2 => "l2",
        }
    }

    /// Whether the term is averaged over per-anchor neighborhoods.
    pub fn uses_neighborhood(self) -> bool {
        matches!(
            self,
            RegularizerKind::ExpoFidelity
                | RegularizerKind::ExpoFidelity1d
                | RegularizerKind::ExpoStability
        )
    }

    /// Smallest admissible samples-per-anchor for input dimension `d`.
    pub fn min_samples(self, d: usize) -> usize {
        match self {
            RegularizerKind::ExpoFidelity => d + 2,
            RegularizerKind::ExpoFidelity1d => 3,
            _ => 1,
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerReport {
    pub value: f64,
    pub anchors_used: usize,
    pub samples_per_anchor: usize,
}

/// A regularizer value with its parameter gradient.
#[derive(Clone, Debug)]
pub struct RegularizerValue {
    pub report: RegularizerReport,
    pub gradient: Gradient,
}

impl RegularizerValue {
    pub fn value(&self) -> f64 {
        self.report.value
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedWeight {
    pub relative_weight: f64,
    pub absolute_gamma: f64,
    pub calibration_loss: f64,
    pub calibration_reg: f64,
}

impl CalibratedWeight {
    /// `γ = w · L₀ / R₀`, or zero when `R₀` is negligible.
    pub fn from_initial_values(relative_weight: f64, loss: f64, reg: f64) -> Self {
        let absolute_gamma = if reg < CALIBRATION_FLOOR {
            log::warn!(
                "regularizer is {reg:e} at initialization; using an absolute weight of zero"
            );
            0.0
        } else {
            relative_weight * loss / reg
        };
        CalibratedWeight {
            relative_weight,
            absolute_gamma,
            calibration_loss: loss,
            calibration_reg: reg,
        }
    }
}

/// Keep the `k` largest-magnitude coefficients.
fn truncate_top_k(coefficients: &mut [f64], k: usize) {
    if k >= coefficients.len() {
        return;
    }
    let mut order: Vec<usize> = (0..coefficients.len()).collect();
    order.sort_by(|&a, &b| {
        coefficients[b]
            .abs()
            .total_cmp(&coefficients[a].abs())
            .then(a.cmp(&b))
    });
    for &i in &order[k..] {
        coefficients[i] = 0.0;
    }
}

/// Fitted values and residual-free targets for each group of `group` rows.
fn local_affine_fits(
    values: &Matrix,
    samples: &Matrix,
    group: usize,
    sparse_top_k: Option<usize>,
) -> Result<Matrix> {
    ensure!(
        values.rows() == samples.rows() && group > 0 && samples.rows().is_multiple_of(group),
        Contract,
        "samples and predictions must come in whole groups"
    );
    let mut fitted = Matrix::zeros(values.rows(), values.cols());
    for start in (0..samples.rows()).step_by(group) {
        let block = samples.row_block(start, start + group);
        for c in 0..values.cols() {
            let targets: Vec<f64> = (start..start + group).map(|i| values[(i, c)]).collect();
            let mut fit = fit_affine(&block, &targets, 0.0)?;
            if let Some(k) = sparse_top_k {
                truncate_top_k(&mut fit.coefficients, k);
                // best intercept for the restricted slope
                let mean_residual = block
                    .iter_rows()
                    .zip(&targets)
                    .map(|(r, &y)| y - fit.eval(r))
                    .sum::<f64>()
                    / group as f64;
                fit.intercept += mean_residual;
            }
            for (i, row) in block.iter_rows().enumerate() {
                fitted[(start + i, c)] = fit.eval(row);
            }
        }
    }
    Ok(fitted)
}

/// Mean squared residual of per-group local affine fits to `predictions`.
///
/// `predictions` holds one row per sample; rows `[g·group, (g+1)·group)` are the
/// neighborhood of anchor `g`. Multi-output predictions are fit per output and
/// averaged.
pub fn fidelity_term(
    g: &mut Graph,
    predictions: Var,
    samples: &Matrix,
    group: usize,
    sparse_top_k: Option<usize>,
) -> Result<Var> {
    let frozen = g.stop_gradient(predictions);
    let fitted = local_affine_fits(g.value(frozen), samples, group, sparse_top_k)?;
    let fitted = g.constant(fitted);
    let residual = g.sub(predictions, fitted);
    let sq = g.square(residual);
    Ok(g.mean(sq))
}

/// Like [`fidelity_term`] but each group is fit by a simple regression on one
/// coordinate, `dims[group index]`.
pub fn fidelity_1d_term(
    g: &mut Graph,
    predictions: Var,
    samples: &Matrix,
    dims: &[usize],
    group: usize,
) -> Result<Var> {
    ensure!(
        samples.rows() == dims.len() * group,
        Contract,
        "one perturbed dimension per anchor group"
    );
    let frozen = g.stop_gradient(predictions);
    let values = g.value(frozen);
    let mut fitted = values.clone();
    for (gi, &k) in dims.iter().enumerate() {
        let start = gi * group;
        let xs: Vec<f64> = (start..start + group).map(|i| samples[(i, k)]).collect();
        for c in 0..values.cols() {
            let ys: Vec<f64> = (start..start + group).map(|i| values[(i, c)]).collect();
            // zero spread in the perturbed coordinate leaves the residual at zero
            if let Some((slope, intercept)) = fit_line(&xs, &ys) {
                for (i, &x) in xs.iter().enumerate() {
                    fitted[(start + i, c)] = slope * x + intercept;
                }
            }
        }
    }
    let fitted = g.constant(fitted);
    let residual = g.sub(predictions, fitted);
    let sq = g.square(residual);
    Ok(g.mean(sq))
}

/// `(1/m) Σⱼ (f(x'ⱼ) − f(x))²` averaged over anchors, differentiating through
/// both the sample and the anchor predictions.
pub fn stability_term(
    g: &mut Graph,
    sample_predictions: Var,
    anchor_predictions: Var,
    group: usize,
) -> Var {
    let repeated = g.repeat_rows(anchor_predictions, group);
    let diff = g.sub(sample_predictions, repeated);
    let sq = g.square(diff);
    g.mean(sq)
}

/// `Σ |w|ᵖ` over weight matrices, biases excluded.
pub fn lp_term(g: &mut Graph, params: &ParamVars, p: u8) -> Result<Var> {
    ensure!(p == 1 || p == 2, Contract, "only p = 1 or p = 2 is supported");
    let mut total: Option<Var> = None;
    for &w in &params.weights {
        let t = if p == 1 { g.abs(w) } else { g.square(w) };
        let s = g.sum(t);
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    Ok(total.expect("model has at least one layer"))
}

fn finish(
    model: &MlpModel,
    g: Graph,
    params: &ParamVars,
    term: Var,
    anchors: usize,
    m: usize,
) -> RegularizerValue {
    let value = g.scalar(term);
    let grads = g.backward(term);
    RegularizerValue {
        report: RegularizerReport {
            value,
            anchors_used: anchors,
            samples_per_anchor: m,
        },
        gradient: Gradient::collect(model, params, &grads),
    }
}

/// Neighborhood-fidelity regularizer at one anchor, with its gradient.
pub fn expo_fidelity_loss(
    model: &MlpModel,
    anchor: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    rng: &mut Rng,
) -> Result<RegularizerValue> {
    expo_fidelity_loss_sparse(model, anchor, spec, m, rng, None)
}

/// [`expo_fidelity_loss`] restricted to the `sparse_top_k` largest local coefficients.
pub fn expo_fidelity_loss_sparse(
    model: &MlpModel,
    anchor: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    rng: &mut Rng,
    sparse_top_k: Option<usize>,
) -> Result<RegularizerValue> {
    let d = model.input_width();
    ensure!(
        m >= d + 2,
        Contract,
        "fidelity regularizer needs m >= d + 2 = {}, got {}",
        d + 2,
        m
    );
    let samples = spec.sample(anchor, m, rng)?;
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let xs = g.constant(samples.clone());
    let out = model.forward_graph(&mut g, &params, xs);
    let term = fidelity_term(&mut g, out, &samples, m, sparse_top_k)?;
    Ok(finish(model, g, &params, term, 1, m))
}

/// One-coordinate fidelity regularizer: draws the perturbed coordinate
/// uniformly, then fits a line along it.
pub fn expo_fidelity_1d_loss(
    model: &MlpModel,
    anchor: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    rng: &mut Rng,
) -> Result<RegularizerValue> {
    let index = rng.random_range(0..anchor.len().max(1));
    expo_fidelity_1d_loss_at(model, anchor, index, spec.sigma, m, rng)
}

/// [`expo_fidelity_1d_loss`] with a fixed coordinate.
pub fn expo_fidelity_1d_loss_at(
    model: &MlpModel,
    anchor: &[f64],
    index: usize,
    sigma: f64,
    m: usize,
    rng: &mut Rng,
) -> Result<RegularizerValue> {
    ensure!(m >= 3, Contract, "one-dimensional fit needs m >= 3, got {}", m);
    let samples = NeighborhoodSpec::one_dim_gaussian(index, sigma).sample(anchor, m, rng)?;
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let xs = g.constant(samples.clone());
    let out = model.forward_graph(&mut g, &params, xs);
    let term = fidelity_1d_term(&mut g, out, &samples, &[index], m)?;
    Ok(finish(model, g, &params, term, 1, m))
}

/// Neighborhood-stability regularizer at one anchor.
pub fn expo_stability_loss(
    model: &MlpModel,
    anchor: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    rng: &mut Rng,
) -> Result<RegularizerValue> {
    ensure!(m >= 1, Contract, "need at least one sample");
    let samples = spec.sample(anchor, m, rng)?;
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let xs = g.constant(samples);
    let sample_out = model.forward_graph(&mut g, &params, xs);
    let x0 = g.constant(Matrix::row_vector(anchor));
    let anchor_out = model.forward_graph(&mut g, &params, x0);
    let term = stability_term(&mut g, sample_out, anchor_out, m);
    Ok(finish(model, g, &params, term, 1, m))
}

/// L1 (`p = 1`) or L2 (`p = 2`) weight penalty with its gradient.
pub fn lp_penalty(model: &MlpModel, p: u8) -> Result<RegularizerValue> {
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let term = lp_term(&mut g, &params, p)?;
    Ok(finish(model, g, &params, term, 0, 0))
}

/// Fidelity regularizer value for any black box (no gradient).
pub fn fidelity_value(
    f: &impl Predictor,
    anchor: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let samples = spec.sample(anchor, m, rng)?;
    let values = f.predict_rows(&samples);
    let fitted = local_affine_fits(&values, &samples, m, None)?;
    let n = (values.rows() * values.cols()) as f64;
    Ok(values
        .as_slice()
        .iter()
        .zip(fitted.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}
