//! Explanation-quality metrics, the expected-residual estimator, and the
//! finite-sample bound on it.

use serde::{Deserialize, Serialize};

use crate::data::{StandardizedDataset, TaskKind};
use crate::engine::{predictive_loss, Differentiable, MlpModel, OutputKind, Predictor};
use crate::error::{ensure, Result};
use crate::explain::{Explainer, LinearExplanation};
use crate::linalg::fit_affine;
use crate::neighborhood::{NeighborhoodSpec, Role};
use crate::rng::{Rng, SeedStream};

pub const DEFAULT_NF_SAMPLES: usize = 100;
pub const DEFAULT_STABILITY_SAMPLES: usize = 25;

/// `(g(x) − f(x))²`.
pub fn point_fidelity(
    model: &impl Predictor,
    explanation: &LinearExplanation,
    x: &[f64],
    output: usize,
) -> f64 {
    let gap = explanation.eval(x) - model.predict_one(x, output);
    gap * gap
}

/// Monte-Carlo mean of `(g(x') − f(x'))²` over `m` draws from `spec`.
pub fn neighborhood_fidelity(
    model: &impl Predictor,
    explanation: &LinearExplanation,
    x: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    rng: &mut Rng,
    output: usize,
) -> Result<f64> {
    let samples = spec.sample(x, m, rng)?;
    let f = model.predict_output(&samples, output);
    Ok(samples
        .iter_rows()
        .zip(&f)
        .map(|(row, fx)| (explanation.eval(row) - fx).powi(2))
        .sum::<f64>()
        / m as f64)
}

fn squared_distance(a: &LinearExplanation, b: &LinearExplanation, include_intercept: bool) -> f64 {
    let mut s: f64 = a
        .coefficients
        .iter()
        .zip(&b.coefficients)
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    if include_intercept {
        s += (a.intercept - b.intercept).powi(2);
    }
    s
}

/// Mean of `‖e(x) − e(x')‖²` over `m` draws of `x'`. `e(x)` uses
/// `stream.child(0)`, the draws `stream.child(1)`, and `e(x'ⱼ)`
/// `stream.derive(&[2, j])`. Coefficients only unless `include_intercept`.
#[allow(clippy::too_many_arguments)]
pub fn stability(
    model: &impl Differentiable,
    explainer: &Explainer,
    x: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    stream: SeedStream,
    output: usize,
    include_intercept: bool,
) -> Result<f64> {
    let base = explainer.explain(model, x, output, stream.child(0))?;
    stability_from(model, explainer, &base, spec, m, stream, include_intercept)
}

fn stability_from(
    model: &impl Differentiable,
    explainer: &Explainer,
    base: &LinearExplanation,
    spec: &NeighborhoodSpec,
    m: usize,
    stream: SeedStream,
    include_intercept: bool,
) -> Result<f64> {
    let samples = spec.sample(&base.anchor, m, &mut stream.child(1).rng())?;
    let mut total = 0.0;
    for (j, xp) in samples.iter_rows().enumerate() {
        let e = explainer.explain(model, xp, base.output_index, stream.derive(&[2, j as u64]))?;
        total += squared_distance(base, &e, include_intercept);
    }
    Ok(total / m as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualEstimate {
    /// Mean squared residual of the best affine fit.
    pub residual: f64,
    /// Population variance of `f` over the same draws.
    pub variance: f64,
}

/// Monte-Carlo `r(f, x) = E[f²] − E[f x̃]ᵀ E[x̃ x̃ᵀ]⁻¹ E[f x̃]` together with the
/// sample variance of `f` on the same draws.
///
/// Evaluated as the mean squared residual of the least-squares affine fit,
/// which equals the moment expression for the empirical distribution and is
/// non-negative by construction.
pub fn expected_residual_with_variance(
    model: &impl Predictor,
    x: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    rng: &mut Rng,
    output: usize,
) -> Result<ResidualEstimate> {
    let d = x.len();
    ensure!(
        m >= 10 * (d + 1),
        Contract,
        "expected residual needs m >= 10(d + 1) = {}, got {}",
        10 * (d + 1),
        m
    );
    let samples = spec.sample(x, m, rng)?;
    let f = model.predict_output(&samples, output);
    let fit = fit_affine(&samples, &f, 0.0)?;
    let residual = samples
        .iter_rows()
        .zip(&f)
        .map(|(row, fx)| (fx - fit.eval(row)).powi(2))
        .sum::<f64>()
        / m as f64;
    let mean = f.iter().sum::<f64>() / m as f64;
    let variance = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
    Ok(ResidualEstimate { residual, variance })
}

pub fn expected_residual(
    model: &impl Predictor,
    x: &[f64],
    spec: &NeighborhoodSpec,
    m: usize,
    rng: &mut Rng,
    output: usize,
) -> Result<f64> {
    Ok(expected_residual_with_variance(model, x, spec, m, rng, output)?.residual)
}

/// Parameters of the high-probability bound on the mean residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// Per-neighborhood cap on the residual.
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    pub sigma: f64,
    pub n: usize,
    pub delta: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.c > 0.0, Contract, "C must be positive");
        ensure!(self.n >= 1, Contract, "n must be at least 1");
        ensure!(
            self.delta > 0.0 && self.delta < 1.0,
            Contract,
            "delta must lie in (0, 1)"
        );
        Ok(())
    }

    /// `sqrt(C² ln(1/δ) / (2n))`.
    pub fn slack(&self) -> Result<f64> {
        self.validate()?;
        Ok((self.c * self.c * (1.0 / self.delta).ln() / (2.0 * self.n as f64)).sqrt())
    }
}

/// `mean(residuals) + sqrt(C² ln(1/δ) / (2n))`.
pub fn hoeffding_bound(residuals: &[f64], c: f64, delta: f64) -> Result<f64> {
    ensure!(!residuals.is_empty(), Contract, "no residuals");
    for &r in residuals {
        ensure!(
            (0.0..=c).contains(&r),
            Contract,
            "residual {} outside [0, {}]",
            r,
            c
        );
    }
    let params = BoundParams {
        c,
        lipschitz: None,
        sigma: 0.0,
        n: residuals.len(),
        delta,
    };
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    Ok(mean + params.slack()?)
}

/// `4 L² σ²`, a cap on the variance of an `L`-Lipschitz model over a σ-ball.
pub fn lipschitz_variance_cap(lipschitz: f64, sigma: f64) -> Result<f64> {
    ensure!(
        lipschitz > 0.0 && sigma > 0.0,
        Contract,
        "L and sigma must be positive"
    );
    Ok(4.0 * lipschitz * lipschitz * sigma * sigma)
}

fn default_eval_neighborhood() -> NeighborhoodSpec {
    NeighborhoodSpec::resolve_defaults(Role::Evaluation)
}

fn default_nf_samples() -> usize {
    DEFAULT_NF_SAMPLES
}

fn default_stability_samples() -> usize {
    DEFAULT_STABILITY_SAMPLES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    #[serde(default = "default_eval_neighborhood")]
    pub neighborhood: NeighborhoodSpec,
    #[serde(default = "default_nf_samples")]
    pub m_eval: usize,
    #[serde(default = "default_stability_samples")]
    pub stability_samples: usize,
    /// Evaluate a seeded subsample of at most this many test anchors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_anchors: Option<usize>,
    #[serde(default)]
    pub include_intercept: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            neighborhood: default_eval_neighborhood(),
            m_eval: DEFAULT_NF_SAMPLES,
            stability_samples: DEFAULT_STABILITY_SAMPLES,
            max_anchors: None,
            include_intercept: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedExplainer {
    pub name: String,
    pub explainer: Explainer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub explainer: String,
    pub anchor_index: usize,
    pub output_index: usize,
    pub pf: f64,
    pub nf: f64,
    pub stability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Summary {
    /// Mean and standard error (sample std / √n; zero for n < 2).
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std_error: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Summary { mean, std_error, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerAggregate {
    pub explainer: String,
    pub pf: Summary,
    pub nf: Summary,
    pub stability: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub settings: EvalSettings,
    pub explainers: Vec<NamedExplainer>,
    pub seed: u64,
    /// Mean predictive loss on the test split (MSE or cross-entropy).
    pub test_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    pub anchors: Vec<usize>,
    pub records: Vec<AnchorRecord>,
    pub aggregates: Vec<ExplainerAggregate>,
}

impl MetricsReport {
    pub fn aggregate(&self, explainer: &str) -> Option<&ExplainerAggregate> {
        self.aggregates.iter().find(|a| a.explainer == explainer)
    }

    /// Recompute aggregates from the per-anchor records.
    pub fn recompute_aggregates(records: &[AnchorRecord], explainers: &[NamedExplainer]) -> Vec<ExplainerAggregate> {
        explainers
            .iter()
            .map(|e| {
                let mine: Vec<&AnchorRecord> =
                    records.iter().filter(|r| r.explainer == e.name).collect();
                let pick = |f: fn(&AnchorRecord) -> f64| -> Vec<f64> {
                    mine.iter().map(|r| f(r)).collect()
                };
                ExplainerAggregate {
                    explainer: e.name.clone(),
                    pf: Summary::of(&pick(|r| r.pf)),
                    nf: Summary::of(&pick(|r| r.nf)),
                    stability: Summary::of(&pick(|r| r.stability)),
                }
            })
            .collect()
    }

    /// Flat `explainer,anchor_index,output_index,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("explainer,anchor_index,output_index,metric,value\n");
        for r in &self.records {
            for (metric, v) in [("pf", r.pf), ("nf", r.nf), ("stability", r.stability)] {
                out.push_str(&format!(
                    "{},{},{},{},{:e}\n",
                    r.explainer, r.anchor_index, r.output_index, metric, v
                ));
            }
        }
        out
    }
}

/// The test anchors evaluated under `settings`: all of them, or a seeded
/// subsample kept in dataset order.
pub fn evaluation_anchors(dataset: &StandardizedDataset, settings: &EvalSettings, seed: u64) -> Vec<usize> {
    let test = &dataset.splits.test;
    match settings.max_anchors {
        Some(k) if k < test.len() => {
            use rand::seq::index::sample;
            let mut picked: Vec<usize> = sample(&mut SeedStream::new(seed).child(0xa1).rng(), test.len(), k)
                .into_iter()
                .collect();
            picked.sort_unstable();
            picked.into_iter().map(|i| test[i]).collect()
        }
        _ => test.clone(),
    }
}

/// PF, NF and stability for each explainer at each evaluated test anchor, and
/// on each logit for classifiers.
pub fn evaluate_model(
    model: &MlpModel,
    dataset: &StandardizedDataset,
    explainers: &[NamedExplainer],
    settings: &EvalSettings,
    seed: u64,
) -> Result<MetricsReport> {
    let test = &dataset.splits.test;
    ensure!(!test.is_empty(), Contract, "test split is empty");
    settings.neighborhood.validate(dataset.d())?;
    ensure!(settings.m_eval >= 1 && settings.stability_samples >= 1, Config, "Monte-Carlo sizes must be positive");
    let features = dataset.rows(test);
    let targets = dataset.targets_at(test);
    let test_loss = predictive_loss(model, &features, &targets)?;
    let test_accuracy = match (model.output_kind(), dataset.task_kind) {
        (OutputKind::Logits, _) | (_, TaskKind::BinaryClassification) => {
            let out = model.forward(&features);
            let hits = out
                .iter_rows()
                .zip(&targets)
                .filter(|(row, &t)| {
                    let best = (0..row.len())
                        .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                        .unwrap_or(0);
                    best as f64 == t
                })
                .count();
            Some(hits as f64 / targets.len() as f64)
        }
        _ => None,
    };

    let anchors = evaluation_anchors(dataset, settings, seed);
    let root = SeedStream::new(seed);
    let mut records = Vec::new();
    for (ei, named) in explainers.iter().enumerate() {
        for &a in &anchors {
            let x = dataset.features.row(a);
            for output in 0..model.output_width() {
                let stream = root.derive(&[ei as u64, a as u64, output as u64]);
                let e = named.explainer.explain(model, x, output, stream.child(0))?;
                let pf = point_fidelity(model, &e, x, output);
                let nf = neighborhood_fidelity(
                    model,
                    &e,
                    x,
                    &settings.neighborhood,
                    settings.m_eval,
                    &mut stream.child(1).rng(),
                    output,
                )?;
                let s = stability_from(
                    model,
                    &named.explainer,
                    &e,
                    &settings.neighborhood,
                    settings.stability_samples,
                    stream.child(2),
                    settings.include_intercept,
                )?;
                records.push(AnchorRecord {
                    explainer: named.name.clone(),
                    anchor_index: a,
                    output_index: output,
                    pf,
                    nf,
                    stability: s,
                });
            }
        }
    }
    let aggregates = MetricsReport::recompute_aggregates(&records, explainers);
    Ok(MetricsReport {
        settings: settings.clone(),
        explainers: explainers.to_vec(),
        seed,
        test_loss,
        test_accuracy,
        anchors,
        records,
        aggregates,
    })
}
