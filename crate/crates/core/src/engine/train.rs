//! The regularized training objective: mean predictive loss plus `γ` times the
//! mean regularizer over the anchors of a mini-batch, optimized with Adam.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::graph::{Graph, Var};
use super::mlp::{Gradient, MlpModel, OutputKind, ParamVars};
use crate::data::StandardizedDataset;
use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::neighborhood::{NeighborhoodSpec, Role};
pub use crate::regularize::RegularizerKind;
use crate::regularize::{
    fidelity_1d_term, fidelity_term, lp_term, stability_term, CalibratedWeight,
};
use crate::rng::SeedStream;

/// Losses above this abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

const SHUFFLE_STREAM: u64 = 1;
const REGULARIZER_STREAM: u64 = 2;
const CALIBRATION_STREAM: u64 = 3;

fn default_batch_size() -> usize {
    32
}

fn default_learning_rate() -> f64 {
    0.001
}

fn default_relative_weight() -> f64 {
    0.1
}

fn default_neighborhood() -> NeighborhoodSpec {
    NeighborhoodSpec::resolve_defaults(Role::Regularization)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub regularizer: RegularizerKind,
    #[serde(default = "default_relative_weight")]
    pub relative_weight: f64,
    #[serde(default = "default_neighborhood")]
    pub neighborhood: NeighborhoodSpec,
    /// Samples per anchor; `None` means `max(d + 2, 20)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Skip calibration and use this `γ` directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absolute_gamma: Option<f64>,
    /// Fit only the `k` largest local coefficients in the fidelity term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_top_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            regularizer: RegularizerKind::None,
            relative_weight: default_relative_weight(),
            neighborhood: default_neighborhood(),
            m: None,
            seed: 0,
            absolute_gamma: None,
            sparse_top_k: None,
        }
    }
}

impl TrainConfig {
    pub fn samples_per_anchor(&self, d: usize) -> usize {
        self.m.unwrap_or((d + 2).max(20))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            Config,
            "learning_rate must be positive"
        );
        if self.regularizer != RegularizerKind::None {
            ensure!(
                self.relative_weight > 0.0 && self.relative_weight <= 1.0,
                Config,
                "relative_weight must lie in (0, 1], got {}",
                self.relative_weight
            );
        }
        if let Some(g) = self.absolute_gamma {
            ensure!(g.is_finite() && g >= 0.0, Config, "absolute_gamma must be non-negative");
        }
        if self.regularizer.uses_neighborhood() {
            self.neighborhood.validate(d)?;
            let m = self.samples_per_anchor(d);
            let need = self.regularizer.min_samples(d);
            ensure!(
                m >= need,
                Config,
                "{} needs at least {} samples per anchor, got {}",
                self.regularizer,
                need,
                m
            );
        }
        Ok(())
    }
}

/// Rows of features with their targets (class labels as `0.0, 1.0, ...`
/// for logit models).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn new(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        ensure!(
            features.rows() == targets.len(),
            Contract,
            "{} feature rows but {} targets",
            features.rows(),
            targets.len()
        );
        Ok(Batch { features, targets })
    }

    pub fn gather(dataset: &StandardizedDataset, indices: &[usize]) -> Batch {
        let d = dataset.features.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(dataset.features.row(i));
            targets.push(dataset.targets[i]);
        }
        Batch {
            features: Matrix::from_vec(indices.len(), d, data).expect("consistent widths"),
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub predictive: f64,
    pub regularizer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_predictive: f64,
    pub train_regularizer: f64,
    pub val_predictive: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    pub calibration: Option<CalibratedWeight>,
}

impl TrainOutcome {
    /// History as JSON lines, one record per epoch.
    pub fn history_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.history {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

fn labels_of(targets: &[f64], classes: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let l = t as usize;
            if t >= 0.0 && t.fract() == 0.0 && l < classes {
                Ok(l)
            } else {
                Err(Error::Contract(format!(
                    "target {t} at batch row {i} is not a class label below {classes}"
                )))
            }
        })
        .collect()
}

fn predictive_term(
    g: &mut Graph,
    model: &MlpModel,
    out: Var,
    batch: &Batch,
) -> Result<Var> {
    match model.output_kind() {
        OutputKind::Linear => {
            ensure!(
                model.output_width() == 1,
                Contract,
                "squared-error loss needs a single output"
            );
            let y = g.constant(Matrix::column_vector(&batch.targets));
            let r = g.sub(out, y);
            let sq = g.square(r);
            Ok(g.mean(sq))
        }
        OutputKind::Logits => {
            let labels = labels_of(&batch.targets, model.output_width())?;
            Ok(g.softmax_cross_entropy(out, &labels))
        }
    }
}

fn first_non_finite_row(m: &Matrix) -> Option<usize> {
    (0..m.rows()).find(|&i| m.row(i).iter().any(|v| !v.is_finite()))
}

struct Objective {
    graph: Graph,
    params: ParamVars,
    predictive: Var,
    regularizer: Option<Var>,
}

fn build_objective(
    model: &MlpModel,
    batch: &Batch,
    config: &TrainConfig,
    stream: SeedStream,
) -> Result<Objective> {
    ensure!(!batch.is_empty(), Contract, "empty batch");
    let d = model.input_width();
    ensure!(
        batch.features.cols() == d,
        Contract,
        "batch has {} features, model expects {}",
        batch.features.cols(),
        d
    );
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let x = g.constant(batch.features.clone());
    let out = model.forward_graph(&mut g, &params, x);
    if let Some(row) = first_non_finite_row(g.value(out)) {
        return Err(Error::Numerical(format!(
            "non-finite model output at batch row {row}"
        )));
    }
    let predictive = predictive_term(&mut g, model, out, batch)?;

    let m = config.samples_per_anchor(d);
    let spec = &config.neighborhood;
    let regularizer = match config.regularizer {
        RegularizerKind::None => None,
        RegularizerKind::ExpoFidelity | RegularizerKind::ExpoStability => {
            let mut parts = Vec::with_capacity(batch.len());
            for (i, anchor) in batch.features.iter_rows().enumerate() {
                let mut rng = stream.child(i as u64).rng();
                parts.push(spec.sample(anchor, m, &mut rng)?);
            }
            let samples = Matrix::vstack(&parts)?;
            let xs = g.constant(samples.clone());
            let sample_out = model.forward_graph(&mut g, &params, xs);
            Some(if config.regularizer == RegularizerKind::ExpoFidelity {
                fidelity_term(&mut g, sample_out, &samples, m, config.sparse_top_k)?
            } else {
                stability_term(&mut g, sample_out, out, m)
            })
        }
        RegularizerKind::ExpoFidelity1d => {
            let mut parts = Vec::with_capacity(batch.len());
            let mut dims = Vec::with_capacity(batch.len());
            for (i, anchor) in batch.features.iter_rows().enumerate() {
                let mut rng = stream.child(i as u64).rng();
                let k = rng.random_range(0..d);
                dims.push(k);
                parts.push(spec.restricted_to(k).sample(anchor, m, &mut rng)?);
            }
            let samples = Matrix::vstack(&parts)?;
            let xs = g.constant(samples.clone());
            let sample_out = model.forward_graph(&mut g, &params, xs);
            Some(fidelity_1d_term(&mut g, sample_out, &samples, &dims, m)?)
        }
        RegularizerKind::L1 => Some(lp_term(&mut g, &params, 1)?),
        RegularizerKind::L2 => Some(lp_term(&mut g, &params, 2)?),
    };
    Ok(Objective {
        graph: g,
        params,
        predictive,
        regularizer,
    })
}

/// Predictive loss and regularizer value on a batch, without derivatives.
pub fn loss_terms(
    model: &MlpModel,
    batch: &Batch,
    config: &TrainConfig,
    stream: SeedStream,
) -> Result<(f64, f64)> {
    let obj = build_objective(model, batch, config, stream)?;
    let reg = obj.regularizer.map_or(0.0, |r| obj.graph.scalar(r));
    Ok((obj.graph.scalar(obj.predictive), reg))
}

/// `L + γ·R` on `batch` and its exact parameter gradient. Regularizer samples
/// for anchor `i` come from `stream.child(i)`.
pub fn loss_and_gradient(
    model: &MlpModel,
    batch: &Batch,
    config: &TrainConfig,
    gamma: f64,
    stream: SeedStream,
) -> Result<(LossBreakdown, Gradient)> {
    let mut obj = build_objective(model, batch, config, stream)?;
    let g = &mut obj.graph;
    let predictive = g.scalar(obj.predictive);
    let (total, reg_value) = match obj.regularizer {
        Some(r) => {
            let value = g.scalar(r);
            let weighted = g.scale(r, gamma);
            (g.add(obj.predictive, weighted), value)
        }
        None => (obj.predictive, 0.0),
    };
    let breakdown = LossBreakdown {
        total: g.scalar(total),
        predictive,
        regularizer: reg_value,
    };
    let grads = g.backward(total);
    Ok((breakdown, Gradient::collect(model, &obj.params, &grads)))
}

/// Mean predictive loss over `rows` of the dataset, computed without a tape.
pub fn predictive_loss(model: &MlpModel, features: &Matrix, targets: &[f64]) -> Result<f64> {
    ensure!(!targets.is_empty(), Contract, "no rows to evaluate");
    let out = model.forward(features);
    match model.output_kind() {
        OutputKind::Linear => Ok(out
            .column(0)
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / targets.len() as f64),
        OutputKind::Logits => {
            let labels = labels_of(targets, model.output_width())?;
            let mut total = 0.0;
            for (row, &l) in out.iter_rows().zip(&labels) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[l];
            }
            Ok(total / labels.len() as f64)
        }
    }
}

/// `γ = w · L₀ / R₀` from the initial model on `batch`.
pub fn calibrate_relative_weight(
    model: &MlpModel,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<CalibratedWeight> {
    ensure!(
        config.regularizer != RegularizerKind::None,
        Contract,
        "nothing to calibrate without a regularizer"
    );
    let stream = SeedStream::new(config.seed).child(CALIBRATION_STREAM);
    let (loss, reg) = loss_terms(model, batch, config, stream)?;
    Ok(CalibratedWeight::from_initial_values(
        config.relative_weight,
        loss,
        reg,
    ))
}

fn epoch_order(train: &[usize], root: SeedStream, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut root.derive(&[SHUFFLE_STREAM, epoch as u64]).rng());
    order
}

/// Train `model` on the dataset's train split, reporting validation loss per epoch.
pub fn train(
    model: MlpModel,
    dataset: &StandardizedDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate(model.input_width())?;
    ensure!(
        dataset.features.cols() == model.input_width(),
        Contract,
        "dataset has {} features, model expects {}",
        dataset.features.cols(),
        model.input_width()
    );
    let splits = &dataset.splits;
    ensure!(
        !splits.train.is_empty() && !splits.val.is_empty(),
        Contract,
        "training needs non-empty train and validation splits"
    );
    let mut model = model;
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history,
            calibration: None,
        });
    }

    let root = SeedStream::new(config.seed);
    let val = Batch::gather(dataset, &splits.val);
    let (gamma, calibration) = match (config.regularizer, config.absolute_gamma) {
        (RegularizerKind::None, _) => (0.0, None),
        (_, Some(g)) => (g, None),
        _ => {
            let first = epoch_order(&splits.train, root, 0);
            let n = config.batch_size.min(first.len());
            let cal = calibrate_relative_weight(&model, &Batch::gather(dataset, &first[..n]), config)?;
            log::info!(
                "calibrated {}: w = {}, L0 = {:.6}, R0 = {:.6e}, gamma = {:.6e}",
                config.regularizer,
                cal.relative_weight,
                cal.calibration_loss,
                cal.calibration_reg,
                cal.absolute_gamma
            );
            (cal.absolute_gamma, Some(cal))
        }
    };

    let mut state = AdamState::new();
    for epoch in 0..config.epochs {
        let order = epoch_order(&splits.train, root, epoch);
        let (mut pred_sum, mut reg_sum) = (0.0, 0.0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = Batch::gather(dataset, chunk);
            let stream = root.derive(&[REGULARIZER_STREAM, epoch as u64, step as u64]);
            let (loss, grad) = loss_and_gradient(&model, &batch, config, gamma, stream)?;
            if !loss.total.is_finite() || loss.total > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: loss.total,
                });
            }
            adam_step(&mut model, &grad, &mut state, config.learning_rate)?;
            pred_sum += loss.predictive * batch.len() as f64;
            reg_sum += loss.regularizer * batch.len() as f64;
        }
        let n = order.len() as f64;
        let record = EpochRecord {
            epoch,
            train_predictive: pred_sum / n,
            train_regularizer: reg_sum / n,
            val_predictive: predictive_loss(&model, &val.features, &val.targets)?,
            gamma,
        };
        log::debug!("{record:?}");
        history.push(record);
    }
    Ok(TrainOutcome {
        model,
        history,
        calibration,
    })
}
