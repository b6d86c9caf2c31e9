//! Reverse-mode differentiation, the MLP model family, Adam, and the
//! regularized training loop.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use graph::{Graph, Gradients, Var};
pub use mlp::{Gradient, MlpModel, OutputKind, ParamVars, DEFAULT_LEAKY_SLOPE};
pub use train::{
    calibrate_relative_weight, loss_and_gradient, loss_terms, predictive_loss, train, Batch,
    EpochRecord, LossBreakdown, TrainConfig, TrainOutcome, DIVERGENCE_THRESHOLD,
};

use crate::error::Result;
use crate::linalg::Matrix;

/// A black-box function evaluated row-wise. Explainers and metrics only need
/// this much of a model.
pub trait Predictor {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Predictions for each row of `xs`, shaped (rows × output_dim).
    fn predict_rows(&self, xs: &Matrix) -> Matrix;

    /// Output `output` at every row.
    fn predict_output(&self, xs: &Matrix, output: usize) -> Vec<f64> {
        self.predict_rows(xs).column(output)
    }

    fn predict_one(&self, x: &[f64], output: usize) -> f64 {
        self.predict_rows(&Matrix::row_vector(x))[(0, output)]
    }
}

/// Predictors that expose input derivatives.
pub trait Differentiable: Predictor {
    fn gradient_at(&self, x: &[f64], output: usize) -> Result<Vec<f64>>;
}

/// Wraps a scalar closure as a one-output predictor.
pub struct FnPredictor<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64> FnPredictor<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64> Predictor for FnPredictor<F> {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn predict_rows(&self, xs: &Matrix) -> Matrix {
        Matrix::column_vector(&xs.iter_rows().map(|r| (self.f)(r)).collect::<Vec<_>>())
    }
}

/// A scalar closure together with its gradient.
pub struct FnDifferentiable<F, G> {
    inner: FnPredictor<F>,
    grad: G,
}

impl<F, G> FnDifferentiable<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub fn new(dim: usize, f: F, grad: G) -> Self {
        Self {
            inner: FnPredictor::new(dim, f),
            grad,
        }
    }
}

impl<F, G> Predictor for FnDifferentiable<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn predict_rows(&self, xs: &Matrix) -> Matrix {
        self.inner.predict_rows(xs)
    }
}

impl<F, G> Differentiable for FnDifferentiable<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn gradient_at(&self, x: &[f64], _output: usize) -> Result<Vec<f64>> {
        Ok((self.grad)(x))
    }
}
