use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::{Differentiable, Predictor};
use crate::error::{ensure, Error, Result};
use crate::linalg::{matmul_nt, Matrix};
use crate::rng::SeedStream;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Regression output.
    Linear,
    /// Raw class logits; softmax is applied only inside the loss.
    Logits,
}

/// A fully connected network with leaky-ReLU hidden activations and a linear
/// output layer. Layer `k` maps width `k` to width `k + 1`; its weight matrix
/// is stored as (width[k+1] × width[k]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct MlpModel {
    layer_widths: Vec<usize>,
    leaky_slope: f64,
    output_kind: OutputKind,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// On-disk form: weights as row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layer_widths: Vec<usize>,
    leaky_slope: f64,
    output_kind: OutputKind,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<MlpModel> for Checkpoint {
    fn from(m: MlpModel) -> Self {
        Checkpoint {
            weights: m
                .weights
                .iter()
                .map(|w| w.iter_rows().map(<[f64]>::to_vec).collect())
                .collect(),
            layer_widths: m.layer_widths,
            leaky_slope: m.leaky_slope,
            output_kind: m.output_kind,
            biases: m.biases,
        }
    }
}

impl TryFrom<Checkpoint> for MlpModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let weights = c
            .weights
            .iter()
            .map(|rows| Matrix::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        let model = MlpModel {
            layer_widths: c.layer_widths,
            leaky_slope: c.leaky_slope,
            output_kind: c.output_kind,
            weights,
            biases: c.biases,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Graph handles for a model's parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Derivatives of a scalar with respect to every weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradient {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Gather from a backward pass.
    pub fn collect(model: &MlpModel, params: &ParamVars, grads: &super::graph::Gradients) -> Self {
        let weights = params
            .weights
            .iter()
            .zip(&model.weights)
            .map(|(&v, w)| grads.wrt_or_zeros(v, w.shape()))
            .collect();
        let biases = params
            .biases
            .iter()
            .zip(&model.biases)
            .map(|(&v, b)| grads.wrt_or_zeros(v, (1, b.len())).into_vec())
            .collect();
        Gradient { weights, biases }
    }

    /// Parameters in the same order as [`MlpModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn conforms_to(&self, model: &MlpModel) -> bool {
        self.weights.len() == model.weights.len()
            && self
                .weights
                .iter()
                .zip(&model.weights)
                .all(|(g, w)| g.shape() == w.shape())
            && self
                .biases
                .iter()
                .zip(&model.biases)
                .all(|(g, b)| g.len() == b.len())
    }
}

impl MlpModel {
    /// Xavier-uniform weights from a seeded generator; zero biases.
    pub fn init(
        layer_widths: &[usize],
        leaky_slope: f64,
        output_kind: OutputKind,
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            layer_widths.len() >= 2,
            Contract,
            "a model needs an input width and at least one layer"
        );
        ensure!(
            layer_widths.iter().all(|&w| w > 0),
            Contract,
            "layer widths must be positive, got {:?}",
            layer_widths
        );
        ensure!(leaky_slope.is_finite(), Contract, "leaky slope must be finite");
        let mut rng = SeedStream::new(seed).child(0x1417).rng();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpModel {
            layer_widths: layer_widths.to_vec(),
            leaky_slope,
            output_kind,
            weights,
            biases,
        })
    }

    /// Build from explicit parameters.
    pub fn from_parts(
        leaky_slope: f64,
        output_kind: OutputKind,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        ensure!(!weights.is_empty(), Contract, "need at least one layer");
        let mut layer_widths = vec![weights[0].cols()];
        layer_widths.extend(weights.iter().map(Matrix::rows));
        let model = MlpModel {
            layer_widths,
            leaky_slope,
            output_kind,
            weights,
            biases,
        };
        model.validate()?;
        Ok(model)
    }

    /// A single affine layer `wᵀx + b`.
    pub fn affine(coefficients: &[f64], intercept: f64) -> Self {
        MlpModel {
            layer_widths: vec![coefficients.len(), 1],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            output_kind: OutputKind::Linear,
            weights: vec![Matrix::row_vector(coefficients)],
            biases: vec![vec![intercept]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.layer_widths.len() == self.weights.len() + 1
                && self.weights.len() == self.biases.len(),
            Contract,
            "layer count mismatch"
        );
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            ensure!(
                w.shape() == (self.layer_widths[k + 1], self.layer_widths[k]),
                Contract,
                "layer {} weight is {:?}, expected {:?}",
                k,
                w.shape(),
                (self.layer_widths[k + 1], self.layer_widths[k])
            );
            ensure!(
                b.len() == self.layer_widths[k + 1],
                Contract,
                "layer {} bias length {}",
                k,
                b.len()
            );
        }
        ensure!(self.is_finite(), Numerical, "model has non-finite parameters");
        Ok(())
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output_kind
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.rows() * w.cols() + b.len())
            .sum()
    }

    /// All parameters, layer by layer: weights (row-major) then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        ensure!(
            values.len() == self.parameter_count(),
            Contract,
            "expected {} parameters, got {}",
            self.parameter_count(),
            values.len()
        );
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
            let nb = b.len();
            b.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&mut Matrix, &mut Vec<f64>)> {
        self.weights.iter_mut().zip(self.biases.iter_mut())
    }

    /// Forward pass for one input vector.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.input_width(),
            Contract,
            "input has {} features, model expects {}",
            x.len(),
            self.input_width()
        );
        Ok(self.forward(&Matrix::row_vector(x)).into_vec())
    }

    /// Forward pass over rows, without recording a graph.
    pub fn forward(&self, xs: &Matrix) -> Matrix {
        assert_eq!(xs.cols(), self.input_width(), "input width mismatch");
        let last = self.weights.len() - 1;
        let mut h = xs.clone();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul_nt(&h, w);
            let slope = self.leaky_slope;
            for i in 0..z.rows() {
                for (v, &bb) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bb;
                    if k < last && *v < 0.0 {
                        *v *= slope;
                    }
                }
            }
            h = z;
        }
        h
    }

    /// Register parameters as differentiable leaves.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        let weights = self.weights.iter().map(|w| g.variable(w.clone())).collect();
        let biases = self
            .biases
            .iter()
            .map(|b| g.variable(Matrix::row_vector(b)))
            .collect();
        ParamVars { weights, biases }
    }

    /// Register parameters as constants, e.g. when only input derivatives are needed.
    pub fn register_frozen(&self, g: &mut Graph) -> ParamVars {
        let weights = self.weights.iter().map(|w| g.constant(w.clone())).collect();
        let biases = self
            .biases
            .iter()
            .map(|b| g.constant(Matrix::row_vector(b)))
            .collect();
        ParamVars { weights, biases }
    }

    /// Recorded forward pass.
    pub fn forward_graph(&self, g: &mut Graph, params: &ParamVars, x: Var) -> Var {
        let last = params.weights.len() - 1;
        let mut h = x;
        for k in 0..params.weights.len() {
            h = g.linear(h, params.weights[k], params.biases[k]);
            if k < last {
                h = g.leaky_relu(h, self.leaky_slope);
            }
        }
        h
    }

    /// `∇ₓ f(x)` for output `output` via reverse mode through the inputs.
    pub fn input_gradient(&self, x: &[f64], output: usize) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.input_width(),
            Contract,
            "input has {} features, model expects {}",
            x.len(),
            self.input_width()
        );
        ensure!(
            output < self.output_width(),
            Contract,
            "output index {} out of range for width {}",
            output,
            self.output_width()
        );
        let mut g = Graph::new();
        let params = self.register_frozen(&mut g);
        let xv = g.variable(Matrix::row_vector(x));
        let out = self.forward_graph(&mut g, &params, xv);
        let col = g.column(out, output);
        let s = g.sum(col);
        let grads = g.backward(s);
        Ok(grads.wrt_or_zeros(xv, (1, x.len())).into_vec())
    }
}

impl Predictor for MlpModel {
    fn input_dim(&self) -> usize {
        self.input_width()
    }

    fn output_dim(&self) -> usize {
        self.output_width()
    }

    fn predict_rows(&self, xs: &Matrix) -> Matrix {
        self.forward(xs)
    }
}

impl Differentiable for MlpModel {
    fn gradient_at(&self, x: &[f64], output: usize) -> Result<Vec<f64>> {
        self.input_gradient(x, output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_zero_biases_and_determinism() {
        let a = MlpModel::init(&[2, 1], DEFAULT_LEAKY_SLOPE, OutputKind::Linear, 3).unwrap();
        assert_eq!(a.biases(), &[vec![0.0]]);
        let b = MlpModel::init(&[2, 1], DEFAULT_LEAKY_SLOPE, OutputKind::Linear, 3).unwrap();
        assert_eq!(a, b);
        let c = MlpModel::init(&[2, 1], DEFAULT_LEAKY_SLOPE, OutputKind::Linear, 4).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn init_rejects_bad_widths() {
        assert!(MlpModel::init(&[3, 0, 1], 0.01, OutputKind::Linear, 0).is_err());
        assert!(MlpModel::init(&[3], 0.01, OutputKind::Linear, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = MlpModel::init(&[3, 4, 1], 0.01, OutputKind::Linear, 1).unwrap();
        let zeros = vec![0.0; m.parameter_count()];
        m.set_parameters(&zeros).unwrap();
        assert_eq!(m.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn affine_layer_is_exact() {
        let m = MlpModel::affine(&[0.5, -1.5, 2.0], 0.25);
        let y = m.predict(&[1.0, 2.0, -0.5]).unwrap()[0];
        assert_eq!(y, 0.5 - 3.0 - 1.0 + 0.25);
        assert_eq!(m.input_gradient(&[9.0, 9.0, 9.0], 0).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn predict_checks_dimension() {
        let m = MlpModel::affine(&[1.0, 1.0], 0.0);
        assert!(matches!(m.predict(&[1.0]), Err(Error::Contract(_))));
        assert!(matches!(m.input_gradient(&[1.0, 2.0], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let m = MlpModel::init(&[3, 5, 2], 0.2, OutputKind::Logits, 9).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: MlpModel = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        let bad = json.replacen("[3,5,2]", "[3,4,2]", 1);
        assert!(serde_json::from_str::<MlpModel>(&bad).is_err());
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let m = MlpModel::init(&[4, 6, 3, 2], 0.05, OutputKind::Logits, 2).unwrap();
        let xs = Matrix::from_rows(&[vec![0.1, -0.3, 2.0, 0.7], vec![-1.0, 0.2, 0.0, 0.4]]).unwrap();
        let mut g = Graph::new();
        let p = m.register(&mut g);
        let xv = g.constant(xs.clone());
        let out = m.forward_graph(&mut g, &p, xv);
        assert_eq!(g.value(out), &m.forward(&xs));
    }
}
