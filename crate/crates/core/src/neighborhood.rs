//! Sampling laws for the local neighborhoods used by evaluation metrics and
//! regularizers. Scales are per-coordinate, in standardized feature units.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Evaluation neighborhood scale.
pub const EVALUATION_SIGMA: f64 = 0.1;
/// Regularization neighborhood scale.
pub const REGULARIZATION_SIGMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodKind {
    /// `x + σ·z`, `z` iid standard normal.
    Gaussian,
    /// iid `Unif(xᵢ − σ, xᵢ + σ)` per coordinate.
    UniformBox,
    /// `x` itself.
    PointMass,
    /// `x` with only `dimension_index` perturbed by `N(0, σ²)`.
    OneDimGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub kind: NeighborhoodKind,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Evaluation,
    Regularization,
}

impl NeighborhoodSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: NeighborhoodKind::Gaussian,
            sigma,
            dimension_index: None,
        }
    }

    pub fn uniform_box(sigma: f64) -> Self {
        Self {
            kind: NeighborhoodKind::UniformBox,
            sigma,
            dimension_index: None,
        }
    }

    pub fn point_mass() -> Self {
        Self {
            kind: NeighborhoodKind::PointMass,
            sigma: 0.0,
            dimension_index: None,
        }
    }

    pub fn one_dim_gaussian(dimension_index: usize, sigma: f64) -> Self {
        Self {
            kind: NeighborhoodKind::OneDimGaussian,
            sigma,
            dimension_index: Some(dimension_index),
        }
    }

    /// Default law for a role: `N(x, 0.1²)` for evaluation, `N(x, 0.5²)` for
    /// regularization.
    pub fn resolve_defaults(role: Role) -> Self {
        match role {
            Role::Evaluation => Self::gaussian(EVALUATION_SIGMA),
            Role::Regularization => Self::gaussian(REGULARIZATION_SIGMA),
        }
    }

    /// Same law on coordinate `index` only, keeping the scale.
    pub fn restricted_to(&self, index: usize) -> Self {
        Self::one_dim_gaussian(index, self.sigma)
    }

    pub fn validate(&self, dimension: usize) -> Result<()> {
        ensure!(
            self.sigma.is_finite() && self.sigma >= 0.0,
            Config,
            "neighborhood scale must be a finite non-negative number, got {}",
            self.sigma
        );
        if self.kind != NeighborhoodKind::PointMass {
            ensure!(
                self.sigma > 0.0,
                Config,
                "{:?} neighborhood needs a positive scale",
                self.kind
            );
        }
        match (self.kind, self.dimension_index) {
            (NeighborhoodKind::OneDimGaussian, Some(k)) => ensure!(
                k < dimension,
                Config,
                "dimension_index {} out of range for {} features",
                k,
                dimension
            ),
            (NeighborhoodKind::OneDimGaussian, None) => ensure!(
                false,
                Config,
                "one_dim_gaussian needs a dimension_index"
            ),
            (_, Some(_)) => ensure!(
                false,
                Config,
                "dimension_index is only meaningful for one_dim_gaussian"
            ),
            (_, None) => {}
        }
        Ok(())
    }

    /// Draw `m` points around `anchor`, one per row.
    pub fn sample(&self, anchor: &[f64], m: usize, rng: &mut Rng) -> Result<Matrix> {
        ensure!(m >= 1, Contract, "need at least one sample");
        self.validate(anchor.len())?;
        let d = anchor.len();
        let mut out = Matrix::zeros(m, d);
        for j in 0..m {
            let row = out.row_mut(j);
            row.copy_from_slice(anchor);
            match self.kind {
                NeighborhoodKind::Gaussian => {
                    for v in row.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += self.sigma * z;
                    }
                }
                NeighborhoodKind::UniformBox => {
                    for v in row.iter_mut() {
                        let u: f64 = rng.random::<f64>();
                        *v += self.sigma * (2.0 * u - 1.0);
                    }
                }
                NeighborhoodKind::PointMass => {}
                NeighborhoodKind::OneDimGaussian => {
                    let k = self.dimension_index.expect("validated");
                    let z: f64 = rng.sample(StandardNormal);
                    row[k] += self.sigma * z;
                }
            }
        }
        Ok(out)
    }
}
