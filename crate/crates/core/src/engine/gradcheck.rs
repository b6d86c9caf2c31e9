//! Central finite-difference gradient checking.
//!
//! Leaky-ReLU networks are piecewise smooth. When a kink lies within the step
//! of a coordinate, the central difference measures a chord rather than a
//! derivative. Such coordinates are detected by comparing differences at `h`
//! and `h/2`, which agree to second order on smooth stretches, and are skipped;
//! the count is reported so callers can bound it.

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    /// `(coordinate, analytic, numeric)` for each mismatch.
    pub failures: Vec<(usize, f64, f64)>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped_nonsmooth += other.skipped_nonsmooth;
        self.failures.extend(other.failures);
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }
}

fn agree(a: f64, b: f64, opts: &GradCheckOptions) -> bool {
    (a - b).abs() <= opts.rel_tol * a.abs().max(b.abs()) + opts.abs_tol
}

/// Compare `analytic` against central differences of `f` at `at`.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    at: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    assert_eq!(at.len(), analytic.len(), "gradient length mismatch");
    let mut report = GradCheckReport::default();
    let mut x = at.to_vec();
    let mut central = |x: &mut Vec<f64>, i: usize, h: f64| -> Result<f64> {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x)?;
        x[i] = orig - h;
        let down = f(x)?;
        x[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    for i in 0..at.len() {
        let coarse = central(&mut x, i, opts.step)?;
        let fine = central(&mut x, i, opts.step / 2.0)?;
        // smooth: the two estimates differ by O(h²); a kink shows up as O(1)
        let gate = GradCheckOptions {
            rel_tol: opts.rel_tol / 10.0,
            abs_tol: opts.abs_tol / 10.0,
            ..*opts
        };
        if !agree(coarse, fine, &gate) {
            report.skipped_nonsmooth += 1;
            continue;
        }
        let numeric = coarse;
        let a = analytic[i];
        report.checked += 1;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_tol);
        report.max_rel_error = report.max_rel_error.max(rel);
        if !agree(a, numeric, opts) {
            report.failures.push((i, a, numeric));
        }
    }
    Ok(report)
}
