//! Paired t-tests and chi-squared tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

/// Expected cell counts below this make the chi-squared approximation unreliable.
pub const MIN_EXPECTED_COUNT: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    /// Mean of `a − b`.
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired two-sided t-test on `a − b`. `None` with fewer than two pairs, or
/// when all differences equal the same non-zero value (the statistic is then
/// unbounded).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<TTest> {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let n = a.len();
    if n < 2 {
        return None;
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = (n - 1) as f64;
    if var == 0.0 {
        // every difference is the same; only the all-zero case has an answer
        return (mean == 0.0).then_some(TTest { n, mean_diff: 0.0, t: 0.0, df, p_value: 1.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    Some(TTest { n, mean_diff: mean, t, df, p_value: (2.0 * dist.sf(t.abs())).min(1.0) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquaredTest {
    pub statistic: f64,
    pub df: usize,
    pub min_expected: f64,
    /// Withheld when some expected count is below [`MIN_EXPECTED_COUNT`].
    pub p_value: Option<f64>,
}

impl ChiSquaredTest {
    fn new(statistic: f64, df: usize, min_expected: f64) -> Self {
        let p_value = (min_expected >= MIN_EXPECTED_COUNT)
            .then(|| ChiSquared::new(df as f64).expect("df is positive").sf(statistic));
        ChiSquaredTest { statistic, df, min_expected, p_value }
    }
}

/// Pearson goodness-of-fit of `observed` counts against category
/// probabilities `expected`. `None` when there are no observations or fewer
/// than two categories.
pub fn chi_squared_goodness_of_fit(observed: &[f64], expected: &[f64]) -> Option<ChiSquaredTest> {
    assert_eq!(observed.len(), expected.len(), "category counts differ");
    let total: f64 = observed.iter().sum();
    let mass: f64 = expected.iter().sum();
    if observed.len() < 2 || total <= 0.0 || mass <= 0.0 {
        return None;
    }
    let exp: Vec<f64> = expected.iter().map(|p| total * p / mass).collect();
    let statistic = observed.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
    let min_expected = exp.iter().cloned().fold(f64::INFINITY, f64::min);
    Some(ChiSquaredTest::new(statistic, observed.len() - 1, min_expected))
}

/// Pearson test of independence on an `r × c` contingency table. Rows or
/// columns summing to zero are dropped; `None` when fewer than two of either
/// remain.
pub fn chi_squared_independence(table: &[Vec<f64>]) -> Option<ChiSquaredTest> {
    let cols = table.first()?.len();
    assert!(table.iter().all(|r| r.len() == cols), "ragged contingency table");
    let rows: Vec<&Vec<f64>> = table.iter().filter(|r| r.iter().sum::<f64>() > 0.0).collect();
    let keep: Vec<usize> = (0..cols).filter(|&j| rows.iter().map(|r| r[j]).sum::<f64>() > 0.0).collect();
    if rows.len() < 2 || keep.len() < 2 {
        return None;
    }
    let row_sums: Vec<f64> = rows.iter().map(|r| keep.iter().map(|&j| r[j]).sum()).collect();
    let col_sums: Vec<f64> = keep.iter().map(|&j| rows.iter().map(|r| r[j]).sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let mut statistic = 0.0;
    let mut min_expected = f64::INFINITY;
    for (r, rs) in rows.iter().zip(&row_sums) {
        for (&j, cs) in keep.iter().zip(&col_sums) {
            let e = rs * cs / total;
            min_expected = min_expected.min(e);
            statistic += (r[j] - e).powi(2) / e;
        }
    }
    Some(ChiSquaredTest::new(statistic, (rows.len() - 1) * (keep.len() - 1), min_expected))
}
