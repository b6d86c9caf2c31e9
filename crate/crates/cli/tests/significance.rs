use expo_cli::significance::{chi_squared_goodness_of_fit, chi_squared_independence, paired_t_test};
use proptest::prelude::*;

#[test]
fn paired_t_matches_hand_calculation() {
    // differences 1, 0, 3, 1, 3: mean 1.6, sample variance 1.8, se 0.6
    let t = paired_t_test(&[5.0, 7.0, 9.0, 6.0, 8.0], &[4.0, 7.0, 6.0, 5.0, 5.0]).unwrap();
    assert_eq!((t.n, t.df), (5, 4.0));
    assert!((t.mean_diff - 1.6).abs() < 1e-12);
    assert!((t.t - 8.0 / 3.0).abs() < 1e-12);
    // Student t with 4 df: F(t) = 1/2 + (3/8) u (1 − u²/12), u = t/√(1 + t²/4)
    // at the point itself u = 8/3 / √(25/9) = 1.6, so p = 1 − (3/4)(1.6)(1 − 2.56/12)
    let u: f64 = 1.6;
    let p = 1.0 - 0.75 * u * (1.0 - u * u / 12.0);
    assert!((t.p_value - p).abs() < 1e-9, "{} vs {p}", t.p_value);
    assert!((p - 0.056).abs() < 1e-12);
}

#[test]
fn two_pairs_follow_the_cauchy_tail() {
    // one degree of freedom: two-sided p = 1 − (2/π) atan|t|
    let t = paired_t_test(&[3.0, 1.0], &[0.5, 0.0]).unwrap();
    let diffs = [2.5f64, 1.0];
    let mean: f64 = 1.75;
    let sd = ((diffs[0] - mean) * (diffs[0] - mean) + (diffs[1] - mean) * (diffs[1] - mean)).sqrt();
    let expected_t = mean / (sd / 2f64.sqrt());
    assert!((t.t - expected_t).abs() < 1e-12);
    let p = 1.0 - 2.0 / std::f64::consts::PI * expected_t.atan();
    assert!((t.p_value - p).abs() < 1e-9);
}

#[test]
fn degenerate_samples() {
    assert!(paired_t_test(&[1.0], &[0.0]).is_none());
    assert!(paired_t_test(&[2.0, 3.0], &[1.0, 2.0]).is_none());
    let same = paired_t_test(&[2.0, 3.0, 4.0], &[2.0, 3.0, 4.0]).unwrap();
    assert_eq!((same.t, same.p_value), (0.0, 1.0));
}

#[test]
fn identical_step_distributions_are_not_significant() {
    // same multiset, different pairing
    let a = [4.0, 7.0, 5.0, 9.0, 6.0, 8.0, 5.0, 7.0];
    let b = [7.0, 4.0, 9.0, 5.0, 8.0, 6.0, 7.0, 5.0];
    let t = paired_t_test(&a, &b).unwrap();
    assert!(t.p_value > 0.5, "{t:?}");
}

#[test]
fn textbook_contingency_table() {
    // row sums 100, 100; column sums 50, 60, 90 → expected 25, 30, 45 per row
    let c = chi_squared_independence(&[vec![20.0, 30.0, 50.0], vec![30.0, 30.0, 40.0]]).unwrap();
    let hand = 2.0 * (25.0 / 25.0 + 0.0 / 30.0 + 25.0 / 45.0);
    assert!((c.statistic - hand).abs() < 1e-9);
    assert_eq!(c.df, 2);
    // with two degrees of freedom the chi-squared tail is exp(−x/2)
    assert!((c.p_value.unwrap() - (-hand / 2.0).exp()).abs() < 1e-9);
    assert_eq!(c.min_expected, 25.0);
}

#[test]
fn goodness_of_fit_against_uniform() {
    let g = chi_squared_goodness_of_fit(&[30.0, 12.0, 18.0], &[1.0, 1.0, 1.0]).unwrap();
    let hand = (100.0 + 64.0 + 4.0) / 20.0;
    assert!((g.statistic - hand).abs() < 1e-12);
    assert!((g.p_value.unwrap() - (-hand / 2.0).exp()).abs() < 1e-9);
    assert!(chi_squared_goodness_of_fit(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).is_none());
}

#[test]
fn small_expected_counts_withhold_the_p_value() {
    let g = chi_squared_goodness_of_fit(&[3.0, 1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap();
    assert!(g.p_value.is_none() && g.statistic > 0.0);
    // an empty column is dropped rather than divided by
    let c = chi_squared_independence(&[vec![10.0, 0.0, 10.0], vec![12.0, 0.0, 8.0]]).unwrap();
    assert_eq!(c.df, 1);
}

proptest! {
    #[test]
    fn t_is_antisymmetric_and_p_is_a_probability(pairs in proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0), 3..40)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if let Some(t) = paired_t_test(&a, &b) {
            let r = paired_t_test(&b, &a).unwrap();
            prop_assert!((t.t + r.t).abs() < 1e-9);
            prop_assert!((t.p_value - r.p_value).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&t.p_value));
        }
    }

    #[test]
    fn chi_squared_is_zero_on_proportional_tables(row in proptest::collection::vec(1.0f64..50.0, 2..5), k in 2.0f64..5.0) {
        let other: Vec<f64> = row.iter().map(|v| v * k).collect();
        let c = chi_squared_independence(&[row, other]).unwrap();
        prop_assert!(c.statistic.abs() < 1e-9);
    }
}
