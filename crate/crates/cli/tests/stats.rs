use expo_cli::significance::paired_t_test;
use expo_cli::study::{analyze, cmd_stats, participants, top_fraction_filter, Outcome, OUTLIER_FRACTION};
use expo_core::explain::LinearExplanation;
use expo_core::task::{Condition, Direction};
use expo_service::log::LogRecord;
use expo_service::{Answers, Preference};

fn shown() -> LinearExplanation {
    LinearExplanation { anchor: vec![0.0], coefficients: vec![1.0], intercept: 0.0, sigma: 0.1, m: 10, output_index: 0 }
}

/// A session whose rounds took `(none, expo)` presses, each ending solved.
fn session(log: &mut Vec<LogRecord>, id: &str, condition_a: Condition, steps: &[(usize, usize)], answers: Option<Answers>) {
    log.push(LogRecord::SessionCreated { session: id.into(), index: log.len() as u64, condition_a, created_at: 0 });
    for (round, &(n, e)) in steps.iter().enumerate() {
        log.push(LogRecord::RoundStarted { session: id.into(), round, round_seed: 0 });
        for (condition, count) in [(Condition::NoneModel, n), (Condition::ExpoModel, e)] {
            for k in 0..count {
                log.push(LogRecord::Step {
                    session: id.into(),
                    round,
                    condition,
                    feature: 0,
                    direction: Direction::Plus,
                    prediction_before: 0.0,
                    prediction_after: 0.0,
                    explanation_shown: shown(),
                    solved: k + 1 == count,
                });
            }
        }
    }
    if let Some(answers) = answers {
        log.push(LogRecord::Questionnaire { session: id.into(), answers });
    }
}

fn answers(u: Preference, e: Preference) -> Option<Answers> {
    Some(Answers { usefulness: u, expectation: e, free_text: None })
}

#[test]
fn outcomes_are_rebuilt_from_the_log() {
    let mut log = Vec::new();
    session(&mut log, "s0", Condition::ExpoModel, &[(3, 2), (5, 1)], answers(Preference::A, Preference::B));
    log.push(LogRecord::RoundStarted { session: "s0".into(), round: 2, round_seed: 0 });
    log.push(LogRecord::Abandoned { session: "s0".into(), round: 2, condition: Condition::NoneModel });
    let ps = participants(&log).unwrap();
    assert_eq!(ps.len(), 1);
    let p = &ps[0];
    assert_eq!(p.rounds.len(), 3);
    assert_eq!((p.rounds[1].none.steps, p.rounds[1].expo.steps), (5, 1));
    assert_eq!(p.rounds[1].none.outcome, Outcome::Solved);
    assert_eq!(p.rounds[2].none.outcome, Outcome::Abandoned);
    assert_eq!(p.rounds[2].expo.outcome, Outcome::Active);
    assert_eq!(p.preferred(Preference::A), Some(Condition::ExpoModel));
    assert_eq!(p.preferred(Preference::B), Some(Condition::NoneModel));

    let orphan = vec![LogRecord::Abandoned { session: "x".into(), round: 0, condition: Condition::NoneModel }];
    assert!(participants(&orphan).is_err());
}

#[test]
fn top_percent_filter_removes_exactly_the_extreme_participant() {
    let mut log = Vec::new();
    for i in 0..30 {
        let base = 3 + i % 7;
        let rounds: Vec<(usize, usize)> = (0..5).map(|r| (base + r % 3, base + (r + 1) % 2)).collect();
        session(&mut log, &format!("p{i}"), Condition::NoneModel, &rounds, None);
    }
    session(&mut log, "extreme", Condition::ExpoModel, &[(4, 5), (90, 6), (5, 5), (4, 4), (6, 5)], None);
    let ps = participants(&log).unwrap();
    // 310 counts → k = ⌈3.1⌉ = 4; the 5th largest is 11, which only 90 exceeds
    let f = top_fraction_filter(&ps, OUTLIER_FRACTION);
    assert_eq!(f.removed, vec!["extreme".to_string()], "{f:?}");
    assert_eq!(f.cutoff, Some(11));
    let report = analyze(&log).unwrap();
    assert_eq!((report.sessions, report.kept), (31, 30));
}

#[test]
fn ties_at_the_boundary_are_kept() {
    let mut log = Vec::new();
    for i in 0..50 {
        session(&mut log, &format!("p{i}"), Condition::NoneModel, &[(10, 10), (10, 3)], None);
    }
    let ps = participants(&log).unwrap();
    assert!(top_fraction_filter(&ps, OUTLIER_FRACTION).removed.is_empty());
}

#[test]
fn report_matches_hand_computed_statistics() {
    let mut log = Vec::new();
    let prefs = [
        (Preference::A, Preference::A),
        (Preference::B, Preference::NoPreference),
        (Preference::A, Preference::B),
        (Preference::NoPreference, Preference::A),
    ];
    let mut none_steps = Vec::new();
    let mut expo_steps = Vec::new();
    for i in 0..40usize {
        let a = if i % 2 == 0 { Condition::ExpoModel } else { Condition::NoneModel };
        let rounds: Vec<(usize, usize)> = (0..5).map(|r| (6 + (i + r) % 5, 4 + (i * r) % 4)).collect();
        let (u, e) = prefs[i % 4];
        session(&mut log, &format!("s{i}"), a, &rounds, answers(u, e));
        for (n, x) in rounds {
            none_steps.push(n as f64);
            expo_steps.push(x as f64);
        }
    }
    let ps = participants(&log).unwrap();
    let filter = top_fraction_filter(&ps, OUTLIER_FRACTION);
    let report = analyze(&log).unwrap();
    assert_eq!(report.outliers, filter);
    assert_eq!(report.kept, 40 - filter.removed.len());

    // recompute by hand over the kept participants
    let kept: Vec<usize> = (0..40).filter(|i| !filter.removed.contains(&format!("s{i}"))).collect();
    let pick = |v: &[f64], i: usize| v[i * 5..i * 5 + 5].to_vec();
    let xs: Vec<f64> = kept.iter().flat_map(|&i| pick(&none_steps, i)).collect();
    let ys: Vec<f64> = kept.iter().flat_map(|&i| pick(&expo_steps, i)).collect();
    let n = xs.len() as f64;
    let d: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = report.steps.t_test.unwrap();
    assert!((t.t - mean / (sd / n.sqrt())).abs() < 1e-9);
    assert_eq!(t, paired_t_test(&xs, &ys).unwrap());

    let mut useful = [0.0; 3];
    let mut expect = [0.0; 3];
    for &i in &kept {
        let a_is_expo = i % 2 == 0;
        let (u, e) = prefs[i % 4];
        for (p, tally) in [(u, &mut useful), (e, &mut expect)] {
            let bucket = match (p, a_is_expo) {
                (Preference::NoPreference, _) => 2,
                (Preference::A, true) | (Preference::B, false) => 0,
                _ => 1,
            };
            tally[bucket] += 1.0;
        }
    }
    let tally = &report.usefulness.tally;
    assert_eq!([tally.expo as f64, tally.none as f64, tally.no_preference as f64], useful);
    let gof = |obs: &[f64; 3]| {
        let e = obs.iter().sum::<f64>() / 3.0;
        obs.iter().map(|o| (o - e).powi(2) / e).sum::<f64>()
    };
    assert!((report.usefulness.goodness_of_fit.unwrap().statistic - gof(&useful)).abs() < 1e-9);
    assert!((report.expectation.goodness_of_fit.unwrap().statistic - gof(&expect)).abs() < 1e-9);
    let total: f64 = useful.iter().sum::<f64>() + expect.iter().sum::<f64>();
    let mut chi = 0.0;
    for row in [&useful, &expect] {
        let rs: f64 = row.iter().sum();
        for j in 0..3 {
            let e = rs * (useful[j] + expect[j]) / total;
            chi += (row[j] - e).powi(2) / e;
        }
    }
    assert!((report.contingency.unwrap().statistic - chi).abs() < 1e-9);
}

#[test]
fn tiny_logs_warn_instead_of_reporting_p_values() {
    let mut log = Vec::new();
    session(&mut log, "only", Condition::NoneModel, &[(4, 3)], answers(Preference::A, Preference::A));
    let report = analyze(&log).unwrap();
    // the lone participant holds the largest count, so the filter empties the study
    assert_eq!(report.kept, 0);
    assert!(report.steps.t_test.is_none());
    assert!(report.warnings.iter().any(|w| w.contains("underpowered")));
    assert!(report.usefulness.goodness_of_fit.is_none());
}

#[test]
fn stats_reads_a_log_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut log = Vec::new();
    for i in 0..12 {
        session(&mut log, &format!("s{i}"), Condition::ExpoModel, &[(5 + i % 3, 3), (6, 4 - i % 2)], answers(Preference::A, Preference::A));
    }
    let text: String = log.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(&path, text).unwrap();
    let out = dir.path().join("stats.json");
    let report = cmd_stats(&path, Some(&out)).unwrap();
    assert_eq!(report, analyze(&log).unwrap());
    let back: expo_cli::StatsReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(back, report);
    assert!(matches!(cmd_stats(&dir.path().join("absent"), None), Err(expo_cli::CliError::Missing(_))));
}
