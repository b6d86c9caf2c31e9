//! `stats`: significance tests over a study log.
//!
//! Participants with any round in the top 1% of step counts are removed
//! first. Steps are compared with a paired t-test over rounds that both
//! conditions solved; each questionnaire item's three-way tally (ExpO, None,
//! no preference) gets a chi-squared goodness-of-fit test against a uniform
//! split, and the two items together a 2×3 test of independence.

use std::collections::HashMap;
use std::path::Path;

use expo_core::task::Condition;
use expo_service::log::{read_log, LogRecord};
use expo_service::{Answers, Preference, Tally};
use serde::{Deserialize, Serialize};

use crate::artifacts::write_json;
use crate::error::{CliError, Result};
use crate::significance::{
    chi_squared_goodness_of_fit, chi_squared_independence, paired_t_test, ChiSquaredTest, TTest,
    MIN_EXPECTED_COUNT,
};

/// Share of the largest step counts treated as outliers.
pub const OUTLIER_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    #[default]
    Active,
    Solved,
    Abandoned,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub steps: usize,
    pub outcome: Outcome,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub none: ConditionOutcome,
    pub expo: ConditionOutcome,
}

impl RoundOutcome {
    fn get_mut(&mut self, c: Condition) -> &mut ConditionOutcome {
        match c {
            Condition::NoneModel => &mut self.none,
            Condition::ExpoModel => &mut self.expo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub session: String,
    pub condition_a: Condition,
    pub rounds: Vec<RoundOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Answers>,
}

impl Participant {
    /// Which model a questionnaire answer points at.
    pub fn preferred(&self, p: Preference) -> Option<Condition> {
        let other = match self.condition_a {
            Condition::NoneModel => Condition::ExpoModel,
            Condition::ExpoModel => Condition::NoneModel,
        };
        match p {
            Preference::A => Some(self.condition_a),
            Preference::B => Some(other),
            Preference::NoPreference => None,
        }
    }
}

/// Rebuild per-participant outcomes from log records, in creation order.
pub fn participants(records: &[LogRecord]) -> Result<Vec<Participant>> {
    let mut order = Vec::new();
    let mut by_id: HashMap<String, Participant> = HashMap::new();
    let unknown = |s: &str| CliError::Config(format!("log mentions unknown session {s}"));
    for rec in records {
        match rec {
            LogRecord::SessionCreated { session, condition_a, .. } => {
                order.push(session.clone());
                by_id.insert(
                    session.clone(),
                    Participant { session: session.clone(), condition_a: *condition_a, rounds: Vec::new(), answers: None },
                );
            }
            LogRecord::RoundStarted { session, round, .. } => {
                let p = by_id.get_mut(session).ok_or_else(|| unknown(session))?;
                if *round != p.rounds.len() {
                    return Err(CliError::Config(format!("session {session}: round {round} out of order")));
                }
                p.rounds.push(RoundOutcome::default());
            }
            LogRecord::Step { session, round, condition, solved, .. } => {
                let p = by_id.get_mut(session).ok_or_else(|| unknown(session))?;
                let c = p
                    .rounds
                    .get_mut(*round)
                    .ok_or_else(|| CliError::Config(format!("session {session}: step in unstarted round {round}")))?
                    .get_mut(*condition);
                c.steps += 1;
                if *solved {
                    c.outcome = Outcome::Solved;
                }
            }
            LogRecord::Abandoned { session, round, condition } => {
                let p = by_id.get_mut(session).ok_or_else(|| unknown(session))?;
                if let Some(r) = p.rounds.get_mut(*round) {
                    r.get_mut(*condition).outcome = Outcome::Abandoned;
                }
            }
            LogRecord::Questionnaire { session, answers } => {
                by_id.get_mut(session).ok_or_else(|| unknown(session))?.answers = Some(answers.clone());
            }
        }
    }
    Ok(order.into_iter().map(|id| by_id.remove(&id).expect("recorded above")).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierFilter {
    /// Step counts strictly above this are outliers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<usize>,
    pub removed: Vec<String>,
}

/// Flag every participant with a (round, condition) step count in the top
/// `fraction` of all such counts. With `N` counts and `k = ⌈fraction·N⌉`,
/// a count is an outlier when it exceeds the `(k+1)`-th largest, so a tie
/// straddling the boundary keeps its rounds rather than removing them all.
pub fn top_fraction_filter(participants: &[Participant], fraction: f64) -> OutlierFilter {
    let mut counts: Vec<usize> = participants
        .iter()
        .flat_map(|p| p.rounds.iter().flat_map(|r| [r.none.steps, r.expo.steps]))
        .collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let k = ((fraction * counts.len() as f64).ceil() as usize).max(1);
    let Some(&cutoff) = counts.get(k) else {
        return OutlierFilter::default();
    };
    let removed = participants
        .iter()
        .filter(|p| p.rounds.iter().any(|r| r.none.steps.max(r.expo.steps) > cutoff))
        .map(|p| p.session.clone())
        .collect();
    OutlierFilter { cutoff: Some(cutoff), removed }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepComparison {
    pub paired_rounds: usize,
    pub mean_none: f64,
    pub mean_expo: f64,
    pub abandoned_none: usize,
    pub abandoned_expo: usize,
    /// On none − expo steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_test: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceResult {
    pub tally: Tally,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goodness_of_fit: Option<ChiSquaredTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub sessions: usize,
    pub kept: usize,
    pub outliers: OutlierFilter,
    pub steps: StepComparison,
    pub usefulness: PreferenceResult,
    pub expectation: PreferenceResult,
    /// Rows usefulness, expectation; columns ExpO, None, no preference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contingency: Option<ChiSquaredTest>,
    pub warnings: Vec<String>,
}

fn tally(kept: &[&Participant], pick: fn(&Answers) -> Preference) -> Tally {
    let mut t = Tally::default();
    for p in kept {
        if let Some(a) = &p.answers {
            match p.preferred(pick(a)) {
                Some(Condition::ExpoModel) => t.expo += 1,
                Some(Condition::NoneModel) => t.none += 1,
                None => t.no_preference += 1,
            }
        }
    }
    t
}

fn counts(t: &Tally) -> Vec<f64> {
    vec![t.expo as f64, t.none as f64, t.no_preference as f64]
}

pub fn analyze(records: &[LogRecord]) -> Result<StatsReport> {
    let all = participants(records)?;
    let outliers = top_fraction_filter(&all, OUTLIER_FRACTION);
    let kept: Vec<&Participant> = all.iter().filter(|p| !outliers.removed.contains(&p.session)).collect();
    let mut warnings = Vec::new();

    let rounds: Vec<&RoundOutcome> = kept.iter().flat_map(|p| &p.rounds).collect();
    let both: Vec<&&RoundOutcome> =
        rounds.iter().filter(|r| r.none.outcome == Outcome::Solved && r.expo.outcome == Outcome::Solved).collect();
    let xs: Vec<f64> = both.iter().map(|r| r.none.steps as f64).collect();
    let ys: Vec<f64> = both.iter().map(|r| r.expo.steps as f64).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let t_test = paired_t_test(&xs, &ys);
    if t_test.is_none() {
        warnings.push(format!(
            "underpowered: {} paired rounds with usable variance; no t-test p-value reported",
            both.len()
        ));
    }
    let abandoned = |f: fn(&RoundOutcome) -> Outcome| rounds.iter().filter(|r| f(r) == Outcome::Abandoned).count();
    let steps = StepComparison {
        paired_rounds: both.len(),
        mean_none: mean(&xs),
        mean_expo: mean(&ys),
        abandoned_none: abandoned(|r| r.none.outcome),
        abandoned_expo: abandoned(|r| r.expo.outcome),
        t_test,
    };

    let mut preference = |name: &str, t: Tally| {
        let gof = chi_squared_goodness_of_fit(&counts(&t), &[1.0, 1.0, 1.0]);
        match &gof {
            None => warnings.push(format!("underpowered: no {name} answers")),
            Some(g) if g.p_value.is_none() => warnings.push(format!(
                "underpowered: {name} expected count {:.2} is below {MIN_EXPECTED_COUNT}; p-value withheld",
                g.min_expected
            )),
            _ => {}
        }
        PreferenceResult { tally: t, goodness_of_fit: gof }
    };
    let usefulness = preference("usefulness", tally(&kept, |a| a.usefulness));
    let expectation = preference("expectation", tally(&kept, |a| a.expectation));
    let contingency = chi_squared_independence(&[counts(&usefulness.tally), counts(&expectation.tally)]);
    if contingency.is_some_and(|c| c.p_value.is_none()) {
        warnings.push("underpowered: contingency table has small expected counts; p-value withheld".into());
    }

    Ok(StatsReport {
        sessions: all.len(),
        kept: kept.len(),
        outliers,
        steps,
        usefulness,
        expectation,
        contingency,
        warnings,
    })
}

pub fn cmd_stats(log_path: &Path, output: Option<&Path>) -> Result<StatsReport> {
    if !log_path.exists() {
        return Err(CliError::Missing(log_path.into()));
    }
    let records = read_log(log_path)?;
    let report = analyze(&records)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if let Some(out) = output {
        write_json(out, &report)?;
    }
    Ok(report)
}
