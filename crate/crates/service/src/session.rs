//! Session state and the operations behind each endpoint, independent of HTTP.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use expo_core::data::{StandardizedDataset, TaskKind};
use expo_core::engine::MlpModel;
use expo_core::explain::Explainer;
use expo_core::rng::SeedStream;
use expo_core::task::{
    apply_step, new_round, Condition, Direction, RoundStatus, TaskRound, TaskSettings,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::log::{read_log, LogRecord, LogWriter};

/// Everything the task needs, loaded once at startup.
#[derive(Clone, Debug)]
pub struct StudyModels {
    pub none: MlpModel,
    pub expo: MlpModel,
    pub dataset: StandardizedDataset,
    pub explainer: Explainer,
    pub task: TaskSettings,
}

impl StudyModels {
    pub fn new(
        none: MlpModel,
        expo: MlpModel,
        dataset: StandardizedDataset,
        explainer: Explainer,
        task: TaskSettings,
    ) -> Result<Self> {
        let bad = |m: String| Err(ServiceError::BadRequest(m));
        if dataset.task_kind != TaskKind::Regression {
            return bad("the task needs a regression dataset".into());
        }
        for (name, m) in [("none", &none), ("expo", &expo)] {
            if m.input_width() != dataset.d() || m.output_width() != 1 {
                return bad(format!(
                    "{name} model maps {} -> {}, dataset has {} features and one target",
                    m.input_width(),
                    m.output_width(),
                    dataset.d()
                ));
            }
        }
        task.validate()?;
        Ok(StudyModels { none, expo, dataset, explainer, task })
    }

    pub fn model(&self, condition: Condition) -> &MlpModel {
        match condition {
            Condition::NoneModel => &self.none,
            Condition::ExpoModel => &self.expo,
        }
    }

    /// Standardized prediction to display price.
    pub fn price(&self, value: f64) -> f64 {
        value * self.dataset.target_std + self.dataset.target_mean
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Root of the assignment and round-seed streams.
    pub seed: u64,
    pub recorded_rounds: usize,
    /// Show only the largest `k` magnitudes; `None` shows every feature.
    pub display_cap: Option<usize>,
    pub log_path: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { seed: 0, recorded_rounds: 5, display_cap: None, log_path: None }
    }
}

/// Panel label as seen by the participant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
    #[serde(rename = "no_preference")]
    NoPreference,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answers {
    pub usefulness: Preference,
    pub expectation: Preference,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
struct RoundPair {
    none: TaskRound,
    expo: TaskRound,
}

impl RoundPair {
    fn get(&self, c: Condition) -> &TaskRound {
        match c {
            Condition::NoneModel => &self.none,
            Condition::ExpoModel => &self.expo,
        }
    }

    fn get_mut(&mut self, c: Condition) -> &mut TaskRound {
        match c {
            Condition::NoneModel => &mut self.none,
            Condition::ExpoModel => &mut self.expo,
        }
    }

    fn done(&self) -> bool {
        !self.none.is_active() && !self.expo.is_active()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    pub index: u64,
    pub condition_a: Condition,
    pub created_at: u64,
    rounds: Vec<RoundPair>,
    pub answers: Option<Answers>,
}

impl Session {
    pub fn condition_of(&self, label: Label) -> Condition {
        match (label, self.condition_a) {
            (Label::A, c) => c,
            (Label::B, Condition::NoneModel) => Condition::ExpoModel,
            (Label::B, Condition::ExpoModel) => Condition::NoneModel,
        }
    }

    pub fn label_of(&self, condition: Condition) -> Label {
        if condition == self.condition_a {
            Label::A
        } else {
            Label::B
        }
    }

    /// The latest round shown for `condition`.
    pub fn current_round(&self, condition: Condition) -> &TaskRound {
        self.rounds.last().expect("sessions start with a round").get(condition)
    }

    pub fn rounds_started(&self) -> usize {
        self.rounds.len()
    }

    /// Step counts and final status of every round, per model.
    pub fn round_outcomes(&self) -> Vec<(Condition, usize, RoundStatus)> {
        self.rounds
            .iter()
            .flat_map(|p| [&p.none, &p.expo])
            .map(|r| (r.condition, r.step_count, r.status))
            .collect()
    }

    fn finished(&self, recorded: usize) -> bool {
        self.rounds.len() >= recorded && self.rounds.last().is_some_and(RoundPair::done)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub label: String,
    /// 1-based item number, the value to send back in a step request.
    pub item: usize,
    /// Expected price change of one press, `δ·|β|` in price units.
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionView {
    pub label: Label,
    pub price: f64,
    pub target_low: f64,
    pub target_high: f64,
    pub items: Vec<ItemView>,
    pub step_count: usize,
    pub status: RoundStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub round: usize,
    pub rounds_total: usize,
    pub finished: bool,
    pub questionnaire_submitted: bool,
    /// Condition A first.
    pub conditions: Vec<ConditionView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub condition: Label,
    pub item: usize,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbandonRequest {
    pub condition: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    #[serde(flatten)]
    pub view: ConditionView,
    pub round: usize,
    pub round_complete: bool,
    /// Index of the round started by this request, if any.
    pub next_round: Option<usize>,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgment {
    pub session_id: String,
    pub status: String,
}

/// Three-bucket preference counts, keyed by model rather than panel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub expo: usize,
    pub none: usize,
    pub no_preference: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub solved_rounds: usize,
    pub abandoned_rounds: usize,
    pub mean_steps: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sessions: usize,
    pub completed: usize,
    pub usefulness: Tally,
    pub expectation: Tally,
    pub none_model: StepSummary,
    pub expo_model: StepSummary,
}

type Shared = Arc<Mutex<Session>>;

pub struct StudyService {
    models: Option<Arc<StudyModels>>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Shared>>,
    next_index: AtomicU64,
    log: Option<Mutex<LogWriter>>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl StudyService {
    /// Start the service, replaying `config.log_path` if it exists.
    pub fn new(models: Option<StudyModels>, config: ServiceConfig) -> Result<Self> {
        if config.recorded_rounds == 0 {
            return Err(ServiceError::BadRequest("recorded_rounds must be at least 1".into()));
        }
        let service = StudyService {
            models: models.map(Arc::new),
            config,
            sessions: RwLock::new(HashMap::new()),
            next_index: AtomicU64::new(0),
            log: None,
        };
        let Some(path) = service.config.log_path.clone() else {
            return Ok(service);
        };
        let records = read_log(&path)?;
        let mut service = service;
        service.replay(&records)?;
        service.log = Some(Mutex::new(LogWriter::open(&path)?));
        log::info!("recovered {} sessions from {}", service.session_count(), path.display());
        Ok(service)
    }

    pub fn is_ready(&self) -> bool {
        self.models.is_some()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn models(&self) -> Result<&StudyModels> {
        self.models.as_deref().ok_or(ServiceError::Unavailable)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    /// A snapshot of one session's full state, signs included.
    pub fn session(&self, id: &str) -> Result<Session> {
        let shared = self.get(id)?;
        let s = lock(&shared).clone();
        Ok(s)
    }

    fn get(&self, id: &str) -> Result<Shared> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no session {id}")))
    }

    fn round_seed(&self, index: u64, round: usize) -> u64 {
        SeedStream::new(self.config.seed).derive(&[index, round as u64]).value()
    }

    fn start_round(&self, index: u64, round: usize) -> Result<(u64, RoundPair)> {
        let m = self.models()?;
        let seed = self.round_seed(index, round);
        let (none, expo) = new_round(&m.none, &m.expo, &m.dataset, &m.explainer, &m.task, seed)?;
        Ok((seed, RoundPair { none, expo }))
    }

    fn append(&self, record: LogRecord) -> Result<()> {
        if let Some(log) = &self.log {
            lock(log).append(&record)?;
        }
        Ok(())
    }

    pub fn create_session(&self) -> Result<SessionView> {
        self.models()?;
        let index = self.next_index.fetch_add(1, Ordering::SeqCst);
        let id = format!("{:032x}", rand::rng().random::<u128>());
        let a_is_expo = SeedStream::new(self.config.seed).child(index).rng().random_bool(0.5);
        let condition_a = if a_is_expo { Condition::ExpoModel } else { Condition::NoneModel };
        let (round_seed, pair) = self.start_round(index, 0)?;
        let created_at = now();
        self.append(LogRecord::SessionCreated { session: id.clone(), index, condition_a, created_at })?;
        self.append(LogRecord::RoundStarted { session: id.clone(), round: 0, round_seed })?;
        let session = Session { id: id.clone(), index, condition_a, created_at, rounds: vec![pair], answers: None };
        let view = self.view(&session)?;
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub fn session_view(&self, id: &str) -> Result<SessionView> {
        let shared = self.get(id)?;
        let s = lock(&shared);
        self.view(&s)
    }

    fn view(&self, s: &Session) -> Result<SessionView> {
        let r = s.rounds.len() - 1;
        let pair = &s.rounds[r];
        let conditions = [Label::A, Label::B]
            .into_iter()
            .map(|l| self.condition_view(l, pair.get(s.condition_of(l))))
            .collect::<Result<_>>()?;
        Ok(SessionView {
            session_id: s.id.clone(),
            round: r,
            rounds_total: self.config.recorded_rounds,
            finished: s.finished(self.config.recorded_rounds),
            questionnaire_submitted: s.answers.is_some(),
            conditions,
        })
    }

    fn displayed_items(&self, round: &TaskRound) -> Result<Vec<ItemView>> {
        let m = self.models()?;
        let mut items: Vec<ItemView> = round
            .displayed_magnitudes()
            .into_iter()
            .enumerate()
            .map(|(i, v)| ItemView { label: format!("Item {}", i + 1), item: i + 1, magnitude: v * m.dataset.target_std })
            .collect();
        if let Some(k) = self.config.display_cap {
            items.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.item.cmp(&b.item)));
            items.truncate(k);
            items.sort_by_key(|i| i.item);
        }
        Ok(items)
    }

    fn condition_view(&self, label: Label, round: &TaskRound) -> Result<ConditionView> {
        let m = self.models()?;
        Ok(ConditionView {
            label,
            price: m.price(round.current_prediction),
            target_low: m.price(round.target_low),
            target_high: m.price(round.target_high),
            items: self.displayed_items(round)?,
            step_count: round.step_count,
            status: round.status,
        })
    }

    fn check_round(&self, s: &Session, round: usize) -> Result<()> {
        let current = s.rounds.len() - 1;
        if round > current {
            return Err(ServiceError::NotFound(format!("round {round} has not started")));
        }
        if round < current {
            return Err(ServiceError::Conflict(format!("round {round} is over; the current round is {current}")));
        }
        Ok(())
    }

    /// Press a button. The new state is logged before it is committed.
    pub fn step(&self, id: &str, round: usize, req: &StepRequest) -> Result<StepResponse> {
        let m = self.models()?;
        let shared = self.get(id)?;
        let mut s = lock(&shared);
        self.check_round(&s, round)?;
        let condition = s.condition_of(req.condition);
        let current = s.rounds[round].get(condition).clone();
        if !current.is_active() {
            return Err(ServiceError::Conflict(format!(
                "condition {:?} of round {round} is {:?}",
                req.condition, current.status
            )));
        }
        let d = current.current_x.len();
        if req.item == 0 || req.item > d {
            return Err(ServiceError::BadRequest(format!("item must lie in 1..={d}, got {}", req.item)));
        }
        if !self.displayed_items(&current)?.iter().any(|i| i.item == req.item) {
            return Err(ServiceError::BadRequest(format!("item {} is not displayed", req.item)));
        }
        let mut next = current;
        let feature = req.item - 1;
        let before = next.current_prediction;
        let shown = apply_step(&mut next, m.model(condition), &m.explainer, feature, req.direction)?;
        self.append(LogRecord::Step {
            session: id.to_owned(),
            round,
            condition,
            feature,
            direction: req.direction,
            prediction_before: before,
            prediction_after: next.current_prediction,
            explanation_shown: shown,
            solved: next.status == RoundStatus::Solved,
        })?;
        *s.rounds[round].get_mut(condition) = next;
        self.after_change(&mut s, round, req.condition)
    }

    pub fn abandon(&self, id: &str, round: usize, req: &AbandonRequest) -> Result<StepResponse> {
        self.models()?;
        let shared = self.get(id)?;
        let mut s = lock(&shared);
        self.check_round(&s, round)?;
        let condition = s.condition_of(req.condition);
        let mut next = s.rounds[round].get(condition).clone();
        next.abandon().map_err(|e| ServiceError::Conflict(e.to_string()))?;
        self.append(LogRecord::Abandoned { session: id.to_owned(), round, condition })?;
        *s.rounds[round].get_mut(condition) = next;
        self.after_change(&mut s, round, req.condition)
    }

    fn after_change(&self, s: &mut Session, round: usize, label: Label) -> Result<StepResponse> {
        let round_complete = s.rounds[round].done();
        let mut next_round = None;
        if round_complete && s.rounds.len() < self.config.recorded_rounds {
            let (round_seed, pair) = self.start_round(s.index, round + 1)?;
            self.append(LogRecord::RoundStarted { session: s.id.clone(), round: round + 1, round_seed })?;
            s.rounds.push(pair);
            next_round = Some(round + 1);
        }
        let view = self.condition_view(label, s.rounds[round].get(s.condition_of(label)))?;
        Ok(StepResponse {
            view,
            round,
            round_complete,
            next_round,
            finished: s.finished(self.config.recorded_rounds),
        })
    }

    pub fn submit_questionnaire(&self, id: &str, answers: Answers) -> Result<Acknowledgment> {
        let shared = self.get(id)?;
        let mut s = lock(&shared);
        if s.answers.is_some() {
            return Err(ServiceError::Conflict("questionnaire already submitted".into()));
        }
        if !s.finished(self.config.recorded_rounds) {
            return Err(ServiceError::Conflict(format!(
                "all {} rounds must be solved or abandoned first",
                self.config.recorded_rounds
            )));
        }
        self.append(LogRecord::Questionnaire { session: id.to_owned(), answers: answers.clone() })?;
        s.answers = Some(answers);
        Ok(Acknowledgment { session_id: id.to_owned(), status: "recorded".into() })
    }

    pub fn aggregate(&self) -> Aggregate {
        let sessions: Vec<Shared> = self.sessions.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        let mut agg = Aggregate { sessions: sessions.len(), ..Aggregate::default() };
        let mut totals = [0usize; 2];
        for shared in sessions {
            let s = lock(&shared);
            for (condition, steps, status) in s.round_outcomes() {
                let (summary, total) = match condition {
                    Condition::NoneModel => (&mut agg.none_model, &mut totals[0]),
                    Condition::ExpoModel => (&mut agg.expo_model, &mut totals[1]),
                };
                match status {
                    RoundStatus::Solved => {
                        summary.solved_rounds += 1;
                        *total += steps;
                    }
                    RoundStatus::Abandoned => summary.abandoned_rounds += 1,
                    RoundStatus::Active => {}
                }
            }
            if let Some(a) = &s.answers {
                agg.completed += 1;
                tally(&mut agg.usefulness, a.usefulness, &s);
                tally(&mut agg.expectation, a.expectation, &s);
            }
        }
        for (summary, total) in [(&mut agg.none_model, totals[0]), (&mut agg.expo_model, totals[1])] {
            if summary.solved_rounds > 0 {
                summary.mean_steps = Some(total as f64 / summary.solved_rounds as f64);
            }
        }
        agg
    }

    fn replay(&mut self, records: &[LogRecord]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let m = self.models.clone().ok_or(ServiceError::Unavailable)?;
        let mut sessions: HashMap<String, Session> = HashMap::new();
        let mut next_index = 0;
        let unknown = |id: &str| ServiceError::Replay(format!("record for unknown session {id}"));
        for record in records {
            match record {
                LogRecord::SessionCreated { session, index, condition_a, created_at } => {
                    next_index = next_index.max(index + 1);
                    sessions.insert(
                        session.clone(),
                        Session {
                            id: session.clone(),
                            index: *index,
                            condition_a: *condition_a,
                            created_at: *created_at,
                            rounds: Vec::new(),
                            answers: None,
                        },
                    );
                }
                LogRecord::RoundStarted { session, round, round_seed } => {
                    let s = sessions.get_mut(session).ok_or_else(|| unknown(session))?;
                    if *round != s.rounds.len() {
                        return Err(ServiceError::Replay(format!("session {session}: round {round} out of order")));
                    }
                    let (none, expo) = new_round(&m.none, &m.expo, &m.dataset, &m.explainer, &m.task, *round_seed)?;
                    s.rounds.push(RoundPair { none, expo });
                }
                LogRecord::Step { session, round, condition, feature, direction, prediction_after, solved, .. } => {
                    let s = sessions.get_mut(session).ok_or_else(|| unknown(session))?;
                    let r = s
                        .rounds
                        .get_mut(*round)
                        .ok_or_else(|| ServiceError::Replay(format!("session {session}: step in unstarted round {round}")))?
                        .get_mut(*condition);
                    apply_step(r, m.model(*condition), &m.explainer, *feature, *direction)?;
                    let got = r.current_prediction;
                    if (got - prediction_after).abs() > 1e-9 * prediction_after.abs().max(1.0) {
                        return Err(ServiceError::Replay(format!(
                            "session {session}: step replays to {got}, log says {prediction_after}"
                        )));
                    }
                    if *solved != (r.status == RoundStatus::Solved) {
                        return Err(ServiceError::Replay(format!("session {session}: solved flag disagrees with replay")));
                    }
                }
                LogRecord::Abandoned { session, round, condition } => {
                    let s = sessions.get_mut(session).ok_or_else(|| unknown(session))?;
                    s.rounds
                        .get_mut(*round)
                        .ok_or_else(|| ServiceError::Replay(format!("session {session}: abandon in unstarted round {round}")))?
                        .get_mut(*condition)
                        .abandon()?;
                }
                LogRecord::Questionnaire { session, answers } => {
                    let s = sessions.get_mut(session).ok_or_else(|| unknown(session))?;
                    s.answers = Some(answers.clone());
                }
            }
        }
        // a crash between the two creation records leaves a session without rounds
        sessions.retain(|id, s| {
            if s.rounds.is_empty() {
                log::warn!("dropping session {id}: no round was logged");
            }
            !s.rounds.is_empty()
        });
        self.next_index.store(next_index, Ordering::SeqCst);
        *self.sessions.get_mut().unwrap_or_else(|e| e.into_inner()) =
            sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
        Ok(())
    }
}

fn tally(t: &mut Tally, p: Preference, s: &Session) {
    let model = match p {
        Preference::A => Some(s.condition_of(Label::A)),
        Preference::B => Some(s.condition_of(Label::B)),
        Preference::NoPreference => None,
    };
    match model {
        Some(Condition::ExpoModel) => t.expo += 1,
        Some(Condition::NoneModel) => t.none += 1,
        None => t.no_preference += 1,
    }
}
