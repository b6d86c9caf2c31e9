//! The side-by-side task as an HTTP service.
//!
//! Participants see two panels, Condition A and Condition B, backed by the
//! unregularized and the explanation-regularized model in a per-session random
//! order. Responses carry only anonymous item labels and non-negative
//! magnitudes in price units; coefficient signs and column names stay on the
//! server. All state changes go to an append-only log first, and the log is
//! replayed on startup.

pub mod api;
pub mod error;
pub mod log;
pub mod session;

pub use api::{router, serve, Health};
pub use error::{ErrorBody, Result, ServiceError};
pub use session::{
    AbandonRequest, Acknowledgment, Aggregate, Answers, ConditionView, ItemView, Label,
    Preference, ServiceConfig, Session, SessionView, StepRequest, StepResponse, StepSummary,
    StudyModels, StudyService, Tally,
};
