//! `serve`: the task service over the run's study models.

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use expo_core::explain::Explainer;
use expo_core::task::TaskSettings;
use expo_service::{ServiceConfig, StudyModels, StudyService};

use crate::agent::{load_pair, load_run_pair, StudyModelsOnDisk};
use crate::error::{CliError, Result};

pub fn study_models(pair: StudyModelsOnDisk, explainer: Explainer, task: TaskSettings) -> Result<StudyModels> {
    Ok(StudyModels::new(pair.none.model, pair.expo.model, pair.dataset, explainer, task)?)
}

/// Models named by a run manifest.
pub fn run_study_models(run_dir: &Path) -> Result<StudyModels> {
    let (run, pair) = load_run_pair(run_dir)?;
    study_models(pair, run.task_explainer(), run.task)
}

/// Models from explicit checkpoints; refuses to start when either is missing.
pub fn checkpoint_study_models(
    none: &Path,
    expo: &Path,
    dataset: &Path,
    explainer: Explainer,
    task: TaskSettings,
) -> Result<StudyModels> {
    study_models(load_pair(none, expo, dataset)?, explainer, task)
}

/// Serve on an already bound listener until `shutdown` resolves.
pub async fn serve_listener(
    listener: tokio::net::TcpListener,
    models: StudyModels,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let service = Arc::new(StudyService::new(Some(models), config)?);
    let local = listener.local_addr().map_err(|e| CliError::io("tcp listener", e))?;
    log::info!("serving {} sessions on http://{local}", service.session_count());
    expo_service::serve(listener, service, shutdown)
        .await
        .map_err(|e| CliError::io(format!("tcp://{local}"), e))
}

/// Bind `addr` and serve until `shutdown` resolves. A busy port fails here,
/// before any session is touched.
pub async fn serve_on(
    addr: SocketAddr,
    models: StudyModels,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::io(format!("tcp://{addr}"), e))?;
    serve_listener(listener, models, config, shutdown).await
}

/// Serve until interrupted.
pub fn cmd_serve(addr: SocketAddr, models: StudyModels, config: ServiceConfig) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io("tokio runtime", e))?;
    rt.block_on(serve_on(addr, models, config, async {
        let _ = tokio::signal::ctrl_c().await;
        log::info!("shutting down");
    }))
}
