//! Loading, running and saving a session: the sequence shared by the CLI
//! and the HTTP service.

use std::path::{Path, PathBuf};

use serde_json::Value;

use seal_core::agent::{AgentError, ProgressEvent};
use seal_core::prompt::RequestSettings;
use seal_core::provider::{load_replay_fixture, ChatProvider, FixtureError, RecordingProvider};
use seal_core::session::StageName;
use seal_core::{Limits, Mode, Pipeline, ReplayProvider, RunOutcome, Session};

use crate::clock::Clock;
use crate::decode::FileSpecDecoder;
use crate::live::{ConfigError, LiveConfig, LiveProvider};
use crate::store::{write_atomic, Store, StoreError};

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderChoice {
    Replay { fixture: PathBuf },
    Live { config: Option<PathBuf>, record: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    /// A single stage, or the full loop when `None`.
    pub stage: Option<StageName>,
    pub limits: Limits,
    pub mode: Mode,
    pub provider: ProviderChoice,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("fixture {path}: {source}")]
    Fixture { path: PathBuf, source: FixtureError },
    #[error("fixture {path}: {detail}")]
    FixtureUnreadable { path: PathBuf, detail: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl RunError {
    pub fn code(&self) -> &'static str {
        match self {
            RunError::Store(e) => e.code(),
            RunError::Agent(e) => e.code(),
            RunError::Fixture { source, .. } => source.code(),
            RunError::FixtureUnreadable { .. } => "MalformedFixture",
            RunError::Config(e) => e.code(),
        }
    }
}

/// Splits a progress event into the log's `kind` and `payload`.
pub fn event_parts(event: &ProgressEvent) -> (String, Value) {
    let mut value = serde_json::to_value(event).unwrap_or(Value::Null);
    let kind = value
        .as_object_mut()
        .and_then(|m| m.remove("kind"))
        .and_then(|k| k.as_str().map(str::to_string))
        .unwrap_or_else(|| "progress".into());
    (kind, value)
}

/// Runs the pipeline (or one stage) on a stored session under its writer
/// lock. The session is saved whether or not the run succeeds, so failed
/// attempts stay in the transcript.
pub fn run_session(
    store: &Store,
    id: &str,
    request: &RunRequest,
    on_event: &mut dyn FnMut(&ProgressEvent),
) -> Result<(RunOutcome, Session), RunError> {
    let _lock = store.lock(id)?;
    let mut session = store.load(id)?;
    let result = match &request.provider {
        ProviderChoice::Replay { fixture } => {
            let fixture = read_fixture(fixture)?;
            let provider = ReplayProvider::new(fixture).with_consumed(&session.stage_call_counts());
            drive(store, &mut session, request, provider, None, Clock::reproducible(), on_event).0
        }
        ProviderChoice::Live { config, record } => {
            let config = LiveConfig::resolve(config.as_deref())?;
            let settings = Some(config.settings());
            let live = LiveProvider::new(config);
            match record {
                None => drive(store, &mut session, request, live, settings, Clock::Wall, on_event).0,
                Some(path) => {
                    let recorder = RecordingProvider::new(live);
                    let (result, recorder) =
                        drive(store, &mut session, request, recorder, settings, Clock::Wall, on_event);
                    write_atomic(path, recorder.into_fixture().to_json().as_bytes())?;
                    result
                }
            }
        }
    };
    store.save(&session)?;
    match &result {
        Ok(outcome) => store.append_event(id, "run_ended", serde_json::json!({ "outcome": outcome }))?,
        Err(e) => {
            let payload = serde_json::json!({"code": e.code(), "message": e.to_string()});
            store.append_event(id, "run_failed", payload)?
        }
    };
    Ok((result?, session))
}

fn drive<P: ChatProvider>(
    store: &Store,
    session: &mut Session,
    request: &RunRequest,
    provider: P,
    settings: Option<RequestSettings>,
    clock: Clock,
    on_event: &mut dyn FnMut(&ProgressEvent),
) -> (Result<RunOutcome, AgentError>, P) {
    let decoder = FileSpecDecoder;
    let id = session.id.clone();
    let mut log = |event: &ProgressEvent| {
        let (kind, payload) = event_parts(event);
        let _ = store.append_event(&id, &kind, payload);
        on_event(event);
    };
    let mut pipeline = Pipeline::new(provider)
        .with_decoder(&decoder)
        .with_limits(request.limits)
        .with_mode(request.mode)
        .with_timestamp(clock.now())
        .with_events(&mut log);
    if let Some(settings) = settings {
        pipeline = pipeline.with_settings(settings);
    }
    let result = match request.stage {
        Some(stage) => pipeline.run_stage(session, stage),
        None => pipeline.run_pipeline(session),
    };
    (result, pipeline.into_provider())
}

pub fn read_fixture(path: &Path) -> Result<seal_core::ReplayFixture, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::FixtureUnreadable {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    load_replay_fixture(&text).map_err(|source| RunError::Fixture {
        path: path.to_path_buf(),
        source,
    })
}
