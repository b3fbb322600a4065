//! HTTP API over a running pipeline: the labeling queue, learned classes and
//! faces, training sessions, reminder rules and a live trigger event stream.
//!
//! Every success body is `{"schema_version":1,"data":...}`; failures are
//! `{"schema_version":1,"error":{"code":...,"message":...}}`.

mod error;
mod routes;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::RwLock;
use pal_core::manifest::{Manifest, ManifestLine, SchemaError};
use pal_core::pipeline::{Command, CommandOutcome, Pipeline, PipelineTickResult, Routing};
use pal_core::replay::CommandFailure;
use pal_core::store;
use pal_core::trigger::TriggerEvent;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

pub use error::ApiError;
pub use routes::{router, ClassView, FaceView, StatusView};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7431;

const EVENT_CAPACITY: usize = 1024;

struct Inner {
    pipeline: RwLock<Pipeline>,
    events: broadcast::Sender<TriggerEvent>,
    state_path: Option<PathBuf>,
}

/// Shared handle to the pipeline behind the API.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(pipeline: Pipeline) -> Self {
        Self::build(pipeline, None)
    }

    /// Saves a snapshot to `path` after every change to learned state.
    pub fn with_state_path(pipeline: Pipeline, path: impl Into<PathBuf>) -> Self {
        Self::build(pipeline, Some(path.into()))
    }

    fn build(pipeline: Pipeline, state_path: Option<PathBuf>) -> Self {
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        AppState { inner: Arc::new(Inner { pipeline: RwLock::new(pipeline), events, state_path }) }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<TriggerEvent> {
        self.inner.events.subscribe()
    }

    pub fn read<R>(&self, f: impl FnOnce(&Pipeline) -> R) -> R {
        f(&self.inner.pipeline.read())
    }

    pub fn apply(&self, command: Command) -> Result<CommandOutcome, ApiError> {
        self.apply_with(|_| Ok(command))
    }

    /// Builds a command from the current pipeline state and applies it under
    /// one write lock. Trigger events are broadcast to subscribers.
    pub fn apply_with(
        &self,
        build: impl FnOnce(&Pipeline) -> Result<Command, ApiError>,
    ) -> Result<CommandOutcome, ApiError> {
        let mut p = self.inner.pipeline.write();
        let command = build(&p)?;
        let outcome = p.apply(command)?;
        match &outcome {
            CommandOutcome::Tick(t) => {
                for e in &t.trigger_events {
                    let _ = self.inner.events.send(e.clone());
                }
            }
            CommandOutcome::SessionStopped(_) | CommandOutcome::Labeled(_) | CommandOutcome::RulesSet(_) => {
                self.persist(&mut p)?;
            }
            CommandOutcome::SessionStarted(_) | CommandOutcome::Reclustered(_) => {}
        }
        Ok(outcome)
    }

    /// Applies a manifest batch line by line. A frame that fails stops the
    /// batch; other rejected lines are listed and the batch continues.
    pub fn ingest_manifest(&self, manifest: &Manifest) -> Result<IngestSummary, ApiError> {
        let mut summary =
            IngestSummary { lines: manifest.lines.len(), detections: 0, ticks: Vec::new(), trigger_events: Vec::new(), failures: Vec::new() };
        for (i, line) in manifest.lines.iter().enumerate() {
            let at_line = i + 1;
            let schema = |message| SchemaError { line: at_line, message };
            if let ManifestLine::Detection(d) = line {
                let crop = d.crop_embedding().map_err(schema)?;
                self.inner
                    .pipeline
                    .write()
                    .add_detection(d.detection.clone(), crop)
                    .map_err(|source| ApiError::Ingest { line: at_line, applied: i, source })?;
                summary.detections += 1;
                continue;
            }
            let command = line.to_command().map_err(schema)?.expect("not a detection");
            let is_frame = matches!(command, Command::Frame(_));
            match self.apply(command) {
                Ok(CommandOutcome::Tick(t)) => {
                    summary.ticks.push(TickSummary::from(&*t));
                    summary.trigger_events.extend(t.trigger_events);
                }
                Ok(_) => {}
                Err(ApiError::Pipeline(source)) if is_frame => return Err(ApiError::Ingest { line: at_line, applied: i, source }),
                Err(ApiError::Pipeline(e)) => summary.failures.push(CommandFailure { record: at_line, error: e.to_string() }),
                Err(e) => return Err(e),
            }
        }
        Ok(summary)
    }

    fn persist(&self, p: &mut Pipeline) -> Result<(), ApiError> {
        if let Some(path) = &self.inner.state_path {
            let at = p.last_timestamp().unwrap_or_default();
            store::save(path, &p.snapshot(at))?;
        }
        Ok(())
    }

    /// Writes a snapshot now, if a state path is configured.
    pub fn save(&self) -> Result<(), ApiError> {
        self.persist(&mut self.inner.pipeline.write())
    }
}

/// What inference made of one ingested frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickSummary {
    pub frame_id: String,
    pub routed_to: Routing,
    /// `None` for session frames and rejected predictions.
    pub context_label: Option<String>,
    pub similarity: Option<f64>,
    /// One entry per face crop; `None` when nobody matched.
    pub people: Vec<Option<String>>,
}

impl From<&PipelineTickResult> for TickSummary {
    fn from(t: &PipelineTickResult) -> Self {
        TickSummary {
            frame_id: t.frame_id.clone(),
            routed_to: t.routed_to.clone(),
            context_label: t.context_prediction.as_ref().and_then(|p| p.label.clone()),
            similarity: t.context_prediction.as_ref().map(|p| p.similarity),
            people: t.face_matches.iter().map(|m| m.person.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub lines: usize,
    pub detections: usize,
    pub ticks: Vec<TickSummary>,
    pub trigger_events: Vec<TriggerEvent>,
    /// Non-frame lines that were rejected; the rest of the batch still ran.
    pub failures: Vec<CommandFailure>,
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
