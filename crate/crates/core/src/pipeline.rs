//! The ingest spine.
//!
//! Frames arrive in timestamp order together with session, label and
//! re-cluster commands on one stream. While a training session is active,
//! frames are only collected; otherwise each frame goes through detection,
//! face identification, context classification, the clustering buffer and the
//! trigger rules. Every mutation of model state goes through [`Pipeline::apply`]
//! or the methods it dispatches to.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{
    cluster_bins, dbscan, geo_bin_opt, ClusterFrame, ClusterReport, DbscanParams, GeoBin, GeoError,
    DEFAULT_EXEMPLARS, DEFAULT_GEO_PRECISION, NOISE,
};
use crate::detection::{face_crops, Detection, DetectionError, DetectionGateway, DetectionKind, ReplayDetections};
use crate::embedding::{normalize, BackendRegistry, Embedding, EmbeddingError, FramePayload, PrecomputedSource, DEFAULT_DIM};
use crate::exec::ExecMode;
use crate::face::{FaceError, FaceRecognizer, FaceTemplate, DEFAULT_MATCH_THRESHOLD, MAX_TEMPLATES};
use crate::imprint::{ContextPrediction, ImprintClassifier, ImprintError, ImprintWarning, ImprintedClass, DEFAULT_UNKNOWN_THRESHOLD};
use crate::labeling::{
    cluster_request_id, context_request_id, face_request_id, make_label_requests, LabelDecision, LabelError, LabelQueue, LabelRequest,
    RequestKind, RequestStatus,
};
use crate::record::{FrameRecord, FrameSource};
use crate::store::StoreSnapshot;
use crate::trigger::{RuleError, TriggerEngine, TriggerEvent, TriggerInput, TriggerRule};
use crate::UNKNOWN_LABEL;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dim: usize,
    pub stub_seed: u64,
    /// Backend for frames that carry bytes and no precomputed embedding.
    pub frame_backend: String,
    pub detection_backend: String,
    pub unknown_threshold: Option<f64>,
    pub face_match_threshold: Option<f64>,
    pub geo_precision: u32,
    pub dbscan: DbscanParams,
    pub exemplars: usize,
    /// Predictions whose top-two cosine gap falls below this become
    /// context review requests. Zero disables them.
    pub review_margin: f64,
    /// Keep raw payload bytes in memory for thumbnails.
    pub retain_payloads: bool,
    pub exec: ExecMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dim: DEFAULT_DIM,
            stub_seed: 0,
            frame_backend: "stub".into(),
            detection_backend: "replay".into(),
            unknown_threshold: Some(DEFAULT_UNKNOWN_THRESHOLD),
            face_match_threshold: Some(DEFAULT_MATCH_THRESHOLD),
            geo_precision: DEFAULT_GEO_PRECISION,
            dbscan: DbscanParams::default(),
            exemplars: DEFAULT_EXEMPLARS,
            review_margin: 0.05,
            retain_payloads: false,
            exec: ExecMode::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("timestamp {got} precedes last accepted timestamp {last}")]
    NonMonotonicTimestamp { last: i64, got: i64 },
    #[error("duplicate frame id `{0}`")]
    DuplicateFrameId(String),
    #[error("a training session is already active")]
    SessionAlreadyActive,
    #[error("no training session is active")]
    NoActiveSession,
    #[error("session label must be non-empty and not the reserved `{UNKNOWN_LABEL}`")]
    EmptyLabel,
    #[error("face session `{0}` collected no frames")]
    EmptySession(String),
    #[error("session must end after it started ({started_at} >= {at})")]
    InvalidSessionEnd { started_at: i64, at: i64 },
    #[error("no pending label request contains `{0}`")]
    NoRequestForFrame(String),
    #[error("embedding for `{0}` is no longer buffered")]
    MissingMember(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Imprint(#[from] ImprintError),
    #[error(transparent)]
    Face(#[from] FaceError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    #[serde(alias = "Context")]
    Context,
    #[serde(alias = "Face")]
    Face,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSession {
    pub session_id: String,
    pub kind: SessionKind,
    pub label: String,
    pub started_at: i64,
    pub ended_at: Option<i64>,
    pub collected_frame_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", content = "session_id", rename_all = "snake_case")]
pub enum Routing {
    Inference,
    Session(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceMatchResult {
    pub crop_id: String,
    pub person: Option<String>,
    /// `None` when no faces are registered yet.
    pub distance: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub embed_ms: f64,
    pub detect_ms: f64,
    pub faces_ms: f64,
    pub classify_ms: f64,
    pub cluster_buffer_ms: f64,
    pub triggers_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineTickResult {
    pub frame_id: String,
    pub captured_at: i64,
    pub routed_to: Routing,
    pub geo_bin: Option<GeoBin>,
    pub detections: Vec<Detection>,
    pub face_matches: Vec<FaceMatchResult>,
    pub context_prediction: Option<ContextPrediction>,
    pub trigger_events: Vec<TriggerEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<StageLatency>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum PipelineWarning {
    LowExampleCount { label: String, count: u64 },
    TemplatesTruncated { person: String, kept: usize, discarded: usize },
    EmptySession { label: String },
}

impl From<ImprintWarning> for PipelineWarning {
    fn from(w: ImprintWarning) -> Self {
        match w {
            ImprintWarning::LowExampleCount { label, count } => PipelineWarning::LowExampleCount { label, count },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum SessionResult {
    Imprinted { label: String, example_count: u64 },
    FaceRegistered { person: String, templates: usize },
    Nothing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub session: TrainingSession,
    pub result: SessionResult,
    pub warnings: Vec<PipelineWarning>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelTarget {
    Request(String),
    /// The pending request whose members include this frame (or face crop).
    Frame(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Frame(Box<FrameRecord>),
    StartSession { kind: SessionKind, label: String, at: i64 },
    StopSession { at: i64 },
    Label { target: LabelTarget, label: Option<String>, dismiss: bool, at: i64 },
    Recluster { at: i64, since: Option<i64> },
    SetRules(Vec<TriggerRule>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "outcome", content = "value", rename_all = "snake_case")]
pub enum CommandOutcome {
    Tick(Box<PipelineTickResult>),
    SessionStarted(TrainingSession),
    SessionStopped(SessionOutcome),
    Labeled(LabelRequest),
    Reclustered(Vec<ClusterReport>),
    RulesSet(usize),
}

#[derive(Clone, Debug)]
struct ActiveSession {
    session: TrainingSession,
    embeddings: Vec<Embedding>,
}

#[derive(Clone, Debug)]
struct BufferedFace {
    crop_id: String,
    captured_at: i64,
    embedding: Embedding,
}

#[derive(Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    backends: BackendRegistry,
    precomputed: PrecomputedSource,
    /// Recorded crop embeddings keyed by base crop id; twins by insertion order.
    crop_vectors: BTreeMap<String, Vec<Option<Embedding>>>,
    replay: ReplayDetections,
    gateway: DetectionGateway,
    classifier: ImprintClassifier,
    faces: FaceRecognizer,
    triggers: TriggerEngine,
    buffer: BTreeMap<GeoBin, Vec<ClusterFrame>>,
    unknown_faces: Vec<BufferedFace>,
    review_frames: BTreeMap<String, Embedding>,
    session: Option<ActiveSession>,
    completed_sessions: Vec<TrainingSession>,
    session_counter: u64,
    queue: LabelQueue,
    reports: Vec<ClusterReport>,
    payloads: BTreeMap<String, Vec<u8>>,
    last_ts: Option<i64>,
    seen: HashSet<String>,
    revision: u64,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        let dim = config.dim;
        Pipeline {
            backends: BackendRegistry::with_defaults(config.stub_seed, dim),
            precomputed: PrecomputedSource::new(dim),
            crop_vectors: BTreeMap::new(),
            replay: ReplayDetections::default(),
            gateway: DetectionGateway::new(),
            classifier: ImprintClassifier::new(dim).with_threshold(config.unknown_threshold),
            faces: FaceRecognizer::new(dim).with_threshold(config.face_match_threshold),
            triggers: TriggerEngine::default(),
            buffer: BTreeMap::new(),
            unknown_faces: Vec::new(),
            review_frames: BTreeMap::new(),
            session: None,
            completed_sessions: Vec::new(),
            session_counter: 0,
            queue: LabelQueue::new(),
            reports: Vec::new(),
            payloads: BTreeMap::new(),
            last_ts: None,
            seen: HashSet::new(),
            revision: 0,
            config,
        }
    }

    /// Rebuilds learned state from a snapshot. Buffers start empty.
    pub fn from_snapshot(config: PipelineConfig, snapshot: StoreSnapshot) -> Result<Self, PipelineError> {
        let mut p = Pipeline::new(config);
        for class in snapshot.classes {
            p.classifier.insert_class(class)?;
        }
        for face in snapshot.faces {
            for t in &face.templates {
                t.check_dim(p.config.dim)?;
            }
            p.faces.insert(face);
        }
        p.triggers.set_rules(snapshot.rules)?;
        p.queue = LabelQueue::with_decisions(snapshot.labels);
        p.revision = snapshot.version;
        Ok(p)
    }

    /// Captures learned state; each call bumps the snapshot version.
    pub fn snapshot(&mut self, created_at: i64) -> StoreSnapshot {
        self.revision += 1;
        StoreSnapshot {
            version: self.revision,
            classes: self.classifier.classes().to_vec(),
            faces: self.faces.faces().to_vec(),
            labels: self.queue.decisions().clone(),
            rules: self.triggers.rules().to_vec(),
            created_at,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn classifier(&self) -> &ImprintClassifier {
        &self.classifier
    }

    pub fn classes(&self) -> &[ImprintedClass] {
        self.classifier.classes()
    }

    pub fn faces(&self) -> &[FaceTemplate] {
        self.faces.faces()
    }

    pub fn recognizer(&self) -> &FaceRecognizer {
        &self.faces
    }

    pub fn rules(&self) -> &[TriggerRule] {
        self.triggers.rules()
    }

    pub fn queue(&self) -> &LabelQueue {
        &self.queue
    }

    pub fn label_requests(&self, status: Option<RequestStatus>) -> Vec<LabelRequest> {
        self.queue.list(status)
    }

    pub fn reports(&self) -> &[ClusterReport] {
        &self.reports
    }

    pub fn active_session(&self) -> Option<&TrainingSession> {
        self.session.as_ref().map(|s| &s.session)
    }

    pub fn completed_sessions(&self) -> &[TrainingSession] {
        &self.completed_sessions
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.last_ts
    }

    pub fn buffer(&self) -> &BTreeMap<GeoBin, Vec<ClusterFrame>> {
        &self.buffer
    }

    pub fn buffered_frames(&self) -> usize {
        self.buffer.values().map(Vec::len).sum()
    }

    /// Raw bytes of a frame, only when payload retention is enabled.
    pub fn payload(&self, frame_id: &str) -> Option<&[u8]> {
        self.payloads.get(frame_id).map(Vec::as_slice)
    }

    pub fn retained_payloads(&self) -> usize {
        self.payloads.len()
    }

    pub fn register_embedding_backend(&mut self, backend: Box<dyn crate::embedding::EmbeddingBackend>) -> Result<(), PipelineError> {
        Ok(self.backends.register(backend)?)
    }

    pub fn register_detection_backend(&mut self, backend: Box<dyn crate::detection::DetectionBackend>) {
        self.gateway.register(backend);
    }

    /// Registers an embedding computed elsewhere for a frame that arrives as bytes.
    pub fn add_precomputed(&mut self, frame_id: impl Into<String>, values: Vec<f64>) -> Result<(), PipelineError> {
        Ok(self.precomputed.insert(frame_id, values)?)
    }

    /// Adds a recorded detection for the replay backend. A face detection may
    /// carry the embedding of its crop.
    pub fn add_detection(&mut self, det: Detection, crop_embedding: Option<Vec<f64>>) -> Result<(), PipelineError> {
        let key = format!("{}#face@{}", det.frame_id, det.bbox);
        let is_face = det.kind == DetectionKind::Face;
        let values = match (is_face, crop_embedding) {
            (true, Some(v)) => Some(normalize_dim(&v, self.config.dim)?),
            _ => None,
        };
        self.replay.ingest(det)?;
        if is_face {
            self.crop_vectors.entry(key).or_default().push(values);
        }
        Ok(())
    }

    pub fn set_rules(&mut self, rules: Vec<TriggerRule>) -> Result<usize, PipelineError> {
        self.triggers.set_rules(rules)?;
        Ok(self.triggers.rules().len())
    }

    pub fn apply(&mut self, command: Command) -> Result<CommandOutcome, PipelineError> {
        match command {
            Command::Frame(record) => self.ingest(*record).map(|t| CommandOutcome::Tick(Box::new(t))),
            Command::StartSession { kind, label, at } => self.start_session(kind, &label, at).map(CommandOutcome::SessionStarted),
            Command::StopSession { at } => self.stop_session(at).map(CommandOutcome::SessionStopped),
            Command::Label { target, label, dismiss, at } => {
                self.label(target, label, dismiss, at).map(CommandOutcome::Labeled)
            }
            Command::Recluster { at, since } => self.recluster(at, since).map(CommandOutcome::Reclustered),
            Command::SetRules(rules) => self.set_rules(rules).map(CommandOutcome::RulesSet),
        }
    }

    fn advance_clock(&mut self, at: i64) -> Result<(), PipelineError> {
        if let Some(last) = self.last_ts {
            if at < last {
                return Err(PipelineError::NonMonotonicTimestamp { last, got: at });
            }
        }
        self.last_ts = Some(at);
        Ok(())
    }

    fn check_clock(&self, at: i64) -> Result<(), PipelineError> {
        match self.last_ts {
            Some(last) if at < last => Err(PipelineError::NonMonotonicTimestamp { last, got: at }),
            _ => Ok(()),
        }
    }

    pub fn start_session(&mut self, kind: SessionKind, label: &str, at: i64) -> Result<TrainingSession, PipelineError> {
        if self.session.is_some() {
            return Err(PipelineError::SessionAlreadyActive);
        }
        if label.trim().is_empty() || label == UNKNOWN_LABEL {
            return Err(PipelineError::EmptyLabel);
        }
        self.advance_clock(at)?;
        self.session_counter += 1;
        let session = TrainingSession {
            session_id: format!("session-{:04}", self.session_counter),
            kind,
            label: label.to_string(),
            started_at: at,
            ended_at: None,
            collected_frame_ids: Vec::new(),
        };
        self.session = Some(ActiveSession { session: session.clone(), embeddings: Vec::new() });
        Ok(session)
    }

    /// Ends the active session and trains from its frames. A face session
    /// without frames is cancelled and reported as [`PipelineError::EmptySession`].
    pub fn stop_session(&mut self, at: i64) -> Result<SessionOutcome, PipelineError> {
        let Some(active) = self.session.as_ref() else {
            return Err(PipelineError::NoActiveSession);
        };
        if at <= active.session.started_at {
            return Err(PipelineError::InvalidSessionEnd { started_at: active.session.started_at, at });
        }
        self.check_clock(at)?;
        let mut active = self.session.take().expect("checked above");
        self.last_ts = Some(at);
        active.session.ended_at = Some(at);
        let label = active.session.label.clone();

        let mut warnings = Vec::new();
        let result = match active.session.kind {
            SessionKind::Context if active.embeddings.is_empty() => {
                warnings.push(PipelineWarning::EmptySession { label });
                SessionResult::Nothing
            }
            SessionKind::Context => match self.classifier.imprint(&label, &active.embeddings, at) {
                Ok(out) => {
                    warnings.extend(out.warning.map(PipelineWarning::from));
                    SessionResult::Imprinted { label, example_count: out.class.example_count }
                }
                Err(e) => {
                    self.completed_sessions.push(active.session);
                    return Err(e.into());
                }
            },
            SessionKind::Face if active.embeddings.is_empty() => {
                self.completed_sessions.push(active.session);
                return Err(PipelineError::EmptySession(label));
            }
            SessionKind::Face => {
                let n = active.embeddings.len();
                let kept = n.min(MAX_TEMPLATES);
                if n > kept {
                    warnings.push(PipelineWarning::TemplatesTruncated { person: label.clone(), kept, discarded: n - kept });
                }
                match self.faces.register_face(&label, &active.embeddings[..kept], at) {
                    Ok(_) => SessionResult::FaceRegistered { person: label, templates: kept },
                    Err(e) => {
                        self.completed_sessions.push(active.session);
                        return Err(e.into());
                    }
                }
            }
        };
        self.completed_sessions.push(active.session.clone());
        Ok(SessionOutcome { session: active.session, result, warnings })
    }

    fn embed_payload(&self, payload: &FramePayload) -> Result<Embedding, PipelineError> {
        if self.precomputed.contains(&payload.frame_id) {
            return Ok(self.precomputed.lookup(&payload.frame_id)?);
        }
        Ok(self.backends.embed(payload, &self.config.frame_backend)?)
    }

    fn embed_crop(&self, crop: &FramePayload) -> Result<Embedding, PipelineError> {
        let (base, n) = match crop.frame_id.rsplit_once('~') {
            Some((b, n)) if n.parse::<usize>().is_ok() => (b, n.parse::<usize>().unwrap_or(0)),
            _ => (crop.frame_id.as_str(), 0),
        };
        if let Some(Some(e)) = self.crop_vectors.get(base).and_then(|v| v.get(n)) {
            return Ok(e.clone());
        }
        self.embed_payload(crop)
    }

    fn embed_record(&self, record: &FrameRecord) -> Result<Embedding, PipelineError> {
        match &record.source {
            FrameSource::Embedding(e) => {
                e.check_dim(self.config.dim)?;
                Ok(e.clone())
            }
            FrameSource::Payload(p) => self.embed_payload(p),
        }
    }

    fn detect(&self, payload: &FramePayload) -> Result<Vec<Detection>, PipelineError> {
        if self.config.detection_backend == "replay" {
            let mut d = self.replay.for_frame(&payload.frame_id).to_vec();
            crate::detection::sort_detections(&mut d);
            return Ok(d);
        }
        Ok(self.gateway.detect(payload, &self.config.detection_backend)?)
    }

    pub fn ingest(&mut self, record: FrameRecord) -> Result<PipelineTickResult, PipelineError> {
        let t0 = Instant::now();
        self.check_clock(record.captured_at)?;
        if self.seen.contains(&record.frame_id) {
            return Err(PipelineError::DuplicateFrameId(record.frame_id.clone()));
        }
        let bin = geo_bin_opt(record.lat, record.lon, self.config.geo_precision)?;
        let embedding = self.embed_record(&record)?;
        let embed_ms = ms(t0);
        let payload = record.payload();

        if let Some(active) = self.session.as_ref() {
            let kind = active.session.kind;
            let sample = match kind {
                SessionKind::Context => embedding,
                SessionKind::Face => self.best_face_crop(&payload)?.unwrap_or(embedding),
            };
            self.accept(&record);
            let active = self.session.as_mut().expect("checked above");
            active.session.collected_frame_ids.push(record.frame_id.clone());
            active.embeddings.push(sample);
            return Ok(PipelineTickResult {
                frame_id: record.frame_id,
                captured_at: record.captured_at,
                routed_to: Routing::Session(active.session.session_id.clone()),
                geo_bin: None,
                detections: Vec::new(),
                face_matches: Vec::new(),
                context_prediction: None,
                trigger_events: Vec::new(),
                latency: Some(StageLatency { embed_ms, total_ms: ms(t0), ..Default::default() }),
            });
        }

        let t = Instant::now();
        let detections = self.detect(&payload)?;
        let detect_ms = ms(t);

        let t = Instant::now();
        let mut face_matches = Vec::new();
        let mut new_unknown = Vec::new();
        for crop in face_crops(&payload, &detections) {
            let e = self.embed_crop(&crop)?;
            let m = if self.faces.is_empty() { None } else { Some(self.faces.identify(&e)?) };
            if m.as_ref().is_none_or(|m| m.person.is_none()) {
                new_unknown.push(BufferedFace { crop_id: crop.frame_id.clone(), captured_at: record.captured_at, embedding: e });
            }
            face_matches.push(FaceMatchResult {
                crop_id: crop.frame_id,
                person: m.as_ref().and_then(|m| m.person.clone()),
                distance: m.map(|m| m.distance),
            });
        }
        let faces_ms = ms(t);

        let t = Instant::now();
        let context_prediction = if self.classifier.is_empty() { None } else { Some(self.classifier.classify(&embedding)?) };
        let classify_ms = ms(t);

        // All fallible work is done; commit the frame.
        self.accept(&record);
        self.unknown_faces.extend(new_unknown);

        let t = Instant::now();
        if let Some(p) = &context_prediction {
            self.maybe_request_review(&record, &bin, p, &embedding);
        }
        self.buffer.entry(bin.clone()).or_default().push(ClusterFrame {
            frame_id: record.frame_id.clone(),
            bin: bin.clone(),
            captured_at: record.captured_at,
            embedding,
        });
        let cluster_buffer_ms = ms(t);

        let t = Instant::now();
        let trigger_events = self.triggers.evaluate(&TriggerInput {
            frame_id: &record.frame_id,
            at: record.captured_at,
            prediction: context_prediction.as_ref(),
            bin: &bin,
            activity: record.activity,
            heart_rate_bpm: record.heart_rate_bpm,
        });
        let triggers_ms = ms(t);

        Ok(PipelineTickResult {
            frame_id: record.frame_id,
            captured_at: record.captured_at,
            routed_to: Routing::Inference,
            geo_bin: Some(bin),
            detections,
            face_matches,
            context_prediction,
            trigger_events,
            latency: Some(StageLatency {
                embed_ms,
                detect_ms,
                faces_ms,
                classify_ms,
                cluster_buffer_ms,
                triggers_ms,
                total_ms: ms(t0),
            }),
        })
    }

    fn accept(&mut self, record: &FrameRecord) {
        self.last_ts = Some(record.captured_at);
        self.seen.insert(record.frame_id.clone());
        if self.config.retain_payloads {
            if let FrameSource::Payload(p) = &record.source {
                if !p.bytes.is_empty() {
                    self.payloads.insert(record.frame_id.clone(), p.bytes.clone());
                }
            }
        }
    }

    fn best_face_crop(&self, payload: &FramePayload) -> Result<Option<Embedding>, PipelineError> {
        let dets = self.detect(payload)?;
        match face_crops(payload, &dets).first() {
            Some(crop) => Ok(Some(self.embed_crop(crop)?)),
            None => Ok(None),
        }
    }

    fn maybe_request_review(&mut self, record: &FrameRecord, bin: &GeoBin, p: &ContextPrediction, e: &Embedding) {
        let (Some(label), Some((_, runner))) = (&p.label, &p.runner_up) else { return };
        if p.similarity - runner >= self.config.review_margin {
            return;
        }
        let request = LabelRequest {
            request_id: context_request_id(&record.frame_id),
            kind: RequestKind::Context,
            exemplar_frame_ids: vec![record.frame_id.clone()],
            bin: Some(bin.clone()),
            status: RequestStatus::Pending,
            suggested_label: Some(label.clone()),
            member_count: 1,
            last_seen: record.captured_at,
            decided_label: None,
        };
        if self.queue.upsert_pending(request, vec![record.frame_id.clone()]) {
            self.review_frames.insert(record.frame_id.clone(), e.clone());
        }
    }

    /// Clusters the buffered frames (optionally only those captured at or
    /// after `since`) and refreshes cluster and face label requests.
    pub fn recluster(&mut self, at: i64, since: Option<i64>) -> Result<Vec<ClusterReport>, PipelineError> {
        self.advance_clock(at)?;
        let bins: BTreeMap<GeoBin, Vec<ClusterFrame>> = self
            .buffer
            .iter()
            .map(|(b, frames)| {
                let kept = frames.iter().filter(|f| since.is_none_or(|s| f.captured_at >= s)).cloned().collect();
                (b.clone(), kept)
            })
            .collect();
        let reports = cluster_bins(&bins, &self.config.dbscan, self.config.exemplars, self.config.exec);

        let mut live = HashSet::new();
        for report in &reports {
            let bin_frames = &bins[&report.bin];
            let by_id: BTreeMap<String, LabelRequest> =
                make_label_requests(report, &self.queue).into_iter().map(|r| (r.request_id.clone(), r)).collect();
            for cluster in &report.clusters {
                let Some(req) = by_id.get(&cluster_request_id(&report.bin, &cluster.medoid_frame_id)) else { continue };
                let medoid = bin_frames.iter().find(|f| f.frame_id == cluster.medoid_frame_id).expect("medoid is buffered");
                let suggested = if self.classifier.is_empty() { None } else { self.classifier.classify(&medoid.embedding)?.label };
                live.insert(req.request_id.clone());
                self.queue.upsert_pending(LabelRequest { suggested_label: suggested, ..req.clone() }, cluster.member_frame_ids.clone());
            }
        }
        self.queue.retain_pending(RequestKind::Cluster, &|id| live.contains(id));

        let mut live_faces = HashSet::new();
        for (req, members) in self.face_requests() {
            live_faces.insert(req.request_id.clone());
            self.queue.upsert_pending(req, members);
        }
        self.queue.retain_pending(RequestKind::Face, &|id| live_faces.contains(id));

        self.reports = reports.clone();
        Ok(reports)
    }

    fn face_requests(&self) -> Vec<(LabelRequest, Vec<String>)> {
        if self.unknown_faces.is_empty() {
            return Vec::new();
        }
        let eps = self.config.face_match_threshold.unwrap_or(DEFAULT_MATCH_THRESHOLD);
        let params = DbscanParams::new(eps, 1).expect("face threshold is positive");
        let pts: Vec<&[f64]> = self.unknown_faces.iter().map(|f| f.embedding.as_slice()).collect();
        let result = dbscan(&pts, &params, self.config.exec);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); result.n_clusters];
        for (i, &l) in result.labels.iter().enumerate() {
            debug_assert_ne!(l, NOISE, "min_pts 1 leaves no noise");
            groups[l as usize].push(i);
        }
        groups
            .into_iter()
            .filter_map(|g| {
                let members: Vec<&[f64]> = g.iter().map(|&i| pts[i]).collect();
                let m = g[crate::cluster::medoid(&members, ExecMode::Sequential)?];
                let crop_ids: Vec<String> = g.iter().map(|&i| self.unknown_faces[i].crop_id.clone()).collect();
                let req = LabelRequest {
                    request_id: face_request_id(&self.unknown_faces[m].crop_id),
                    kind: RequestKind::Face,
                    exemplar_frame_ids: crop_ids.iter().take(self.config.exemplars).cloned().collect(),
                    bin: None,
                    status: RequestStatus::Pending,
                    suggested_label: None,
                    member_count: g.len(),
                    last_seen: g.iter().map(|&i| self.unknown_faces[i].captured_at).max().unwrap_or_default(),
                    decided_label: None,
                };
                (!self.queue.is_decided(&req.request_id)).then_some((req, crop_ids))
            })
            .collect()
    }

    /// Applies a label decision. Cluster labels imprint every member frame
    /// and remove the members from the clustering buffer; face labels register
    /// up to two crops; context labels imprint the reviewed frame.
    pub fn label(&mut self, target: LabelTarget, label: Option<String>, dismiss: bool, at: i64) -> Result<LabelRequest, PipelineError> {
        self.check_clock(at)?;
        let request_id = match target {
            LabelTarget::Request(id) => id,
            LabelTarget::Frame(frame_id) => {
                if self.queue.pending_containing(&frame_id).is_none() {
                    self.recluster(at, None)?;
                }
                self.queue
                    .pending_containing(&frame_id)
                    .map(|r| r.request_id.clone())
                    .ok_or(PipelineError::NoRequestForFrame(frame_id))?
            }
        };
        let decision = LabelDecision { request_id, label, dismiss, decided_at: at };
        let request = self.queue.validate(&decision)?.clone();
        self.last_ts = Some(self.last_ts.map_or(at, |l| l.max(at)));
        if decision.dismiss {
            return Ok(self.queue.mark(decision)?);
        }
        let label = decision.label.clone().expect("validated label");
        let members: Vec<String> = self.queue.members(&request.request_id).unwrap_or_default().to_vec();

        match request.kind {
            RequestKind::Cluster => {
                let embeddings = self.buffered_embeddings(&members)?;
                self.classifier.imprint(&label, &embeddings, at)?;
                let gone: HashSet<&str> = members.iter().map(String::as_str).collect();
                for frames in self.buffer.values_mut() {
                    frames.retain(|f| !gone.contains(f.frame_id.as_str()));
                }
                self.buffer.retain(|_, v| !v.is_empty());
            }
            RequestKind::Face => {
                let mut crops: Vec<&BufferedFace> = self.unknown_faces.iter().filter(|f| members.contains(&f.crop_id)).collect();
                crops.sort_by_key(|f| f.captured_at);
                let templates: Vec<Embedding> = crops.iter().take(MAX_TEMPLATES).map(|f| f.embedding.clone()).collect();
                if templates.is_empty() {
                    return Err(PipelineError::MissingMember(request.request_id));
                }
                self.faces.register_face(&label, &templates, at)?;
                self.unknown_faces.retain(|f| !members.contains(&f.crop_id));
            }
            RequestKind::Context => {
                let frame_id = members.first().cloned().unwrap_or_default();
                let e = self.review_frames.get(&frame_id).cloned().ok_or(PipelineError::MissingMember(frame_id.clone()))?;
                self.classifier.imprint(&label, &[e], at)?;
                self.review_frames.remove(&frame_id);
            }
        }
        Ok(self.queue.mark(decision)?)
    }

    fn buffered_embeddings(&self, frame_ids: &[String]) -> Result<Vec<Embedding>, PipelineError> {
        let index: BTreeMap<&str, &Embedding> = self
            .buffer
            .values()
            .flatten()
            .map(|f| (f.frame_id.as_str(), &f.embedding))
            .collect();
        frame_ids
            .iter()
            .map(|id| index.get(id.as_str()).map(|e| (*e).clone()).ok_or_else(|| PipelineError::MissingMember(id.clone())))
            .collect()
    }
}

fn normalize_dim(values: &[f64], dim: usize) -> Result<Embedding, EmbeddingError> {
    if values.len() != dim {
        return Err(EmbeddingError::DimensionMismatch { expected: dim, actual: values.len() });
    }
    normalize(values)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;

    fn cfg() -> PipelineConfig {
        PipelineConfig { dim: 4, ..Default::default() }
    }

    fn frame(id: &str, at: i64, v: &[f64]) -> FrameRecord {
        FrameRecord::from_embedding(id, at, normalize(v).unwrap()).with_geo(42.0, -71.0)
    }

    fn face_det(frame: &str) -> Detection {
        Detection {
            frame_id: frame.into(),
            kind: DetectionKind::Face,
            label: String::new(),
            confidence: 0.9,
            bbox: BBox { x: 0.1, y: 0.1, w: 0.3, h: 0.3 },
        }
    }

    #[test]
    fn session_frames_skip_inference() {
        let mut p = Pipeline::new(cfg());
        p.start_session(SessionKind::Context, "desk", 0).unwrap();
        let t = p.ingest(frame("a", 1, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(t.routed_to, Routing::Session("session-0001".into()));
        assert_eq!(p.buffered_frames(), 0);
        let out = p.stop_session(2).unwrap();
        assert_eq!(out.result, SessionResult::Imprinted { label: "desk".into(), example_count: 1 });
        assert_eq!(out.warnings, vec![PipelineWarning::LowExampleCount { label: "desk".into(), count: 1 }]);
        let t = p.ingest(frame("b", 3, &[0.9, 0.1, 0.0, 0.0])).unwrap();
        assert_eq!(t.routed_to, Routing::Inference);
        assert_eq!(t.context_prediction.unwrap().label.as_deref(), Some("desk"));
        assert_eq!(p.buffered_frames(), 1);
    }

    #[test]
    fn session_errors() {
        let mut p = Pipeline::new(cfg());
        assert_eq!(p.stop_session(1), Err(PipelineError::NoActiveSession));
        assert_eq!(p.start_session(SessionKind::Context, " ", 1), Err(PipelineError::EmptyLabel));
        p.start_session(SessionKind::Face, "ana", 5).unwrap();
        assert_eq!(p.start_session(SessionKind::Face, "bo", 6), Err(PipelineError::SessionAlreadyActive));
        assert!(matches!(p.stop_session(5), Err(PipelineError::InvalidSessionEnd { .. })));
        assert_eq!(p.stop_session(6), Err(PipelineError::EmptySession("ana".into())));
        assert!(p.active_session().is_none());
        p.start_session(SessionKind::Context, "hall", 7).unwrap();
        let out = p.stop_session(8).unwrap();
        assert_eq!(out.result, SessionResult::Nothing);
        assert!(p.classes().is_empty());
    }

    #[test]
    fn ingest_rejects_bad_frames() {
        let mut p = Pipeline::new(cfg());
        p.ingest(frame("a", 10, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(
            p.ingest(frame("b", 9, &[1.0, 0.0, 0.0, 0.0])),
            Err(PipelineError::NonMonotonicTimestamp { last: 10, got: 9 })
        );
        assert_eq!(p.ingest(frame("a", 11, &[1.0, 0.0, 0.0, 0.0])), Err(PipelineError::DuplicateFrameId("a".into())));
        let wrong = FrameRecord::from_embedding("c", 12, normalize(&[1.0, 0.0]).unwrap());
        assert!(matches!(p.ingest(wrong), Err(PipelineError::Embedding(EmbeddingError::DimensionMismatch { .. }))));
        assert_eq!(p.buffered_frames(), 1);
    }

    #[test]
    fn face_session_uses_crop_and_truncates() {
        let mut p = Pipeline::new(cfg());
        for (i, v) in [[0.0, 0.0, 1.0, 0.0], [0.0, 0.1, 1.0, 0.0], [0.0, 0.0, 1.0, 0.1]].iter().enumerate() {
            p.add_detection(face_det(&format!("s{i}")), Some(v.to_vec())).unwrap();
        }
        p.start_session(SessionKind::Face, "ana", 0).unwrap();
        for i in 0..3 {
            p.ingest(frame(&format!("s{i}"), 1 + i, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        }
        let out = p.stop_session(10).unwrap();
        assert_eq!(out.result, SessionResult::FaceRegistered { person: "ana".into(), templates: 2 });
        assert_eq!(out.warnings, vec![PipelineWarning::TemplatesTruncated { person: "ana".into(), kept: 2, discarded: 1 }]);
        assert_eq!(p.faces()[0].templates[0].as_slice(), &[0.0, 0.0, 1.0, 0.0]);

        p.add_detection(face_det("q"), Some(vec![0.0, 0.05, 1.0, 0.0])).unwrap();
        let t = p.ingest(frame("q", 11, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(t.face_matches.len(), 1);
        assert_eq!(t.face_matches[0].person.as_deref(), Some("ana"));
    }

    #[test]
    fn cluster_label_imprints_members_and_drains_buffer() {
        let mut p = Pipeline::new(PipelineConfig { dbscan: DbscanParams::new(0.5, 3).unwrap(), ..cfg() });
        for i in 0..5 {
            p.ingest(frame(&format!("k{i}"), i, &[1.0, 0.02 * i as f64, 0.0, 0.0])).unwrap();
        }
        for i in 0..4 {
            p.ingest(frame(&format!("o{i}"), 10 + i, &[0.0, 0.0, 0.0, 1.0 + 0.01 * i as f64])).unwrap();
        }
        let reports = p.recluster(20, None).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].clusters.len(), 2);
        assert_eq!(p.label_requests(Some(RequestStatus::Pending)).len(), 2);

        let done = p.label(LabelTarget::Frame("k3".into()), Some("kitchen".into()), false, 21).unwrap();
        assert_eq!(done.status, RequestStatus::Labeled);
        assert_eq!(p.classes()[0].example_count, 5);
        assert_eq!(p.buffered_frames(), 4);
        assert!(matches!(
            p.label(LabelTarget::Request(done.request_id.clone()), Some("x".into()), false, 22),
            Err(PipelineError::Label(LabelError::NotPending(_)))
        ));

        let pending = p.label_requests(Some(RequestStatus::Pending));
        assert_eq!(pending.len(), 1);
        p.label(LabelTarget::Request(pending[0].request_id.clone()), None, true, 23).unwrap();
        assert_eq!(p.classes().len(), 1);
        // re-clustering keeps decided requests decided
        p.recluster(24, None).unwrap();
        assert!(p.label_requests(Some(RequestStatus::Pending)).is_empty());
    }

    #[test]
    fn unknown_faces_become_requests() {
        let mut p = Pipeline::new(cfg());
        for i in 0..3 {
            p.add_detection(face_det(&format!("f{i}")), Some(vec![0.0, 1.0, 0.01 * i as f64, 0.0])).unwrap();
            p.ingest(frame(&format!("f{i}"), i, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        }
        p.recluster(5, None).unwrap();
        let faces: Vec<_> =
            p.label_requests(Some(RequestStatus::Pending)).into_iter().filter(|r| r.kind == RequestKind::Face).collect();
        assert_eq!(faces.len(), 1);
        assert_eq!(faces[0].member_count, 3);
        p.label(LabelTarget::Request(faces[0].request_id.clone()), Some("bo".into()), false, 6).unwrap();
        assert_eq!(p.faces()[0].templates.len(), 2);
        p.add_detection(face_det("g"), Some(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        let t = p.ingest(frame("g", 7, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(t.face_matches[0].person.as_deref(), Some("bo"));
    }

    #[test]
    fn snapshot_restores_learned_state() {
        let mut p = Pipeline::new(cfg());
        p.start_session(SessionKind::Context, "desk", 0).unwrap();
        p.ingest(frame("a", 1, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        p.stop_session(2).unwrap();
        let snap = p.snapshot(3);
        assert_eq!(snap.version, 1);
        let mut q = Pipeline::from_snapshot(cfg(), snap.clone()).unwrap();
        assert_eq!(q.classes(), p.classes());
        assert_eq!(q.snapshot(4).version, 2);
    }

    #[test]
    fn payload_retention_is_opt_in() {
        let rec = FrameRecord::from_payload(FramePayload::new("p", b"jpeg".to_vec(), 1));
        let mut off = Pipeline::new(cfg());
        off.ingest(rec.clone()).unwrap();
        assert_eq!(off.payload("p"), None);
        let mut on = Pipeline::new(PipelineConfig { retain_payloads: true, ..cfg() });
        on.ingest(rec).unwrap();
        assert_eq!(on.payload("p"), Some(&b"jpeg"[..]));
    }
}
