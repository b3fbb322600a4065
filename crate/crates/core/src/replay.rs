//! Replays a manifest through the pipeline and scores the result.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{EngineConfig, EvalThresholds};
use crate::detection::{Detection, DetectionKind};
use crate::labeling::RequestStatus;
use crate::manifest::{Manifest, ManifestLine, SchemaError};
use crate::metrics::{adjusted_rand_index, classification_report, latency_summary, purity, ClassificationReport, LatencySummary};
use crate::pipeline::{Pipeline, PipelineError, PipelineTickResult, PipelineWarning, Routing};
use crate::UNKNOWN_LABEL;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    /// `record` is the 1-based position among the manifest's records.
    #[error("record {record}: {source}")]
    Pipeline { record: usize, source: PipelineError },
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReplayOptions {
    /// Keep per-stage timings in the trace and report. Timings vary between
    /// runs, so byte-identical output requires leaving this off.
    pub include_latency: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceEval {
    pub known_probes: usize,
    pub unknown_probes: usize,
    /// Share of known probes matched to their planted identity.
    pub accuracy: Option<f64>,
    /// Share of unknown probes that matched nobody.
    pub unknown_rejection_rate: Option<f64>,
    pub report: Option<ClassificationReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEval {
    /// Frames with a planted cluster that were still buffered at the end.
    pub frames: usize,
    pub bins: usize,
    pub clusters: usize,
    pub noise_fraction: f64,
    /// Noise frames count as singletons.
    pub ari: f64,
    /// Over non-noise frames; `None` when everything is noise.
    pub purity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandFailure {
    pub record: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub metric: String,
    pub required: f64,
    pub actual: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestCounts {
    pub pending: usize,
    pub labeled: usize,
    pub dismissed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub frames_total: usize,
    pub frames_inferred: usize,
    pub frames_in_sessions: usize,
    pub sessions_completed: usize,
    pub warnings: Vec<PipelineWarning>,
    pub context: Option<ClassificationReport>,
    pub faces: Option<FaceEval>,
    pub clustering: Option<ClusterEval>,
    pub trigger_events: usize,
    pub label_requests: RequestCounts,
    pub command_failures: Vec<CommandFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<BTreeMap<String, LatencySummary>>,
    pub thresholds: Vec<ThresholdCheck>,
    pub passed: bool,
}

pub struct ReplayOutput {
    pub trace: Vec<PipelineTickResult>,
    pub report: EvalReport,
    pub pipeline: Pipeline,
}

/// Replays `manifest` through a fresh pipeline built from `config`.
pub fn replay(manifest: &Manifest, config: &EngineConfig, options: ReplayOptions) -> Result<ReplayOutput, ReplayError> {
    let mut pipeline = Pipeline::new(config.pipeline.clone());
    if !config.rules.is_empty() {
        pipeline.set_rules(config.rules.clone()).map_err(|source| ReplayError::Pipeline { record: 0, source })?;
    }
    replay_with(pipeline, manifest, &config.thresholds, options)
}

/// Replays `manifest` through an existing pipeline, e.g. one restored from a snapshot.
pub fn replay_with(
    mut pipeline: Pipeline,
    manifest: &Manifest,
    thresholds: &EvalThresholds,
    options: ReplayOptions,
) -> Result<ReplayOutput, ReplayError> {
    manifest.validate()?;
    let mut face_truth: HashMap<&str, Vec<(&Detection, &str)>> = HashMap::new();
    for (i, line) in manifest.lines.iter().enumerate() {
        if let ManifestLine::Detection(d) = line {
            let crop = d.crop_embedding().map_err(|m| SchemaError { line: i + 1, message: m })?;
            pipeline
                .add_detection(d.detection.clone(), crop)
                .map_err(|source| ReplayError::Pipeline { record: i + 1, source })?;
            if let Some(t) = &d.truth_person {
                face_truth.entry(d.detection.frame_id.as_str()).or_default().push((&d.detection, t.as_str()));
            }
        }
    }

    let mut trace = Vec::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    let mut sessions_completed = 0;
    let mut context_truth = Vec::new();
    let mut context_pred = Vec::new();
    let mut face_pairs: Vec<(String, String)> = Vec::new();
    let mut cluster_truth: Vec<(String, String)> = Vec::new();
    let mut stages: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut frames_total = 0;
    let mut frames_inferred = 0;
    let mut trigger_events = 0;

    for (i, line) in manifest.lines.iter().enumerate() {
        let record = i + 1;
        let command = match line {
            ManifestLine::Detection(_) => continue,
            ManifestLine::Frame(f) => {
                frames_total += 1;
                let rec = f.to_record().map_err(|m| SchemaError { line: record, message: m })?;
                let mut tick = pipeline.ingest(rec).map_err(|source| ReplayError::Pipeline { record, source })?;
                if tick.routed_to == Routing::Inference {
                    frames_inferred += 1;
                    if let Some(t) = &f.truth_label {
                        context_truth.push(t.clone());
                        context_pred.push(
                            tick.context_prediction.as_ref().map_or(UNKNOWN_LABEL, |p| p.label_or_unknown()).to_string(),
                        );
                    }
                    if let Some(c) = &f.truth_cluster {
                        cluster_truth.push((f.frame_id.clone(), c.clone()));
                    }
                    score_faces(&tick, face_truth.get(f.frame_id.as_str()), &mut face_pairs);
                    trigger_events += tick.trigger_events.len();
                }
                if let Some(l) = tick.latency {
                    for (name, v) in [
                        ("embed", l.embed_ms),
                        ("detect", l.detect_ms),
                        ("faces", l.faces_ms),
                        ("classify", l.classify_ms),
                        ("cluster_buffer", l.cluster_buffer_ms),
                        ("triggers", l.triggers_ms),
                        ("total", l.total_ms),
                    ] {
                        stages.entry(name).or_default().push(v);
                    }
                }
                if !options.include_latency {
                    tick.latency = None;
                }
                trace.push(tick);
                continue;
            }
            _ => line
                .to_command()
                .map_err(|m| SchemaError { line: record, message: m })?
                .expect("detections are skipped above"),
        };
        match pipeline.apply(command) {
            Ok(crate::pipeline::CommandOutcome::SessionStopped(out)) => {
                sessions_completed += 1;
                warnings.extend(out.warnings);
            }
            Ok(_) => {}
            Err(e) => failures.push(CommandFailure { record, error: e.to_string() }),
        }
    }

    if pipeline.buffered_frames() > 0 {
        let at = pipeline.last_timestamp().unwrap_or_default();
        pipeline.recluster(at, None).map_err(|source| ReplayError::Pipeline { record: manifest.lines.len(), source })?;
    }

    let context = if context_truth.is_empty() { None } else { classification_report(&context_truth, &context_pred).ok() };
    let faces = face_eval(&face_pairs);
    let clustering = cluster_eval(&pipeline, &cluster_truth);
    let latency = options.include_latency.then(|| {
        stages.iter().filter_map(|(k, v)| latency_summary(v).map(|s| (k.to_string(), s))).collect::<BTreeMap<_, _>>()
    });
    let requests = pipeline.label_requests(None);
    let count = |s: RequestStatus| requests.iter().filter(|r| r.status == s).count();

    let mut report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        frames_total,
        frames_inferred,
        frames_in_sessions: frames_total - frames_inferred,
        sessions_completed,
        warnings,
        context,
        faces,
        clustering,
        trigger_events,
        label_requests: RequestCounts {
            pending: count(RequestStatus::Pending),
            labeled: count(RequestStatus::Labeled),
            dismissed: count(RequestStatus::Dismissed),
        },
        command_failures: failures,
        latency,
        thresholds: Vec::new(),
        passed: true,
    };
    report.thresholds = check_thresholds(&report, thresholds);
    report.passed = report.thresholds.iter().all(|t| t.passed);
    Ok(ReplayOutput { trace, report, pipeline })
}

fn score_faces(tick: &PipelineTickResult, truth: Option<&Vec<(&Detection, &str)>>, out: &mut Vec<(String, String)>) {
    let Some(truth) = truth else { return };
    let mut used = vec![false; truth.len()];
    let faces = tick.detections.iter().filter(|d| d.kind == DetectionKind::Face);
    for (det, m) in faces.zip(&tick.face_matches) {
        let hit = truth
            .iter()
            .enumerate()
            .position(|(i, (d, _))| !used[i] && d.bbox == det.bbox && d.confidence == det.confidence);
        if let Some(i) = hit {
            used[i] = true;
            out.push((truth[i].1.to_string(), m.person.clone().unwrap_or_else(|| UNKNOWN_LABEL.to_string())));
        }
    }
}

fn face_eval(pairs: &[(String, String)]) -> Option<FaceEval> {
    if pairs.is_empty() {
        return None;
    }
    let (unknown, known): (Vec<_>, Vec<_>) = pairs.iter().partition(|(t, _)| t == UNKNOWN_LABEL);
    let rate = |v: &[&(String, String)]| {
        (!v.is_empty()).then(|| v.iter().filter(|(t, p)| t == p).count() as f64 / v.len() as f64)
    };
    let report = if known.is_empty() {
        None
    } else {
        let t: Vec<String> = known.iter().map(|(t, _)| t.clone()).collect();
        let p: Vec<String> = known.iter().map(|(_, p)| p.clone()).collect();
        classification_report(&t, &p).ok()
    };
    Some(FaceEval {
        known_probes: known.len(),
        unknown_probes: unknown.len(),
        accuracy: rate(&known),
        unknown_rejection_rate: rate(&unknown),
        report,
    })
}

fn cluster_eval(pipeline: &Pipeline, truth: &[(String, String)]) -> Option<ClusterEval> {
    let mut assigned: HashMap<&str, Option<String>> = HashMap::new();
    let mut clusters = 0;
    for r in pipeline.reports() {
        clusters += r.clusters.len();
        for c in &r.clusters {
            for m in &c.member_frame_ids {
                assigned.insert(m.as_str(), Some(format!("{}/{}", r.bin, c.cluster_id)));
            }
        }
        for m in &r.noise_frame_ids {
            assigned.insert(m.as_str(), None);
        }
    }
    let scored: Vec<(&str, &str, Option<&String>)> = truth
        .iter()
        .filter_map(|(id, t)| assigned.get(id.as_str()).map(|a| (id.as_str(), t.as_str(), a.as_ref())))
        .collect();
    if scored.is_empty() {
        return None;
    }
    let truth_ids: Vec<&str> = scored.iter().map(|s| s.1).collect();
    let pred_ids: Vec<String> = scored.iter().map(|(id, _, a)| a.cloned().unwrap_or_else(|| format!("noise:{id}"))).collect();
    let ari = adjusted_rand_index(&truth_ids, &pred_ids).ok()?;
    let clustered: Vec<&(&str, &str, Option<&String>)> = scored.iter().filter(|s| s.2.is_some()).collect();
    let purity = if clustered.is_empty() {
        None
    } else {
        let c: Vec<&String> = clustered.iter().map(|s| s.2.expect("filtered")).collect();
        let t: Vec<&str> = clustered.iter().map(|s| s.1).collect();
        purity(&c, &t).ok()
    };
    Some(ClusterEval {
        frames: scored.len(),
        bins: pipeline.reports().len(),
        clusters,
        noise_fraction: (scored.len() - clustered.len()) as f64 / scored.len() as f64,
        ari,
        purity,
    })
}

fn check_thresholds(report: &EvalReport, t: &EvalThresholds) -> Vec<ThresholdCheck> {
    let ctx = report.context.as_ref();
    let faces = report.faces.as_ref();
    let cl = report.clustering.as_ref();
    [
        ("context_accuracy", t.context_accuracy, ctx.map(|c| c.accuracy)),
        ("context_macro_f1", t.context_macro_f1, ctx.map(|c| c.macro_f1)),
        ("face_accuracy", t.face_accuracy, faces.and_then(|f| f.accuracy)),
        ("unknown_face_rejection", t.unknown_face_rejection, faces.and_then(|f| f.unknown_rejection_rate)),
        ("cluster_ari", t.cluster_ari, cl.map(|c| c.ari)),
        ("cluster_purity", t.cluster_purity, cl.and_then(|c| c.purity)),
    ]
    .into_iter()
    .filter_map(|(metric, required, actual)| {
        required.map(|r| ThresholdCheck {
            metric: metric.to_string(),
            required: r,
            actual,
            passed: actual.is_some_and(|a| a >= r),
        })
    })
    .collect()
}

/// One JSON object per line.
pub fn trace_jsonl(trace: &[PipelineTickResult]) -> String {
    let mut out = String::new();
    for t in trace {
        out.push_str(&serde_json::to_string(t).expect("tick results serialize"));
        out.push('\n');
    }
    out
}

/// Plain-text summary of a report.
pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
    let _ = writeln!(s, "frames            {} ({} inferred, {} in sessions)", r.frames_total, r.frames_inferred, r.frames_in_sessions);
    if let Some(c) = &r.context {
        let _ = writeln!(s, "context accuracy  {}  macro-F1 {}  ({} frames)", pct(Some(c.accuracy)), pct(Some(c.macro_f1)), c.samples);
        let _ = writeln!(s, "  {:<24} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
        for k in &c.per_class {
            let _ = writeln!(s, "  {:<24} {:>9.4} {:>9.4} {:>9.4} {:>8}", k.label, k.precision, k.recall, k.f1, k.support);
        }
    }
    if let Some(f) = &r.faces {
        let _ = writeln!(
            s,
            "face accuracy     {}  ({} probes)  unknown rejection {} ({} probes)",
            pct(f.accuracy),
            f.known_probes,
            pct(f.unknown_rejection_rate),
            f.unknown_probes
        );
    }
    if let Some(c) = &r.clustering {
        let _ = writeln!(
            s,
            "clustering ARI    {}  purity {}  clusters {}  bins {}  noise {:.4}",
            pct(Some(c.ari)),
            pct(c.purity),
            c.clusters,
            c.bins,
            c.noise_fraction
        );
    }
    let _ = writeln!(
        s,
        "label requests    {} pending, {} labeled, {} dismissed",
        r.label_requests.pending, r.label_requests.labeled, r.label_requests.dismissed
    );
    let _ = writeln!(s, "trigger events    {}", r.trigger_events);
    if let Some(l) = &r.latency {
        for (stage, v) in l {
            let _ = writeln!(s, "latency {:<14} p50 {:.3} ms  p95 {:.3} ms  max {:.3} ms", stage, v.p50_ms, v.p95_ms, v.max_ms);
        }
    }
    for f in &r.command_failures {
        let _ = writeln!(s, "command failure   record {}: {}", f.record, f.error);
    }
    for t in &r.thresholds {
        let _ = writeln!(
            s,
            "{} {:<24} required {:.4} actual {}",
            if t.passed { "PASS" } else { "FAIL" },
            t.metric,
            t.required,
            pct(t.actual)
        );
    }
    s
}
