//! Synthetic manifests with planted ground truth.
//!
//! Context classes and cluster contexts are random unit centroids placed
//! with a minimum pairwise angle; frames are centroids plus isotropic
//! Gaussian noise, re-normalized. `noise_sigma` is the expected norm of the
//! perturbation, so each coordinate gets standard deviation `sigma / sqrt(D)`.
//! Output depends only on the parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::b64;
use crate::detection::{BBox, Detection, DetectionKind, Vocabulary};
use crate::embedding::{dot, euclidean, normalize, DEFAULT_DIM};
use crate::face::DEFAULT_MATCH_THRESHOLD;
use crate::manifest::{DetectionLine, FrameLine, LabelLine, Manifest, ManifestLine};
use crate::pipeline::SessionKind;
use crate::UNKNOWN_LABEL;

const PLACEMENT_TRIES: usize = 1_000;
const PLACEMENT_RESTARTS: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("cannot place {count} centroids {separation_deg} degrees apart in {dim} dimensions")]
    InfeasibleSeparation { count: usize, separation_deg: f64, dim: usize },
    #[error("invalid generator parameter: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub centroid_separation_deg: f64,
    pub noise_sigma: f64,
    pub faces: usize,
    pub templates_per_face: usize,
    pub probes: usize,
    pub probe_sigma: f64,
    /// Face crops placed at least the match threshold away from every template.
    pub unknown_probes: usize,
    pub cluster_contexts: usize,
    pub cluster_frames: usize,
    pub bins: usize,
    /// Append a label line per cluster context, naming its most central frame.
    pub label_clusters: bool,
    /// Frames per cluster context emitted after the label lines, with truth labels.
    pub followups_per_context: usize,
    pub dim: usize,
    pub seed: u64,
    pub start_ms: i64,
    pub interval_ms: i64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            classes: 7,
            train_per_class: 10,
            test_per_class: 50,
            centroid_separation_deg: 60.0,
            noise_sigma: 0.1,
            faces: 4,
            templates_per_face: 2,
            probes: 120,
            probe_sigma: 0.05,
            unknown_probes: 0,
            cluster_contexts: 19,
            cluster_frames: 300,
            bins: 3,
            label_clusters: false,
            followups_per_context: 0,
            dim: DEFAULT_DIM,
            seed: 42,
            start_ms: 1_700_000_000_000,
            interval_ms: 1_000,
        }
    }
}

impl GeneratorParams {
    /// Context classes only: no faces, no clusters.
    pub fn contexts_only(classes: usize, train: usize, test: usize) -> Self {
        GeneratorParams {
            classes,
            train_per_class: train,
            test_per_class: test,
            faces: 0,
            probes: 0,
            cluster_contexts: 0,
            cluster_frames: 0,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParams(m.into()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite() && self.probe_sigma >= 0.0 && self.probe_sigma.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if !(0.0..=180.0).contains(&self.centroid_separation_deg) {
            return bad("separation must lie in [0, 180] degrees");
        }
        if self.classes > 0 && self.train_per_class == 0 {
            return bad("train_per_class must be positive");
        }
        if (self.probes > 0 || self.unknown_probes > 0) && (self.faces == 0 || self.templates_per_face == 0) {
            return bad("probes need at least one face with templates");
        }
        if self.cluster_frames > 0 && (self.cluster_contexts == 0 || self.bins == 0) {
            return bad("cluster frames need contexts and bins");
        }
        if self.interval_ms <= 0 {
            return bad("interval_ms must be positive");
        }
        Ok(())
    }
}

/// Angle between two unit vectors in degrees.
pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(e) = normalize(&v) {
            return e.to_vec();
        }
    }
}

/// Unit vectors with pairwise angles of at least `separation_deg`.
///
/// Rejection sampling with restarts first; when that fails and the request
/// fits (count <= dim, separation <= 90), an orthonormal set is returned.
pub fn place_centroids(rng: &mut ChaCha8Rng, count: usize, separation_deg: f64, dim: usize) -> Result<Vec<Vec<f64>>, SynthError> {
    let ok = |set: &[Vec<f64>], v: &[f64]| set.iter().all(|c| angle_deg(c, v) >= separation_deg);
    for _ in 0..PLACEMENT_RESTARTS {
        let mut set: Vec<Vec<f64>> = Vec::with_capacity(count);
        let mut stuck = false;
        while set.len() < count && !stuck {
            stuck = true;
            for _ in 0..PLACEMENT_TRIES {
                let v = random_unit(rng, dim);
                if ok(&set, &v) {
                    set.push(v);
                    stuck = false;
                    break;
                }
            }
        }
        if set.len() == count {
            return Ok(set);
        }
    }
    if count <= dim && separation_deg <= 90.0 {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
        while basis.len() < count {
            let mut v = random_unit(rng, dim);
            for b in &basis {
                let d = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            if let Ok(e) = normalize(&v) {
                if ok(&basis, e.as_slice()) {
                    basis.push(e.to_vec());
                }
            }
        }
        return Ok(basis);
    }
    Err(SynthError::InfeasibleSeparation { count, separation_deg, dim })
}

/// `normalize(center + n)` with `n ~ N(0, sigma^2 / D)` per coordinate.
pub fn perturb(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    let s = sigma / (center.len() as f64).sqrt();
    loop {
        let v: Vec<f64> = center.iter().map(|c| c + s * rng.sample::<f64, _>(StandardNormal)).collect();
        if let Ok(e) = normalize(&v) {
            return e.to_vec();
        }
    }
}

pub fn context_name(i: usize) -> String {
    format!("context_{i:02}")
}

pub fn cluster_context_name(i: usize) -> String {
    format!("place_{i:02}")
}

pub fn person_name(i: usize) -> String {
    format!("person_{i:02}")
}

/// Bin centers sit 0.01 degrees apart, far wider than a 3-decimal cell.
pub fn bin_center(i: usize) -> (f64, f64) {
    (42.36 + 0.01 * i as f64, -71.09)
}

struct Clock {
    t: i64,
    step: i64,
}

impl Clock {
    fn tick(&mut self) -> i64 {
        let t = self.t;
        self.t += self.step;
        t
    }
}

fn face_box(slot: usize) -> BBox {
    let col = (slot % 4) as f64;
    let row = ((slot / 4) % 4) as f64;
    BBox { x: 0.05 + 0.24 * col, y: 0.05 + 0.24 * row, w: 0.2, h: 0.2 }
}

fn face_line(frame_id: &str, slot: usize, embedding: &[f64], truth: Option<String>) -> ManifestLine {
    ManifestLine::Detection(DetectionLine {
        detection: Detection {
            frame_id: frame_id.to_string(),
            kind: DetectionKind::Face,
            label: String::new(),
            confidence: 0.95,
            bbox: face_box(slot),
        },
        embedding: Some(b64::encode_f32(embedding)),
        truth_person: truth,
    })
}

fn frame_line(id: String, t: i64, embedding: &[f64]) -> FrameLine {
    let mut f = FrameLine::new(id, t);
    f.embedding = Some(b64::encode_f32(embedding));
    f
}

pub fn synth(params: &GeneratorParams) -> Result<Manifest, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dim = params.dim;
    let vocab: Vec<String> = Vocabulary::coco90().iter().map(String::from).collect();
    let mut clock = Clock { t: params.start_ms, step: params.interval_ms };
    let mut lines: Vec<ManifestLine> = Vec::new();
    let mut detections: Vec<ManifestLine> = Vec::new();

    let all = place_centroids(&mut rng, params.classes + params.cluster_contexts, params.centroid_separation_deg, dim)?;
    let (class_centroids, place_centroids_) = all.split_at(params.classes);
    let person_centroids = place_centroids(&mut rng, params.faces, params.centroid_separation_deg, dim)?;

    // Context training sessions.
    for (c, center) in class_centroids.iter().enumerate() {
        lines.push(ManifestLine::SessionStart { at: clock.tick(), session_kind: SessionKind::Context, label: context_name(c) });
        for k in 0..params.train_per_class {
            let e = perturb(&mut rng, center, params.noise_sigma);
            lines.push(ManifestLine::Frame(frame_line(format!("train-{c:02}-{k:03}"), clock.tick(), &e)));
        }
        lines.push(ManifestLine::SessionStop { at: clock.tick() });
    }

    // Face sessions: one face crop per frame.
    let mut templates: Vec<Vec<Vec<f64>>> = Vec::new();
    for (p, center) in person_centroids.iter().enumerate() {
        lines.push(ManifestLine::SessionStart { at: clock.tick(), session_kind: SessionKind::Face, label: person_name(p) });
        let mut mine = Vec::new();
        for k in 0..params.templates_per_face {
            let id = format!("enroll-{p:02}-{k:02}");
            let template = perturb(&mut rng, center, params.probe_sigma);
            let backdrop = random_unit(&mut rng, dim);
            lines.push(ManifestLine::Frame(frame_line(id.clone(), clock.tick(), &backdrop)));
            detections.push(face_line(&id, 0, &template, None));
            mine.push(template);
        }
        templates.push(mine);
        lines.push(ManifestLine::SessionStop { at: clock.tick() });
    }

    // Test frames in shuffled class order, each with a few object detections.
    let mut order: Vec<usize> = (0..params.classes).flat_map(|c| std::iter::repeat_n(c, params.test_per_class)).collect();
    order.shuffle(&mut rng);
    let mut test_ids = Vec::with_capacity(order.len());
    for (k, &c) in order.iter().enumerate() {
        let id = format!("test-{k:04}");
        let e = perturb(&mut rng, &class_centroids[c], params.noise_sigma);
        let mut f = frame_line(id.clone(), clock.tick(), &e);
        f.truth_label = Some(context_name(c));
        lines.push(ManifestLine::Frame(f));
        for _ in 0..rng.random_range(0..3) {
            let label = vocab[rng.random_range(0..vocab.len())].clone();
            let conf = (rng.random_range(30..100) as f64) / 100.0;
            let x = rng.random_range(0..60) as f64 / 100.0;
            let y = rng.random_range(0..60) as f64 / 100.0;
            detections.push(ManifestLine::Detection(DetectionLine {
                detection: Detection {
                    frame_id: id.clone(),
                    kind: DetectionKind::Object,
                    label,
                    confidence: conf,
                    bbox: BBox { x, y, w: 0.3, h: 0.3 },
                },
                embedding: None,
                truth_person: None,
            }));
        }
        test_ids.push(id);
    }

    // Face probes ride on extra frames when there are no test frames.
    let n_probes = params.probes + params.unknown_probes;
    let mut probe_hosts = test_ids.clone();
    if probe_hosts.is_empty() && n_probes > 0 {
        for k in 0..n_probes.div_ceil(4) {
            let id = format!("probe-host-{k:04}");
            let backdrop = random_unit(&mut rng, dim);
            lines.push(ManifestLine::Frame(frame_line(id.clone(), clock.tick(), &backdrop)));
            probe_hosts.push(id);
        }
    }
    let mut slots = vec![0usize; probe_hosts.len()];
    for k in 0..params.probes {
        let p = k % params.faces;
        let t = &templates[p][rng.random_range(0..templates[p].len())];
        let probe = perturb(&mut rng, t, params.probe_sigma);
        let host = k % probe_hosts.len();
        detections.push(face_line(&probe_hosts[host], slots[host], &probe, Some(person_name(p))));
        slots[host] += 1;
    }
    let all_templates: Vec<&Vec<f64>> = templates.iter().flatten().collect();
    for k in 0..params.unknown_probes {
        let probe = loop {
            let v = random_unit(&mut rng, dim);
            if all_templates.iter().all(|t| euclidean(t, &v) >= DEFAULT_MATCH_THRESHOLD) {
                break v;
            }
        };
        let host = (params.probes + k) % probe_hosts.len();
        detections.push(face_line(&probe_hosts[host], slots[host], &probe, Some(UNKNOWN_LABEL.into())));
        slots[host] += 1;
    }

    // Unlabeled frames for clustering; context i lives in bin i % bins.
    let mut cluster_order: Vec<usize> = (0..params.cluster_frames).map(|k| k % params.cluster_contexts.max(1)).collect();
    cluster_order.shuffle(&mut rng);
    let mut central: Vec<Option<(f64, String)>> = vec![None; params.cluster_contexts];
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-2..=2) as f64 * 1e-4;
    let place = |rng: &mut ChaCha8Rng, c: usize, id: String, t: i64| {
        let e = perturb(rng, &place_centroids_[c], params.noise_sigma);
        let (lat, lon) = bin_center(c % params.bins);
        let mut f = frame_line(id, t, &e);
        f.lat = Some(lat + jitter(rng));
        f.lon = Some(lon + jitter(rng));
        (f, dot(&e, &place_centroids_[c]))
    };
    for (k, &c) in cluster_order.iter().enumerate() {
        let id = format!("scene-{k:04}");
        let (mut f, sim) = place(&mut rng, c, id.clone(), clock.tick());
        f.truth_cluster = Some(cluster_context_name(c));
        if central[c].as_ref().is_none_or(|(s, _)| sim > *s) {
            central[c] = Some((sim, id));
        }
        lines.push(ManifestLine::Frame(f));
    }

    if params.label_clusters {
        for (c, best) in central.iter().enumerate() {
            if let Some((_, frame_id)) = best {
                lines.push(ManifestLine::Label(LabelLine {
                    at: clock.tick(),
                    request_id: None,
                    frame_id: Some(frame_id.clone()),
                    label: Some(cluster_context_name(c)),
                    dismiss: false,
                }));
            }
        }
    }
    let mut follow: Vec<usize> =
        (0..params.cluster_contexts).flat_map(|c| std::iter::repeat_n(c, params.followups_per_context)).collect();
    follow.shuffle(&mut rng);
    for (k, &c) in follow.iter().enumerate() {
        let (mut f, _) = place(&mut rng, c, format!("revisit-{k:04}"), clock.tick());
        f.truth_label = Some(cluster_context_name(c));
        lines.push(ManifestLine::Frame(f));
    }

    detections.extend(lines);
    Ok(Manifest { lines: detections })
}
