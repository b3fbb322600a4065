//! Template matching for custom faces.
//!
//! Each person has one or two enrolled embeddings. A query matches the person
//! owning the nearest template (Euclidean on unit vectors), or nobody when that
//! nearest distance exceeds the match threshold.

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingError};
use crate::UNKNOWN_LABEL;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.8;
pub const MAX_TEMPLATES: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FaceError {
    #[error("at most {MAX_TEMPLATES} templates per person, got {0}")]
    TooManyTemplates(usize),
    #[error("registration requires at least one template")]
    EmptyExampleSet,
    #[error("person name must be non-empty and not the reserved `{UNKNOWN_LABEL}`")]
    InvalidPerson,
    #[error("no faces registered")]
    NoFacesRegistered,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceTemplate {
    pub person: String,
    pub templates: Vec<Embedding>,
    pub created_at: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceMatch {
    /// `None` when no template lies within the threshold.
    pub person: Option<String>,
    pub distance: f64,
}

impl FaceMatch {
    pub fn person_or_unknown(&self) -> &str {
        self.person.as_deref().unwrap_or(UNKNOWN_LABEL)
    }
}

#[derive(Clone, Debug)]
pub struct FaceRecognizer {
    dim: usize,
    match_threshold: Option<f64>,
    faces: Vec<FaceTemplate>,
}

impl FaceRecognizer {
    pub fn new(dim: usize) -> Self {
        FaceRecognizer { dim, match_threshold: Some(DEFAULT_MATCH_THRESHOLD), faces: Vec::new() }
    }

    /// `None` accepts the nearest person at any distance.
    pub fn with_threshold(mut self, threshold: Option<f64>) -> Self {
        self.match_threshold = threshold;
        self
    }

    pub fn match_threshold(&self) -> Option<f64> {
        self.match_threshold
    }

    pub fn faces(&self) -> &[FaceTemplate] {
        &self.faces
    }

    pub fn get(&self, person: &str) -> Option<&FaceTemplate> {
        self.faces.iter().find(|f| f.person == person)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Stores templates for `person`, replacing any earlier enrollment.
    pub fn register_face(&mut self, person: &str, embeddings: &[Embedding], at: i64) -> Result<FaceTemplate, FaceError> {
        if person.is_empty() || person == UNKNOWN_LABEL {
            return Err(FaceError::InvalidPerson);
        }
        if embeddings.is_empty() {
            return Err(FaceError::EmptyExampleSet);
        }
        if embeddings.len() > MAX_TEMPLATES {
            return Err(FaceError::TooManyTemplates(embeddings.len()));
        }
        for e in embeddings {
            e.check_dim(self.dim)?;
        }
        let face = FaceTemplate { person: person.to_string(), templates: embeddings.to_vec(), created_at: at };
        self.insert(face.clone());
        Ok(face)
    }

    pub fn insert(&mut self, face: FaceTemplate) {
        self.faces.retain(|f| f.person != face.person);
        let pos = self.faces.partition_point(|f| f.created_at <= face.created_at);
        self.faces.insert(pos, face);
    }

    pub fn remove(&mut self, person: &str) -> bool {
        let before = self.faces.len();
        self.faces.retain(|f| f.person != person);
        before != self.faces.len()
    }

    pub fn identify(&self, query: &Embedding) -> Result<FaceMatch, FaceError> {
        if self.faces.is_empty() {
            return Err(FaceError::NoFacesRegistered);
        }
        query.check_dim(self.dim)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, face) in self.faces.iter().enumerate() {
            let d = face
                .templates
                .iter()
                .map(|t| t.distance(query))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        let (i, distance) = best.expect("non-empty");
        let accepted = self.match_threshold.is_none_or(|t| distance <= t);
        Ok(FaceMatch { person: accepted.then(|| self.faces[i].person.clone()), distance })
    }
}
