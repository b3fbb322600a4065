//! Low-shot context recognition by weight imprinting.
//!
//! Each class keeps the unnormalized running sum of its normalized training
//! embeddings; its weight is that sum normalized. Adding examples later is an
//! exact update of the sum, so continual learning never drifts. Prediction is
//! the cosine argmax over class weights. The usual softmax scale factor is
//! omitted because it cannot change an argmax.

use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, Embedding, EmbeddingError};
use crate::UNKNOWN_LABEL;

/// Cosine below which a query is reported as unknown.
pub const DEFAULT_UNKNOWN_THRESHOLD: f64 = 0.35;

/// Example count below which imprinting emits [`ImprintWarning::LowExampleCount`].
pub const RECOMMENDED_EXAMPLES: u64 = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ImprintError {
    #[error("imprint requires at least one example")]
    EmptyExampleSet,
    #[error("label must be non-empty and not the reserved `{UNKNOWN_LABEL}`")]
    InvalidLabel,
    #[error("no classes have been imprinted")]
    NoClasses,
    #[error("examples for `{0}` sum to the zero vector")]
    DegenerateSum(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprintedClass {
    pub label: String,
    pub weight: Embedding,
    pub example_sum: Vec<f64>,
    pub example_count: u64,
    pub created_at: i64,
}

impl ImprintedClass {
    /// Rebuilds a class from persisted parts, recomputing the weight.
    pub fn from_parts(label: String, example_sum: Vec<f64>, example_count: u64, created_at: i64) -> Result<Self, ImprintError> {
        let weight = normalize(&example_sum).map_err(|e| match e {
            EmbeddingError::ZeroVector => ImprintError::DegenerateSum(label.clone()),
            other => other.into(),
        })?;
        Ok(ImprintedClass { label, weight, example_sum, example_count, created_at })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ImprintWarning {
    LowExampleCount { label: String, count: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImprintOutcome {
    pub class: ImprintedClass,
    pub warning: Option<ImprintWarning>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPrediction {
    /// `None` means the query was rejected as unknown.
    pub label: Option<String>,
    pub similarity: f64,
    pub runner_up: Option<(String, f64)>,
}

impl ContextPrediction {
    pub fn label_or_unknown(&self) -> &str {
        self.label.as_deref().unwrap_or(UNKNOWN_LABEL)
    }
}

#[derive(Clone, Debug)]
pub struct ImprintClassifier {
    dim: usize,
    unknown_threshold: Option<f64>,
    // Kept sorted by creation time; insertion order breaks equal timestamps.
    classes: Vec<ImprintedClass>,
}

impl ImprintClassifier {
    pub fn new(dim: usize) -> Self {
        ImprintClassifier { dim, unknown_threshold: Some(DEFAULT_UNKNOWN_THRESHOLD), classes: Vec::new() }
    }

    /// `None` disables rejection: every query gets the argmax label.
    pub fn with_threshold(mut self, threshold: Option<f64>) -> Self {
        self.unknown_threshold = threshold;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unknown_threshold(&self) -> Option<f64> {
        self.unknown_threshold
    }

    pub fn classes(&self) -> &[ImprintedClass] {
        &self.classes
    }

    pub fn get(&self, label: &str) -> Option<&ImprintedClass> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Creates `label` or extends it with more examples.
    pub fn imprint(&mut self, label: &str, embeddings: &[Embedding], at: i64) -> Result<ImprintOutcome, ImprintError> {
        if label.is_empty() || label == UNKNOWN_LABEL {
            return Err(ImprintError::InvalidLabel);
        }
        if embeddings.is_empty() {
            return Err(ImprintError::EmptyExampleSet);
        }
        for e in embeddings {
            e.check_dim(self.dim)?;
        }

        let existing = self.classes.iter().position(|c| c.label == label);
        let (mut sum, base_count, created_at) = match existing {
            Some(i) => {
                let c = &self.classes[i];
                (c.example_sum.clone(), c.example_count, c.created_at)
            }
            None => (vec![0.0; self.dim], 0, at),
        };
        for e in embeddings {
            for (s, v) in sum.iter_mut().zip(e.as_slice()) {
                *s += v;
            }
        }
        let class = ImprintedClass::from_parts(label.to_string(), sum, base_count + embeddings.len() as u64, created_at)?;

        match existing {
            Some(i) => self.classes[i] = class.clone(),
            None => self.insert_ordered(class.clone()),
        }
        let warning = (class.example_count < RECOMMENDED_EXAMPLES)
            .then(|| ImprintWarning::LowExampleCount { label: label.to_string(), count: class.example_count });
        Ok(ImprintOutcome { class, warning })
    }

    /// Restores a persisted class verbatim.
    pub fn insert_class(&mut self, class: ImprintedClass) -> Result<(), ImprintError> {
        class.weight.check_dim(self.dim)?;
        self.classes.retain(|c| c.label != class.label);
        self.insert_ordered(class);
        Ok(())
    }

    fn insert_ordered(&mut self, class: ImprintedClass) {
        let pos = self.classes.partition_point(|c| c.created_at <= class.created_at);
        self.classes.insert(pos, class);
    }

    pub fn remove_class(&mut self, label: &str) -> bool {
        let before = self.classes.len();
        self.classes.retain(|c| c.label != label);
        self.classes.len() != before
    }

    pub fn classify(&self, query: &Embedding) -> Result<ContextPrediction, ImprintError> {
        if self.classes.is_empty() {
            return Err(ImprintError::NoClasses);
        }
        query.check_dim(self.dim)?;

        let mut best: Option<(usize, f64)> = None;
        let mut second: Option<(usize, f64)> = None;
        for (i, c) in self.classes.iter().enumerate() {
            let s = c.weight.cosine(query);
            // strict `>` keeps the earliest-created class on exact ties
            match best {
                Some((_, b)) if s <= b => {
                    if second.is_none_or(|(_, r)| s > r) {
                        second = Some((i, s));
                    }
                }
                _ => {
                    second = best;
                    best = Some((i, s));
                }
            }
        }
        let (bi, similarity) = best.expect("at least one class");
        let accepted = self.unknown_threshold.is_none_or(|t| similarity >= t);
        Ok(ContextPrediction {
            label: accepted.then(|| self.classes[bi].label.clone()),
            similarity,
            runner_up: second.map(|(i, s)| (self.classes[i].label.clone(), s)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(dim: usize, i: usize) -> Embedding {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Embedding::from_unit(v).unwrap()
    }

    #[test]
    fn single_example_weight_is_the_example() {
        let mut clf = ImprintClassifier::new(4);
        let e = normalize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = clf.imprint("brush_teeth", std::slice::from_ref(&e), 0).unwrap();
        assert_eq!(out.class.weight, e);
        assert_eq!(out.warning, Some(ImprintWarning::LowExampleCount { label: "brush_teeth".into(), count: 1 }));
        let p = clf.classify(&e).unwrap();
        assert_eq!(p.label.as_deref(), Some("brush_teeth"));
        assert!((p.similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ten_examples_no_warning() {
        let mut clf = ImprintClassifier::new(4);
        let es: Vec<_> = (0..10).map(|i| normalize(&[1.0, i as f64 * 0.01, 0.0, 0.0]).unwrap()).collect();
        let out = clf.imprint("brush_teeth", &es, 0).unwrap();
        assert_eq!(out.class.example_count, 10);
        assert!(out.warning.is_none());
    }

    #[test]
    fn orthogonal_query_is_unknown() {
        let mut clf = ImprintClassifier::new(3);
        clf.imprint("a", &[axis(3, 0)], 0).unwrap();
        clf.imprint("b", &[axis(3, 1)], 1).unwrap();
        let p = clf.classify(&axis(3, 2)).unwrap();
        assert_eq!(p.label, None);
        assert_eq!(p.label_or_unknown(), UNKNOWN_LABEL);
        assert!(p.similarity.abs() < 1e-12);
    }

    #[test]
    fn ties_break_to_earliest_created() {
        let mut clf = ImprintClassifier::new(2).with_threshold(None);
        clf.imprint("late", &[axis(2, 1)], 10).unwrap();
        clf.imprint("early", &[axis(2, 0)], 5).unwrap();
        let q = normalize(&[1.0, 1.0]).unwrap();
        let p = clf.classify(&q).unwrap();
        assert_eq!(p.label.as_deref(), Some("early"));
        assert_eq!(p.runner_up.as_ref().map(|r| r.0.as_str()), Some("late"));
    }

    #[test]
    fn errors() {
        let mut clf = ImprintClassifier::new(3);
        assert_eq!(clf.classify(&axis(3, 0)), Err(ImprintError::NoClasses));
        assert_eq!(clf.imprint("a", &[], 0).unwrap_err(), ImprintError::EmptyExampleSet);
        assert_eq!(clf.imprint("", &[axis(3, 0)], 0).unwrap_err(), ImprintError::InvalidLabel);
        assert_eq!(clf.imprint(UNKNOWN_LABEL, &[axis(3, 0)], 0).unwrap_err(), ImprintError::InvalidLabel);
        assert!(matches!(
            clf.imprint("a", &[axis(4, 0)], 0),
            Err(ImprintError::Embedding(EmbeddingError::DimensionMismatch { expected: 3, actual: 4 }))
        ));
        clf.imprint("a", &[axis(3, 0)], 0).unwrap();
        assert!(matches!(clf.classify(&axis(2, 0)), Err(ImprintError::Embedding(_))));
        let e = axis(3, 1);
        let neg = Embedding::from_unit(vec![0.0, -1.0, 0.0]).unwrap();
        assert_eq!(clf.imprint("z", &[e, neg], 0).unwrap_err(), ImprintError::DegenerateSum("z".into()));
        assert!(clf.get("z").is_none());
    }

    #[test]
    fn remove_then_reimprint_resets() {
        let mut clf = ImprintClassifier::new(3);
        clf.imprint("a", &[axis(3, 0)], 0).unwrap();
        assert!(clf.remove_class("a"));
        assert!(!clf.remove_class("a"));
        assert_eq!(clf.classify(&axis(3, 0)), Err(ImprintError::NoClasses));
        clf.imprint("b", &[axis(3, 2)], 1).unwrap();
        clf.imprint("a", &[axis(3, 1)], 2).unwrap();
        let a = clf.get("a").unwrap();
        assert_eq!(a.example_count, 1);
        assert_eq!(a.weight, axis(3, 1));
        assert_eq!(clf.classify(&axis(3, 0)).unwrap().label, None);
    }

    #[test]
    fn continual_update_keeps_creation_time() {
        let mut clf = ImprintClassifier::new(2);
        clf.imprint("a", &[axis(2, 0)], 3).unwrap();
        let out = clf.imprint("a", &[axis(2, 1)], 9).unwrap();
        assert_eq!(out.class.created_at, 3);
        assert_eq!(out.class.example_count, 2);
        assert_eq!(out.class.example_sum, vec![1.0, 1.0]);
    }
}
