//! Just-in-time reminder rules.
//!
//! A rule fires when every field of its predicate matches the current frame
//! and at least `cooldown_s` seconds have passed since it last fired. Context
//! confidence is the cosine similarity mapped from `[-1, 1]` to `[0, 1]` by
//! `(s + 1) / 2`. A predicate on a modality the frame lacks never matches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::GeoBin;
use crate::imprint::ContextPrediction;
use crate::record::Activity;

pub const DEFAULT_COOLDOWN_S: u64 = 300;
pub const RULES_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("rule id must be non-empty")]
    EmptyRuleId,
    #[error("duplicate rule id `{0}`")]
    DuplicateRuleId(String),
    #[error("rule `{0}`: context_label must be non-empty")]
    EmptyLabel(String),
    #[error("rule `{0}`: min_confidence {1} outside [0, 1]")]
    MinConfidence(String, f64),
    #[error("rule `{0}`: heart_rate_range must satisfy 0 <= low <= high")]
    HeartRateRange(String),
    #[error("unsupported rules schema version {0}")]
    SchemaVersion(u32),
}

pub fn confidence_from_cosine(similarity: f64) -> f64 {
    (similarity + 1.0) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub context_label: String,
    pub min_confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_bin: Option<GeoBin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity: Option<Activity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_rate_range: Option<(f64, f64)>,
}

fn default_cooldown() -> u64 {
    DEFAULT_COOLDOWN_S
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerRule {
    pub rule_id: String,
    pub when: Predicate,
    pub message: String,
    #[serde(default = "default_cooldown")]
    pub cooldown_s: u64,
}

impl TriggerRule {
    pub fn validate(&self) -> Result<(), RuleError> {
        if self.rule_id.is_empty() {
            return Err(RuleError::EmptyRuleId);
        }
        if self.when.context_label.is_empty() {
            return Err(RuleError::EmptyLabel(self.rule_id.clone()));
        }
        if !(0.0..=1.0).contains(&self.when.min_confidence) {
            return Err(RuleError::MinConfidence(self.rule_id.clone(), self.when.min_confidence));
        }
        if let Some((lo, hi)) = self.when.heart_rate_range {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(RuleError::HeartRateRange(self.rule_id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub rule_id: String,
    pub frame_id: String,
    pub fired_at: i64,
    pub message: String,
}

/// Everything a predicate may inspect about one inference frame.
#[derive(Clone, Copy, Debug)]
pub struct TriggerInput<'a> {
    pub frame_id: &'a str,
    pub at: i64,
    pub prediction: Option<&'a ContextPrediction>,
    pub bin: &'a GeoBin,
    pub activity: Option<Activity>,
    pub heart_rate_bpm: Option<f64>,
}

impl Predicate {
    pub fn matches(&self, input: &TriggerInput<'_>) -> bool {
        let Some(pred) = input.prediction else { return false };
        if pred.label.as_deref() != Some(self.context_label.as_str()) {
            return false;
        }
        if confidence_from_cosine(pred.similarity) < self.min_confidence {
            return false;
        }
        if let Some(bin) = &self.geo_bin {
            if bin != input.bin {
                return false;
            }
        }
        if let Some(activity) = self.activity {
            if input.activity != Some(activity) {
                return false;
            }
        }
        if let Some((lo, hi)) = self.heart_rate_range {
            match input.heart_rate_bpm {
                Some(hr) if (lo..=hi).contains(&hr) => {}
                _ => return false,
            }
        }
        true
    }
}

/// JSON rules document: `{"schema_version": 1, "rules": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleDocument {
    pub schema_version: u32,
    pub rules: Vec<TriggerRule>,
}

impl RuleDocument {
    pub fn new(rules: Vec<TriggerRule>) -> Self {
        RuleDocument { schema_version: RULES_SCHEMA_VERSION, rules }
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        if self.schema_version != RULES_SCHEMA_VERSION {
            return Err(RuleError::SchemaVersion(self.schema_version));
        }
        validate_rules(&self.rules)
    }
}

pub fn validate_rules(rules: &[TriggerRule]) -> Result<(), RuleError> {
    let mut seen = BTreeSet::new();
    for r in rules {
        r.validate()?;
        if !seen.insert(r.rule_id.as_str()) {
            return Err(RuleError::DuplicateRuleId(r.rule_id.clone()));
        }
    }
    Ok(())
}

/// Rules plus per-rule cooldown state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriggerEngine {
    rules: Vec<TriggerRule>,
    last_fired: BTreeMap<String, i64>,
}

impl TriggerEngine {
    pub fn new(rules: Vec<TriggerRule>) -> Result<Self, RuleError> {
        let mut e = TriggerEngine::default();
        e.set_rules(rules)?;
        Ok(e)
    }

    pub fn rules(&self) -> &[TriggerRule] {
        &self.rules
    }

    /// Replaces the rule set. Cooldown state survives for rule ids that remain.
    pub fn set_rules(&mut self, mut rules: Vec<TriggerRule>) -> Result<(), RuleError> {
        validate_rules(&rules)?;
        rules.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
        self.last_fired.retain(|id, _| rules.iter().any(|r| &r.rule_id == id));
        self.rules = rules;
        Ok(())
    }

    /// Events for this frame, ordered by rule id.
    pub fn evaluate(&mut self, input: &TriggerInput<'_>) -> Vec<TriggerEvent> {
        let mut events = Vec::new();
        for rule in &self.rules {
            if !rule.when.matches(input) {
                continue;
            }
            let cooldown_ms = (rule.cooldown_s as i64).saturating_mul(1000);
            if let Some(&last) = self.last_fired.get(&rule.rule_id) {
                if input.at.saturating_sub(last) < cooldown_ms {
                    continue;
                }
            }
            self.last_fired.insert(rule.rule_id.clone(), input.at);
            events.push(TriggerEvent {
                rule_id: rule.rule_id.clone(),
                frame_id: input.frame_id.to_string(),
                fired_at: input.at,
                message: rule.message.clone(),
            });
        }
        events
    }
}
