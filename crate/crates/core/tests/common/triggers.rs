//! Random context streams and a direct restatement of trigger rule semantics.

use pal_core::cluster::GeoBin;
use pal_core::imprint::ContextPrediction;
use pal_core::record::Activity;
use pal_core::trigger::{Predicate, TriggerEngine, TriggerEvent, TriggerInput, TriggerRule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rng;

pub const LABELS: [&str; 3] = ["brush_teeth", "desk", "kitchen"];
pub const ACTIVITIES: [Activity; 3] = [Activity::Still, Activity::Walking, Activity::Running];

pub struct Frame {
    pub id: String,
    pub at: i64,
    pub prediction: Option<ContextPrediction>,
    pub bin: GeoBin,
    pub activity: Option<Activity>,
    pub heart_rate: Option<f64>,
}

pub fn bins() -> Vec<GeoBin> {
    vec!["42.360,-71.090".parse().unwrap(), "42.370,-71.090".parse().unwrap(), GeoBin::NoGeo]
}

pub fn stream(r: &mut ChaCha8Rng, n: usize) -> Vec<Frame> {
    let bins = bins();
    let mut at = 0;
    (0..n)
        .map(|k| {
            at += r.random_range(0..90_000);
            let prediction = r.random_bool(0.9).then(|| ContextPrediction {
                label: r.random_bool(0.9).then(|| LABELS[r.random_range(0..3)].to_string()),
                similarity: r.random_range(-1.0..1.0),
                runner_up: None,
            });
            Frame {
                id: format!("f{k}"),
                at,
                prediction,
                bin: bins[r.random_range(0..3)].clone(),
                activity: r.random_bool(0.8).then(|| ACTIVITIES[r.random_range(0..3)]),
                heart_rate: r.random_bool(0.8).then(|| r.random_range(50.0..190.0)),
            }
        })
        .collect()
}

pub fn random_rule(r: &mut ChaCha8Rng, id: &str) -> TriggerRule {
    let lo = r.random_range(50.0..150.0);
    TriggerRule {
        rule_id: id.into(),
        when: Predicate {
            context_label: LABELS[r.random_range(0..3)].into(),
            min_confidence: r.random_range(0.0..1.0),
            geo_bin: r.random_bool(0.5).then(|| bins()[r.random_range(0..3)].clone()),
            activity: r.random_bool(0.5).then(|| ACTIVITIES[r.random_range(0..3)]),
            heart_rate_range: r.random_bool(0.5).then(|| (lo, lo + r.random_range(0.0..60.0))),
        },
        message: format!("{id} fired"),
        cooldown_s: [0, 1, 60, 300, 900][r.random_range(0..5)],
    }
}

/// Loosens one or more fields of `rule`.
pub fn relax(r: &mut ChaCha8Rng, rule: &TriggerRule) -> TriggerRule {
    let mut out = rule.clone();
    out.when.min_confidence *= r.random_range(0.0..1.0);
    if r.random_bool(0.5) {
        out.when.geo_bin = None;
    }
    if r.random_bool(0.5) {
        out.when.activity = None;
    }
    out.when.heart_rate_range = match out.when.heart_rate_range {
        Some((lo, hi)) if r.random_bool(0.5) => Some((lo - r.random_range(0.0..20.0), hi + r.random_range(0.0..20.0))),
        _ => None,
    };
    out
}

pub fn input(f: &Frame) -> TriggerInput<'_> {
    TriggerInput {
        frame_id: &f.id,
        at: f.at,
        prediction: f.prediction.as_ref(),
        bin: &f.bin,
        activity: f.activity,
        heart_rate_bpm: f.heart_rate,
    }
}

pub fn run(rules: Vec<TriggerRule>, frames: &[Frame]) -> Vec<TriggerEvent> {
    let mut engine = TriggerEngine::new(rules).unwrap();
    frames.iter().flat_map(|f| engine.evaluate(&input(f))).collect()
}

/// The rule semantics written out directly.
pub fn oracle_matches(rule: &TriggerRule, f: &Frame) -> bool {
    let Some(p) = &f.prediction else { return false };
    let w = &rule.when;
    p.label.as_deref() == Some(w.context_label.as_str())
        && (p.similarity + 1.0) / 2.0 >= w.min_confidence
        && w.geo_bin.as_ref().is_none_or(|b| *b == f.bin)
        && w.activity.is_none_or(|a| f.activity == Some(a))
        && w.heart_rate_range.is_none_or(|(lo, hi)| f.heart_rate.is_some_and(|h| lo <= h && h <= hi))
}

pub fn oracle_events(rule: &TriggerRule, frames: &[Frame]) -> Vec<i64> {
    let mut last: Option<i64> = None;
    let mut out = Vec::new();
    for f in frames {
        if oracle_matches(rule, f) && last.is_none_or(|l| f.at - l >= rule.cooldown_s as i64 * 1000) {
            last = Some(f.at);
            out.push(f.at);
        }
    }
    out
}

pub fn times(events: &[TriggerEvent], id: &str) -> Vec<i64> {
    events.iter().filter(|e| e.rule_id == id).map(|e| e.fired_at).collect()
}

/// Cooldown breaches and disagreements with [`oracle_events`] on one
/// random 1000-frame stream with four rules.
pub fn cooldown_check(seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let frames = stream(&mut r, 1000);
    let rules: Vec<TriggerRule> = (0..4).map(|i| random_rule(&mut r, &format!("r{i}"))).collect();
    let events = run(rules.clone(), &frames);
    let (mut breaches, mut mismatches) = (0, 0);
    for rule in &rules {
        let t = times(&events, &rule.rule_id);
        breaches += t.windows(2).filter(|w| w[1] - w[0] < rule.cooldown_s as i64 * 1000).count();
        mismatches += (t != oracle_events(rule, &frames)) as usize;
    }
    (breaches, mismatches)
}

/// Coverage lost by relaxing a random rule on one random 1000-frame stream,
/// counted at the predicate level, without cooldown, and with cooldown.
pub fn relax_check(seed: u64) -> usize {
    let mut r = rng(seed);
    let frames = stream(&mut r, 1000);
    let strict = random_rule(&mut r, "r");
    let loose = relax(&mut r, &strict);
    let mut violations = 0;

    for f in &frames {
        if strict.when.matches(&input(f)) && !loose.when.matches(&input(f)) {
            violations += 1;
        }
    }

    let no_cd = |rule: &TriggerRule| TriggerRule { cooldown_s: 0, ..rule.clone() };
    let s = times(&run(vec![no_cd(&strict)], &frames), "r");
    let l = times(&run(vec![no_cd(&loose)], &frames), "r");
    violations += s.iter().filter(|t| !l.contains(t)).count();

    // the relaxed rule fired within the cooldown window ending at each strict event
    let cd = strict.cooldown_s as i64 * 1000;
    let s = times(&run(vec![strict.clone()], &frames), "r");
    let l = times(&run(vec![TriggerRule { cooldown_s: strict.cooldown_s, ..loose }], &frames), "r");
    for t in s {
        if !l.iter().any(|&x| x <= t && (x > t - cd || x == t)) {
            violations += 1;
        }
    }
    violations
}
