mod common;

use common::rng;
use common::triggers::*;
use pal_core::cluster::GeoBin;
use pal_core::imprint::ContextPrediction;
use pal_core::record::Activity;
use pal_core::trigger::{Predicate, TriggerInput, TriggerRule};

#[test]
fn cooldown_safety_and_oracle_agreement() {
    for seed in 0..200 {
        assert_eq!(cooldown_check(seed), (0, 0), "seed {seed}");
        let mut r = rng(seed);
        let frames = stream(&mut r, 1000);
        let rules: Vec<TriggerRule> = (0..4).map(|i| random_rule(&mut r, &format!("r{i}"))).collect();
        // events within one frame are ordered by rule id
        for w in run(rules, &frames).windows(2) {
            if w[0].frame_id == w[1].frame_id {
                assert!(w[0].rule_id < w[1].rule_id);
            }
        }
    }
}

#[test]
fn relaxing_a_rule_never_loses_coverage() {
    for seed in 0..200 {
        assert_eq!(relax_check(10_000 + seed), 0, "seed {seed}");
    }
}

#[test]
fn absent_modalities_fail_closed() {
    let rule = TriggerRule {
        rule_id: "hr".into(),
        when: Predicate {
            context_label: "desk".into(),
            min_confidence: 0.0,
            geo_bin: None,
            activity: Some(Activity::Still),
            heart_rate_range: Some((100.0, 180.0)),
        },
        message: String::new(),
        cooldown_s: 0,
    };
    let p = ContextPrediction { label: Some("desk".into()), similarity: 0.9, runner_up: None };
    let bin = GeoBin::NoGeo;
    let mut f = TriggerInput { frame_id: "f", at: 0, prediction: Some(&p), bin: &bin, activity: Some(Activity::Still), heart_rate_bpm: Some(120.0) };
    assert!(rule.when.matches(&f));
    f.heart_rate_bpm = None;
    assert!(!rule.when.matches(&f));
    f.heart_rate_bpm = Some(120.0);
    f.activity = None;
    assert!(!rule.when.matches(&f));
    f.activity = Some(Activity::Still);
    f.prediction = None;
    assert!(!rule.when.matches(&f));
}
