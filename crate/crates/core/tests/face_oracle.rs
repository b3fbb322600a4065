mod common;

use common::*;
use pal_core::face::{FaceRecognizer, DEFAULT_MATCH_THRESHOLD};
use pal_core::normalize;
use rand::Rng;

#[test]
fn four_faces_match_all_pairs_oracle() {
    let mut r = rng(42);
    let dim = 256;
    let people: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut r, dim)).collect();
    let templates: Vec<Vec<Vec<f64>>> = people.iter().map(|p| (0..2).map(|_| jitter(&mut r, p, 0.05)).collect()).collect();
    let mut rec = FaceRecognizer::new(dim);
    for (i, ts) in templates.iter().enumerate() {
        let ts: Vec<_> = ts.iter().map(|t| normalize(t).unwrap()).collect();
        rec.register_face(&format!("p{i}"), &ts, i as i64).unwrap();
    }

    let mut correct = 0;
    for k in 0..120 {
        let who = k % 4;
        let t = &templates[who][r.random_range(0..2)];
        let probe = jitter(&mut r, t, 0.05);
        let got = rec.identify(&normalize(&probe).unwrap()).unwrap();
        let want = oracle_nearest_face(&templates, &probe, DEFAULT_MATCH_THRESHOLD).map(|p| format!("p{p}"));
        assert_eq!(got.person, want);
        correct += (got.person == Some(format!("p{who}"))) as usize;
    }
    assert!(correct as f64 / 120.0 >= 0.95);

    let (mut eligible, mut rejected) = (0, 0);
    for _ in 0..100 {
        let v = random_unit(&mut r, dim);
        if templates.iter().flatten().all(|t| dist(t, &v) >= DEFAULT_MATCH_THRESHOLD) {
            eligible += 1;
            rejected += rec.identify(&normalize(&v).unwrap()).unwrap().person.is_none() as usize;
        }
    }
    assert!(eligible > 90);
    assert_eq!(rejected, eligible);
}

#[test]
fn random_galleries_agree_with_oracle() {
    for seed in 0..50 {
        let mut r = rng(500 + seed);
        let dim = 8;
        let n = r.random_range(1..6);
        let templates: Vec<Vec<Vec<f64>>> =
            (0..n).map(|_| (0..r.random_range(1..=2)).map(|_| random_unit(&mut r, dim)).collect()).collect();
        let threshold = r.random_range(0.3..1.5);
        let mut rec = FaceRecognizer::new(dim).with_threshold(Some(threshold));
        for (i, ts) in templates.iter().enumerate() {
            let ts: Vec<_> = ts.iter().map(|t| normalize(t).unwrap()).collect();
            rec.register_face(&format!("p{i}"), &ts, i as i64).unwrap();
        }
        for _ in 0..40 {
            let q = random_unit(&mut r, dim);
            let got = rec.identify(&normalize(&q).unwrap()).unwrap().person;
            assert_eq!(got, oracle_nearest_face(&templates, &q, threshold).map(|p| format!("p{p}")), "seed {seed}");
        }
    }
}
