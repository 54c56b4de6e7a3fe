mod common;

use std::collections::{BTreeMap, HashMap};

use common::pairwise_auc;
use intentr::eval::*;
use intentr::ingest::{ClickEvent, Label};
use intentr::transform::unroll;
use intentr::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores on a coarse grid so that ties are common.
fn fixture(n: usize, levels: u32, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

fn scored(id: u64, score: f64, buyer: bool, len: usize) -> ScoredSession {
    ScoredSession {
        session_id: id,
        score,
        label: if buyer { Label::Buyer } else { Label::Clicker },
        original_len: len,
        unrolled_len: len,
        max_price: None,
    }
}

#[test]
fn auc_matches_pairwise_oracle() {
    for seed in 0..50 {
        let levels = if seed % 2 == 0 { 20 } else { 1_000_000 };
        let (s, l) = fixture(500, levels, seed);
        let got = auc(&s, &l).unwrap();
        let want = pairwise_auc(&s, &l);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn roc_area_matches_auc() {
    for seed in 0..50 {
        let (s, l) = fixture(300, if seed % 3 == 0 { 7 } else { 10_000 }, 100 + seed);
        let roc = roc_curve(&s, &l).unwrap();
        assert_eq!(roc.first(), Some(&RocPoint { fpr: 0.0, tpr: 0.0 }));
        assert_eq!(roc.last(), Some(&RocPoint { fpr: 1.0, tpr: 1.0 }));
        assert!(roc.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        assert!((trapezoid_area(&roc) - auc(&s, &l).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn separated_and_constant_scores() {
    let labels = [false, false, true, true];
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
    assert_eq!(auc(&[0.4; 4], &labels).unwrap(), 0.5);
    assert_eq!(
        roc_curve(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(),
        vec![
            RocPoint { fpr: 0.0, tpr: 0.0 },
            RocPoint { fpr: 0.0, tpr: 0.5 },
            RocPoint { fpr: 0.0, tpr: 1.0 },
            RocPoint { fpr: 0.5, tpr: 1.0 },
            RocPoint { fpr: 1.0, tpr: 1.0 },
        ]
    );
    assert_eq!(auc(&[0.3, 0.7], &[false, true]).unwrap(), 1.0);
    assert!(matches!(auc(&[0.3, 0.7], &[true, true]), Err(Error::AucUndefined(_))));
}

proptest! {
    #[test]
    fn strictly_increasing_transform_keeps_auc(seed in 0u64..10_000, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let (s, l) = fixture(200, 50, seed);
        let t: Vec<f64> = s.iter().map(|x| a * x.powi(3) + b + x).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
    }

    #[test]
    fn duplicating_negatives_keeps_auc(seed in 0u64..10_000, k in 2usize..6) {
        // tie-free scores
        let (s, l) = fixture(150, u32::MAX, seed);
        let mut s2 = s.clone();
        let mut l2 = l.clone();
        for (x, &y) in s.iter().zip(&l) {
            if !y {
                for _ in 1..k {
                    s2.push(*x);
                    l2.push(false);
                }
            }
        }
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&s2, &l2).unwrap());
    }
}

#[test]
fn length_buckets_match_per_bucket_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sessions: Vec<ScoredSession> = (0..2000)
        .map(|i| {
            let len = 1 + (rng.random::<f64>().powi(3) * 40.0) as usize;
            scored(i, (rng.random_range(0..30) as f64) / 30.0, rng.random_bool(0.2), len)
        })
        .collect();
    let buckets = auc_by_session_length(&sessions, DEFAULT_LENGTH_CAP).unwrap();
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for s in &sessions {
        let key = if s.original_len >= 20 { 20 } else { s.original_len };
        let g = groups.entry(key).or_default();
        g.0.push(s.score);
        g.1.push(s.label.is_buyer());
    }
    assert_eq!(buckets.len(), groups.len());
    for (b, (len, (sc, lb))) in buckets.iter().zip(&groups) {
        assert_eq!(b.length, *len);
        assert_eq!(b.tail, *len == 20);
        assert_eq!(b.stats.count, sc.len());
        let pos = lb.iter().filter(|&&x| x).count();
        match b.stats.auc {
            Some(a) => assert!((a - pairwise_auc(sc, lb)).abs() < 1e-12),
            None => assert!(pos == 0 || pos == sc.len()),
        }
    }
}

#[test]
fn single_class_length_is_reported_undefined() {
    let s = vec![
        scored(1, 0.2, false, 1),
        scored(2, 0.9, true, 1),
        scored(3, 0.4, false, 2),
        scored(4, 0.5, false, 2),
    ];
    let b = auc_by_session_length(&s, 20).unwrap();
    assert_eq!(b.len(), 2);
    assert_eq!((b[0].length, b[0].stats.count, b[0].stats.auc), (1, 2, Some(1.0)));
    assert_eq!((b[1].length, b[1].stats.count, b[1].stats.auc), (2, 2, None));
}

#[test]
fn dwelltime_subset_matches_raw_gap_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut scored_sessions = Vec::new();
    let mut expected = 0;
    for id in 0..1000u64 {
        let len = rng.random_range(1..8);
        let mut t = 1_400_000_000_000i64;
        let events: Vec<ClickEvent> = (0..len)
            .map(|_| {
                let e = ClickEvent {
                    session_id: id,
                    timestamp_ms: t,
                    item_id: 1,
                    category: "0".into(),
                };
                t += rng.random_range(0..300_000);
                e
            })
            .collect();
        // some gap strictly longer than 150 s means an event is replayed
        if events.windows(2).any(|w| w[1].timestamp_ms - w[0].timestamp_ms > 150_000) {
            expected += 1;
        }
        let unrolled = unroll(&events, 150.0).unwrap().0;
        scored_sessions.push(ScoredSession {
            unrolled_len: unrolled.len(),
            ..scored(id, 0.5, id % 3 == 0, len)
        });
    }
    assert_eq!(dwelltime_subset(&scored_sessions).len(), expected);
    // the six-minute example is in, a lone event is out
    let two = [0, 360_000].map(|t| ClickEvent {
        session_id: 1,
        timestamp_ms: t,
        item_id: 1,
        category: "0".into(),
    });
    let s = ScoredSession {
        unrolled_len: unroll(&two, 150.0).unwrap().0.len(),
        ..scored(1, 0.5, true, 2)
    };
    assert_eq!(dwelltime_subset(std::slice::from_ref(&s)).len(), 1);
    assert!(dwelltime_subset(&[scored(2, 0.5, true, 1)]).is_empty());
}

#[test]
fn price_buckets_match_item_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let choices = [None, Some(100), Some(750), Some(751), Some(10_000), Some(10_001), Some(12_462)];
    let mut sessions = Vec::new();
    let (mut high, mut low) = (0, 0);
    for id in 0..3000u64 {
        let prices: Vec<Option<i64>> = (0..rng.random_range(1..5)).map(|_| choices[rng.random_range(0..choices.len())]).collect();
        let priced: Vec<i64> = prices.iter().flatten().copied().collect();
        if priced.iter().any(|&p| p > 10_000) {
            high += 1;
        }
        if !priced.is_empty() && priced.iter().all(|&p| p <= 750) {
            low += 1;
        }
        sessions.push(ScoredSession {
            max_price: priced.iter().copied().max(),
            ..scored(id, rng.random(), rng.random_bool(0.3), prices.len())
        });
    }
    let b = price_buckets(&sessions).unwrap();
    assert_eq!((b.high.count, b.low.count), (high, low));
    assert!(in_high_bucket(&ScoredSession {
        max_price: Some(12_462),
        ..scored(1, 0.5, true, 1)
    }));
    let unpriced = [scored(1, 0.5, true, 1), scored(2, 0.1, false, 1)];
    let b = price_buckets(&unpriced).unwrap();
    assert_eq!((b.high.count, b.low.count), (0, 0));
}

#[test]
fn comparison_uses_the_shared_sessions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ours: Vec<ScoredSession> = (1..=200).map(|i| scored(i, rng.random(), i % 4 == 0, 3)).collect();
    let theirs: HashMap<u64, f64> = (101..=300).map(|i| (i, rng.random())).collect();
    let shared = ours.iter().filter(|s| theirs.keys().any(|k| *k == s.session_id)).count();
    let c = compare_predictions(&ours, &theirs).unwrap();
    assert_eq!(c.intersection, shared);
    assert_eq!((c.only_ours, c.only_theirs), (100, 100));
    let (sc, lb): (Vec<f64>, Vec<bool>) = ours[100..].iter().map(|s| (theirs[&s.session_id], s.label.is_buyer())).unzip();
    assert!((c.theirs.auc.unwrap() - pairwise_auc(&sc, &lb)).abs() < 1e-12);

    let mut file = Vec::new();
    write_predictions(&mut file, &ours).unwrap();
    let same = read_predictions(file.as_slice()).unwrap();
    let c = compare_predictions(&ours, &same).unwrap();
    assert_eq!(c.ours.auc, c.theirs.auc);
    assert_eq!(c.intersection, 200);

    let disjoint: HashMap<u64, f64> = [(9999, 0.5)].into();
    assert!(matches!(compare_predictions(&ours, &disjoint), Err(Error::EmptyIntersection)));
}

#[test]
fn report_sections_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sessions: Vec<ScoredSession> = (0..500)
        .map(|i| ScoredSession {
            unrolled_len: 4,
            max_price: Some(rng.random_range(0..20_000)),
            ..scored(i, rng.random(), rng.random_bool(0.2), rng.random_range(1..30))
        })
        .collect();
    let r = EvalReport::build(&sessions, DEFAULT_LENGTH_CAP).unwrap();
    let text = r.render_text();
    assert!(text.contains(&format!("overall AUC {:.6}", r.auc)));
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert!((json["auc"].as_f64().unwrap() - r.auc).abs() < 1e-15);
    assert_eq!(r.by_length.iter().map(|b| b.stats.count).sum::<usize>(), 500);
    assert_eq!(r.roc_csv().lines().count(), r.roc.len() + 1);
}
