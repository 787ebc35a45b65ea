use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal_kws::data::Difficulty;
use xmodal_kws::metrics::*;
use xmodal_kws::Error;

fn pair(score: f64, label: u8, wl: usize, oov: bool) -> ScoredPair {
    let d = if label == 1 {
        Difficulty::Positive
    } else {
        Difficulty::Hard
    };
    ScoredPair::new(score, label, wl, oov, d).unwrap()
}

fn simple(scores: &[f64], labels: &[u8]) -> Vec<ScoredPair> {
    scores
        .iter()
        .zip(labels)
        .map(|(s, l)| pair(*s, *l, 1, false))
        .collect()
}

/// Random instance with both classes, sizes up to `max`. Scores on a coarse grid when `ties`.
fn instance(rng: &mut ChaCha8Rng, max: usize, ties: bool) -> Vec<ScoredPair> {
    loop {
        let n = rng.gen_range(2..=max);
        let v: Vec<ScoredPair> = (0..n)
            .map(|_| {
                let s = if ties {
                    rng.gen_range(0..=10) as f64 / 10.0
                } else {
                    rng.gen::<f64>()
                };
                pair(s, rng.gen_range(0..=1), 1, false)
            })
            .collect();
        if v.iter().any(|p| p.label == 1) && v.iter().any(|p| p.label == 0) {
            return v;
        }
    }
}

fn pairwise_auc(v: &[ScoredPair]) -> f64 {
    let (mut won, mut total) = (0.0, 0.0);
    for p in v.iter().filter(|p| p.label == 1) {
        for n in v.iter().filter(|p| p.label == 0) {
            total += 1.0;
            if p.score > n.score {
                won += 1.0;
            } else if p.score == n.score {
                won += 0.5;
            }
        }
    }
    100.0 * won / total
}

/// Recounts FAR/FRR from scratch at every score in the set.
fn sweep_eer(v: &[ScoredPair]) -> f64 {
    let pos = v.iter().filter(|p| p.label == 1).count();
    let neg = v.len() - pos;
    let mut best: Option<(f64, f64)> = None;
    for t in v.iter().map(|p| p.score) {
        let fa = v.iter().filter(|p| p.label == 0 && p.score >= t).count();
        let fr = v.iter().filter(|p| p.label == 1 && p.score < t).count();
        let (far, frr) = (fa as f64 / neg as f64, fr as f64 / pos as f64);
        let cand = ((far - frr).abs(), far + frr);
        if best.is_none_or(|b| cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1)) {
            best = Some(cand);
        }
    }
    100.0 * best.unwrap().1 / 2.0
}

/// EER at the linearly interpolated crossing of FAR and FRR.
fn interpolated_eer(v: &[ScoredPair]) -> f64 {
    let pos = v.iter().filter(|p| p.label == 1).count() as f64;
    let neg = v.len() as f64 - pos;
    let mut ts: Vec<f64> = v.iter().map(|p| p.score).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut prev = (0.0, 1.0);
    for t in ts {
        let far = v.iter().filter(|p| p.label == 0 && p.score >= t).count() as f64 / neg;
        let frr = v.iter().filter(|p| p.label == 1 && p.score < t).count() as f64 / pos;
        let (d0, d1) = (prev.0 - prev.1, far - frr);
        if d1 >= 0.0 {
            let a = if d1 == d0 { 0.0 } else { d0 / (d0 - d1) };
            return 100.0 * (prev.0 + a * (far - prev.0));
        }
        prev = (far, frr);
    }
    unreachable!("accepting everything gives FAR 1, FRR 0")
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..200 {
        let v = instance(&mut rng, 50, i % 2 == 0);
        assert!((auc(&v).unwrap() - pairwise_auc(&v)).abs() <= 1e-12);
    }
}

#[test]
fn eer_matches_sweep_and_interpolation_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..200 {
        let ties = i % 2 == 0;
        let v = instance(&mut rng, 50, ties);
        let e = eer(&v).unwrap();
        assert_eq!(e, sweep_eer(&v));
        if !ties {
            let pos = v.iter().filter(|p| p.label == 1).count();
            let bound = 100.0 / (2.0 * pos.min(v.len() - pos) as f64);
            assert!((e - interpolated_eer(&v)).abs() <= bound + 1e-9);
        }
    }
}

#[test]
fn f1_matches_hand_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let v = instance(&mut rng, 40, true);
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for p in &v {
            let predicted = p.score >= 0.5;
            tp += usize::from(predicted && p.label == 1);
            fp += usize::from(predicted && p.label == 0);
            fn_ += usize::from(!predicted && p.label == 1);
        }
        let expected = 100.0 * (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        assert_eq!(f1(&v, F1_THRESHOLD).unwrap(), expected);
    }
}

#[test]
fn examples() {
    assert_eq!(
        auc(&simple(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(),
        75.0
    );
    assert_eq!(auc(&simple(&[0.3; 5], &[0, 1, 0, 1, 1])).unwrap(), 50.0);
    assert_eq!(
        eer(&simple(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0])).unwrap(),
        50.0
    );
    assert_eq!(
        eer(&simple(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0])).unwrap(),
        100.0
    );

    let sep = simple(&[0.1, 0.2, 0.3, 0.7, 0.8], &[0, 0, 0, 1, 1]);
    assert_eq!(auc(&sep).unwrap(), 100.0);
    assert_eq!(eer(&sep).unwrap(), 0.0);
    assert_eq!(f1(&sep, 0.5).unwrap(), 100.0);

    // TP=1, FP=1, FN=1
    assert_eq!(
        f1(&simple(&[0.9, 0.6, 0.2, 0.1], &[1, 0, 1, 0]), 0.5).unwrap(),
        50.0
    );
    assert!(matches!(
        f1(&simple(&[0.1, 0.2], &[0, 0]), 0.5),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(matches!(
        auc(&simple(&[0.1, 0.2], &[1, 1])),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(matches!(
        eer(&simple(&[0.1, 0.2], &[0, 0])),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(ScoredPair::new(f64::NAN, 1, 1, false, Difficulty::Positive).is_err());
    assert!(ScoredPair::new(0.5, 2, 1, false, Difficulty::Positive).is_err());
}

#[test]
fn roc_points_are_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let v = instance(&mut rng, 50, true);
    let pts = roc_points(&v).unwrap();
    assert_eq!(pts[0].far, 1.0);
    assert_eq!(pts[0].frr, 0.0);
    for w in pts.windows(2) {
        assert!(w[0].threshold < w[1].threshold);
        assert!(w[0].far >= w[1].far && w[0].frr <= w[1].frr);
    }
}

fn wl_pairs() -> Vec<ScoredPair> {
    vec![
        pair(0.9, 1, 1, false),
        pair(0.8, 1, 1, false),
        pair(0.3, 0, 1, false),
        pair(0.6, 0, 1, false),
        pair(0.7, 1, 2, true),
        pair(0.4, 1, 2, true),
        pair(0.2, 0, 2, true),
        pair(0.45, 0, 2, true),
        pair(0.55, 0, 2, false),
    ]
}

#[test]
fn report_cells() {
    let v = wl_pairs();
    let r = build_report(&v).unwrap();
    assert_eq!(r.overall.metrics.unwrap().auc, auc(&v).unwrap());
    assert!(r.by_word_length[0].metrics.is_some());
    assert!(r.by_word_length[1].metrics.is_some());
    assert!(r.by_word_length[2].metrics.is_none());
    assert!(r.by_word_length[3].metrics.is_none());
    assert_eq!(
        r.by_word_length[1].counts,
        ClassCounts {
            positives: 2,
            negatives: 3
        }
    );
    let oov: Vec<ScoredPair> = v.iter().filter(|p| p.oov).cloned().collect();
    assert_eq!(r.oov.metrics.unwrap().auc, auc(&oov).unwrap());
    assert_eq!(
        r.oov.counts,
        ClassCounts {
            positives: 2,
            negatives: 2
        }
    );
    assert!(build_report(&[]).is_err());

    // a single positive leaves the cell undefined
    let one = vec![
        pair(0.9, 1, 3, false),
        pair(0.1, 0, 3, false),
        pair(0.2, 0, 3, false),
    ];
    assert!(build_report(&one).unwrap().overall.metrics.is_none());
}

#[test]
fn report_serialization() {
    let r = build_report(&wl_pairs()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let o = &json["overall"];
    for k in ["eer", "auc", "f1"] {
        let x = o[k].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&x));
        assert_eq!((x * 100.0).round() / 100.0, x);
    }
    // 17 of 20 positive-negative comparisons won
    assert_eq!(json["overall"]["auc"].as_f64().unwrap(), 85.0);
    assert!(json["by_word_length"]["3"].is_null());
    assert!(json["by_word_length"]["1"]["f1"].is_number());
    assert_eq!(json["counts"]["by_word_length"]["2"]["negatives"], 3);
    assert_eq!(json["counts"]["oov"]["positives"], 2);
    assert_eq!(r.to_json(), build_report(&wl_pairs()).unwrap().to_json());

    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "subset,eer,auc,f1,positives,negatives");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("overall,") && lines[1].contains(",85.00,"));
    assert_eq!(lines[4], "wl3,,,,0,0");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("roc.csv");
    write_roc_csv(&roc_points(&wl_pairs()).unwrap(), &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next(), Some("threshold,far,frr"));
    assert_eq!(text.lines().count(), 1 + wl_pairs().len());
}

fn grid_instance() -> impl Strategy<Value = Vec<(u32, u8)>> {
    prop::collection::vec((0u32..=1000, 0u8..=1), 2..60).prop_filter("both classes", |v| {
        v.iter().any(|x| x.1 == 1) && v.iter().any(|x| x.1 == 0)
    })
}

proptest! {
    #[test]
    fn auc_and_eer_ignore_monotone_transforms(v in grid_instance(), which in 0usize..3) {
        let g = |x: f64| match which {
            0 => x * x * x,
            1 => (x.exp() - 1.0) / (1f64.exp() - 1.0),
            _ => 0.25 + 0.5 * x.sqrt(),
        };
        let base: Vec<ScoredPair> = v.iter().map(|(s, l)| pair(*s as f64 / 1000.0, *l, 1, false)).collect();
        let moved: Vec<ScoredPair> = base.iter().map(|p| pair(g(p.score), p.label, 1, false)).collect();
        prop_assert_eq!(auc(&base).unwrap(), auc(&moved).unwrap());
        prop_assert_eq!(eer(&base).unwrap(), eer(&moved).unwrap());
    }

    #[test]
    fn metrics_stay_in_range(v in grid_instance()) {
        let v: Vec<ScoredPair> = v.iter().map(|(s, l)| pair(*s as f64 / 1000.0, *l, 1, false)).collect();
        for x in [auc(&v).unwrap(), eer(&v).unwrap(), f1(&v, 0.5).unwrap_or(0.0)] {
            prop_assert!((0.0..=100.0).contains(&x));
        }
    }
}
