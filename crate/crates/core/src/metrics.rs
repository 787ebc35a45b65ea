//! Ranking and threshold metrics for scored pairs, in percent.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::data::{Difficulty, PairExample};
use crate::error::{Error, Result};

/// Operating threshold for F1.
pub const F1_THRESHOLD: f64 = 0.5;

/// Minimum count of each class for a report cell to be defined.
pub const MIN_CLASS_COUNT: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub label: u8,
    pub word_length: usize,
    pub oov: bool,
    pub difficulty: Difficulty,
}

impl ScoredPair {
    pub fn new(
        score: f64,
        label: u8,
        word_length: usize,
        oov: bool,
        difficulty: Difficulty,
    ) -> Result<Self> {
        let p = ScoredPair {
            score,
            label,
            word_length,
            oov,
            difficulty,
        };
        p.check()?;
        Ok(p)
    }

    pub fn from_pair(pair: &PairExample, score: f64) -> Result<Self> {
        Self::new(
            score,
            pair.label,
            pair.word_length,
            pair.oov,
            pair.difficulty,
        )
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        if self.label > 1 {
            return Err(Error::InvalidArgument(format!(
                "label {} is not 0 or 1",
                self.label
            )));
        }
        Ok(())
    }
}

fn class_counts(pairs: &[ScoredPair]) -> (usize, usize) {
    let pos = pairs.iter().filter(|p| p.label == 1).count();
    (pos, pairs.len() - pos)
}

fn two_classes(pairs: &[ScoredPair], what: &str) -> Result<(usize, usize)> {
    for p in pairs {
        p.check()?;
    }
    let (pos, neg) = class_counts(pairs);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{what} needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney form with mid-ranks for ties.
pub fn auc(pairs: &[ScoredPair]) -> Result<f64> {
    let (pos, neg) = two_classes(pairs, "AUC")?;
    let mut order: Vec<&ScoredPair> = pairs.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].score == order[i].score {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|p| p.label == 1).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(100.0 * (rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One threshold of the sweep: pairs with `score >= threshold` are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR and FRR at every distinct score, in ascending threshold order.
pub fn roc_points(pairs: &[ScoredPair]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = two_classes(pairs, "ROC")?;
    let mut order: Vec<&ScoredPair> = pairs.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    // walk from the highest score down, accepting one tie group at a time
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = order[i].score;
        while i < order.len() && order[i].score == t {
            if order[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: fp as f64 / neg as f64,
            frr: (pos - tp) as f64 / pos as f64,
        });
    }
    points.reverse();
    Ok(points)
}

/// Sweep over the score set for the threshold minimizing |FAR - FRR| (ties toward smaller
/// FAR + FRR, then lower threshold); returns the mean of the two rates there.
pub fn eer(pairs: &[ScoredPair]) -> Result<f64> {
    let points = roc_points(pairs)?;
    let best = points
        .iter()
        .min_by(|a, b| {
            let key = |p: &RocPoint| ((p.far - p.frr).abs(), p.far + p.frr);
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
        })
        .expect("two classes give at least one threshold");
    Ok(100.0 * (best.far + best.frr) / 2.0)
}

/// F1 of the positive class with predictions `score >= threshold`.
pub fn f1(pairs: &[ScoredPair], threshold: f64) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for p in pairs {
        p.check()?;
        match (p.score >= threshold, p.label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Err(Error::UndefinedMetric(
            "F1 with no positive labels or predictions".into(),
        ));
    }
    Ok(100.0 * (2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricTriple {
    pub eer: f64,
    pub auc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ClassCounts {
    pub positives: usize,
    pub negatives: usize,
}

/// One subset of the report. `metrics` is `None` when either class has fewer than two pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportCell {
    pub metrics: Option<MetricTriple>,
    pub counts: ClassCounts,
}

impl ReportCell {
    fn of(pairs: &[ScoredPair]) -> Result<Self> {
        let (positives, negatives) = class_counts(pairs);
        let counts = ClassCounts {
            positives,
            negatives,
        };
        if positives < MIN_CLASS_COUNT || negatives < MIN_CLASS_COUNT {
            return Ok(ReportCell {
                metrics: None,
                counts,
            });
        }
        Ok(ReportCell {
            metrics: Some(MetricTriple {
                eer: eer(pairs)?,
                auc: auc(pairs)?,
                f1: f1(pairs, F1_THRESHOLD)?,
            }),
            counts,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub overall: ReportCell,
    /// Indexed by word length minus one.
    pub by_word_length: [ReportCell; 4],
    pub oov: ReportCell,
}

pub fn build_report(pairs: &[ScoredPair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot report on an empty pair list".into(),
        ));
    }
    let subset = |f: &dyn Fn(&ScoredPair) -> bool| -> Vec<ScoredPair> {
        pairs.iter().filter(|p| f(p)).cloned().collect()
    };
    let cell = |wl: usize| ReportCell::of(&subset(&|p| p.word_length == wl));
    Ok(MetricsReport {
        overall: ReportCell::of(pairs)?,
        by_word_length: [cell(1)?, cell(2)?, cell(3)?, cell(4)?],
        oov: ReportCell::of(&subset(&|p| p.oov))?,
    })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn rounded(m: Option<MetricTriple>) -> Option<MetricTriple> {
    m.map(|m| MetricTriple {
        eer: round2(m.eer),
        auc: round2(m.auc),
        f1: round2(m.f1),
    })
}

#[derive(Serialize)]
struct ReportJson {
    overall: Option<MetricTriple>,
    by_word_length: BTreeMap<String, Option<MetricTriple>>,
    oov: Option<MetricTriple>,
    counts: CountsJson,
}

#[derive(Serialize)]
struct CountsJson {
    overall: ClassCounts,
    by_word_length: BTreeMap<String, ClassCounts>,
    oov: ClassCounts,
}

impl MetricsReport {
    /// `(name, cell)` in serialization order: overall, wl1..wl4, oov.
    pub fn cells(&self) -> Vec<(String, &ReportCell)> {
        let mut v = vec![("overall".to_string(), &self.overall)];
        for (i, c) in self.by_word_length.iter().enumerate() {
            v.push((format!("wl{}", i + 1), c));
        }
        v.push(("oov".to_string(), &self.oov));
        v
    }

    /// Pretty JSON with values rounded to two decimals and undefined cells as `null`.
    pub fn to_json(&self) -> String {
        let json = ReportJson {
            overall: rounded(self.overall.metrics),
            by_word_length: self
                .by_word_length
                .iter()
                .enumerate()
                .map(|(i, c)| ((i + 1).to_string(), rounded(c.metrics)))
                .collect(),
            oov: rounded(self.oov.metrics),
            counts: CountsJson {
                overall: self.overall.counts,
                by_word_length: self
                    .by_word_length
                    .iter()
                    .enumerate()
                    .map(|(i, c)| ((i + 1).to_string(), c.counts))
                    .collect(),
                oov: self.oov.counts,
            },
        };
        let mut s = serde_json::to_string_pretty(&json).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat CSV: `subset,eer,auc,f1,positives,negatives`; undefined metrics are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subset,eer,auc,f1,positives,negatives\n");
        for (name, c) in self.cells() {
            let m = match rounded(c.metrics) {
                Some(m) => format!("{:.2},{:.2},{:.2}", m.eer, m.auc, m.f1),
                None => ",,".to_string(),
            };
            s.push_str(&format!(
                "{name},{m},{},{}\n",
                c.counts.positives, c.counts.negatives
            ));
        }
        s
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `threshold,far,frr` rows with full precision.
pub fn write_roc_csv(points: &[RocPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("threshold,far,frr\n");
    for p in points {
        s.push_str(&format!("{:e},{:e},{:e}\n", p.threshold, p.far, p.frr));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
