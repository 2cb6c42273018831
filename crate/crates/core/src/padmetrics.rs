//! ISO/IEC 30107-3 presentation-attack-detection metrics.
//!
//! Scores are bona-fide likelihoods. A sample is accepted as bona fide when
//! `score >= tau`, so ties at the threshold are accepted. From that rule:
//!
//! - `APCER(tau)`: fraction of attacks with `score >= tau`,
//! - `BPCER(tau)`: fraction of bona fide samples with `score < tau`,
//! - EER: the point where the two curves cross, linearly interpolated
//!   between adjacent thresholds,
//! - `BPCER_AP`: the lowest BPCER reachable while APCER stays at or below
//!   `1 / AP` (BPCER10, BPCER20 and BPCER50 use 10%, 5% and 2%).
//!
//! ACER is not provided; it has been withdrawn from the standard.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("score set is empty")]
    Empty,
    #[error("score set has no {0} samples")]
    MissingClass(Label),
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("APCER target must lie in (0, 1), got {0}")]
    InvalidApcerTarget(f64),
    #[error("aggregation needs at least 2 reports, got {0}")]
    TooFewReports(usize),
    #[error("curve needs at least 2 points")]
    ShortCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
}

/// Paired (score, ground truth) list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoredSample>,
}

impl ScoreSet {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, Label)>) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(score, label)| ScoredSample { score, label })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn scores_of(&self, label: Label) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().filter(move |e| e.label == label).map(|e| e.score)
    }

    /// Non-empty, finite, both classes present.
    pub fn check(&self) -> Result<(), MetricsError> {
        if self.entries.is_empty() {
            return Err(MetricsError::Empty);
        }
        if let Some(index) = self.entries.iter().position(|e| !e.score.is_finite()) {
            return Err(MetricsError::NonFinite { index });
        }
        for label in Label::ALL {
            if self.count(label) == 0 {
                return Err(MetricsError::MissingClass(label));
            }
        }
        Ok(())
    }
}

/// APCER and BPCER at every candidate threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub thresholds: Vec<f64>,
    pub apcer: Vec<f64>,
    pub bpcer: Vec<f64>,
}

impl ErrorCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// `tau,apcer,bpcer` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,apcer,bpcer\n");
        for i in 0..self.len() {
            out.push_str(&format!("{},{},{}\n", self.thresholds[i], self.apcer[i], self.bpcer[i]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some("tau,apcer,bpcer") => {}
            other => return Err(format!("expected header tau,apcer,bpcer, found {other:?}")),
        }
        let mut curve = ErrorCurve {
            thresholds: Vec::new(),
            apcer: Vec::new(),
            bpcer: Vec::new(),
        };
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.trim().split(',').collect();
            let parsed: Result<Vec<f64>, _> = cols.iter().map(|c| c.parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() == 3 => {
                    curve.thresholds.push(v[0]);
                    curve.apcer.push(v[1]);
                    curve.bpcer.push(v[2]);
                }
                _ => return Err(format!("row {}: expected three numbers", i + 2)),
            }
        }
        Ok(curve)
    }
}

/// Sorted score columns plus class totals.
struct Sorted {
    bona: Vec<f64>,
    attack: Vec<f64>,
}

impl Sorted {
    fn new(s: &ScoreSet) -> Self {
        let mut bona: Vec<f64> = s.scores_of(Label::Bonafide).collect();
        let mut attack: Vec<f64> = s.scores_of(Label::Attack).collect();
        bona.sort_by(f64::total_cmp);
        attack.sort_by(f64::total_cmp);
        Self { bona, attack }
    }

    /// (APCER, BPCER) at `tau`.
    fn rates(&self, tau: f64) -> (f64, f64) {
        let attacks_below = self.attack.partition_point(|&x| x < tau);
        let bona_below = self.bona.partition_point(|&x| x < tau);
        let apcer = (self.attack.len() - attacks_below) as f64 / self.attack.len() as f64;
        let bpcer = bona_below as f64 / self.bona.len() as f64;
        (apcer, bpcer)
    }
}

/// Evaluates APCER/BPCER at every distinct score, plus one threshold just
/// below the minimum (everything accepted) and one just above the maximum
/// (everything rejected).
pub fn error_curve(s: &ScoreSet) -> Result<ErrorCurve, MetricsError> {
    s.check()?;
    let sorted = Sorted::new(s);
    let mut unique: Vec<f64> = s.entries.iter().map(|e| e.score).collect();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let lo = unique[0].next_down();
    let hi = unique[unique.len() - 1].next_up();
    let thresholds: Vec<f64> = std::iter::once(lo).chain(unique).chain(std::iter::once(hi)).collect();
    let (apcer, bpcer) = thresholds.iter().map(|&t| sorted.rates(t)).unzip();
    Ok(ErrorCurve {
        thresholds,
        apcer,
        bpcer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate of a score set.
pub fn eer(s: &ScoreSet) -> Result<EerPoint, MetricsError> {
    eer_from_curve(&error_curve(s)?)
}

/// Walks the curve for the first threshold where `APCER - BPCER` reaches
/// zero. An exact zero is returned as is; otherwise both rates and the
/// threshold are interpolated linearly between the two thresholds that
/// bracket the sign change.
pub fn eer_from_curve(curve: &ErrorCurve) -> Result<EerPoint, MetricsError> {
    if curve.len() < 2 {
        return Err(MetricsError::ShortCurve);
    }
    let diff = |i: usize| curve.apcer[i] - curve.bpcer[i];
    for i in 0..curve.len() {
        let d = diff(i);
        if d == 0.0 {
            return Ok(EerPoint {
                eer: curve.apcer[i],
                threshold: curve.thresholds[i],
            });
        }
        if i + 1 < curve.len() && d > 0.0 && diff(i + 1) < 0.0 {
            let frac = d / (d - diff(i + 1));
            let lerp = |a: f64, b: f64| a + frac * (b - a);
            return Ok(EerPoint {
                eer: lerp(curve.apcer[i], curve.apcer[i + 1]),
                threshold: lerp(curve.thresholds[i], curve.thresholds[i + 1]),
            });
        }
    }
    // Only reachable for a hand-built curve that never crosses.
    let i = (0..curve.len())
        .min_by(|&a, &b| diff(a).abs().total_cmp(&diff(b).abs()))
        .expect("non-empty");
    Ok(EerPoint {
        eer: 0.5 * (curve.apcer[i] + curve.bpcer[i]),
        threshold: curve.thresholds[i],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpcerAtApcer {
    pub apcer_max: f64,
    pub bpcer: f64,
    pub threshold: f64,
    /// True when the APCER cap can only be met by rejecting every bona fide
    /// sample.
    pub saturated: bool,
}

/// Lowest BPCER among thresholds whose APCER does not exceed `apcer_max`.
pub fn bpcer_at_apcer(s: &ScoreSet, apcer_max: f64) -> Result<BpcerAtApcer, MetricsError> {
    bpcer_at_apcer_on_curve(&error_curve(s)?, apcer_max)
}

pub fn bpcer_at_apcer_on_curve(curve: &ErrorCurve, apcer_max: f64) -> Result<BpcerAtApcer, MetricsError> {
    if !(apcer_max > 0.0 && apcer_max < 1.0) {
        return Err(MetricsError::InvalidApcerTarget(apcer_max));
    }
    // APCER is non-increasing and BPCER non-decreasing in tau, so the first
    // qualifying threshold gives the minimum BPCER.
    let i = curve
        .apcer
        .iter()
        .position(|&a| a <= apcer_max)
        .ok_or(MetricsError::ShortCurve)?;
    let bpcer = curve.bpcer[i];
    Ok(BpcerAtApcer {
        apcer_max,
        bpcer,
        threshold: curve.thresholds[i],
        saturated: bpcer >= 1.0,
    })
}

/// One ROC vertex with bona fide as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC vertices from (0, 0) to (1, 1), one per distinct score, walking
/// thresholds downward. Tied scores move both rates in one step.
pub fn roc_curve(s: &ScoreSet) -> Result<Vec<RocPoint>, MetricsError> {
    s.check()?;
    let n_bona = s.count(Label::Bonafide) as f64;
    let n_attack = s.count(Label::Attack) as f64;
    let mut entries = s.entries.clone();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint {
        threshold: entries[0].score.next_up(),
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < entries.len() {
        let score = entries[i].score;
        while i < entries.len() && entries[i].score == score {
            match entries[i].label {
                Label::Bonafide => tp += 1,
                Label::Attack => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / n_attack,
            tpr: tp as f64 / n_bona,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve.
pub fn roc_auc(s: &ScoreSet) -> Result<f64, MetricsError> {
    let points = roc_curve(s)?;
    Ok(points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No sample was accepted, so precision is reported as 0.
    pub precision_undefined: bool,
    /// No bona fide sample exists, so recall is reported as 0.
    pub recall_undefined: bool,
}

/// Confusion-matrix metrics at `tau` with bona fide as the positive class.
pub fn threshold_metrics(s: &ScoreSet, tau: f64) -> Result<ThresholdMetrics, MetricsError> {
    if s.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for e in &s.entries {
        match (e.label, e.score >= tau) {
            (Label::Bonafide, true) => tp += 1,
            (Label::Bonafide, false) => fn_ += 1,
            (Label::Attack, true) => fp += 1,
            (Label::Attack, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ThresholdMetrics {
        threshold: tau,
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, s.len()),
        precision,
        recall,
        f1,
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    })
}

/// Default operating threshold for accuracy/F1.
pub const DEFAULT_TAU: f64 = 0.5;

/// APCER caps for BPCER10, BPCER20 and BPCER50.
pub const AP_LEVELS: [(u32, f64); 3] = [(10, 0.10), (20, 0.05), (50, 0.02)];

/// Full metric suite for one score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub bpcer10: BpcerAtApcer,
    pub bpcer20: BpcerAtApcer,
    pub bpcer50: BpcerAtApcer,
    pub auc: f64,
    /// Decision metrics at [`DEFAULT_TAU`].
    pub at_default: ThresholdMetrics,
    /// Decision metrics at the EER threshold.
    pub at_eer: ThresholdMetrics,
    pub n_bonafide: usize,
    pub n_attack: usize,
    pub curve: ErrorCurve,
}

impl PadReport {
    pub fn compute(s: &ScoreSet) -> Result<Self, MetricsError> {
        let curve = error_curve(s)?;
        let eer = eer_from_curve(&curve)?;
        let [bpcer10, bpcer20, bpcer50] =
            AP_LEVELS.map(|(_, cap)| bpcer_at_apcer_on_curve(&curve, cap).expect("valid cap"));
        Ok(PadReport {
            eer: eer.eer,
            eer_threshold: eer.threshold,
            bpcer10,
            bpcer20,
            bpcer50,
            auc: roc_auc(s)?,
            at_default: threshold_metrics(s, DEFAULT_TAU)?,
            at_eer: threshold_metrics(s, eer.threshold)?,
            n_bonafide: s.count(Label::Bonafide),
            n_attack: s.count(Label::Attack),
            curve,
        })
    }

    /// Scalar metrics keyed by name, the rows of an aggregate table.
    pub fn scalars(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("eer", self.eer),
            ("eer_threshold", self.eer_threshold),
            ("bpcer10", self.bpcer10.bpcer),
            ("bpcer20", self.bpcer20.bpcer),
            ("bpcer50", self.bpcer50.bpcer),
            ("auc", self.auc),
            ("accuracy", self.at_default.accuracy),
            ("precision", self.at_default.precision),
            ("recall", self.at_default.recall),
            ("f1", self.at_default.f1),
            ("accuracy_at_eer", self.at_eer.accuracy),
            ("f1_at_eer", self.at_eer.f1),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        // Offsetting by the first value makes identical inputs give an exact
        // mean and a zero spread.
        let first = values[0];
        let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, std: var.sqrt() }
    }

    /// `"18.05 ± 7.04"` style, values scaled to percent.
    pub fn percent(&self) -> String {
        format!("{:.2} \u{b1} {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }

    /// `"0.880 ± 0.021"` style.
    pub fn plain(&self) -> String {
        format!("{:.3} \u{b1} {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_folds: usize,
    pub metrics: BTreeMap<String, MeanStd>,
    /// Folds whose BPCER_AP hit the everything-rejected ceiling, per level.
    pub saturated_folds: BTreeMap<String, usize>,
}

/// Unweighted mean and sample standard deviation of every scalar metric.
pub fn aggregate_folds(reports: &[PadReport]) -> Result<AggregateReport, MetricsError> {
    if reports.len() < 2 {
        return Err(MetricsError::TooFewReports(reports.len()));
    }
    let per_fold: Vec<BTreeMap<&str, f64>> = reports.iter().map(PadReport::scalars).collect();
    let metrics = per_fold[0]
        .keys()
        .map(|&name| {
            let values: Vec<f64> = per_fold.iter().map(|m| m[name]).collect();
            (name.to_string(), MeanStd::of(&values))
        })
        .collect();
    let saturated_folds = [
        ("bpcer10", reports.iter().filter(|r| r.bpcer10.saturated).count()),
        ("bpcer20", reports.iter().filter(|r| r.bpcer20.saturated).count()),
        ("bpcer50", reports.iter().filter(|r| r.bpcer50.saturated).count()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(AggregateReport {
        n_folds: reports.len(),
        metrics,
        saturated_folds,
    })
}

/// Canonical JSON: keys sorted at every level, two-space indentation.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable report");
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}
