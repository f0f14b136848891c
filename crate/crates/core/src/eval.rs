//! By-event precision, recall and F1 at IoU criteria, and threshold calibration.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Interval};
use crate::inference::{
    postprocess, record_candidates, Detection, DetectionThresholds, Detector, RecordDetections,
};
use crate::train::LabeledSet;
use crate::types::Annotation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub deltas: Vec<f64>,
    pub theta_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            deltas: (1..=9).map(|k| k as f64 / 10.0).collect(),
            theta_grid: (1..=19).map(|k| k as f64 * 5.0 / 100.0).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::InvalidConfig(
                "deltas must be non-empty and lie in (0, 1]".into(),
            ));
        }
        if self.theta_grid.is_empty() || self.theta_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidConfig(
                "theta_grid must be non-empty and lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Greedy one-to-one matching. Predictions `(interval, probability)` are
/// visited by decreasing probability (earlier start first on ties); each
/// takes the unclaimed truth of highest IoU if that IoU reaches `delta`.
pub fn match_detections(
    predictions: &[(Interval, f64)],
    truths: &[Interval],
    delta: f64,
) -> MatchCounts {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .1
            .total_cmp(&predictions[a].1)
            .then(predictions[a].0.start.total_cmp(&predictions[b].0.start))
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; truths.len()];
    let mut tp = 0;
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if claimed[t] {
                continue;
            }
            let v = iou(predictions[p].0, *truth);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        if let Some((t, v)) = best {
            if v >= delta {
                claimed[t] = true;
                tp += 1;
            }
        }
    }
    MatchCounts {
        tp,
        fp: predictions.len() - tp,
        fn_: truths.len() - tp,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<MatchCounts> for Metrics {
    fn from(c: MatchCounts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub record_id: String,
    pub label: u32,
    pub delta: f64,
    pub metrics: Metrics,
    pub counts: MatchCounts,
}

/// Unweighted mean over records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: u32,
    pub delta: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_record: Vec<RecordMetrics>,
    pub summary: Vec<SummaryRow>,
}

impl MetricsReport {
    pub fn mean(&self, label: u32, delta: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.label == label && (r.delta - delta).abs() < 1e-12)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "record_id,label,delta,precision,recall,f1,tp,fp,fn")?;
        for r in &self.per_record {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.record_id,
                r.label,
                r.delta,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_
            )?;
        }
        Ok(())
    }

    /// F1 by IoU criterion, one column per label.
    pub fn write_f1_table<W: Write>(&self, mut out: W) -> Result<()> {
        let mut labels: Vec<u32> = self.summary.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        let mut deltas: Vec<f64> = self.summary.iter().map(|r| r.delta).collect();
        deltas.sort_by(f64::total_cmp);
        deltas.dedup();
        write!(out, "delta")?;
        for l in &labels {
            write!(out, ",f1_label_{l}")?;
        }
        writeln!(out)?;
        for d in deltas {
            write!(out, "{d}")?;
            for &l in &labels {
                write!(out, ",{}", self.mean(l, d).map_or(0.0, |r| r.f1))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Per-δ means as JSON: `{"records": n, "summary": [...]}`.
    pub fn summary_json(&self) -> serde_json::Value {
        let records: std::collections::BTreeSet<&str> = self
            .per_record
            .iter()
            .map(|r| r.record_id.as_str())
            .collect();
        serde_json::json!({ "records": records.len(), "summary": self.summary })
    }
}

fn label_metrics(
    detections: &[Detection],
    truths: &Annotation,
    label: u32,
    delta: f64,
) -> MatchCounts {
    let preds: Vec<(Interval, f64)> = detections
        .iter()
        .filter(|d| d.label == label)
        .map(|d| (d.interval, d.prob))
        .collect();
    let truth: Vec<Interval> = truths
        .events
        .iter()
        .filter(|e| e.label == label)
        .map(|e| e.interval())
        .collect();
    match_detections(&preds, &truth, delta)
}

/// Per-record metrics for every label and IoU criterion, then their
/// unweighted means over records. The records are those of `annotations`.
pub fn evaluate(
    predictions: &[RecordDetections],
    annotations: &[Annotation],
    labels: &[u32],
    deltas: &[f64],
) -> Result<MetricsReport> {
    for p in predictions {
        if !annotations.iter().any(|a| a.record_id == p.record_id) {
            return Err(Error::MissingRecord(p.record_id.clone()));
        }
    }
    let empty = Vec::new();
    let per_record: Vec<RecordMetrics> = annotations
        .par_iter()
        .flat_map_iter(|ann| {
            let dets = predictions
                .iter()
                .find(|p| p.record_id == ann.record_id)
                .map_or(&empty, |p| &p.detections);
            labels.iter().flat_map(move |&label| {
                deltas.iter().map(move |&delta| {
                    let counts = label_metrics(dets, ann, label, delta);
                    RecordMetrics {
                        record_id: ann.record_id.clone(),
                        label,
                        delta,
                        metrics: counts.into(),
                        counts,
                    }
                })
            })
        })
        .collect();
    let mut summary = Vec::new();
    for &label in labels {
        for &delta in deltas {
            let rows: Vec<&RecordMetrics> = per_record
                .iter()
                .filter(|r| r.label == label && r.delta == delta)
                .collect();
            let n = rows.len().max(1) as f64;
            summary.push(SummaryRow {
                label,
                delta,
                precision: rows.iter().map(|r| r.metrics.precision).sum::<f64>() / n,
                recall: rows.iter().map(|r| r.metrics.recall).sum::<f64>() / n,
                f1: rows.iter().map(|r| r.metrics.f1).sum::<f64>() / n,
            });
        }
    }
    Ok(MetricsReport {
        per_record,
        summary,
    })
}

/// Chosen thresholds plus, per label, the mean F1 at every grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub delta: f64,
    pub thresholds: DetectionThresholds,
    pub curves: BTreeMap<u32, Vec<(f64, f64)>>,
}

impl Calibration {
    pub fn f1(&self, label: u32) -> f64 {
        let theta = self.thresholds.get(label).unwrap_or(f64::NAN);
        self.curves
            .get(&label)
            .and_then(|c| c.iter().find(|(t, _)| *t == theta))
            .map_or(0.0, |(_, f)| *f)
    }
}

/// Grid search for the per-label threshold maximising mean validation F1 at
/// `delta`; ties go to the lower threshold.
pub fn calibrate_thresholds(
    detector: &dyn Detector,
    validation: &LabeledSet,
    delta: f64,
    cfg: &EvalConfig,
    nms_iou: f64,
    stride: Option<f64>,
) -> Result<Calibration> {
    cfg.validate()?;
    if validation.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let candidates: Vec<_> = validation
        .records
        .par_iter()
        .map(|r| record_candidates(detector, r, stride))
        .collect::<Result<_>>()?;
    let mut grid = cfg.theta_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let labels = detector.labels();
    let mut thresholds = DetectionThresholds::uniform(labels, grid[0]);
    let mut curves = BTreeMap::new();
    for label in 1..=labels as u32 {
        let curve: Vec<(f64, f64)> = grid
            .par_iter()
            .map(|&theta| {
                let th = DetectionThresholds {
                    theta: BTreeMap::from([(label, theta)]),
                };
                let total: f64 = candidates
                    .iter()
                    .zip(validation.records.iter().zip(&validation.annotations))
                    .map(|(cands, (rec, ann))| {
                        let dets = postprocess(cands, &th, rec.duration(), nms_iou);
                        Metrics::from(label_metrics(&dets, ann, label, delta)).f1
                    })
                    .sum();
                (theta, total / validation.len() as f64)
            })
            .collect();
        let mut best = curve[0];
        for &point in &curve[1..] {
            if point.1 > best.1 {
                best = point;
            }
        }
        thresholds.theta.insert(label, best.0);
        curves.insert(label, curve);
    }
    Ok(Calibration {
        delta,
        thresholds,
        curves,
    })
}
