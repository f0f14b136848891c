//! Record-scale detection: tile, predict per window, threshold, merge.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode, nms, DefaultGrid, Interval};
use crate::network::DetectorModel;
use crate::types::Record;

pub const DEFAULT_NMS_IOU: f64 = 0.4;

/// Windows per forward pass during inference.
const INFER_CHUNK: usize = 32;

/// One window of a tiled record.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Seconds from the record start.
    pub start: f64,
    /// `channels × window samples`.
    pub data: Array2<f32>,
    /// Whether the tail of the window is zero padding.
    pub padded: bool,
}

/// Cuts `record` into windows from `t = 0`. Consecutive windows start
/// `stride` seconds apart (default: one window, no overlap). The last window
/// is zero-padded if the record does not fill it.
pub fn tile_record(
    record: &Record,
    window_duration: f64,
    stride: Option<f64>,
) -> Result<Vec<Window>> {
    let fs = record.sample_rate;
    let width = (window_duration * fs).round() as usize;
    if width == 0 || record.samples() < width {
        return Err(Error::RecordTooShort {
            length: record.duration(),
            window: window_duration,
        });
    }
    let step = match stride {
        Some(s) if !(s > 0.0 && s.is_finite()) => {
            return Err(Error::InvalidConfig(format!(
                "stride must be positive, got {s}"
            )))
        }
        Some(s) => ((s * fs).round() as usize).max(1),
        None => width,
    };
    let total = record.samples();
    let mut out = Vec::new();
    let mut first = 0;
    loop {
        let end = (first + width).min(total);
        let mut data = Array2::<f32>::zeros((record.channels(), width));
        data.slice_mut(s![.., ..end - first])
            .assign(&record.data.slice(s![.., first..end]));
        out.push(Window {
            start: first as f64 / fs,
            data,
            padded: end - first < width,
        });
        if first + width >= total {
            break;
        }
        first += step;
    }
    Ok(out)
}

/// A thresholdable prediction: the most likely non-background label of one default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub interval: Interval,
    pub label: u32,
    pub prob: f64,
}

/// Anything that turns a stack of windows into per-window candidates in
/// window coordinates.
pub trait Detector: Sync {
    fn labels(&self) -> usize;
    fn channels(&self) -> usize;
    fn window_samples(&self) -> usize;
    fn window_duration(&self) -> f64;
    fn predict_windows(&self, windows: ArrayView3<f32>) -> Result<Vec<Vec<Candidate>>>;
}

/// A trained network together with its default grid.
#[derive(Debug, Clone)]
pub struct ModelDetector {
    pub model: DetectorModel<f32>,
    pub grid: DefaultGrid,
}

impl ModelDetector {
    pub fn new(model: DetectorModel<f32>, grid: DefaultGrid) -> Result<Self> {
        if grid.len() != model.config.defaults {
            return Err(Error::InvalidConfig(format!(
                "grid has {} defaults, the network {}",
                grid.len(),
                model.config.defaults
            )));
        }
        Ok(Self { model, grid })
    }
}

/// Candidates of one window: per default, the argmax label when it is not background.
pub fn window_candidates(
    loc: ndarray::ArrayView2<f32>,
    probs: ndarray::ArrayView2<f32>,
    grid: &DefaultGrid,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (i, row) in probs.outer_iter().enumerate() {
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        if best == 0 {
            continue;
        }
        let code = [loc[[i, 0]] as f64, loc[[i, 1]] as f64];
        out.push(Candidate {
            interval: decode(grid.default_event(i), code),
            label: best as u32,
            prob: row[best] as f64,
        });
    }
    out
}

impl Detector for ModelDetector {
    fn labels(&self) -> usize {
        self.model.config.labels
    }

    fn channels(&self) -> usize {
        self.model.config.channels
    }

    fn window_samples(&self) -> usize {
        self.model.config.window_samples
    }

    fn window_duration(&self) -> f64 {
        self.grid.window_duration
    }

    fn predict_windows(&self, windows: ArrayView3<f32>) -> Result<Vec<Vec<Candidate>>> {
        let out = self.model.infer(windows)?;
        Ok((0..out.batch())
            .map(|b| {
                window_candidates(
                    out.loc.index_axis(ndarray::Axis(0), b),
                    out.probs.index_axis(ndarray::Axis(0), b),
                    &self.grid,
                )
            })
            .collect())
    }
}

/// Per-label detection thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionThresholds {
    pub theta: BTreeMap<u32, f64>,
}

impl DetectionThresholds {
    pub fn uniform(labels: usize, theta: f64) -> Self {
        Self {
            theta: (1..=labels as u32).map(|l| (l, theta)).collect(),
        }
    }

    pub fn get(&self, label: u32) -> Option<f64> {
        self.theta.get(&label).copied()
    }

    pub fn validate(&self, labels: usize) -> Result<()> {
        for l in 1..=labels as u32 {
            match self.get(l) {
                Some(t) if (0.0..=1.0).contains(&t) => {}
                Some(t) => {
                    return Err(Error::InvalidConfig(format!(
                        "threshold {t} for label {l} outside [0, 1]"
                    )))
                }
                None => return Err(Error::InvalidConfig(format!("no threshold for label {l}"))),
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(
            std::fs::File::open(path)?,
        ))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Record coordinates, seconds.
    pub interval: Interval,
    pub label: u32,
    pub prob: f64,
}

/// Candidates of every window of `record`, shifted to record coordinates.
pub fn record_candidates(
    detector: &dyn Detector,
    record: &Record,
    stride: Option<f64>,
) -> Result<Vec<Candidate>> {
    if record.channels() != detector.channels() {
        return Err(Error::ShapeMismatch {
            expected: vec![detector.channels(), detector.window_samples()],
            actual: vec![record.channels(), record.samples()],
        });
    }
    let windows = tile_record(record, detector.window_duration(), stride)?;
    if windows[0].data.ncols() != detector.window_samples() {
        return Err(Error::ShapeMismatch {
            expected: vec![detector.channels(), detector.window_samples()],
            actual: vec![record.channels(), windows[0].data.ncols()],
        });
    }
    let per_chunk: Vec<Vec<Candidate>> = windows
        .par_chunks(INFER_CHUNK)
        .map(|chunk| {
            let (c, t) = chunk[0].data.dim();
            let mut input = Array3::<f32>::zeros((chunk.len(), c, t));
            for (mut dst, w) in input.outer_iter_mut().zip(chunk) {
                dst.assign(&w.data);
            }
            let preds = detector.predict_windows(input.view())?;
            Ok(preds
                .into_iter()
                .zip(chunk)
                .flat_map(|(cands, w)| {
                    cands.into_iter().map(move |c| Candidate {
                        interval: c.interval.shift(w.start),
                        ..c
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Thresholds candidates per label, clips them to `[0, record_duration]`
/// (dropping whatever lies only in the padding) and merges them with per-label NMS.
pub fn postprocess(
    candidates: &[Candidate],
    thresholds: &DetectionThresholds,
    record_duration: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let mut by_label: BTreeMap<u32, Vec<(Interval, f64)>> = BTreeMap::new();
    for c in candidates {
        let Some(theta) = thresholds.get(c.label) else {
            continue;
        };
        let clipped = c.interval.clip(0.0, record_duration);
        if c.prob >= theta && clipped.duration() > 0.0 {
            by_label.entry(c.label).or_default().push((clipped, c.prob));
        }
    }
    let mut out = Vec::new();
    for (label, cands) in by_label {
        for (interval, prob) in nms(&cands, nms_iou) {
            out.push(Detection {
                interval,
                label,
                prob,
            });
        }
    }
    out.sort_by(|a, b| {
        a.interval
            .start
            .total_cmp(&b.interval.start)
            .then(a.label.cmp(&b.label))
    });
    out
}

/// Detects events over a whole (normalised) record.
pub fn detect_record(
    detector: &dyn Detector,
    record: &Record,
    thresholds: &DetectionThresholds,
    nms_iou: f64,
    stride: Option<f64>,
) -> Result<Vec<Detection>> {
    thresholds.validate(detector.labels())?;
    let candidates = record_candidates(detector, record, stride)?;
    Ok(postprocess(
        &candidates,
        thresholds,
        record.duration(),
        nms_iou,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDetections {
    pub record_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    record_id: String,
    start: f64,
    duration: f64,
    label: u32,
    prob: f64,
}

/// One JSON object per line: `record_id`, `start`, `duration`, `label`, `prob`.
pub fn write_detections<W: Write>(mut out: W, records: &[RecordDetections]) -> Result<()> {
    for r in records {
        for d in &r.detections {
            let line = DetectionLine {
                record_id: r.record_id.clone(),
                start: d.interval.start,
                duration: d.interval.duration(),
                label: d.label,
                prob: d.prob,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Parses detection lines, grouped by record in order of first appearance.
pub fn parse_detections<R: BufRead>(input: R) -> Result<Vec<RecordDetections>> {
    let mut out: Vec<RecordDetections> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DetectionLine =
            serde_json::from_str(&line).map_err(|e| Error::MalformedAnnotation {
                line: n + 1,
                reason: e.to_string(),
            })?;
        if !(d.duration >= 0.0) || !(0.0..=1.0).contains(&d.prob) {
            return Err(Error::MalformedAnnotation {
                line: n + 1,
                reason: "negative duration or probability outside [0, 1]".into(),
            });
        }
        let det = Detection {
            interval: Interval::new(d.start, d.start + d.duration),
            label: d.label,
            prob: d.prob,
        };
        match out.iter_mut().find(|r| r.record_id == d.record_id) {
            Some(r) => r.detections.push(det),
            None => out.push(RecordDetections {
                record_id: d.record_id,
                detections: vec![det],
            }),
        }
    }
    Ok(out)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<RecordDetections>> {
    parse_detections(BufReader::new(std::fs::File::open(path)?))
}

pub fn save_detections(path: impl AsRef<Path>, records: &[RecordDetections]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_detections(&mut f, records)?;
    f.flush()?;
    Ok(())
}
