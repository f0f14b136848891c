//! Signals, annotated events and training windows.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Interval;

/// Minimum fraction of an event's duration that must fall inside a window
/// for the event to count as present in it.
pub const INCLUSION_FRACTION: f64 = 0.5;

/// A multichannel, uniformly sampled recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub sample_rate: f64,
    pub channel_names: Vec<String>,
    /// `channels × samples`, channel-major.
    pub data: Array2<f32>,
}

impl Record {
    pub fn new(
        id: impl Into<String>,
        sample_rate: f64,
        channel_names: Vec<String>,
        data: Array2<f32>,
    ) -> Result<Self> {
        let (channels, samples) = data.dim();
        if channels == 0 || samples == 0 {
            return Err(Error::InvalidConfig(format!(
                "record needs at least one channel and one sample, got {channels}x{samples}"
            )));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if channel_names.len() != channels {
            return Err(Error::ShapeMismatch {
                expected: vec![channels],
                actual: vec![channel_names.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("record data"));
        }
        Ok(Self {
            id: id.into(),
            sample_rate,
            channel_names,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    /// Length in seconds.
    pub fn duration(&self) -> f64 {
        self.samples() as f64 / self.sample_rate
    }
}

/// A labelled event. Label 0 is background and never appears in annotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub center: f64,
    pub duration: f64,
    pub label: u32,
}

impl Event {
    pub fn new(center: f64, duration: f64, label: u32) -> Self {
        Self {
            center,
            duration,
            label,
        }
    }

    pub fn from_start(start: f64, duration: f64, label: u32) -> Self {
        Self::new(start + duration / 2.0, duration, label)
    }

    pub fn from_interval(interval: Interval, label: u32) -> Self {
        Self::new(interval.center(), interval.duration(), label)
    }

    pub fn start(&self) -> f64 {
        self.center - self.duration / 2.0
    }

    pub fn end(&self) -> f64 {
        self.center + self.duration / 2.0
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.start(), self.end())
    }
}

/// The events scored on one record, kept sorted by start time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    pub record_id: String,
    pub events: Vec<Event>,
}

impl Annotation {
    pub fn new(record_id: impl Into<String>, mut events: Vec<Event>) -> Result<Self> {
        for e in &events {
            if e.label == 0 {
                return Err(Error::InvalidConfig("annotation contains label 0".into()));
            }
            if !(e.duration > 0.0 && e.duration.is_finite() && e.center.is_finite()) {
                return Err(Error::NonPositiveDuration(e.duration));
            }
        }
        sort_by_start(&mut events);
        Ok(Self {
            record_id: record_id.into(),
            events,
        })
    }

    pub fn empty(record_id: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            events: Vec::new(),
        }
    }

    /// Keeps only events whose label is in `labels` and renumbers them
    /// `1..=labels.len()` in the order given.
    pub fn select_labels(&self, labels: &[u32]) -> Annotation {
        let events = self
            .events
            .iter()
            .filter_map(|e| {
                labels
                    .iter()
                    .position(|&l| l == e.label)
                    .map(|p| Event::new(e.center, e.duration, p as u32 + 1))
            })
            .collect();
        Annotation {
            record_id: self.record_id.clone(),
            events,
        }
    }
}

pub(crate) fn sort_by_start(events: &mut [Event]) {
    events.sort_by(|a, b| a.start().total_cmp(&b.start()));
}

/// A training window cut out of a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `channels × window samples`.
    pub data: Array2<f32>,
    /// Events in window coordinates (seconds from the window start).
    pub events: Vec<Event>,
    /// Window start within the source record, seconds.
    pub window_start: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.validation.is_empty() {
            return Err(Error::InvalidConfig(
                "train and validation splits must be non-empty".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::InvalidConfig(format!(
                    "record {id:?} appears in more than one split"
                )));
            }
        }
        Ok(())
    }
}

/// Centers and scales every channel by statistics of the whole recording.
pub fn normalize_record(record: &Record) -> Result<Record> {
    let mut out = record.clone();
    for (c, mut row) in out.data.rows_mut().into_iter().enumerate() {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::ZeroVariance(c));
        }
        row.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
    }
    Ok(out)
}

/// Events of `events` visible in `[window_start, window_start + window_duration]`,
/// clipped to the window and shifted to window coordinates. An event is kept
/// iff at least half of its duration lies inside the window.
pub fn window_events(events: &[Event], window_start: f64, window_duration: f64) -> Vec<Event> {
    let window_end = window_start + window_duration;
    events
        .iter()
        .filter_map(|e| {
            let start = e.start().max(window_start);
            let end = e.end().min(window_end);
            let inside = (end - start).max(0.0);
            if inside / e.duration >= INCLUSION_FRACTION {
                Some(Event::new(
                    (start + end) / 2.0 - window_start,
                    end - start,
                    e.label,
                ))
            } else {
                None
            }
        })
        .collect()
}

/// Cuts a window out of `record`. The start is snapped to the nearest sample.
pub fn extract_sample(
    record: &Record,
    annotation: &Annotation,
    window_start: f64,
    window_duration: f64,
) -> Result<Sample> {
    let fs = record.sample_rate;
    let first = (window_start * fs).round();
    let width = (window_duration * fs).round() as usize;
    let out_of_bounds = || Error::OutOfBounds {
        start: window_start,
        end: window_start + window_duration,
        length: record.duration(),
    };
    if window_start < 0.0 || first < 0.0 || width == 0 {
        return Err(out_of_bounds());
    }
    let first = first as usize;
    if first + width > record.samples() {
        return Err(out_of_bounds());
    }
    let start = first as f64 / fs;
    Ok(Sample {
        data: record.data.slice(s![.., first..first + width]).to_owned(),
        events: window_events(&annotation.events, start, window_duration),
        window_start: start,
    })
}
