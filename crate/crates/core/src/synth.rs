//! Synthetic recordings with planted, labelled events.
//!
//! Background is 1/f-shaped noise built by summing linearly interpolated
//! white noise at octave-spaced rates, scaled to unit variance. Three event
//! morphologies can be planted on top:
//!
//! * spindle-like: an 11–16 Hz sinusoid under a Hann envelope,
//! * K-complex-like: one negative then one positive half-wave,
//! * arousal-like: a stretch where the background variance is multiplied.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Annotation, DatasetSplit, Event, Record};

pub const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Morphology {
    Spindle,
    KComplex,
    Arousal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub kind: Morphology,
    pub label: u32,
    pub rate_per_minute: f64,
    /// Uniform duration range, seconds.
    pub duration: (f64, f64),
    /// Uniform amplitude range in units of background standard deviation.
    /// For arousals this is the variance multiplier.
    pub amplitude: (f64, f64),
}

impl EventSpec {
    pub fn spindle() -> Self {
        Self {
            kind: Morphology::Spindle,
            label: 1,
            rate_per_minute: 3.0,
            duration: (0.5, 2.0),
            amplitude: (2.0, 3.0),
        }
    }

    pub fn k_complex() -> Self {
        Self {
            kind: Morphology::KComplex,
            label: 2,
            rate_per_minute: 2.0,
            duration: (0.7, 0.9),
            amplitude: (3.0, 5.0),
        }
    }

    pub fn arousal() -> Self {
        Self {
            kind: Morphology::Arousal,
            label: 3,
            rate_per_minute: 0.5,
            duration: (5.0, 15.0),
            amplitude: (3.0, 3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sample_rate: f64,
    pub record_seconds: f64,
    pub channels: usize,
    pub events: Vec<EventSpec>,
    /// Number of octave layers in the background noise.
    pub noise_octaves: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 128.0,
            record_seconds: 600.0,
            channels: 1,
            events: vec![
                EventSpec::spindle(),
                EventSpec::k_complex(),
                EventSpec::arousal(),
            ],
            noise_octaves: 9,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.sample_rate > 0.0) || !(self.record_seconds > 0.0) || self.channels == 0 {
            return bad("sample_rate, record_seconds and channels must be positive".into());
        }
        for e in &self.events {
            if e.label == 0 {
                return bad("event label 0 is reserved for background".into());
            }
            if !(e.rate_per_minute >= 0.0) {
                return bad(format!("negative rate for label {}", e.label));
            }
            if !(e.duration.0 > 0.0 && e.duration.1 >= e.duration.0) {
                return bad(format!("invalid duration range for label {}", e.label));
            }
            if e.duration.1 > self.record_seconds {
                return bad(format!("label {} events longer than the record", e.label));
            }
            if !(e.amplitude.0 >= 0.0 && e.amplitude.1 >= e.amplitude.0) {
                return bad(format!("invalid amplitude range for label {}", e.label));
            }
        }
        Ok(())
    }

    /// Keeps only the event kinds listed, in the given order.
    pub fn with_events(mut self, kinds: &[Morphology]) -> Self {
        self.events.retain(|e| kinds.contains(&e.kind));
        self
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn pink_noise(samples: usize, octaves: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = vec![0.0; samples];
    for o in 0..octaves.max(1) {
        let step = 1usize << o;
        let knots = samples / step + 2;
        let values: Vec<f64> = (0..knots).map(|_| normal.sample(rng)).collect();
        for (i, v) in out.iter_mut().enumerate() {
            let k = i / step;
            let frac = (i % step) as f64 / step as f64;
            *v += values[k] * (1.0 - frac) + values[k + 1] * frac;
        }
    }
    let n = samples as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in &mut out {
        *v = (*v - mean) / std;
    }
    out
}

struct Planned {
    spec: usize,
    start: f64,
    duration: f64,
}

fn place_events(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Planned>> {
    let minutes = cfg.record_seconds / 60.0;
    let mut wanted = Vec::new();
    for (s, spec) in cfg.events.iter().enumerate() {
        let mean = spec.rate_per_minute * minutes;
        let count = if mean > 0.0 {
            Poisson::new(mean).unwrap().sample(rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            wanted.push((s, uniform(rng, spec.duration)));
        }
    }
    // longest first so short events fill the gaps
    wanted.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut placed: Vec<Planned> = Vec::with_capacity(wanted.len());
    for (spec, duration) in wanted {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let start = rng.random_range(0.0..=(cfg.record_seconds - duration));
            let end = start + duration;
            if placed
                .iter()
                .all(|p| end <= p.start || start >= p.start + p.duration)
            {
                placed.push(Planned {
                    spec,
                    start,
                    duration,
                });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::PlacementFailure(PLACEMENT_ATTEMPTS));
        }
    }
    placed.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok(placed)
}

/// Generates one record and its ground-truth annotation.
pub fn generate_record(
    cfg: &SynthConfig,
    id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<(Record, Annotation)> {
    cfg.validate()?;
    let fs = cfg.sample_rate;
    let samples = (cfg.record_seconds * fs).round() as usize;
    let events = place_events(cfg, rng)?;
    let gains: Vec<f64> = (0..cfg.channels)
        .map(|c| {
            if c == 0 {
                1.0
            } else {
                rng.random_range(0.5..1.0)
            }
        })
        .collect();
    let mut data = Array2::<f32>::zeros((cfg.channels, samples));
    for (c, mut row) in data.rows_mut().into_iter().enumerate() {
        let mut x = pink_noise(samples, cfg.noise_octaves, rng);
        for ev in &events {
            let spec = &cfg.events[ev.spec];
            let first = (ev.start * fs).ceil() as usize;
            let last = (((ev.start + ev.duration) * fs).floor() as usize).min(samples - 1);
            let amp = uniform(rng, spec.amplitude) * gains[c];
            match spec.kind {
                Morphology::Spindle => {
                    let freq = rng.random_range(11.0..16.0);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    for (i, v) in x.iter_mut().enumerate().take(last + 1).skip(first) {
                        let t = i as f64 / fs - ev.start;
                        let env = 0.5 * (1.0 - (2.0 * PI * t / ev.duration).cos());
                        *v += amp * env * (2.0 * PI * freq * t + phase).sin();
                    }
                }
                Morphology::KComplex => {
                    for (i, v) in x.iter_mut().enumerate().take(last + 1).skip(first) {
                        let t = i as f64 / fs - ev.start;
                        *v -= amp * (2.0 * PI * t / ev.duration).sin();
                    }
                }
                Morphology::Arousal => {
                    let scale = amp.max(0.0).sqrt();
                    for v in x.iter_mut().take(last + 1).skip(first) {
                        *v *= scale;
                    }
                }
            }
        }
        for (dst, src) in row.iter_mut().zip(x) {
            *dst = src as f32;
        }
    }
    let names = (0..cfg.channels).map(|c| format!("EEG{}", c + 1)).collect();
    let record = Record::new(id, fs, names, data)?;
    let annotation = Annotation::new(
        id,
        events
            .iter()
            .map(|e| Event::from_start(e.start, e.duration, cfg.events[e.spec].label))
            .collect(),
    )?;
    Ok((record, annotation))
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<Record>,
    pub annotations: Vec<Annotation>,
    pub split: DatasetSplit,
}

/// Sizes `(train, validation, test)` of a 60/20/20 split of `n` records.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = ((n as f64 * 0.2).round() as usize).max(1);
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    (n - val - test, val, test)
}

/// Generates `n_records` records, each from its own stream of the master seed.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n_records: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n_records < 3 {
        return Err(Error::InvalidConfig(format!(
            "need at least 3 records for a split, got {n_records}"
        )));
    }
    cfg.validate()?;
    let generated: Vec<(Record, Annotation)> = (0..n_records)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            generate_record(cfg, &format!("rec{i:03}"), &mut rng)
        })
        .collect::<Result<_>>()?;
    let (records, annotations): (Vec<_>, Vec<_>) = generated.into_iter().unzip();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let (train, val, _) = split_sizes(n_records);
    let split = DatasetSplit {
        train: ids[..train].to_vec(),
        validation: ids[train..train + val].to_vec(),
        test: ids[train + val..].to_vec(),
    };
    Ok(SyntheticDataset {
        records,
        annotations,
        split,
    })
}
