//! Consensus annotations from several scorers by thresholding the fraction
//! of scorers marking each time step.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Annotation, Event};

/// Slack for comparing a scorer count against `κ·N`, so that e.g. 3 of 5
/// passes at κ = 0.6 even though `0.6 * 5.0` is not exactly 3.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub kappa: f64,
    /// Seconds per step.
    pub resolution: f64,
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "kappa {} outside (0, 1]",
                self.kappa
            )));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::NonPositiveDuration(self.resolution));
        }
        Ok(())
    }
}

/// Marks step `i` iff its midpoint `(i + 0.5)·resolution` lies in some
/// event's half-open extent `[start, end)`.
pub fn events_to_binary(events: &[Event], steps: usize, resolution: f64) -> Result<Vec<bool>> {
    let span = steps as f64 * resolution;
    let mut y = vec![false; steps];
    for e in events {
        let (start, end) = (e.start(), e.end());
        if start < -COUNT_SLACK || end > span + COUNT_SLACK {
            return Err(Error::OutOfRange { start, end, span });
        }
        let lo = ((start / resolution - 0.5).floor().max(0.0)) as usize;
        let hi = ((end / resolution).ceil().max(0.0) as usize).min(steps);
        for (i, slot) in y.iter_mut().enumerate().take(hi).skip(lo) {
            let mid = (i as f64 + 0.5) * resolution;
            if mid >= start && mid < end {
                *slot = true;
            }
        }
    }
    Ok(y)
}

/// Maximal runs of marked steps as events of `label`.
pub fn binary_to_events(y: &[bool], resolution: f64, label: u32) -> Vec<Event> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < y.len() {
        if y[i] {
            let first = i;
            while i < y.len() && y[i] {
                i += 1;
            }
            out.push(Event::from_start(
                first as f64 * resolution,
                (i - first) as f64 * resolution,
                label,
            ));
        } else {
            i += 1;
        }
    }
    out
}

/// Per label: keeps the steps marked by at least a fraction `kappa` of the
/// scorers and turns the surviving runs into events.
pub fn consensus_events(
    scorers: &[Annotation],
    cfg: &ConsensusConfig,
    steps: usize,
) -> Result<Annotation> {
    cfg.validate()?;
    let Some(first) = scorers.first() else {
        return Err(Error::InvalidConfig(
            "consensus needs at least one scorer".into(),
        ));
    };
    let labels: BTreeSet<u32> = scorers
        .iter()
        .flat_map(|a| a.events.iter().map(|e| e.label))
        .collect();
    let needed = cfg.kappa * scorers.len() as f64 - COUNT_SLACK;
    let mut events = Vec::new();
    for label in labels {
        let mut counts = vec![0usize; steps];
        for a in scorers {
            let own: Vec<Event> = a
                .events
                .iter()
                .filter(|e| e.label == label)
                .copied()
                .collect();
            for (c, marked) in counts
                .iter_mut()
                .zip(events_to_binary(&own, steps, cfg.resolution)?)
            {
                *c += marked as usize;
            }
        }
        let kept: Vec<bool> = counts.iter().map(|&c| c as f64 >= needed).collect();
        events.extend(binary_to_events(&kept, cfg.resolution, label));
    }
    Annotation::new(first.record_id.clone(), events)
}
