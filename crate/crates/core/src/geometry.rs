//! Interval overlap, default-event grids, target encoding and matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Event;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        debug_assert!(end >= start, "interval end {end} before start {start}");
        Self { start, end }
    }

    pub fn from_center(center: f64, duration: f64) -> Self {
        Self::new(center - duration / 2.0, center + duration / 2.0)
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        (self.start + self.end) / 2.0
    }

    pub fn shift(&self, by: f64) -> Self {
        Self::new(self.start + by, self.end + by)
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Self {
        let start = self.start.clamp(lo, hi);
        Self::new(start, self.end.clamp(start, hi))
    }
}

/// Intersection over union of two intervals. Zero-length intervals give 0.
pub fn iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Default events tiled over a window, all with the same duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultGrid {
    pub window_duration: f64,
    pub default_duration: f64,
    pub overlap: f64,
    pub centers: Vec<f64>,
}

impl DefaultGrid {
    pub fn build(window_duration: f64, default_duration: f64, overlap: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::InvalidOverlap(overlap));
        }
        for d in [window_duration, default_duration] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::NonPositiveDuration(d));
            }
        }
        let step = default_duration * (1.0 - overlap);
        let count = ((window_duration / step).round() as usize).max(1);
        let centers = (0..count).map(|i| (i as f64 + 0.5) * step).collect();
        Ok(Self {
            window_duration,
            default_duration,
            overlap,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.default_duration * (1.0 - self.overlap)
    }

    pub fn default_event(&self, i: usize) -> (f64, f64) {
        (self.centers[i], self.default_duration)
    }

    pub fn interval(&self, i: usize) -> Interval {
        Interval::from_center(self.centers[i], self.default_duration)
    }
}

/// Offsets of `truth` relative to `default`, both given as `(center, duration)`:
/// the center shift in units of the default duration and the log duration ratio.
pub fn encode(default: (f64, f64), truth: (f64, f64)) -> Result<[f64; 2]> {
    let (dc, dd) = default;
    let (tc, td) = truth;
    if !(dd > 0.0) {
        return Err(Error::NonPositiveDuration(dd));
    }
    if !(td > 0.0) {
        return Err(Error::NonPositiveDuration(td));
    }
    Ok([(tc - dc) / dd, (td / dd).ln()])
}

/// Inverse of [`encode`].
pub fn decode(default: (f64, f64), code: [f64; 2]) -> Interval {
    let (dc, dd) = default;
    Interval::from_center(dc + code[0] * dd, dd * code[1].exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub eta: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { eta: 0.5 }
    }
}

/// Default-to-truth assignment produced by [`match_defaults`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// Indexed by default; holds an index into the truth list.
    pub assignment: Vec<Option<usize>>,
}

impl Matching {
    pub fn positives(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

/// Assigns defaults to true events in two passes. First every truth, taken
/// by increasing start time, claims the still-free default it overlaps most.
/// Then each free default goes to the truth it overlaps most, provided that
/// IoU exceeds `eta`. Ties resolve to the lowest index.
pub fn match_defaults(grid: &DefaultGrid, truths: &[Event], cfg: &MatchConfig) -> Matching {
    let n = grid.len();
    let mut assignment = vec![None; n];
    if truths.is_empty() {
        return Matching { assignment };
    }
    let defaults: Vec<Interval> = (0..n).map(|i| grid.interval(i)).collect();
    let mut order: Vec<usize> = (0..truths.len()).collect();
    order.sort_by(|&a, &b| {
        truths[a]
            .start()
            .total_cmp(&truths[b].start())
            .then(a.cmp(&b))
    });

    for &j in &order {
        let t = truths[j].interval();
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in defaults.iter().enumerate() {
            if assignment[i].is_some() {
                continue;
            }
            let v = iou(*d, t);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            assignment[i] = Some(j);
        }
    }

    for (i, d) in defaults.iter().enumerate() {
        if assignment[i].is_some() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &j in &order {
            let v = iou(*d, truths[j].interval());
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v > cfg.eta {
                assignment[i] = Some(j);
            }
        }
    }
    Matching { assignment }
}

/// Greedy non-maximum suppression. Keeps the highest-scoring event (earlier
/// start on ties), drops everything overlapping it with IoU at or above
/// `iou_threshold`, and repeats. Output is sorted by start time.
pub fn nms(events: &[(Interval, f64)], iou_threshold: f64) -> Vec<(Interval, f64)> {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        events[b]
            .1
            .total_cmp(&events[a].1)
            .then(events[a].0.start.total_cmp(&events[b].0.start))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<(Interval, f64)> = Vec::new();
    for idx in order {
        let cand = events[idx];
        if kept.iter().all(|k| iou(k.0, cand.0) < iou_threshold) {
            kept.push(cand);
        }
    }
    kept.sort_by(|a, b| a.0.start.total_cmp(&b.0.start).then(b.1.total_cmp(&a.1)));
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(a: f64, b: f64) -> Interval {
        Interval::new(a, b)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(iv(0.0, 2.0), iv(0.0, 2.0)), 1.0);
        assert_eq!(iou(iv(0.0, 1.0), iv(2.0, 3.0)), 0.0);
        assert!((iou(iv(0.0, 2.0), iv(1.0, 3.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(iv(1.0, 1.0), iv(1.0, 1.0)), 0.0);
    }

    #[test]
    fn grid_examples() {
        let g = DefaultGrid::build(20.0, 1.0, 0.75).unwrap();
        assert_eq!(g.len(), 80);
        assert_eq!(g.step(), 0.25);
        assert_eq!(g.centers[0], 0.125);
        assert_eq!(g.centers[1], 0.375);
        assert_eq!(g.centers[79], 19.875);

        let one = DefaultGrid::build(20.0, 20.0, 0.0).unwrap();
        assert_eq!(one.centers, vec![10.0]);
        assert_eq!(one.interval(0), iv(0.0, 20.0));

        let long = DefaultGrid::build(120.0, 15.0, 0.5).unwrap();
        assert_eq!(long.step(), 7.5);
        assert_eq!(long.len(), 16);

        assert!(matches!(
            DefaultGrid::build(20.0, 1.0, 1.0),
            Err(Error::InvalidOverlap(_))
        ));
        assert!(matches!(
            DefaultGrid::build(20.0, 1.0, -0.1),
            Err(Error::InvalidOverlap(_))
        ));
        assert!(DefaultGrid::build(20.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode((3.0, 2.0), (3.0, 2.0)).unwrap(), [0.0, 0.0]);
        let c = encode((5.125, 1.0), (5.1, 1.0)).unwrap();
        assert!((c[0] + 0.025).abs() < 1e-12 && c[1] == 0.0);
        let c = encode((5.0, 1.0), (5.5, 2.0)).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!((c[1] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            encode((5.0, 0.0), (5.0, 1.0)),
            Err(Error::NonPositiveDuration(_))
        ));
        assert!(matches!(
            encode((5.0, 1.0), (5.0, -1.0)),
            Err(Error::NonPositiveDuration(_))
        ));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode((5.0, 1.0), [0.0, 0.0]), iv(4.5, 5.5));
        let d = decode((5.0, 1.0), [0.5, std::f64::consts::LN_2]);
        assert!((d.start - 4.5).abs() < 1e-12 && (d.end - 6.5).abs() < 1e-12);
    }

    #[test]
    fn no_truths_means_all_background() {
        let g = DefaultGrid::build(20.0, 1.0, 0.75).unwrap();
        let m = match_defaults(&g, &[], &MatchConfig::default());
        assert_eq!(m.positives(), 0);
    }

    #[test]
    fn bipartite_step_picks_best_default() {
        let g = DefaultGrid::build(20.0, 1.0, 0.75).unwrap();
        let truth = Event::new(5.1, 1.0, 1);
        assert!((iou(g.interval(20), truth.interval()) - 0.975 / 1.025).abs() < 1e-12);
        assert!((iou(g.interval(19), truth.interval()) - 0.6327).abs() < 1e-4);
        // Stage two alone can also claim neighbours; isolate stage one with eta = 1.
        let m = match_defaults(&g, &[truth], &MatchConfig { eta: 1.0 });
        let claimed: Vec<usize> = (0..80).filter(|&i| m.assignment[i].is_some()).collect();
        assert_eq!(claimed, vec![20]);
    }

    #[test]
    fn bipartite_tie_goes_to_lowest_index() {
        let g = DefaultGrid::build(20.0, 1.0, 0.75).unwrap();
        let truth = Event::new(5.0, 1.0, 1);
        assert!((iou(g.interval(19), truth.interval()) - 7.0 / 9.0).abs() < 1e-12);
        assert!((iou(g.interval(20), truth.interval()) - 7.0 / 9.0).abs() < 1e-12);
        let m = match_defaults(&g, &[truth], &MatchConfig { eta: 1.0 });
        let claimed: Vec<usize> = (0..80).filter(|&i| m.assignment[i].is_some()).collect();
        assert_eq!(claimed, vec![19]);
        // With eta = 0.5 default 20 joins through the threshold pass.
        let m = match_defaults(&g, &[truth], &MatchConfig::default());
        let claimed: Vec<usize> = (0..80).filter(|&i| m.assignment[i].is_some()).collect();
        assert_eq!(claimed, vec![19, 20]);
    }

    #[test]
    fn nms_examples() {
        let single = vec![(iv(1.0, 2.0), 0.3)];
        assert_eq!(nms(&single, 0.4), single);

        let overlapping = vec![(iv(0.5, 2.5), 0.8), (iv(0.0, 2.0), 0.9)];
        assert_eq!(nms(&overlapping, 0.4), vec![(iv(0.0, 2.0), 0.9)]);

        let apart = vec![(iv(1.5, 3.5), 0.8), (iv(0.0, 2.0), 0.9)];
        assert_eq!(
            nms(&apart, 0.4),
            vec![(iv(0.0, 2.0), 0.9), (iv(1.5, 3.5), 0.8)]
        );
    }

    #[test]
    fn nms_score_tie_keeps_earlier_start() {
        let tied = vec![(iv(0.5, 2.5), 0.7), (iv(0.0, 2.0), 0.7)];
        assert_eq!(nms(&tied, 0.4), vec![(iv(0.0, 2.0), 0.7)]);
    }

    fn interval() -> impl Strategy<Value = Interval> {
        (-50.0f64..50.0, 0.0f64..20.0).prop_map(|(s, d)| Interval::new(s, s + d))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in interval(), b in interval()) {
            let x = iou(a, b);
            prop_assert_eq!(x, iou(b, a));
            prop_assert!((0.0..=1.0).contains(&x));
            if x == 1.0 {
                prop_assert_eq!(a, b);
            }
            if a.duration() > 0.0 {
                prop_assert_eq!(iou(a, a), 1.0);
            }
        }

        #[test]
        fn decode_inverts_encode(
            dc in -100.0f64..100.0, dd in 0.01f64..50.0,
            tc in -100.0f64..100.0, td in 0.01f64..50.0,
        ) {
            let code = encode((dc, dd), (tc, td)).unwrap();
            let back = decode((dc, dd), code);
            prop_assert!((back.center() - tc).abs() < 1e-9);
            prop_assert!((back.duration() - td).abs() < 1e-9);
        }
    }
}
