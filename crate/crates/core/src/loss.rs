//! Matching loss: Huber localisation and cross-entropy on matched defaults,
//! cross-entropy on the hardest unmatched defaults, each normalised by its
//! number of terms.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode, match_defaults, DefaultGrid, MatchConfig, Matching};
use crate::network::{real, NetworkOutput, Real};
use crate::types::Event;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Matched defaults per selected negative.
    pub neg_pos_ratio: f64,
    pub min_negatives: usize,
    pub eta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            neg_pos_ratio: 1.0 / 3.0,
            min_negatives: 10,
            eta: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_negatives == 0 {
            return Err(Error::InvalidConfig("min_negatives must be >= 1".into()));
        }
        if !(self.neg_pos_ratio > 0.0) {
            return Err(Error::InvalidConfig(
                "neg_pos_ratio must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig("eta must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn negatives_for(&self, positives: usize) -> usize {
        let by_ratio = (positives as f64 / self.neg_pos_ratio).round() as usize;
        by_ratio.max(self.min_negatives)
    }
}

pub fn huber(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn huber_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Huber term over matched defaults, divided by `positives`.
    pub loc_loss: f64,
    /// Cross-entropy over matched defaults, divided by `positives`.
    pub cls_pos_loss: f64,
    /// Cross-entropy over mined negatives, divided by `selected_negatives`.
    pub cls_neg_loss: f64,
    pub total: f64,
    pub positives: usize,
    pub selected_negatives: usize,
}

impl LossBreakdown {
    pub fn cls_loss(&self) -> f64 {
        self.cls_pos_loss + self.cls_neg_loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub label: usize,
    pub code: [f64; 2],
}

/// Which defaults enter the loss and with which targets. Holding a plan
/// fixed freezes the matching and the negative-mining selection.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPlan {
    pub matching: Matching,
    pub targets: Vec<Option<Target>>,
    /// Selected unmatched defaults, hardest first.
    pub negatives: Vec<usize>,
}

impl LossPlan {
    pub fn positives(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

fn neg_log<F: Real>(p: F) -> f64 {
    -p.to_f64().unwrap().max(PROB_FLOOR).ln()
}

/// Matches defaults to `truths` and mines the hardest negatives from `output`.
pub fn plan_loss<F: Real>(
    output: &NetworkOutput<F>,
    grid: &DefaultGrid,
    truths: &[Event],
    cfg: &LossConfig,
) -> Result<LossPlan> {
    let n = grid.len();
    let classes = output.probs.ncols();
    if output.loc.dim() != (n, 2) || output.probs.nrows() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n, 2],
            actual: output.loc.shape().to_vec(),
        });
    }
    for t in truths {
        if t.label == 0 || t.label as usize >= classes {
            return Err(Error::InvalidConfig(format!(
                "truth label {} outside 1..={}",
                t.label,
                classes - 1
            )));
        }
    }
    let matching = match_defaults(grid, truths, &MatchConfig { eta: cfg.eta });
    let mut targets = Vec::with_capacity(n);
    for (i, a) in matching.assignment.iter().enumerate() {
        targets.push(match a {
            Some(j) => {
                let t = &truths[*j];
                Some(Target {
                    label: t.label as usize,
                    code: encode(grid.default_event(i), (t.center, t.duration))?,
                })
            }
            None => None,
        });
    }
    let positives = targets.iter().filter(|t| t.is_some()).count();

    let mut scored = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if t.is_none() {
            let p = output.probs[[i, 0]];
            if p.is_nan() {
                return Err(Error::DegenerateProbability(i));
            }
            scored.push((i, neg_log(p)));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = cfg.negatives_for(positives).min(scored.len());
    let negatives = scored[..keep].iter().map(|&(i, _)| i).collect();
    Ok(LossPlan {
        matching,
        targets,
        negatives,
    })
}

/// Loss value for a fixed plan.
pub fn evaluate_plan<F: Real>(output: &NetworkOutput<F>, plan: &LossPlan) -> Result<LossBreakdown> {
    let mut loc = 0.0;
    let mut pos = 0.0;
    let mut positives = 0;
    for (i, t) in plan.targets.iter().enumerate() {
        if let Some(t) = t {
            positives += 1;
            for (c, &code) in t.code.iter().enumerate() {
                loc += huber(code - output.loc[[i, c]].to_f64().unwrap());
            }
            let p = output.probs[[i, t.label]];
            if p.is_nan() {
                return Err(Error::DegenerateProbability(i));
            }
            pos += neg_log(p);
        }
    }
    let mut neg = 0.0;
    for &i in &plan.negatives {
        let p = output.probs[[i, 0]];
        if p.is_nan() {
            return Err(Error::DegenerateProbability(i));
        }
        neg += neg_log(p);
    }
    let (loc_loss, cls_pos_loss) = if positives > 0 {
        (loc / positives as f64, pos / positives as f64)
    } else {
        (0.0, 0.0)
    };
    let selected = plan.negatives.len();
    let cls_neg_loss = if selected > 0 {
        neg / selected as f64
    } else {
        0.0
    };
    Ok(LossBreakdown {
        loc_loss,
        cls_pos_loss,
        cls_neg_loss,
        total: loc_loss + cls_pos_loss + cls_neg_loss,
        positives,
        selected_negatives: selected,
    })
}

fn weights(plan: &LossPlan) -> (f64, f64) {
    let p = plan.positives();
    let n = plan.negatives.len();
    (
        if p > 0 { 1.0 / p as f64 } else { 0.0 },
        if n > 0 { 1.0 / n as f64 } else { 0.0 },
    )
}

fn loc_gradient<F: Real>(output: &NetworkOutput<F>, plan: &LossPlan, w_pos: f64) -> Array2<F> {
    let mut g = Array2::<F>::zeros(output.loc.dim());
    for (i, t) in plan.targets.iter().enumerate() {
        if let Some(t) = t {
            for c in 0..2 {
                let r = t.code[c] - output.loc[[i, c]].to_f64().unwrap();
                g[[i, c]] = real(-w_pos * huber_grad(r));
            }
        }
    }
    g
}

/// Partial derivatives of the plan's loss with respect to the localisation
/// outputs and the class probabilities.
pub fn plan_gradients<F: Real>(
    output: &NetworkOutput<F>,
    plan: &LossPlan,
) -> (Array2<F>, Array2<F>) {
    let (w_pos, w_neg) = weights(plan);
    let loc = loc_gradient(output, plan, w_pos);
    let mut probs = Array2::<F>::zeros(output.probs.dim());
    let dlog = |p: F, w: f64| -> F {
        let p = p.to_f64().unwrap();
        // the clamp is flat below the floor
        if p > PROB_FLOOR {
            real(-w / p)
        } else {
            F::zero()
        }
    };
    for (i, t) in plan.targets.iter().enumerate() {
        if let Some(t) = t {
            probs[[i, t.label]] = dlog(output.probs[[i, t.label]], w_pos);
        }
    }
    for &i in &plan.negatives {
        probs[[i, 0]] = dlog(output.probs[[i, 0]], w_neg);
    }
    (loc, probs)
}

/// Like [`plan_gradients`] but differentiated through the softmax, giving
/// the gradient with respect to the class scores. Stays informative when a
/// target probability underflows.
pub fn plan_logit_gradients<F: Real>(
    output: &NetworkOutput<F>,
    plan: &LossPlan,
) -> (Array2<F>, Array2<F>) {
    let (w_pos, w_neg) = weights(plan);
    let loc = loc_gradient(output, plan, w_pos);
    let mut logits = Array2::<F>::zeros(output.probs.dim());
    let mut fill = |i: usize, class: usize, w: f64| {
        let w = real::<F>(w);
        for (c, (g, &p)) in logits
            .row_mut(i)
            .iter_mut()
            .zip(output.probs.row(i).iter())
            .enumerate()
        {
            let onehot = if c == class { F::one() } else { F::zero() };
            *g = w * (p - onehot);
        }
    };
    for (i, t) in plan.targets.iter().enumerate() {
        if let Some(t) = t {
            fill(i, t.label, w_pos);
        }
    }
    for &i in &plan.negatives {
        fill(i, 0, w_neg);
    }
    (loc, logits)
}

pub fn compute_loss<F: Real>(
    output: &NetworkOutput<F>,
    grid: &DefaultGrid,
    truths: &[Event],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    evaluate_plan(output, &plan_loss(output, grid, truths, cfg)?)
}

/// Gradients `(d loc, d probs)` of [`compute_loss`], mining held constant.
pub fn loss_gradients<F: Real>(
    output: &NetworkOutput<F>,
    grid: &DefaultGrid,
    truths: &[Event],
    cfg: &LossConfig,
) -> Result<(Array2<F>, Array2<F>)> {
    Ok(plan_gradients(
        output,
        &plan_loss(output, grid, truths, cfg)?,
    ))
}
