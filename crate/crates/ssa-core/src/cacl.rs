//! Confidence-aware complementary learning: ternary masks over classes,
//! the complementary loss with its analytic gradient, and the adaptive
//! negative-threshold schedules.
//!
//! A mask marks each class `+1` (confident positive, absolute threshold
//! `tau_pos`), `-1` (confidently rejected: its descending rank lies past the
//! first relative drop of at least `tau_neg`), or `0` (abstain). Positives
//! are supervised through `-ln p`, negatives through `-ln (1 - p)`.
//!
//! The two thresholds act on different quantities and are independent: the
//! `+1` set responds only to `tau_pos`, the `-1` set only to `tau_neg`. One
//! caveat: the positive test wins when a class would qualify for both marks,
//! which can only happen for `tau_pos <= 0.5` (two probabilities cannot both
//! exceed one half). In the operating regime `tau_pos > 0.5` the marks are
//! strictly independent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sort_desc, softmax_backward, ProbDist, SortedDist, PROB_FLOOR};

/// Per-class marks in `{-1, 0, +1}`, indexed by original class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryMask {
    marks: Vec<i8>,
    /// 0-based sorted position of the first qualifying relative drop;
    /// positions strictly greater carry `-1`. Absent when no drop qualifies.
    i_star: Option<usize>,
}

impl TernaryMask {
    pub fn marks(&self) -> &[i8] {
        &self.marks
    }

    pub fn i_star(&self) -> Option<usize> {
        self.i_star
    }

    pub fn num_classes(&self) -> usize {
        self.marks.len()
    }

    pub fn is_all_zero(&self) -> bool {
        self.marks.iter().all(|&m| m == 0)
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.marks.len()).filter(|&c| self.marks[c] == 1).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.marks.len()).filter(|&c| self.marks[c] == -1).collect()
    }
}

/// How the negative threshold evolves over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TauNegSchedule {
    /// Always `tau_neg`.
    Fixed,
    /// Hold at 0.9 for the first `warmup_epochs`, then `tau_neg`.
    ConservativeInit { warmup_epochs: usize },
    /// Clamp `tau_neg` into `[0.6, 0.9]` during warmup, `[0.4, 0.9]` after.
    EarlyRestrict { warmup_epochs: usize },
    /// Every `period` epochs move by `step`: up when the gradient variance
    /// exceeds its running median, down otherwise. Bounded by `[lo, hi]`.
    Dynamic { period: usize, step: f64, lo: f64, hi: f64 },
}

impl Default for TauNegSchedule {
    fn default() -> Self {
        TauNegSchedule::Fixed
    }
}

impl TauNegSchedule {
    pub fn dynamic_default() -> Self {
        TauNegSchedule::Dynamic { period: 2, step: 0.05, lo: 0.4, hi: 0.95 }
    }
}

/// Thresholds and schedule for mask construction.
///
/// `tau_pos` and `tau_neg` act on different quantities (absolute probability
/// vs. relative drop), so no ordering between them is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaclConfig {
    pub tau_pos: f64,
    pub tau_neg: f64,
    #[serde(default)]
    pub schedule: TauNegSchedule,
}

impl Default for CaclConfig {
    fn default() -> Self {
        Self { tau_pos: 0.9, tau_neg: 0.9, schedule: TauNegSchedule::Fixed }
    }
}

impl CaclConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_pos", self.tau_pos), ("tau_neg", self.tau_neg)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::Invalid(format!("{name} = {v} outside (0, 1)")));
            }
        }
        match self.schedule {
            TauNegSchedule::Dynamic { period, step, lo, hi } => {
                if period == 0 {
                    return Err(Error::Invalid("dynamic schedule period must be >= 1".into()));
                }
                if step <= 0.0 || !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                    return Err(Error::Invalid(format!(
                        "dynamic schedule bounds invalid: step = {step}, lo = {lo}, hi = {hi}"
                    )));
                }
            }
            TauNegSchedule::Fixed
            | TauNegSchedule::ConservativeInit { .. }
            | TauNegSchedule::EarlyRestrict { .. } => {}
        }
        Ok(())
    }

    pub fn build_mask(&self, p: &ProbDist) -> TernaryMask {
        build_mask(p, self.tau_pos, self.tau_neg)
    }
}

/// Relative drop between adjacent sorted entries:
/// `r[i] = (v[i] - v[i+1]) / v[i]`, denominators clamped at `PROB_FLOOR`.
/// Each entry lies in `[0, 1]`; ties give 0.
pub fn relative_drops(s: &SortedDist) -> Vec<f64> {
    let v = s.values();
    let mut drops = Vec::with_capacity(v.len().saturating_sub(1));
    for i in 0..v.len() - 1 {
        drops.push((v[i] - v[i + 1]) / v[i].max(PROB_FLOOR));
    }
    drops
}

/// Build the ternary mask for one distribution.
///
/// Marks are decided in sorted-rank space and scattered back through the
/// sort permutation: `+1` where `p_c >= tau_pos`, `-1` for sorted positions
/// strictly past the first relative drop `>= tau_neg`. A class never holds
/// both marks; the positive test wins.
pub fn build_mask(p: &ProbDist, tau_pos: f64, tau_neg: f64) -> TernaryMask {
    let sorted = sort_desc(p);
    let drops = relative_drops(&sorted);
    let i_star = drops.iter().position(|&r| r >= tau_neg);

    let mut marks = vec![0i8; p.num_classes()];
    for (rank, &class) in sorted.perm().iter().enumerate() {
        if p.probs()[class] >= tau_pos {
            marks[class] = 1;
        } else if let Some(star) = i_star {
            if rank > star {
                marks[class] = -1;
            }
        }
    }
    TernaryMask { marks, i_star }
}

/// Per-unit complementary terms and their gradient with respect to the
/// probabilities. Returns `(loss, dloss/dp)` for a single prediction unit.
///
/// Probabilities are clamped at `PROB_FLOOR` before each log; a clamped term
/// is constant there, so its gradient entry is zero.
pub fn unit_terms_grad_probs(p: &ProbDist, mask: &TernaryMask) -> Result<(f64, Vec<f64>)> {
    if p.num_classes() != mask.num_classes() {
        return Err(Error::Shape(format!(
            "probs have {} classes, mask has {}",
            p.num_classes(),
            mask.num_classes()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.num_classes()];
    for (c, (&pc, &m)) in p.probs().iter().zip(mask.marks()).enumerate() {
        match m {
            1 => {
                loss -= pc.max(PROB_FLOOR).ln();
                if pc > PROB_FLOOR {
                    grad[c] -= 1.0 / pc;
                }
            }
            -1 => {
                let q = 1.0 - pc;
                loss -= q.max(PROB_FLOOR).ln();
                if q > PROB_FLOOR {
                    grad[c] += 1.0 / q;
                }
            }
            _ => {}
        }
    }
    Ok((loss, grad))
}

/// Complementary loss over a batch of prediction units, each a softmax
/// output paired with a mask built from a detached snapshot of the same
/// probabilities.
///
/// Returns the mean unit loss and the gradient with respect to each unit's
/// logits. Units whose mask is all zero contribute nothing to either.
pub fn cacl_loss(units: &[(ProbDist, TernaryMask)]) -> Result<(f64, Vec<Vec<f64>>)> {
    if units.is_empty() {
        return Err(Error::Empty("cacl_loss needs at least one unit".into()));
    }
    let n = units.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(units.len());
    for (p, mask) in units {
        if p.num_classes() != mask.num_classes() {
            return Err(Error::Shape(format!(
                "probs have {} classes, mask has {}",
                p.num_classes(),
                mask.num_classes()
            )));
        }
        if mask.is_all_zero() {
            grads.push(vec![0.0; p.num_classes()]);
            continue;
        }
        let (loss, mut dp) = unit_terms_grad_probs(p, mask)?;
        total += loss;
        for g in dp.iter_mut() {
            *g /= n;
        }
        grads.push(softmax_backward(p, &dp));
    }
    Ok((total / n, grads))
}

/// Stateful view of a [`TauNegSchedule`]. The engine calls
/// [`TauNegScheduler::effective`] once per epoch, passing its gradient
/// variance statistic; only the dynamic schedule uses it.
#[derive(Debug, Clone)]
pub struct TauNegScheduler {
    base: f64,
    schedule: TauNegSchedule,
    current: f64,
    variance_history: Vec<f64>,
}

impl TauNegScheduler {
    pub fn new(cfg: &CaclConfig) -> Self {
        let current = match cfg.schedule {
            TauNegSchedule::Dynamic { lo, hi, .. } => cfg.tau_neg.clamp(lo, hi),
            _ => cfg.tau_neg,
        };
        Self {
            base: cfg.tau_neg,
            schedule: cfg.schedule.clone(),
            current,
            variance_history: Vec::new(),
        }
    }

    /// Effective threshold for `epoch` (0-based). Call once per epoch.
    pub fn effective(&mut self, epoch: usize, grad_variance: f64) -> f64 {
        match self.schedule {
            TauNegSchedule::Fixed => self.base,
            TauNegSchedule::ConservativeInit { warmup_epochs } => {
                if epoch < warmup_epochs {
                    0.9
                } else {
                    self.base
                }
            }
            TauNegSchedule::EarlyRestrict { warmup_epochs } => {
                if epoch < warmup_epochs {
                    self.base.clamp(0.6, 0.9)
                } else {
                    self.base.clamp(0.4, 0.9)
                }
            }
            TauNegSchedule::Dynamic { period, step, lo, hi } => {
                if epoch > 0 && epoch % period == 0 && !self.variance_history.is_empty() {
                    let median = running_median(&self.variance_history);
                    if grad_variance > median {
                        self.current += step;
                    } else {
                        self.current -= step;
                    }
                    self.current = self.current.clamp(lo, hi);
                }
                self.variance_history.push(grad_variance);
                self.current
            }
        }
    }
}

fn running_median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
