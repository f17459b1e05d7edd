//! Probability primitives and the threshold-derivation / verification tools
//! the rest of the crate builds on.
//!
//! Everything here works in nats (natural log). Probabilities are clamped to
//! `PROB_FLOOR` before any logarithm taken inside a loss so that one-hot
//! predictions never produce infinities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};

/// Floor applied to probabilities before logs inside losses.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the sum-to-one invariant of [`ProbDist`].
pub const SUM_TOL: f64 = 1e-9;

/// A categorical distribution over `C >= 2` classes.
///
/// Entries are non-negative and sum to one within [`SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Invalid(format!(
                "a distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("probs[{i}] = {p}")));
            }
            if !(0.0..=1.0 + SUM_TOL).contains(&p) {
                return Err(Error::Invalid(format!("probs[{i}] = {p} outside [0, 1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::Invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_classes: usize) -> Self {
        assert!(num_classes >= 2);
        Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        assert!(num_classes >= 2 && class < num_classes);
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index and value of the largest entry (first on ties).
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        (best, self.probs[best])
    }
}

/// A distribution sorted into descending order together with the permutation
/// that undoes the sort: `perm[rank]` is the original class index of the
/// entry at `rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedDist {
    values: Vec<f64>,
    perm: Vec<usize>,
}

impl SortedDist {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    /// Scatter the sorted values back to original class order.
    pub fn unsort(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (rank, &class) in self.perm.iter().enumerate() {
            out[class] = self.values[rank];
        }
        out
    }
}

/// Softmax with max-shift for overflow safety. Shift-invariant:
/// `softmax(z) == softmax(z + c)` for any constant `c`.
pub fn softmax(logits: &[f64]) -> Result<ProbDist> {
    if logits.len() < 2 {
        return Err(Error::Invalid(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    for (i, &z) in logits.iter().enumerate() {
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("logits[{i}] = {z}")));
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbDist::new(exps.iter().map(|&e| e / sum).collect())
}

/// Pull a gradient taken with respect to softmax outputs back to the logits:
/// `dL/dz_k = p_k * (dL/dp_k - sum_c dL/dp_c * p_c)`.
pub fn softmax_backward(p: &ProbDist, grad_probs: &[f64]) -> Vec<f64> {
    softmax_backward_slice(p.probs(), grad_probs)
}

/// [`softmax_backward`] over a raw probability slice (one field site).
pub fn softmax_backward_slice(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), grad_probs.len());
    let dot: f64 = probs.iter().zip(grad_probs).map(|(&pc, &g)| pc * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&pc, &g)| pc * (g - dot))
        .collect()
}

/// Shannon entropy in nats, with the `0 ln 0 = 0` convention.
/// Always in `[0, ln C]`.
pub fn entropy(p: &ProbDist) -> f64 {
    entropy_slice(p.probs())
}

/// [`entropy`] over a raw probability slice (one field site).
pub fn entropy_slice(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &pi in probs {
        if pi > 0.0 {
            h -= pi * pi.ln();
        }
    }
    h.max(0.0)
}

/// Stable descending sort; ties keep ascending class order so masks built
/// from the result are reproducible.
pub fn sort_desc(p: &ProbDist) -> SortedDist {
    let mut perm: Vec<usize> = (0..p.num_classes()).collect();
    // stable sort: equal values keep their ascending-index order
    perm.sort_by(|&a, &b| p.probs()[b].partial_cmp(&p.probs()[a]).unwrap());
    let values = perm.iter().map(|&c| p.probs()[c]).collect();
    SortedDist { values, perm }
}

/// Upper bound on the total mass of classes with `p_c <= tau_beta`, valid for
/// every distribution whose entropy is at most `h0`: returns `h0 / (-ln tau_beta)`.
pub fn tail_mass_bound(h0: f64, tau_beta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&tau_beta) || tau_beta == 0.0 {
        return Err(Error::Invalid(format!("tau_beta = {tau_beta} outside (0, 1)")));
    }
    if !h0.is_finite() || h0 < 0.0 {
        return Err(Error::Invalid(format!("h0 = {h0} must be >= 0")));
    }
    Ok(h0 / -tau_beta.ln())
}

/// Largest `tau_beta` that keeps the low-confidence tail mass below `eps`
/// for entropies up to `h0`: returns `exp(-h0 / eps)`.
pub fn derive_tau_beta_upper(h0: f64, eps: f64) -> Result<f64> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Invalid(format!("eps = {eps} must be > 0")));
    }
    if !h0.is_finite() || h0 < 0.0 {
        return Err(Error::Invalid(format!("h0 = {h0} must be >= 0")));
    }
    Ok((-h0 / eps).exp())
}

/// Smallest `tau_neg` that keeps the worst-case tail mass of negative marks
/// below `eps` when the top `k` of `c` classes are excluded:
/// `tau_pos - eps / (c - k)`, clamped to `[0, 1]`.
pub fn derive_tau_neg_lower(tau_pos: f64, eps: f64, c: usize, k: usize) -> Result<f64> {
    if c <= k {
        return Err(Error::Invalid(format!("need c > k, got c = {c}, k = {k}")));
    }
    if k < 1 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&tau_pos) || tau_pos == 0.0 {
        return Err(Error::Invalid(format!("tau_pos = {tau_pos} outside (0, 1)")));
    }
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Invalid(format!("eps = {eps} must be > 0")));
    }
    Ok((tau_pos - eps / (c - k) as f64).clamp(0.0, 1.0))
}

/// Outcome of checking one distribution against the confident-partition
/// bounds at thresholds `(tau_alpha, tau_beta)` under an entropy budget `h0`.
///
/// The three per-part checks (`tail`, `pos`, `neg`) hold unconditionally
/// whenever the entropy precondition does. The combined gap
/// `pos_term - neg_term >= kappa` is reported but NOT guaranteed: lower
/// bounds on two terms do not lower-bound their difference, and concrete
/// counterexamples exist. Callers should treat `combined_holds` as
/// informational only.
#[derive(Debug, Clone)]
pub struct TheoremReport {
    pub entropy: f64,
    pub h0: f64,
    /// False when `entropy > h0`; the tail check is then vacuous.
    pub precondition_ok: bool,
    pub tau_alpha: f64,
    pub tau_beta: f64,
    /// Classes with `p_c >= tau_alpha`.
    pub y_plus: Vec<usize>,
    /// Classes with `p_c <= tau_beta`.
    pub y_minus: Vec<usize>,
    /// Everything else.
    pub y_zero: Vec<usize>,
    /// Total mass of `y_minus`.
    pub tail_mass: f64,
    /// `h0 / (-ln tau_beta)`.
    pub tail_bound: f64,
    /// `E[ln p_c | c in Y+]` with p-weights renormalized inside the set.
    pub pos_term: Option<f64>,
    /// `E[ln (1 - p_c) | c in Y-]`, same weighting.
    pub neg_term: Option<f64>,
    /// `ln tau_alpha - ln (1 - tau_beta)`.
    pub kappa: f64,
    pub tail_bound_holds: bool,
    pub pos_bound_holds: bool,
    pub neg_bound_holds: bool,
    /// `Some(pos - neg)` when both sets are populated.
    pub combined_gap: Option<f64>,
    pub combined_holds: Option<bool>,
}

impl TheoremReport {
    /// True when every guaranteed bound checked out.
    pub fn all_guaranteed_hold(&self) -> bool {
        self.tail_bound_holds && self.pos_bound_holds && self.neg_bound_holds
    }
}

/// Evaluate the confident-partition bounds for one distribution.
///
/// Requires `0 < tau_beta < tau_alpha < 1`. An entropy above `h0` is not an
/// error: the report flags the violated precondition and the tail check is
/// skipped (held vacuously).
pub fn verify_theorem1(
    p: &ProbDist,
    tau_alpha: f64,
    tau_beta: f64,
    h0: f64,
) -> Result<TheoremReport> {
    if !(0.0 < tau_beta && tau_beta < tau_alpha && tau_alpha < 1.0) {
        return Err(Error::Invalid(format!(
            "need 0 < tau_beta < tau_alpha < 1, got tau_beta = {tau_beta}, tau_alpha = {tau_alpha}"
        )));
    }
    if !h0.is_finite() || h0 < 0.0 {
        return Err(Error::Invalid(format!("h0 = {h0} must be >= 0")));
    }

    let h = entropy(p);
    let precondition_ok = h <= h0;

    let mut y_plus = Vec::new();
    let mut y_minus = Vec::new();
    let mut y_zero = Vec::new();
    for (c, &pc) in p.probs().iter().enumerate() {
        if pc >= tau_alpha {
            y_plus.push(c);
        } else if pc <= tau_beta {
            y_minus.push(c);
        } else {
            y_zero.push(c);
        }
    }

    let tail_mass: f64 = y_minus.iter().map(|&c| p.probs()[c]).sum();
    let tail_bound = tail_mass_bound(h0, tau_beta)?;

    let weighted_mean = |set: &[usize], f: &dyn Fn(f64) -> f64| -> Option<f64> {
        let mass: f64 = set.iter().map(|&c| p.probs()[c]).sum();
        if set.is_empty() || mass <= 0.0 {
            return None;
        }
        Some(set.iter().map(|&c| p.probs()[c] * f(p.probs()[c])).sum::<f64>() / mass)
    };
    let pos_term = weighted_mean(&y_plus, &|pc| pc.max(PROB_FLOOR).ln());
    let neg_term = weighted_mean(&y_minus, &|pc| (1.0 - pc).max(PROB_FLOOR).ln());

    let kappa = tau_alpha.ln() - (1.0 - tau_beta).ln();

    let tail_bound_holds = !precondition_ok || tail_mass <= tail_bound + 1e-12;
    let pos_bound_holds = pos_term.is_none_or(|t| t >= tau_alpha.ln() - 1e-12);
    let neg_bound_holds = neg_term.is_none_or(|t| t >= (1.0 - tau_beta).ln() - 1e-12);

    let combined_gap = match (pos_term, neg_term) {
        (Some(p), Some(n)) => Some(p - n),
        _ => None,
    };
    let combined_holds = combined_gap.map(|g| g >= kappa - 1e-12);

    Ok(TheoremReport {
        entropy: h,
        h0,
        precondition_ok,
        tau_alpha,
        tau_beta,
        y_plus,
        y_minus,
        y_zero,
        tail_mass,
        tail_bound,
        pos_term,
        neg_term,
        kappa,
        tail_bound_holds,
        pos_bound_holds,
        neg_bound_holds,
        combined_gap,
        combined_holds,
    })
}

/// Rejection-sample a distribution over `c` classes with entropy at most `h0`.
///
/// Draws a dominant mass near 1, sharpens the remainder, and retries until
/// the entropy budget is met. Placement of the dominant class is uniform.
pub fn sample_low_entropy_dist<R: Rng>(c: usize, h0: f64, rng: &mut R) -> ProbDist {
    assert!(c >= 2 && h0 > 0.0);
    loop {
        let dominant: f64 = rng.random_range(0.80..0.9995);
        let rest = 1.0 - dominant;
        let mut tail: Vec<f64> = (0..c - 1)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                u.powi(4)
            })
            .collect();
        let tail_sum: f64 = tail.iter().sum();
        if tail_sum <= 0.0 {
            continue;
        }
        for t in tail.iter_mut() {
            *t *= rest / tail_sum;
        }
        let slot = rng.random_range(0..c);
        let mut probs = Vec::with_capacity(c);
        probs.extend_from_slice(&tail[..slot]);
        probs.push(dominant);
        probs.extend_from_slice(&tail[slot..]);
        let p = ProbDist::new(probs).expect("constructed distribution is valid");
        if entropy(&p) <= h0 {
            return p;
        }
    }
}

/// Aggregate result of a randomized theorem sweep.
#[derive(Debug, Clone, Default)]
pub struct TheoremSweep {
    pub samples: usize,
    pub tail_violations: usize,
    pub pos_violations: usize,
    pub neg_violations: usize,
    /// Cases where both Y+ and Y- were populated so the combined gap existed.
    pub combined_checked: usize,
    /// Among those, how many had `gap < kappa`. Informational only.
    pub combined_violations: usize,
}

impl TheoremSweep {
    pub fn guaranteed_violations(&self) -> usize {
        self.tail_violations + self.pos_violations + self.neg_violations
    }

    pub fn combined_violation_rate(&self) -> f64 {
        if self.combined_checked == 0 {
            0.0
        } else {
            self.combined_violations as f64 / self.combined_checked as f64
        }
    }
}

/// Run `samples` randomized low-entropy checks with per-sample thresholds
/// drawn from safe ranges. Class counts are drawn from `c_lo..=c_hi`.
pub fn theorem_sweep(samples: usize, h0: f64, c_lo: usize, c_hi: usize, seed: u64) -> TheoremSweep {
    assert!(2 <= c_lo && c_lo <= c_hi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sweep = TheoremSweep {
        samples,
        ..Default::default()
    };
    for _ in 0..samples {
        let c = rng.random_range(c_lo..=c_hi);
        let p = sample_low_entropy_dist(c, h0, &mut rng);
        let tau_alpha: f64 = rng.random_range(0.5..0.95);
        let tau_beta: f64 = rng.random_range(0.005..0.2);
        let report = verify_theorem1(&p, tau_alpha, tau_beta, h0).expect("valid thresholds");
        if !report.tail_bound_holds {
            sweep.tail_violations += 1;
        }
        if !report.pos_bound_holds {
            sweep.pos_violations += 1;
        }
        if !report.neg_bound_holds {
            sweep.neg_violations += 1;
        }
        if let Some(holds) = report.combined_holds {
            sweep.combined_checked += 1;
            if !holds {
                sweep.combined_violations += 1;
            }
        }
    }
    sweep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(probs: &[f64]) -> ProbDist {
        ProbDist::new(probs.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_analytic_two_to_one() {
        let p = softmax(&[2.0f64.ln(), 0.0]).unwrap();
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_exp_normalize() {
        // oracle: direct exp-normalize without the max shift
        let logits = [1.0, 2.0, 3.0];
        let exps: Vec<f64> = logits.iter().map(|&z| f64::exp(z)).collect();
        let sum: f64 = exps.iter().sum();
        let p = softmax(&logits).unwrap();
        for (got, want) in p.probs().iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[0.3, -1.2, 2.5]).unwrap();
        let b = softmax(&[0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0]).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        assert_eq!(entropy(&ProbDist::one_hot(5, 2)), 0.0);
    }

    #[test]
    fn entropy_uniform_is_ln_c() {
        let h = entropy(&ProbDist::uniform(4));
        assert!((h - 4.0f64.ln()).abs() < 1e-12);
        assert!((h - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn entropy_direct_sum_oracle() {
        // oracle: -sum p ln p evaluated term by term
        let p = dist(&[0.7, 0.2, 0.1]);
        let want = -(0.7 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy(&p) - want).abs() < 1e-15);
        assert!((entropy(&p) - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn sort_desc_basic() {
        let s = sort_desc(&dist(&[0.1, 0.7, 0.2]));
        assert_eq!(s.values(), &[0.7, 0.2, 0.1]);
        assert_eq!(s.perm(), &[1, 2, 0]);
    }

    #[test]
    fn sort_desc_exhaustive_three_elements() {
        // oracle: check every permutation of three distinct values against a
        // naive selection of the max at each rank
        let vals = [0.5, 0.3, 0.2];
        let perms3 = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for perm in perms3 {
            let probs: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
            let s = sort_desc(&dist(&probs));
            assert_eq!(s.values(), &[0.5, 0.3, 0.2]);
            assert_eq!(s.unsort(), probs);
        }
    }

    #[test]
    fn sort_desc_ties_keep_class_order() {
        let s = sort_desc(&ProbDist::uniform(4));
        assert_eq!(s.perm(), &[0, 1, 2, 3]);
    }

    #[test]
    fn sort_desc_already_sorted_is_identity() {
        let s = sort_desc(&dist(&[0.6, 0.3, 0.1]));
        assert_eq!(s.perm(), &[0, 1, 2]);
    }

    #[test]
    fn tail_mass_bound_direct_evaluation() {
        let b = tail_mass_bound(0.42805, 0.05).unwrap();
        assert!((b - 0.42805 / -(0.05f64.ln())).abs() < 1e-15);
        assert!((b - 0.142889).abs() < 1e-5);
    }

    #[test]
    fn tail_mass_bound_zero_entropy() {
        assert_eq!(tail_mass_bound(0.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn tail_mass_bound_worked_eps_case() {
        // tau_beta = exp(-10) makes the bound come out at eps = 0.05
        let b = tail_mass_bound(0.5, 4.54e-5).unwrap();
        assert!((b - 0.05).abs() < 1e-4);
    }

    #[test]
    fn tail_mass_bound_rejects_bad_tau() {
        assert!(tail_mass_bound(0.5, 0.0).is_err());
        assert!(tail_mass_bound(0.5, 1.0).is_err());
        assert!(tail_mass_bound(0.5, -0.1).is_err());
    }

    #[test]
    fn derive_tau_beta_worked_case() {
        let t = derive_tau_beta_upper(0.5, 0.05).unwrap();
        assert!((t - (-10.0f64).exp()).abs() < 1e-9);
        assert!((t - 4.54e-5).abs() < 1e-6);
    }

    #[test]
    fn derive_tau_beta_no_constraint_at_zero_entropy() {
        assert_eq!(derive_tau_beta_upper(0.0, 0.05).unwrap(), 1.0);
    }

    #[test]
    fn derive_tau_beta_direct() {
        let t = derive_tau_beta_upper(1.0, 0.5).unwrap();
        assert!((t - (-2.0f64).exp()).abs() < 1e-12);
        assert!((t - 0.13534).abs() < 1e-5);
    }

    #[test]
    fn derive_tau_beta_rejects_eps() {
        assert!(derive_tau_beta_upper(0.5, 0.0).is_err());
        assert!(derive_tau_beta_upper(0.5, -1.0).is_err());
    }

    #[test]
    fn derive_tau_neg_worked_case() {
        let t = derive_tau_neg_lower(0.9, 0.05, 10, 1).unwrap();
        assert!((t - (0.9 - 0.05 / 9.0)).abs() < 1e-12);
        assert!((t - 0.8944).abs() < 1e-4);
    }

    #[test]
    fn derive_tau_neg_clamps_to_zero() {
        assert_eq!(derive_tau_neg_lower(0.9, 100.0, 10, 1).unwrap(), 0.0);
    }

    #[test]
    fn derive_tau_neg_direct() {
        let t = derive_tau_neg_lower(0.9, 0.09, 10, 1).unwrap();
        assert!((t - 0.89).abs() < 1e-12);
    }

    #[test]
    fn derive_tau_neg_rejects_c_le_k() {
        assert!(derive_tau_neg_lower(0.9, 0.05, 3, 3).is_err());
        assert!(derive_tau_neg_lower(0.9, 0.05, 2, 5).is_err());
    }

    #[test]
    fn theorem_report_worked_case() {
        let p = dist(&[0.9, 0.05, 0.03, 0.02]);
        let h0 = entropy(&p) + 1e-9;
        let r = verify_theorem1(&p, 0.9, 0.05, h0).unwrap();
        assert!(r.precondition_ok);
        assert_eq!(r.y_plus, vec![0]);
        assert_eq!(r.y_minus, vec![1, 2, 3]);
        assert!(r.y_zero.is_empty());
        assert!((r.tail_mass - 0.10).abs() < 1e-12);
        assert!(r.tail_mass <= r.tail_bound);
        assert!((r.tail_bound - 0.14289).abs() < 1e-4);
        let pos = r.pos_term.unwrap();
        assert!((pos - 0.9f64.ln()).abs() < 1e-12);
        assert!(r.all_guaranteed_hold());
        // the combined difference bound fails here: lower bounds on the two
        // terms do not bound their difference from below
        assert_eq!(r.combined_holds, Some(false));
        let gap = r.combined_gap.unwrap();
        assert!(gap < r.kappa, "gap {gap} vs kappa {}", r.kappa);
    }

    #[test]
    fn theorem_report_one_hot_tail_empty_mass() {
        let p = ProbDist::one_hot(4, 0);
        let r = verify_theorem1(&p, 0.9, 0.05, 0.5).unwrap();
        // the three zero entries land in Y- but carry no mass
        assert_eq!(r.tail_mass, 0.0);
        assert!(r.all_guaranteed_hold());
    }

    #[test]
    fn theorem_report_flags_precondition() {
        let p = ProbDist::uniform(8);
        let r = verify_theorem1(&p, 0.9, 0.05, 0.5).unwrap();
        assert!(!r.precondition_ok);
        assert!(r.tail_bound_holds, "tail check is vacuous above the budget");
    }

    #[test]
    fn theorem_report_rejects_bad_thresholds() {
        let p = ProbDist::uniform(4);
        assert!(verify_theorem1(&p, 0.05, 0.9, 0.5).is_err());
        assert!(verify_theorem1(&p, 0.9, 0.9, 0.5).is_err());
    }

    #[test]
    fn randomized_sweep_has_zero_guaranteed_violations() {
        let sweep = theorem_sweep(1000, 0.5, 3, 20, 7);
        assert_eq!(sweep.guaranteed_violations(), 0);
        assert!(sweep.combined_checked > 0);
    }

    #[test]
    fn sampler_respects_entropy_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = rng.random_range(3..=20);
            let p = sample_low_entropy_dist(c, 0.5, &mut rng);
            assert!(entropy(&p) <= 0.5);
            assert_eq!(p.num_classes(), c);
        }
    }

    #[test]
    fn tau_beta_upper_monotone() {
        let mut prev = derive_tau_beta_upper(0.0, 0.05).unwrap();
        for i in 1..=20 {
            let h0 = i as f64 * 0.1;
            let t = derive_tau_beta_upper(h0, 0.05).unwrap();
            assert!(t < prev, "must decrease in h0");
            prev = t;
        }
        let mut prev = derive_tau_beta_upper(0.5, 0.01).unwrap();
        for i in 2..=20 {
            let eps = i as f64 * 0.01;
            let t = derive_tau_beta_upper(0.5, eps).unwrap();
            assert!(t > prev, "must increase in eps");
            prev = t;
        }
    }
}
