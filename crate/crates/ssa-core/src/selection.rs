//! Per-sample entropy memory and the pseudo-source / remaining-target
//! partition of the target set.
//!
//! The bank is the one mutable store in the pipeline: the engine owns it and
//! applies updates in ascending sample-id order. For dense samples the
//! stored value is the EMA of the mean per-site entropy.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{entropy, ProbDist};

/// EMA entropy per stable sample id: `H_t = alpha H_{t-1} + (1 - alpha) h`.
/// The first observation initializes the entry to `h` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyBank {
    alpha: f64,
    entries: BTreeMap<u64, f64>,
}

impl EntropyBank {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Invalid(format!("alpha = {alpha} outside [0, 1)")));
        }
        Ok(Self { alpha, entries: BTreeMap::new() })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.entries.get(&id).copied()
    }

    /// Fold one prediction's entropy into the memory.
    pub fn update(&mut self, id: u64, p: &ProbDist) {
        self.update_entropy(id, entropy(p));
    }

    /// Fold a precomputed entropy (e.g. a dense sample's mean site entropy).
    pub fn update_entropy(&mut self, id: u64, h: f64) {
        let alpha = self.alpha;
        self.entries
            .entry(id)
            .and_modify(|old| *old = alpha * *old + (1.0 - alpha) * h)
            .or_insert(h);
    }

    /// `(id, entropy)` pairs in ascending id order.
    pub fn snapshot(&self) -> Vec<(u64, f64)> {
        self.entries.iter().map(|(&id, &h)| (id, h)).collect()
    }
}

/// Disjoint, exhaustive split of the bank's ids: the lowest-entropy fraction
/// becomes the pseudo-source side.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPartition {
    /// Pseudo-source ids, ascending.
    pub ps_ids: Vec<u64>,
    /// Remaining-target ids, ascending.
    pub rt_ids: Vec<u64>,
    pub tau_par: f64,
}

impl DomainPartition {
    pub fn n_ps(&self) -> usize {
        self.ps_ids.len()
    }

    pub fn n_rt(&self) -> usize {
        self.rt_ids.len()
    }
}

/// Rank ids by bank entropy (ties by ascending id) and cut at
/// `floor(tau_par * n)`, never below one element.
pub fn partition(bank: &EntropyBank, tau_par: f64) -> Result<DomainPartition> {
    if bank.is_empty() {
        return Err(Error::Empty("cannot partition an empty bank".into()));
    }
    if !(0.0 < tau_par && tau_par < 1.0) {
        return Err(Error::Invalid(format!("tau_par = {tau_par} outside (0, 1)")));
    }
    let mut ranked = bank.snapshot();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let n = ranked.len();
    let n_ps = ((tau_par * n as f64).floor() as usize).max(1);
    let mut ps_ids: Vec<u64> = ranked[..n_ps].iter().map(|&(id, _)| id).collect();
    let mut rt_ids: Vec<u64> = ranked[n_ps..].iter().map(|&(id, _)| id).collect();
    ps_ids.sort_unstable();
    rt_ids.sort_unstable();
    Ok(DomainPartition { ps_ids, rt_ids, tau_par })
}

/// Knee-selected partition fraction with its fallback flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KneeResult {
    pub fraction: f64,
    /// True when the bank was too small and the fixed default was used.
    pub fallback: bool,
}

/// Fraction at the largest curvature of the ascending entropy curve.
///
/// The discrete second difference `h[i] - 2 h[i-1] + h[i-2]` is attributed
/// to the index where a jump arrives, so the returned fraction counts the
/// samples before the knee. First argmax wins on ties; the result is clamped
/// to `[0.1, 0.95]`. Banks with fewer than four samples fall back to 0.7.
pub fn knee_tau_par(bank: &EntropyBank) -> KneeResult {
    let n = bank.len();
    if n < 4 {
        return KneeResult { fraction: 0.7, fallback: true };
    }
    let mut entropies: Vec<f64> = bank.snapshot().into_iter().map(|(_, h)| h).collect();
    entropies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best_idx = 2;
    let mut best = f64::NEG_INFINITY;
    for i in 2..n {
        let d2 = entropies[i] - 2.0 * entropies[i - 1] + entropies[i - 2];
        if d2 > best {
            best = d2;
            best_idx = i;
        }
    }
    KneeResult { fraction: (best_idx as f64 / n as f64).clamp(0.1, 0.95), fallback: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank_from(pairs: &[(u64, f64)]) -> EntropyBank {
        let mut bank = EntropyBank::new(0.9).unwrap();
        for &(id, h) in pairs {
            bank.update_entropy(id, h);
        }
        bank
    }

    #[test]
    fn first_update_initializes_directly() {
        let mut bank = EntropyBank::new(0.9).unwrap();
        bank.update_entropy(7, 0.5);
        assert_eq!(bank.get(7), Some(0.5));
    }

    #[test]
    fn ema_update_direct_evaluation() {
        let mut bank = EntropyBank::new(0.9).unwrap();
        bank.update_entropy(1, 1.0);
        bank.update_entropy(1, 0.5);
        assert!((bank.get(1).unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_tracks_latest() {
        let mut bank = EntropyBank::new(0.0).unwrap();
        bank.update_entropy(1, 1.0);
        bank.update_entropy(1, 0.25);
        assert_eq!(bank.get(1), Some(0.25));
    }

    #[test]
    fn update_uses_prediction_entropy() {
        let mut bank = EntropyBank::new(0.9).unwrap();
        let p = ProbDist::uniform(4);
        bank.update(3, &p);
        assert!((bank.get(3).unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_after_constant_updates() {
        // after t updates with constant h from initial H0:
        // alpha^t H0 + (1 - alpha^t) h
        let alpha = 0.9f64;
        let mut bank = EntropyBank::new(alpha).unwrap();
        let h0 = 1.2;
        let h = 0.3;
        bank.update_entropy(1, h0);
        for _ in 0..25 {
            bank.update_entropy(1, h);
        }
        let t = 25;
        let want = alpha.powi(t) * h0 + (1.0 - alpha.powi(t)) * h;
        assert!((bank.get(1).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_alpha() {
        assert!(EntropyBank::new(1.0).is_err());
        assert!(EntropyBank::new(-0.1).is_err());
    }

    #[test]
    fn partition_sort_and_cut() {
        let bank = bank_from(&[(0, 0.1), (1, 0.9), (2, 0.2), (3, 0.8)]);
        let p = partition(&bank, 0.5).unwrap();
        assert_eq!(p.ps_ids, vec![0, 2]);
        assert_eq!(p.rt_ids, vec![1, 3]);
    }

    #[test]
    fn partition_minimum_one_guard() {
        let bank = bank_from(&[(0, 0.1), (1, 0.9), (2, 0.2)]);
        let p = partition(&bank, 0.01).unwrap();
        assert_eq!(p.n_ps(), 1);
        assert_eq!(p.ps_ids, vec![0]);
    }

    #[test]
    fn partition_ties_break_by_id() {
        let bank = bank_from(&[(5, 0.5), (1, 0.5), (3, 0.5), (2, 0.5)]);
        let p = partition(&bank, 0.5).unwrap();
        assert_eq!(p.ps_ids, vec![1, 2]);
        assert_eq!(p.rt_ids, vec![3, 5]);
    }

    #[test]
    fn partition_rejects_empty_bank() {
        let bank = EntropyBank::new(0.9).unwrap();
        assert!(partition(&bank, 0.5).is_err());
    }

    #[test]
    fn partition_identities_hold() {
        let bank = bank_from(&[(0, 0.3), (1, 0.1), (2, 0.7), (3, 0.2), (4, 0.9), (5, 0.4), (6, 0.6)]);
        for i in 1..=9 {
            let tau = i as f64 / 10.0;
            let p = partition(&bank, tau).unwrap();
            let mut all: Vec<u64> = p.ps_ids.iter().chain(&p.rt_ids).copied().collect();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3, 4, 5, 6], "exhaustive");
            assert!(p.ps_ids.iter().all(|id| !p.rt_ids.contains(id)), "disjoint");
            assert_eq!(p.n_ps(), ((tau * 7.0).floor() as usize).max(1));
            // every ps entropy <= every rt entropy
            let max_ps = p.ps_ids.iter().map(|&id| bank.get(id).unwrap()).fold(f64::MIN, f64::max);
            let min_rt = p.rt_ids.iter().map(|&id| bank.get(id).unwrap()).fold(f64::MAX, f64::min);
            assert!(max_ps <= min_rt);
        }
    }

    #[test]
    fn partition_monotone_in_tau() {
        let bank = bank_from(&[(0, 0.3), (1, 0.1), (2, 0.7), (3, 0.2), (4, 0.9), (5, 0.4)]);
        let mut prev: Vec<u64> = Vec::new();
        for i in 1..=9 {
            let p = partition(&bank, i as f64 / 10.0).unwrap();
            assert!(prev.iter().all(|id| p.ps_ids.contains(id)), "raising tau_par removed an id");
            prev = p.ps_ids;
        }
    }

    #[test]
    fn partition_invariant_to_update_order() {
        let mut a = EntropyBank::new(0.9).unwrap();
        let mut b = EntropyBank::new(0.9).unwrap();
        let obs = [(0u64, 0.4), (1, 0.9), (2, 0.1)];
        for &(id, h) in &obs {
            a.update_entropy(id, h);
        }
        for &(id, h) in obs.iter().rev() {
            b.update_entropy(id, h);
        }
        assert_eq!(partition(&a, 0.5).unwrap(), partition(&b, 0.5).unwrap());
    }

    #[test]
    fn knee_clean_step() {
        let bank = bank_from(&[(0, 0.1), (1, 0.1), (2, 0.1), (3, 0.9), (4, 0.9)]);
        let k = knee_tau_par(&bank);
        assert!(!k.fallback);
        assert!((k.fraction - 0.6).abs() < 1e-12, "knee at 3/5, got {}", k.fraction);
    }

    #[test]
    fn knee_linear_ramp_deterministic_first_argmax() {
        // exactly representable increments so every second difference ties at 0
        let pairs: Vec<(u64, f64)> = (0..10).map(|i| (i as u64, 0.125 * i as f64)).collect();
        let k = knee_tau_par(&bank_from(&pairs));
        assert!(!k.fallback);
        // first index (2) wins the tie, then the lower clamp applies
        assert!((k.fraction - 0.2).abs() < 1e-12);
    }

    #[test]
    fn knee_concentrated_entropies_near_upper_clamp() {
        let mut pairs: Vec<(u64, f64)> = (0..18).map(|i| (i as u64, 0.01 + 0.001 * i as f64)).collect();
        pairs.push((18, 2.0));
        pairs.push((19, 2.1));
        let k = knee_tau_par(&bank_from(&pairs));
        assert!(k.fraction >= 0.85, "most samples are easy, got {}", k.fraction);
    }

    #[test]
    fn knee_small_bank_falls_back() {
        let k = knee_tau_par(&bank_from(&[(0, 0.1), (1, 0.5), (2, 0.9)]));
        assert!(k.fallback);
        assert_eq!(k.fraction, 0.7);
    }
}
