//! Per-trait Beta evidence accumulators and the confirmed trait set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::ontology::{TraitId, TraitSet, TRAIT_COUNT};

pub const DEFAULT_TAU: f64 = 0.6;
pub const PRIORITY_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraitBelief {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TraitBelief {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl TraitBelief {
    pub fn new(alpha: f64, beta: f64) -> Self {
        assert!(alpha > 0.0 && beta > 0.0, "Beta parameters must be positive");
        Self { alpha, beta }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Differential entropy of Beta(alpha, beta) in nats.
    pub fn entropy(&self) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        ln_b - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    beliefs: [TraitBelief; TRAIT_COUNT],
    tau: f64,
    confirmed: TraitSet,
}

impl BeliefState {
    pub fn new(tau: f64) -> Self {
        assert!(tau > 0.0 && tau < 1.0, "tau must lie in (0, 1)");
        Self { beliefs: [TraitBelief::default(); TRAIT_COUNT], tau, confirmed: TraitSet::empty() }
    }

    /// Builds a state from explicit parameters; confirmation is derived
    /// from them (no latch history).
    pub fn from_beliefs(beliefs: [TraitBelief; TRAIT_COUNT], tau: f64) -> Self {
        let mut s = Self { beliefs, tau, confirmed: TraitSet::empty() };
        s.refresh_confirmed();
        s
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn belief(&self, t: TraitId) -> TraitBelief {
        self.beliefs[t.slot()]
    }

    pub fn posterior_mean(&self, t: TraitId) -> f64 {
        self.beliefs[t.slot()].mean()
    }

    pub fn entropy(&self, t: TraitId) -> f64 {
        self.beliefs[t.slot()].entropy()
    }

    pub fn confirmed(&self) -> TraitSet {
        self.confirmed
    }

    fn meets_threshold(&self, t: TraitId) -> bool {
        let b = self.beliefs[t.slot()];
        b.mean() > self.tau && b.alpha > 1.0
    }

    fn refresh_confirmed(&mut self) {
        for t in TraitId::all() {
            if self.meets_threshold(t) {
                self.confirmed.insert(t);
            }
        }
    }

    /// One unit of evidence for every trait: positive where detected,
    /// negative otherwise. Confirmation latches.
    pub fn update(&mut self, detected: TraitSet) {
        for t in TraitId::all() {
            let b = &mut self.beliefs[t.slot()];
            if detected.contains(t) {
                b.alpha += 1.0;
            } else {
                b.beta += 1.0;
            }
        }
        self.refresh_confirmed();
    }

    pub fn update_labels(&mut self, labels: &BTreeMap<TraitId, bool>) {
        self.update(labels.iter().filter(|(_, v)| **v).map(|(k, _)| *k).collect());
    }

    /// Unconfirmed traits by descending entropy, ties by ascending index.
    pub fn priority_traits(&self, k: usize) -> Vec<TraitId> {
        let mut open: Vec<(TraitId, f64)> =
            TraitId::all().filter(|t| !self.confirmed.contains(*t)).map(|t| (t, self.entropy(t))).collect();
        open.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        open.into_iter().take(k).map(|(t, _)| t).collect()
    }

    pub fn snapshot(&self) -> BTreeMap<TraitId, BeliefSnapshot> {
        TraitId::all()
            .map(|t| {
                let b = self.belief(t);
                (
                    t,
                    BeliefSnapshot {
                        alpha: b.alpha,
                        beta: b.beta,
                        mean: b.mean(),
                        confirmed: self.confirmed.contains(t),
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub alpha: f64,
    pub beta: f64,
    pub mean: f64,
    pub confirmed: bool,
}
