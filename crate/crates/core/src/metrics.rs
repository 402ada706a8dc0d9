//! Episode and corpus metrics: coverage, set-level precision/recall/F1,
//! area under the coverage curve, per-strategy gain rates and strategy
//! usage by dialogue phase.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Strategy, TraitSet};
use crate::runner::{coverage, EpisodeLog, TurnStrategy};
use crate::stats;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("episode `{0}` has no ground-truth traits")]
    EmptyGroundTruth(String),
    #[error("no valid episode logs to aggregate")]
    NoValidLogs,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub patient_id: String,
    pub coverage: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub aucc: f64,
    pub per_turn_coverage: Vec<f64>,
}

/// Cumulative coverage after each turn, padded with the last value up to
/// the episode's turn budget.
pub fn coverage_curve(log: &EpisodeLog) -> Vec<f64> {
    let horizon = log.max_turns.max(log.turns.len());
    let mut seen = TraitSet::empty();
    let mut curve: Vec<f64> = log
        .turns
        .iter()
        .map(|t| {
            seen = seen.union(t.confirmed_after);
            coverage(seen, log.ground_truth)
        })
        .collect();
    let last = curve.last().copied().unwrap_or(0.0);
    curve.resize(horizon, last);
    curve
}

fn final_confirmed(log: &EpisodeLog) -> TraitSet {
    log.turns.iter().fold(TraitSet::empty(), |acc, t| acc.union(t.confirmed_after))
}

pub fn episode_metrics(log: &EpisodeLog) -> Result<EpisodeMetrics, MetricsError> {
    let gt = log.ground_truth;
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth(log.episode_id.clone()));
    }
    let found = final_confirmed(log);
    let tp = found.intersection(gt).len() as f64;
    let precision = if found.is_empty() { 0.0 } else { tp / found.len() as f64 };
    let recall = tp / gt.len() as f64;
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let curve = coverage_curve(log);
    Ok(EpisodeMetrics {
        episode_id: log.episode_id.clone(),
        patient_id: log.patient_id.clone(),
        coverage: coverage(found, gt),
        precision,
        recall,
        f1,
        aucc: stats::mean(&curve),
        per_turn_coverage: curve,
    })
}

/// Share of turns using `strategy` after which cumulative coverage rose,
/// pooled over every turn of every log. `None` when the strategy was never used.
pub fn gain_rate(logs: &[EpisodeLog], strategy: Strategy) -> Option<f64> {
    let (mut used, mut gained) = (0usize, 0usize);
    for log in logs {
        let mut prev = 0.0;
        let mut seen = TraitSet::empty();
        for t in &log.turns {
            seen = seen.union(t.confirmed_after);
            let cov = coverage(seen, log.ground_truth);
            if t.strategy == TurnStrategy::Used(strategy) {
                used += 1;
                if cov > prev {
                    gained += 1;
                }
            }
            prev = cov;
        }
    }
    (used > 0).then(|| gained as f64 / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Overall,
    Early,
    Mid,
    Late,
}

impl Phase {
    pub const SPLITS: [Phase; 3] = [Phase::Early, Phase::Mid, Phase::Late];

    /// Early is turns 1-5, mid 6-12, late 13 onwards.
    pub fn of(turn: usize) -> Phase {
        match turn {
            0..=5 => Phase::Early,
            6..=12 => Phase::Mid,
            _ => Phase::Late,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Overall => "overall",
            Phase::Early => "early",
            Phase::Mid => "mid",
            Phase::Late => "late",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyShare {
    pub strategy: String,
    pub turns: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDistribution {
    pub phase: Phase,
    pub total_turns: usize,
    pub shares: Vec<StrategyShare>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub coverage: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub aucc: f64,
}

impl MeanMetrics {
    fn of<'a>(ms: impl Iterator<Item = &'a EpisodeMetrics> + Clone) -> Self {
        let col = |f: fn(&EpisodeMetrics) -> f64| stats::mean(&ms.clone().map(f).collect::<Vec<_>>());
        Self {
            coverage: col(|m| m.coverage),
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            f1: col(|m| m.f1),
            aucc: col(|m| m.aucc),
        }
    }

    fn of_means(ms: &[MeanMetrics]) -> Self {
        let col = |f: fn(&MeanMetrics) -> f64| stats::mean(&ms.iter().map(f).collect::<Vec<_>>());
        Self {
            coverage: col(|m| m.coverage),
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            f1: col(|m| m.f1),
            aucc: col(|m| m.aucc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub turn: usize,
    pub mean_cov: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub n_episodes: usize,
    pub n_patients: usize,
    pub n_aborted_excluded: usize,
    /// Unweighted mean over episodes.
    pub mean: MeanMetrics,
    /// Mean within each patient, then across patients.
    pub mean_by_patient: MeanMetrics,
    pub gain_rate: BTreeMap<String, Option<f64>>,
    pub strategy_distribution: Vec<PhaseDistribution>,
    pub curve: Vec<CurvePoint>,
    pub episodes: Vec<EpisodeMetrics>,
}

fn distribution(phase: Phase, counts: &BTreeMap<String, usize>) -> PhaseDistribution {
    let total: usize = counts.values().sum();
    PhaseDistribution {
        phase,
        total_turns: total,
        shares: counts
            .iter()
            .map(|(s, &n)| StrategyShare { strategy: s.clone(), turns: n, fraction: n as f64 / total as f64 })
            .collect(),
    }
}

/// Corpus summary. Aborted logs are left out unless `include_aborted`.
/// Logs are put in a canonical order first so the result does not depend
/// on input order.
pub fn aggregate(logs: &[EpisodeLog], include_aborted: bool) -> Result<CorpusReport, MetricsError> {
    let mut kept: Vec<&EpisodeLog> = logs.iter().filter(|l| include_aborted || !l.is_aborted()).collect();
    let n_aborted_excluded = logs.len() - kept.len();
    if kept.is_empty() {
        return Err(MetricsError::NoValidLogs);
    }
    kept.sort_by(|a, b| (&a.episode_id, &a.patient_id, &a.run_id).cmp(&(&b.episode_id, &b.patient_id, &b.run_id)));
    let episodes = kept.iter().map(|l| episode_metrics(l)).collect::<Result<Vec<_>, _>>()?;

    let mut by_patient: BTreeMap<&str, Vec<&EpisodeMetrics>> = BTreeMap::new();
    for m in &episodes {
        by_patient.entry(&m.patient_id).or_default().push(m);
    }
    let patient_means: Vec<MeanMetrics> = by_patient.values().map(|v| MeanMetrics::of(v.iter().copied())).collect();

    let owned: Vec<EpisodeLog> = kept.iter().map(|l| (*l).clone()).collect();
    let gain_rate = Strategy::ALL.iter().map(|s| (s.as_str().to_string(), gain_rate(&owned, *s))).collect();

    let mut counts: BTreeMap<Phase, BTreeMap<String, usize>> = BTreeMap::new();
    for log in &kept {
        for t in &log.turns {
            let key = t.strategy.to_string();
            for p in [Phase::Overall, Phase::of(t.turn)] {
                *counts.entry(p).or_default().entry(key.clone()).or_default() += 1;
            }
        }
    }
    let strategy_distribution = counts.iter().map(|(p, c)| distribution(*p, c)).collect();

    let horizon = episodes.iter().map(|m| m.per_turn_coverage.len()).max().unwrap_or(0);
    let curve = (0..horizon)
        .map(|i| {
            let col: Vec<f64> = episodes
                .iter()
                .map(|m| m.per_turn_coverage.get(i).or(m.per_turn_coverage.last()).copied().unwrap_or(0.0))
                .collect();
            let s = stats::Summary::of(&col);
            CurvePoint { turn: i + 1, mean_cov: s.mean, ci95_low: s.ci95_low, ci95_high: s.ci95_high }
        })
        .collect();

    Ok(CorpusReport {
        n_episodes: episodes.len(),
        n_patients: by_patient.len(),
        n_aborted_excluded,
        mean: MeanMetrics::of(episodes.iter()),
        mean_by_patient: MeanMetrics::of_means(&patient_means),
        gain_rate,
        strategy_distribution,
        curve,
        episodes,
    })
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

/// `episode_id,patient_id,coverage,precision,recall,f1,aucc`, one row per
/// episode followed by `MEAN` and `MEAN_BY_PATIENT` rows.
pub fn write_report_csv<W: Write>(report: &CorpusReport, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode_id", "patient_id", "coverage", "precision", "recall", "f1", "aucc"])?;
    for m in &report.episodes {
        w.write_record([
            m.episode_id.clone(),
            m.patient_id.clone(),
            num(m.coverage),
            num(m.precision),
            num(m.recall),
            num(m.f1),
            num(m.aucc),
        ])?;
    }
    for (label, m) in [("MEAN", &report.mean), ("MEAN_BY_PATIENT", &report.mean_by_patient)] {
        w.write_record([
            label.to_string(),
            String::new(),
            num(m.coverage),
            num(m.precision),
            num(m.recall),
            num(m.f1),
            num(m.aucc),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `turn,mean_cov,ci95_low,ci95_high`.
pub fn write_curves_csv<W: Write>(report: &CorpusReport, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["turn", "mean_cov", "ci95_low", "ci95_high"])?;
    for p in &report.curve {
        w.write_record([p.turn.to_string(), num(p.mean_cov), num(p.ci95_low), num(p.ci95_high)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `phase,strategy,turns,fraction`.
pub fn write_strategy_csv<W: Write>(report: &CorpusReport, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phase", "strategy", "turns", "fraction"])?;
    for d in &report.strategy_distribution {
        for s in &d.shares {
            w.write_record([d.phase.as_str().to_string(), s.strategy.clone(), s.turns.to_string(), num(s.fraction)])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
