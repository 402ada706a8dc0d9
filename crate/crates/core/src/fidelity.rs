//! Patient-simulator validation: trait-frequency alignment and reply
//! similarity under leave-one-patient-out folds.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{Snippet, SnippetBank};
use crate::detector::Detector;
use crate::ontology::{Ontology, TraitId, TraitSet, TRAIT_COUNT};
use crate::patient::{EmissionParams, PatientView, Realiser};
use crate::retrieval::{cosine, AnchorIndex, Encoder, RetrievalError};
use crate::runner::{episode_seed, Engine, EpisodeConfig, Mode, RunError, TurnRecord};
use crate::selector::Selector;
use crate::stats::Summary;

pub const KL_SMOOTHING: f64 = 1e-6;
pub const KL_THRESHOLD: f64 = 1.0;
pub const FREQ_ERROR_THRESHOLD: f64 = 0.15;
pub const AUC_THRESHOLD: f64 = 0.70;
pub const COSINE_THRESHOLD: f64 = 0.40;
/// Traits active in at most this many patients are left out of the overall AUC.
pub const MIN_POSITIVE_PATIENTS: usize = 3;

const PERMUTE_STREAM: u64 = 7;

#[derive(Debug, Error)]
pub enum FidelityError {
    #[error("leave-one-out needs at least 2 patients, bank has {0}")]
    InsufficientPatients(usize),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("episode: {0}")]
    Run(#[from] RunError),
    #[error("simulation for patient `{patient}` aborted at turn {turn} ({stage}): {message}")]
    Aborted { patient: String, turn: usize, stage: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProfile {
    pub patient_id: String,
    pub source: Source,
    pub frequencies: BTreeMap<TraitId, f64>,
}

impl FrequencyProfile {
    pub fn new(patient_id: &str, source: Source, values: [f64; TRAIT_COUNT]) -> Self {
        assert!(values.iter().all(|v| v.is_finite()), "frequencies must be finite");
        Self {
            patient_id: patient_id.to_string(),
            source,
            frequencies: TraitId::all().map(|t| (t, values[t.slot()])).collect(),
        }
    }

    pub fn values(&self) -> [f64; TRAIT_COUNT] {
        let mut out = [0.0; TRAIT_COUNT];
        for t in TraitId::all() {
            out[t.slot()] = self.frequencies.get(&t).copied().unwrap_or(0.0);
        }
        out
    }

    /// Share of rows carrying each trait; all zeros when `rows` is empty.
    pub fn from_sets(patient_id: &str, source: Source, rows: impl IntoIterator<Item = TraitSet>) -> Self {
        let mut counts = [0usize; TRAIT_COUNT];
        let mut n = 0usize;
        for r in rows {
            n += 1;
            for t in r.iter() {
                counts[t.slot()] += 1;
            }
        }
        let values = counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 });
        Self::new(patient_id, source, values)
    }
}

fn smoothed(p: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = p.iter().map(|x| x + KL_SMOOTHING).collect();
    let z: f64 = s.iter().sum();
    s.into_iter().map(|x| x / z).collect()
}

/// KL(p || q) in nats after adding a small mass to every entry and
/// renormalising both vectors.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share support");
    let (p, q) = (smoothed(p), smoothed(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

pub fn kl_divergence(real: &FrequencyProfile, sim: &FrequencyProfile) -> f64 {
    kl(&real.values(), &sim.values())
}

/// Mean absolute per-trait difference of the raw frequencies.
pub fn frequency_error(real: &FrequencyProfile, sim: &FrequencyProfile) -> f64 {
    let (a, b) = (real.values(), sim.values());
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / TRAIT_COUNT as f64
}

/// Probability that a positive outranks a negative, ties counting half,
/// over every positive/negative pair. `None` if either class is empty.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// AUC of `scores` against `labels`, keyed by patient. Patients missing
/// from either map are ignored.
pub fn trait_auc(scores: &BTreeMap<String, f64>, labels: &BTreeMap<String, bool>) -> Option<f64> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (k, s) in scores {
        match labels.get(k) {
            Some(true) => pos.push(*s),
            Some(false) => neg.push(*s),
            None => {}
        }
    }
    auc_from_scores(&pos, &neg)
}

pub struct LooAgents<'a> {
    pub ontology: Arc<Ontology>,
    pub encoder: Arc<dyn Encoder>,
    pub selector: &'a dyn Selector,
    pub realiser: &'a Realiser,
    pub detector: &'a dyn Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityConfig {
    pub episodes_per_patient: usize,
    pub episode: EpisodeConfig,
    /// Shuffle each patient's trait labels before AUC (permutation null).
    pub permute_labels: bool,
    pub parallel: usize,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            episodes_per_patient: 5,
            episode: EpisodeConfig {
                emission: EmissionParams { suppression: false, ..EmissionParams::default() },
                ..EpisodeConfig::default()
            },
            permute_labels: false,
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub patient_id: String,
    pub real: FrequencyProfile,
    pub simulated: FrequencyProfile,
    pub kl: f64,
    pub freq_error: f64,
    pub semantic_similarity: f64,
    pub simulated_turns: usize,
    /// Simulated trait frequencies split by the strategy that produced the turn.
    pub by_strategy: BTreeMap<String, FrequencyProfile>,
    /// Retrievals that landed on the held-out patient; must be zero.
    pub leakage_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitAuc {
    pub trait_id: TraitId,
    pub n_positive: usize,
    pub n_negative: usize,
    pub auc: Option<f64>,
    pub excluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub kl: bool,
    pub freq_error: bool,
    pub auc: bool,
    pub semantic_similarity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub n_patients: usize,
    pub episodes_per_patient: usize,
    pub permuted_labels: bool,
    pub kl: Summary,
    pub freq_error: Summary,
    pub semantic_similarity: Summary,
    /// Per-patient AUC over the included traits.
    pub auc_overall: Option<Summary>,
    pub per_trait_auc: Vec<TraitAuc>,
    pub thresholds_met: Thresholds,
    pub leakage_violations: usize,
    pub folds: Vec<FoldResult>,
}

fn held_out_bank(bank: &SnippetBank, patient: &str) -> SnippetBank {
    SnippetBank::new(bank.snippets().iter().filter(|s| s.patient_id != patient).cloned().collect())
}

fn run_fold(
    bank: &SnippetBank,
    agents: &LooAgents<'_>,
    cfg: &FidelityConfig,
    patient: &str,
) -> Result<FoldResult, FidelityError> {
    let others = Arc::new(held_out_bank(bank, patient));
    let index = AnchorIndex::build(others, agents.encoder.clone())?.with_audit();
    let engine = Engine {
        ontology: agents.ontology.clone(),
        index: &index,
        selector: agents.selector,
        realiser: agents.realiser,
        detector: agents.detector,
    };
    let profile = bank.base_rates(patient).map_err(|_| RunError::UnknownPatient(patient.to_string()))?;
    let view = PatientView::of(&profile);

    let mut turns: Vec<TurnRecord> = Vec::new();
    for k in 0..cfg.episodes_per_patient {
        let ep = EpisodeConfig {
            seed: episode_seed(cfg.episode.seed, &format!("{patient}-loo{k:03}")),
            ..cfg.episode.clone()
        };
        let (t, aborted) = engine.simulate(&ep, view.clone(), Mode::Tpa)?;
        if let Some(a) = aborted {
            return Err(FidelityError::Aborted {
                patient: patient.into(),
                turn: a.turn,
                stage: a.stage,
                message: a.message,
            });
        }
        turns.extend(t);
    }
    let leakage_violations = index.audit_log().iter().filter(|e| e.patient_id == patient).count()
        + usize::from(index.encoded_patients().contains(patient));

    let real_rows: Vec<&Snippet> = bank.patient_snippets(patient).collect();
    let real = FrequencyProfile::from_sets(patient, Source::Real, real_rows.iter().map(|s| s.traits));
    let simulated =
        FrequencyProfile::from_sets(patient, Source::Simulated, turns.iter().map(|t| t.detections.detected()));

    let mut split: BTreeMap<String, Vec<TraitSet>> = BTreeMap::new();
    for t in &turns {
        split.entry(t.strategy.to_string()).or_default().push(t.detections.detected());
    }
    let by_strategy =
        split.into_iter().map(|(k, v)| (k, FrequencyProfile::from_sets(patient, Source::Simulated, v))).collect();

    Ok(FoldResult {
        patient_id: patient.to_string(),
        kl: kl_divergence(&real, &simulated),
        freq_error: frequency_error(&real, &simulated),
        semantic_similarity: matched_similarity(agents.encoder.as_ref(), &real_rows, &turns)?,
        simulated_turns: turns.len(),
        real,
        simulated,
        by_strategy,
        leakage_violations,
    })
}

/// Mean cosine between each simulated reply and the real reply whose
/// doctor question is closest to the simulated question.
fn matched_similarity(encoder: &dyn Encoder, real: &[&Snippet], turns: &[TurnRecord]) -> Result<f64, FidelityError> {
    if real.is_empty() || turns.is_empty() {
        return Ok(0.0);
    }
    let real_q = encoder.encode_batch(&real.iter().map(|s| s.doctor_curr.as_str()).collect::<Vec<_>>())?;
    let real_r = encoder.encode_batch(&real.iter().map(|s| s.patient_reply.as_str()).collect::<Vec<_>>())?;
    let mut total = 0.0;
    for t in turns {
        let q = encoder.encode(&t.question)?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, e) in real_q.iter().enumerate() {
            let c = cosine(&q, e)?;
            if c > best.1 {
                best = (i, c);
            }
        }
        total += cosine(&encoder.encode(&t.response)?, &real_r[best.0])?;
    }
    Ok(total / turns.len() as f64)
}

/// Leave-one-patient-out validation of the patient simulator.
pub fn loo_validate(
    bank: &SnippetBank,
    agents: &LooAgents<'_>,
    cfg: &FidelityConfig,
) -> Result<FidelityReport, FidelityError> {
    let patients: Vec<String> = bank.patient_ids().map(str::to_string).collect();
    if patients.len() < 2 {
        return Err(FidelityError::InsufficientPatients(patients.len()));
    }
    cfg.episode.validate()?;
    let folds: Vec<FoldResult> = if cfg.parallel <= 1 {
        patients.iter().map(|p| run_fold(bank, agents, cfg, p)).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallel).build().expect("thread pool");
        pool.install(|| patients.par_iter().map(|p| run_fold(bank, agents, cfg, p)).collect::<Result<_, _>>())?
    };

    let mut labels: Vec<TraitSet> =
        patients.iter().map(|p| bank.base_rates(p).expect("indexed").ground_truth).collect();
    if cfg.permute_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.episode.seed);
        rng.set_stream(PERMUTE_STREAM);
        for l in labels.iter_mut() {
            let mut bits: Vec<bool> = TraitId::all().map(|t| l.contains(t)).collect();
            bits.shuffle(&mut rng);
            *l = TraitId::all().filter(|t| bits[t.slot()]).collect();
        }
    }
    let scores: Vec<[f64; TRAIT_COUNT]> = folds.iter().map(|f| f.simulated.values()).collect();

    let per_trait_auc: Vec<TraitAuc> = TraitId::all()
        .map(|t| {
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (l, s) in labels.iter().zip(&scores) {
                if l.contains(t) {
                    pos.push(s[t.slot()]);
                } else {
                    neg.push(s[t.slot()]);
                }
            }
            TraitAuc {
                trait_id: t,
                n_positive: pos.len(),
                n_negative: neg.len(),
                auc: auc_from_scores(&pos, &neg),
                excluded: pos.len() <= MIN_POSITIVE_PATIENTS || neg.is_empty(),
            }
        })
        .collect();
    let included: Vec<TraitId> = per_trait_auc.iter().filter(|a| !a.excluded).map(|a| a.trait_id).collect();

    let patient_auc: Vec<f64> = labels
        .iter()
        .zip(&scores)
        .filter_map(|(l, s)| {
            let (pos, neg): (Vec<TraitId>, Vec<TraitId>) = included.iter().partition(|t| l.contains(**t));
            auc_from_scores(
                &pos.iter().map(|t| s[t.slot()]).collect::<Vec<_>>(),
                &neg.iter().map(|t| s[t.slot()]).collect::<Vec<_>>(),
            )
        })
        .collect();
    let auc_overall = (!patient_auc.is_empty()).then(|| Summary::of(&patient_auc));

    let col = |f: fn(&FoldResult) -> f64| Summary::of(&folds.iter().map(f).collect::<Vec<_>>());
    let (kl_s, fe_s, sim_s) = (col(|f| f.kl), col(|f| f.freq_error), col(|f| f.semantic_similarity));
    Ok(FidelityReport {
        n_patients: patients.len(),
        episodes_per_patient: cfg.episodes_per_patient,
        permuted_labels: cfg.permute_labels,
        thresholds_met: Thresholds {
            kl: kl_s.mean < KL_THRESHOLD,
            freq_error: fe_s.mean < FREQ_ERROR_THRESHOLD,
            auc: auc_overall.is_some_and(|a| a.mean > AUC_THRESHOLD),
            semantic_similarity: sim_s.mean >= COSINE_THRESHOLD,
        },
        kl: kl_s,
        freq_error: fe_s,
        semantic_similarity: sim_s,
        auc_overall,
        per_trait_auc,
        leakage_violations: folds.iter().map(|f| f.leakage_violations).sum(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{synthesize_bank, SynthSpec};
    use crate::detector::RuleDetector;
    use crate::prompts::PromptSet;
    use crate::retrieval::HashEncoder;
    use crate::selector::HeuristicSelector;
    use proptest::prelude::*;

    fn ten(head: &[f64]) -> [f64; TRAIT_COUNT] {
        let mut v = [0.0; TRAIT_COUNT];
        v[..head.len()].copy_from_slice(head);
        v
    }

    #[test]
    fn kl_examples() {
        let p = FrequencyProfile::new("a", Source::Real, ten(&[0.3, 0.2, 0.1]));
        assert!(kl_divergence(&p, &p).abs() < 1e-9);
        let want = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5.0f64.ln();
        assert!((kl(&[0.5, 0.5], &[0.9, 0.1]) - want).abs() < 1e-5);
        assert!((kl(&[0.5, 0.5], &[0.9, 0.1]) - 0.5108).abs() < 1e-3);
    }

    #[test]
    fn kl_handles_zero_mass() {
        let v = kl(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(v.is_finite() && v > 10.0);
        assert_eq!(kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn frequency_error_examples() {
        let r = FrequencyProfile::new("a", Source::Real, ten(&[0.5, 0.1]));
        let s = FrequencyProfile::new("a", Source::Simulated, ten(&[0.4, 0.2]));
        assert!((frequency_error(&r, &s) - 0.02).abs() < 1e-12);
        assert_eq!(frequency_error(&r, &r), 0.0);
        let ones = FrequencyProfile::new("a", Source::Real, [1.0; TRAIT_COUNT]);
        let zeros = FrequencyProfile::new("a", Source::Real, [0.0; TRAIT_COUNT]);
        assert_eq!(frequency_error(&ones, &zeros), 1.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_from_scores(&[0.9, 0.8], &[0.1, 0.2]), Some(1.0));
        assert_eq!(auc_from_scores(&[0.5, 0.5], &[0.5]), Some(0.5));
        // One of the two pairs is correctly ordered.
        assert_eq!(auc_from_scores(&[0.9, 0.7], &[0.8]), Some(0.5));
        assert_eq!(auc_from_scores(&[0.9, 0.8], &[0.8]), Some(0.75));
        assert_eq!(auc_from_scores(&[], &[0.8]), None);
        let scores: BTreeMap<String, f64> =
            [("a", 0.9), ("b", 0.7), ("c", 0.8)].map(|(k, v)| (k.to_string(), v)).into();
        let labels: BTreeMap<String, bool> =
            [("a", true), ("b", true), ("c", false)].map(|(k, v)| (k.to_string(), v)).into();
        assert_eq!(trait_auc(&scores, &labels), Some(0.5));
    }

    /// Rank-sum form of the same statistic, with mid-ranks for ties.
    fn rank_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut all: Vec<(f64, bool)> = pos.iter().map(|x| (*x, true)).chain(neg.iter().map(|x| (*x, false))).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut ranks = vec![0.0; all.len()];
        let mut i = 0;
        while i < all.len() {
            let mut j = i;
            while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
                j += 1;
            }
            let r = (i + j) as f64 / 2.0 + 1.0;
            ranks[i..=j].iter_mut().for_each(|x| *x = r);
            i = j + 1;
        }
        let (np, nn) = (pos.len() as f64, neg.len() as f64);
        let rsum: f64 = all.iter().zip(&ranks).filter(|(a, _)| a.1).map(|(_, r)| r).sum();
        (rsum - np * (np + 1.0) / 2.0) / (np * nn)
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(p in prop::collection::vec(0.0f64..1.0, 10), q in prop::collection::vec(0.0f64..1.0, 10)) {
            prop_assert!(kl(&p, &q) >= 0.0);
        }

        #[test]
        fn auc_matches_rank_sum(pos in prop::collection::vec(0u8..6, 1..12), neg in prop::collection::vec(0u8..6, 1..12)) {
            let pos: Vec<f64> = pos.into_iter().map(|x| x as f64 / 5.0).collect();
            let neg: Vec<f64> = neg.into_iter().map(|x| x as f64 / 5.0).collect();
            let a = auc_from_scores(&pos, &neg).unwrap();
            prop_assert!((a - rank_auc(&pos, &neg)).abs() < 1e-12);
        }

        #[test]
        fn frequency_error_bounded(p in prop::collection::vec(0.0f64..=1.0, 10), q in prop::collection::vec(0.0f64..=1.0, 10)) {
            let a = FrequencyProfile::new("x", Source::Real, p.try_into().unwrap());
            let b = FrequencyProfile::new("x", Source::Simulated, q.try_into().unwrap());
            prop_assert!(frequency_error(&a, &b) <= 1.0);
        }
    }

    struct Stack {
        ontology: Arc<Ontology>,
        selector: HeuristicSelector,
        realiser: Realiser,
        detector: RuleDetector,
    }

    fn stack() -> Stack {
        let ontology = Arc::new(Ontology::builtin().clone());
        Stack {
            selector: HeuristicSelector::new(ontology.clone()),
            realiser: Realiser::template(ontology.clone(), PromptSet::builtin().realise),
            detector: RuleDetector::new(ontology.clone()),
            ontology,
        }
    }

    fn agents(s: &Stack) -> LooAgents<'_> {
        LooAgents {
            ontology: s.ontology.clone(),
            encoder: Arc::new(HashEncoder::default()),
            selector: &s.selector,
            realiser: &s.realiser,
            detector: &s.detector,
        }
    }

    #[test]
    fn two_patients_two_folds_no_leak() {
        let bank =
            synthesize_bank(SynthSpec { n_patients: 2, snippets_per_patient: 6, trait_profile_seed: None }, 4).unwrap();
        let s = stack();
        let cfg = FidelityConfig { episodes_per_patient: 1, ..Default::default() };
        let r = loo_validate(&bank, &agents(&s), &cfg).unwrap();
        assert_eq!(r.folds.len(), 2);
        assert_eq!(r.leakage_violations, 0);
        assert!(r.folds.iter().all(|f| f.simulated_turns == 20));
    }

    #[test]
    fn single_patient_is_rejected() {
        let bank =
            synthesize_bank(SynthSpec { n_patients: 1, snippets_per_patient: 6, trait_profile_seed: None }, 4).unwrap();
        let s = stack();
        let r = loo_validate(&bank, &agents(&s), &FidelityConfig::default());
        assert!(matches!(r, Err(FidelityError::InsufficientPatients(1))));
    }

    #[test]
    fn self_consistent_bank_is_faithful() {
        let bank = synthesize_bank(SynthSpec { n_patients: 16, snippets_per_patient: 20, trait_profile_seed: None }, 9)
            .unwrap();
        let s = stack();
        let cfg = FidelityConfig { episodes_per_patient: 4, parallel: 4, ..Default::default() };
        let r = loo_validate(&bank, &agents(&s), &cfg).unwrap();
        assert_eq!(r.leakage_violations, 0);
        assert!(r.kl.mean < KL_THRESHOLD, "kl {}", r.kl.mean);
        assert!(r.freq_error.mean < FREQ_ERROR_THRESHOLD, "freq {}", r.freq_error.mean);
        let auc = r.auc_overall.unwrap().mean;
        assert!(auc > 0.9, "auc {auc}");
        let serial = loo_validate(&bank, &agents(&s), &FidelityConfig { parallel: 1, ..cfg }).unwrap();
        assert_eq!(serial, r);
    }

    #[test]
    fn permuted_labels_are_chance() {
        let bank =
            synthesize_bank(SynthSpec { n_patients: 30, snippets_per_patient: 12, trait_profile_seed: None }, 21)
                .unwrap();
        let s = stack();
        let cfg = FidelityConfig { episodes_per_patient: 2, parallel: 4, permute_labels: true, ..Default::default() };
        let r = loo_validate(&bank, &agents(&s), &cfg).unwrap();
        let auc = r.auc_overall.unwrap().mean;
        assert!((auc - 0.5).abs() < 0.1, "auc {auc}");
    }
}
