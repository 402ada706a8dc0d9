//! Episode orchestration: the per-turn doctor -> patient -> detector ->
//! belief loop, plus the random-strategy and transcript-replay conditions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bank::{PatientProfile, SnippetBank};
use crate::belief::{BeliefSnapshot, BeliefState, DEFAULT_TAU};
use crate::detector::{DetectionResult, Detector};
use crate::ontology::{Ontology, Scenario, Strategy, TraitId, TraitSet};
use crate::patient::{AnchorRef, EmissionParams, PatientAgent, PatientView, Realiser};
use crate::retrieval::AnchorIndex;
use crate::selector::{DialogueTurn, Selector, SessionContext, Thought};

pub const DEFAULT_TURNS: usize = 20;

pub const DEFAULT_BACKGROUND: &str = "Adult referred for a structured autism assessment; verbally fluent, \
conversing in full sentences. The language section focuses on stereotyped or idiosyncratic use of words and phrases.";

const TOPIC_STREAM: u64 = 0;
const EMIT_STREAM: u64 = 1;
const TEXT_STREAM: u64 = 2;
const STRATEGY_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("patient `{0}` has no ground-truth traits; episode skipped")]
    EmptyGroundTruth(String),
    #[error("replay transcript is empty")]
    EmptyTranscript,
    #[error("no dialogic scenarios available")]
    NoScenarios,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tpa,
    Random,
    Replay,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Tpa => "tpa",
            Mode::Random => "random",
            Mode::Replay => "replay",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tpa" => Ok(Mode::Tpa),
            "random" => Ok(Mode::Random),
            "replay" => Ok(Mode::Replay),
            _ => Err(format!("unknown mode `{s}` (expected tpa, random or replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    pub tau: f64,
    pub seed: u64,
    pub clinical_background: String,
    pub emission: EmissionParams,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_turns: DEFAULT_TURNS,
            tau: DEFAULT_TAU,
            seed: 0,
            clinical_background: DEFAULT_BACKGROUND.to_string(),
            emission: EmissionParams::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.max_turns == 0 {
            return Err(RunError::Config("episode.turns must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(RunError::Config(format!("episode.tau must lie in (0, 1), got {}", self.tau)));
        }
        self.emission.validate().map_err(RunError::Config)
    }
}

/// Strategy column of a turn: a real strategy or the replay marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TurnStrategy {
    Used(Strategy),
    Replay,
}

impl TurnStrategy {
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            TurnStrategy::Used(s) => Some(s),
            TurnStrategy::Replay => None,
        }
    }
}

impl fmt::Display for TurnStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TurnStrategy::Used(s) => f.write_str(s.as_str()),
            TurnStrategy::Replay => f.write_str("replay"),
        }
    }
}

impl Serialize for TurnStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TurnStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "replay" {
            return Ok(TurnStrategy::Replay);
        }
        s.parse().map(TurnStrategy::Used).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<Thought>,
    pub strategy: TurnStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<u8>,
    pub question: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AnchorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emitted: Option<TraitSet>,
    pub detections: DetectionResult,
    pub confirmed_after: TraitSet,
    pub coverage_after: f64,
    pub belief_snapshot: BTreeMap<TraitId, BeliefSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub turn: usize,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub run_id: String,
    pub episode_id: String,
    pub patient_id: String,
    pub mode: Mode,
    /// Configured turn budget; metrics pad shorter episodes to this length.
    pub max_turns: usize,
    pub ground_truth: TraitSet,
    pub turns: Vec<TurnRecord>,
    pub final_confirmed: TraitSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<Abort>,
}

impl EpisodeLog {
    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serialises")
    }
}

pub fn coverage(confirmed: TraitSet, ground_truth: TraitSet) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    confirmed.intersection(ground_truth).len() as f64 / ground_truth.len() as f64
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Seeded shuffle of the dialogic scenarios, cycled to `turns` entries.
pub fn plan_topics(scenarios: &[Scenario], turns: usize, seed: u64) -> Result<Vec<Scenario>, RunError> {
    let mut pool: Vec<Scenario> = scenarios.iter().filter(|s| s.dialogic).cloned().collect();
    if pool.is_empty() {
        return Err(RunError::NoScenarios);
    }
    pool.shuffle(&mut stream(seed, TOPIC_STREAM));
    Ok((0..turns).map(|i| pool[i % pool.len()].clone()).collect())
}

/// Per-episode seed derived from the run seed and the episode id.
pub fn episode_seed(run_seed: u64, episode_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(episode_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Shared, read-only components for a batch of episodes.
pub struct Engine<'a> {
    pub ontology: Arc<Ontology>,
    pub index: &'a AnchorIndex,
    pub selector: &'a dyn Selector,
    pub realiser: &'a Realiser,
    pub detector: &'a dyn Detector,
}

/// Turn records as produced by the loop, before scoring against ground truth.
struct Trace {
    turns: Vec<(TurnRecord, TraitSet)>,
    aborted: Option<Abort>,
}

fn abort(turn: usize, stage: &str, e: impl fmt::Display) -> Abort {
    Abort { turn, stage: stage.to_string(), message: e.to_string() }
}

fn neutral_thought() -> Thought {
    Thought {
        confirmed_analysis: String::new(),
        priority_traits: Vec::new(),
        elicitation_conditions: "Ask a natural question about the current activity.".to_string(),
        strategy_rationale: "Strategy drawn at random.".to_string(),
    }
}

impl<'a> Engine<'a> {
    /// The closed loop. Sees the patient's rates, never their labels.
    fn drive(&self, cfg: &EpisodeConfig, view: PatientView, mode: Mode) -> Result<Trace, RunError> {
        let topics = plan_topics(self.ontology.scenarios(), cfg.max_turns, cfg.seed)?;
        let mut emit_rng = stream(cfg.seed, EMIT_STREAM);
        let mut text_rng = stream(cfg.seed, TEXT_STREAM);
        let mut strategy_rng = stream(cfg.seed, STRATEGY_STREAM);
        let agent = PatientAgent::new(view, cfg.emission, self.realiser, self.index, self.ontology.clone())
            .map_err(|e| RunError::Config(e.to_string()))?;
        let blank = BeliefState::new(cfg.tau);
        let mut belief = BeliefState::new(cfg.tau);
        let mut history: Vec<DialogueTurn> = Vec::new();
        let mut out = Trace { turns: Vec::new(), aborted: None };

        for (i, topic) in topics.iter().enumerate() {
            let turn = i + 1;
            let (thought, strategy, question) = match mode {
                Mode::Tpa => {
                    let ctx = SessionContext {
                        clinical_background: &cfg.clinical_background,
                        history: &history,
                        belief: &belief,
                        topic,
                    };
                    let th = match self.selector.think(&ctx) {
                        Ok(t) => t,
                        Err(e) => {
                            out.aborted = Some(abort(turn, "think", e));
                            break;
                        }
                    };
                    let s = match self.selector.plan(&ctx, &th) {
                        Ok(s) => s,
                        Err(e) => {
                            out.aborted = Some(abort(turn, "plan", e));
                            break;
                        }
                    };
                    match self.selector.ask(&ctx, &th, s) {
                        Ok(q) => (Some(th), s, q),
                        Err(e) => {
                            out.aborted = Some(abort(turn, "ask", e));
                            break;
                        }
                    }
                }
                _ => {
                    let s = *Strategy::ALL.choose(&mut strategy_rng).expect("six strategies");
                    let ctx = SessionContext {
                        clinical_background: &cfg.clinical_background,
                        history: &history,
                        belief: &blank,
                        topic,
                    };
                    match self.selector.ask(&ctx, &neutral_thought(), s) {
                        Ok(q) => (None, s, q),
                        Err(e) => {
                            out.aborted = Some(abort(turn, "ask", e));
                            break;
                        }
                    }
                }
            };
            let reply = match agent.respond(
                &question,
                &history,
                Some(strategy),
                belief.confirmed(),
                &mut emit_rng,
                &mut text_rng,
            ) {
                Ok(r) => r,
                Err(e) => {
                    out.aborted = Some(abort(turn, "patient", e));
                    break;
                }
            };
            let detections = match self.detector.detect(&question, &reply.response) {
                Ok(d) => d,
                Err(e) => {
                    out.aborted = Some(abort(turn, "detect", e));
                    break;
                }
            };
            let detected = detections.detected();
            belief.update(detected);
            history.push(DialogueTurn { question: question.clone(), response: reply.response.clone(), detected });
            out.turns.push((
                TurnRecord {
                    turn,
                    thought,
                    strategy: TurnStrategy::Used(strategy),
                    topic: Some(topic.id),
                    question,
                    response: reply.response,
                    anchor: Some(reply.anchor),
                    emitted: Some(reply.decision.emitted),
                    detections,
                    confirmed_after: belief.confirmed(),
                    coverage_after: 0.0,
                    belief_snapshot: belief.snapshot(),
                },
                belief.confirmed(),
            ));
        }
        Ok(out)
    }

    pub fn run_episode(
        &self,
        cfg: &EpisodeConfig,
        profile: &PatientProfile,
        episode_id: &str,
        run_id: &str,
        mode: Mode,
    ) -> Result<EpisodeLog, RunError> {
        cfg.validate()?;
        if mode == Mode::Replay {
            return Err(RunError::Config("replay episodes go through run_replay".into()));
        }
        if profile.ground_truth.is_empty() {
            return Err(RunError::EmptyGroundTruth(profile.patient_id.clone()));
        }
        let trace = self.drive(cfg, PatientView::of(profile), mode)?;
        Ok(score(trace, profile.ground_truth, cfg.max_turns, (run_id, episode_id, &profile.patient_id), mode))
    }

    /// Runs the loop without ground truth and returns the unscored turns
    /// (coverage fields left at zero) and any abort.
    pub fn simulate(
        &self,
        cfg: &EpisodeConfig,
        view: PatientView,
        mode: Mode,
    ) -> Result<(Vec<TurnRecord>, Option<Abort>), RunError> {
        cfg.validate()?;
        if mode == Mode::Replay {
            return Err(RunError::Config("replay episodes go through run_replay".into()));
        }
        let trace = self.drive(cfg, view, mode)?;
        Ok((trace.turns.into_iter().map(|(r, _)| r).collect(), trace.aborted))
    }

    pub fn run_random(
        &self,
        cfg: &EpisodeConfig,
        profile: &PatientProfile,
        episode_id: &str,
        run_id: &str,
    ) -> Result<EpisodeLog, RunError> {
        self.run_episode(cfg, profile, episode_id, run_id, Mode::Random)
    }
}

fn score(trace: Trace, gt: TraitSet, max_turns: usize, ids: (&str, &str, &str), mode: Mode) -> EpisodeLog {
    let (run_id, episode_id, patient_id) = ids;
    let turns: Vec<TurnRecord> = trace
        .turns
        .into_iter()
        .map(|(mut r, confirmed)| {
            r.coverage_after = coverage(confirmed, gt);
            r
        })
        .collect();
    EpisodeLog {
        run_id: run_id.to_string(),
        episode_id: episode_id.to_string(),
        patient_id: patient_id.to_string(),
        mode,
        max_turns,
        ground_truth: gt,
        final_confirmed: turns.last().map(|t| t.confirmed_after).unwrap_or_default(),
        turns,
        aborted: trace.aborted,
    }
}

/// Feeds real (question, response) pairs straight to detection and belief
/// tracking. No agents are involved.
#[allow(clippy::too_many_arguments)]
pub fn run_replay(
    transcript: &[(String, String)],
    ground_truth: TraitSet,
    cfg: &EpisodeConfig,
    detector: &dyn Detector,
    episode_id: &str,
    patient_id: &str,
    run_id: &str,
) -> Result<EpisodeLog, RunError> {
    cfg.validate()?;
    if transcript.is_empty() {
        return Err(RunError::EmptyTranscript);
    }
    let mut belief = BeliefState::new(cfg.tau);
    let mut trace = Trace { turns: Vec::new(), aborted: None };
    for (i, (q, r)) in transcript.iter().take(cfg.max_turns).enumerate() {
        let detections = match detector.detect(q, r) {
            Ok(d) => d,
            Err(e) => {
                trace.aborted = Some(abort(i + 1, "detect", e));
                break;
            }
        };
        belief.update(detections.detected());
        trace.turns.push((
            TurnRecord {
                turn: i + 1,
                thought: None,
                strategy: TurnStrategy::Replay,
                topic: None,
                question: q.clone(),
                response: r.clone(),
                anchor: None,
                emitted: None,
                detections,
                confirmed_after: belief.confirmed(),
                coverage_after: 0.0,
                belief_snapshot: belief.snapshot(),
            },
            belief.confirmed(),
        ));
    }
    Ok(score(trace, ground_truth, cfg.max_turns, (run_id, episode_id, patient_id), Mode::Replay))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub episode_id: String,
    pub patient_id: String,
    /// Scenario-level labels replacing the patient's trait set for scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<TraitSet>,
}

/// `n` episodes assigned round-robin over patients in id order.
pub fn plan_episodes(bank: &SnippetBank, n: usize) -> Vec<EpisodeSpec> {
    let ids: Vec<&str> = bank.patient_ids().collect();
    if ids.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| EpisodeSpec {
            episode_id: format!("ep{:04}", i + 1),
            patient_id: ids[i % ids.len()].to_string(),
            ground_truth: None,
        })
        .collect()
}

pub fn run_id(seed: u64, mode: Mode, config_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(mode.to_string().as_bytes());
    h.update(config_json.as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Replay transcript for a patient: their snippets in bank order.
pub fn patient_transcript(bank: &SnippetBank, patient_id: &str) -> Vec<(String, String)> {
    bank.patient_snippets(patient_id).map(|s| (s.doctor_curr.clone(), s.patient_reply.clone())).collect()
}

pub struct Batch<'a> {
    pub bank: &'a SnippetBank,
    pub cfg: &'a EpisodeConfig,
    pub mode: Mode,
    pub run_id: &'a str,
    pub parallel: usize,
}

/// Runs every spec, each with its own derived seed. Results keep spec order
/// regardless of thread count.
pub fn run_batch(
    engine: Option<&Engine<'_>>,
    batch: &Batch<'_>,
    specs: &[EpisodeSpec],
    detector: &dyn Detector,
) -> Vec<Result<EpisodeLog, RunError>> {
    let one = |spec: &EpisodeSpec| -> Result<EpisodeLog, RunError> {
        let profile =
            batch.bank.base_rates(&spec.patient_id).map_err(|_| RunError::UnknownPatient(spec.patient_id.clone()))?;
        let gt = spec.ground_truth.unwrap_or(profile.ground_truth);
        let cfg = EpisodeConfig { seed: episode_seed(batch.cfg.seed, &spec.episode_id), ..batch.cfg.clone() };
        match batch.mode {
            Mode::Replay => {
                if gt.is_empty() {
                    return Err(RunError::EmptyGroundTruth(spec.patient_id.clone()));
                }
                let transcript = patient_transcript(batch.bank, &spec.patient_id);
                run_replay(&transcript, gt, &cfg, detector, &spec.episode_id, &spec.patient_id, batch.run_id)
            }
            mode => {
                let engine = engine.ok_or_else(|| RunError::Config("agents required for simulated modes".into()))?;
                let profile = PatientProfile { ground_truth: gt, ..profile };
                engine.run_episode(&cfg, &profile, &spec.episode_id, batch.run_id, mode)
            }
        }
    };
    if batch.parallel <= 1 {
        return specs.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(batch.parallel).build().expect("thread pool");
    pool.install(|| specs.par_iter().map(one).collect())
}
