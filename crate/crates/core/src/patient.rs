//! The simulated patient: trait emission from base rates, then a reply
//! grounded in a retrieved anchor.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, GenerationRequest, GENERATION_TEMPERATURE};
use crate::bank::{PatientProfile, Snippet, RATE_EPSILON};
use crate::detector::{trait_definitions, RuleDetector};
use crate::ontology::{Ontology, Strategy, TraitId, TraitSet, TRAIT_COUNT};
use crate::prompts::PromptTemplate;
use crate::retrieval::{cosine, AnchorIndex, Embedding, RetrievalError};
use crate::selector::{format_history, DialogueTurn};
use crate::weave::{self, WeaveError};

#[derive(Debug, Error)]
pub enum PatientError {
    #[error("anchor reply is empty")]
    EmptyAnchor,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("realiser backend: {0}")]
    Backend(#[from] BackendError),
    #[error("realiser returned an empty reply")]
    EmptyReply,
    #[error(transparent)]
    Weave(#[from] WeaveError),
    #[error("anchor retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmissionParams {
    /// Logit penalty applied to traits already confirmed.
    pub m: f64,
    pub max_traits_per_turn: usize,
    pub epsilon: f64,
    /// Whether confirmed traits are penalised at all.
    pub suppression: bool,
    pub affinity_enabled: bool,
    pub affinity_weight: f64,
    pub strategy_profile_enabled: bool,
    /// Logit offset for traits in the current strategy's affinity set.
    pub strategy_boost: f64,
}

impl Default for EmissionParams {
    fn default() -> Self {
        Self {
            m: 4.0,
            max_traits_per_turn: 2,
            epsilon: RATE_EPSILON,
            suppression: true,
            affinity_enabled: false,
            affinity_weight: 1.0,
            strategy_profile_enabled: false,
            strategy_boost: 1.5,
        }
    }
}

impl EmissionParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.m.is_nan() || self.m <= 0.0 {
            return Err(format!("emitter.M must be positive, got {}", self.m));
        }
        if self.max_traits_per_turn == 0 {
            return Err("emitter.max_traits must be at least 1".into());
        }
        Ok(())
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn emission_probability(theta: f64, confirmed: bool, params: &EmissionParams) -> f64 {
    emission_probability_with_offset(theta, confirmed, 0.0, params)
}

pub fn emission_probability_with_offset(theta: f64, confirmed: bool, offset: f64, params: &EmissionParams) -> f64 {
    let theta = theta.clamp(params.epsilon, 1.0 - params.epsilon);
    if !confirmed && offset == 0.0 {
        return theta;
    }
    let penalty = if confirmed && params.suppression { params.m } else { 0.0 };
    sigmoid(logit(theta) + offset - penalty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitDecision {
    pub probabilities: BTreeMap<TraitId, f64>,
    pub emitted: TraitSet,
}

/// What the patient side may know about the patient: rates, never labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientView {
    pub patient_id: String,
    pub base_rates: BTreeMap<TraitId, f64>,
}

impl PatientView {
    pub fn of(profile: &PatientProfile) -> Self {
        Self { patient_id: profile.patient_id.clone(), base_rates: profile.base_rates.clone() }
    }

    fn rate(&self, t: TraitId) -> f64 {
        self.base_rates.get(&t).copied().unwrap_or(RATE_EPSILON)
    }
}

pub fn emit_traits<R: Rng + ?Sized>(
    view: &PatientView,
    confirmed: TraitSet,
    params: &EmissionParams,
    rng: &mut R,
) -> EmitDecision {
    emit_traits_with(view, confirmed, params, &[0.0; TRAIT_COUNT], rng)
}

/// Independent Bernoulli draw per trait in index order, then the cap keeps
/// the most probable (ties by index).
pub fn emit_traits_with<R: Rng + ?Sized>(
    view: &PatientView,
    confirmed: TraitSet,
    params: &EmissionParams,
    offsets: &[f64; TRAIT_COUNT],
    rng: &mut R,
) -> EmitDecision {
    let mut probabilities = BTreeMap::new();
    let mut drawn = Vec::new();
    for t in TraitId::all() {
        let p = emission_probability_with_offset(view.rate(t), confirmed.contains(t), offsets[t.slot()], params);
        probabilities.insert(t, p);
        if rng.random::<f64>() < p {
            drawn.push((t, p));
        }
    }
    drawn.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let emitted = drawn.into_iter().take(params.max_traits_per_turn).map(|(t, _)| t).collect();
    EmitDecision { probabilities, emitted }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RealiserKind {
    Template,
    Llm,
}

pub struct RealiseInput<'a> {
    pub question: &'a str,
    pub history: &'a [DialogueTurn],
    pub anchor: &'a Snippet,
    pub emitted: TraitSet,
}

enum Generation {
    Template(RuleDetector),
    Llm { backend: Arc<dyn ChatBackend>, model: String },
}

/// Reply generation. Both kinds build the same request; only the
/// generation step differs.
pub struct Realiser {
    ontology: Arc<Ontology>,
    prompt: PromptTemplate,
    temperature: f64,
    generation: Generation,
}

impl Realiser {
    pub fn template(ontology: Arc<Ontology>, prompt: PromptTemplate) -> Self {
        let det = RuleDetector::new(ontology.clone());
        Self { ontology, prompt, temperature: GENERATION_TEMPERATURE, generation: Generation::Template(det) }
    }

    pub fn llm(ontology: Arc<Ontology>, prompt: PromptTemplate, backend: Arc<dyn ChatBackend>, model: String) -> Self {
        Self { ontology, prompt, temperature: GENERATION_TEMPERATURE, generation: Generation::Llm { backend, model } }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn kind(&self) -> RealiserKind {
        match self.generation {
            Generation::Template(_) => RealiserKind::Template,
            Generation::Llm { .. } => RealiserKind::Llm,
        }
    }

    pub fn build_request(&self, input: &RealiseInput<'_>) -> GenerationRequest {
        let emitted = if input.emitted.is_empty() {
            "none".to_string()
        } else {
            input
                .emitted
                .iter()
                .map(|t| format!("{t} ({})", self.ontology.trait_def(t).name))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut vars = BTreeMap::new();
        vars.insert("trait_definitions", trait_definitions(&self.ontology));
        vars.insert("emitted", emitted);
        vars.insert("history", format_history(input.history));
        vars.insert("anchor", input.anchor.patient_reply.clone());
        vars.insert("question", input.question.to_string());
        let mut req = GenerationRequest::new(self.prompt.render(&vars), self.temperature);
        if let Generation::Llm { model, .. } = &self.generation {
            req.model = model.clone();
        }
        req
    }

    pub fn realise<R: Rng + ?Sized>(&self, input: &RealiseInput<'_>, rng: &mut R) -> Result<String, PatientError> {
        if input.question.trim().is_empty() {
            return Err(PatientError::EmptyQuestion);
        }
        if input.anchor.patient_reply.trim().is_empty() {
            return Err(PatientError::EmptyAnchor);
        }
        let req = self.build_request(input);
        match &self.generation {
            Generation::Template(det) => {
                Ok(weave::weave(&input.anchor.patient_reply, input.emitted, &self.ontology, det, rng)?)
            }
            Generation::Llm { backend, .. } => {
                let out = backend.complete(&req)?;
                let out = out.trim();
                if out.is_empty() {
                    return Err(PatientError::EmptyReply);
                }
                Ok(out.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRef {
    pub position: usize,
    pub patient_id: String,
    pub session_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientReply {
    pub anchor: AnchorRef,
    pub decision: EmitDecision,
    pub response: String,
}

/// Retrieval, emission and realisation for one patient.
pub struct PatientAgent<'a> {
    view: PatientView,
    params: EmissionParams,
    realiser: &'a Realiser,
    index: &'a AnchorIndex,
    ontology: Arc<Ontology>,
    trait_vectors: Option<Vec<Embedding>>,
}

impl<'a> PatientAgent<'a> {
    pub fn new(
        view: PatientView,
        params: EmissionParams,
        realiser: &'a Realiser,
        index: &'a AnchorIndex,
        ontology: Arc<Ontology>,
    ) -> Result<Self, PatientError> {
        let trait_vectors = if params.affinity_enabled {
            let defs: Vec<&str> = ontology.traits().iter().map(|t| t.definition.as_str()).collect();
            Some(index.encoder().encode_batch(&defs)?)
        } else {
            None
        };
        Ok(Self { view, params, realiser, index, ontology, trait_vectors })
    }

    pub fn patient_id(&self) -> &str {
        &self.view.patient_id
    }

    fn offsets(&self, question: &str, strategy: Option<Strategy>) -> Result<[f64; TRAIT_COUNT], PatientError> {
        let mut off = [0.0; TRAIT_COUNT];
        if let (true, Some(s)) = (self.params.strategy_profile_enabled, strategy) {
            for t in self.ontology.strategy_affinity(s).iter() {
                off[t.slot()] += self.params.strategy_boost;
            }
        }
        if let Some(tv) = &self.trait_vectors {
            let q = self.index.encoder().encode(question)?;
            for (i, v) in tv.iter().enumerate() {
                off[i] += self.params.affinity_weight * cosine(&q, v)?;
            }
        }
        Ok(off)
    }

    /// `strategy` is `None` when the question has no known strategy, as in
    /// replayed transcripts.
    pub fn respond<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &self,
        question: &str,
        history: &[DialogueTurn],
        strategy: Option<Strategy>,
        confirmed: TraitSet,
        emit_rng: &mut R1,
        text_rng: &mut R2,
    ) -> Result<PatientReply, PatientError> {
        if question.trim().is_empty() {
            return Err(PatientError::EmptyQuestion);
        }
        let anchor = self.index.retrieve(question, &self.view.patient_id)?;
        let offsets = self.offsets(question, strategy)?;
        let decision = emit_traits_with(&self.view, confirmed, &self.params, &offsets, emit_rng);
        let input = RealiseInput { question, history, anchor: anchor.snippet, emitted: decision.emitted };
        let response = self.realiser.realise(&input, text_rng)?;
        Ok(PatientReply {
            anchor: AnchorRef {
                position: anchor.position,
                patient_id: anchor.snippet.patient_id.clone(),
                session_id: anchor.snippet.session_id.clone(),
                score: anchor.score,
            },
            decision,
            response,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;
    use crate::prompts::PromptSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn view(rates: &[(u8, f64)]) -> PatientView {
        let mut base_rates: BTreeMap<TraitId, f64> = TraitId::all().map(|t| (t, RATE_EPSILON)).collect();
        for &(i, r) in rates {
            base_rates.insert(TraitId::new(i).unwrap(), r);
        }
        PatientView { patient_id: "X".into(), base_rates }
    }

    #[test]
    fn probability_values() {
        let p = EmissionParams::default();
        assert_eq!(emission_probability(0.5, false, &p), 0.5);
        assert!((emission_probability(0.5, true, &p) - 1.0 / (1.0 + 4f64.exp())).abs() < 1e-12);
        assert!((emission_probability(0.5, true, &p) - 0.0180).abs() < 1e-4);
        let oracle = 1.0 / (1.0 + 4f64.exp() / 4.0);
        assert!((emission_probability(0.8, true, &p) - oracle).abs() < 1e-12);
        assert!((emission_probability(0.8, true, &p) - 0.0683).abs() < 1e-4);
    }

    #[test]
    fn floor_rates_rarely_emit() {
        let v = view(&[]);
        let p = EmissionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let total: usize = (0..n).map(|_| emit_traits(&v, TraitSet::empty(), &p, &mut rng).emitted.len()).sum();
        assert!((total as f64 / n as f64) < 0.02);
    }

    #[test]
    fn near_certain_trait() {
        let v = view(&[(2, 0.999)]);
        let p = EmissionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f2 = TraitId::new(2).unwrap();
        let hits =
            (0..10_000).filter(|_| emit_traits(&v, TraitSet::empty(), &p, &mut rng).emitted.contains(f2)).count();
        assert!(hits >= 9_900);
    }

    /// Every uniform draw is 0.0, so every trait is sampled.
    struct ZeroRng;

    impl rand::RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0);
        }
    }

    #[test]
    fn cap_keeps_two() {
        let v = view(&[(3, 0.999), (5, 0.999), (7, 0.999)]);
        let p = EmissionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = emit_traits(&v, TraitSet::empty(), &p, &mut rng);
            assert_eq!(d.probabilities.len(), 10);
            assert!(d.emitted.len() <= 2);
        }
        let d = emit_traits(&v, TraitSet::empty(), &p, &mut ZeroRng);
        assert_eq!(d.emitted.to_string(), "{F3, F5}");
    }

    #[test]
    fn overflow_prefers_high_probability_then_index() {
        let v = view(&[(1, 0.999), (4, 0.999), (9, 0.999), (2, 0.96)]);
        let c: TraitSet = ["F1".parse().unwrap()].into_iter().collect();
        let p = EmissionParams { max_traits_per_turn: 1, ..Default::default() };
        assert_eq!(emit_traits(&v, c, &p, &mut ZeroRng).emitted.to_string(), "{F4}");
        let p = EmissionParams { max_traits_per_turn: 3, ..Default::default() };
        assert_eq!(emit_traits(&v, c, &p, &mut ZeroRng).emitted.to_string(), "{F2, F4, F9}");
    }

    #[test]
    fn strategy_offset_raises_probability() {
        let p = EmissionParams::default();
        assert!(emission_probability_with_offset(0.3, false, 1.5, &p) > 0.3);
        let no_supp = EmissionParams { suppression: false, ..Default::default() };
        assert_eq!(emission_probability(0.3, true, &no_supp), sigmoid(logit(0.3)));
    }

    fn anchor(reply: &str) -> Snippet {
        Snippet {
            patient_id: "Y".into(),
            session_id: "s".into(),
            scenario_id: 7,
            doctor_curr: "How do you feel?".into(),
            patient_reply: reply.into(),
            traits: TraitSet::empty(),
            excluded_from_eval: None,
        }
    }

    fn template() -> Realiser {
        Realiser::template(Arc::new(Ontology::builtin().clone()), PromptSet::builtin().realise)
    }

    #[test]
    fn template_round_trip() {
        let r = template();
        let det = RuleDetector::new(Arc::new(Ontology::builtin().clone()));
        let a = anchor("I was happy, you know what I mean, it was a good day.");
        for bits in [0u16, 1 << 5, (1 << 1) | (1 << 9)] {
            let e = TraitSet::from_bits(bits);
            let input = RealiseInput { question: "q?", history: &[], anchor: &a, emitted: e };
            let out = r.realise(&input, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(det.detect_set(&out), e, "{out}");
            assert_eq!(out, r.realise(&input, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
        }
    }

    #[test]
    fn empty_anchor_rejected() {
        let a = anchor("  ");
        let input = RealiseInput { question: "q", history: &[], anchor: &a, emitted: TraitSet::empty() };
        assert!(matches!(
            template().realise(&input, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(PatientError::EmptyAnchor)
        ));
    }

    #[test]
    fn llm_realiser_prompt_and_temperature() {
        let b = Arc::new(ScriptedBackend::queue(["  I like trains.  "]));
        let r =
            Realiser::llm(Arc::new(Ontology::builtin().clone()), PromptSet::builtin().realise, b.clone(), "m".into());
        let a = anchor("Trains are good.");
        let e: TraitSet = ["F6".parse().unwrap()].into_iter().collect();
        let hist =
            vec![DialogueTurn { question: "Hi?".into(), response: "Hello.".into(), detected: TraitSet::empty() }];
        let input = RealiseInput { question: "What do you like?", history: &hist, anchor: &a, emitted: e };
        assert_eq!(r.realise(&input, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(), "I like trains.");
        let req = &b.requests()[0];
        assert_eq!(req.temperature, 0.7);
        assert!(req.messages[0].content.contains("F6 (Superfluous Phrase Attachment)"));
        assert!(req.messages[1].content.contains("Trains are good."));
        assert!(req.messages[1].content.contains("What do you like?"));
        assert!(req.messages[1].content.contains("Hello."));
        // Template and live kinds build the same request.
        assert_eq!(template().build_request(&input).messages, r.build_request(&input).messages);
    }
}
