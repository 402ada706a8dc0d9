//! Doctor-side turn policy: analyse gaps, choose a strategy, phrase the
//! question.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, GenerationRequest, GENERATION_TEMPERATURE, STRUCTURED_TEMPERATURE};
use crate::belief::{BeliefState, PRIORITY_K};
use crate::detector::trait_definitions;
use crate::ontology::{Ontology, Scenario, Strategy, TraitId, TraitSet};
use crate::prompts::{extract_json_object, PromptSet};

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("selector backend: {0}")]
    Backend(#[from] BackendError),
    #[error("{step} output unparseable after retry: {message}")]
    Parse { step: &'static str, message: String },
    #[error("strategy `{0}` is not one of the six strategies")]
    InvalidStrategy(String),
    #[error("question violates the wording constraints after retry: {0}")]
    AskConstraint(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub question: String,
    pub response: String,
    pub detected: TraitSet,
}

pub fn format_history(history: &[DialogueTurn]) -> String {
    if history.is_empty() {
        return "(no previous turns)".to_string();
    }
    history.iter().map(|t| format!("Examiner: {}\nPatient: {}", t.question, t.response)).collect::<Vec<_>>().join("\n")
}

/// Everything the doctor side sees on a turn.
#[derive(Debug, Clone, Copy)]
pub struct SessionContext<'a> {
    pub clinical_background: &'a str,
    pub history: &'a [DialogueTurn],
    pub belief: &'a BeliefState,
    pub topic: &'a Scenario,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    pub confirmed_analysis: String,
    pub priority_traits: Vec<TraitId>,
    pub elicitation_conditions: String,
    pub strategy_rationale: String,
}

pub trait Selector: Send + Sync {
    fn think(&self, ctx: &SessionContext<'_>) -> Result<Thought, SelectorError>;
    fn plan(&self, ctx: &SessionContext<'_>, thought: &Thought) -> Result<Strategy, SelectorError>;
    fn ask(&self, ctx: &SessionContext<'_>, thought: &Thought, strategy: Strategy) -> Result<String, SelectorError>;
}

/// Terms a question must never contain: trait ids and strategy names.
pub fn leaks_vocabulary(question: &str) -> Option<String> {
    let lower = question.to_lowercase();
    for s in Strategy::ALL {
        let label = s.label().to_lowercase();
        for term in [label.clone(), label.replace('-', " "), s.as_str().to_lowercase()] {
            if lower.contains(&term) {
                return Some(term);
            }
        }
    }
    let bytes = lower.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'f' || (i > 0 && bytes[i - 1].is_ascii_alphanumeric()) {
            continue;
        }
        let digits: String = lower[i + 1..].chars().take_while(|c| c.is_ascii_digit()).collect();
        let after = lower[i + 1 + digits.len()..].chars().next();
        if !digits.is_empty() && !after.is_some_and(|c| c.is_alphanumeric()) {
            if let Ok(n) = digits.parse::<u32>() {
                if (1..=10).contains(&n) {
                    return Some(format!("f{n}"));
                }
            }
        }
    }
    None
}

fn topic_phrase(topic: &Scenario) -> String {
    match topic.id {
        3 => "this picture".into(),
        4 => "something that happened to you recently".into(),
        5 => "your work or school".into(),
        6 => "getting along with other people".into(),
        7 => "your emotions".into(),
        9 => "this cartoon".into(),
        11 => "your daily routine".into(),
        12 => "your friends".into(),
        13 => "being on your own".into(),
        14 => "your plans for the future".into(),
        15 => "the story we are making up".into(),
        _ => topic.name.to_lowercase(),
    }
}

fn question_templates(s: Strategy) -> &'static [&'static str] {
    match s {
        Strategy::OpenEnded => &[
            "Tell me about {topic}. What comes to mind first?",
            "What can you tell me about {topic}, in your own words?",
            "I would love to hear anything at all about {topic}.",
        ],
        Strategy::EmotionOriented => &[
            "How do you feel when you think about {topic}?",
            "What feelings come up for you around {topic}?",
            "Can you tell me about a time when {topic} made you feel really strongly?",
        ],
        Strategy::Hypothetical => &[
            "Imagine you woke up tomorrow and {topic} was completely different. What would you do?",
            "Suppose you had to explain {topic} to someone from another planet. What would you tell them about yourself?",
            "What if you were in charge of {topic} for a whole day?",
        ],
        Strategy::MultiStep => &[
            "First, tell me what {topic} means to you, then what happened the last time it came up, and finally what you would change.",
            "Could you walk me through {topic} step by step, starting from the beginning and ending with how it turned out?",
            "Tell me three things about {topic}: what it is like, who is involved, and what you would like to happen next.",
        ],
        Strategy::PerspectiveTaking => &[
            "What do you think other people think about {topic}?",
            "How would your best friend describe you when it comes to {topic}?",
            "If someone in your family were talking about {topic}, what would they say about you?",
        ],
        Strategy::CorrectionInducing => &[
            "So you said {topic} is something you never think about at all, is that right?",
            "I think I heard that {topic} is your least favourite thing, did I get that right?",
            "Earlier you told me {topic} was boring for you, was that it?",
        ],
    }
}

/// Deterministic twin of the model-backed selector.
#[derive(Debug, Clone)]
pub struct HeuristicSelector {
    ontology: Arc<Ontology>,
}

impl HeuristicSelector {
    pub fn new(ontology: Arc<Ontology>) -> Self {
        Self { ontology }
    }

    fn strategy_for(&self, t: TraitId) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|s| self.ontology.strategy_affinity(*s).contains(t))
    }
}

impl Selector for HeuristicSelector {
    fn think(&self, ctx: &SessionContext<'_>) -> Result<Thought, SelectorError> {
        let priority = ctx.belief.priority_traits(PRIORITY_K);
        let confirmed = ctx.belief.confirmed();
        let confirmed_analysis = if confirmed.is_empty() {
            "No traits confirmed yet.".to_string()
        } else {
            format!("Confirmed so far: {confirmed}.")
        };
        let (elicitation_conditions, strategy_rationale) = match priority.first() {
            Some(&head) => {
                let def = self.ontology.trait_def(head);
                let s = self.strategy_for(head).unwrap_or(Strategy::OpenEnded);
                (
                    format!("Create room for {} ({}): {}", head, def.name, def.definition),
                    format!("Target {head} with a {} question.", s.label()),
                )
            }
            None => ("All traits confirmed.".to_string(), "Keep the conversation open.".to_string()),
        };
        Ok(Thought { confirmed_analysis, priority_traits: priority, elicitation_conditions, strategy_rationale })
    }

    fn plan(&self, _ctx: &SessionContext<'_>, thought: &Thought) -> Result<Strategy, SelectorError> {
        Ok(thought.priority_traits.iter().find_map(|t| self.strategy_for(*t)).unwrap_or(Strategy::OpenEnded))
    }

    fn ask(&self, ctx: &SessionContext<'_>, thought: &Thought, strategy: Strategy) -> Result<String, SelectorError> {
        let templates = question_templates(strategy);
        let variant = thought.priority_traits.first().map(|t| t.slot()).unwrap_or(0) % templates.len();
        let q = templates[variant].replace("{topic}", &topic_phrase(ctx.topic));
        match leaks_vocabulary(&q) {
            Some(term) => Err(SelectorError::AskConstraint(term)),
            None => Ok(q),
        }
    }
}

#[derive(Deserialize)]
struct ThinkPayload {
    confirmed_analysis: String,
    elicitation_conditions: String,
    strategy_rationale: String,
}

/// Selector backed by a chat model. Priority traits always come from the
/// belief state, whatever the model writes.
pub struct LlmSelector {
    backend: Arc<dyn ChatBackend>,
    ontology: Arc<Ontology>,
    prompts: PromptSet,
    model: String,
    temperature: f64,
}

impl LlmSelector {
    pub fn new(backend: Arc<dyn ChatBackend>, ontology: Arc<Ontology>, prompts: PromptSet, model: String) -> Self {
        Self { backend, ontology, prompts, model, temperature: GENERATION_TEMPERATURE }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    fn strategies_block(&self) -> String {
        self.ontology
            .strategies()
            .iter()
            .map(|s| format!("- {}: {}", s.label, s.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn base_vars(&self, ctx: &SessionContext<'_>) -> BTreeMap<&'static str, String> {
        let mut v = BTreeMap::new();
        v.insert("trait_definitions", trait_definitions(&self.ontology));
        v.insert("strategies", self.strategies_block());
        v.insert("strategy_names", Strategy::ALL.iter().map(|s| s.label()).collect::<Vec<_>>().join(", "));
        v.insert("background", ctx.clinical_background.to_string());
        v.insert("topic", format!("{} ({})", ctx.topic.name, ctx.topic.description));
        v.insert("history", format_history(ctx.history));
        v.insert("confirmed", ctx.belief.confirmed().to_string());
        let priority: Vec<String> = ctx.belief.priority_traits(PRIORITY_K).iter().map(|t| t.to_string()).collect();
        v.insert("priority", priority.join(", "));
        v
    }

    fn request(
        &self,
        template: &crate::prompts::PromptTemplate,
        vars: &BTreeMap<&str, String>,
        temp: f64,
    ) -> GenerationRequest {
        let mut r = GenerationRequest::new(template.render(vars), temp);
        r.model = self.model.clone();
        r
    }
}

impl Selector for LlmSelector {
    fn think(&self, ctx: &SessionContext<'_>) -> Result<Thought, SelectorError> {
        let vars = self.base_vars(ctx);
        let req = self.request(&self.prompts.think, &vars, STRUCTURED_TEMPERATURE);
        let mut message = String::new();
        for _ in 0..2 {
            let raw = self.backend.complete(&req)?;
            let parsed = extract_json_object(&raw)
                .ok_or_else(|| "no JSON object".to_string())
                .and_then(|v| serde_json::from_value::<ThinkPayload>(v).map_err(|e| e.to_string()));
            match parsed {
                Ok(p) => {
                    return Ok(Thought {
                        confirmed_analysis: p.confirmed_analysis,
                        priority_traits: ctx.belief.priority_traits(PRIORITY_K),
                        elicitation_conditions: p.elicitation_conditions,
                        strategy_rationale: p.strategy_rationale,
                    })
                }
                Err(e) => message = e,
            }
        }
        Err(SelectorError::Parse { step: "think", message })
    }

    fn plan(&self, ctx: &SessionContext<'_>, thought: &Thought) -> Result<Strategy, SelectorError> {
        let mut vars = self.base_vars(ctx);
        vars.insert("confirmed_analysis", thought.confirmed_analysis.clone());
        vars.insert("elicitation_conditions", thought.elicitation_conditions.clone());
        vars.insert("strategy_rationale", thought.strategy_rationale.clone());
        let req = self.request(&self.prompts.plan, &vars, STRUCTURED_TEMPERATURE);
        let mut last = String::new();
        for _ in 0..2 {
            let raw = self.backend.complete(&req)?;
            let Some(name) =
                extract_json_object(&raw).and_then(|v| v.get("strategy").and_then(|s| s.as_str()).map(str::to_string))
            else {
                last = raw;
                continue;
            };
            match name.parse::<Strategy>() {
                Ok(s) => return Ok(s),
                Err(_) => last = name,
            }
        }
        Err(SelectorError::InvalidStrategy(last))
    }

    fn ask(&self, ctx: &SessionContext<'_>, thought: &Thought, strategy: Strategy) -> Result<String, SelectorError> {
        let mut vars = self.base_vars(ctx);
        vars.insert("topic", ctx.topic.name.clone());
        vars.insert("elicitation_conditions", thought.elicitation_conditions.clone());
        vars.insert("strategy_rationale", thought.strategy_rationale.clone());
        vars.insert("strategy_description", self.ontology.strategy_info(strategy).description.clone());
        let req = self.request(&self.prompts.ask, &vars, self.temperature);
        let mut problem = String::new();
        for _ in 0..2 {
            let raw = self.backend.complete(&req)?;
            let q = raw.trim().trim_matches('"').trim().to_string();
            if q.is_empty() {
                problem = "empty question".into();
                continue;
            }
            match leaks_vocabulary(&q) {
                Some(term) => problem = format!("contains `{term}`"),
                None => return Ok(q),
            }
        }
        Err(SelectorError::AskConstraint(problem))
    }
}
