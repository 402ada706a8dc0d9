//! Trait detection on patient responses: a lexical detector and a zero-shot
//! model detector behind one trait.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, GenerationRequest, STRUCTURED_TEMPERATURE};
use crate::ontology::{Ontology, TraitId, TraitSet};
use crate::prompts::{extract_json_object, PromptTemplate};
use crate::text;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("cannot detect traits in an empty response")]
    EmptyResponse,
    #[error("detector backend: {0}")]
    Backend(#[from] BackendError),
    #[error("detector output unparseable after retry: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub labels: BTreeMap<TraitId, bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub evidence: BTreeMap<TraitId, String>,
}

impl DetectionResult {
    pub fn none() -> Self {
        Self { labels: TraitId::all().map(|t| (t, false)).collect(), evidence: BTreeMap::new() }
    }

    pub fn detected(&self) -> TraitSet {
        self.labels.iter().filter(|(_, v)| **v).map(|(k, _)| *k).collect()
    }

    pub fn is_detected(&self, t: TraitId) -> bool {
        self.labels.get(&t).copied().unwrap_or(false)
    }
}

pub trait Detector: Send + Sync {
    fn detect(&self, question: &str, response: &str) -> Result<DetectionResult, DetectError>;
}

/// Marks a trait present iff the response contains one of its marker
/// phrases as a whole-word, case-insensitive run.
#[derive(Debug, Clone)]
pub struct RuleDetector {
    ontology: Arc<Ontology>,
}

impl RuleDetector {
    pub fn new(ontology: Arc<Ontology>) -> Self {
        Self { ontology }
    }

    pub fn detect_text(&self, response: &str) -> DetectionResult {
        let tokens = text::tokenize(response);
        let mut out = DetectionResult::none();
        for m in self.ontology.markers() {
            if out.evidence.contains_key(&m.trait_id) {
                continue;
            }
            if let Some(i) = text::find_phrase(&tokens, &m.words) {
                let span = &response[tokens[i].start..tokens[i + m.words.len() - 1].end];
                out.labels.insert(m.trait_id, true);
                out.evidence.insert(m.trait_id, span.to_string());
            }
        }
        out
    }

    pub fn detect_set(&self, response: &str) -> TraitSet {
        self.detect_text(response).detected()
    }
}

impl Detector for RuleDetector {
    fn detect(&self, _question: &str, response: &str) -> Result<DetectionResult, DetectError> {
        if response.trim().is_empty() {
            return Err(DetectError::EmptyResponse);
        }
        Ok(self.detect_text(response))
    }
}

/// Structured zero-shot detection: dialogue context plus the full trait
/// definitions, JSON labels out.
pub struct LlmDetector {
    backend: Arc<dyn ChatBackend>,
    ontology: Arc<Ontology>,
    prompt: PromptTemplate,
    model: String,
}

impl LlmDetector {
    pub fn new(backend: Arc<dyn ChatBackend>, ontology: Arc<Ontology>, prompt: PromptTemplate, model: String) -> Self {
        Self { backend, ontology, prompt, model }
    }

    fn request(&self, question: &str, response: &str) -> GenerationRequest {
        let mut vars = BTreeMap::new();
        vars.insert("trait_definitions", trait_definitions(&self.ontology));
        vars.insert("question", question.to_string());
        vars.insert("response", response.to_string());
        let mut req = GenerationRequest::new(self.prompt.render(&vars), STRUCTURED_TEMPERATURE);
        req.model = self.model.clone();
        req
    }
}

pub fn trait_definitions(ontology: &Ontology) -> String {
    ontology.traits().iter().map(|t| format!("{} ({}): {}", t.id, t.name, t.definition)).collect::<Vec<_>>().join("\n")
}

/// Parses `{"labels": {...}, "evidence": {...}}`; every trait must be labelled.
pub fn parse_detection(raw: &str) -> Result<DetectionResult, String> {
    let v = extract_json_object(raw).ok_or("no JSON object in output")?;
    let labels = v.get("labels").and_then(|l| l.as_object()).ok_or("missing `labels` object")?;
    let mut out = DetectionResult::none();
    for t in TraitId::all() {
        let key = t.to_string();
        let b = labels
            .get(&key)
            .and_then(|x| x.as_bool())
            .ok_or_else(|| format!("label for {key} missing or not a boolean"))?;
        out.labels.insert(t, b);
    }
    if let Some(ev) = v.get("evidence").and_then(|e| e.as_object()) {
        for (k, span) in ev {
            let Ok(t) = k.parse::<TraitId>() else { continue };
            if out.is_detected(t) {
                if let Some(s) = span.as_str().filter(|s| !s.is_empty()) {
                    out.evidence.insert(t, s.to_string());
                }
            }
        }
    }
    Ok(out)
}

impl Detector for LlmDetector {
    fn detect(&self, question: &str, response: &str) -> Result<DetectionResult, DetectError> {
        if response.trim().is_empty() {
            return Err(DetectError::EmptyResponse);
        }
        let req = self.request(question, response);
        let mut last = String::new();
        for _ in 0..2 {
            let raw = self.backend.complete(&req)?;
            match parse_detection(&raw) {
                Ok(r) => return Ok(r),
                Err(e) => last = e,
            }
        }
        Err(DetectError::Parse(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;

    fn rule() -> RuleDetector {
        RuleDetector::new(Arc::new(Ontology::builtin().clone()))
    }

    fn ids(xs: &[&str]) -> TraitSet {
        xs.iter().map(|s| s.parse().unwrap()).collect()
    }

    #[test]
    fn filler_phrase_is_f6() {
        let r = rule().detect("q", "It was a long day, you know what I mean?").unwrap();
        assert_eq!(r.detected(), ids(&["F6"]));
        assert_eq!(r.evidence[&"F6".parse().unwrap()], "you know what I mean");
    }

    #[test]
    fn plain_sentence_has_no_traits() {
        let r = rule().detect("q", "The weather is fine.").unwrap();
        assert!(r.detected().is_empty());
        assert_eq!(r.labels.len(), 10);
        assert!(r.evidence.is_empty());
    }

    #[test]
    fn two_markers_two_traits() {
        let r = rule().detect("q", "It's the circle of life, as they say.").unwrap();
        assert_eq!(r.detected(), ids(&["F6", "F10"]));
    }

    #[test]
    fn case_insensitive() {
        let text = "Oh, Thank You. That is the Circle Of Life.";
        assert_eq!(rule().detect_set(text), rule().detect_set(&text.to_uppercase()));
        assert_eq!(rule().detect_set(text), ids(&["F7", "F10"]));
    }

    #[test]
    fn empty_response_rejected() {
        assert!(matches!(rule().detect("q", "  "), Err(DetectError::EmptyResponse)));
    }

    fn llm(script: Vec<&str>) -> (Arc<ScriptedBackend>, LlmDetector) {
        let b = Arc::new(ScriptedBackend::queue(script));
        let det = LlmDetector::new(
            b.clone(),
            Arc::new(Ontology::builtin().clone()),
            crate::prompts::PromptSet::builtin().detect,
            "m".into(),
        );
        (b, det)
    }

    const GOOD: &str = r#"{"labels": {"F1": false, "F2": true, "F3": false, "F4": false, "F5": false,
        "F6": true, "F7": false, "F8": false, "F9": false, "F10": false},
        "evidence": {"F2": "mideast", "F3": "ignored"}}"#;

    #[test]
    fn llm_detector_parses_structured_output() {
        let (b, det) = llm(vec![GOOD]);
        let r = det.detect("Where do you live?", "In the mideast, you know").unwrap();
        assert_eq!(r.detected(), ids(&["F2", "F6"]));
        assert_eq!(r.evidence.len(), 1);
        let req = &b.requests()[0];
        assert_eq!(req.temperature, 0.0);
        assert!(req.messages[0].content.contains("mimics verbatim"));
        assert!(req.messages[1].content.contains("Where do you live?"));
    }

    #[test]
    fn llm_detector_retries_once_then_fails() {
        let (_, det) = llm(vec!["garbage", GOOD]);
        assert!(det.detect("q", "r").is_ok());
        let (_, det) = llm(vec!["garbage", r#"{"labels": {"F1": true}}"#]);
        assert!(matches!(det.detect("q", "r"), Err(DetectError::Parse(_))));
    }
}
