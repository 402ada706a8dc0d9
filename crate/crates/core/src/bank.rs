//! The clinical snippet bank: JSON-lines ingestion, per-patient base
//! rates and a seeded synthetic generator.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::RuleDetector;
use crate::ontology::{Ontology, TraitId, TraitSet, TRAIT_COUNT};
use crate::weave;

/// Clamp applied to base rates so their logit stays finite.
pub const RATE_EPSILON: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("synthesis failed: {0}")]
    Synthesis(#[from] weave::WeaveError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snippet {
    pub patient_id: String,
    pub session_id: String,
    pub scenario_id: u8,
    pub doctor_curr: String,
    pub patient_reply: String,
    pub traits: TraitSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded_from_eval: Option<bool>,
}

impl Snippet {
    fn validate(&self) -> Result<(), String> {
        if self.patient_id.trim().is_empty() {
            return Err("patient_id is empty".into());
        }
        if !(1..=15).contains(&self.scenario_id) {
            return Err(format!("scenario_id {} outside 1..15", self.scenario_id));
        }
        if self.doctor_curr.trim().is_empty() {
            return Err("doctor_curr is empty".into());
        }
        if self.patient_reply.trim().is_empty() {
            return Err("patient_reply is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnippetBank {
    snippets: Vec<Snippet>,
    by_patient: BTreeMap<String, Vec<usize>>,
}

impl SnippetBank {
    pub fn new(snippets: Vec<Snippet>) -> Self {
        let mut by_patient: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in snippets.iter().enumerate() {
            by_patient.entry(s.patient_id.clone()).or_default().push(i);
        }
        Self { snippets, by_patient }
    }

    pub fn snippets(&self) -> &[Snippet] {
        &self.snippets
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = &str> {
        self.by_patient.keys().map(String::as_str)
    }

    pub fn patient_count(&self) -> usize {
        self.by_patient.len()
    }

    pub fn positions_for(&self, patient_id: &str) -> &[usize] {
        self.by_patient.get(patient_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn patient_snippets<'a>(&'a self, patient_id: &str) -> impl Iterator<Item = &'a Snippet> + 'a {
        self.positions_for(patient_id).iter().map(move |&i| &self.snippets[i])
    }

    /// Parses JSON lines; blank lines are skipped.
    pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Ingest, BankError> {
        let mut snippets = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| BankError::Schema { line: line_no, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Snippet =
                serde_json::from_str(&line).map_err(|e| BankError::Schema { line: line_no, message: e.to_string() })?;
            s.validate().map_err(|message| BankError::Schema { line: line_no, message })?;
            snippets.push(s);
        }
        let mut warnings = Vec::new();
        if snippets.is_empty() {
            warnings.push("bank is empty".to_string());
        }
        Ok(Ingest { bank: Self::new(snippets), warnings })
    }

    pub fn ingest(path: &Path) -> Result<Ingest, BankError> {
        let f = std::fs::File::open(path).map_err(|source| BankError::Io { path: path.to_path_buf(), source })?;
        Self::parse_jsonl(BufReader::new(f))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.snippets {
            out.push_str(&serde_json::to_string(s).expect("snippet serialises"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), BankError> {
        let io = |source| BankError::Io { path: path.to_path_buf(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    pub fn base_rates(&self, patient_id: &str) -> Result<PatientProfile, BankError> {
        let rows: Vec<&Snippet> = self.patient_snippets(patient_id).collect();
        if rows.is_empty() {
            return Err(BankError::UnknownPatient(patient_id.to_string()));
        }
        let mut counts = [0usize; TRAIT_COUNT];
        for s in &rows {
            for t in s.traits.iter() {
                counts[t.slot()] += 1;
            }
        }
        let total = rows.len();
        let mut base_rates = BTreeMap::new();
        let mut ground_truth = TraitSet::empty();
        for t in TraitId::all() {
            let raw = counts[t.slot()] as f64 / total as f64;
            if raw > 0.0 {
                ground_truth.insert(t);
            }
            base_rates.insert(t, raw.clamp(RATE_EPSILON, 1.0 - RATE_EPSILON));
        }
        Ok(PatientProfile { patient_id: patient_id.to_string(), base_rates, total_turns: total, ground_truth })
    }

    pub fn profiles(&self) -> Vec<PatientProfile> {
        self.patient_ids().map(|p| self.base_rates(p).expect("indexed patient")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Ingest {
    pub bank: SnippetBank,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: String,
    pub base_rates: BTreeMap<TraitId, f64>,
    pub total_turns: usize,
    pub ground_truth: TraitSet,
}

impl PatientProfile {
    pub fn rate(&self, t: TraitId) -> f64 {
        self.base_rates.get(&t).copied().unwrap_or(RATE_EPSILON)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub snippets_per_patient: usize,
    /// Seeds trait profiles separately from text; defaults to the bank seed.
    pub trait_profile_seed: Option<u64>,
}

/// Share of patients showing each trait in a typical clinical cohort,
/// used to draw synthetic profiles.
pub const TRAIT_PREVALENCE: [f64; TRAIT_COUNT] = [
    8.0 / 35.0,
    29.0 / 35.0,
    25.0 / 35.0,
    2.0 / 35.0,
    2.0 / 35.0,
    31.0 / 35.0,
    2.0 / 35.0,
    2.0 / 35.0,
    2.0 / 35.0,
    5.0 / 35.0,
];

const SESSION_LEN: usize = 11;

fn scenario_questions(id: u8) -> &'static [&'static str] {
    match id {
        1 => &["Can you build something with these pieces and tell me what you are doing?"],
        2 => &["Could you tell me the story in this book as you go through the pages?"],
        3 => &[
            "What can you see happening in this picture?",
            "Tell me about the people in this picture.",
            "What do you think is going on in this scene here?",
        ],
        4 => &[
            "Can you tell me about something that happened to you recently?",
            "What did you do over the weekend?",
            "Tell me about a trip you went on.",
        ],
        5 => &[
            "What are you doing at school or work these days?",
            "What do you like about your job or classes?",
            "Tell me about a typical day at work or school.",
        ],
        6 => &[
            "Do you ever have trouble getting along with people?",
            "Has anyone ever teased or bothered you?",
            "What is hard for you when you are around other people?",
        ],
        7 => &[
            "What kinds of things make you feel happy?",
            "Can you tell me about a time you felt angry?",
            "What do you do when you feel worried?",
        ],
        8 => &["Could you show me how you brush your teeth, step by step?"],
        9 => &[
            "What happened in this cartoon strip?",
            "Why do you think the character did that in the cartoon?",
            "Can you tell me the cartoon story from the start?",
        ],
        10 => &["Shall we take a short break here?"],
        11 => &[
            "Who does the cooking and cleaning where you live?",
            "How do you manage your money from day to day?",
            "What do you do when you get home in the evening?",
        ],
        12 => &[
            "Do you have any good friends?",
            "What does being a friend mean to you?",
            "What do you and your friends like to do together?",
        ],
        13 => &[
            "Do you ever feel lonely?",
            "What is it like for you when you are on your own?",
            "What do you do when you want some company?",
        ],
        14 => &[
            "What would you like to be doing in five years?",
            "What are your plans for after you finish school?",
            "Is there anything you hope will change in your life?",
        ],
        _ => &[
            "Could we make up a story together using these objects?",
            "What could happen next in our story?",
            "Who is the hero of the story you are making?",
        ],
    }
}

const REPLY_SKELETONS: &[&str] = &[
    "I usually take the bus there in the morning",
    "My brother helps me with that sometimes",
    "I think it was on a Tuesday but I am not sure",
    "We went to the park and looked at the ducks",
    "I like trains because they run on a timetable",
    "It is okay I guess, some days are better than others",
    "I do not really talk to many people there",
    "My mum says I should try harder with that",
    "There was a man with a dog and he was running",
    "I play computer games most evenings after dinner",
    "I would like to work with animals one day",
    "Sometimes it gets too loud and I have to leave",
    "I have one friend from school called Sam",
    "I went to the museum and saw the old maps",
    "I cook pasta on Fridays because that is the plan",
    "The teacher gave us a project about the weather",
    "I do not know, it just happened like that",
    "I was worried about the exam last week",
    "We watched a film about space at the weekend",
    "He was sad because his balloon flew away",
];

fn draw_profile<R: Rng + ?Sized>(rng: &mut R) -> BTreeMap<TraitId, f64> {
    let mut active: Vec<TraitId> =
        TraitId::all().filter(|t| rng.random::<f64>() < TRAIT_PREVALENCE[t.slot()]).collect();
    if active.is_empty() {
        let weighted: Vec<(TraitId, f64)> = TraitId::all().map(|t| (t, TRAIT_PREVALENCE[t.slot()])).collect();
        let pick = weighted.choose_weighted(rng, |w| w.1).expect("positive weights").0;
        active.push(pick);
    }
    active.into_iter().map(|t| (t, rng.random_range(0.15..0.6))).collect()
}

/// Deterministic synthetic bank. Replies carry markers for exactly their
/// annotated traits.
pub fn synthesize_bank(spec: SynthSpec, seed: u64) -> Result<SnippetBank, BankError> {
    if spec.n_patients == 0 || spec.snippets_per_patient == 0 {
        return Err(BankError::InvalidSpec("patients and snippets per patient must be at least 1".into()));
    }
    let ontology = Ontology::builtin();
    let detector = RuleDetector::new(Arc::new(ontology.clone()));
    let mut profile_rng = ChaCha8Rng::seed_from_u64(spec.trait_profile_seed.unwrap_or(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let dialogic: Vec<u8> = ontology.dialogic_scenarios().iter().map(|s| s.id).collect();

    let mut snippets = Vec::with_capacity(spec.n_patients * spec.snippets_per_patient);
    for p in 0..spec.n_patients {
        let pid = format!("P{:03}", p + 1);
        let rates = draw_profile(&mut profile_rng);
        let n = spec.snippets_per_patient;
        let mut labels: Vec<TraitSet> = (0..n)
            .map(|_| rates.iter().filter(|(_, r)| profile_rng.random::<f64>() < **r).map(|(t, _)| *t).collect())
            .collect();
        for t in rates.keys() {
            if !labels.iter().any(|l| l.contains(*t)) {
                let i = profile_rng.random_range(0..n);
                labels[i].insert(*t);
            }
        }
        let mut order = dialogic.clone();
        for (i, traits) in labels.into_iter().enumerate() {
            if i % order.len() == 0 {
                order.shuffle(&mut rng);
            }
            let scenario_id = order[i % order.len()];
            let doctor_curr = scenario_questions(scenario_id).choose(&mut rng).expect("questions").to_string();
            let skeleton = format!("{}.", REPLY_SKELETONS.choose(&mut rng).expect("skeletons"));
            let patient_reply = weave::weave(&skeleton, traits, ontology, &detector, &mut rng)?;
            snippets.push(Snippet {
                patient_id: pid.clone(),
                session_id: format!("{pid}-s{}", i / SESSION_LEN + 1),
                scenario_id,
                doctor_curr,
                patient_reply,
                traits,
                excluded_from_eval: None,
            });
        }
    }
    Ok(SnippetBank::new(snippets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snip(pid: &str, traits: &[&str]) -> Snippet {
        Snippet {
            patient_id: pid.into(),
            session_id: "s".into(),
            scenario_id: 4,
            doctor_curr: "How was your day?".into(),
            patient_reply: "Fine.".into(),
            traits: traits.iter().map(|s| s.parse().unwrap()).collect(),
            excluded_from_eval: None,
        }
    }

    #[test]
    fn ingest_counts_lines() {
        let bank = SnippetBank::new(vec![snip("A", &[]), snip("A", &["F2"]), snip("B", &[])]);
        let ing = SnippetBank::parse_jsonl(bank.to_jsonl().as_bytes()).unwrap();
        assert_eq!(ing.bank.len(), 3);
        assert!(ing.warnings.is_empty());
        assert_eq!(ing.bank, bank);
    }

    #[test]
    fn unknown_trait_cites_line() {
        let good = serde_json::to_string(&snip("A", &["F1"])).unwrap();
        let bad = good.replace("\"F1\"", "\"F12\"");
        let err = SnippetBank::parse_jsonl(format!("{good}\n{bad}\n").as_bytes()).unwrap_err();
        assert!(matches!(err, BankError::Schema { line: 2, .. }), "{err}");
    }

    #[test]
    fn schema_violations() {
        let good = serde_json::to_string(&snip("A", &[])).unwrap();
        for bad in [
            good.replace("\"scenario_id\":4", "\"scenario_id\":16"),
            good.replace("\"How was your day?\"", "\"  \""),
            good.replace(",\"traits\":[]", ""),
            good.replace("}", ",\"extra\":1}"),
        ] {
            assert!(
                matches!(SnippetBank::parse_jsonl(bad.as_bytes()), Err(BankError::Schema { line: 1, .. })),
                "{bad}"
            );
        }
        let with_flag = good.replace("}", ",\"excluded_from_eval\":true}");
        let ing = SnippetBank::parse_jsonl(with_flag.as_bytes()).unwrap();
        assert_eq!(ing.bank.snippets()[0].excluded_from_eval, Some(true));
    }

    #[test]
    fn empty_file_warns() {
        let ing = SnippetBank::parse_jsonl("".as_bytes()).unwrap();
        assert!(ing.bank.is_empty());
        assert_eq!(ing.warnings.len(), 1);
    }

    #[test]
    fn base_rate_hand_count() {
        let mut rows: Vec<Snippet> = (0..10).map(|i| snip("A", if i < 5 { &["F2"] } else { &[] })).collect();
        for r in rows.iter_mut() {
            r.traits.insert("F6".parse().unwrap());
        }
        let p = SnippetBank::new(rows).base_rates("A").unwrap();
        let f = |s: &str| p.rate(s.parse().unwrap());
        assert_eq!(f("F2"), 0.5);
        assert_eq!(f("F1"), 1e-3);
        assert_eq!(f("F6"), 1.0 - 1e-3);
        assert_eq!(p.total_turns, 10);
        assert_eq!(p.ground_truth.to_string(), "{F2, F6}");
    }

    #[test]
    fn unknown_patient() {
        let bank = SnippetBank::new(vec![snip("A", &[])]);
        assert!(matches!(bank.base_rates("Z"), Err(BankError::UnknownPatient(_))));
    }

    #[test]
    fn synth_is_deterministic_and_closed_loop() {
        let spec = SynthSpec { n_patients: 2, snippets_per_patient: 5, trait_profile_seed: None };
        let a = synthesize_bank(spec, 42).unwrap();
        let b = synthesize_bank(spec, 42).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let det = RuleDetector::new(Arc::new(Ontology::builtin().clone()));
        for s in a.snippets() {
            assert_eq!(det.detect_set(&s.patient_reply), s.traits, "{}", s.patient_reply);
        }
    }

    #[test]
    fn single_snippet_patient_has_traits() {
        let spec = SynthSpec { n_patients: 1, snippets_per_patient: 1, trait_profile_seed: None };
        let bank = synthesize_bank(spec, 7).unwrap();
        assert!(!bank.base_rates("P001").unwrap().ground_truth.is_empty());
    }

    #[test]
    fn invalid_spec() {
        let spec = SynthSpec { n_patients: 0, snippets_per_patient: 1, trait_profile_seed: None };
        assert!(matches!(synthesize_bank(spec, 1), Err(BankError::InvalidSpec(_))));
    }

    #[test]
    fn example_bank_is_synth_output() {
        let golden = include_str!("../data/example_bank.jsonl");
        let ing = SnippetBank::parse_jsonl(golden.as_bytes()).unwrap();
        assert!(ing.warnings.is_empty());
        assert_eq!((ing.bank.len(), ing.bank.patient_count()), (12, 3));
        let spec = SynthSpec { n_patients: 3, snippets_per_patient: 4, trait_profile_seed: None };
        assert_eq!(synthesize_bank(spec, 42).unwrap().to_jsonl(), golden);
    }
}
