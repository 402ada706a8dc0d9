//! Fixed clinical vocabulary: the ten language traits, the six questioning
//! strategies, the interview scenario catalogue and the A4 score scale.
//!
//! The vocabulary ships as an embedded JSON document and may be replaced at
//! runtime by a file with the same schema. Everything here is immutable once
//! loaded.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::text;

const EMBEDDED: &str = include_str!("../data/ontology.json");

pub const TRAIT_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("unknown trait id `{0}` (expected F1..F10)")]
    UnknownTrait(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("invalid ontology: {0}")]
    Invalid(String),
    #[error("reading ontology {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing ontology: {0}")]
    Json(#[from] serde_json::Error),
}

/// One of the ten traits, rendered `F1`..`F10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TraitId(u8);

impl TraitId {
    pub fn new(index: u8) -> Result<Self, OntologyError> {
        if (1..=TRAIT_COUNT as u8).contains(&index) {
            Ok(Self(index))
        } else {
            Err(OntologyError::UnknownTrait(format!("F{index}")))
        }
    }

    /// 1-based index.
    pub fn index(self) -> u8 {
        self.0
    }

    /// 0-based slot, handy for fixed-size arrays.
    pub fn slot(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_slot(slot: usize) -> Self {
        assert!(slot < TRAIT_COUNT, "trait slot {slot} out of range");
        Self(slot as u8 + 1)
    }

    pub fn all() -> impl Iterator<Item = TraitId> + Clone {
        (1..=TRAIT_COUNT as u8).map(TraitId)
    }
}

impl fmt::Display for TraitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}", self.0)
    }
}

impl FromStr for TraitId {
    type Err = OntologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || OntologyError::UnknownTrait(s.to_string());
        let digits = s.strip_prefix('F').ok_or_else(unknown)?;
        if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(unknown());
        }
        let n: u8 = digits.parse().map_err(|_| unknown())?;
        TraitId::new(n).map_err(|_| unknown())
    }
}

impl Serialize for TraitId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TraitId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Fixed-size set of traits backed by a bitmask. Iterates in index order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TraitSet(u16);

impl TraitSet {
    pub const fn empty() -> Self {
        Self(0)
    }

    pub fn full() -> Self {
        Self((1 << TRAIT_COUNT) - 1)
    }

    pub fn from_bits(bits: u16) -> Self {
        Self(bits & ((1 << TRAIT_COUNT) - 1))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn insert(&mut self, t: TraitId) {
        self.0 |= 1 << t.slot();
    }

    pub fn remove(&mut self, t: TraitId) {
        self.0 &= !(1 << t.slot());
    }

    pub fn contains(self, t: TraitId) -> bool {
        self.0 & (1 << t.slot()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        Self(self.0 & other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }

    pub fn is_subset(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = TraitId> {
        TraitId::all().filter(move |t| self.contains(*t))
    }
}

impl FromIterator<TraitId> for TraitSet {
    fn from_iter<I: IntoIterator<Item = TraitId>>(iter: I) -> Self {
        let mut s = TraitSet::empty();
        for t in iter {
            s.insert(t);
        }
        s
    }
}

impl fmt::Display for TraitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.iter().map(|t| t.to_string()).collect();
        write!(f, "{{{}}}", ids.join(", "))
    }
}

impl Serialize for TraitSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for TraitSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ids = Vec::<TraitId>::deserialize(d)?;
        Ok(ids.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    OpenEnded,
    EmotionOriented,
    Hypothetical,
    MultiStep,
    PerspectiveTaking,
    CorrectionInducing,
}

impl Strategy {
    /// Fixed order; also the tie-break order for heuristic planning.
    pub const ALL: [Strategy; 6] = [
        Strategy::OpenEnded,
        Strategy::EmotionOriented,
        Strategy::Hypothetical,
        Strategy::MultiStep,
        Strategy::PerspectiveTaking,
        Strategy::CorrectionInducing,
    ];

    pub fn position(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::OpenEnded => "OpenEnded",
            Strategy::EmotionOriented => "EmotionOriented",
            Strategy::Hypothetical => "Hypothetical",
            Strategy::MultiStep => "MultiStep",
            Strategy::PerspectiveTaking => "PerspectiveTaking",
            Strategy::CorrectionInducing => "CorrectionInducing",
        }
    }

    /// Human-facing label, e.g. `Correction-inducing`.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::OpenEnded => "Open-ended",
            Strategy::EmotionOriented => "Emotion-oriented",
            Strategy::Hypothetical => "Hypothetical",
            Strategy::MultiStep => "Multi-step",
            Strategy::PerspectiveTaking => "Perspective-taking",
            Strategy::CorrectionInducing => "Correction-inducing",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = OntologyError;

    /// Accepts the canonical name or the label, ignoring case, spaces,
    /// hyphens and underscores.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect();
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().to_lowercase() == norm)
            .ok_or_else(|| OntologyError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraitDefinition {
    pub id: TraitId,
    pub name: String,
    pub definition: String,
    #[serde(rename = "markers")]
    pub marker_lexicon: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyInfo {
    pub strategy: Strategy,
    pub label: String,
    pub description: String,
    pub affinity: BTreeSet<TraitId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u8,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub dialogic: bool,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{} {}", self.id, self.name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct A4ScoreLevel {
    pub score: u8,
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OntologyDoc {
    version: String,
    traits: Vec<TraitDefinition>,
    strategies: Vec<StrategyInfo>,
    scenarios: Vec<Scenario>,
    a4_levels: Vec<A4ScoreLevel>,
}

/// A compiled marker phrase: which trait it belongs to and its word sequence.
#[derive(Debug, Clone)]
pub struct MarkerPhrase {
    pub trait_id: TraitId,
    pub phrase: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Ontology {
    doc: OntologyDoc,
    markers: Vec<MarkerPhrase>,
}

impl Ontology {
    /// The embedded vocabulary. Parsed once per process.
    pub fn builtin() -> &'static Ontology {
        static BUILTIN: OnceLock<Ontology> = OnceLock::new();
        BUILTIN.get_or_init(|| Ontology::from_json(EMBEDDED).expect("embedded ontology is valid"))
    }

    pub fn from_json(json: &str) -> Result<Self, OntologyError> {
        let doc: OntologyDoc = serde_json::from_str(json)?;
        Self::from_doc(doc)
    }

    pub fn from_path(path: &Path) -> Result<Self, OntologyError> {
        let json = std::fs::read_to_string(path)
            .map_err(|source| OntologyError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&json)
    }

    fn from_doc(doc: OntologyDoc) -> Result<Self, OntologyError> {
        let invalid = |m: String| Err(OntologyError::Invalid(m));
        if doc.traits.len() != TRAIT_COUNT {
            return invalid(format!("expected {TRAIT_COUNT} traits, found {}", doc.traits.len()));
        }
        for (i, t) in doc.traits.iter().enumerate() {
            if t.id.slot() != i {
                return invalid(format!("trait {} listed at position {}", t.id, i + 1));
            }
            if t.name.trim().is_empty() || t.definition.trim().is_empty() {
                return invalid(format!("trait {} has an empty name or definition", t.id));
            }
            if t.marker_lexicon.is_empty() {
                return invalid(format!("trait {} has no marker phrases", t.id));
            }
        }
        if doc.strategies.len() != Strategy::ALL.len() {
            return invalid(format!("expected 6 strategies, found {}", doc.strategies.len()));
        }
        for (i, s) in doc.strategies.iter().enumerate() {
            if s.strategy != Strategy::ALL[i] {
                return invalid(format!("strategy {} listed at position {}", s.strategy, i + 1));
            }
            if s.affinity.is_empty() {
                return invalid(format!("strategy {} has an empty affinity set", s.strategy));
            }
        }
        if doc.scenarios.len() != 15 {
            return invalid(format!("expected 15 scenarios, found {}", doc.scenarios.len()));
        }
        for (i, sc) in doc.scenarios.iter().enumerate() {
            if sc.id as usize != i + 1 {
                return invalid(format!("scenario S{} listed at position {}", sc.id, i + 1));
            }
        }
        let non_dialogic: Vec<u8> = doc.scenarios.iter().filter(|s| !s.dialogic).map(|s| s.id).collect();
        if non_dialogic != [1, 2, 8, 10] {
            return invalid(format!("non-dialogic scenarios must be S1, S2, S8, S10; found {non_dialogic:?}"));
        }
        if doc.a4_levels.len() != 4 || doc.a4_levels.iter().enumerate().any(|(i, l)| l.score as usize != i) {
            return invalid("A4 scale must list scores 0..3 in order".into());
        }

        let mut markers = Vec::new();
        for t in &doc.traits {
            for phrase in &t.marker_lexicon {
                let words = text::words(phrase);
                if words.is_empty() {
                    return invalid(format!("trait {} has a marker with no words", t.id));
                }
                markers.push(MarkerPhrase { trait_id: t.id, phrase: phrase.clone(), words });
            }
        }
        // Across traits, no marker may contain another as a word run;
        // otherwise one phrase would be attributed to two traits.
        for a in &markers {
            for b in &markers {
                if a.trait_id != b.trait_id && contains_run(&a.words, &b.words) {
                    return invalid(format!(
                        "marker `{}` ({}) contains marker `{}` ({})",
                        a.phrase, a.trait_id, b.phrase, b.trait_id
                    ));
                }
            }
        }
        Ok(Self { doc, markers })
    }

    pub fn version(&self) -> &str {
        &self.doc.version
    }

    pub fn traits(&self) -> &[TraitDefinition] {
        &self.doc.traits
    }

    pub fn trait_def(&self, id: TraitId) -> &TraitDefinition {
        &self.doc.traits[id.slot()]
    }

    /// Looks up a trait by its textual id (`"F3"`).
    pub fn trait_by_id(&self, id: &str) -> Result<&TraitDefinition, OntologyError> {
        let id: TraitId = id.trim().parse()?;
        Ok(self.trait_def(id))
    }

    pub fn strategies(&self) -> &[StrategyInfo] {
        &self.doc.strategies
    }

    pub fn strategy_info(&self, s: Strategy) -> &StrategyInfo {
        &self.doc.strategies[s.position()]
    }

    pub fn strategy_affinity(&self, s: Strategy) -> TraitSet {
        self.strategy_info(s).affinity.iter().copied().collect()
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.doc.scenarios
    }

    pub fn scenario(&self, id: u8) -> Option<&Scenario> {
        self.doc.scenarios.iter().find(|s| s.id == id)
    }

    /// The eleven dialogue-based scenarios, ordered by id.
    pub fn dialogic_scenarios(&self) -> Vec<Scenario> {
        self.doc.scenarios.iter().filter(|s| s.dialogic).cloned().collect()
    }

    pub fn a4_levels(&self) -> &[A4ScoreLevel] {
        &self.doc.a4_levels
    }

    /// All marker phrases in trait order.
    pub fn markers(&self) -> &[MarkerPhrase] {
        &self.markers
    }

    pub fn markers_for(&self, id: TraitId) -> impl Iterator<Item = &MarkerPhrase> {
        self.markers.iter().filter(move |m| m.trait_id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("ontology serialises")
    }
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ont() -> &'static Ontology {
        Ontology::builtin()
    }

    #[test]
    fn trait_lookup() {
        assert!(ont().trait_by_id("F1").unwrap().definition.contains("mimics verbatim"));
        assert!(ont().trait_by_id("F10").unwrap().definition.contains("circle of life"));
        for bad in ["F11", "F0", "f1", "F01", "", "G3", "F"] {
            assert!(matches!(ont().trait_by_id(bad), Err(OntologyError::UnknownTrait(_))), "{bad}");
        }
    }

    #[test]
    fn cardinalities() {
        assert_eq!(ont().traits().len(), 10);
        assert_eq!(ont().strategies().len(), 6);
        assert_eq!(ont().dialogic_scenarios().len(), 11);
        assert_eq!(ont().a4_levels().len(), 4);
    }

    #[test]
    fn dialogic_scenarios_exclude_non_dialogue_activities() {
        let d = ont().dialogic_scenarios();
        assert_eq!(d[0].id, 3);
        assert_eq!(d[0].name, "Description of a Picture");
        for excluded in [1, 2, 8, 10] {
            assert!(d.iter().all(|s| s.id != excluded));
        }
        assert!(d.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn default_affinities() {
        let ids = |xs: &[u8]| xs.iter().map(|&i| TraitId::new(i).unwrap()).collect::<TraitSet>();
        assert_eq!(ont().strategy_affinity(Strategy::CorrectionInducing), ids(&[1]));
        assert_eq!(ont().strategy_affinity(Strategy::Hypothetical), ids(&[3, 4]));
        assert_eq!(ont().strategy_affinity(Strategy::MultiStep), ids(&[5, 6]));
        assert_eq!(ont().strategy_affinity(Strategy::EmotionOriented), ids(&[6, 8]));
        assert_eq!(ont().strategy_affinity(Strategy::PerspectiveTaking), ids(&[7, 8]));
        assert_eq!(ont().strategy_affinity(Strategy::OpenEnded), ids(&[2, 7, 9, 10]));
        let covered = Strategy::ALL.iter().fold(TraitSet::empty(), |acc, s| acc.union(ont().strategy_affinity(*s)));
        assert_eq!(covered, TraitSet::full());
    }

    #[test]
    fn marker_lexicons_are_disjoint() {
        let mut seen = std::collections::HashMap::new();
        for m in ont().markers() {
            if let Some(prev) = seen.insert(m.words.join(" "), m.trait_id) {
                assert_eq!(prev, m.trait_id, "phrase `{}` shared", m.phrase);
            }
        }
        for t in TraitId::all() {
            assert!(ont().markers_for(t).count() > 0);
        }
    }

    #[test]
    fn tab_example_phrases_are_seeded() {
        let has =
            |id: &str, p: &str| ont().trait_by_id(id).unwrap().marker_lexicon.iter().any(|m| m.eq_ignore_ascii_case(p));
        assert!(has("F6", "you know what I mean"));
        assert!(has("F6", "as they say"));
        assert!(has("F10", "circle of life"));
        assert!(has("F10", "ready to roll"));
        assert!(has("F2", "mideast"));
        assert!(has("F2", "through various apertures"));
    }

    #[test]
    fn a4_scale_text() {
        assert_eq!(
            ont().a4_levels()[3].description,
            "Predominantly stereotyped or idiosyncratic speech; little spontaneous or flexible language use."
        );
    }

    #[test]
    fn rejects_overlapping_markers() {
        let mut doc: serde_json::Value = serde_json::from_str(EMBEDDED).unwrap();
        doc["traits"][6]["markers"] = serde_json::json!(["you know what i mean really"]);
        let err = Ontology::from_json(&doc.to_string()).unwrap_err();
        assert!(err.to_string().contains("contains marker"), "{err}");
    }

    #[test]
    fn rejects_wrong_non_dialogic_set() {
        let mut doc: serde_json::Value = serde_json::from_str(EMBEDDED).unwrap();
        doc["scenarios"][2]["dialogic"] = serde_json::json!(false);
        assert!(Ontology::from_json(&doc.to_string()).is_err());
    }

    #[test]
    fn strategy_parsing_accepts_labels() {
        assert_eq!("Correction-inducing".parse::<Strategy>().unwrap(), Strategy::CorrectionInducing);
        assert_eq!("multi_step".parse::<Strategy>().unwrap(), Strategy::MultiStep);
        assert!("Socratic".parse::<Strategy>().is_err());
    }

    #[test]
    fn trait_set_ops() {
        let a: TraitSet = ["F2", "F3", "F6"].iter().map(|s| s.parse().unwrap()).collect();
        let b: TraitSet = ["F2", "F5", "F6"].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(a.intersection(b).len(), 2);
        assert_eq!(a.difference(b).to_string(), "{F3}");
        assert_eq!(serde_json::to_string(&a).unwrap(), r#"["F2","F3","F6"]"#);
    }
}
