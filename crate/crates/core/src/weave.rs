//! Marker weaving: turns a reply skeleton into text whose lexical trait
//! markers are exactly a requested set.

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::detector::RuleDetector;
use crate::ontology::{Ontology, TraitSet};
use crate::text;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeaveError {
    #[error("could not weave markers for {wanted}; detector saw {got}")]
    Unrecoverable { wanted: TraitSet, got: TraitSet },
}

const NEUTRAL_REPLY: &str = "I am not really sure about that.";
const SCRUB_LIMIT: usize = 32;
const PLACEMENT_ATTEMPTS: usize = 12;

/// Removes every marker phrase from `text`, repeating until none remain.
/// Returns a neutral sentence if nothing usable is left.
pub fn scrub(text_in: &str, ontology: &Ontology, detector: &RuleDetector) -> String {
    let mut cur = text_in.trim().to_string();
    for _ in 0..SCRUB_LIMIT {
        let tokens = text::tokenize(&cur);
        let hit = ontology.markers().iter().find_map(|m| {
            text::find_phrase(&tokens, &m.words).map(|i| (tokens[i].start, tokens[i + m.words.len() - 1].end))
        });
        let Some((s, e)) = hit else { break };
        let (mut left, mut right) = (cur[..s].trim_end(), cur[e..].trim_start());
        if let (Some(l), Some(r)) = (left.strip_suffix(','), right.strip_prefix(',')) {
            left = l;
            right = r;
        } else if left.is_empty() || left.ends_with(['.', '!', '?']) {
            right = right.trim_start_matches(',');
        }
        cur = collapse_spaces(&format!("{left} {right}"));
    }
    if text::words(&cur).is_empty() || !detector.detect_set(&cur).is_empty() {
        return NEUTRAL_REPLY.to_string();
    }
    cur
}

fn collapse_spaces(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Inserts one marker per trait in `emitted` into `base` at word boundaries,
/// verifying with the rule detector. Falls back to framed standalone
/// sentences when in-line placement keeps colliding.
pub fn weave<R: Rng + ?Sized>(
    base: &str,
    emitted: TraitSet,
    ontology: &Ontology,
    detector: &RuleDetector,
    rng: &mut R,
) -> Result<String, WeaveError> {
    let clean = scrub(base, ontology, detector);
    if emitted.is_empty() {
        return Ok(clean);
    }
    let phrases: Vec<String> = emitted
        .iter()
        .map(|t| {
            let ms: Vec<&str> = ontology.markers_for(t).map(|m| m.phrase.as_str()).collect();
            display_case(ms.choose(rng).expect("ontology guarantees markers"))
        })
        .collect();

    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut cur = clean.clone();
        for p in &phrases {
            cur = insert_inline(&cur, p, rng);
        }
        if detector.detect_set(&cur) == emitted {
            return Ok(cur);
        }
    }

    let mut framed = clean.clone();
    for p in &phrases {
        framed.push_str(&format!(" Well, {p}, anyway."));
    }
    let got = detector.detect_set(&framed);
    if got == emitted {
        Ok(framed)
    } else {
        Err(WeaveError::Unrecoverable { wanted: emitted, got })
    }
}

/// Lexicon entries are lowercase; the pronoun reads better capitalised.
fn display_case(phrase: &str) -> String {
    phrase.split(' ').map(|w| if w == "i" { "I" } else { w }).collect::<Vec<_>>().join(" ")
}

fn insert_inline<R: Rng + ?Sized>(s: &str, phrase: &str, rng: &mut R) -> String {
    let tokens = text::tokenize(s);
    if tokens.is_empty() {
        return format!("{s} {phrase}.");
    }
    let k = rng.random_range(0..tokens.len());
    let at = tokens[k].end;
    if k + 1 == tokens.len() {
        return format!("{}, {phrase}{}", &s[..at], &s[at..]);
    }
    format!("{}, {phrase},{}", &s[..at], &s[at..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn fixture() -> (&'static Ontology, RuleDetector) {
        let o = Ontology::builtin();
        (o, RuleDetector::new(Arc::new(o.clone())))
    }

    #[test]
    fn scrub_removes_all_markers() {
        let (o, d) = fixture();
        let s = scrub("Henceforth I go home, you know what I mean, as they say.", o, &d);
        assert!(d.detect_set(&s).is_empty());
        assert!(s.contains("go home"));
    }

    #[test]
    fn scrub_tidies_commas() {
        let (o, d) = fixture();
        assert_eq!(scrub("It gets too, fine fine fine, loud.", o, &d), "It gets too loud.");
        assert_eq!(scrub("As they say, it was fine.", o, &d), "it was fine.");
    }

    #[test]
    fn scrub_of_pure_marker_is_neutral() {
        let (o, d) = fixture();
        assert_eq!(scrub("as they say", o, &d), NEUTRAL_REPLY);
    }

    #[test]
    fn weave_hits_exact_set() {
        let (o, d) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let want: TraitSet = ["F2", "F9"].iter().map(|s| s.parse().unwrap()).collect();
        let out = weave("We went to the shops and then home.", want, o, &d, &mut rng).unwrap();
        assert_eq!(d.detect_set(&out), want);
    }

    #[test]
    fn pronoun_is_capitalised() {
        assert_eq!(display_case("you know what i mean"), "you know what I mean");
        assert_eq!(display_case("this guy right here"), "this guy right here");
    }

    #[test]
    fn empty_set_is_scrubbed_base() {
        let (o, d) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = weave("Nice nice nice, I liked it.", TraitSet::empty(), o, &d, &mut rng).unwrap();
        assert!(d.detect_set(&out).is_empty());
    }

    fn sets_up_to_two() -> impl Strategy<Value = TraitSet> {
        proptest::collection::btree_set(1u8..=10, 0..=2)
            .prop_map(|ids| ids.into_iter().map(|i| crate::ontology::TraitId::new(i).unwrap()).collect())
    }

    proptest! {
        #[test]
        fn weave_round_trips(
            words in proptest::collection::vec("[a-z]{1,8}", 1..20),
            marker in proptest::option::of(0usize..30),
            emitted in sets_up_to_two(),
            seed in any::<u64>(),
        ) {
            let (o, d) = fixture();
            let mut base = words.join(" ");
            if let Some(m) = marker {
                let ms = o.markers();
                base = format!("{base}, {}.", ms[m % ms.len()].phrase);
            }
            let out = weave(&base, emitted, o, &d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(d.detect_set(&out), emitted, "{:?} -> {:?}", base, out);
        }
    }
}
