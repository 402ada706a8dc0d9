//! Run configuration (TOML) and the manifest written next to episode logs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::HttpConfig;
use crate::belief::DEFAULT_TAU;
use crate::ontology::Ontology;
use crate::patient::{EmissionParams, RealiserKind};
use crate::prompts::{PromptSet, PROMPT_VERSION};
use crate::retrieval::HASH_DIM;
use crate::runner::{EpisodeConfig, Mode, DEFAULT_BACKGROUND, DEFAULT_TURNS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorKind {
    Heuristic,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Rule,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub turns: usize,
    pub tau: f64,
    pub seed: u64,
    pub episodes: usize,
    pub parallel: usize,
    pub clinical_background: String,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            turns: DEFAULT_TURNS,
            tau: DEFAULT_TAU,
            seed: 0,
            episodes: 10,
            parallel: 1,
            clinical_background: DEFAULT_BACKGROUND.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { kind: EncoderKind::Hash, dim: HASH_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorSection {
    pub kind: SelectorKind,
    pub temperature: Option<f64>,
}

impl Default for SelectorSection {
    fn default() -> Self {
        Self { kind: SelectorKind::Heuristic, temperature: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealiserSection {
    pub kind: RealiserKind,
    pub temperature: Option<f64>,
}

impl Default for RealiserSection {
    fn default() -> Self {
        Self { kind: RealiserKind::Template, temperature: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub kind: DetectorKind,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { kind: DetectorKind::Rule }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub endpoint: String,
    pub model: String,
    pub embed_model: String,
    pub timeout_s: u64,
    pub max_concurrency: usize,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Serve every model call from this replay log instead of the network.
    pub replay: Option<PathBuf>,
    /// Append every live exchange to this replay log.
    pub record: Option<PathBuf>,
}

impl Default for BackendSection {
    fn default() -> Self {
        let h = HttpConfig::default();
        Self {
            endpoint: h.endpoint,
            model: h.model,
            embed_model: h.embed_model,
            timeout_s: h.timeout_s,
            max_concurrency: h.max_concurrency,
            max_retries: h.max_retries,
            backoff_base_ms: h.backoff_base_ms,
            replay: None,
            record: None,
        }
    }
}

impl BackendSection {
    pub fn http(&self) -> HttpConfig {
        HttpConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            embed_model: self.embed_model.clone(),
            timeout_s: self.timeout_s,
            max_concurrency: self.max_concurrency,
            max_retries: self.max_retries,
            backoff_base_ms: self.backoff_base_ms,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub episode: EpisodeSection,
    pub emitter: EmissionParams,
    pub encoder: EncoderSection,
    pub selector: SelectorSection,
    pub realiser: RealiserSection,
    pub detector: DetectorSection,
    pub backend: BackendSection,
    pub prompts: PromptsSection,
}

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    /// Built-in defaults, overlaid with `path` when given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map(Self::load).unwrap_or_else(|| Ok(Self::default()))
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_turns: self.episode.turns,
            tau: self.episode.tau,
            seed: self.episode.seed,
            clinical_background: self.episode.clinical_background.clone(),
            emission: self.emitter,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.episode_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.encoder.dim == 0 {
            return Err(ConfigError::Invalid("encoder.dim must be positive".into()));
        }
        if self.backend.max_concurrency == 0 {
            return Err(ConfigError::Invalid("backend.max_concurrency must be at least 1".into()));
        }
        if self.backend.replay.is_some() && self.backend.record.is_some() {
            return Err(ConfigError::Invalid("backend.replay and backend.record are mutually exclusive".into()));
        }
        Ok(())
    }

    /// Whether any component needs a model backend.
    pub fn needs_backend(&self) -> bool {
        self.selector.kind == SelectorKind::Llm
            || self.realiser.kind == RealiserKind::Llm
            || self.detector.kind == DetectorKind::Llm
            || self.encoder.kind == EncoderKind::Remote
    }

    /// Canonical JSON used for run ids. Settings that change how a run
    /// executes but not what it produces (thread count, record log) are
    /// normalised away.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.episode.parallel = 1;
        c.backend.record = None;
        serde_json::to_string(&c).expect("config serialises")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub elicit: String,
    pub ontology: String,
    pub prompts: String,
    /// Digest of the prompt templates in effect.
    pub prompts_digest: String,
}

impl Versions {
    pub fn current(ontology: &Ontology, prompts: &PromptSet) -> Self {
        let mut h = Sha256::new();
        for t in [&prompts.think, &prompts.plan, &prompts.ask, &prompts.detect, &prompts.realise] {
            h.update(t.source().as_bytes());
            h.update([0u8]);
        }
        Self {
            elicit: env!("CARGO_PKG_VERSION").to_string(),
            ontology: ontology.version().to_string(),
            prompts: PROMPT_VERSION.to_string(),
            prompts_digest: h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeStatus {
    Ok,
    Aborted,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub episode_id: String,
    pub patient_id: String,
    pub status: EpisodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub config: Config,
    pub versions: Versions,
    pub episodes: Vec<ManifestEntry>,
    pub started_at: String,
    pub finished_at: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(Config::from_toml(&text, Path::new("x")).unwrap(), c);
        assert_eq!(c.episode.turns, 20);
        assert_eq!(c.emitter.m, 4.0);
        assert!(!c.needs_backend());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::from_toml("[episode]\ntau = 0.5\n[emitter]\nstrategy_profile_enabled = true\n", Path::new("x"))
            .unwrap();
        assert_eq!(c.episode.tau, 0.5);
        assert_eq!(c.episode.turns, 20);
        assert!(c.emitter.strategy_profile_enabled);
        assert_eq!(c.emitter.max_traits_per_turn, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("[episode]\nturnz = 3\n", Path::new("x")), Err(ConfigError::Parse { .. })));
        assert!(Config::from_toml("[detector]\nkind = \"magic\"\n", Path::new("x")).is_err());
    }

    #[test]
    fn validation() {
        let mut c = Config::default();
        c.episode.tau = 1.5;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.backend.replay = Some("a".into());
        c.backend.record = Some("b".into());
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.detector.kind = DetectorKind::Llm;
        assert!(c.needs_backend());
    }

    #[test]
    fn run_identity_ignores_thread_count() {
        let a = Config::default();
        let mut b = a.clone();
        b.episode.parallel = 4;
        assert_eq!(a.canonical_json(), b.canonical_json());
        b.episode.seed = 1;
        assert_ne!(a.canonical_json(), b.canonical_json());
    }

    #[test]
    fn versions_are_stable() {
        let a = Versions::current(Ontology::builtin(), &PromptSet::builtin());
        assert_eq!(a, Versions::current(Ontology::builtin(), &PromptSet::builtin()));
        assert_eq!(a.prompts_digest.len(), 16);
    }
}
