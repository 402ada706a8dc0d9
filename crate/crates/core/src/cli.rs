//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 backend or
//! transport failure (including any aborted episode).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::backends::{BackendError, ChatBackend, EmbedBackend, HttpClient, Recorder, ReplayBackend, API_KEY_ENV};
use crate::bank::{synthesize_bank, SnippetBank, SynthSpec};
use crate::config::{
    Config, DetectorKind, EncoderKind, EpisodeStatus, ManifestEntry, RunManifest, SelectorKind, Versions,
};
use crate::detector::{DetectError, Detector, LlmDetector, RuleDetector};
use crate::fidelity::{loo_validate, FidelityConfig, FidelityError, LooAgents};
use crate::metrics::{aggregate, write_curves_csv, write_report_csv, write_strategy_csv, CorpusReport};
use crate::ontology::{Ontology, TraitSet};
use crate::patient::{Realiser, RealiserKind};
use crate::prompts::PromptSet;
use crate::retrieval::{AnchorIndex, Encoder, HashEncoder, RemoteEncoder, RetrievalError};
use crate::runner::{plan_episodes, run_batch, run_id, Batch, Engine, EpisodeLog, EpisodeSpec, Mode, RunError};
use crate::selector::{HeuristicSelector, LlmSelector, Selector};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Backend(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Backend(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Backend(_) => CliError::Backend(e.to_string()),
            other => usage(other),
        }
    }
}

impl From<FidelityError> for CliError {
    fn from(e: FidelityError) -> Self {
        match e {
            FidelityError::Retrieval(r) => r.into(),
            FidelityError::Aborted { .. } => CliError::Backend(e.to_string()),
            other => usage(other),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "elicit", version, about = "Trait-elicitation dialogue simulator and evaluation harness")]
pub struct Cli {
    /// TOML configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a snippet bank and print a summary.
    Ingest(IngestArgs),
    /// Generate a synthetic snippet bank.
    Synth(SynthArgs),
    /// Simulate episodes (TPA or random-strategy) and write logs.
    Run(RunArgs),
    /// Replay each patient's real transcript through detection and belief tracking.
    Replay(ReplayArgs),
    /// Compute metrics over a directory of episode logs.
    Evaluate(EvaluateArgs),
    /// Leave-one-patient-out validation of the patient simulator.
    Validate(ValidateArgs),
    /// Write report.json and the three CSV tables for a log directory.
    Report(ReportArgs),
    /// Run the detector on one question/response pair.
    Detect(DetectArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Write the validated bank back out in canonical form.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub patients: usize,
    #[arg(long)]
    pub snippets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Separate seed for trait profiles; defaults to --seed.
    #[arg(long)]
    pub profile_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct StackArgs {
    #[arg(long, value_parser = ["heuristic", "llm"])]
    pub selector: Option<String>,
    #[arg(long, value_parser = ["template", "llm"])]
    pub realiser: Option<String>,
    #[arg(long, value_parser = ["rule", "llm"])]
    pub detector: Option<String>,
    #[arg(long, value_parser = ["hash", "remote"])]
    pub encoder: Option<String>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Serve model calls from a replay log.
    #[arg(long)]
    pub replay_log: Option<PathBuf>,
    /// Record live model calls to a replay log.
    #[arg(long)]
    pub record_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value = "tpa", value_parser = ["tpa", "random"])]
    pub mode: String,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value = "logs")]
    pub out: PathBuf,
    /// JSON object mapping patient id to a list of trait ids used as
    /// ground truth instead of the bank-derived labels.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[command(flatten)]
    pub stack: StackArgs,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value = "logs")]
    pub out: PathBuf,
    #[command(flatten)]
    pub stack: StackArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub logs: PathBuf,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long)]
    pub strategy_csv: Option<PathBuf>,
    /// Print the per-patient mean in the summary line instead of the episode mean.
    #[arg(long)]
    pub by_patient: bool,
    #[arg(long)]
    pub include_aborted: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub logs: PathBuf,
    #[arg(long, default_value = "reports")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub include_aborted: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub episodes_per_patient: usize,
    #[arg(long, default_value = "fidelity.json")]
    pub out: PathBuf,
    /// Shuffle trait labels within each patient before AUC (null check).
    #[arg(long)]
    pub permute_labels: bool,
    /// Keep the confirmed-trait penalty on during simulation.
    #[arg(long)]
    pub suppression: bool,
    #[command(flatten)]
    pub stack: StackArgs,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long, default_value = "")]
    pub question: String,
    #[arg(long)]
    pub response: String,
    #[command(flatten)]
    pub stack: StackArgs,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let base = Config::load_or_default(cli.config.as_deref()).map_err(usage)?;
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Synth(a) => synth(&a),
        Command::Run(a) => run(base, &a),
        Command::Replay(a) => replay(base, &a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Validate(a) => validate(base, &a),
        Command::Report(a) => report(&a),
        Command::Detect(a) => detect(base, &a),
    }
}

fn kind<T: DeserializeOwned>(s: &str) -> T {
    serde_json::from_value(serde_json::Value::String(s.to_string())).expect("value checked by the parser")
}

fn apply(mut cfg: Config, a: &StackArgs) -> Result<Config, CliError> {
    if let Some(s) = &a.selector {
        cfg.selector.kind = kind::<SelectorKind>(s);
    }
    if let Some(s) = &a.realiser {
        cfg.realiser.kind = kind::<RealiserKind>(s);
    }
    if let Some(s) = &a.detector {
        cfg.detector.kind = kind::<DetectorKind>(s);
    }
    if let Some(s) = &a.encoder {
        cfg.encoder.kind = kind::<EncoderKind>(s);
    }
    if let Some(t) = a.turns {
        cfg.episode.turns = t;
    }
    if let Some(t) = a.tau {
        cfg.episode.tau = t;
    }
    if let Some(s) = a.seed {
        cfg.episode.seed = s;
    }
    if let Some(p) = a.parallel {
        cfg.episode.parallel = p;
    }
    if let Some(p) = &a.replay_log {
        cfg.backend.replay = Some(p.clone());
    }
    if let Some(p) = &a.record_log {
        cfg.backend.record = Some(p.clone());
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Components assembled from a configuration.
pub struct Stack {
    pub ontology: Arc<Ontology>,
    pub prompts: PromptSet,
    pub selector: Box<dyn Selector>,
    pub realiser: Realiser,
    pub detector: Box<dyn Detector>,
    pub encoder: Arc<dyn Encoder>,
}

type Backends = (Arc<dyn ChatBackend>, Arc<dyn EmbedBackend>);

fn backends(cfg: &Config) -> Result<Backends, CliError> {
    if let Some(path) = &cfg.backend.replay {
        let b = Arc::new(ReplayBackend::load(path).map_err(|e| CliError::Backend(e.to_string()))?);
        return Ok((b.clone(), b));
    }
    if std::env::var(API_KEY_ENV).map(|k| k.trim().is_empty()).unwrap_or(true) {
        return Err(CliError::Backend(BackendError::Auth(format!("{API_KEY_ENV} is not set")).to_string()));
    }
    let client = Arc::new(HttpClient::from_env(cfg.backend.http()));
    if let Some(path) = &cfg.backend.record {
        let r = Arc::new(Recorder::create(client, path).map_err(|e| usage(format!("{}: {e}", path.display())))?);
        return Ok((r.clone(), r));
    }
    Ok((client.clone(), client))
}

pub fn build_stack(cfg: &Config) -> Result<Stack, CliError> {
    let ontology = Arc::new(Ontology::builtin().clone());
    let prompts = match &cfg.prompts.dir {
        Some(d) => PromptSet::from_dir(d).map_err(usage)?,
        None => PromptSet::builtin(),
    };
    let (chat, embed) =
        if cfg.needs_backend() { backends(cfg).map(|(c, e)| (Some(c), Some(e)))? } else { (None, None) };
    let model = cfg.backend.model.clone();

    let selector: Box<dyn Selector> = match cfg.selector.kind {
        SelectorKind::Heuristic => Box::new(HeuristicSelector::new(ontology.clone())),
        SelectorKind::Llm => {
            let s = LlmSelector::new(chat.clone().expect("backend"), ontology.clone(), prompts.clone(), model.clone());
            Box::new(match cfg.selector.temperature {
                Some(t) => s.with_temperature(t),
                None => s,
            })
        }
    };
    let realiser = match cfg.realiser.kind {
        RealiserKind::Template => Realiser::template(ontology.clone(), prompts.realise.clone()),
        RealiserKind::Llm => {
            Realiser::llm(ontology.clone(), prompts.realise.clone(), chat.clone().expect("backend"), model.clone())
        }
    };
    let realiser = match cfg.realiser.temperature {
        Some(t) => realiser.with_temperature(t),
        None => realiser,
    };
    let detector: Box<dyn Detector> = match cfg.detector.kind {
        DetectorKind::Rule => Box::new(RuleDetector::new(ontology.clone())),
        DetectorKind::Llm => {
            Box::new(LlmDetector::new(chat.expect("backend"), ontology.clone(), prompts.detect.clone(), model))
        }
    };
    let encoder: Arc<dyn Encoder> = match cfg.encoder.kind {
        EncoderKind::Hash => Arc::new(HashEncoder::with_dim(cfg.encoder.dim)),
        EncoderKind::Remote => Arc::new(RemoteEncoder::new(embed.expect("backend"), cfg.encoder.dim)),
    };
    Ok(Stack { ontology, prompts, selector, realiser, detector, encoder })
}

fn load_bank(path: &Path) -> Result<SnippetBank, CliError> {
    let ing = SnippetBank::ingest(path).map_err(usage)?;
    for w in &ing.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(ing.bank)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn ingest(a: &IngestArgs) -> Result<(), CliError> {
    let bank = load_bank(&a.bank)?;
    let patients: BTreeMap<String, TraitSet> =
        bank.profiles().into_iter().map(|p| (p.patient_id, p.ground_truth)).collect();
    let summary = serde_json::json!({
        "snippets": bank.len(),
        "patients": bank.patient_count(),
        "ground_truth": patients,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    if let Some(out) = &a.out {
        bank.write(out).map_err(usage)?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec =
        SynthSpec { n_patients: a.patients, snippets_per_patient: a.snippets, trait_profile_seed: a.profile_seed };
    let bank = synthesize_bank(spec, a.seed).map_err(usage)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    bank.write(&a.out).map_err(usage)?;
    println!("wrote {} snippets for {} patients to {}", bank.len(), bank.patient_count(), a.out.display());
    Ok(())
}

fn load_ground_truth(path: &Path) -> Result<BTreeMap<String, TraitSet>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

struct Outcome {
    aborted: usize,
    skipped: usize,
}

#[allow(clippy::too_many_arguments)]
fn write_run(
    out: &Path,
    cfg: &Config,
    stack_versions: Versions,
    mode: Mode,
    run_id: &str,
    specs: &[EpisodeSpec],
    results: Vec<Result<EpisodeLog, RunError>>,
    started_at: String,
) -> Result<Outcome, CliError> {
    fs::create_dir_all(out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    let mut entries = Vec::new();
    let mut outcome = Outcome { aborted: 0, skipped: 0 };
    for (spec, res) in specs.iter().zip(results) {
        match res {
            Ok(log) => {
                let file = format!("{}.json", log.episode_id);
                let status = if log.is_aborted() {
                    outcome.aborted += 1;
                    EpisodeStatus::Aborted
                } else {
                    EpisodeStatus::Ok
                };
                let message = log.aborted.as_ref().map(|a| format!("turn {} ({}): {}", a.turn, a.stage, a.message));
                write_json(&out.join(&file), &log)?;
                entries.push(ManifestEntry {
                    episode_id: spec.episode_id.clone(),
                    patient_id: spec.patient_id.clone(),
                    status,
                    file: Some(file),
                    message,
                });
            }
            Err(RunError::EmptyGroundTruth(p)) => {
                outcome.skipped += 1;
                log::warn!("skipping {}: patient {p} has no ground-truth traits", spec.episode_id);
                entries.push(ManifestEntry {
                    episode_id: spec.episode_id.clone(),
                    patient_id: spec.patient_id.clone(),
                    status: EpisodeStatus::Skipped,
                    file: None,
                    message: Some("empty ground truth".into()),
                });
            }
            Err(e) => return Err(usage(e)),
        }
    }
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        mode,
        seed: cfg.episode.seed,
        config: cfg.clone(),
        versions: stack_versions,
        episodes: entries,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(outcome)
}

fn finish(kind: &str, n: usize, out: &Path, o: Outcome) -> Result<(), CliError> {
    println!(
        "{kind}: {} episodes written to {} ({} aborted, {} skipped)",
        n - o.skipped,
        out.display(),
        o.aborted,
        o.skipped
    );
    if o.aborted > 0 {
        return Err(CliError::Backend(format!("{} episode(s) aborted on backend errors", o.aborted)));
    }
    Ok(())
}

fn run(base: Config, a: &RunArgs) -> Result<(), CliError> {
    let mut cfg = apply(base, &a.stack)?;
    if let Some(n) = a.episodes {
        cfg.episode.episodes = n;
    }
    let mode = kind::<Mode>(&a.mode);
    let started_at = chrono::Utc::now().to_rfc3339();
    let bank = Arc::new(load_bank(&a.bank)?);
    let stack = build_stack(&cfg)?;
    let rid = run_id(cfg.episode.seed, mode, &cfg.canonical_json());

    let mut specs = plan_episodes(&bank, cfg.episode.episodes);
    if specs.is_empty() {
        return Err(usage("bank has no patients"));
    }
    if let Some(path) = &a.ground_truth {
        let gt = load_ground_truth(path)?;
        for s in specs.iter_mut() {
            s.ground_truth = gt.get(&s.patient_id).copied();
        }
    }
    let index = AnchorIndex::build(bank.clone(), stack.encoder.clone())?;
    let engine = Engine {
        ontology: stack.ontology.clone(),
        index: &index,
        selector: stack.selector.as_ref(),
        realiser: &stack.realiser,
        detector: stack.detector.as_ref(),
    };
    let ep = cfg.episode_config();
    let batch = Batch { bank: &bank, cfg: &ep, mode, run_id: &rid, parallel: cfg.episode.parallel };
    let results = run_batch(Some(&engine), &batch, &specs, stack.detector.as_ref());
    let versions = Versions::current(&stack.ontology, &stack.prompts);
    let outcome = write_run(&a.out, &cfg, versions, mode, &rid, &specs, results, started_at)?;
    finish("run", specs.len(), &a.out, outcome)
}

fn replay(base: Config, a: &ReplayArgs) -> Result<(), CliError> {
    let cfg = apply(base, &a.stack)?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let bank = load_bank(&a.bank)?;
    let stack = build_stack(&cfg)?;
    let rid = run_id(cfg.episode.seed, Mode::Replay, &cfg.canonical_json());
    let specs = plan_episodes(&bank, bank.patient_count());
    if specs.is_empty() {
        return Err(usage("bank has no patients"));
    }
    let ep = cfg.episode_config();
    let batch = Batch { bank: &bank, cfg: &ep, mode: Mode::Replay, run_id: &rid, parallel: cfg.episode.parallel };
    let results = run_batch(None, &batch, &specs, stack.detector.as_ref());
    let versions = Versions::current(&stack.ontology, &stack.prompts);
    let outcome = write_run(&a.out, &cfg, versions, Mode::Replay, &rid, &specs, results, started_at)?;
    finish("replay", specs.len(), &a.out, outcome)
}

/// Episode logs in a directory, in file-name order. The manifest is skipped.
pub fn read_logs(dir: &Path) -> Result<Vec<EpisodeLog>, CliError> {
    let rd = fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: not an episode log: {e}", p.display())))
        })
        .collect()
}

fn csv_file(path: &Path, f: impl FnOnce(fs::File) -> Result<(), crate::metrics::MetricsError>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    let file = fs::File::create(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    f(file).map_err(usage)
}

fn corpus(logs_dir: &Path, include_aborted: bool) -> Result<CorpusReport, CliError> {
    let logs = read_logs(logs_dir)?;
    aggregate(&logs, include_aborted).map_err(usage)
}

fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let r = corpus(&a.logs, a.include_aborted)?;
    match &a.out {
        Some(p) => write_json(p, &r)?,
        None => println!("{}", serde_json::to_string_pretty(&r).expect("json")),
    }
    if let Some(p) = &a.csv {
        csv_file(p, |f| write_report_csv(&r, f))?;
    }
    if let Some(p) = &a.curves {
        csv_file(p, |f| write_curves_csv(&r, f))?;
    }
    if let Some(p) = &a.strategy_csv {
        csv_file(p, |f| write_strategy_csv(&r, f))?;
    }
    let m = if a.by_patient { r.mean_by_patient } else { r.mean };
    eprintln!(
        "{} episodes ({} patients): coverage {:.4}, F1 {:.4}, AUCC {:.4}",
        r.n_episodes, r.n_patients, m.coverage, m.f1, m.aucc
    );
    Ok(())
}

fn report(a: &ReportArgs) -> Result<(), CliError> {
    let r = corpus(&a.logs, a.include_aborted)?;
    write_json(&a.out_dir.join("report.json"), &r)?;
    csv_file(&a.out_dir.join("report.csv"), |f| write_report_csv(&r, f))?;
    csv_file(&a.out_dir.join("curves.csv"), |f| write_curves_csv(&r, f))?;
    csv_file(&a.out_dir.join("strategy_dist.csv"), |f| write_strategy_csv(&r, f))?;
    println!("report for {} episodes written to {}", r.n_episodes, a.out_dir.display());
    Ok(())
}

fn validate(base: Config, a: &ValidateArgs) -> Result<(), CliError> {
    let cfg = apply(base, &a.stack)?;
    let bank = load_bank(&a.bank)?;
    let stack = build_stack(&cfg)?;
    let mut episode = cfg.episode_config();
    episode.emission.suppression = a.suppression;
    let fcfg = FidelityConfig {
        episodes_per_patient: a.episodes_per_patient,
        episode,
        permute_labels: a.permute_labels,
        parallel: cfg.episode.parallel,
    };
    let agents = LooAgents {
        ontology: stack.ontology.clone(),
        encoder: stack.encoder.clone(),
        selector: stack.selector.as_ref(),
        realiser: &stack.realiser,
        detector: stack.detector.as_ref(),
    };
    let r = loo_validate(&bank, &agents, &fcfg)?;
    write_json(&a.out, &r)?;
    let t = r.thresholds_met;
    println!(
        "{} folds: KL {:.4} [{}], freq error {:.4} [{}], AUC {} [{}], similarity {:.4} [{}]",
        r.n_patients,
        r.kl.mean,
        pass(t.kl),
        r.freq_error.mean,
        pass(t.freq_error),
        r.auc_overall.map(|s| format!("{:.4}", s.mean)).unwrap_or_else(|| "n/a".into()),
        pass(t.auc),
        r.semantic_similarity.mean,
        pass(t.semantic_similarity)
    );
    Ok(())
}

fn pass(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

fn detect(base: Config, a: &DetectArgs) -> Result<(), CliError> {
    let cfg = apply(base, &a.stack)?;
    let stack = build_stack(&cfg)?;
    let res = stack.detector.detect(&a.question, &a.response).map_err(|e| match e {
        DetectError::Backend(_) => CliError::Backend(e.to_string()),
        other => usage(other),
    })?;
    let out = serde_json::json!({ "detected": res.detected(), "labels": res.labels, "evidence": res.evidence });
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&out).expect("json")).map_err(usage)?;
    Ok(())
}
