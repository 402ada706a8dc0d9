//! C ABI over the elicit core.
//!
//! Every fallible function returns an `ElicitStatus` and writes results
//! through out-pointers. On failure, `elicit_last_error` returns a message
//! for the calling thread. Handles are opaque and must be released with
//! their matching `*_free` function. Strings returned by the library are
//! released with `elicit_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use elicit::bank::{synthesize_bank, SnippetBank, SynthSpec};
use elicit::belief::BeliefState;
use elicit::detector::RuleDetector;
use elicit::fidelity::{auc_from_scores, kl};
use elicit::metrics::episode_metrics;
use elicit::ontology::{Ontology, TraitId, TraitSet};
use elicit::patient::{emission_probability, EmissionParams, Realiser};
use elicit::prompts::PromptSet;
use elicit::retrieval::{AnchorIndex, HashEncoder};
use elicit::runner::{episode_seed, Engine, EpisodeConfig, EpisodeLog, Mode};
use elicit::selector::HeuristicSelector;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElicitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Run = 5,
    /// The quantity is undefined for the input (for example an AUC with an empty class).
    Undefined = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

type Res<T> = Result<T, (ElicitStatus, String)>;

fn fail<T>(status: ElicitStatus, msg: impl Into<String>) -> Res<T> {
    Err((status, msg.into()))
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Res<()>) -> ElicitStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ElicitStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ElicitStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return fail(ElicitStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(ElicitStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    p.as_mut().ok_or((ElicitStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Res<&'a [f64]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(ElicitStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn to_c(s: String) -> Res<*mut c_char> {
    CString::new(s).map(CString::into_raw).or_else(|_| fail(ElicitStatus::InvalidArgument, "string contains NUL"))
}

fn trait_id(index: u8) -> Res<TraitId> {
    TraitId::new(index).or_else(|e| fail(ElicitStatus::InvalidArgument, e.to_string()))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn elicit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn elicit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn elicit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Bank

/// Opaque snippet bank handle.
pub struct ElicitBank {
    bank: Arc<SnippetBank>,
    index: OnceLock<AnchorIndex>,
}

impl ElicitBank {
    fn new(bank: SnippetBank) -> Self {
        Self { bank: Arc::new(bank), index: OnceLock::new() }
    }
}

fn put_bank(bank: SnippetBank, dst: *mut *mut ElicitBank) -> Res<()> {
    let slot = unsafe { out_arg(dst, "out")? };
    *slot = Box::into_raw(Box::new(ElicitBank::new(bank)));
    Ok(())
}

/// Loads a JSON-lines snippet bank.
///
/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_bank_load(path: *const c_char, out: *mut *mut ElicitBank) -> ElicitStatus {
    guard(|| {
        let p = text(path, "path")?;
        let ing = SnippetBank::ingest(Path::new(p)).map_err(|e| {
            let status =
                if matches!(e, elicit::bank::BankError::Io { .. }) { ElicitStatus::Io } else { ElicitStatus::Parse };
            (status, e.to_string())
        })?;
        put_bank(ing.bank, out)
    })
}

/// Generates a synthetic bank.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_bank_synthesize(
    patients: usize,
    snippets_per_patient: usize,
    seed: u64,
    out: *mut *mut ElicitBank,
) -> ElicitStatus {
    guard(|| {
        let spec = SynthSpec { n_patients: patients, snippets_per_patient, trait_profile_seed: None };
        let bank = synthesize_bank(spec, seed).map_err(|e| (ElicitStatus::InvalidArgument, e.to_string()))?;
        put_bank(bank, out)
    })
}

/// Number of snippets in the bank.
///
/// # Safety
/// `bank` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_bank_len(bank: *const ElicitBank, out: *mut usize) -> ElicitStatus {
    guard(|| {
        let b = bank.as_ref().ok_or((ElicitStatus::NullPointer, "bank is null".to_string()))?;
        *out_arg(out, "out")? = b.bank.len();
        Ok(())
    })
}

/// Number of distinct patients in the bank.
///
/// # Safety
/// `bank` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_bank_patient_count(bank: *const ElicitBank, out: *mut usize) -> ElicitStatus {
    guard(|| {
        let b = bank.as_ref().ok_or((ElicitStatus::NullPointer, "bank is null".to_string()))?;
        *out_arg(out, "out")? = b.bank.patient_count();
        Ok(())
    })
}

/// Releases a bank handle. Null is ignored.
///
/// # Safety
/// `bank` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn elicit_bank_free(bank: *mut ElicitBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

// ---------------------------------------------------------------------------
// Detection, belief, emission

fn ontology() -> Arc<Ontology> {
    static O: OnceLock<Arc<Ontology>> = OnceLock::new();
    O.get_or_init(|| Arc::new(Ontology::builtin().clone())).clone()
}

/// Rule-based detection. Bit `i - 1` of `out_mask` is set when trait Fi is found.
///
/// # Safety
/// `response` must be a valid C string; `out_mask` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_detect_rule(response: *const c_char, out_mask: *mut u16) -> ElicitStatus {
    guard(|| {
        let r = text(response, "response")?;
        *out_arg(out_mask, "out_mask")? = RuleDetector::new(ontology()).detect_set(r).bits();
        Ok(())
    })
}

/// Opaque belief-state handle.
pub struct ElicitBelief(BeliefState);

/// Fresh Beta(1, 1) belief over all traits with confirmation threshold `tau`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_belief_new(tau: f64, out: *mut *mut ElicitBelief) -> ElicitStatus {
    guard(|| {
        if !(tau > 0.0 && tau < 1.0) {
            return fail(ElicitStatus::InvalidArgument, format!("tau must lie in (0, 1), got {tau}"));
        }
        *out_arg(out, "out")? = Box::into_raw(Box::new(ElicitBelief(BeliefState::new(tau))));
        Ok(())
    })
}

unsafe fn belief<'a>(b: *mut ElicitBelief) -> Res<&'a mut BeliefState> {
    b.as_mut().map(|x| &mut x.0).ok_or((ElicitStatus::NullPointer, "belief is null".to_string()))
}

/// One turn of evidence: traits in `detected_mask` count as positive, all others negative.
///
/// # Safety
/// `b` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn elicit_belief_update(b: *mut ElicitBelief, detected_mask: u16) -> ElicitStatus {
    guard(|| {
        if detected_mask >> 10 != 0 {
            return fail(ElicitStatus::InvalidArgument, "mask has bits above F10");
        }
        belief(b)?.update(TraitSet::from_bits(detected_mask));
        Ok(())
    })
}

/// Posterior mean for trait `trait_index` (1 to 10).
///
/// # Safety
/// `b` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_belief_mean(b: *mut ElicitBelief, trait_index: u8, out: *mut f64) -> ElicitStatus {
    guard(|| {
        let t = trait_id(trait_index)?;
        *out_arg(out, "out")? = belief(b)?.posterior_mean(t);
        Ok(())
    })
}

/// Differential entropy (nats) of trait `trait_index` (1 to 10).
///
/// # Safety
/// `b` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_belief_entropy(b: *mut ElicitBelief, trait_index: u8, out: *mut f64) -> ElicitStatus {
    guard(|| {
        let t = trait_id(trait_index)?;
        *out_arg(out, "out")? = belief(b)?.entropy(t);
        Ok(())
    })
}

/// Confirmed traits as a bitmask.
///
/// # Safety
/// `b` must be a live handle; `out_mask` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_belief_confirmed_mask(b: *mut ElicitBelief, out_mask: *mut u16) -> ElicitStatus {
    guard(|| {
        *out_arg(out_mask, "out_mask")? = belief(b)?.confirmed().bits();
        Ok(())
    })
}

/// Releases a belief handle. Null is ignored.
///
/// # Safety
/// `b` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn elicit_belief_free(b: *mut ElicitBelief) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Per-turn probability that a trait with base rate `theta` is expressed;
/// `penalty` is subtracted from the logit when `confirmed` is true.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_emission_probability(
    theta: f64,
    confirmed: bool,
    penalty: f64,
    out: *mut f64,
) -> ElicitStatus {
    guard(|| {
        let params = EmissionParams { m: penalty, ..EmissionParams::default() };
        params.validate().map_err(|e| (ElicitStatus::InvalidArgument, e))?;
        if !(0.0..=1.0).contains(&theta) {
            return fail(ElicitStatus::InvalidArgument, format!("theta must lie in [0, 1], got {theta}"));
        }
        *out_arg(out, "out")? = emission_probability(theta, confirmed, &params);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Episodes and metrics

/// Runs one deterministic episode (heuristic selector, template realiser,
/// rule detector, hashed encoder) and returns the log as JSON.
/// `mode` is "tpa" or "random"; `turns` 0 means the default budget.
///
/// # Safety
/// `bank` must be a live handle; strings valid C strings; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_run_episode_json(
    bank: *const ElicitBank,
    patient_id: *const c_char,
    mode: *const c_char,
    seed: u64,
    turns: usize,
    out_json: *mut *mut c_char,
) -> ElicitStatus {
    guard(|| {
        let b = bank.as_ref().ok_or((ElicitStatus::NullPointer, "bank is null".to_string()))?;
        let pid = text(patient_id, "patient_id")?;
        let mode: Mode = text(mode, "mode")?.parse().map_err(|e: String| (ElicitStatus::InvalidArgument, e))?;
        if mode == Mode::Replay {
            return fail(ElicitStatus::InvalidArgument, "replay mode is not available here");
        }
        let dst = out_arg(out_json, "out_json")?;
        let profile = b.bank.base_rates(pid).map_err(|e| (ElicitStatus::InvalidArgument, e.to_string()))?;
        let index = match b.index.get() {
            Some(i) => i,
            None => {
                let built = AnchorIndex::build(b.bank.clone(), Arc::new(HashEncoder::default()))
                    .map_err(|e| (ElicitStatus::Run, e.to_string()))?;
                b.index.get_or_init(|| built)
            }
        };
        let o = ontology();
        let selector = HeuristicSelector::new(o.clone());
        let realiser = Realiser::template(o.clone(), PromptSet::builtin().realise);
        let detector = RuleDetector::new(o.clone());
        let engine = Engine { ontology: o, index, selector: &selector, realiser: &realiser, detector: &detector };
        let episode_id = format!("{pid}-{seed}");
        let mut cfg = EpisodeConfig { seed: episode_seed(seed, &episode_id), ..EpisodeConfig::default() };
        if turns > 0 {
            cfg.max_turns = turns;
        }
        let log = engine
            .run_episode(&cfg, &profile, &episode_id, "ffi", mode)
            .map_err(|e| (ElicitStatus::Run, e.to_string()))?;
        *dst = to_c(log.to_json())?;
        Ok(())
    })
}

/// Metrics (coverage, precision, recall, F1, AUCC, per-turn coverage) for
/// one episode log given as JSON.
///
/// # Safety
/// `log_json` must be a valid C string; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_metrics_from_log_json(
    log_json: *const c_char,
    out_json: *mut *mut c_char,
) -> ElicitStatus {
    guard(|| {
        let raw = text(log_json, "log_json")?;
        let dst = out_arg(out_json, "out_json")?;
        let log: EpisodeLog = serde_json::from_str(raw).map_err(|e| (ElicitStatus::Parse, e.to_string()))?;
        let m = episode_metrics(&log).map_err(|e| (ElicitStatus::InvalidArgument, e.to_string()))?;
        *dst = to_c(serde_json::to_string(&m).expect("metrics serialise"))?;
        Ok(())
    })
}

/// Pairwise AUC of positive against negative scores. Returns
/// `Undefined` when either array is empty.
///
/// # Safety
/// `pos` and `neg` must point to `n_pos` and `n_neg` doubles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_trait_auc(
    pos: *const f64,
    n_pos: usize,
    neg: *const f64,
    n_neg: usize,
    out: *mut f64,
) -> ElicitStatus {
    guard(|| {
        let (p, n) = (slice(pos, n_pos, "pos")?, slice(neg, n_neg, "neg")?);
        let dst = out_arg(out, "out")?;
        match auc_from_scores(p, n) {
            Some(a) => {
                *dst = a;
                Ok(())
            }
            None => fail(ElicitStatus::Undefined, "AUC needs at least one positive and one negative"),
        }
    })
}

/// Smoothed KL(p || q) over `n` entries.
///
/// # Safety
/// `p` and `q` must point to `n` doubles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elicit_kl_divergence(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> ElicitStatus {
    guard(|| {
        let (a, b) = (slice(p, n, "p")?, slice(q, n, "q")?);
        if n == 0 {
            return fail(ElicitStatus::InvalidArgument, "empty distributions");
        }
        if a.iter().chain(b).any(|x| !x.is_finite() || *x < 0.0) {
            return fail(ElicitStatus::InvalidArgument, "masses must be finite and non-negative");
        }
        *out_arg(out, "out")? = kl(a, b);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn null_out_pointer_reports() {
        let s = unsafe { elicit_detect_rule(c"as they say".as_ptr(), ptr::null_mut()) };
        assert_eq!(s, ElicitStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(elicit_last_error()) }.to_str().unwrap();
        assert!(msg.contains("out_mask"));
    }

    #[test]
    fn success_clears_error() {
        let mut m = 0u16;
        unsafe { elicit_detect_rule(ptr::null(), &mut m) };
        assert!(!elicit_last_error().is_null());
        assert_eq!(unsafe { elicit_detect_rule(c"fine".as_ptr(), &mut m) }, ElicitStatus::Ok);
        assert!(elicit_last_error().is_null());
    }
}
