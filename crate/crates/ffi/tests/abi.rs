//! Exercises the C ABI through the exported symbols.

use std::ffi::{CStr, CString};
use std::ptr;

use elicit_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = elicit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    elicit_string_free(p);
    s
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(elicit_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn rule_detection_mask() {
    let mut mask = 0u16;
    let r = c("It was word for word for word, this guy right here.");
    assert_eq!(unsafe { elicit_detect_rule(r.as_ptr(), &mut mask) }, ElicitStatus::Ok);
    assert_eq!(mask, 0b101);
    assert_eq!(unsafe { elicit_detect_rule(ptr::null(), &mut mask) }, ElicitStatus::NullPointer);
    assert!(last_error().contains("response"));
}

#[test]
fn belief_lifecycle() {
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(elicit_belief_new(0.6, &mut b), ElicitStatus::Ok);
        let (mut mean, mut h, mut mask) = (0.0, 1.0, 0u16);
        assert_eq!(elicit_belief_entropy(b, 1, &mut h), ElicitStatus::Ok);
        assert!(h.abs() < 1e-12);
        assert_eq!(elicit_belief_update(b, 0b10), ElicitStatus::Ok);
        assert_eq!(elicit_belief_mean(b, 2, &mut mean), ElicitStatus::Ok);
        assert!((mean - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(elicit_belief_mean(b, 3, &mut mean), ElicitStatus::Ok);
        assert!((mean - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(elicit_belief_confirmed_mask(b, &mut mask), ElicitStatus::Ok);
        assert_eq!(mask, 0b10);
        assert_eq!(elicit_belief_update(b, 1 << 12), ElicitStatus::InvalidArgument);
        assert_eq!(elicit_belief_mean(b, 11, &mut mean), ElicitStatus::InvalidArgument);
        assert_eq!(elicit_belief_mean(b, 0, &mut mean), ElicitStatus::InvalidArgument);
        elicit_belief_free(b);
        elicit_belief_free(ptr::null_mut());
        assert_eq!(elicit_belief_new(1.5, &mut b), ElicitStatus::InvalidArgument);
        assert_eq!(elicit_belief_update(ptr::null_mut(), 0), ElicitStatus::NullPointer);
    }
}

#[test]
fn emission_probability_values() {
    let mut p = 0.0;
    unsafe {
        assert_eq!(elicit_emission_probability(0.5, false, 4.0, &mut p), ElicitStatus::Ok);
        assert!((p - 0.5).abs() < 1e-12);
        assert_eq!(elicit_emission_probability(0.5, true, 4.0, &mut p), ElicitStatus::Ok);
        assert!((p - 1.0 / (1.0 + 4f64.exp())).abs() < 1e-12);
        assert_eq!(elicit_emission_probability(1.5, false, 4.0, &mut p), ElicitStatus::InvalidArgument);
        assert_eq!(elicit_emission_probability(0.5, false, 4.0, ptr::null_mut()), ElicitStatus::NullPointer);
    }
}

#[test]
fn auc_and_kl() {
    let mut out = 0.0;
    unsafe {
        let (pos, neg) = ([0.9, 0.8], [0.7, 0.85]);
        assert_eq!(elicit_trait_auc(pos.as_ptr(), 2, neg.as_ptr(), 2, &mut out), ElicitStatus::Ok);
        assert!((out - 0.75).abs() < 1e-12);
        assert_eq!(elicit_trait_auc(pos.as_ptr(), 2, neg.as_ptr(), 0, &mut out), ElicitStatus::Undefined);
        let (p, q) = ([0.5, 0.5], [0.9, 0.1]);
        assert_eq!(elicit_kl_divergence(p.as_ptr(), q.as_ptr(), 2, &mut out), ElicitStatus::Ok);
        assert!((out - 0.5108).abs() < 1e-3);
        assert_eq!(elicit_kl_divergence(p.as_ptr(), q.as_ptr(), 0, &mut out), ElicitStatus::InvalidArgument);
        let bad = [-1.0, 2.0];
        assert_eq!(elicit_kl_divergence(bad.as_ptr(), q.as_ptr(), 2, &mut out), ElicitStatus::InvalidArgument);
    }
}

#[test]
fn episode_round_trip_through_json() {
    unsafe {
        let mut bank = ptr::null_mut();
        assert_eq!(elicit_bank_synthesize(3, 6, 2, &mut bank), ElicitStatus::Ok);
        let (mut len, mut n) = (0usize, 0usize);
        assert_eq!(elicit_bank_len(bank, &mut len), ElicitStatus::Ok);
        assert_eq!(elicit_bank_patient_count(bank, &mut n), ElicitStatus::Ok);
        assert_eq!((len, n), (18, 3));

        let (pid, mode) = (c("P001"), c("tpa"));
        let mut log = ptr::null_mut();
        assert_eq!(elicit_run_episode_json(bank, pid.as_ptr(), mode.as_ptr(), 7, 8, &mut log), ElicitStatus::Ok);
        let log_text = take_string(log);
        let mut again = ptr::null_mut();
        assert_eq!(elicit_run_episode_json(bank, pid.as_ptr(), mode.as_ptr(), 7, 8, &mut again), ElicitStatus::Ok);
        assert_eq!(take_string(again), log_text);
        let parsed: serde_json::Value = serde_json::from_str(&log_text).unwrap();
        assert_eq!(parsed["turns"].as_array().unwrap().len(), 8);

        let lj = c(&log_text);
        let mut metrics = ptr::null_mut();
        assert_eq!(elicit_metrics_from_log_json(lj.as_ptr(), &mut metrics), ElicitStatus::Ok);
        let m: serde_json::Value = serde_json::from_str(&take_string(metrics)).unwrap();
        assert_eq!(m["per_turn_coverage"].as_array().unwrap().len(), 8);
        assert_eq!(m["coverage"], parsed["turns"][7]["coverage_after"]);

        let unknown = c("nobody");
        assert_eq!(
            elicit_run_episode_json(bank, unknown.as_ptr(), mode.as_ptr(), 7, 8, &mut log),
            ElicitStatus::InvalidArgument
        );
        let replay = c("replay");
        assert_eq!(
            elicit_run_episode_json(bank, pid.as_ptr(), replay.as_ptr(), 7, 8, &mut log),
            ElicitStatus::InvalidArgument
        );
        let junk = c("{");
        assert_eq!(elicit_metrics_from_log_json(junk.as_ptr(), &mut metrics), ElicitStatus::Parse);
        elicit_bank_free(bank);
    }
}

#[test]
fn bank_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut bank = ptr::null_mut();
    let missing = c(dir.path().join("none.jsonl").to_str().unwrap());
    assert_eq!(unsafe { elicit_bank_load(missing.as_ptr(), &mut bank) }, ElicitStatus::Io);
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "not json\n").unwrap();
    let bad = c(bad.to_str().unwrap());
    assert_eq!(unsafe { elicit_bank_load(bad.as_ptr(), &mut bank) }, ElicitStatus::Parse);
    assert!(bank.is_null());
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/elicit.h");
    let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-std=c99", "-x", "c", header]).output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
