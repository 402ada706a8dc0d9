//! Trait-elicitation dialogue simulator and evaluation harness.

pub mod backends;
pub mod bank;
pub mod belief;
pub mod cli;
pub mod config;
pub mod detector;
pub mod fidelity;
pub mod metrics;
pub mod ontology;
pub mod patient;
pub mod prompts;
pub mod retrieval;
pub mod runner;
pub mod selector;
pub mod stats;
pub mod text;
pub mod weave;
