//! Sentence encoding and leave-one-out anchor retrieval over the bank's
//! doctor utterances.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbedBackend};
use crate::bank::{Snippet, SnippetBank};
use crate::text;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no candidate snippets outside patient `{0}`")]
    NoCandidates(String),
    #[error("encoder backend: {0}")]
    Backend(#[from] BackendError),
    #[error("encoder returned {got} vectors for {want} inputs")]
    BatchSize { want: usize, got: usize },
    #[error("encoder returned a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= n);
        }
        self
    }
}

pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64, RetrievalError> {
    if u.dim() != v.dim() {
        return Err(RetrievalError::DimensionMismatch(u.dim(), v.dim()));
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    let denom = u.norm() * v.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, RetrievalError>;

    fn encode(&self, text: &str) -> Result<Embedding, RetrievalError> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }
}

fn check_nonempty(texts: &[&str]) -> Result<(), RetrievalError> {
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(RetrievalError::EmptyText);
    }
    Ok(())
}

/// Bag of hashed words. Deterministic and offline.
#[derive(Debug, Clone, Copy)]
pub struct HashEncoder {
    dim: usize,
}

pub const HASH_DIM: usize = 256;

impl Default for HashEncoder {
    fn default() -> Self {
        Self { dim: HASH_DIM }
    }
}

impl HashEncoder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    fn one(&self, text: &str) -> Embedding {
        let mut v = vec![0.0; self.dim];
        let words = text::words(text);
        if words.is_empty() {
            v[(fnv1a(text.trim().as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        for w in &words {
            v[(fnv1a(w.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        Embedding { values: v }.normalized()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Encoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, RetrievalError> {
        check_nonempty(texts)?;
        Ok(texts.iter().map(|t| self.one(t)).collect())
    }
}

/// Embeddings served by a remote backend.
pub struct RemoteEncoder {
    backend: Arc<dyn EmbedBackend>,
    dim: usize,
}

impl RemoteEncoder {
    pub fn new(backend: Arc<dyn EmbedBackend>, dim: usize) -> Self {
        Self { backend, dim }
    }
}

impl Encoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, RetrievalError> {
        check_nonempty(texts)?;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let owned: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
        let raw = self.backend.embed(&owned)?;
        if raw.len() != texts.len() {
            return Err(RetrievalError::BatchSize { want: texts.len(), got: raw.len() });
        }
        raw.into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(RetrievalError::DimensionMismatch(v.len(), self.dim));
                }
                Ok(Embedding::new(v.into_iter().map(f64::from).collect())?.normalized())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub query: String,
    pub exclude_patient: String,
    pub position: usize,
    pub patient_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor<'a> {
    pub position: usize,
    pub snippet: &'a Snippet,
    pub score: f64,
}

const ENCODE_CHUNK: usize = 64;

/// Precomputed doctor-utterance embeddings for one bank.
pub struct AnchorIndex {
    bank: Arc<SnippetBank>,
    encoder: Arc<dyn Encoder>,
    embeddings: Vec<Embedding>,
    audit: Option<Mutex<Vec<AuditEntry>>>,
}

/// Total order used to break exact score ties.
fn tie_key(s: &Snippet, pos: usize) -> (&str, &str, &str, &str, usize) {
    (&s.patient_id, &s.session_id, &s.doctor_curr, &s.patient_reply, pos)
}

impl AnchorIndex {
    pub fn build(bank: Arc<SnippetBank>, encoder: Arc<dyn Encoder>) -> Result<Self, RetrievalError> {
        let texts: Vec<&str> = bank.snippets().iter().map(|s| s.doctor_curr.as_str()).collect();
        let mut embeddings = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(ENCODE_CHUNK) {
            embeddings.extend(encoder.encode_batch(chunk)?);
        }
        Ok(Self { bank, encoder, embeddings, audit: None })
    }

    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn bank(&self) -> &SnippetBank {
        &self.bank
    }

    pub fn encoder(&self) -> &Arc<dyn Encoder> {
        &self.encoder
    }

    /// Patients whose doctor utterances were encoded into this index.
    pub fn encoded_patients(&self) -> BTreeSet<String> {
        self.bank.patient_ids().map(str::to_string).collect()
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.audit.as_ref().map(|m| m.lock().expect("audit lock").clone()).unwrap_or_default()
    }

    pub fn retrieve(&self, query: &str, exclude_patient: &str) -> Result<Anchor<'_>, RetrievalError> {
        let q = self.encoder.encode(query)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.bank.snippets().iter().enumerate() {
            if s.patient_id == exclude_patient {
                continue;
            }
            let score = cosine(&q, &self.embeddings[i])?;
            let better = match best {
                None => true,
                Some((j, b)) => match score.partial_cmp(&b).unwrap_or(Ordering::Equal) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => tie_key(s, i) < tie_key(&self.bank.snippets()[j], j),
                },
            };
            if better {
                best = Some((i, score));
            }
        }
        let (position, score) = best.ok_or_else(|| RetrievalError::NoCandidates(exclude_patient.to_string()))?;
        let snippet = &self.bank.snippets()[position];
        if let Some(audit) = &self.audit {
            audit.lock().expect("audit lock").push(AuditEntry {
                query: query.to_string(),
                exclude_patient: exclude_patient.to_string(),
                position,
                patient_id: snippet.patient_id.clone(),
                score,
            });
        }
        Ok(Anchor { position, snippet, score })
    }
}
