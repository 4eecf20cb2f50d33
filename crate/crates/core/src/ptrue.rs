//! P(True) self-evaluation scores and the threshold sweep that classifies
//! low-scoring test examples as Unknown.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::derive_seed;
use crate::gateway::{CompletionRequest, Gateway, GatewayError, TopK};
use crate::types::QAPair;

pub const PTRUE_TEMPERATURE: f64 = 1.0;

pub fn ptrue_prompt(question: &str, proposed_answer: &str) -> String {
    format!(
        "Question: {question}\nProposed Answer: {proposed_answer}\nIs the proposed answer:\n (A) True\n (B) False\nThe proposed answer is:"
    )
}

/// Whether a probe completion affirms the proposed answer.
pub fn is_true_completion(text: &str) -> bool {
    let t = text.trim_start();
    t.starts_with("(A)") || t.starts_with('A') || t.get(..4).is_some_and(|p| p.eq_ignore_ascii_case("true"))
}

#[derive(Debug, Error)]
pub enum PTrueError {
    #[error("scores and evaluation share no example ids")]
    EmptyIntersection,
    #[error("n_probe_samples must be positive")]
    NoSamples,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PTrueRecord {
    pub example_id: String,
    pub p_true: f64,
    pub n_probe_samples: u32,
}

pub fn ptrue_request(pair: &QAPair, n_probe_samples: u32, max_tokens: u32, seed: u64) -> CompletionRequest {
    CompletionRequest {
        prompt: ptrue_prompt(&pair.question, pair.gold()),
        temperature: PTRUE_TEMPERATURE,
        top_k: TopK::Unbounded,
        n_samples: n_probe_samples,
        max_tokens,
        seed: Some(derive_seed(seed, &["ptrue", &pair.id])),
    }
}

fn record(pair: &QAPair, texts: &[String]) -> PTrueRecord {
    let yes = texts.iter().filter(|t| is_true_completion(t)).count();
    PTrueRecord {
        example_id: pair.id.clone(),
        p_true: yes as f64 / texts.len() as f64,
        n_probe_samples: texts.len() as u32,
    }
}

/// Fraction of `n_probe_samples` completions that answer True when the
/// model is shown its question with the gold answer proposed.
pub fn ptrue_score(pair: &QAPair, gateway: &Gateway, n_probe_samples: u32, seed: u64) -> Result<PTrueRecord, PTrueError> {
    let mut out = ptrue_scores(std::slice::from_ref(pair), gateway, n_probe_samples, seed)?;
    Ok(out.remove(0))
}

/// [`ptrue_score`] for many pairs through one gateway batch.
pub fn ptrue_scores(pairs: &[QAPair], gateway: &Gateway, n_probe_samples: u32, seed: u64) -> Result<Vec<PTrueRecord>, PTrueError> {
    if n_probe_samples == 0 {
        return Err(PTrueError::NoSamples);
    }
    let reqs: Vec<CompletionRequest> = pairs.iter().map(|p| ptrue_request(p, n_probe_samples, 8, seed)).collect();
    let outcome = gateway.complete_batch(&reqs)?;
    let results = outcome.into_all().map_err(|e| {
        let (_, first) = e.failures.into_iter().next().expect("batch error has a failure");
        first
    })?;
    Ok(pairs.iter().zip(results).map(|(p, r)| record(p, &r.texts)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub n_unknown: usize,
    pub fraction_unknown: f64,
    /// None when no example falls below the threshold.
    pub accuracy_on_unknown: Option<f64>,
}

/// For each threshold in the unique scores plus {0, 1}, the examples with
/// `p_true < threshold` are classified Unknown. Only ids present in both
/// inputs are used.
pub fn ptrue_threshold_sweep(
    records: &[PTrueRecord],
    post_ft_correct: &BTreeMap<String, bool>,
) -> Result<Vec<SweepPoint>, PTrueError> {
    let mut scored: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| post_ft_correct.get(&r.example_id).map(|&c| (r.p_true, c)))
        .collect();
    if scored.is_empty() {
        return Err(PTrueError::EmptyIntersection);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).chain([0.0, 1.0]).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let n = scored.len();
    let mut out = Vec::with_capacity(thresholds.len());
    let mut below = 0;
    let mut correct = 0;
    for t in thresholds {
        while below < n && scored[below].0 < t {
            correct += usize::from(scored[below].1);
            below += 1;
        }
        out.push(SweepPoint {
            threshold: t,
            n_unknown: below,
            fraction_unknown: below as f64 / n as f64,
            accuracy_on_unknown: (below > 0).then(|| correct as f64 / below as f64),
        });
    }
    Ok(out)
}
