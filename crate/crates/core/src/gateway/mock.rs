use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, CompletionRequest, GatewayError};
use crate::eval::exact_match;

/// Answer strings with their probabilities. Keys are kept in lexicographic
/// order, which is also the greedy tie-break order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerDistribution(pub BTreeMap<String, f64>);

impl AnswerDistribution {
    pub fn certain(answer: impl Into<String>) -> Self {
        Self([(answer.into(), 1.0)].into_iter().collect())
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        let mut map = BTreeMap::new();
        for (a, p) in pairs {
            *map.entry(a.into()).or_insert(0.0) += p;
        }
        Self(map)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.0.is_empty() {
            return Err("distribution is empty".into());
        }
        let mut total = 0.0;
        for (a, &p) in &self.0 {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(format!("probability of {a:?} is {p}"));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("probabilities sum to {total}"));
        }
        Ok(())
    }

    /// Most probable answer; ties go to the lexicographically smallest.
    pub fn mode(&self) -> &str {
        let mut best: Option<(&str, f64)> = None;
        for (a, &p) in &self.0 {
            match best {
                Some((_, bp)) if p <= bp => {}
                _ => best = Some((a, p)),
            }
        }
        best.map(|(a, _)| a).unwrap_or("")
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> &str {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = "";
        for (a, &p) in &self.0 {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = a;
            if u < acc {
                return a;
            }
        }
        last
    }
}

/// Mock model knowledge: prompt or question -> answer distribution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnowledgeTable(pub BTreeMap<String, AnswerDistribution>);

impl KnowledgeTable {
    pub fn insert(&mut self, key: impl Into<String>, dist: AnswerDistribution) {
        self.0.insert(key.into(), dist);
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// The question on the last `Q:` or `Question:` line of a prompt.
pub fn extract_target_question(prompt: &str) -> Option<&str> {
    prompt.lines().rev().find_map(|line| {
        line.strip_prefix("Q: ")
            .or_else(|| line.strip_prefix("Question: "))
    })
}

/// How the mock picks a greedy answer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GreedyPolicy {
    /// Always the distribution's mode.
    #[default]
    Mode,
    /// A fixed per-prompt draw among answers with probability >= `floor`,
    /// so the greedy answer can change with the few-shot exemplars.
    PromptSensitive { floor: f64 },
}

/// `(question, proposed answer)` of a true/false self-evaluation prompt.
pub fn extract_self_evaluation(prompt: &str) -> Option<(&str, &str)> {
    if !prompt.trim_end().ends_with("The proposed answer is:") {
        return None;
    }
    let mut question = None;
    let mut proposed = None;
    for line in prompt.lines() {
        if let Some(q) = line.strip_prefix("Question: ") {
            question = Some(q);
        } else if let Some(a) = line.strip_prefix("Proposed Answer: ") {
            proposed = Some(a);
        }
    }
    Some((question?, proposed?))
}

/// Deterministic stand-in for a language model.
///
/// A request is answered from the table entry keyed by the full prompt, or
/// else by the prompt's target question; anything else gets the empty
/// answer. A true/false self-evaluation prompt without its own entry is
/// answered "(A) True" with probability equal to the mass the question's
/// distribution puts on answers matching the proposed one. Greedy requests return the distribution's mode. Sampled requests
/// return i.i.d. draws from a ChaCha8 stream seeded from the mock seed and
/// the request's fields, so results depend only on `(seed, request)`.
pub struct MockBackend {
    id: String,
    table: KnowledgeTable,
    seed: u64,
    greedy: GreedyPolicy,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(table: KnowledgeTable, seed: u64) -> Result<Self, GatewayError> {
        for (key, dist) in &table.0 {
            dist.validate()
                .map_err(|e| GatewayError::InvalidDistribution(format!("{key:?}: {e}")))?;
        }
        Ok(Self {
            id: format!("mock-{seed}"),
            table,
            seed,
            greedy: GreedyPolicy::Mode,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn with_greedy_policy(mut self, policy: GreedyPolicy) -> Self {
        self.greedy = policy;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn table(&self) -> &KnowledgeTable {
        &self.table
    }

    fn lookup(&self, prompt: &str) -> Option<AnswerDistribution> {
        if let Some(d) = self.table.0.get(prompt) {
            return Some(d.clone());
        }
        if let Some((q, proposed)) = extract_self_evaluation(prompt) {
            let p: f64 = self
                .table
                .0
                .get(q)
                .map(|d| d.0.iter().filter(|(a, _)| exact_match(a, &[proposed])).map(|(_, p)| p).sum())
                .unwrap_or(0.0);
            let p = p.clamp(0.0, 1.0);
            return Some(AnswerDistribution::from_pairs([("(A) True", p), ("(B) False", 1.0 - p)]));
        }
        extract_target_question(prompt).and_then(|q| self.table.0.get(q)).cloned()
    }

    fn stream_seed(&self, request: &CompletionRequest) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        match request.seed {
            Some(s) => {
                h.update([1u8]);
                h.update(s.to_le_bytes());
            }
            None => h.update([0u8]),
        }
        h.update(request.temperature.to_bits().to_le_bytes());
        h.update(request.top_k.to_string().as_bytes());
        h.update(request.n_samples.to_le_bytes());
        h.update(request.max_tokens.to_le_bytes());
        h.update(request.prompt.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

impl Backend for MockBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let n = request.n_samples as usize;
        let Some(dist) = self.lookup(&request.prompt) else {
            return Ok(vec![String::new(); n]);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.stream_seed(request));
        if request.is_greedy() {
            let answer = match self.greedy {
                GreedyPolicy::Mode => dist.mode().to_string(),
                GreedyPolicy::PromptSensitive { floor } => {
                    let kept = AnswerDistribution::from_pairs(dist.0.iter().filter(|(_, &p)| p >= floor).map(|(a, &p)| (a.clone(), p)));
                    let total: f64 = kept.0.values().sum();
                    if total > 0.0 {
                        let norm = AnswerDistribution(kept.0.into_iter().map(|(a, p)| (a, p / total)).collect());
                        norm.draw(&mut rng).to_string()
                    } else {
                        dist.mode().to_string()
                    }
                }
            };
            return Ok(vec![answer; n]);
        }
        Ok((0..n).map(|_| dist.draw(&mut rng).to_string()).collect())
    }
}
