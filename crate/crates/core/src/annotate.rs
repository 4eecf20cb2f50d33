//! Sampling-based knowledge categorization of QA pairs.
//!
//! For every target question the model answers `n_exemplar_sets` different
//! few-shot prompts, once greedily and `n_samples` times with temperature
//! sampling. The fraction of correct greedy answers and of correct sampled
//! answers then place the pair in one of four [`KnowledgeCategory`] buckets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::exact_match;
use crate::gateway::{CompletionRequest, EndpointProfile, Gateway, GatewayError, TopK};
use crate::types::{CategoryMap, KnowledgeCategory, QAPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub n_exemplar_sets: usize,
    pub k_shot: usize,
    pub n_samples: u32,
    pub sample_temperature: f64,
    pub top_k: u32,
    pub rng_seed: u64,
    pub max_tokens: u32,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            n_exemplar_sets: 10,
            k_shot: 4,
            n_samples: 16,
            sample_temperature: 0.5,
            top_k: 40,
            rng_seed: 0,
            max_tokens: 32,
        }
    }
}

impl SamplingPolicy {
    pub fn with_seed(seed: u64) -> Self {
        Self { rng_seed: seed, ..Self::default() }
    }

    /// Generations per annotated pair on a cold cache.
    pub fn generations_per_pair(&self) -> usize {
        self.n_exemplar_sets * (1 + self.n_samples as usize)
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        let bad = |m: &str| Err(AnnotateError::InvalidPolicy(m.to_string()));
        if self.n_exemplar_sets == 0 {
            return bad("n_exemplar_sets must be >= 1");
        }
        if self.k_shot == 0 {
            return bad("k_shot must be >= 1");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1");
        }
        if !(self.sample_temperature > 0.0) {
            return bad("sample_temperature must be > 0");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(String),
    #[error("relation {relation_id}: dev pool of {available} examples cannot provide {needed}")]
    InsufficientDevPool {
        relation_id: String,
        available: usize,
        needed: String,
    },
    #[error("expected {expected} exemplar sets, got {got}")]
    WrongSetCount { expected: usize, got: usize },
    #[error("pair {pair_id}: {source}")]
    Gateway {
        pair_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("{} pair(s) left unannotated (first: {})", failed.len(), failed.first().map(|f| f.0.as_str()).unwrap_or("-"))]
    Incomplete { failed: Vec<(String, GatewayError)> },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("annotation record {0} does not match any corpus pair")]
    UnknownPair(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `k_shot` dev examples of one relation used as few-shot demonstrations.
///
/// `reserves` lists the rest of the relation's dev pool in a seeded order;
/// they stand in for exemplars that collide with a target question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub relation_id: String,
    pub set_index: usize,
    pub exemplars: Vec<QAPair>,
    #[serde(default)]
    pub reserves: Vec<QAPair>,
}

fn collides(a: &QAPair, b: &QAPair) -> bool {
    a.id == b.id || a.question == b.question
}

impl ExemplarSet {
    /// The exemplars to use for `target`, with any exemplar equal to the
    /// target swapped for the next unused reserve.
    pub fn exemplars_for(&self, target: &QAPair) -> Result<Vec<&QAPair>, AnnotateError> {
        let mut reserves = self
            .reserves
            .iter()
            .filter(|r| !collides(r, target) && !self.exemplars.iter().any(|e| e.id == r.id));
        self.exemplars
            .iter()
            .map(|e| {
                if collides(e, target) {
                    reserves.next().ok_or_else(|| AnnotateError::InsufficientDevPool {
                        relation_id: self.relation_id.clone(),
                        available: self.exemplars.len() + self.reserves.len(),
                        needed: "a reserve exemplar to replace a colliding one".into(),
                    })
                } else {
                    Ok(e)
                }
            })
            .collect()
    }

    pub fn prompt_for(&self, target: &QAPair) -> Result<String, AnnotateError> {
        Ok(build_fewshot_prompt(self.exemplars_for(target)?, &target.question))
    }
}

/// `k` blocks of `"Q: {question}\nA: {answer}\n"` followed by
/// `"Q: {target}\nA:"`.
pub fn build_fewshot_prompt<'a>(
    exemplars: impl IntoIterator<Item = &'a QAPair>,
    target_question: &str,
) -> String {
    let mut out = String::new();
    for e in exemplars {
        out.push_str("Q: ");
        out.push_str(&e.question);
        out.push_str("\nA: ");
        out.push_str(e.gold());
        out.push('\n');
    }
    out.push_str("Q: ");
    out.push_str(target_question);
    out.push_str("\nA:");
    out
}

/// 64-bit seed derived from a base seed and labels via SHA-256.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn binomial_at_least(n: usize, k: usize, needed: usize) -> bool {
    // C(n, j) grows with j up to n/2, so partial products are lower bounds
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c >= needed as u128 {
            return true;
        }
    }
    c >= needed as u128
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < n - k + i {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Draws `n_exemplar_sets` distinct `k_shot`-sized sets from the relation's
/// dev examples. Deterministic in `(pool, relation_id, policy.rng_seed)`.
pub fn sample_exemplar_sets(
    dev_pool: &[QAPair],
    relation_id: &str,
    policy: &SamplingPolicy,
) -> Result<Vec<ExemplarSet>, AnnotateError> {
    policy.validate()?;
    let mut pool: Vec<&QAPair> = dev_pool.iter().filter(|p| p.relation_id == relation_id).collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    pool.dedup_by(|a, b| a.id == b.id);
    let (n, k, sets) = (pool.len(), policy.k_shot, policy.n_exemplar_sets);
    if n < k || !binomial_at_least(n, k, sets) {
        return Err(AnnotateError::InsufficientDevPool {
            relation_id: relation_id.to_string(),
            available: n,
            needed: format!("{sets} distinct {k}-shot sets"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(policy.rng_seed, &["exemplars", relation_id]));
    let chosen: Vec<Vec<usize>> = if !binomial_at_least(n, k, 10_001) {
        let mut all = combinations(n, k);
        all.shuffle(&mut rng);
        all.truncate(sets);
        all.into_iter()
            .map(|mut c| {
                c.shuffle(&mut rng);
                c
            })
            .collect()
    } else {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(sets);
        while out.len() < sets {
            let c = rand::seq::index::sample(&mut rng, n, k).into_vec();
            let mut key = c.clone();
            key.sort_unstable();
            if seen.insert(key) {
                out.push(c);
            }
        }
        out
    };
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(set_index, idx)| {
            let mut reserves: Vec<QAPair> = (0..n)
                .filter(|i| !idx.contains(i))
                .map(|i| pool[i].clone())
                .collect();
            reserves.shuffle(&mut rng);
            ExemplarSet {
                relation_id: relation_id.to_string(),
                set_index,
                exemplars: idx.iter().map(|&i| pool[i].clone()).collect(),
                reserves,
            }
        })
        .collect())
}

/// Correct-answer counts behind the greedy and sampled P(correct) estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PCorrectEstimate {
    pub greedy_correct: u32,
    pub greedy_total: u32,
    pub sampled_correct: u32,
    pub sampled_total: u32,
}

impl PCorrectEstimate {
    pub fn new(greedy_correct: u32, greedy_total: u32, sampled_correct: u32, sampled_total: u32) -> Self {
        assert!(greedy_total > 0 && greedy_correct <= greedy_total);
        assert!(sampled_total > 0 && sampled_correct <= sampled_total);
        Self { greedy_correct, greedy_total, sampled_correct, sampled_total }
    }

    pub fn greedy_fraction(&self) -> f64 {
        self.greedy_correct as f64 / self.greedy_total as f64
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.sampled_correct as f64 / self.sampled_total as f64
    }
}

/// Category boundaries are checked on the integer counts.
pub fn assign_category(estimate: &PCorrectEstimate) -> KnowledgeCategory {
    if estimate.greedy_correct == estimate.greedy_total {
        KnowledgeCategory::HighlyKnown
    } else if estimate.greedy_correct > 0 {
        KnowledgeCategory::MaybeKnown
    } else if estimate.sampled_correct > 0 {
        KnowledgeCategory::WeaklyKnown
    } else {
        KnowledgeCategory::Unknown
    }
}

fn requests_for(
    pair: &QAPair,
    sets: &[ExemplarSet],
    policy: &SamplingPolicy,
) -> Result<Vec<CompletionRequest>, AnnotateError> {
    let mut out = Vec::with_capacity(sets.len() * 2);
    for set in sets {
        let prompt = set.prompt_for(pair)?;
        out.push(CompletionRequest {
            prompt: prompt.clone(),
            temperature: 0.0,
            top_k: TopK::Unbounded,
            n_samples: 1,
            max_tokens: policy.max_tokens,
            seed: None,
        });
        out.push(CompletionRequest {
            prompt,
            temperature: policy.sample_temperature,
            top_k: TopK::Limited(policy.top_k),
            n_samples: policy.n_samples,
            max_tokens: policy.max_tokens,
            seed: Some(derive_seed(
                policy.rng_seed,
                &["sample", &pair.id, &set.set_index.to_string()],
            )),
        });
    }
    Ok(out)
}

fn tally(pair: &QAPair, results: &[Vec<String>], policy: &SamplingPolicy) -> PCorrectEstimate {
    let sets = results.len() / 2;
    let (mut g, mut s) = (0u32, 0u32);
    for chunk in results.chunks(2) {
        g += chunk[0].iter().filter(|t| exact_match(t.trim(), &pair.gold_answers)).count() as u32;
        s += chunk[1].iter().filter(|t| exact_match(t.trim(), &pair.gold_answers)).count() as u32;
    }
    PCorrectEstimate::new(g, sets as u32, s, sets as u32 * policy.n_samples)
}

/// One greedy and one `n_samples` sampled request per exemplar set, judged
/// by exact match against the pair's gold answers.
pub fn estimate_p_correct(
    pair: &QAPair,
    sets: &[ExemplarSet],
    policy: &SamplingPolicy,
    gateway: &Gateway,
) -> Result<PCorrectEstimate, AnnotateError> {
    policy.validate()?;
    if sets.len() != policy.n_exemplar_sets {
        return Err(AnnotateError::WrongSetCount { expected: policy.n_exemplar_sets, got: sets.len() });
    }
    let requests = requests_for(pair, sets, policy)?;
    let results = gateway
        .complete_batch(&requests)
        .map_err(|source| AnnotateError::Gateway { pair_id: pair.id.clone(), source })?;
    let mut texts = Vec::with_capacity(results.results.len());
    for r in results.results {
        texts.push(
            r.map_err(|source| AnnotateError::Gateway { pair_id: pair.id.clone(), source })?
                .texts,
        );
    }
    Ok(tally(pair, &texts, policy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub pair: QAPair,
    pub estimate: PCorrectEstimate,
    pub category: KnowledgeCategory,
    pub policy_fingerprint: String,
}

/// Digest of the sampling policy and endpoint profile that produced an
/// annotation.
pub fn policy_fingerprint(policy: &SamplingPolicy, profile: &EndpointProfile) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(policy).expect("policy serializes"));
    h.update([0u8]);
    h.update(serde_json::to_vec(profile).expect("profile serializes"));
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub total: usize,
    pub counts: BTreeMap<KnowledgeCategory, usize>,
}

impl CategoryCounts {
    pub fn add(&mut self, cat: KnowledgeCategory) {
        self.total += 1;
        *self.counts.entry(cat).or_default() += 1;
    }

    pub fn count(&self, cat: KnowledgeCategory) -> usize {
        self.counts.get(&cat).copied().unwrap_or(0)
    }

    /// Percentage rounded half-up to one decimal place.
    pub fn percent(&self, cat: KnowledgeCategory) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let tenths = (self.count(cat) as u128 * 2000 + self.total as u128) / (2 * self.total as u128);
        tenths as f64 / 10.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub overall: CategoryCounts,
    pub per_relation: BTreeMap<String, CategoryCounts>,
}

impl CategoryStats {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a AnnotatedExample>) -> Self {
        let mut s = Self::default();
        for e in examples {
            s.overall.add(e.category);
            s.per_relation.entry(e.pair.relation_id.clone()).or_default().add(e.category);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("relation      n  HighlyKnown  MaybeKnown  WeaklyKnown  Unknown\n");
        let mut row = |name: &str, c: &CategoryCounts| {
            out.push_str(&format!(
                "{:<8} {:>6}  {:>10.1}%  {:>9.1}%  {:>10.1}%  {:>6.1}%\n",
                name,
                c.total,
                c.percent(KnowledgeCategory::HighlyKnown),
                c.percent(KnowledgeCategory::MaybeKnown),
                c.percent(KnowledgeCategory::WeaklyKnown),
                c.percent(KnowledgeCategory::Unknown),
            ));
        };
        for (r, c) in &self.per_relation {
            row(r, c);
        }
        row("ALL", &self.overall);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRun {
    pub examples: Vec<AnnotatedExample>,
    pub stats: CategoryStats,
    pub policy_fingerprint: String,
}

impl AnnotationRun {
    pub fn category_map(&self) -> CategoryMap {
        category_map(&self.examples)
    }
}

pub fn category_map(examples: &[AnnotatedExample]) -> CategoryMap {
    examples.iter().map(|e| (e.pair.id.clone(), e.category)).collect()
}

/// Annotates every pair of `targets`, drawing exemplars from `dev_pool`.
///
/// All requests go through `gateway` (and its cache, if any), so an
/// interrupted run resumes without re-querying finished pairs. Output order
/// follows `targets`.
pub fn annotate_dataset(
    targets: &[QAPair],
    dev_pool: &[QAPair],
    policy: &SamplingPolicy,
    gateway: &Gateway,
) -> Result<AnnotationRun, AnnotateError> {
    policy.validate()?;
    let fingerprint = policy_fingerprint(policy, gateway.profile());
    let relations: BTreeSet<&str> = targets.iter().map(|p| p.relation_id.as_str()).collect();
    let mut sets_by_relation: HashMap<&str, Vec<ExemplarSet>> = HashMap::new();
    for r in relations {
        sets_by_relation.insert(r, sample_exemplar_sets(dev_pool, r, policy)?);
    }

    let per_pair = policy.n_exemplar_sets * 2;
    let mut requests = Vec::with_capacity(targets.len() * per_pair);
    for pair in targets {
        requests.extend(requests_for(pair, &sets_by_relation[pair.relation_id.as_str()], policy)?);
    }
    if requests.is_empty() {
        return Ok(AnnotationRun {
            examples: vec![],
            stats: CategoryStats::default(),
            policy_fingerprint: fingerprint,
        });
    }
    let outcome = gateway
        .complete_batch(&requests)
        .map_err(|source| AnnotateError::Gateway { pair_id: "-".into(), source })?;

    let mut examples = Vec::with_capacity(targets.len());
    let mut failed = Vec::new();
    let mut results = outcome.results.into_iter();
    for pair in targets {
        let mut texts = Vec::with_capacity(per_pair);
        let mut error = None;
        for r in results.by_ref().take(per_pair) {
            match r {
                Ok(c) => texts.push(c.texts),
                Err(e) => {
                    error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = error {
            failed.push((pair.id.clone(), e));
            continue;
        }
        let estimate = tally(pair, &texts, policy);
        examples.push(AnnotatedExample {
            pair: pair.clone(),
            estimate,
            category: assign_category(&estimate),
            policy_fingerprint: fingerprint.clone(),
        });
    }
    if !failed.is_empty() {
        return Err(AnnotateError::Incomplete { failed });
    }
    let stats = CategoryStats::from_examples(&examples);
    Ok(AnnotationRun { examples, stats, policy_fingerprint: fingerprint })
}

/// One line of the annotation manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub relation_id: String,
    pub question: String,
    pub gold_answer: String,
    pub greedy_correct: u32,
    pub greedy_total: u32,
    pub sampled_correct: u32,
    pub sampled_total: u32,
    pub category: KnowledgeCategory,
    pub policy_fingerprint: String,
}

impl From<&AnnotatedExample> for AnnotationRecord {
    fn from(e: &AnnotatedExample) -> Self {
        Self {
            id: e.pair.id.clone(),
            relation_id: e.pair.relation_id.clone(),
            question: e.pair.question.clone(),
            gold_answer: e.pair.gold().to_string(),
            greedy_correct: e.estimate.greedy_correct,
            greedy_total: e.estimate.greedy_total,
            sampled_correct: e.estimate.sampled_correct,
            sampled_total: e.estimate.sampled_total,
            category: e.category,
            policy_fingerprint: e.policy_fingerprint.clone(),
        }
    }
}

pub fn write_annotations(path: &Path, examples: &[AnnotatedExample]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, &AnnotationRecord::from(e))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_annotation_records(path: &Path) -> Result<Vec<AnnotationRecord>, AnnotateError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AnnotateError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Re-attaches manifest records to the corpus pairs they describe.
pub fn join_annotations(
    corpus: &[QAPair],
    records: &[AnnotationRecord],
) -> Result<Vec<AnnotatedExample>, AnnotateError> {
    let index: HashMap<&str, &QAPair> = corpus.iter().map(|p| (p.id.as_str(), p)).collect();
    records
        .iter()
        .map(|r| {
            let pair = index.get(r.id.as_str()).ok_or_else(|| AnnotateError::UnknownPair(r.id.clone()))?;
            Ok(AnnotatedExample {
                pair: (*pair).clone(),
                estimate: PCorrectEstimate {
                    greedy_correct: r.greedy_correct,
                    greedy_total: r.greedy_total,
                    sampled_correct: r.sampled_correct,
                    sampled_total: r.sampled_total,
                },
                category: r.category,
                policy_fingerprint: r.policy_fingerprint.clone(),
            })
        })
        .collect()
}
