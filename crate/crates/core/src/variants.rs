//! Controlled fine-tuning dataset variants.
//!
//! Every variant built for one target size shares the same per-relation
//! example counts, so variants differ only in their category composition.
//! Relation counts are apportioned from the per-relation minimum category
//! size (see [`compute_fixed_size`]) with largest-remainder rounding.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{derive_seed, AnnotatedExample};
use crate::eval::ABSTAIN;
use crate::types::{KnowledgeCategory, QAPair, Split};

#[derive(Debug, Error, PartialEq)]
pub enum VariantError {
    #[error("relation {relation_id}: need {needed} {category} examples, only {available} available")]
    InsufficientCategoryPool {
        relation_id: String,
        category: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid variant spec: {0}")]
    InvalidSpec(String),
    #[error("variant {0} is empty")]
    EmptyVariant(String),
    #[error("every relation has an empty category; no fixed size can be derived")]
    NoUsableRelation,
}

/// Largest-remainder (Hamilton) apportionment of `total` seats over integer
/// weights. Remainder ties go to the earlier index. All-zero weights yield
/// all-zero seats.
pub fn largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut seats: Vec<usize> = Vec::with_capacity(weights.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = total as u128 * w as u128;
        seats.push((num / sum) as usize);
        rems.push((num % sum, i));
    }
    let left = total - seats.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(left) {
        seats[i] += 1;
    }
    seats
}

/// Unknown-example quotas: each relation's exact share `pct% * size`
/// rounded down, then the leftover needed to reach `round(pct% * total)`
/// handed to the largest fractional parts.
///
/// `percent_bp` is the Unknown percentage in basis points (1% = 100).
pub fn unknown_quotas(relation_sizes: &[usize], percent_bp: u32) -> Vec<usize> {
    let total: u128 = relation_sizes.iter().map(|&n| n as u128).sum();
    let bp = percent_bp as u128;
    let target = ((total * bp + 5_000) / 10_000) as usize;
    let mut seats = Vec::with_capacity(relation_sizes.len());
    let mut rems = Vec::with_capacity(relation_sizes.len());
    for (i, &n) in relation_sizes.iter().enumerate() {
        let num = n as u128 * bp;
        seats.push((num / 10_000) as usize);
        rems.push((num % 10_000, i));
    }
    let left = target - seats.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(left) {
        seats[i] += 1;
    }
    seats
}

fn percent_to_bp(percent: f64) -> Result<u32, VariantError> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(VariantError::InvalidSpec(format!(
            "unknown_percent must be within 0..=100, got {percent}"
        )));
    }
    Ok((percent * 100.0).round() as u32)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationCategoryRow {
    pub counts: BTreeMap<KnowledgeCategory, usize>,
    pub min: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedSize {
    pub size: usize,
    pub per_relation: BTreeMap<String, RelationCategoryRow>,
    /// Relations contributing 0 because some category is empty.
    pub warnings: Vec<String>,
}

fn train_only(annotated: &[AnnotatedExample]) -> impl Iterator<Item = &AnnotatedExample> {
    annotated.iter().filter(|e| e.pair.split == Split::Train)
}

/// Sum over relations of the smallest category count in that relation.
pub fn compute_fixed_size(annotated_train: &[AnnotatedExample]) -> FixedSize {
    let mut per_relation: BTreeMap<String, RelationCategoryRow> = BTreeMap::new();
    for e in train_only(annotated_train) {
        *per_relation
            .entry(e.pair.relation_id.clone())
            .or_default()
            .counts
            .entry(e.category)
            .or_default() += 1;
    }
    let mut warnings = Vec::new();
    let mut size = 0;
    for (r, row) in per_relation.iter_mut() {
        row.min = KnowledgeCategory::ALL
            .iter()
            .map(|c| row.counts.get(c).copied().unwrap_or(0))
            .min()
            .unwrap_or(0);
        if row.min == 0 {
            let empty: Vec<&str> = KnowledgeCategory::ALL
                .iter()
                .filter(|c| row.counts.get(c).copied().unwrap_or(0) == 0)
                .map(|c| c.as_str())
                .collect();
            let msg = format!("relation {r} has no {} examples; it contributes 0", empty.join("/"));
            log::warn!("{msg}");
            warnings.push(msg);
        }
        size += row.min;
    }
    FixedSize { size, per_relation, warnings }
}

/// Per-relation example counts shared by every variant of `target_size`.
pub fn relation_marginals(
    annotated_train: &[AnnotatedExample],
    target_size: usize,
) -> Result<BTreeMap<String, usize>, VariantError> {
    if target_size == 0 {
        return Err(VariantError::InvalidSpec("target_size must be positive".into()));
    }
    let fixed = compute_fixed_size(annotated_train);
    if fixed.size == 0 {
        return Err(VariantError::NoUsableRelation);
    }
    let rels: Vec<&String> = fixed.per_relation.keys().collect();
    let weights: Vec<usize> = fixed.per_relation.values().map(|r| r.min).collect();
    let seats = largest_remainder(target_size, &weights);
    Ok(rels.into_iter().cloned().zip(seats).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnownMix {
    /// Known slots split over HighlyKnown/MaybeKnown/WeaklyKnown in
    /// proportion to their frequency within the relation.
    #[default]
    Natural,
    /// Known slots drawn uniformly from all Known examples of the relation.
    Pooled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationQuota {
    pub n_unknown: usize,
    pub n_known: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub name: String,
    pub unknown_percent: f64,
    pub target_size: usize,
    pub per_relation_quota: BTreeMap<String, RelationQuota>,
    pub seed: u64,
    pub known_category_mix: KnownMix,
}

pub fn mixture_name(unknown_percent: f64) -> String {
    if unknown_percent.fract() == 0.0 {
        format!("D_{}unk", unknown_percent as u64)
    } else {
        format!("D_{unknown_percent}unk")
    }
}

impl MixtureSpec {
    /// Quotas for a variant with `unknown_percent`% Unknown examples.
    pub fn plan(
        annotated_train: &[AnnotatedExample],
        unknown_percent: f64,
        target_size: usize,
        seed: u64,
        known_category_mix: KnownMix,
    ) -> Result<Self, VariantError> {
        let bp = percent_to_bp(unknown_percent)?;
        let marginals = relation_marginals(annotated_train, target_size)?;
        let sizes: Vec<usize> = marginals.values().copied().collect();
        let unknown = unknown_quotas(&sizes, bp);
        let per_relation_quota = marginals
            .iter()
            .zip(unknown)
            .map(|((r, &n), u)| (r.clone(), RelationQuota { n_unknown: u, n_known: n - u }))
            .collect();
        Ok(Self {
            name: mixture_name(unknown_percent),
            unknown_percent,
            target_size,
            per_relation_quota,
            seed,
            known_category_mix,
        })
    }

    pub fn total_unknown(&self) -> usize {
        self.per_relation_quota.values().map(|q| q.n_unknown).sum()
    }
}

/// How a variant was constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariantSpec {
    Mixture(MixtureSpec),
    SingleCategory {
        category: KnowledgeCategory,
        target_size: usize,
        per_relation: BTreeMap<String, usize>,
    },
    Natural {
        target_size: usize,
        per_relation: BTreeMap<String, BTreeMap<KnowledgeCategory, usize>>,
    },
    KnownAblation {
        source_name: String,
        source: Box<VariantSpec>,
    },
    Abstention {
        source_name: String,
        abstain_string: String,
        source: Box<VariantSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantExample {
    pub pair: QAPair,
    pub target_answer: String,
    pub category: KnowledgeCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetVariant {
    pub name: String,
    pub examples: Vec<VariantExample>,
    pub spec: VariantSpec,
    pub seed: u64,
}

impl DatasetVariant {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn count(&self, category: KnowledgeCategory) -> usize {
        self.examples.iter().filter(|e| e.category == category).count()
    }

    pub fn unknown_count(&self) -> usize {
        self.count(KnowledgeCategory::Unknown)
    }

    pub fn known_count(&self) -> usize {
        self.len() - self.unknown_count()
    }

    pub fn relation_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in &self.examples {
            *m.entry(e.pair.relation_id.clone()).or_default() += 1;
        }
        m
    }

    pub fn category_map(&self) -> crate::types::CategoryMap {
        self.examples.iter().map(|e| (e.pair.id.clone(), e.category)).collect()
    }

    /// Train pairs whose gold answer is replaced by the variant's target.
    pub fn target_pairs(&self) -> Vec<QAPair> {
        self.examples
            .iter()
            .map(|e| QAPair { gold_answers: vec![e.target_answer.clone()], ..e.pair.clone() })
            .collect()
    }
}

/// Annotated train examples grouped by relation and category, sorted by id.
type Pools<'a> = BTreeMap<&'a str, BTreeMap<KnowledgeCategory, Vec<&'a AnnotatedExample>>>;

fn pools(annotated: &[AnnotatedExample]) -> Pools<'_> {
    let mut p: Pools = BTreeMap::new();
    for e in train_only(annotated) {
        p.entry(e.pair.relation_id.as_str()).or_default().entry(e.category).or_default().push(e);
    }
    for cats in p.values_mut() {
        for v in cats.values_mut() {
            v.sort_by(|a, b| a.pair.id.cmp(&b.pair.id));
        }
    }
    p
}

/// Seeded draw of `n` items; the draw for a smaller `n` is a prefix of the
/// draw for a larger one.
fn draw<'a>(
    pool: &[&'a AnnotatedExample],
    n: usize,
    seed: u64,
    labels: &[&str],
    relation_id: &str,
    category_label: &str,
) -> Result<Vec<&'a AnnotatedExample>, VariantError> {
    if n > pool.len() {
        return Err(VariantError::InsufficientCategoryPool {
            relation_id: relation_id.to_string(),
            category: category_label.to_string(),
            needed: n,
            available: pool.len(),
        });
    }
    let mut v = pool.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, labels));
    v.shuffle(&mut rng);
    v.truncate(n);
    Ok(v)
}

fn to_examples(mut chosen: Vec<&AnnotatedExample>) -> Vec<VariantExample> {
    chosen.sort_by(|a, b| a.pair.id.cmp(&b.pair.id));
    chosen
        .into_iter()
        .map(|e| VariantExample {
            pair: e.pair.clone(),
            target_answer: e.pair.gold().to_string(),
            category: e.category,
        })
        .collect()
}

const KNOWN_CATEGORIES: [KnowledgeCategory; 3] = [
    KnowledgeCategory::HighlyKnown,
    KnowledgeCategory::MaybeKnown,
    KnowledgeCategory::WeaklyKnown,
];

/// Mixture of Unknown and Known train examples following `spec`'s quotas.
pub fn build_mixture(
    annotated_train: &[AnnotatedExample],
    spec: &MixtureSpec,
) -> Result<DatasetVariant, VariantError> {
    percent_to_bp(spec.unknown_percent)?;
    let total: usize = spec.per_relation_quota.values().map(|q| q.n_unknown + q.n_known).sum();
    if total != spec.target_size {
        return Err(VariantError::InvalidSpec(format!(
            "quotas sum to {total}, target_size is {}",
            spec.target_size
        )));
    }
    let pools = pools(annotated_train);
    let empty = BTreeMap::new();
    let mut chosen = Vec::with_capacity(spec.target_size);
    for (rel, quota) in &spec.per_relation_quota {
        let cats = pools.get(rel.as_str()).unwrap_or(&empty);
        let get = |c: KnowledgeCategory| cats.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        chosen.extend(draw(
            get(KnowledgeCategory::Unknown),
            quota.n_unknown,
            spec.seed,
            &["variant", rel, "Unknown"],
            rel,
            "Unknown",
        )?);
        match spec.known_category_mix {
            KnownMix::Natural => {
                let available: Vec<usize> = KNOWN_CATEGORIES.iter().map(|&c| get(c).len()).collect();
                let total_known: usize = available.iter().sum();
                if quota.n_known > total_known {
                    return Err(VariantError::InsufficientCategoryPool {
                        relation_id: rel.clone(),
                        category: "Known".into(),
                        needed: quota.n_known,
                        available: total_known,
                    });
                }
                let split = largest_remainder(quota.n_known, &available);
                for (&c, n) in KNOWN_CATEGORIES.iter().zip(split) {
                    chosen.extend(draw(get(c), n, spec.seed, &["variant", rel, c.as_str()], rel, c.as_str())?);
                }
            }
            KnownMix::Pooled => {
                let mut known: Vec<&AnnotatedExample> =
                    KNOWN_CATEGORIES.iter().flat_map(|&c| get(c).iter().copied()).collect();
                known.sort_by(|a, b| a.pair.id.cmp(&b.pair.id));
                chosen.extend(draw(&known, quota.n_known, spec.seed, &["variant", rel, "Known"], rel, "Known")?);
            }
        }
    }
    Ok(DatasetVariant {
        name: spec.name.clone(),
        examples: to_examples(chosen),
        spec: VariantSpec::Mixture(spec.clone()),
        seed: spec.seed,
    })
}

/// `target_size` examples, all of `category`, with the shared relation
/// marginals.
pub fn build_single_category(
    annotated_train: &[AnnotatedExample],
    category: KnowledgeCategory,
    target_size: usize,
    seed: u64,
) -> Result<DatasetVariant, VariantError> {
    let marginals = relation_marginals(annotated_train, target_size)?;
    let pools = pools(annotated_train);
    let mut chosen = Vec::with_capacity(target_size);
    for (rel, &n) in &marginals {
        let pool = pools.get(rel.as_str()).and_then(|c| c.get(&category)).map(Vec::as_slice).unwrap_or(&[]);
        chosen.extend(draw(pool, n, seed, &["variant", rel, category.as_str()], rel, category.as_str())?);
    }
    Ok(DatasetVariant {
        name: format!("D_{category}"),
        examples: to_examples(chosen),
        spec: VariantSpec::SingleCategory { category, target_size, per_relation: marginals },
        seed,
    })
}

/// `target_size` examples whose per-relation category mix follows the
/// natural category frequencies of that relation.
pub fn build_natural(
    annotated_train: &[AnnotatedExample],
    target_size: usize,
    seed: u64,
) -> Result<DatasetVariant, VariantError> {
    let marginals = relation_marginals(annotated_train, target_size)?;
    let pools = pools(annotated_train);
    let empty = BTreeMap::new();
    let mut chosen = Vec::with_capacity(target_size);
    let mut per_relation = BTreeMap::new();
    for (rel, &n) in &marginals {
        let cats = pools.get(rel.as_str()).unwrap_or(&empty);
        let available: Vec<usize> =
            KnowledgeCategory::ALL.iter().map(|c| cats.get(c).map_or(0, Vec::len)).collect();
        let split = largest_remainder(n, &available);
        let mut row = BTreeMap::new();
        for (&c, k) in KnowledgeCategory::ALL.iter().zip(split) {
            let pool = cats.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            chosen.extend(draw(pool, k, seed, &["variant", rel, c.as_str()], rel, c.as_str())?);
            row.insert(c, k);
        }
        per_relation.insert(rel.clone(), row);
    }
    Ok(DatasetVariant {
        name: "D_Natural".into(),
        examples: to_examples(chosen),
        spec: VariantSpec::Natural { target_size, per_relation },
        seed,
    })
}

/// The variant without its Unknown examples. An empty result is refused.
pub fn build_known_ablation(variant: &DatasetVariant) -> Result<DatasetVariant, VariantError> {
    let name = format!("{}_Known", variant.name);
    let examples: Vec<VariantExample> =
        variant.examples.iter().filter(|e| e.category.is_known()).cloned().collect();
    if examples.is_empty() {
        return Err(VariantError::EmptyVariant(name));
    }
    Ok(DatasetVariant {
        name,
        examples,
        spec: VariantSpec::KnownAblation {
            source_name: variant.name.clone(),
            source: Box::new(variant.spec.clone()),
        },
        seed: variant.seed,
    })
}

/// Relabels every Unknown example's target with `abstain_string`
/// (default "I don't know").
pub fn build_idk_variant(variant: &DatasetVariant, abstain_string: Option<&str>) -> DatasetVariant {
    let abstain = abstain_string.unwrap_or(ABSTAIN);
    let examples = variant
        .examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if e.category == KnowledgeCategory::Unknown {
                e.target_answer = abstain.to_string();
            }
            e
        })
        .collect();
    DatasetVariant {
        name: format!("{}_IDK", variant.name),
        examples,
        spec: VariantSpec::Abstention {
            source_name: variant.name.clone(),
            abstain_string: abstain.to_string(),
            source: Box::new(variant.spec.clone()),
        },
        seed: variant.seed,
    }
}
