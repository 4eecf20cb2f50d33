//! Raw corpus import and preprocessing.
//!
//! The raw layout follows EntityQuestions: `{root}/{split}/{relation}.{split}.json`
//! where `split` is one of `train`, `dev`, `test` and each file holds a JSON
//! array of `{question, answers, subject?}` records.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{QAPair, Split};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("relation {relation_id} (from {file}) is not in the relation config")]
    UnknownRelation { relation_id: String, file: String },
    #[error("invalid relation config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationRole {
    InDistribution,
    OutOfDistribution,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub relation_id: String,
    /// Question pattern with one `[E]` entity slot.
    pub question_template: String,
    pub role: RelationRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion_reason: Option<String>,
}

impl RelationSpec {
    /// The entity filling the template's `[E]` slot in `question`.
    pub fn extract_subject(&self, question: &str) -> Option<String> {
        let (prefix, suffix) = self.question_template.split_once("[E]")?;
        let rest = question.strip_prefix(prefix)?;
        let subject = rest.strip_suffix(suffix)?;
        (!subject.trim().is_empty()).then(|| subject.trim().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationConfig(pub Vec<RelationSpec>);

const ENTITY_QUESTIONS_RELATIONS: &str = include_str!("../fixtures/relations.json");

impl RelationConfig {
    /// 12 training relations, 7 held-out relations and the 5 relations
    /// dropped for overlapping with training relations.
    pub fn entity_questions() -> Self {
        Self::from_json(ENTITY_QUESTIONS_RELATIONS).expect("bundled relation config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            file: "<relation config>".into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            file: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = BTreeSet::new();
        for r in &self.0 {
            if !seen.insert(&r.relation_id) {
                return Err(CorpusError::Config(format!("duplicate relation {}", r.relation_id)));
            }
            if r.question_template.matches("[E]").count() != 1 {
                return Err(CorpusError::Config(format!(
                    "template of {} must contain exactly one [E] slot",
                    r.relation_id
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, relation_id: &str) -> Option<&RelationSpec> {
        self.0.iter().find(|r| r.relation_id == relation_id)
    }

    pub fn with_role(&self, role: RelationRole) -> Vec<&RelationSpec> {
        self.0.iter().filter(|r| r.role == role).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Rule name -> number of pairs removed by it.
    pub filter_log: BTreeMap<String, usize>,
}

impl Provenance {
    fn log(&mut self, rule: impl Into<String>, n: usize) {
        *self.filter_log.entry(rule.into()).or_default() += n;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub pairs: Vec<QAPair>,
    pub relation_specs: Vec<RelationSpec>,
    pub provenance: Provenance,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    subject: Option<String>,
}

/// Reads every per-relation file under `root`.
///
/// Excluded relations are dropped and logged. Held-out relations keep only
/// their dev pairs (as few-shot material) and their test pairs, which are
/// re-tagged [`Split::OodTest`].
pub fn import_raw(root: &Path, config: &RelationConfig) -> Result<CorpusManifest, CorpusError> {
    config.validate()?;
    let mut provenance = Provenance { source: root.display().to_string(), ..Default::default() };
    let mut pairs = Vec::new();
    for (dir_name, split) in [("train", Split::Train), ("dev", Split::Dev), ("test", Split::Test)] {
        let dir = root.join(dir_name);
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<_> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for file in files {
            let file_name = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let relation_id = file_name.split('.').next().unwrap_or_default().to_string();
            let spec = config.get(&relation_id).ok_or_else(|| CorpusError::UnknownRelation {
                relation_id: relation_id.clone(),
                file: file.display().to_string(),
            })?;
            let text = std::fs::read_to_string(&file)?;
            let records: Vec<RawRecord> = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
                file: file.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
            let effective_split = match (spec.role, split) {
                (RelationRole::Excluded, _) => {
                    provenance.log(format!("excluded-relation:{relation_id}"), records.len());
                    continue;
                }
                (RelationRole::OutOfDistribution, Split::Train) => {
                    provenance.log(format!("ood-train-dropped:{relation_id}"), records.len());
                    continue;
                }
                (RelationRole::OutOfDistribution, Split::Test) => Split::OodTest,
                (_, s) => s,
            };
            for (i, rec) in records.into_iter().enumerate() {
                let subject = match rec.subject {
                    Some(s) => s,
                    None => spec.extract_subject(&rec.question).ok_or_else(|| CorpusError::Parse {
                        file: file.display().to_string(),
                        line: 0,
                        message: format!(
                            "record {i}: question {:?} does not match template {:?}",
                            rec.question, spec.question_template
                        ),
                    })?,
                };
                pairs.push(QAPair {
                    id: format!("{relation_id}-{dir_name}-{i:05}"),
                    relation_id: relation_id.clone(),
                    subject,
                    question: rec.question,
                    gold_answers: rec.answers,
                    split: effective_split,
                });
            }
        }
    }
    Ok(CorpusManifest { pairs, relation_specs: config.0.clone(), provenance })
}

/// Which entity strings of a train pair must not occur in the test splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    /// Subject and answer of a train pair checked against every test
    /// subject and answer.
    #[default]
    SubjectsAndObjects,
    /// Train subjects checked against test subjects only.
    SubjectsOnly,
}

/// Drops multi-answer pairs everywhere, then drops train pairs whose subject
/// or answer (trimmed) appears as a subject or answer of any test pair.
pub fn apply_filters(manifest: CorpusManifest) -> CorpusManifest {
    apply_filters_with(manifest, OverlapRule::SubjectsAndObjects)
}

pub fn apply_filters_with(mut manifest: CorpusManifest, rule: OverlapRule) -> CorpusManifest {
    let before = manifest.pairs.len();
    manifest.pairs.retain(|p| p.gold_answers.len() == 1);
    let removed = before - manifest.pairs.len();
    manifest.provenance.log("multi-answer", removed);

    let entities = |p: &QAPair| -> Vec<String> {
        let mut v = vec![p.subject.trim().to_string()];
        if rule == OverlapRule::SubjectsAndObjects {
            v.extend(p.gold_answers.iter().map(|a| a.trim().to_string()));
        }
        v
    };
    let test_entities: BTreeSet<String> =
        manifest.pairs.iter().filter(|p| p.split.is_test()).flat_map(entities).collect();
    let overlapping: BTreeSet<String> = manifest
        .pairs
        .iter()
        .filter(|p| p.split == Split::Train && entities(p).iter().any(|e| test_entities.contains(e)))
        .map(|p| p.id.clone())
        .collect();
    manifest.pairs.retain(|p| !overlapping.contains(&p.id));
    manifest.provenance.log("train-test-entity-overlap", overlapping.len());
    manifest
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> Vec<QAPair> {
        self.pairs.iter().filter(|p| p.split == split).cloned().collect()
    }

    /// Pairs of `split` restricted to relations with `role`.
    pub fn split_with_role(&self, split: Split, role: RelationRole) -> Vec<QAPair> {
        let rels: BTreeSet<&str> = self
            .relation_specs
            .iter()
            .filter(|r| r.role == role)
            .map(|r| r.relation_id.as_str())
            .collect();
        self.pairs
            .iter()
            .filter(|p| p.split == split && rels.contains(p.relation_id.as_str()))
            .cloned()
            .collect()
    }

    /// Violated corpus invariants, empty when the manifest is clean.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut ids = BTreeSet::new();
        for p in &self.pairs {
            if !ids.insert(&p.id) {
                problems.push(format!("duplicate id {}", p.id));
            }
            if p.gold_answers.len() != 1 {
                problems.push(format!("{} has {} gold answers", p.id, p.gold_answers.len()));
            }
            if p.question.is_empty() {
                problems.push(format!("{} has an empty question", p.id));
            }
        }
        let entities = |pred: fn(Split) -> bool| -> BTreeSet<&str> {
            self.pairs
                .iter()
                .filter(|p| pred(p.split))
                .flat_map(|p| std::iter::once(p.subject.trim()).chain(p.gold_answers.iter().map(|a| a.trim())))
                .collect()
        };
        let train = entities(|s| s == Split::Train);
        let test = entities(Split::is_test);
        for shared in train.intersection(&test) {
            problems.push(format!("entity {shared:?} appears in train and test"));
        }
        problems
    }

    /// Writes `corpus.jsonl` (one pair per line) and `corpus_manifest.json`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?);
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let meta = serde_json::json!({
            "relation_specs": self.relation_specs,
            "provenance": self.provenance,
            "n_pairs": self.pairs.len(),
        });
        std::fs::write(
            dir.join("corpus_manifest.json"),
            serde_json::to_string_pretty(&meta)? + "\n",
        )
    }

    pub fn read(dir: &Path) -> Result<Self, CorpusError> {
        let path = dir.join("corpus.jsonl");
        let file = std::fs::File::open(&path)?;
        let mut pairs = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        #[derive(Deserialize)]
        struct Meta {
            relation_specs: Vec<RelationSpec>,
            provenance: Provenance,
        }
        let meta_path = dir.join("corpus_manifest.json");
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?).map_err(|e| {
            CorpusError::Parse { file: meta_path.display().to_string(), line: e.line(), message: e.to_string() }
        })?;
        Ok(Self { pairs, relation_specs: meta.relation_specs, provenance: meta.provenance })
    }
}
