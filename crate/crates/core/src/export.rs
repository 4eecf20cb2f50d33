//! Trainer-ready JSONL files for a dataset variant.
//!
//! Layout of an export directory:
//!
//! ```text
//! train.jsonl      {"id", "input", "target"} per variant example
//! dev.jsonl        in-distribution dev pairs, gold targets
//! test.jsonl       in-distribution test pairs
//! ood_test.jsonl   held-out relation test pairs
//! metadata.json    variant spec, seed, hyperparameters, per-example category
//! ```
//!
//! Empty evaluation splits are not written.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusManifest, RelationRole};
use crate::types::{KnowledgeCategory, QAPair, Split};
use crate::variants::{DatasetVariant, VariantExample, VariantSpec};

pub const INSTRUCTION: &str = "Answer the following question.";

pub fn trainer_input(question: &str) -> String {
    format!("{INSTRUCTION}\n{question}")
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("variant {0} is empty; refusing to write an empty trainer file")]
    EmptyVariant(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {message}")]
    Inconsistent { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerRecord {
    pub id: String,
    pub input: String,
    pub target: String,
}

impl TrainerRecord {
    pub fn new(id: &str, question: &str, target: &str) -> Self {
        Self { id: id.to_string(), input: trainer_input(question), target: target.to_string() }
    }
}

/// Settings for the external trainer. Recorded, not executed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerHyperparameters {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub dropout: f64,
    pub epochs: u32,
    pub eval_every_epochs: u32,
    pub early_stopping_split: String,
}

impl Default for TrainerHyperparameters {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 128,
            dropout: 0.05,
            epochs: 50,
            eval_every_epochs: 1,
            early_stopping_split: "dev".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub name: String,
    pub seed: u64,
    pub spec: VariantSpec,
    pub hyperparameters: TrainerHyperparameters,
    pub n_examples: usize,
    pub category_counts: std::collections::BTreeMap<KnowledgeCategory, usize>,
    pub examples: Vec<VariantExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedFiles {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn eval_records(pairs: &[QAPair]) -> Vec<TrainerRecord> {
    let mut pairs: Vec<&QAPair> = pairs.iter().collect();
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    pairs.iter().map(|p| TrainerRecord::new(&p.id, &p.question, p.gold())).collect()
}

/// Writes the trainer files for `variant` plus the evaluation splits of
/// `manifest` into `out_dir`.
pub fn export_trainer_files(
    variant: &DatasetVariant,
    manifest: &CorpusManifest,
    hyperparameters: &TrainerHyperparameters,
    out_dir: &Path,
) -> Result<ExportedFiles, ExportError> {
    if variant.is_empty() {
        return Err(ExportError::EmptyVariant(variant.name.clone()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let train: Vec<TrainerRecord> = variant
        .examples
        .iter()
        .map(|e| TrainerRecord::new(&e.pair.id, &e.pair.question, &e.target_answer))
        .collect();
    let path = out_dir.join("train.jsonl");
    write_jsonl(&path, &train)?;
    files.push(path);

    let splits = [
        ("dev.jsonl", manifest.split_with_role(Split::Dev, RelationRole::InDistribution)),
        ("test.jsonl", manifest.split(Split::Test)),
        ("ood_test.jsonl", manifest.split(Split::OodTest)),
    ];
    for (file, pairs) in splits {
        if pairs.is_empty() {
            continue;
        }
        let path = out_dir.join(file);
        write_jsonl(&path, &eval_records(&pairs))?;
        files.push(path);
    }

    let mut category_counts = std::collections::BTreeMap::new();
    for e in &variant.examples {
        *category_counts.entry(e.category).or_insert(0) += 1;
    }
    let meta = ExportMetadata {
        name: variant.name.clone(),
        seed: variant.seed,
        spec: variant.spec.clone(),
        hyperparameters: hyperparameters.clone(),
        n_examples: variant.len(),
        category_counts,
        examples: variant.examples.clone(),
    };
    let path = out_dir.join("metadata.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta).map_err(std::io::Error::from)? + "\n")?;
    files.push(path);

    Ok(ExportedFiles { dir: out_dir.to_path_buf(), files })
}

pub fn read_trainer_records(path: &Path) -> Result<Vec<TrainerRecord>, ExportError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ExportError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Rebuilds the variant from an export directory, checking that
/// `train.jsonl` agrees with the metadata sidecar.
pub fn import_trainer_files(dir: &Path) -> Result<(DatasetVariant, ExportMetadata), ExportError> {
    let meta_path = dir.join("metadata.json");
    let text = std::fs::read_to_string(&meta_path)?;
    let meta: ExportMetadata = serde_json::from_str(&text).map_err(|e| ExportError::Parse {
        path: meta_path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let train_path = dir.join("train.jsonl");
    let train = read_trainer_records(&train_path)?;
    let inconsistent = |message: String| ExportError::Inconsistent {
        path: train_path.display().to_string(),
        message,
    };
    if train.len() != meta.examples.len() {
        return Err(inconsistent(format!(
            "{} records, metadata lists {}",
            train.len(),
            meta.examples.len()
        )));
    }
    for (rec, ex) in train.iter().zip(&meta.examples) {
        let expected = TrainerRecord::new(&ex.pair.id, &ex.pair.question, &ex.target_answer);
        if *rec != expected {
            return Err(inconsistent(format!("record {} differs from metadata", rec.id)));
        }
    }
    let variant = DatasetVariant {
        name: meta.name.clone(),
        examples: meta.examples.clone(),
        spec: meta.spec.clone(),
        seed: meta.seed,
    };
    Ok((variant, meta))
}
