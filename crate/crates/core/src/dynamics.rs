//! Fine-tuning dynamics from per-epoch prediction snapshots.
//!
//! Snapshots live at `{run_dir}/{variant}/epoch_{N}/{split}.jsonl`, one
//! [`PredictionRecord`] per line. A train example counts as fitted at an
//! epoch when its prediction exactly matches the variant's target answer.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, judge, read_predictions, write_predictions, EvalError, PredictionRecord, Tally};
use crate::regression::FitPoint;
use crate::types::{KnowledgeCategory, QAPair, Split};
use crate::variants::DatasetVariant;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("no epoch_N directories under {0}")]
    NoSnapshots(String),
    #[error("epoch {0} is missing")]
    MissingEpoch(u32),
    #[error("epoch {epoch}, {split}: duplicate prediction for {id}")]
    DuplicateId { epoch: u32, split: Split, id: String },
    #[error("epoch {epoch}, {split}: example {id} is not in the corpus")]
    UnknownExample { epoch: u32, split: Split, id: String },
    #[error("epoch {epoch}: required file {file} is missing")]
    MissingSplit { epoch: u32, file: String },
    #[error("epoch {epoch}, {split}: {source}")]
    Eval { epoch: u32, split: Split, source: EvalError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: u32,
    pub variant_name: String,
    pub predictions: BTreeMap<Split, Vec<PredictionRecord>>,
}

impl EpochSnapshot {
    pub fn split(&self, split: Split) -> Option<&[PredictionRecord]> {
        self.predictions.get(&split).map(Vec::as_slice)
    }
}

pub fn snapshot_path(run_dir: &Path, variant_name: &str, epoch: u32, split: Split) -> PathBuf {
    run_dir.join(variant_name).join(format!("epoch_{epoch}")).join(format!("{}.jsonl", split.as_str()))
}

pub fn write_snapshot(run_dir: &Path, snapshot: &EpochSnapshot) -> std::io::Result<()> {
    for (split, records) in &snapshot.predictions {
        let path = snapshot_path(run_dir, &snapshot.variant_name, snapshot.epoch, *split);
        std::fs::create_dir_all(path.parent().expect("snapshot path has a parent"))?;
        write_predictions(&path, records)?;
    }
    Ok(())
}

/// Reads and validates every epoch of `variant_name` under `run_dir`.
/// Epochs must form 1..=E; train and dev files are required.
pub fn ingest_snapshots(
    run_dir: &Path,
    variant_name: &str,
    corpus: &[QAPair],
) -> Result<Vec<EpochSnapshot>, DynamicsError> {
    let dir = run_dir.join(variant_name);
    let mut epochs: Vec<u32> = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            if let Some(n) = entry.file_name().to_str().and_then(|s| s.strip_prefix("epoch_")) {
                if let Ok(n) = n.parse::<u32>() {
                    epochs.push(n);
                }
            }
        }
    }
    if epochs.is_empty() {
        return Err(DynamicsError::NoSnapshots(dir.display().to_string()));
    }
    epochs.sort_unstable();
    let max = *epochs.last().expect("non-empty");
    let present: HashSet<u32> = epochs.iter().copied().collect();
    if let Some(gap) = (1..=max).find(|e| !present.contains(e)) {
        return Err(DynamicsError::MissingEpoch(gap));
    }
    let known: HashSet<&str> = corpus.iter().map(|p| p.id.as_str()).collect();
    let mut out = Vec::with_capacity(max as usize);
    for epoch in 1..=max {
        let mut predictions = BTreeMap::new();
        for split in Split::ALL {
            let path = snapshot_path(run_dir, variant_name, epoch, split);
            if !path.exists() {
                if matches!(split, Split::Train | Split::Dev) {
                    return Err(DynamicsError::MissingSplit { epoch, file: path.display().to_string() });
                }
                continue;
            }
            let records = read_predictions(&path).map_err(|source| DynamicsError::Eval { epoch, split, source })?;
            let mut seen = HashSet::with_capacity(records.len());
            for r in &records {
                if !known.contains(r.example_id.as_str()) {
                    return Err(DynamicsError::UnknownExample { epoch, split, id: r.example_id.clone() });
                }
                if !seen.insert(r.example_id.as_str()) {
                    return Err(DynamicsError::DuplicateId { epoch, split, id: r.example_id.clone() });
                }
            }
            predictions.insert(split, records);
        }
        out.push(EpochSnapshot { epoch, variant_name: variant_name.to_string(), predictions });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: u32,
    /// Fitted fraction per category present in the variant.
    pub train_accuracy_per_category: BTreeMap<KnowledgeCategory, f64>,
    pub fitted_per_category: BTreeMap<KnowledgeCategory, usize>,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub ood_test_accuracy: Option<f64>,
    pub n_kn: usize,
    pub n_unk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSeries {
    pub variant_name: String,
    pub d_size: usize,
    pub known_size: usize,
    pub unknown_size: usize,
    pub category_sizes: BTreeMap<KnowledgeCategory, usize>,
    pub epochs: Vec<EpochPoint>,
}

impl DynamicsSeries {
    pub fn point(&self, epoch: u32) -> Option<&EpochPoint> {
        self.epochs.iter().find(|p| p.epoch == epoch)
    }

    pub fn known_fitted_fraction(&self, p: &EpochPoint) -> Option<f64> {
        (self.known_size > 0).then(|| p.n_kn as f64 / self.known_size as f64)
    }

    pub fn unknown_fitted_fraction(&self, p: &EpochPoint) -> Option<f64> {
        (self.unknown_size > 0).then(|| p.n_unk as f64 / self.unknown_size as f64)
    }
}

/// Evaluation splits the series is scored against.
#[derive(Debug, Clone, Default)]
pub struct EvalSplits {
    pub dev: Vec<QAPair>,
    pub test: Vec<QAPair>,
    pub ood_test: Vec<QAPair>,
}

impl EvalSplits {
    pub fn from_manifest(manifest: &crate::corpus::CorpusManifest) -> Self {
        use crate::corpus::RelationRole;
        Self {
            dev: manifest.split_with_role(Split::Dev, RelationRole::InDistribution),
            test: manifest.split(Split::Test),
            ood_test: manifest.split(Split::OodTest),
        }
    }
}

fn accuracy(
    snap: &EpochSnapshot,
    split: Split,
    pairs: &[QAPair],
) -> Result<Option<f64>, DynamicsError> {
    match (snap.split(split), pairs.is_empty()) {
        (Some(preds), false) => evaluate(preds, pairs, None, None)
            .map(|r| Some(r.overall_accuracy))
            .map_err(|source| DynamicsError::Eval { epoch: snap.epoch, split, source }),
        _ => Ok(None),
    }
}

pub fn compute_series(
    snapshots: &[EpochSnapshot],
    variant: &DatasetVariant,
    splits: &EvalSplits,
) -> Result<DynamicsSeries, DynamicsError> {
    let train_pairs = variant.target_pairs();
    let categories = variant.category_map();
    let mut category_sizes = BTreeMap::new();
    for e in &variant.examples {
        *category_sizes.entry(e.category).or_insert(0) += 1;
    }
    let mut epochs = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let train = snap.split(Split::Train).unwrap_or(&[]);
        let judgements = judge(train, &train_pairs, None)
            .map_err(|source| DynamicsError::Eval { epoch: snap.epoch, split: Split::Train, source })?;
        let mut per_cat: BTreeMap<KnowledgeCategory, Tally> = BTreeMap::new();
        let mut overall = Tally::default();
        for j in &judgements {
            per_cat.entry(categories[&j.example_id]).or_default().add(j.correct);
            overall.add(j.correct);
        }
        let n_unk = per_cat.get(&KnowledgeCategory::Unknown).map_or(0, |t| t.correct);
        let dev_accuracy = accuracy(snap, Split::Dev, &splits.dev)?.unwrap_or(0.0);
        epochs.push(EpochPoint {
            epoch: snap.epoch,
            train_accuracy_per_category: per_cat.iter().map(|(c, t)| (*c, t.accuracy())).collect(),
            fitted_per_category: per_cat.iter().map(|(c, t)| (*c, t.correct)).collect(),
            train_accuracy: overall.accuracy(),
            dev_accuracy,
            test_accuracy: accuracy(snap, Split::Test, &splits.test)?,
            ood_test_accuracy: accuracy(snap, Split::OodTest, &splits.ood_test)?,
            n_kn: overall.correct - n_unk,
            n_unk,
        });
    }
    let unknown_size = category_sizes.get(&KnowledgeCategory::Unknown).copied().unwrap_or(0);
    Ok(DynamicsSeries {
        variant_name: variant.name.clone(),
        d_size: variant.len(),
        known_size: variant.len() - unknown_size,
        unknown_size,
        category_sizes,
        epochs,
    })
}

/// Earliest epoch with the highest dev accuracy.
pub fn detect_early_stop(series: &DynamicsSeries) -> Option<u32> {
    let mut best: Option<&EpochPoint> = None;
    for p in &series.epochs {
        if best.is_none_or(|b| p.dev_accuracy > b.dev_accuracy) {
            best = Some(p);
        }
    }
    best.map(|p| p.epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTarget {
    #[default]
    Test,
    OodTest,
}

/// One fit point per epoch of every series that has an accuracy on `target`.
pub fn regression_points(series: &[DynamicsSeries], target: RegressionTarget) -> Vec<FitPoint> {
    series
        .iter()
        .flat_map(|s| {
            s.epochs.iter().filter_map(move |p| {
                let acc = match target {
                    RegressionTarget::Test => p.test_accuracy,
                    RegressionTarget::OodTest => p.ood_test_accuracy,
                }?;
                Some(FitPoint {
                    accuracy: acc,
                    n_kn: p.n_kn as f64,
                    n_unk: p.n_unk as f64,
                    d_size: s.d_size as f64,
                })
            })
        })
        .collect()
}
