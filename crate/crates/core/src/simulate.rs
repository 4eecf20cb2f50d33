//! A stand-in fine-tuning run that writes prediction snapshots.
//!
//! The simulated learner fits each train example once and keeps it fitted.
//! After `e` epochs a category with per-epoch fit probability `p` has
//! `floor(size * (1 - (1 - p)^e))` fitted examples, taken as a prefix of a
//! seeded permutation. Held-out accuracy is a linear function of the
//! fitted Known and Unknown fractions of the dataset, realized by comparing
//! one fixed uniform draw per example against that target.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::derive_seed;
use crate::dynamics::{write_snapshot, EpochSnapshot, EvalSplits};
use crate::eval::PredictionRecord;
use crate::types::{QAPair, Split};
use crate::variants::DatasetVariant;

/// Held-out accuracy `base + coef_kn * N_kn/|D| + coef_unk * N_unk/|D|`,
/// clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyModel {
    pub base: f64,
    pub coef_kn: f64,
    pub coef_unk: f64,
}

impl AccuracyModel {
    pub fn target(&self, frac_kn: f64, frac_unk: f64) -> f64 {
        (self.base + self.coef_kn * frac_kn + self.coef_unk * frac_unk).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub epochs: u32,
    pub p_fit_known: f64,
    pub p_fit_unknown: f64,
    pub test: AccuracyModel,
    pub ood_test: AccuracyModel,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            p_fit_known: 0.5,
            p_fit_unknown: 0.1,
            test: AccuracyModel { base: 0.35, coef_kn: 0.15, coef_unk: -0.25 },
            ood_test: AccuracyModel { base: 0.30, coef_kn: 0.10, coef_unk: -0.20 },
            seed: 0,
        }
    }
}

const WRONG: &str = "<unfitted>";

pub fn fitted_count(size: usize, p: f64, epoch: u32) -> usize {
    let frac = 1.0 - (1.0 - p).powi(epoch as i32);
    ((size as f64) * frac).floor().min(size as f64) as usize
}

fn uniform_for(seed: u64, variant: &str, id: &str) -> f64 {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &["heldout", variant, id])).gen::<f64>()
}

fn heldout_predictions(pairs: &[QAPair], acc: f64, seed: u64, variant: &str, tag: &str) -> Vec<PredictionRecord> {
    pairs
        .iter()
        .map(|p| {
            let correct = uniform_for(seed, variant, &p.id) < acc;
            let mut r = PredictionRecord::new(p.id.clone(), if correct { p.gold() } else { WRONG });
            r.split = Some(p.split);
            r.source_tag = tag.to_string();
            r
        })
        .collect()
}

/// Generates every epoch snapshot of one simulated run.
pub fn simulate_run(variant: &DatasetVariant, splits: &EvalSplits, cfg: &LearnerConfig) -> Vec<EpochSnapshot> {
    let d = variant.len().max(1) as f64;
    let mut known: Vec<usize> = Vec::new();
    let mut unknown: Vec<usize> = Vec::new();
    for (i, e) in variant.examples.iter().enumerate() {
        if e.category.is_known() { known.push(i) } else { unknown.push(i) }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["fit-order", &variant.name]));
    known.shuffle(&mut rng);
    unknown.shuffle(&mut rng);

    (1..=cfg.epochs)
        .map(|epoch| {
            let n_kn = fitted_count(known.len(), cfg.p_fit_known, epoch);
            let n_unk = fitted_count(unknown.len(), cfg.p_fit_unknown, epoch);
            let mut fitted = vec![false; variant.len()];
            for &i in known[..n_kn].iter().chain(&unknown[..n_unk]) {
                fitted[i] = true;
            }
            let tag = format!("epoch={epoch}");
            let train = variant
                .examples
                .iter()
                .zip(&fitted)
                .map(|(e, &f)| {
                    let mut r = PredictionRecord::new(e.pair.id.clone(), if f { e.target_answer.as_str() } else { WRONG });
                    r.split = Some(Split::Train);
                    r.source_tag = tag.clone();
                    r
                })
                .collect();
            let (fk, fu) = (n_kn as f64 / d, n_unk as f64 / d);
            let test_acc = cfg.test.target(fk, fu);
            let ood_acc = cfg.ood_test.target(fk, fu);
            let mut predictions = BTreeMap::new();
            predictions.insert(Split::Train, train);
            predictions.insert(Split::Dev, heldout_predictions(&splits.dev, test_acc, cfg.seed, &variant.name, &tag));
            if !splits.test.is_empty() {
                predictions.insert(Split::Test, heldout_predictions(&splits.test, test_acc, cfg.seed, &variant.name, &tag));
            }
            if !splits.ood_test.is_empty() {
                predictions.insert(Split::OodTest, heldout_predictions(&splits.ood_test, ood_acc, cfg.seed, &variant.name, &tag));
            }
            EpochSnapshot { epoch, variant_name: variant.name.clone(), predictions }
        })
        .collect()
}

/// Simulates and writes the snapshots under `run_dir`.
pub fn simulate_to_dir(
    variant: &DatasetVariant,
    splits: &EvalSplits,
    cfg: &LearnerConfig,
    run_dir: &Path,
) -> std::io::Result<usize> {
    let snaps = simulate_run(variant, splits, cfg);
    for s in &snaps {
        write_snapshot(run_dir, s)?;
    }
    Ok(snaps.len())
}
