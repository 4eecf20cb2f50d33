//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::SamplingPolicy;
use crate::corpus::OverlapRule;
use crate::dynamics::RegressionTarget;
use crate::gateway::{EndpointProfile, GreedyPolicy};
use crate::simulate::LearnerConfig;
use crate::types::Split;
use crate::variants::KnownMix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Raw per-relation corpus (input of `import`).
    pub raw: Option<PathBuf>,
    /// Relation config; the bundled EntityQuestions list when unset.
    pub relations: Option<PathBuf>,
    /// Output root. Every subcommand writes only below it.
    pub out: PathBuf,
    /// Completion cache; `{out}/cache` when unset.
    pub cache: Option<PathBuf>,
    /// Prediction snapshots; `{out}/snapshots` when unset.
    pub snapshots: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { raw: None, relations: None, out: PathBuf::from("out"), cache: None, snapshots: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockOptions {
    pub table: Option<PathBuf>,
    pub seed: u64,
    pub greedy: GreedyPolicy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusOptions {
    pub overlap_rule: OverlapRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantOptions {
    pub unknown_percents: Vec<f64>,
    /// Defaults to the fixed size derived from the annotations.
    pub target_size: Option<usize>,
    pub known_mix: KnownMix,
    pub seed: u64,
    pub single_category: bool,
    pub natural: bool,
    pub known_ablation: bool,
    pub idk: bool,
    pub abstain_string: String,
}

impl Default for VariantOptions {
    fn default() -> Self {
        Self {
            unknown_percents: vec![0.0, 25.0, 50.0, 75.0, 100.0],
            target_size: None,
            known_mix: KnownMix::Natural,
            seed: 0,
            single_category: true,
            natural: true,
            known_ablation: true,
            idk: true,
            abstain_string: crate::eval::ABSTAIN.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    /// Splits labeled by `annotate`; dev is the exemplar pool.
    pub annotate_splits: Vec<Split>,
    pub n_subsets: usize,
    pub ttest_seed: u64,
    pub durations: Vec<String>,
    pub regression_target: RegressionTarget,
    pub ptrue_samples: u32,
    pub ptrue_seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            annotate_splits: vec![Split::Train, Split::Test, Split::OodTest],
            n_subsets: 100,
            ttest_seed: 0,
            durations: ["5", "10", "20", "50", "early_stop"].map(String::from).to_vec(),
            regression_target: RegressionTarget::Test,
            ptrue_samples: 16,
            ptrue_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Inherited by every stage seed not set explicitly.
    pub seed: u64,
    pub backend: BackendKind,
    pub paths: Paths,
    #[serde(default = "EndpointProfile::mock")]
    pub endpoint: EndpointProfile,
    pub mock: MockOptions,
    pub sampling: SamplingPolicy,
    pub corpus: CorpusOptions,
    pub variants: VariantOptions,
    pub learner: LearnerConfig,
    pub analysis: AnalysisOptions,
    /// Stage seeds given explicitly in the config file, in [`STAGE_SEEDS`] order.
    #[serde(skip)]
    pub explicit_seeds: [bool; 6],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backend: BackendKind::Mock,
            paths: Paths::default(),
            endpoint: EndpointProfile::mock(),
            mock: MockOptions::default(),
            sampling: SamplingPolicy::default(),
            corpus: CorpusOptions::default(),
            variants: VariantOptions::default(),
            learner: LearnerConfig::default(),
            analysis: AnalysisOptions::default(),
            explicit_seeds: [false; 6],
        }
    }
}

/// `(section, key)` of every stage seed that inherits the global one.
pub const STAGE_SEEDS: [(&str, &str); 6] = [
    ("sampling", "rng_seed"),
    ("mock", "seed"),
    ("variants", "seed"),
    ("learner", "seed"),
    ("analysis", "ttest_seed"),
    ("analysis", "ptrue_seed"),
];

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Parses TOML. Stage seeds missing from `text` take the global seed;
    /// relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, toml::de::Error> {
        let value: toml::Table = toml::from_str(text)?;
        let mut cfg: RunConfig = value.clone().try_into()?;
        for (flag, (section, key)) in cfg.explicit_seeds.iter_mut().zip(STAGE_SEEDS) {
            *flag = value.get(section).and_then(|s| s.as_table()).is_some_and(|t| t.contains_key(key));
        }
        cfg.apply_global_seed(cfg.seed);
        let mut out = Some(cfg.paths.out.clone());
        resolve(base_dir, &mut out);
        cfg.paths.out = out.expect("set above");
        for p in [&mut cfg.paths.raw, &mut cfg.paths.relations, &mut cfg.paths.cache, &mut cfg.paths.snapshots, &mut cfg.mock.table] {
            resolve(base_dir, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, super::CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| super::CliError::new("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| super::CliError::new("config", format!("{}: {e}", path.display())))
    }

    /// Sets the global seed and every stage seed not flagged explicit.
    pub fn apply_global_seed(&mut self, seed: u64) {
        let explicit = self.explicit_seeds;
        self.seed = seed;
        let targets: [&mut u64; 6] = [
            &mut self.sampling.rng_seed,
            &mut self.mock.seed,
            &mut self.variants.seed,
            &mut self.learner.seed,
            &mut self.analysis.ttest_seed,
            &mut self.analysis.ptrue_seed,
        ];
        for (t, e) in targets.into_iter().zip(explicit) {
            if !e {
                *t = seed;
            }
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.cache.clone().unwrap_or_else(|| self.paths.out.join("cache"))
    }

    pub fn snapshot_dir(&self) -> PathBuf {
        self.paths.snapshots.clone().unwrap_or_else(|| self.paths.out.join("snapshots"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the effective configuration.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_inherit_unless_explicit() {
        let cfg = RunConfig::from_toml("seed = 9\n[learner]\nseed = 3\n", Path::new("/base")).unwrap();
        assert_eq!(cfg.sampling.rng_seed, 9);
        assert_eq!(cfg.variants.seed, 9);
        assert_eq!(cfg.learner.seed, 3);
        assert_eq!(cfg.paths.out, PathBuf::from("/base/out"));
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("/")).unwrap();
        assert_eq!(back.sampling, cfg.sampling);
        assert_eq!(back.variants, cfg.variants);
        assert_eq!(back.endpoint, cfg.endpoint);
    }
}
