//! The `kprobe` command line.
//!
//! Every subcommand reads its inputs from earlier stages under the output
//! root and writes into its own stage directory there, together with
//! `effective_config.toml` and `run_manifest.json`.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{AnalysisOptions, BackendKind, CorpusOptions, MockOptions, Paths, RunConfig, VariantOptions};

use crate::annotate::{self, annotate_dataset, join_annotations, read_annotation_records, write_annotations, AnnotatedExample, CategoryStats};
use crate::corpus::{apply_filters_with, import_raw, CorpusManifest, RelationConfig};
use crate::dynamics::{self, compute_series, detect_early_stop, ingest_snapshots, DynamicsSeries, EvalSplits, RegressionTarget};
use crate::eval::{evaluate, read_predictions, PredictionRecord};
use crate::export::{export_trainer_files, TrainerHyperparameters};
use crate::gateway::{Backend, CacheStore, Gateway, HttpBackend, KnowledgeTable, MockBackend};
use crate::plot::{self, Duration, PlotInputs};
use crate::ptrue::{ptrue_scores, ptrue_threshold_sweep, SweepPoint};
use crate::regression::{fit_linear_model, LinearFit};
use crate::simulate::simulate_to_dir;
use crate::stats;
use crate::types::{KnowledgeCategory, QAPair, Split};
use crate::variants::{self, DatasetVariant, MixtureSpec, VariantSpec};

pub const TOOL: &str = "kprobe";

/// A domain failure, reported with exit code 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self { kind: kind.into(), message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

macro_rules! cli_error_from {
    ($($t:ty => $kind:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($kind, e.to_string())
            }
        })*
    };
}

cli_error_from! {
    std::io::Error => "io",
    serde_json::Error => "json",
    csv::Error => "csv",
    crate::corpus::CorpusError => "corpus",
    crate::annotate::AnnotateError => "annotate",
    crate::gateway::GatewayError => "gateway",
    crate::variants::VariantError => "variant",
    crate::export::ExportError => "export",
    crate::eval::EvalError => "eval",
    crate::dynamics::DynamicsError => "dynamics",
    crate::regression::RegressionError => "regression",
    crate::stats::StatsError => "ttest",
    crate::ptrue::PTrueError => "ptrue",
}

type CliResult<T> = Result<T, CliError>;

fn parse_percent(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=100.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside the valid range 0..=100"))
    }
}

#[derive(Debug, Parser)]
#[command(name = TOOL, version, about = "Knowledge probing and fine-tuning dataset curation for closed-book QA")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; stage seeds not set in the config inherit it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Completion cache directory.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// On failure, print the error as JSON on stderr.
    #[arg(long, global = true)]
    pub error_json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a raw per-relation corpus, apply the filters, write the corpus.
    Import {
        #[arg(long)]
        raw: Option<PathBuf>,
        #[arg(long)]
        relations: Option<PathBuf>,
    },
    /// Label train/test pairs with knowledge categories.
    Annotate {
        /// Backend to query.
        #[arg(long, value_enum)]
        endpoint: Option<BackendKind>,
        /// Mock knowledge table (JSON question -> answer distribution).
        #[arg(long)]
        mock_table: Option<PathBuf>,
        #[arg(long)]
        max_parallel: Option<usize>,
    },
    /// Build the dataset variants from the annotations.
    Build {
        /// Unknown percentage of a mixture variant; repeatable.
        #[arg(long = "unknown-percent", value_parser = parse_percent)]
        unknown_percent: Vec<f64>,
        #[arg(long)]
        target_size: Option<usize>,
    },
    /// Write trainer JSONL files for built variants.
    Export {
        /// Variant name; all built variants when omitted. Repeatable.
        #[arg(long)]
        variant: Vec<String>,
    },
    /// Exact-match evaluation of a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Count predictions equal to this string as abstentions.
        #[arg(long)]
        abstain: Option<String>,
        /// Name of the report files.
        #[arg(long, default_value = "report")]
        tag: String,
    },
    /// Write prediction snapshots from the simulated learner.
    Simulate {
        #[arg(long)]
        variant: Vec<String>,
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Per-epoch series and early-stop epochs from snapshots.
    Dynamics {
        #[arg(long)]
        variant: Vec<String>,
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Fit accuracy against fitted Known/Unknown fractions.
    Regress {
        /// Series to pool; every mixture variant when omitted.
        #[arg(long)]
        variant: Vec<String>,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
    },
    /// Paired t-test between two models' predictions.
    Ttest {
        /// Predictions file of model A (or use --variant-a).
        #[arg(long, conflicts_with = "variant_a")]
        a: Option<PathBuf>,
        #[arg(long, conflicts_with = "variant_b")]
        b: Option<PathBuf>,
        /// Variant whose early-stop snapshot supplies model A.
        #[arg(long)]
        variant_a: Option<String>,
        #[arg(long)]
        variant_b: Option<String>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        n_subsets: Option<usize>,
    },
    /// P(True) scores for test pairs and the Unknown-threshold sweep.
    Ptrue {
        /// Variant whose early-stop test predictions give post-fine-tuning correctness.
        #[arg(long, conflicts_with = "predictions")]
        variant: Option<String>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        samples: Option<u32>,
        #[arg(long, value_enum)]
        endpoint: Option<BackendKind>,
    },
    /// Emit CSV plot data from the analysis outputs.
    Plot {
        /// Duration for the accuracy-vs-Unknown file; repeatable.
        #[arg(long = "duration")]
        durations: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TargetArg {
    Test,
    OodTest,
}

/// Files a subcommand read and wrote, recorded in its run manifest.
#[derive(Debug, Default)]
struct Io {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Io {
    fn read(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }
    fn wrote(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'a str,
    version: &'a str,
    subcommand: &'a str,
    config_digest: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<String>,
}

fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn display_rel(p: &Path, root: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("missing-input", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("json", format!("{}: {e}", path.display())))
}

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.cfg.paths.out
    }

    fn stage(&self, name: &str) -> CliResult<PathBuf> {
        let dir = self.out().join(name);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn finish(&self, stage_dir: &Path, subcommand: &str, io: Io) -> CliResult<()> {
        std::fs::write(stage_dir.join("effective_config.toml"), self.cfg.to_toml())?;
        let mut inputs = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for p in io.inputs {
            if seen.insert(p.clone()) && p.is_file() {
                inputs.push(FileDigest { path: display_rel(&p, self.out()), sha256: file_digest(&p)? });
            }
        }
        let manifest = RunManifest {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config_digest: self.cfg.digest(),
            inputs,
            outputs: io.outputs.iter().map(|p| display_rel(p, self.out())).collect(),
        };
        write_json(&stage_dir.join("run_manifest.json"), &manifest)
    }

    fn corpus_dir(&self) -> PathBuf {
        self.out().join("corpus")
    }

    fn load_corpus(&self, io: &mut Io) -> CliResult<CorpusManifest> {
        let dir = self.corpus_dir();
        if !dir.join("corpus.jsonl").is_file() {
            return Err(CliError::new("missing-input", format!("no corpus under {}; run `import` first", dir.display())));
        }
        io.read(&dir.join("corpus.jsonl"));
        Ok(CorpusManifest::read(&dir)?)
    }

    fn annotations_path(&self) -> PathBuf {
        self.out().join("annotations").join("annotations.jsonl")
    }

    fn load_annotations(&self, corpus: &CorpusManifest, io: &mut Io) -> CliResult<Vec<AnnotatedExample>> {
        let path = self.annotations_path();
        if !path.is_file() {
            return Err(CliError::new("missing-input", format!("{} not found; run `annotate` first", path.display())));
        }
        io.read(&path);
        Ok(join_annotations(&corpus.pairs, &read_annotation_records(&path)?)?)
    }

    fn variants_dir(&self) -> PathBuf {
        self.out().join("variants")
    }

    fn load_index(&self, io: &mut Io) -> CliResult<Vec<VariantIndexEntry>> {
        let path = self.variants_dir().join("index.json");
        io.read(&path);
        read_json(&path).map_err(|e| CliError::new(e.kind, format!("{}; run `build` first", e.message)))
    }

    fn load_variant(&self, name: &str, io: &mut Io) -> CliResult<DatasetVariant> {
        let path = self.variants_dir().join(format!("{name}.json"));
        io.read(&path);
        read_json(&path)
    }

    /// Variants named on the command line, or every built one.
    fn select_variants(&self, names: &[String], io: &mut Io) -> CliResult<Vec<VariantIndexEntry>> {
        let index = self.load_index(io)?;
        if names.is_empty() {
            return Ok(index);
        }
        names
            .iter()
            .map(|n| {
                index
                    .iter()
                    .find(|e| &e.name == n)
                    .cloned()
                    .ok_or_else(|| CliError::new("unknown-variant", format!("variant {n:?} has not been built")))
            })
            .collect()
    }

    fn gateway(&self, backend: BackendKind, io: &mut Io) -> CliResult<Gateway> {
        let backend: Arc<dyn Backend> = match backend {
            BackendKind::Mock => {
                let path = self.cfg.mock.table.as_ref().ok_or_else(|| {
                    CliError::new("config", "the mock backend needs mock.table (or --mock-table)")
                })?;
                io.read(path);
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::new("missing-input", format!("{}: {e}", path.display())))?;
                let table = KnowledgeTable::from_json(&text)
                    .map_err(|e| CliError::new("json", format!("{}: {e}", path.display())))?;
                Arc::new(MockBackend::new(table, self.cfg.mock.seed)?.with_greedy_policy(self.cfg.mock.greedy))
            }
            BackendKind::Http => Arc::new(HttpBackend::from_profile(&self.cfg.endpoint)?),
        };
        Ok(Gateway::new(self.cfg.endpoint.clone(), backend)?.with_cache(CacheStore::open(self.cfg.cache_dir())?))
    }

    fn series_path(&self, name: &str) -> PathBuf {
        self.out().join("dynamics").join(format!("series_{name}.json"))
    }

    fn load_series(&self, name: &str, io: &mut Io) -> CliResult<DynamicsSeries> {
        let path = self.series_path(name);
        io.read(&path);
        read_json(&path).map_err(|e| CliError::new(e.kind, format!("{}; run `dynamics` first", e.message)))
    }
}

/// One row of `variants/index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantIndexEntry {
    pub name: String,
    pub kind: String,
    pub unknown_percent: Option<f64>,
    pub size: usize,
    pub n_unknown: usize,
}

impl VariantIndexEntry {
    fn of(v: &DatasetVariant) -> Self {
        let (kind, pct) = match &v.spec {
            VariantSpec::Mixture(m) => ("mixture", Some(m.unknown_percent)),
            VariantSpec::SingleCategory { .. } => ("single_category", None),
            VariantSpec::Natural { .. } => ("natural", None),
            VariantSpec::KnownAblation { .. } => ("known_ablation", None),
            VariantSpec::Abstention { .. } => ("abstention", None),
        };
        Self { name: v.name.clone(), kind: kind.into(), unknown_percent: pct, size: v.len(), n_unknown: v.unknown_count() }
    }
}

fn build_config(global: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.apply_global_seed(seed);
    }
    if let Some(out) = &global.out {
        cfg.paths.out = out.clone();
    }
    if let Some(cache) = &global.cache {
        cfg.paths.cache = Some(cache.clone());
    }
    Ok(cfg)
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let error_json = cli.global.error_json;
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            if error_json {
                eprintln!("{}", serde_json::json!({ "error": e }));
            } else {
                eprintln!("error: {e}");
            }
            1
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let mut cfg = build_config(&cli.global)?;
    match cli.command {
        Command::Import { raw, relations } => {
            if raw.is_some() {
                cfg.paths.raw = raw;
            }
            if relations.is_some() {
                cfg.paths.relations = relations;
            }
            cmd_import(&Ctx { cfg })
        }
        Command::Annotate { endpoint, mock_table, max_parallel } => {
            if let Some(b) = endpoint {
                cfg.backend = b;
            }
            if mock_table.is_some() {
                cfg.mock.table = mock_table;
            }
            if let Some(n) = max_parallel {
                cfg.endpoint.max_parallel = n;
            }
            cmd_annotate(&Ctx { cfg })
        }
        Command::Build { unknown_percent, target_size } => {
            if !unknown_percent.is_empty() {
                cfg.variants.unknown_percents = unknown_percent;
            }
            if target_size.is_some() {
                cfg.variants.target_size = target_size;
            }
            cmd_build(&Ctx { cfg })
        }
        Command::Export { variant } => cmd_export(&Ctx { cfg }, &variant),
        Command::Evaluate { predictions, split, abstain, tag } => {
            cmd_evaluate(&Ctx { cfg }, &predictions, split, abstain.as_deref(), &tag)
        }
        Command::Simulate { variant, epochs } => {
            if let Some(e) = epochs {
                cfg.learner.epochs = e;
            }
            cmd_simulate(&Ctx { cfg }, &variant)
        }
        Command::Dynamics { variant, snapshots } => {
            if snapshots.is_some() {
                cfg.paths.snapshots = snapshots;
            }
            cmd_dynamics(&Ctx { cfg }, &variant)
        }
        Command::Regress { variant, target } => {
            if let Some(t) = target {
                cfg.analysis.regression_target = match t {
                    TargetArg::Test => RegressionTarget::Test,
                    TargetArg::OodTest => RegressionTarget::OodTest,
                };
            }
            cmd_regress(&Ctx { cfg }, &variant)
        }
        Command::Ttest { a, b, variant_a, variant_b, split, n_subsets } => {
            if let Some(n) = n_subsets {
                cfg.analysis.n_subsets = n;
            }
            let ctx = Ctx { cfg };
            let a = PredictionSource::pick(a, variant_a, "a")?;
            let b = PredictionSource::pick(b, variant_b, "b")?;
            cmd_ttest(&ctx, a, b, split)
        }
        Command::Ptrue { variant, predictions, samples, endpoint } => {
            if let Some(s) = samples {
                cfg.analysis.ptrue_samples = s;
            }
            if let Some(b) = endpoint {
                cfg.backend = b;
            }
            cmd_ptrue(&Ctx { cfg }, variant, predictions)
        }
        Command::Plot { durations } => {
            if !durations.is_empty() {
                cfg.analysis.durations = durations;
            }
            cmd_plot(&Ctx { cfg })
        }
    }
}

fn cmd_import(ctx: &Ctx) -> CliResult<()> {
    let mut io = Io::default();
    let raw = ctx
        .cfg
        .paths
        .raw
        .clone()
        .ok_or_else(|| CliError::new("config", "no raw corpus: set paths.raw or pass --raw"))?;
    let relations = match &ctx.cfg.paths.relations {
        Some(p) => {
            io.read(p);
            RelationConfig::load(p)?
        }
        None => RelationConfig::entity_questions(),
    };
    let imported = import_raw(&raw, &relations)?;
    for split in ["train", "dev", "test"] {
        if let Ok(entries) = std::fs::read_dir(raw.join(split)) {
            let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
            files.sort();
            for f in files {
                io.read(&f);
            }
        }
    }
    let manifest = apply_filters_with(imported, ctx.cfg.corpus.overlap_rule);
    let problems = manifest.check_invariants();
    if !problems.is_empty() && ctx.cfg.corpus.overlap_rule == crate::corpus::OverlapRule::SubjectsAndObjects {
        return Err(CliError::new("corpus", problems.join("; ")));
    }
    let dir = ctx.stage("corpus")?;
    manifest.write(&dir)?;
    io.wrote(dir.join("corpus.jsonl"));
    io.wrote(dir.join("corpus_manifest.json"));
    println!("imported {} pairs", manifest.pairs.len());
    for split in Split::ALL {
        println!("  {:<9} {}", split.as_str(), manifest.split(split).len());
    }
    for (rule, n) in &manifest.provenance.filter_log {
        println!("  removed {n:>5}  {rule}");
    }
    ctx.finish(&dir, "import", io)
}

fn cmd_annotate(ctx: &Ctx) -> CliResult<()> {
    let mut io = Io::default();
    let corpus = ctx.load_corpus(&mut io)?;
    let gateway = ctx.gateway(ctx.cfg.backend, &mut io)?;
    let targets: Vec<QAPair> = corpus
        .pairs
        .iter()
        .filter(|p| ctx.cfg.analysis.annotate_splits.contains(&p.split))
        .cloned()
        .collect();
    let dev_pool = corpus.split(Split::Dev);
    let run = annotate_dataset(&targets, &dev_pool, &ctx.cfg.sampling, &gateway)?;
    let dir = ctx.stage("annotations")?;
    let path = dir.join("annotations.jsonl");
    write_annotations(&path, &run.examples)?;
    io.wrote(&path);
    let stats_by_split: BTreeMap<String, CategoryStats> = ctx
        .cfg
        .analysis
        .annotate_splits
        .iter()
        .map(|s| (s.as_str().to_string(), CategoryStats::from_examples(run.examples.iter().filter(|e| e.pair.split == *s))))
        .collect();
    write_json(&dir.join("category_stats.json"), &stats_by_split)?;
    io.wrote(dir.join("category_stats.json"));
    let mut table = String::new();
    for (split, stats) in &stats_by_split {
        table.push_str(&format!("[{split}]\n{}\n", stats.to_table()));
    }
    std::fs::write(dir.join("category_stats.txt"), &table)?;
    io.wrote(dir.join("category_stats.txt"));
    print!("{table}");
    let s = gateway.stats();
    println!(
        "annotated {} pairs: {} backend calls, {} generations, {} cache hits",
        run.examples.len(),
        s.backend_calls(),
        s.generations(),
        s.cache_hits()
    );
    ctx.finish(&dir, "annotate", io)
}

fn cmd_build(ctx: &Ctx) -> CliResult<()> {
    let mut io = Io::default();
    let corpus = ctx.load_corpus(&mut io)?;
    let annotated = ctx.load_annotations(&corpus, &mut io)?;
    let train: Vec<AnnotatedExample> = annotated.into_iter().filter(|e| e.pair.split == Split::Train).collect();
    let fixed = variants::compute_fixed_size(&train);
    let opts = &ctx.cfg.variants;
    let target = opts.target_size.unwrap_or(fixed.size);
    let seed = opts.seed;

    let mut built: Vec<DatasetVariant> = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    for &pct in &opts.unknown_percents {
        let spec = MixtureSpec::plan(&train, pct, target, seed, opts.known_mix)?;
        let v = variants::build_mixture(&train, &spec)?;
        if opts.known_ablation {
            match variants::build_known_ablation(&v) {
                Ok(k) => built.push(k),
                Err(e) => skipped.push(e.to_string()),
            }
        }
        if opts.idk && v.unknown_count() > 0 {
            built.push(variants::build_idk_variant(&v, Some(&opts.abstain_string)));
        }
        built.push(v);
    }
    if opts.single_category {
        for c in KnowledgeCategory::ALL {
            built.push(variants::build_single_category(&train, c, target, seed)?);
        }
    }
    if opts.natural {
        built.push(variants::build_natural(&train, target, seed)?);
    }
    built.sort_by(|a, b| a.name.cmp(&b.name));

    let dir = ctx.stage("variants")?;
    write_json(&dir.join("fixed_size.json"), &fixed)?;
    io.wrote(dir.join("fixed_size.json"));
    let mut index = Vec::with_capacity(built.len());
    for v in &built {
        let path = dir.join(format!("{}.json", v.name));
        write_json(&path, v)?;
        io.wrote(path);
        index.push(VariantIndexEntry::of(v));
    }
    write_json(&dir.join("index.json"), &index)?;
    io.wrote(dir.join("index.json"));
    println!("fixed size |D| = {} (target {target})", fixed.size);
    for w in &fixed.warnings {
        println!("  warning: {w}");
    }
    println!("{:<24} {:>16} {:>6} {:>8}", "variant", "kind", "size", "unknown");
    for e in &index {
        println!("{:<24} {:>16} {:>6} {:>8}", e.name, e.kind, e.size, e.n_unknown);
    }
    for s in &skipped {
        println!("skipped: {s}");
    }
    ctx.finish(&dir, "build", io)
}

fn cmd_export(ctx: &Ctx, names: &[String]) -> CliResult<()> {
    let mut io = Io::default();
    let corpus = ctx.load_corpus(&mut io)?;
    let selected = ctx.select_variants(names, &mut io)?;
    let dir = ctx.stage("export")?;
    let hyper = TrainerHyperparameters::default();
    for entry in &selected {
        let v = ctx.load_variant(&entry.name, &mut io)?;
        let files = export_trainer_files(&v, &corpus, &hyper, &dir.join(&v.name))?;
        println!("{:<24} {} files", v.name, files.files.len());
        for f in files.files {
            io.wrote(f);
        }
    }
    ctx.finish(&dir, "export", io)
}

fn pairs_of_split(corpus: &CorpusManifest, split: Split) -> Vec<QAPair> {
    match split {
        Split::Dev => EvalSplits::from_manifest(corpus).dev,
        s => corpus.split(s),
    }
}

fn cmd_evaluate(ctx: &Ctx, predictions: &Path, split: Split, abstain: Option<&str>, tag: &str) -> CliResult<()> {
    let mut io = Io::default();
    let corpus = ctx.load_corpus(&mut io)?;
    io.read(predictions);
    let preds = read_predictions(predictions)?;
    let pairs = pairs_of_split(&corpus, split);
    let categories = if ctx.annotations_path().is_file() {
        Some(annotate::category_map(&ctx.load_annotations(&corpus, &mut io)?))
    } else {
        None
    };
    let categories = categories.filter(|m| pairs.iter().all(|p| m.contains_key(&p.id)));
    let report = evaluate(&preds, &pairs, categories.as_ref(), abstain)?;
    let dir = ctx.stage("eval")?;
    write_json(&dir.join(format!("{tag}.json")), &report)?;
    std::fs::write(dir.join(format!("{tag}.txt")), report.to_table())?;
    io.wrote(dir.join(format!("{tag}.json")));
    io.wrote(dir.join(format!("{tag}.txt")));
    print!("{}", report.to_table());
    ctx.finish(&dir, "evaluate", io)
}

fn cmd_simulate(ctx: &Ctx, names: &[String]) -> CliResult<()> {
    let mut io = Io::default();
    let corpus = ctx.load_corpus(&mut io)?;
    let splits = EvalSplits::from_manifest(&corpus);
    let selected = ctx.select_variants(names, &mut io)?;
    let snap_dir = ctx.cfg.snapshot_dir();
    for entry in &selected {
        let v = ctx.load_variant(&entry.name, &mut io)?;
        let vdir = snap_dir.join(&v.name);
        if vdir.exists() {
            std::fs::remove_dir_all(&vdir)?;
        }
        let n = simulate_to_dir(&v, &splits, &ctx.cfg.learner, &snap_dir)?;
        io.wrote(vdir);
        println!("{:<24} {n} epochs", v.name);
    }
    let dir = ctx.stage("simulate")?;
    ctx.finish(&dir, "simulate", io)
}

#[derive(Debug, Serialize, Deserialize)]
struct DynamicsSummary {
    variant: String,
    d_size: usize,
    known_size: usize,
    unknown_size: usize,
    epochs: usize,
    early_stop: Option<u32>,
    dev_accuracy_at_early_stop: Option<f64>,
    test_accuracy_at_early_stop: Option<f64>,
}

fn cmd_dynamics(ctx: &Ctx, names: &[String]) -> CliResult<()> {
    let mut io = Io::default();
    let corpus = ctx.load_corpus(&mut io)?;
    let splits = EvalSplits::from_manifest(&corpus);
    let selected = ctx.select_variants(names, &mut io)?;
    let snap_dir = ctx.cfg.snapshot_dir();
    let dir = ctx.stage("dynamics")?;
    let mut summary = Vec::new();
    for entry in &selected {
        let v = ctx.load_variant(&entry.name, &mut io)?;
        let snaps = ingest_snapshots(&snap_dir, &v.name, &corpus.pairs)?;
        let series = compute_series(&snaps, &v, &splits)?;
        let es = detect_early_stop(&series);
        let at = es.and_then(|e| series.point(e));
        summary.push(DynamicsSummary {
            variant: v.name.clone(),
            d_size: series.d_size,
            known_size: series.known_size,
            unknown_size: series.unknown_size,
            epochs: series.epochs.len(),
            early_stop: es,
            dev_accuracy_at_early_stop: at.map(|p| p.dev_accuracy),
            test_accuracy_at_early_stop: at.and_then(|p| p.test_accuracy),
        });
        let path = ctx.series_path(&v.name);
        write_json(&path, &series)?;
        io.wrote(path);
    }
    write_json(&dir.join("summary.json"), &summary)?;
    io.wrote(dir.join("summary.json"));
    println!("{:<24} {:>6} {:>10} {:>8} {:>8}", "variant", "epochs", "early_stop", "dev", "test");
    for s in &summary {
        println!(
            "{:<24} {:>6} {:>10} {:>8} {:>8}",
            s.variant,
            s.epochs,
            s.early_stop.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            s.dev_accuracy_at_early_stop.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            s.test_accuracy_at_early_stop.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
        );
    }
    ctx.finish(&dir, "dynamics", io)
}

fn mixture_names(ctx: &Ctx, names: &[String], io: &mut Io) -> CliResult<Vec<VariantIndexEntry>> {
    let selected = ctx.select_variants(names, io)?;
    Ok(if names.is_empty() { selected.into_iter().filter(|e| e.kind == "mixture").collect() } else { selected })
}

fn cmd_regress(ctx: &Ctx, names: &[String]) -> CliResult<()> {
    let mut io = Io::default();
    let entries = mixture_names(ctx, names, &mut io)?;
    let series = entries.iter().map(|e| ctx.load_series(&e.name, &mut io)).collect::<CliResult<Vec<_>>>()?;
    let target = ctx.cfg.analysis.regression_target;
    let points = dynamics::regression_points(&series, target);
    let fit = fit_linear_model(&points)?;
    let dir = ctx.stage("regress")?;
    let path = dir.join("linear_fit.json");
    write_json(&path, &serde_json::json!({ "target": target, "variants": entries.iter().map(|e| &e.name).collect::<Vec<_>>(), "fit": fit }))?;
    io.wrote(path);
    println!(
        "accuracy = {:.4} + {:.4} * N_kn/|D| + {:.4} * N_unk/|D|   (R^2 = {:.4}, {} points)",
        fit.beta0, fit.beta_kn, fit.beta_unk, fit.r_squared, fit.n_points
    );
    ctx.finish(&dir, "regress", io)
}

enum PredictionSource {
    File(PathBuf),
    Variant(String),
}

impl PredictionSource {
    fn pick(file: Option<PathBuf>, variant: Option<String>, which: &str) -> CliResult<Self> {
        match (file, variant) {
            (Some(f), None) => Ok(Self::File(f)),
            (None, Some(v)) => Ok(Self::Variant(v)),
            _ => Err(CliError::new("usage", format!("give exactly one of --{which} or --variant-{which}"))),
        }
    }

    fn label(&self) -> String {
        match self {
            Self::File(p) => p.display().to_string(),
            Self::Variant(v) => format!("{v}@early_stop"),
        }
    }

    fn load(&self, ctx: &Ctx, split: Split, io: &mut Io) -> CliResult<Vec<PredictionRecord>> {
        match self {
            Self::File(p) => {
                io.read(p);
                Ok(read_predictions(p)?)
            }
            Self::Variant(name) => {
                let series = ctx.load_series(name, io)?;
                let epoch = detect_early_stop(&series)
                    .ok_or_else(|| CliError::new("dynamics", format!("{name} has no epochs")))?;
                let path = dynamics::snapshot_path(&ctx.cfg.snapshot_dir(), name, epoch, split);
                io.read(&path);
                Ok(read_predictions(&path)?)
            }
        }
    }
}

fn cmd_ttest(ctx: &Ctx, a: PredictionSource, b: PredictionSource, split: Split) -> CliResult<()> {
    let mut io = Io::default();
    let corpus = ctx.load_corpus(&mut io)?;
    let pairs = pairs_of_split(&corpus, split);
    let preds_a = a.load(ctx, split, &mut io)?;
    let preds_b = b.load(ctx, split, &mut io)?;
    let report = stats::paired_t_test_predictions(&preds_a, &preds_b, &pairs, ctx.cfg.analysis.n_subsets, ctx.cfg.analysis.ttest_seed)?;
    let dir = ctx.stage("ttest")?;
    let path = dir.join("ttest.json");
    write_json(&path, &serde_json::json!({ "a": a.label(), "b": b.label(), "split": split, "report": report }))?;
    io.wrote(path);
    println!(
        "t = {:.4}, df = {}, p = {:.6} (mean accuracy difference {:+.4}; significant at 0.05: {}, at 0.01: {})",
        report.t_statistic, report.df, report.p_value, report.mean_difference, report.significant_05, report.significant_01
    );
    ctx.finish(&dir, "ttest", io)
}

fn cmd_ptrue(ctx: &Ctx, variant: Option<String>, predictions: Option<PathBuf>) -> CliResult<()> {
    let mut io = Io::default();
    let corpus = ctx.load_corpus(&mut io)?;
    let test = corpus.split(Split::Test);
    let source = match (predictions, variant) {
        (Some(p), _) => PredictionSource::File(p),
        (None, Some(v)) => PredictionSource::Variant(v),
        (None, None) => {
            let index = ctx.load_index(&mut io)?;
            let first = index
                .iter()
                .find(|e| e.kind == "mixture")
                .ok_or_else(|| CliError::new("usage", "no mixture variant built; pass --variant or --predictions"))?;
            PredictionSource::Variant(first.name.clone())
        }
    };
    let preds = source.load(ctx, Split::Test, &mut io)?;
    let correct = stats::correctness(&preds, &test)?;
    let gateway = ctx.gateway(ctx.cfg.backend, &mut io)?;
    let records = ptrue_scores(&test, &gateway, ctx.cfg.analysis.ptrue_samples, ctx.cfg.analysis.ptrue_seed)?;
    let curve = ptrue_threshold_sweep(&records, &correct)?;
    let dir = ctx.stage("ptrue")?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("scores.jsonl"), lines)?;
    io.wrote(dir.join("scores.jsonl"));
    write_json(&dir.join("curve.json"), &serde_json::json!({ "post_fine_tuning": source.label(), "curve": curve }))?;
    io.wrote(dir.join("curve.json"));
    println!("{:>10} {:>10} {:>10}", "threshold", "%unknown", "accuracy");
    for p in &curve {
        println!(
            "{:>10.4} {:>10.2} {:>10}",
            p.threshold,
            100.0 * p.fraction_unknown,
            p.accuracy_on_unknown.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    ctx.finish(&dir, "ptrue", io)
}

fn cmd_plot(ctx: &Ctx) -> CliResult<()> {
    let mut io = Io::default();
    let index = ctx.load_index(&mut io)?;
    let durations = ctx
        .cfg
        .analysis
        .durations
        .iter()
        .map(|d| Duration::parse(d).map_err(|e| CliError::new("config", e)))
        .collect::<CliResult<Vec<_>>>()?;
    let mut mixtures: Vec<(f64, DynamicsSeries)> = Vec::new();
    for e in index.iter().filter(|e| e.kind == "mixture") {
        if ctx.series_path(&e.name).is_file() {
            mixtures.push((e.unknown_percent.unwrap_or(0.0), ctx.load_series(&e.name, &mut io)?));
        }
    }
    mixtures.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fit_path = ctx.out().join("regress").join("linear_fit.json");
    let fit: Option<(LinearFit, RegressionTarget)> = if fit_path.is_file() {
        #[derive(Deserialize)]
        struct Saved {
            target: RegressionTarget,
            fit: LinearFit,
        }
        let s: Saved = read_json(&fit_path)?;
        io.read(&fit_path);
        Some((s.fit, s.target))
    } else {
        None
    };
    let curve_path = ctx.out().join("ptrue").join("curve.json");
    let curve: Option<Vec<SweepPoint>> = if curve_path.is_file() {
        #[derive(Deserialize)]
        struct Saved {
            curve: Vec<SweepPoint>,
        }
        io.read(&curve_path);
        Some(read_json::<Saved>(&curve_path)?.curve)
    } else {
        None
    };
    let inputs = PlotInputs {
        series: mixtures.iter().map(|(p, s)| (*p, s)).collect(),
        durations,
        fit: fit.as_ref().map(|(f, t)| (f, *t)),
        ptrue_curve: curve.as_deref(),
    };
    let dir = ctx.stage("plots")?;
    let files = plot::emit_plot_data(&inputs, &dir)?;
    for f in &files {
        println!("wrote {}", display_rel(f, ctx.out()));
    }
    io.outputs.extend(files);
    ctx.finish(&dir, "plot", io)
}
