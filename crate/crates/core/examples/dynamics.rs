//! Simulates training on mixtures of the demo corpus and tracks how fast
//! Known and Unknown examples are fitted.

use std::path::PathBuf;
use std::sync::Arc;

use knowledge_probe::annotate::annotate_dataset;
use knowledge_probe::cli::RunConfig;
use knowledge_probe::corpus::{apply_filters, import_raw, RelationConfig};
use knowledge_probe::dynamics::{compute_series, detect_early_stop, EvalSplits};
use knowledge_probe::gateway::{EndpointProfile, Gateway, KnowledgeTable, MockBackend};
use knowledge_probe::simulate::simulate_run;
use knowledge_probe::variants::{build_mixture, compute_fixed_size, KnownMix, MixtureSpec};
use knowledge_probe::Split;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let demo = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo");
    let cfg = RunConfig::load(&demo.join("run.toml"))?;
    let manifest = apply_filters(import_raw(&demo.join("raw"), &RelationConfig::entity_questions())?);
    let table = KnowledgeTable::from_json(&std::fs::read_to_string(demo.join("mock_table.json"))?)?;
    let mock = MockBackend::new(table, cfg.mock.seed)?.with_greedy_policy(cfg.mock.greedy);
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(mock))?;
    let train = annotate_dataset(&manifest.split(Split::Train), &manifest.split(Split::Dev), &cfg.sampling, &gw)?.examples;
    let size = compute_fixed_size(&train).size;
    let splits = EvalSplits::from_manifest(&manifest);

    let spec = MixtureSpec::plan(&train, 50.0, size, cfg.variants.seed, KnownMix::Natural)?;
    let v = build_mixture(&train, &spec)?;
    let series = compute_series(&simulate_run(&v, &splits, &cfg.learner), &v, &splits)?;
    println!("{}: {} Known, {} Unknown", v.name, series.known_size, series.unknown_size);
    println!("epoch  train   dev  known-fit unknown-fit");
    for p in &series.epochs {
        println!(
            "{:>5} {:>6.3} {:>5.3} {:>9.3} {:>11.3}",
            p.epoch,
            p.train_accuracy,
            p.dev_accuracy,
            series.known_fitted_fraction(p).unwrap_or(f64::NAN),
            series.unknown_fitted_fraction(p).unwrap_or(f64::NAN)
        );
    }
    println!("early stop at epoch {:?}", detect_early_stop(&series));
    Ok(())
}
