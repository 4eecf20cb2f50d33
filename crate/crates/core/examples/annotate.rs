//! Categorizes the demo corpus by querying a mock model with few-shot
//! prompts and prints the category breakdown.

use std::path::PathBuf;
use std::sync::Arc;

use knowledge_probe::annotate::{annotate_dataset, CategoryStats};
use knowledge_probe::cli::RunConfig;
use knowledge_probe::corpus::{apply_filters, import_raw, RelationConfig};
use knowledge_probe::gateway::{EndpointProfile, Gateway, KnowledgeTable, MockBackend};
use knowledge_probe::Split;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let demo = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo");
    let cfg = RunConfig::load(&demo.join("run.toml"))?;
    let manifest = apply_filters(import_raw(&demo.join("raw"), &RelationConfig::entity_questions())?);
    let table = KnowledgeTable::from_json(&std::fs::read_to_string(demo.join("mock_table.json"))?)?;
    let mock = MockBackend::new(table, cfg.mock.seed)?.with_greedy_policy(cfg.mock.greedy);
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(mock))?;

    let run = annotate_dataset(&manifest.split(Split::Train), &manifest.split(Split::Dev), &cfg.sampling, &gw)?;
    for e in run.examples.iter().take(5) {
        println!(
            "{:<18} greedy {:>2}/10 sampled {:>3}/160 -> {}",
            e.pair.id, e.estimate.greedy_correct, e.estimate.sampled_correct, e.category
        );
    }
    println!("\n{}", CategoryStats::from_examples(&run.examples).to_table());
    println!("{} generations", gw.stats().generations());
    Ok(())
}
