//! Greedy and sampled completions through the gateway against a mock
//! backend, with an on-disk cache.

use std::sync::Arc;

use knowledge_probe::gateway::{
    AnswerDistribution, CacheStore, CompletionRequest, EndpointProfile, Gateway, KnowledgeTable, MockBackend,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut table = KnowledgeTable::default();
    table.insert(
        "Where was Bruce Smith born?",
        AnswerDistribution::from_pairs([("Faribault", 0.7), ("Minneapolis", 0.2), ("Duluth", 0.1)]),
    );
    let cache_dir = tempfile::tempdir()?;
    let gateway = || -> Result<Gateway, Box<dyn std::error::Error>> {
        let mock = MockBackend::new(table.clone(), 1)?;
        Ok(Gateway::new(EndpointProfile::mock(), Arc::new(mock))?.with_cache(CacheStore::open(cache_dir.path())?))
    };

    let prompt = "Q: Where was Bruce Smith born?\nA:";
    let gw = gateway()?;
    let cache = gw.cache().expect("cache attached");
    let greedy = gw.cached_complete(cache, &CompletionRequest::greedy(prompt, 16))?;
    println!("greedy: {:?}", greedy.texts);
    let sampled = gw.complete(&CompletionRequest::sampled(prompt, 16, 16).with_seed(42))?;
    println!("sampled: {:?}", sampled.texts);

    let batch: Vec<CompletionRequest> =
        (0..8).map(|s| CompletionRequest::sampled(prompt, 4, 16).with_seed(s)).collect();
    let results = gw.complete_batch(&batch)?.into_all()?;
    println!("batch of {} requests, first: {:?}", results.len(), results[0].texts);
    println!("calls={} generations={}", gw.stats().backend_calls(), gw.stats().generations());

    let again = gateway()?;
    again.cached_complete(again.cache().expect("cache attached"), &CompletionRequest::greedy(prompt, 16))?;
    println!("fresh gateway over the same cache: calls={} hits={}", again.stats().backend_calls(), again.stats().cache_hits());
    Ok(())
}
