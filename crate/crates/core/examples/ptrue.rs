//! Scores questions with the P(True) self-evaluation probe and sweeps the
//! Unknown threshold.

use std::collections::BTreeMap;
use std::sync::Arc;

use knowledge_probe::gateway::{AnswerDistribution, EndpointProfile, Gateway, KnowledgeTable, MockBackend};
use knowledge_probe::ptrue::{ptrue_prompt, ptrue_scores, ptrue_threshold_sweep};
use knowledge_probe::{QAPair, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{}\n", ptrue_prompt("Where was Bruce Smith born?", "Faribault"));

    let mut table = KnowledgeTable::default();
    let mut pairs = Vec::new();
    for (i, p) in [1.0, 0.8, 0.5, 0.3, 0.1, 0.0].into_iter().enumerate() {
        let question = format!("Where was person {i} born?");
        let gold = format!("City {i}");
        table.insert(question.clone(), AnswerDistribution::from_pairs([(gold.clone(), p), ("Nowhere".into(), 1.0 - p)]));
        pairs.push(QAPair {
            id: format!("P19-test-{i:05}"),
            relation_id: "P19".into(),
            subject: String::new(),
            question,
            gold_answers: vec![gold],
            split: Split::Test,
        });
    }
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(MockBackend::new(table, 5)?))?;
    let scores = ptrue_scores(&pairs, &gw, 16, 0)?;
    for s in &scores {
        println!("{} P(True) = {:.3}", s.example_id, s.p_true);
    }

    let correct: BTreeMap<String, bool> = pairs.iter().enumerate().map(|(i, p)| (p.id.clone(), i < 3)).collect();
    println!("\nthreshold  unknown  accuracy-on-unknown");
    for p in ptrue_threshold_sweep(&scores, &correct)? {
        println!("{:>9.4} {:>8.3} {:>20}", p.threshold, p.fraction_unknown, p.accuracy_on_unknown.map_or("-".into(), |a| format!("{a:.3}")));
    }
    Ok(())
}
