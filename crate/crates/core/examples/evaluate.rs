//! Scores predictions by exact match, broken down by knowledge category.

use std::collections::BTreeMap;

use knowledge_probe::eval::{evaluate, exact_match, normalize_answer, PredictionRecord};
use knowledge_probe::{KnowledgeCategory, QAPair, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for s in ["The Hague!", "  an Apple ", "U.S."] {
        println!("{s:?} -> {:?}", normalize_answer(s));
    }
    println!("EM(\"the Paris.\", [\"Paris\"]) = {}\n", exact_match("the Paris.", &["Paris"]));

    let rows = [
        ("t1", "Where was Ann born?", "Oslo", "oslo", KnowledgeCategory::HighlyKnown),
        ("t2", "Where was Bob born?", "Rome", "Milan", KnowledgeCategory::MaybeKnown),
        ("t3", "Where was Cy born?", "Lima", "The Lima", KnowledgeCategory::WeaklyKnown),
        ("t4", "Where was Dee born?", "Kyiv", "I don't know", KnowledgeCategory::Unknown),
    ];
    let pairs: Vec<QAPair> = rows
        .iter()
        .map(|r| QAPair {
            id: r.0.into(),
            relation_id: "P19".into(),
            subject: String::new(),
            question: r.1.into(),
            gold_answers: vec![r.2.into()],
            split: Split::Test,
        })
        .collect();
    let predictions: Vec<PredictionRecord> = rows.iter().map(|r| PredictionRecord::new(r.0, r.3)).collect();
    let categories: BTreeMap<String, KnowledgeCategory> = rows.iter().map(|r| (r.0.to_string(), r.4)).collect();

    let report = evaluate(&predictions, &pairs, Some(&categories), Some("I don't know"))?;
    println!("{}", report.to_table());
    println!("answered {:.2}, accuracy on answered {:.3}", report.answered_fraction, report.accuracy_on_answered);
    Ok(())
}
