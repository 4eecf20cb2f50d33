#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use knowledge_probe::annotate::{AnnotatedExample, PCorrectEstimate};
use knowledge_probe::gateway::{
    AnswerDistribution, EndpointProfile, Gateway, KnowledgeTable, MockBackend,
};
use knowledge_probe::{KnowledgeCategory, QAPair, Split};

pub fn demo_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("demo")
}

pub fn pair(id: &str, rel: &str, question: &str, gold: &str, split: Split) -> QAPair {
    QAPair {
        id: id.into(),
        relation_id: rel.into(),
        subject: format!("subject of {id}"),
        question: question.into(),
        gold_answers: vec![gold.into()],
        split,
    }
}

/// Train examples of `rel` with `counts` per category in
/// HighlyKnown/MaybeKnown/WeaklyKnown/Unknown order.
pub fn synthetic(rel: &str, counts: [usize; 4], start: usize) -> Vec<AnnotatedExample> {
    let mut out = Vec::new();
    let mut i = start;
    for (c, &n) in KnowledgeCategory::ALL.iter().zip(counts.iter()) {
        for _ in 0..n {
            out.push(AnnotatedExample {
                pair: pair(&format!("{rel}-train-{i:05}"), rel, &format!("Q{i}?"), &format!("A{i}"), Split::Train),
                estimate: PCorrectEstimate::new(0, 10, 0, 160),
                category: *c,
                policy_fingerprint: "fp".into(),
            });
            i += 1;
        }
    }
    out
}

/// `n_train` targets and an 8-question dev pool for each relation.
pub fn small_corpus(relations: &[&str], n_train: usize) -> (Vec<QAPair>, Vec<QAPair>) {
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for rel in relations {
        for i in 0..n_train {
            train.push(pair(
                &format!("{rel}-train-{i:03}"),
                rel,
                &format!("Where was person {rel}{i} born?"),
                &format!("City {rel}{i}"),
                Split::Train,
            ));
        }
        for i in 0..8 {
            dev.push(pair(
                &format!("{rel}-dev-{i:03}"),
                rel,
                &format!("Where was dev person {rel}{i} born?"),
                &format!("Town {rel}{i}"),
                Split::Dev,
            ));
        }
    }
    (train, dev)
}

/// Table giving each target a fixed distribution over its gold answer and
/// one wrong answer.
pub fn table_for(pairs: &[QAPair], p_gold: impl Fn(usize) -> f64) -> KnowledgeTable {
    let mut t = KnowledgeTable::default();
    for (i, p) in pairs.iter().enumerate() {
        let g = p_gold(i);
        let dist = if g >= 1.0 {
            AnswerDistribution::certain(p.gold())
        } else if g <= 0.0 {
            AnswerDistribution::certain("Nowhere")
        } else {
            AnswerDistribution::from_pairs([(p.gold().to_string(), g), ("Nowhere".to_string(), 1.0 - g)])
        };
        t.insert(p.question.clone(), dist);
    }
    t
}

pub fn mock_gateway(table: KnowledgeTable, seed: u64) -> Gateway {
    Gateway::new(EndpointProfile::mock(), Arc::new(MockBackend::new(table, seed).unwrap())).unwrap()
}
