//! Writes a variant as trainer JSONL files and reads it back.

use std::collections::BTreeMap;

use knowledge_probe::corpus::{CorpusManifest, RelationConfig};
use knowledge_probe::export::{export_trainer_files, import_trainer_files, TrainerHyperparameters};
use knowledge_probe::variants::{build_idk_variant, DatasetVariant, VariantExample, VariantSpec};
use knowledge_probe::{KnowledgeCategory, QAPair, Split};

fn example(id: &str, question: &str, answer: &str, category: KnowledgeCategory) -> VariantExample {
    VariantExample {
        pair: QAPair {
            id: id.into(),
            relation_id: "P106".into(),
            subject: String::new(),
            question: question.into(),
            gold_answers: vec![answer.into()],
            split: Split::Train,
        },
        target_answer: answer.into(),
        category,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let variant = DatasetVariant {
        name: "D_50unk".into(),
        examples: vec![
            example("P106-train-00001", "What kind of work does Ron Konopka do?", "geneticist", KnowledgeCategory::HighlyKnown),
            example("P106-train-00002", "What kind of work does Benedict Spinoza do?", "philosopher", KnowledgeCategory::Unknown),
        ],
        spec: VariantSpec::Natural { target_size: 2, per_relation: BTreeMap::new() },
        seed: 0,
    };
    let manifest = CorpusManifest {
        pairs: vec![],
        relation_specs: RelationConfig::entity_questions().0,
        provenance: Default::default(),
    };
    let dir = tempfile::tempdir()?;
    for v in [variant.clone(), build_idk_variant(&variant, None)] {
        let out = dir.path().join(&v.name);
        export_trainer_files(&v, &manifest, &TrainerHyperparameters::default(), &out)?;
        println!("== {}/train.jsonl", v.name);
        print!("{}", std::fs::read_to_string(out.join("train.jsonl"))?);
        let (back, _) = import_trainer_files(&out)?;
        println!("round trip identical: {}", back == v);
    }
    Ok(())
}
