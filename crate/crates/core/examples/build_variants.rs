//! Builds fixed-size mixtures with a growing share of Unknown examples, plus
//! the Known-only ablation and the abstention variant.

use knowledge_probe::annotate::{AnnotatedExample, PCorrectEstimate};
use knowledge_probe::variants::{
    build_idk_variant, build_known_ablation, build_mixture, compute_fixed_size, KnownMix, MixtureSpec,
};
use knowledge_probe::{KnowledgeCategory, QAPair, Split};

fn pool(rel: &str, counts: [usize; 4]) -> Vec<AnnotatedExample> {
    let mut out = Vec::new();
    for (c, &n) in KnowledgeCategory::ALL.iter().zip(&counts) {
        for i in 0..n {
            let id = format!("{rel}-train-{:05}", out.len());
            out.push(AnnotatedExample {
                pair: QAPair {
                    id: id.clone(),
                    relation_id: rel.into(),
                    subject: id.clone(),
                    question: format!("Q {id}?"),
                    gold_answers: vec![format!("A {c} {i}")],
                    split: Split::Train,
                },
                estimate: PCorrectEstimate::new(0, 10, 0, 160),
                category: *c,
                policy_fingerprint: String::new(),
            });
        }
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut train = pool("P19", [40, 25, 30, 60]);
    train.extend(pool("P36", [20, 35, 25, 30]));
    let fixed = compute_fixed_size(&train);
    println!("fixed size {}", fixed.size);

    for pct in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let spec = MixtureSpec::plan(&train, pct, fixed.size, 3, KnownMix::Natural)?;
        let v = build_mixture(&train, &spec)?;
        let ablation = build_known_ablation(&v).map(|k| k.len().to_string()).unwrap_or_else(|e| e.to_string());
        println!(
            "{:<10} size {} unknown {:>3} relations {:?} known-only {}",
            v.name,
            v.len(),
            v.unknown_count(),
            v.relation_counts(),
            ablation
        );
        if pct == 50.0 {
            let idk = build_idk_variant(&v, None);
            let first = idk.examples.iter().find(|e| e.category == KnowledgeCategory::Unknown).unwrap();
            println!("{:<10} {} -> {:?}", idk.name, first.pair.id, first.target_answer);
        }
    }
    Ok(())
}
