//! Writes the CSV tables behind the accuracy-vs-Unknown and training
//! dynamics plots for a small synthetic study.

use knowledge_probe::annotate::{AnnotatedExample, PCorrectEstimate};
use knowledge_probe::dynamics::{compute_series, regression_points, EvalSplits, RegressionTarget};
use knowledge_probe::plot::{emit_plot_data, Duration, PlotInputs};
use knowledge_probe::regression::fit_linear_model;
use knowledge_probe::simulate::{simulate_run, LearnerConfig};
use knowledge_probe::variants::{build_mixture, KnownMix, MixtureSpec};
use knowledge_probe::{KnowledgeCategory, QAPair, Split};

fn pair(id: String, split: Split) -> QAPair {
    QAPair {
        question: format!("Where was {id} born?"),
        gold_answers: vec![format!("Town of {id}")],
        relation_id: "P19".into(),
        subject: id.clone(),
        id,
        split,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train: Vec<AnnotatedExample> = (0..80)
        .map(|i| AnnotatedExample {
            pair: pair(format!("P19-train-{i:05}"), Split::Train),
            estimate: PCorrectEstimate::new(0, 10, 0, 160),
            category: KnowledgeCategory::ALL[i % 4],
            policy_fingerprint: String::new(),
        })
        .collect();
    let splits = EvalSplits {
        dev: (0..20).map(|i| pair(format!("P19-dev-{i:05}"), Split::Dev)).collect(),
        test: (0..50).map(|i| pair(format!("P19-test-{i:05}"), Split::Test)).collect(),
        ood_test: vec![],
    };
    let learner = LearnerConfig { epochs: 12, ..LearnerConfig::default() };
    let mut series = Vec::new();
    for pct in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let v = build_mixture(&train, &MixtureSpec::plan(&train, pct, 20, 1, KnownMix::Natural)?)?;
        series.push((pct, compute_series(&simulate_run(&v, &splits, &learner), &v, &splits)?));
    }
    let all: Vec<_> = series.iter().map(|(_, s)| s.clone()).collect();
    let fit = fit_linear_model(&regression_points(&all, RegressionTarget::Test))?;

    let out = tempfile::tempdir()?;
    let inputs = PlotInputs {
        series: series.iter().map(|(p, s)| (*p, s)).collect(),
        durations: vec![Duration::Epochs(3), Duration::Epochs(12), Duration::EarlyStop],
        fit: Some((&fit, RegressionTarget::Test)),
        ptrue_curve: None,
    };
    for f in emit_plot_data(&inputs, out.path())? {
        println!("wrote {}", f.file_name().unwrap().to_string_lossy());
    }
    print!("\n{}", std::fs::read_to_string(out.path().join("accuracy_vs_unknown.csv"))?);
    Ok(())
}
