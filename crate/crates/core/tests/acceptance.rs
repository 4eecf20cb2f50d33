//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use knowledge_probe::annotate::{
    annotate_dataset, assign_category, derive_seed, estimate_p_correct, sample_exemplar_sets, write_annotations,
    AnnotatedExample, ExemplarSet, PCorrectEstimate, SamplingPolicy,
};
use knowledge_probe::cli::RunConfig;
use knowledge_probe::corpus::{apply_filters, import_raw, RelationConfig};
use knowledge_probe::dynamics::{compute_series, detect_early_stop, regression_points, DynamicsSeries, EvalSplits, RegressionTarget};
use knowledge_probe::eval::{exact_match, normalize_answer};
use knowledge_probe::export::{export_trainer_files, import_trainer_files, TrainerHyperparameters};
use knowledge_probe::gateway::{
    AnswerDistribution, Backend, BackendError, CacheStore, CompletionRequest, EndpointProfile, Gateway, GreedyPolicy,
    KnowledgeTable, MockBackend, TopK,
};
use knowledge_probe::ptrue::{ptrue_prompt, ptrue_threshold_sweep, PTrueRecord};
use knowledge_probe::regression::{fit_linear_model, residual_projection, FitPoint, LinearFit};
use knowledge_probe::simulate::simulate_run;
use knowledge_probe::stats::{paired_t_test, partition_indices, t_test_differences};
use knowledge_probe::variants::{
    build_idk_variant, build_known_ablation, build_mixture, compute_fixed_size, DatasetVariant, KnownMix,
    MixtureSpec, VariantExample, VariantSpec,
};
use knowledge_probe::{KnowledgeCategory, QAPair, Split};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("category oracle equivalence", c1_category_oracle),
        ("annotation cost and resumability", c2_annotation_cost),
        ("mixture invariants", c3_mixtures),
        ("regression recovery", c4_regression),
        ("paired t-test statistics", c5_statistics),
        ("exact-match suite", c6_exact_match),
        ("end-to-end mock study", c7_mock_study),
        ("P(True) sweep", c8_ptrue),
        ("export format", c9_export),
        ("determinism", c10_determinism),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of 10 criteria passed in {:.1}s", 10 - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

fn oracle_normalize(s: &str) -> String {
    let lowered: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lowered.split_whitespace().filter(|w| !["a", "an", "the"].contains(w)).collect::<Vec<_>>().join(" ")
}

fn oracle_prompt(set: &ExemplarSet, target: &QAPair) -> String {
    let mut p = String::new();
    for e in &set.exemplars {
        p += &format!("Q: {}\nA: {}\n", e.question, e.gold_answers[0]);
    }
    p + &format!("Q: {}\nA:", target.question)
}

/// Replays the greedy and sampled schedule straight against `backend` and
/// classifies from the observed fractions.
fn oracle_category(
    backend: &MockBackend,
    target: &QAPair,
    sets: &[ExemplarSet],
    policy: &SamplingPolicy,
) -> (KnowledgeCategory, u32, u32) {
    let gold = oracle_normalize(&target.gold_answers[0]);
    let hit = |t: &String| oracle_normalize(t) == gold;
    let (mut g, mut s) = (0u32, 0u32);
    for set in sets {
        let prompt = oracle_prompt(set, target);
        let greedy = CompletionRequest {
            prompt: prompt.clone(),
            temperature: 0.0,
            top_k: TopK::Unbounded,
            n_samples: 1,
            max_tokens: policy.max_tokens,
            seed: None,
        };
        g += backend.generate(&greedy).unwrap().iter().filter(|t| hit(t)).count() as u32;
        let sampled = CompletionRequest {
            prompt,
            temperature: 0.5,
            top_k: TopK::Limited(40),
            n_samples: 16,
            max_tokens: policy.max_tokens,
            seed: Some(derive_seed(policy.rng_seed, &["sample", &target.id, &set.set_index.to_string()])),
        };
        s += backend.generate(&sampled).unwrap().iter().filter(|t| hit(t)).count() as u32;
    }
    let gf = g as f64 / sets.len() as f64;
    let sf = s as f64 / (16 * sets.len()) as f64;
    let cat = if gf == 1.0 {
        KnowledgeCategory::HighlyKnown
    } else if gf > 0.0 {
        KnowledgeCategory::MaybeKnown
    } else if sf > 0.0 {
        KnowledgeCategory::WeaklyKnown
    } else {
        KnowledgeCategory::Unknown
    };
    (cat, g, s)
}

fn random_table(rng: &mut ChaCha8Rng, target: &QAPair) -> KnowledgeTable {
    let mut table = KnowledgeTable::default();
    if rng.gen_bool(0.1) {
        return table;
    }
    let gold = target.gold();
    let spellings = [gold.to_string(), format!("the {}.", gold.to_lowercase()), format!("{}!", gold.to_uppercase())];
    let wrong = ["Nowhere", "Town 3", "", "City P19"];
    let mut pairs: Vec<(String, f64)> = Vec::new();
    for _ in 0..rng.gen_range(1..=4) {
        let answer = if rng.gen_bool(0.5) {
            spellings[rng.gen_range(0..spellings.len())].clone()
        } else {
            wrong[rng.gen_range(0..wrong.len())].to_string()
        };
        let w: f64 = match rng.gen_range(0..4) {
            0 => rng.gen_range(0.001..0.02),
            _ => rng.gen_range(0.05..1.0),
        };
        pairs.push((answer, w));
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    table.insert(target.question.clone(), AnswerDistribution::from_pairs(pairs.into_iter().map(|(a, w)| (a, w / total))));
    table
}

fn c1_category_oracle() -> Outcome {
    let t0 = Instant::now();
    let (train, dev) = common::small_corpus(&["P19"], 1);
    let target = &train[0];
    let mut rng = ChaCha8Rng::seed_from_u64(20240501);
    let mut seen: BTreeMap<KnowledgeCategory, usize> = BTreeMap::new();
    const TABLES: usize = 1000;
    for case in 0..TABLES {
        let table = random_table(&mut rng, target);
        let mock_seed: u64 = rng.gen();
        let greedy = if rng.gen_bool(0.5) {
            GreedyPolicy::Mode
        } else {
            GreedyPolicy::PromptSensitive { floor: rng.gen_range(0.01..0.5) }
        };
        let policy = SamplingPolicy::with_seed(rng.gen());
        let sets = sample_exemplar_sets(&dev, "P19", &policy).map_err(err)?;
        let mock = MockBackend::new(table.clone(), mock_seed).map_err(err)?.with_greedy_policy(greedy);
        let gw = Gateway::new(EndpointProfile::mock(), Arc::new(mock)).map_err(err)?;
        let est = estimate_p_correct(target, &sets, &policy, &gw).map_err(err)?;
        let got = assign_category(&est);
        let replay = MockBackend::new(table, mock_seed).map_err(err)?.with_greedy_policy(greedy);
        let (want, g, s) = oracle_category(&replay, target, &sets, &policy);
        ensure(got == want && est.greedy_correct == g && est.sampled_correct == s, || {
            format!("table {case}: got {got} {est:?}, oracle {want} ({g}/10, {s}/160)")
        })?;
        *seen.entry(want).or_default() += 1;
    }
    ensure(seen.len() == 4, || format!("random tables covered only {seen:?}"))?;

    let mut cells = 0;
    for g in 0..=10u32 {
        for s in 0..=160u32 {
            let preds = [g == 10, g > 0 && g < 10, g == 0 && s > 0, g == 0 && s == 0];
            ensure(preds.iter().filter(|&&b| b).count() == 1, || format!("({g},{s}) not in exactly one category"))?;
            let idx = preds.iter().position(|&b| b).unwrap();
            let got = assign_category(&PCorrectEstimate::new(g, 10, s, 160));
            ensure(got == KnowledgeCategory::ALL[idx], || format!("({g},{s}) assigned {got}"))?;
            cells += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    let mix: Vec<String> = seen.iter().map(|(c, n)| format!("{c}={n}")).collect();
    Ok(format!("{TABLES} tables agree ({}), {cells} count pairs partition cleanly", mix.join(" ")))
}

// 2 ------------------------------------------------------------------------

/// Delegates to a mock; refuses every call after `budget` and records the
/// requests it served.
struct Interruptible {
    inner: MockBackend,
    budget: AtomicUsize,
    served: Arc<Mutex<Vec<String>>>,
}

impl Backend for Interruptible {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn generate(&self, r: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        if self.budget.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1)).is_err() {
            return Err(BackendError::Auth("interrupted".into()));
        }
        self.served.lock().unwrap().push(format!("{:?}|{}|{:?}|{}", r.seed, r.temperature, r.top_k, r.prompt));
        self.inner.generate(r)
    }
}

fn c2_annotation_cost() -> Outcome {
    let (train, dev) = common::small_corpus(&["P19", "P36"], 10);
    let table = common::table_for(&train, |i| [1.0, 0.6, 0.03, 0.0, 0.3][i % 5]);
    let policy = SamplingPolicy::with_seed(9);
    let mock = || MockBackend::new(table.clone(), 4).unwrap().with_greedy_policy(GreedyPolicy::PromptSensitive { floor: 0.2 });

    let cold = tempfile::tempdir().map_err(err)?;
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(mock())).map_err(err)?.with_cache(CacheStore::open(cold.path()).map_err(err)?);
    let reference = annotate_dataset(&train, &dev, &policy, &gw).map_err(err)?;
    let generations = gw.stats().generations();
    ensure(generations == 20 * 170, || format!("cold cache issued {generations} generations"))?;
    let ref_path = cold.path().join("reference.jsonl");
    write_annotations(&ref_path, &reference.examples).map_err(err)?;

    let warm = tempfile::tempdir().map_err(err)?;
    let served = Arc::new(Mutex::new(Vec::new()));
    let cut = Interruptible { inner: mock(), budget: AtomicUsize::new(150), served: Arc::clone(&served) };
    let gw1 = Gateway::new(EndpointProfile::mock(), Arc::new(cut)).map_err(err)?.with_cache(CacheStore::open(warm.path()).map_err(err)?);
    ensure(annotate_dataset(&train, &dev, &policy, &gw1).is_err(), || "interrupted run did not fail".into())?;
    let before = served.lock().unwrap().len();

    let resume = Interruptible { inner: mock(), budget: AtomicUsize::new(usize::MAX), served: Arc::clone(&served) };
    let gw2 = Gateway::new(EndpointProfile::mock(), Arc::new(resume)).map_err(err)?.with_cache(CacheStore::open(warm.path()).map_err(err)?);
    let resumed = annotate_dataset(&train, &dev, &policy, &gw2).map_err(err)?;
    let all = served.lock().unwrap().clone();
    let distinct: HashSet<&String> = all.iter().collect();
    ensure(distinct.len() == all.len(), || format!("{} duplicate requests", all.len() - distinct.len()))?;
    ensure(all.len() == 400, || format!("{} requests served across both runs, expected 400", all.len()))?;
    ensure(gw2.stats().cache_hits() == before, || format!("resume hit the cache {} times, expected {before}", gw2.stats().cache_hits()))?;

    let out_path = warm.path().join("resumed.jsonl");
    write_annotations(&out_path, &resumed.examples).map_err(err)?;
    let (a, b) = (std::fs::read(&ref_path).map_err(err)?, std::fs::read(&out_path).map_err(err)?);
    ensure(a == b, || "resumed annotations differ from the uninterrupted run".into())?;
    Ok(format!("{generations} generations cold; interrupted after {before} requests, resumed with 0 duplicates, output identical"))
}

// 3 ------------------------------------------------------------------------

/// Hamilton apportionment computed from exact rational quotas.
fn oracle_lr(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let mut seats: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(total * weights[i] % sum), i));
    let left = total - seats.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        seats[i] += 1;
    }
    seats
}

fn c3_mixtures() -> Outcome {
    let mut train = common::synthetic("P1", [220, 180, 160, 200], 0);
    train.extend(common::synthetic("P2", [150, 130, 140, 170], 1000));
    train.extend(common::synthetic("P3", [160, 155, 150, 175], 2000));
    let fixed = compute_fixed_size(&train);
    ensure(fixed.size == 440, || format!("fixed size {}", fixed.size))?;
    let marginals = oracle_lr(400, &[160, 130, 150]);
    let mut lines = Vec::new();
    for pct in [0usize, 25, 50, 75, 100] {
        let spec = MixtureSpec::plan(&train, pct as f64, 400, 17, KnownMix::Natural).map_err(err)?;
        let v = build_mixture(&train, &spec).map_err(err)?;
        ensure(v.len() == 400, || format!("X={pct}: size {}", v.len()))?;
        let ids: BTreeSet<&str> = v.examples.iter().map(|e| e.pair.id.as_str()).collect();
        ensure(ids.len() == 400, || format!("X={pct}: repeated examples"))?;
        let counts: Vec<usize> = v.relation_counts().into_values().collect();
        ensure(counts == marginals, || format!("X={pct}: relation counts {counts:?}, oracle {marginals:?}"))?;

        let target = (400 * pct + 50) / 100;
        let want_unk = {
            let mut seats: Vec<usize> = marginals.iter().map(|n| n * pct / 100).collect();
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by_key(|&i| (std::cmp::Reverse(marginals[i] * pct % 100), i));
            let left = target - seats.iter().sum::<usize>();
            for &i in order.iter().take(left) {
                seats[i] += 1;
            }
            seats
        };
        let got_unk: Vec<usize> = ["P1", "P2", "P3"]
            .iter()
            .map(|r| v.examples.iter().filter(|e| e.pair.relation_id == *r && e.category == KnowledgeCategory::Unknown).count())
            .collect();
        ensure(got_unk == want_unk, || format!("X={pct}: Unknown per relation {got_unk:?}, oracle {want_unk:?}"))?;

        let realized = v.unknown_count();
        match build_known_ablation(&v) {
            Ok(k) => ensure(k.len() == 400 - realized && k.unknown_count() == 0, || format!("X={pct}: ablation size {}", k.len()))?,
            Err(_) => ensure(realized == 400, || format!("X={pct}: ablation refused with {realized} Unknown"))?,
        }
        if pct == 25 {
            let k = build_known_ablation(&v).map_err(err)?;
            ensure(k.len() == 300, || format!("X=25 ablation has {}", k.len()))?;
        }
        lines.push(format!("X={pct}:{realized}"));
    }
    Ok(format!("relation counts {marginals:?} in every variant; Unknown {}; D_25unk_Known = 300", lines.join(" ")))
}

// 4 ------------------------------------------------------------------------

fn planted_points(rng: &mut ChaCha8Rng, n: usize, beta: [f64; 3], noise: f64) -> Vec<FitPoint> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    (0..n)
        .map(|_| {
            let d = [400.0, 1000.0, 6142.0][rng.gen_range(0..3)];
            let n_kn = rng.gen_range(0..=d as u32) as f64;
            let n_unk = rng.gen_range(0..=(d - n_kn) as u32) as f64;
            let clean = beta[0] + beta[1] * n_kn / d + beta[2] * n_unk / d;
            let eps = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            FitPoint { accuracy: clean + eps, n_kn, n_unk, d_size: d }
        })
        .collect()
}

fn nalgebra_fit(points: &[FitPoint]) -> [f64; 3] {
    let x = nalgebra::DMatrix::from_fn(points.len(), 3, |i, j| points[i].regressors()[j]);
    let y = nalgebra::DVector::from_iterator(points.len(), points.iter().map(|p| p.accuracy));
    let b = x.svd(true, true).solve(&y, 1e-14).unwrap();
    [b[0], b[1], b[2]]
}

fn max_abs_diff(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c4_regression() -> Outcome {
    let beta = [0.42, 0.31, -0.57];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean = planted_points(&mut rng, 200, beta, 0.0);
    let fit = fit_linear_model(&clean).map_err(err)?;
    let e_clean = max_abs_diff(fit.coefficients(), beta);
    ensure(e_clean <= 1e-9, || format!("noiseless error {e_clean:e}"))?;
    ensure(fit.r_squared == 1.0, || format!("noiseless R^2 {}", fit.r_squared))?;
    let e_oracle = max_abs_diff(fit.coefficients(), nalgebra_fit(&clean));
    ensure(e_oracle <= 1e-9, || format!("differs from SVD least squares by {e_oracle:e}"))?;

    let noisy = planted_points(&mut rng, 200, beta, 0.01);
    let fit = fit_linear_model(&noisy).map_err(err)?;
    let e_noisy = max_abs_diff(fit.coefficients(), beta);
    ensure(e_noisy <= 0.05, || format!("noisy error {e_noisy}"))?;
    ensure(fit.r_squared >= 0.95, || format!("noisy R^2 {}", fit.r_squared))?;
    let e_oracle_noisy = max_abs_diff(fit.coefficients(), nalgebra_fit(&noisy));
    ensure(e_oracle_noisy <= 1e-9, || format!("noisy fit differs from SVD least squares by {e_oracle_noisy:e}"))?;
    let ortho = residual_projection(&fit, &noisy).iter().map(|v| v.abs()).fold(0.0, f64::max);
    ensure(ortho <= 1e-8, || format!("|X^T r| = {ortho:e}"))?;
    Ok(format!(
        "noiseless error {e_clean:.1e} (R^2=1); noisy error {e_noisy:.4}, R^2={:.4}; |X^T r| {ortho:.1e}",
        fit.r_squared
    ))
}

// 5 ------------------------------------------------------------------------

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
}

/// Two-sided tail mass of Student's t by quadrature of the unnormalized
/// density, mapped from [0, inf) onto [0, 1).
fn oracle_p(t: f64, df: f64) -> f64 {
    let dens = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let from = |lo: f64| {
        let g = move |u: f64| {
            if u >= 1.0 {
                return if df == 1.0 { 1.0 } else { 0.0 };
            }
            let x = lo + u / (1.0 - u);
            dens(x) / ((1.0 - u) * (1.0 - u))
        };
        adaptive_simpson(&g, 0.0, 1.0, 1e-13)
    };
    from(t.abs()) / from(0.0)
}

fn c5_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shapes = [(50, 2), (60, 3), (80, 4), (100, 5), (120, 6), (200, 10), (300, 20), (1000, 100), (1030, 100)];
    let mut worst = 0.0f64;
    for case in 0..25 {
        let (n, k) = shapes[case % shapes.len()];
        let (pa, pb) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
        let a: BTreeMap<String, bool> = (0..n).map(|i| (format!("e{i:04}"), rng.gen_bool(pa))).collect();
        let b: BTreeMap<String, bool> = (0..n).map(|i| (format!("e{i:04}"), rng.gen_bool(pb))).collect();
        let seed = case as u64;
        let report = paired_t_test(&a, &b, k, seed).map_err(err)?;

        let ids: Vec<&String> = a.keys().collect();
        let diffs: Vec<f64> = partition_indices(n, k, seed)
            .iter()
            .map(|part| {
                let len = part.len() as f64;
                part.iter().map(|&i| f64::from(u8::from(a[ids[i]])) - f64::from(u8::from(b[ids[i]]))).sum::<f64>() / len
            })
            .collect();
        let kf = k as f64;
        let mean = diffs.iter().sum::<f64>() / kf;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (kf - 1.0)).sqrt();
        let t = mean / (sd / kf.sqrt());
        ensure((report.t_statistic - t).abs() <= 1e-9 * t.abs().max(1.0), || format!("case {case}: t {} vs {t}", report.t_statistic))?;
        let p = oracle_p(t, kf - 1.0);
        let diff = (report.p_value - p).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-8, || format!("case {case} (n={n}, k={k}, t={t:.4}): p {} vs oracle {p}", report.p_value))?;
    }

    let same: BTreeMap<String, bool> = (0..200).map(|i| (format!("e{i}"), i % 3 == 0)).collect();
    let r = paired_t_test(&same, &same, 10, 1).map_err(err)?;
    ensure(r.p_value == 1.0 && r.t_statistic == 0.0, || format!("identical inputs gave p={}", r.p_value))?;
    ensure(t_test_differences(&[0.25, 0.25, 0.25]).p_value == 1.0, || "constant differences".into())?;

    for (n, k) in [(1030, 100), (7, 3), (100, 100), (999, 2)] {
        let parts = partition_indices(n, k, 3);
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        let covered: BTreeSet<usize> = parts.iter().flatten().copied().collect();
        ensure(spread <= 1 && covered.len() == n && sizes.iter().sum::<usize>() == n, || format!("partition {n}/{k} sizes {sizes:?}"))?;
    }
    Ok(format!("25 cases within {worst:.1e} of quadrature; identical inputs p=1; partitions balanced"))
}

// 6 ------------------------------------------------------------------------

fn c6_exact_match() -> Outcome {
    let cases: [(&str, &[&str], bool); 50] = [
        ("Paris", &["Paris"], true),
        ("paris", &["Paris"], true),
        ("PARIS", &["Paris"], true),
        (" Paris ", &["Paris"], true),
        ("Paris.", &["Paris"], true),
        ("the Paris", &["Paris"], true),
        ("The United States", &["United States"], true),
        ("an apple", &["apple"], true),
        ("A apple", &["an apple"], true),
        ("U.S.", &["US"], true),
        ("1,000", &["1000"], true),
        ("New   York", &["New York"], true),
        ("New-York", &["New York"], false),
        ("New York City", &["New York"], false),
        ("Lyon", &["Paris"], false),
        ("", &["Paris"], false),
        ("", &[""], true),
        ("the", &[""], true),
        ("a an the", &["The"], true),
        ("theater", &["theater"], true),
        ("theater", &["the ater"], false),
        ("Anne", &["anne"], true),
        ("Anne", &["an ne"], false),
        ("café", &["cafe"], false),
        ("Café", &["café"], true),
        ("Ünïcode", &["ünïcode"], true),
        ("O'Brien", &["OBrien"], true),
        ("O\u{2019}Brien", &["OBrien"], true),
        ("Rock \u{2014} Roll", &["Rock Roll"], true),
        ("\u{00BF}Qu\u{00E9}?", &["qu\u{00E9}"], true),
        ("(Berlin)", &["Berlin"], true),
        ("[Berlin]", &["Berlin"], true),
        ("\"Berlin\"", &["Berlin"], true),
        ("Berlin!", &["Berlin?"], true),
        ("Berlin", &["Bonn", "Berlin"], true),
        ("Bonn", &["Berlin", "Munich"], false),
        ("geneticist", &["geneticist"], true),
        ("a geneticist", &["geneticist"], true),
        ("geneticists", &["geneticist"], false),
        ("1990", &["1990."], true),
        ("1990", &["1991"], false),
        ("3.14", &["314"], true),
        ("Saint-Louis", &["SaintLouis"], true),
        ("Saint Louis", &["St. Louis"], false),
        ("The Hague", &["Hague"], true),
        ("Den Haag", &["The Hague"], false),
        ("Tab\tSeparated", &["tab separated"], true),
        ("line\nbreak", &["line break"], true),
        ("A.", &[""], true),
        ("I don't know", &["I dont know"], true),
    ];
    let mut wrong = Vec::new();
    for (i, (pred, golds, want)) in cases.iter().enumerate() {
        if exact_match(pred, golds) != *want {
            wrong.push(format!("#{i} {pred:?} vs {golds:?}"));
        }
    }
    ensure(wrong.is_empty(), || format!("mismatches: {}", wrong.join(", ")))?;
    let table: [(&str, &str); 4] = [
        ("The  Quick, Brown fox!", "quick brown fox"),
        ("  an  Apple a day ", "apple day"),
        ("\u{00AB}Hola\u{00BB}", "hola"),
        ("", ""),
    ];
    for (input, want) in table {
        ensure(normalize_answer(input) == want, || format!("normalize({input:?}) = {:?}", normalize_answer(input)))?;
    }

    let mut runner = proptest::test_runner::TestRunner::new(proptest::test_runner::Config { cases: 2000, failure_persistence: None, ..Default::default() });
    runner
        .run(&"\\PC{0,48}", |s| {
            let once = normalize_answer(&s);
            proptest::prop_assert_eq!(normalize_answer(&once), once);
            Ok(())
        })
        .map_err(|e| format!("idempotence: {e}"))?;
    Ok("50 fixture cases exact; normalization idempotent over 2000 random strings".into())
}

// 7 ------------------------------------------------------------------------

struct Study {
    series: Vec<DynamicsSeries>,
    fit: LinearFit,
}

fn run_study() -> Result<Study, String> {
    let demo = common::demo_dir();
    let cfg = RunConfig::load(&demo.join("run.toml")).map_err(err)?;
    let manifest = apply_filters(import_raw(&demo.join("raw"), &RelationConfig::entity_questions()).map_err(err)?);
    let text = std::fs::read_to_string(cfg.mock.table.as_ref().unwrap()).map_err(err)?;
    let table = KnowledgeTable::from_json(&text).map_err(err)?;
    let mock = MockBackend::new(table, cfg.mock.seed).map_err(err)?.with_greedy_policy(cfg.mock.greedy);
    let gw = Gateway::new(EndpointProfile::mock(), Arc::new(mock)).map_err(err)?;
    let targets: Vec<QAPair> = manifest.pairs.iter().filter(|p| p.split != Split::Dev).cloned().collect();
    let run = annotate_dataset(&targets, &manifest.split(Split::Dev), &cfg.sampling, &gw).map_err(err)?;
    let train: Vec<AnnotatedExample> = run.examples.into_iter().filter(|e| e.pair.split == Split::Train).collect();
    let size = compute_fixed_size(&train).size;
    let splits = EvalSplits::from_manifest(&manifest);
    let mut series = Vec::new();
    for pct in [0.0, 50.0, 100.0] {
        let spec = MixtureSpec::plan(&train, pct, size, cfg.variants.seed, KnownMix::Natural).map_err(err)?;
        let v = build_mixture(&train, &spec).map_err(err)?;
        series.push(compute_series(&simulate_run(&v, &splits, &cfg.learner), &v, &splits).map_err(err)?);
    }
    let fit = fit_linear_model(&regression_points(&series, RegressionTarget::Test)).map_err(err)?;
    Ok(Study { series, fit })
}

fn c7_mock_study() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig::load(&common::demo_dir().join("run.toml")).map_err(err)?;
    ensure(cfg.learner.p_fit_known > cfg.learner.p_fit_unknown, || "learner must fit Known faster".into())?;
    ensure(cfg.learner.test.coef_kn > 0.0 && cfg.learner.test.coef_unk < 0.0, || "coupling signs".into())?;
    let study = run_study()?;
    let mut checked = 0;
    for s in &study.series {
        for p in &s.epochs {
            if let (Some(kn), Some(unk)) = (s.known_fitted_fraction(p), s.unknown_fitted_fraction(p)) {
                ensure(kn >= unk, || format!("{} epoch {}: Known fitted {kn} < Unknown fitted {unk}", s.variant_name, p.epoch))?;
                checked += 1;
            }
        }
        let best = s.epochs.iter().map(|p| p.dev_accuracy).fold(f64::NEG_INFINITY, f64::max);
        let first = s.epochs.iter().find(|p| p.dev_accuracy == best).map(|p| p.epoch);
        ensure(detect_early_stop(s) == first, || format!("{}: early stop {:?}, argmax {first:?}", s.variant_name, detect_early_stop(s)))?;
    }
    ensure(checked > 0, || "no epoch had both Known and Unknown examples".into())?;
    let f = &study.fit;
    ensure(f.beta_kn > 0.0 && f.beta_unk < 0.0, || format!("beta_kn={} beta_unk={}", f.beta_kn, f.beta_unk))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    let stops: Vec<String> = study.series.iter().map(|s| format!("{}@{}", s.variant_name, detect_early_stop(s).unwrap_or(0))).collect();
    Ok(format!(
        "|D|={}, Known>=Unknown fitted at {checked} epochs; beta_kn={:+.3} beta_unk={:+.3} R^2={:.3}; early stop {}",
        study.series[0].d_size,
        f.beta_kn,
        f.beta_unk,
        f.r_squared,
        stops.join(" ")
    ))
}

// 8 ------------------------------------------------------------------------

fn c8_ptrue() -> Outcome {
    let expected = "Question: Where was Bruce Smith born?\nProposed Answer: Faribault\nIs the proposed answer:\n (A) True\n (B) False\nThe proposed answer is:";
    ensure(ptrue_prompt("Where was Bruce Smith born?", "Faribault") == expected, || "prompt bytes differ".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut points = 0;
    for case in 0..200 {
        let n = rng.gen_range(1..80);
        let samples = [4u32, 10, 16][case % 3];
        let records: Vec<PTrueRecord> = (0..n)
            .map(|i| PTrueRecord { example_id: format!("e{i}"), p_true: rng.gen_range(0..=samples) as f64 / samples as f64, n_probe_samples: samples })
            .collect();
        let correct: BTreeMap<String, bool> = (0..n).map(|i| (format!("e{i}"), rng.gen_bool(0.4))).collect();
        let curve = ptrue_threshold_sweep(&records, &correct).map_err(err)?;

        let mut thresholds: Vec<f64> = records.iter().map(|r| r.p_true).collect();
        thresholds.extend([0.0, 1.0]);
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        ensure(curve.len() == thresholds.len(), || format!("case {case}: {} points, expected {}", curve.len(), thresholds.len()))?;
        for (p, &t) in curve.iter().zip(&thresholds) {
            let below: Vec<&PTrueRecord> = records.iter().filter(|r| r.p_true < t).collect();
            let right = below.iter().filter(|r| correct[&r.example_id]).count();
            let acc = (!below.is_empty()).then(|| right as f64 / below.len() as f64);
            ensure(
                p.threshold == t && p.n_unknown == below.len() && p.fraction_unknown == below.len() as f64 / n as f64 && p.accuracy_on_unknown == acc,
                || format!("case {case}: point {p:?} differs from enumeration at threshold {t}"),
            )?;
            points += 1;
        }
        ensure(curve.windows(2).all(|w| w[0].fraction_unknown <= w[1].fraction_unknown), || format!("case {case}: not monotone"))?;
    }
    Ok(format!("{points} curve points over 200 score sets equal enumeration; monotone; prompt bytes exact"))
}

// 9 ------------------------------------------------------------------------

fn c9_export() -> Outcome {
    let ex = |id: &str, q: &str, a: &str, c: KnowledgeCategory| VariantExample {
        pair: QAPair {
            id: id.into(),
            relation_id: "P106".into(),
            subject: String::new(),
            question: q.into(),
            gold_answers: vec![a.into()],
            split: Split::Train,
        },
        target_answer: a.into(),
        category: c,
    };
    let v = DatasetVariant {
        name: "D_50unk".into(),
        examples: vec![
            ex("P106-train-00001", "What kind of work does Ron Konopka do?", "geneticist", KnowledgeCategory::HighlyKnown),
            ex("P106-train-00002", "What kind of work does Benedict Spinoza do?", "philosopher", KnowledgeCategory::Unknown),
        ],
        spec: VariantSpec::Natural { target_size: 2, per_relation: BTreeMap::new() },
        seed: 1,
    };
    let manifest = knowledge_probe::corpus::CorpusManifest {
        pairs: vec![],
        relation_specs: RelationConfig::entity_questions().0,
        provenance: Default::default(),
    };
    let hyper = TrainerHyperparameters::default();
    let dir = tempfile::tempdir().map_err(err)?;
    let expect = |target2: &str| {
        format!(
            "{{\"id\":\"P106-train-00001\",\"input\":\"Answer the following question.\\nWhat kind of work does Ron Konopka do?\",\"target\":\"geneticist\"}}\n\
             {{\"id\":\"P106-train-00002\",\"input\":\"Answer the following question.\\nWhat kind of work does Benedict Spinoza do?\",\"target\":\"{target2}\"}}\n"
        )
    };
    for (variant, target2) in [(v.clone(), "philosopher"), (build_idk_variant(&v, None), "I don't know")] {
        let out = dir.path().join(&variant.name);
        export_trainer_files(&variant, &manifest, &hyper, &out).map_err(err)?;
        let bytes = std::fs::read_to_string(out.join("train.jsonl")).map_err(err)?;
        ensure(bytes == expect(target2), || format!("{}: train.jsonl was {bytes:?}", variant.name))?;
        let (back, meta) = import_trainer_files(&out).map_err(err)?;
        ensure(back == variant, || format!("{}: round trip changed the variant", variant.name))?;
        ensure(meta.hyperparameters == hyper, || "hyperparameters lost".into())?;
    }
    Ok("train.jsonl byte-exact for D and D_IDK; export -> import is the identity".into())
}

// 10 -----------------------------------------------------------------------

const DEMO_STEPS: [&[&str]; 10] = [
    &["import"],
    &["annotate"],
    &["build"],
    &["export"],
    &["simulate"],
    &["dynamics"],
    &["regress"],
    &["ttest", "--variant-a", "D_0unk", "--variant-b", "D_100unk"],
    &["ptrue"],
    &["plot"],
];

fn run_demo(out: &Path) -> Result<(), String> {
    let cfg = common::demo_dir().join("run.toml");
    for step in DEMO_STEPS {
        let o = std::process::Command::new(env!("CARGO_BIN_EXE_kprobe"))
            .args(step)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .env_remove("RUST_LOG")
            .output()
            .map_err(err)?;
        ensure(o.status.success(), || format!("{step:?} failed: {}", String::from_utf8_lossy(&o.stderr)))?;
    }
    Ok(())
}

/// Relative path -> bytes of every file under `root`, skipping the
/// completion cache.
fn snapshot_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            let rel = p.strip_prefix(root).unwrap().to_path_buf();
            if rel == Path::new("cache") {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn c10_determinism() -> Outcome {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().map_err(err)?;
    let out = tmp.path().join("out");
    run_demo(&out)?;
    let first = snapshot_tree(&out);
    std::fs::remove_dir_all(&out).map_err(err)?;
    run_demo(&out)?;
    let second = snapshot_tree(&out);
    ensure(first.keys().eq(second.keys()), || "the two demo runs wrote different file sets".into())?;
    let differing: Vec<String> = first.iter().filter(|(k, v)| second[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("files differ: {}", differing.join(", ")))?;

    let a = run_study()?;
    let b = run_study()?;
    let ja = serde_json::to_string(&(&a.series, &a.fit)).map_err(err)?;
    let jb = serde_json::to_string(&(&b.series, &b.fit)).map_err(err)?;
    ensure(ja == jb, || "library study differs between runs".into())?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1}s"))?;
    Ok(format!("two demo runs wrote {} identical files; study repeat identical", first.len()))
}
