//! Paired t-test between two models over random subsets of one test set.

use std::collections::BTreeMap;

use knowledge_probe::stats::{paired_t_test, student_t_two_sided_p};
use rand::{Rng, SeedableRng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<String> = (0..1000).map(|i| format!("ex{i:04}")).collect();
    let a: BTreeMap<String, bool> = ids.iter().map(|id| (id.clone(), rng.gen_bool(0.44))).collect();
    let b: BTreeMap<String, bool> = ids.iter().map(|id| (id.clone(), rng.gen_bool(0.40))).collect();

    let r = paired_t_test(&a, &b, 100, 0)?;
    println!("mean difference {:+.4} over {} subsets", r.mean_difference, r.n_subsets);
    println!("t = {:.3}, df = {}, p = {:.3e}", r.t_statistic, r.df, r.p_value);
    println!("significant at 0.05: {}, at 0.01: {}", r.significant_05, r.significant_01);
    println!("p(|T_9| > 2.262) = {:.4}", student_t_two_sided_p(2.262, 9.0));
    Ok(())
}
