//! Recovers planted coefficients of accuracy against the fitted Known and
//! Unknown fractions.

use knowledge_probe::regression::{fit_linear_model, residual_projection, FitPoint};
use rand::{Rng, SeedableRng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (b0, b_kn, b_unk) = (0.4, 0.3, -0.5);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let points: Vec<FitPoint> = (0..100)
        .map(|_| {
            let d = 1000.0;
            let n_kn = rng.gen_range(0..=1000) as f64;
            let n_unk = rng.gen_range(0..=(1000 - n_kn as u32)) as f64;
            let noise = rng.gen_range(-0.01..0.01);
            FitPoint { accuracy: b0 + b_kn * n_kn / d + b_unk * n_unk / d + noise, n_kn, n_unk, d_size: d }
        })
        .collect();
    let fit = fit_linear_model(&points)?;
    println!("planted   beta0={b0:+.3} beta_kn={b_kn:+.3} beta_unk={b_unk:+.3}");
    println!("estimated beta0={:+.3} beta_kn={:+.3} beta_unk={:+.3}", fit.beta0, fit.beta_kn, fit.beta_unk);
    println!("R^2 = {:.4}", fit.r_squared);
    println!("X^T r = {:?}", residual_projection(&fit, &points));
    Ok(())
}
