use csi_core::stats::paired_t_test;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;

/// (t, two-sided p) from statrs.
pub fn reference(first: &[f64], second: &[f64]) -> (f64, f64) {
    let diffs: Vec<f64> = first.iter().zip(second).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let t = diffs.iter().mean() / (diffs.iter().std_dev() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
    (t, 2.0 * dist.sf(t.abs()))
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

pub fn check_against_reference(a: &[f64], b: &[f64]) -> Result<(), String> {
    let got = paired_t_test(a, b).map_err(|e| e.to_string())?;
    let (t, p) = reference(a, b);
    if !close(got.t_statistic, t) || (got.p_value - p).abs() > 1e-9 {
        return Err(format!("t {} vs {t}, p {} vs {p}", got.t_statistic, got.p_value));
    }
    Ok(())
}

/// Paired samples of length 2..120 with non-constant differences.
pub fn random_pairs(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..120);
    loop {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d0 = a[0] - b[0];
        if a.iter().zip(&b).any(|(x, y)| (x - y - d0).abs() > 1e-12) {
            return (a, b);
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fraction of p < 0.05 over `runs` tests of two independent normal samples.
pub fn null_rejection_rate(runs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    for i in 0..runs {
        let n = 5 + i % 40;
        let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        if paired_t_test(&a, &b).unwrap().p_value < 0.05 {
            rejected += 1;
        }
    }
    rejected as f64 / runs as f64
}
