//! Smooths noisy constant-velocity tracks and compares position RMSE before
//! and after.

use rand::Rng;
use rand_distr::StandardNormal;
use tlhmm_scene::random::rng_from_seed;
use tlhmm_scene::scenario::ekf_smooth;

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn main() -> tlhmm_scene::Result<()> {
    let dt = 0.1;
    let sigma = 0.5;
    for trial in 0..5u64 {
        let mut rng = rng_from_seed(trial);
        let v = rng.random_range(5.0..30.0);
        let truth: Vec<f64> = (0..100).map(|k| v * k as f64 * dt).collect();
        let noisy: Vec<f64> = truth.iter().map(|y| y + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let (smoothed, vel) = ekf_smooth(&noisy, None, dt, 0.1, sigma, 1.0)?;
        println!(
            "trial {trial}: v={v:5.2} m/s  raw rmse {:.3}  smoothed {:.3}  mean |v err| {:.3}",
            rmse(&noisy, &truth),
            rmse(&smoothed, &truth),
            vel.iter().map(|u| (u - v).abs()).sum::<f64>() / vel.len() as f64
        );
    }
    Ok(())
}
