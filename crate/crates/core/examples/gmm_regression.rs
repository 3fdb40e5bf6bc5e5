//! Fits a mixture to a noisy nonlinear relation by BIC, then conditions it on
//! the input coordinate to predict and sample the output.

use rand::Rng;
use rand_distr::StandardNormal;
use tlhmm_scene::gmm::{self, BlockPartition, GmmRegressor};
use tlhmm_scene::hmm::FitConfig;
use tlhmm_scene::linalg::{DataMatrix, COV_FLOOR};
use tlhmm_scene::random::rng_from_seed;

fn main() -> tlhmm_scene::Result<()> {
    let mut rng = rng_from_seed(3);
    let mut data = DataMatrix::with_cols(2)?;
    for _ in 0..2000 {
        let x: f64 = rng.random_range(-3.0..3.0);
        let y = x.sin() * 2.0 + 0.2 * rng.sample::<f64, _>(StandardNormal);
        data.push_row(&[x, y])?;
    }
    let cfg = FitConfig::default();
    let (k, model, bic) = gmm::select_by_bic(&data, 1..=8, &cfg, 0)?;
    println!("BIC picked {k} components (score {bic:.1})");

    let reg = GmmRegressor::new(&model, &BlockPartition::leading(1, 1), COV_FLOOR)?;
    println!("{:>6} {:>8} {:>8} {:>10}", "x", "sin-ish", "E[y|x]", "draw");
    for x in [-2.5, -1.0, 0.0, 1.0, 2.5] {
        let mean = reg.predict_mean(&[x])[0];
        let (draw, _) = reg.sample(&[x], &mut rng);
        println!("{x:>6.2} {:>8.3} {mean:>8.3} {:>10.3}", 2.0 * f64::sin(x), draw[0]);
    }
    Ok(())
}
