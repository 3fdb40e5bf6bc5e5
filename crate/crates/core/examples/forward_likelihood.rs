//! Forward-algorithm likelihood of a small Gaussian HMM, cross-checked by
//! summing over every hidden path, then a Baum-Welch fit on sequences drawn
//! from the same model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use tlhmm_scene::hmm::{self, FitConfig, HmmParams, ObservationSequence};
use tlhmm_scene::linalg::Gaussian;
use tlhmm_scene::random::rng_from_seed;

fn normal(mean: f64, var: f64) -> Gaussian {
    Gaussian::new(DVector::from_vec(vec![mean]), DMatrix::from_element(1, 1, var)).unwrap()
}

/// log p(x) by explicit enumeration of all n^T state paths.
fn brute_force(m: &HmmParams, xs: &[f64]) -> f64 {
    let n = m.n_states();
    let t = xs.len();
    let mut total = 0.0;
    for code in 0..n.pow(t as u32) {
        let path: Vec<usize> = (0..t).map(|k| code / n.pow(k as u32) % n).collect();
        let mut p = m.initial()[path[0]];
        for k in 0..t {
            if k > 0 {
                p *= m.transition()[(path[k - 1], path[k])];
            }
            p *= m.emissions()[path[k]].log_pdf(&[xs[k]]).exp();
        }
        total += p;
    }
    total.ln()
}

fn sample(m: &HmmParams, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let pick = |p: &[f64], rng: &mut dyn rand::RngCore| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, v) in p.iter().enumerate() {
            acc += v;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    };
    let mut s = pick(m.initial(), rng);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let g = &m.emissions()[s];
        out.push(g.mean()[0] + g.cov()[(0, 0)].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let row: Vec<f64> = m.transition().row(s).iter().copied().collect();
        s = pick(&row, rng);
    }
    out
}

fn main() -> tlhmm_scene::Result<()> {
    let truth = HmmParams::new(
        vec![0.6, 0.4],
        DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]),
        vec![normal(0.0, 1.0), normal(3.0, 1.0)],
    )?;
    let xs = [0.1, 2.9, 3.1];
    let seq = ObservationSequence::from_rows(&xs.map(|x| [x]), 0.1)?;
    let fwd = hmm::forward_log_likelihood(&truth, &seq)?;
    println!("forward     {fwd:.12}");
    println!("enumeration {:.12}", brute_force(&truth, &xs));

    let mut rng = rng_from_seed(5);
    let seqs = (0..40)
        .map(|_| {
            let v = sample(&truth, 60, &mut rng);
            ObservationSequence::from_rows(&v.iter().map(|x| [*x]).collect::<Vec<_>>(), 0.1)
        })
        .collect::<tlhmm_scene::Result<Vec<_>>>()?;
    let (fit, report) = hmm::baum_welch_fit(&seqs, 2, &FitConfig::default(), 1)?;
    println!(
        "baum-welch: {} iterations (+{} to initialize), log-likelihood {:.3}, largest drop {:.2e}",
        report.iterations,
        report.init_iterations,
        report.final_log_likelihood(),
        report.max_decrease()
    );
    for (i, e) in fit.emissions().iter().enumerate() {
        println!("  state {i}: mean {:.3} var {:.3}", e.mean()[0], e.cov()[(0, 0)]);
    }
    println!("  transition {:.3?}", fit.transition().row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>());
    Ok(())
}
