mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use tlhmm_scene::gmm::{self, BlockPartition, GmmDocument, GmmParams, GmmRegressor};
use tlhmm_scene::hmm::FitConfig;
use tlhmm_scene::linalg::{DataMatrix, Gaussian, COV_FLOOR};
use tlhmm_scene::random::rng_from_seed;

fn gauss(mean: &[f64], cov: &[f64]) -> Gaussian {
    let d = mean.len();
    Gaussian::new(DVector::from_row_slice(mean), DMatrix::from_row_slice(d, d, cov)).unwrap()
}

#[test]
fn two_separated_clusters_are_recovered() {
    let truth = GmmParams::new(vec![0.5, 0.5], vec![gauss(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]), gauss(&[10.0, 10.0], &[1.0, 0.0, 0.0, 1.0])]).unwrap();
    let data = truth.sample(2000, 3);
    let (m, report) = gmm::em_fit(&data, 2, &FitConfig::default(), 0).unwrap();
    assert!(report.converged);
    let mut comps: Vec<_> = m.weights().iter().zip(m.components()).collect();
    comps.sort_by(|a, b| a.1.mean()[0].partial_cmp(&b.1.mean()[0]).unwrap());
    for ((w, g), target) in comps.iter().zip([0.0, 10.0]) {
        assert!((*w - 0.5).abs() < 0.05);
        for i in 0..2 {
            assert!((g.mean()[i] - target).abs() < 0.2);
            assert!((g.cov()[(i, i)] - 1.0).abs() < 0.2);
        }
    }
}

#[test]
fn single_component_fit_is_sample_moments() {
    let mut rng = rng_from_seed(3);
    let g = random_gaussian(&mut rng, 3);
    let mut data = DataMatrix::with_cols(3).unwrap();
    for _ in 0..500 {
        data.push_row(&g.sample(&mut rng)).unwrap();
    }
    let (m, _) = gmm::em_fit(&data, 1, &FitConfig::default(), 0).unwrap();
    let mean = data.column_mean();
    let c = &m.components()[0];
    assert!((c.mean() - &mean).amax() < 1e-10);
    // maximum likelihood uses the 1/n normalizer
    let n = data.nrows() as f64;
    let mut cov = DMatrix::zeros(3, 3);
    for r in data.rows() {
        let d = DVector::from_row_slice(r) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n;
    // the M-step always adds the floor to the diagonal
    cov += DMatrix::identity(3, 3) * COV_FLOOR;
    assert!((c.cov() - cov).amax() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn em_trace_never_decreases(seed in any::<u64>(), k in 1usize..=4, d in 1usize..=3) {
        let mut rng = rng_from_seed(seed);
        let truth = random_gmm(&mut rng, 3, d);
        let data = truth.sample(150, seed);
        let (m, report) = gmm::em_fit(&data, k, &FitConfig::default(), seed).unwrap();
        prop_assert!(report.max_decrease() <= 1e-8);
        prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(m.weights().iter().all(|w| *w > 0.0));
        for c in m.components() {
            prop_assert!(tlhmm_scene::linalg::min_eigenvalue(c.cov()) >= COV_FLOOR * (1.0 - 1e-9));
        }
    }

    #[test]
    fn log_density_matches_explicit_mixture(seed in any::<u64>(), k in 1usize..=4, d in 1usize..=3) {
        let mut rng = rng_from_seed(seed);
        let m = random_gmm(&mut rng, k, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let expect = mixture_pdf(&m, &x).ln();
        prop_assert!((m.log_density(&x) - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn single_gaussian_conditioning_is_closed_form(seed in any::<u64>(), n_se in 1usize..=3, n_a in 1usize..=2) {
        let mut rng = rng_from_seed(seed);
        let d = n_se + n_a;
        let g = random_gaussian(&mut rng, d);
        let m = GmmParams::new(vec![1.0], vec![g.clone()]).unwrap();
        let part = BlockPartition::leading(n_se, n_a);
        let se: Vec<f64> = (0..n_se).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cond = m.condition(&part, &se).unwrap();
        let (mu, sigma) = conditional_oracle(g.mean(), g.cov(), &part.se_indices, &part.a_indices, &se);
        let c = &cond.components()[0];
        prop_assert!((c.mean() - &mu).amax() < 1e-9 * mu.amax().max(1.0));
        prop_assert!((c.cov() - &sigma).amax() < 1e-9 * sigma.amax().max(1.0));
        prop_assert_eq!(cond.weights(), &[1.0][..]);
    }
}

#[test]
fn interleaved_partitions_match_the_oracle() {
    let mut rng = rng_from_seed(8);
    let g = random_gaussian(&mut rng, 4);
    let m = GmmParams::new(vec![1.0], vec![g.clone()]).unwrap();
    let part = BlockPartition::new(vec![3, 0], vec![2, 1], 4).unwrap();
    let se = [0.4, -1.1];
    let cond = m.condition(&part, &se).unwrap();
    let (mu, sigma) = conditional_oracle(g.mean(), g.cov(), &[3, 0], &[2, 1], &se);
    assert!((cond.components()[0].mean() - mu).amax() < 1e-9);
    assert!((cond.components()[0].cov() - sigma).amax() < 1e-9);
}

#[test]
fn bad_partitions_are_rejected() {
    assert!(BlockPartition::new(vec![0, 0], vec![1], 3).is_err());
    assert!(BlockPartition::new(vec![0], vec![1], 3).is_err());
    assert!(BlockPartition::new(vec![], vec![0, 1], 2).is_err());
    assert!(BlockPartition::new(vec![0], vec![2], 2).is_err());
}

/// Conditional density of `a` given scalar `se` from a 2-D mixture, by
/// normalizing the joint slice numerically.
fn grid_conditional(m: &GmmParams, se: f64, a: f64) -> f64 {
    let lo = -30.0;
    let hi = 30.0;
    let z = simpson(|t| mixture_pdf(m, &[se, t]), lo, hi, 20_000);
    mixture_pdf(m, &[se, a]) / z
}

#[test]
fn two_component_conditioning_matches_grid_integration() {
    let mut rng = rng_from_seed(101);
    for _ in 0..5 {
        let m = random_gmm(&mut rng, 2, 2);
        let se = rng.random_range(-1.5..1.5);
        let cond = m.condition(&BlockPartition::leading(1, 1), &[se]).unwrap();
        let mut worst = 0.0f64;
        for i in 0..=80 {
            let a = -8.0 + 16.0 * i as f64 / 80.0;
            let got = mixture_pdf(&cond, &[a]);
            worst = worst.max((got - grid_conditional(&m, se, a)).abs());
        }
        assert!(worst < 1e-6, "sup error {worst}");
    }
}

#[test]
fn conditional_mean_is_weighted_component_means() {
    let mut rng = rng_from_seed(17);
    let m = random_gmm(&mut rng, 3, 3);
    let part = BlockPartition::leading(2, 1);
    let reg = GmmRegressor::new(&m, &part, COV_FLOOR).unwrap();
    let se = [0.3, -0.2];
    let cond = reg.condition(&se).unwrap();
    let expect: f64 = cond
        .weights()
        .iter()
        .zip(cond.components())
        .map(|(w, c)| w * c.mean()[0])
        .sum();
    assert!((reg.predict_mean(&se)[0] - expect).abs() < 1e-12);
    assert!((cond.mean()[0] - expect).abs() < 1e-12);
}

#[test]
fn overflowing_conditioning_values_fall_back_to_prior_weights() {
    let m = GmmParams::new(vec![0.3, 0.7], vec![gauss(&[0.0, 0.0], &[1e-3, 0.0, 0.0, 1.0]), gauss(&[1.0, 5.0], &[1e-3, 0.0, 0.0, 1.0])]).unwrap();
    let reg = GmmRegressor::new(&m, &BlockPartition::leading(1, 1), COV_FLOOR).unwrap();
    // log space keeps far but finite values on the normal path
    assert!(!reg.conditional_weights(&[1e6]).fell_back);
    let w = reg.conditional_weights(&[1e200]);
    assert!(w.fell_back);
    assert!((w.weights[0] - 0.3).abs() < 1e-12);
    let (draw, fell_back) = reg.sample(&[1e200], &mut rng_from_seed(0));
    assert!(fell_back && draw[0].is_finite());
}

#[test]
fn sample_moments_converge() {
    let mut rng = rng_from_seed(23);
    let m = random_gmm(&mut rng, 3, 2);
    let data = m.sample(100_000, 5);
    let mean = data.column_mean();
    // the variance of a mixture mean estimate is bounded by the total variance
    let mut cov = DMatrix::zeros(2, 2);
    let mu = m.mean();
    for (w, c) in m.weights().iter().zip(m.components()) {
        let d = c.mean() - &mu;
        cov += (c.cov() + &d * d.transpose()) * *w;
    }
    for i in 0..2 {
        let se = (cov[(i, i)] / 100_000.0).sqrt();
        assert!((mean[i] - mu[i]).abs() < 5.0 * se);
    }
}

#[test]
fn component_fractions_follow_weights() {
    let m = GmmParams::new(vec![0.9, 0.1], vec![normal_1d(0.0, 1.0), normal_1d(5.0, 1.0)]).unwrap();
    let (_, labels) = m.sample_labeled(10_000, 44);
    let frac = labels.iter().filter(|&&l| l == 1).count() as f64 / 1e4;
    let se = (0.1f64 * 0.9 / 1e4).sqrt();
    assert!((frac - 0.1).abs() < 4.0 * se, "{frac}");
}

#[test]
fn one_dimensional_draws_pass_a_ks_check() {
    let m = GmmParams::new(vec![1.0], vec![normal_1d(1.5, 4.0)]).unwrap();
    let data = m.sample(100_000, 12);
    let xs: Vec<f64> = data.rows().map(|r| r[0]).collect();
    let normal = Normal::new(1.5, 2.0).unwrap();
    let d = ks_statistic(xs, |x| normal.cdf(x));
    assert!(d < 0.01, "ks {d}");
}

#[test]
fn bic_is_computed_by_hand() {
    let m = GmmParams::new(vec![0.4, 0.6], vec![gauss(&[0.0, 0.0], &[1.0, 0.2, 0.2, 1.0]), gauss(&[2.0, 1.0], &[0.5, 0.0, 0.0, 2.0])]).unwrap();
    let data = m.sample(300, 1);
    let ll: f64 = data.rows().map(|r| mixture_pdf(&m, r).ln()).sum();
    // 1 free weight, 2·2 means, 2·3 covariance entries
    let p = 1.0 + 4.0 + 6.0;
    let expect = 2.0 * ll - p * 300f64.ln();
    assert_eq!(m.n_free_params(), 11);
    assert!(relative_error(gmm::bic_score(&m, &data).unwrap(), expect) < 1e-9);
}

#[test]
fn bic_prefers_the_true_component_count() {
    let m = GmmParams::new(
        vec![1.0 / 3.0; 3],
        vec![normal_1d(-10.0, 1.0), normal_1d(0.0, 1.0), normal_1d(10.0, 1.0)],
    )
    .unwrap();
    let data = m.sample(900, 2);
    let (k, _, _) = gmm::select_by_bic(&data, 1..=6, &FitConfig::default(), 0).unwrap();
    assert_eq!(k, 3);
}

#[test]
fn degenerate_inputs() {
    let one = DataMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
    let (m, _) = gmm::em_fit(&one, 1, &FitConfig::default(), 0).unwrap();
    assert!(m.components()[0].cov().iter().all(|v| v.is_finite()));
    let empty = DataMatrix::with_cols(2).unwrap();
    assert!(gmm::em_fit(&empty, 1, &FitConfig::default(), 0).is_err());
    assert!(gmm::em_fit(&one, 0, &FitConfig::default(), 0).is_err());
    // more components than distinct points still yields a usable mixture
    let two = DataMatrix::from_rows(&[[0.0], [0.0], [1.0]]).unwrap();
    let (m, _) = gmm::em_fit(&two, 3, &FitConfig::default(), 0).unwrap();
    assert!(m.log_likelihood(&two).unwrap().is_finite());
}

#[test]
fn documents_round_trip() {
    let mut rng = rng_from_seed(19);
    let doc = GmmDocument {
        schema: vec!["a".into(), "b".into(), "c".into()],
        partition: Some(BlockPartition::leading(2, 1)),
        model: random_gmm(&mut rng, 2, 3),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gmm.json");
    doc.save(&path).unwrap();
    assert_eq!(GmmDocument::load(&path).unwrap(), doc);
}
