#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use tlhmm_scene::gmm::GmmParams;
use tlhmm_scene::hmm::{HmmParams, ObservationSequence};
use tlhmm_scene::linalg::Gaussian;
use tlhmm_scene::random::SeededRng;

pub fn normal_1d(mean: f64, var: f64) -> Gaussian {
    Gaussian::new(DVector::from_vec(vec![mean]), DMatrix::from_element(1, 1, var)).unwrap()
}

/// Random probability vector bounded away from zero.
pub fn random_simplex(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Random symmetric positive definite matrix `B Bᵀ + shift·I`.
pub fn random_spd(rng: &mut SeededRng, d: usize, shift: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(d, d) * shift
}

pub fn random_gaussian(rng: &mut SeededRng, d: usize) -> Gaussian {
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    Gaussian::new(mean, random_spd(rng, d, 0.3)).unwrap()
}

pub fn random_hmm(rng: &mut SeededRng, n: usize, d: usize) -> HmmParams {
    let initial = random_simplex(rng, n);
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for (j, p) in random_simplex(rng, n).into_iter().enumerate() {
            a[(i, j)] = p;
        }
    }
    let emissions = (0..n).map(|_| random_gaussian(rng, d)).collect();
    HmmParams::new(initial, a, emissions).unwrap()
}

pub fn random_gmm(rng: &mut SeededRng, k: usize, d: usize) -> GmmParams {
    let w = random_simplex(rng, k);
    let comps = (0..k).map(|_| random_gaussian(rng, d)).collect();
    GmmParams::new(w, comps).unwrap()
}

pub fn random_sequence(rng: &mut SeededRng, t: usize, d: usize) -> ObservationSequence {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    ObservationSequence::from_rows(&rows, 0.1).unwrap()
}

fn gaussian_pdf(g: &Gaussian, x: &[f64]) -> f64 {
    // straight from the definition, no Cholesky
    let d = g.dim();
    let diff = DVector::from_column_slice(x) - g.mean();
    let inv = g.cov().clone().try_inverse().unwrap();
    let q = (diff.transpose() * inv * &diff)[(0, 0)];
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * g.cov().determinant()).sqrt()
}

pub fn pdf(g: &Gaussian, x: &[f64]) -> f64 {
    gaussian_pdf(g, x)
}

pub fn mixture_pdf(m: &GmmParams, x: &[f64]) -> f64 {
    m.weights()
        .iter()
        .zip(m.components())
        .map(|(w, g)| w * gaussian_pdf(g, x))
        .sum()
}

/// log p(seq) by summing over every hidden path, in linear space.
pub fn brute_force_log_likelihood(m: &HmmParams, seq: &ObservationSequence) -> f64 {
    let n = m.n_states();
    let t = seq.len();
    let dens: Vec<Vec<f64>> = (0..t)
        .map(|k| m.emissions().iter().map(|g| gaussian_pdf(g, seq.row(k))).collect())
        .collect();
    let mut total = 0.0;
    for code in 0..n.pow(t as u32) {
        let mut c = code;
        let mut prev = 0;
        let mut p = 1.0;
        for (k, row) in dens.iter().enumerate() {
            let s = c % n;
            c /= n;
            p *= if k == 0 { m.initial()[s] } else { m.transition()[(prev, s)] };
            p *= row[s];
            prev = s;
        }
        total += p;
    }
    total.ln()
}

/// Draws `len` observations from an HMM.
pub fn sample_hmm(m: &HmmParams, len: usize, rng: &mut SeededRng) -> ObservationSequence {
    let pick = |p: &[f64], rng: &mut SeededRng| {
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
    let d = m.feature_dim();
    let mut s = pick(m.initial(), rng);
    let mut rows = Vec::with_capacity(len);
    for _ in 0..len {
        let g = &m.emissions()[s];
        let l = g.cov().clone().cholesky().unwrap().l();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = g.mean() + l * z;
        rows.push(x.iter().copied().collect::<Vec<f64>>());
        let row: Vec<f64> = m.transition().row(s).iter().copied().collect();
        s = pick(&row, rng);
    }
    ObservationSequence::from_rows(&rows, 0.1).unwrap()
}

/// Closed-form Gaussian conditional of block `a` given block `se`, via
/// explicit inverses.
pub fn conditional_oracle(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    se: &[usize],
    a: &[usize],
    se_value: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let pick_v = |idx: &[usize]| DVector::from_fn(idx.len(), |i, _| mean[idx[i]]);
    let pick_m = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| cov[(r[i], c[j])]);
    let s_ss = pick_m(se, se);
    let s_as = pick_m(a, se);
    let s_aa = pick_m(a, a);
    let inv = s_ss.try_inverse().unwrap();
    let diff = DVector::from_column_slice(se_value) - pick_v(se);
    let m = pick_v(a) + &s_as * &inv * diff;
    let c = s_aa - &s_as * inv * s_as.transpose();
    (m, c)
}

/// Composite Simpson rule on `[lo, hi]` with `n` (even) intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// Kolmogorov-Smirnov statistic of a sample against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(mut xs: Vec<f64>, cdf: F) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
