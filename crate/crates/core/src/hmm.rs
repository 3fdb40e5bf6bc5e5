//! Gaussian-emission hidden Markov models.
//!
//! Likelihoods are computed with a log-space forward recursion, so sequences
//! of any practical length evaluate without underflow. Parameters are fitted
//! with Baum-Welch over any number of independent sequences; emissions are
//! initialized from a Gaussian mixture fitted to the pooled observations.

use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm;
use crate::linalg::{accumulate_outer, log_sum_exp, symmetrize_lower, DataMatrix, Gaussian, COV_FLOOR};
use crate::random::rng_from_seed;

/// EM settings shared by the HMM and GMM fitters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Stop once the relative log-likelihood improvement falls below this.
    pub tol: f64,
    pub cov_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-4,
            cov_floor: COV_FLOOR,
        }
    }
}

/// Outcome of an EM run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Number of parameter updates performed.
    pub iterations: usize,
    /// Training log-likelihood of the initial parameters followed by the value
    /// after each update.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    /// EM updates spent by the mixture fit that produced the starting
    /// emissions; 0 when starting from given parameters.
    #[serde(default)]
    pub init_iterations: usize,
}

impl FitReport {
    pub(crate) fn start(initial_ll: f64) -> Self {
        Self {
            iterations: 0,
            log_likelihood_trace: vec![initial_ll],
            converged: false,
            init_iterations: 0,
        }
    }

    /// Records one update; returns true when the run should stop.
    pub(crate) fn record(&mut self, prev: f64, next: f64, tol: f64) -> bool {
        self.iterations += 1;
        self.log_likelihood_trace.push(next);
        if next - prev < tol * prev.abs() {
            self.converged = true;
        }
        self.converged
    }

    /// Initializer and Baum-Welch updates together.
    pub fn total_iterations(&self) -> usize {
        self.init_iterations + self.iterations
    }

    /// Final training log-likelihood.
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().expect("trace starts non-empty")
    }

    /// Largest drop between consecutive trace entries (0 for a monotone trace).
    pub fn max_decrease(&self) -> f64 {
        self.log_likelihood_trace
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

/// `T × feature_dim` observations sampled every `dt` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence {
    values: DataMatrix,
    dt: f64,
}

impl ObservationSequence {
    pub fn new(values: DataMatrix, dt: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::TooShort { min: 1, got: 0 });
        }
        if !values.all_finite() {
            return Err(Error::invalid("observation sequence contains a non-finite value"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("sampling period must be positive, got {dt}")));
        }
        Ok(Self { values, dt })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], dt: f64) -> Result<Self> {
        Self::new(DataMatrix::from_rows(rows)?, dt)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &DataMatrix {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    /// Steps `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for length {}",
                self.len()
            )));
        }
        Ok(Self {
            values: self.values.slice_rows(start, end),
            dt: self.dt,
        })
    }
}

/// One Gaussian-emission HMM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HmmDoc", into = "HmmDoc")]
pub struct HmmParams {
    initial: Vec<f64>,
    transition: DMatrix<f64>,
    emissions: Vec<Gaussian>,
    schema: Vec<String>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!("{what} has an entry outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn default_schema(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("f{i}")).collect()
}

impl HmmParams {
    pub fn new(initial: Vec<f64>, transition: DMatrix<f64>, emissions: Vec<Gaussian>) -> Result<Self> {
        let dim = emissions.first().map(Gaussian::dim).unwrap_or(0);
        Self::with_schema(initial, transition, emissions, default_schema(dim))
    }

    pub fn with_schema(
        initial: Vec<f64>,
        transition: DMatrix<f64>,
        emissions: Vec<Gaussian>,
        schema: Vec<String>,
    ) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(Error::invalid("an HMM needs at least one state"));
        }
        if transition.nrows() != n || transition.ncols() != n || emissions.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: transition.nrows().max(emissions.len()),
            });
        }
        check_distribution(&initial, "initial distribution")?;
        for i in 0..n {
            let row: Vec<f64> = transition.row(i).iter().copied().collect();
            check_distribution(&row, &format!("transition row {i}"))?;
        }
        let dim = emissions[0].dim();
        if let Some(e) = emissions.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        if schema.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: schema.len(),
            });
        }
        Ok(Self {
            initial,
            transition,
            emissions,
            schema,
        })
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.emissions[0].dim()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn emissions(&self) -> &[Gaussian] {
        &self.emissions
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn set_schema(&mut self, schema: Vec<String>) -> Result<()> {
        if schema.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: schema.len(),
            });
        }
        self.schema = schema;
        Ok(())
    }

    /// Forward log-likelihood of a contiguous row-major block of observations.
    /// The caller guarantees the width matches and the block is non-empty.
    pub fn log_likelihood_rows(&self, rows: &[f64]) -> f64 {
        self.log_likelihood_rows_from(&self.initial, rows)
    }

    /// Forward log-likelihood of a window cut from the middle of a longer
    /// sequence. The hidden state at the window start is unknown, so every
    /// state is equally likely there.
    pub fn window_log_likelihood(&self, rows: &[f64]) -> f64 {
        let n = self.n_states();
        self.log_likelihood_rows_from(&vec![1.0 / n as f64; n], rows)
    }

    /// Forward log-likelihood with `start` in place of the initial
    /// distribution, for windows that begin mid-sequence.
    pub fn log_likelihood_rows_from(&self, start: &[f64], rows: &[f64]) -> f64 {
        let d = self.feature_dim();
        let n = self.n_states();
        debug_assert!(!rows.is_empty() && rows.len().is_multiple_of(d));
        debug_assert_eq!(start.len(), n);
        let log_a = self.log_transition();
        let mut alpha: Vec<f64> = start
            .iter()
            .zip(&self.emissions)
            .map(|(p, e)| p.ln() + e.log_pdf(&rows[..d]))
            .collect();
        let mut next = vec![0.0; n];
        let mut terms = vec![0.0; n];
        for obs in rows.chunks_exact(d).skip(1) {
            for j in 0..n {
                for i in 0..n {
                    terms[i] = alpha[i] + log_a[i * n + j];
                }
                next[j] = log_sum_exp(&terms) + self.emissions[j].log_pdf(obs);
            }
            std::mem::swap(&mut alpha, &mut next);
        }
        log_sum_exp(&alpha)
    }

    fn log_transition(&self) -> Vec<f64> {
        let n = self.n_states();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.transition[(i, j)].ln());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct HmmDoc {
    n_states: usize,
    feature_dim: usize,
    schema: Vec<String>,
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
    emissions: Vec<Gaussian>,
}

impl From<HmmParams> for HmmDoc {
    fn from(p: HmmParams) -> Self {
        let n = p.n_states();
        HmmDoc {
            n_states: n,
            feature_dim: p.feature_dim(),
            transition: (0..n)
                .map(|i| (0..n).map(|j| p.transition[(i, j)]).collect())
                .collect(),
            schema: p.schema,
            initial: p.initial,
            emissions: p.emissions,
        }
    }
}

impl TryFrom<HmmDoc> for HmmParams {
    type Error = Error;
    fn try_from(doc: HmmDoc) -> Result<Self> {
        let n = doc.n_states;
        if doc.transition.len() != n || doc.transition.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("transition matrix shape does not match n_states"));
        }
        let transition = DMatrix::from_fn(n, n, |i, j| doc.transition[i][j]);
        let p = HmmParams::with_schema(doc.initial, transition, doc.emissions, doc.schema)?;
        if p.feature_dim() != doc.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: doc.feature_dim,
                got: p.feature_dim(),
            });
        }
        Ok(p)
    }
}

/// `log p(seq | model)` via the forward algorithm.
pub fn forward_log_likelihood(model: &HmmParams, seq: &ObservationSequence) -> Result<f64> {
    if seq.feature_dim() != model.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim(),
            got: seq.feature_dim(),
        });
    }
    if !seq.values().all_finite() {
        return Err(Error::invalid("observation sequence contains a non-finite value"));
    }
    Ok(model.log_likelihood_rows(seq.values().as_slice()))
}

fn validate_training_set(seqs: &[ObservationSequence], n_states: usize) -> Result<usize> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::invalid("no training sequences"))?;
    let dim = first.feature_dim();
    if let Some(s) = seqs.iter().find(|s| s.feature_dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: s.feature_dim(),
        });
    }
    if n_states == 0 {
        return Err(Error::invalid("n_states must be at least 1"));
    }
    let total: usize = seqs.iter().map(ObservationSequence::len).sum();
    if total < n_states {
        return Err(Error::invalid(format!(
            "{total} observations cannot support {n_states} states"
        )));
    }
    Ok(dim)
}

/// Stacks all observations of `seqs` into one matrix.
pub fn pool(seqs: &[ObservationSequence]) -> Result<DataMatrix> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::invalid("no sequences to pool"))?;
    let mut pooled = DataMatrix::with_cols(first.feature_dim())?;
    for s in seqs {
        pooled.extend(s.values())?;
    }
    Ok(pooled)
}

fn jittered_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| 1.0 / n as f64 + 1e-2 * rng.random::<f64>())
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Emissions from a mixture fit of the pooled data; initial and transition
/// probabilities uniform plus a small seeded jitter.
pub fn initialize(
    seqs: &[ObservationSequence],
    n_states: usize,
    config: &FitConfig,
    seed: u64,
) -> Result<HmmParams> {
    initialize_counted(seqs, n_states, config, seed).map(|(m, _)| m)
}

fn initialize_counted(
    seqs: &[ObservationSequence],
    n_states: usize,
    config: &FitConfig,
    seed: u64,
) -> Result<(HmmParams, usize)> {
    validate_training_set(seqs, n_states)?;
    let pooled = pool(seqs)?;
    let (mix, mix_report) = gmm::em_fit(&pooled, n_states, config, seed)?;
    let mut rng = rng_from_seed(crate::random::derive_seed(seed, 2));
    let initial = jittered_uniform(n_states, &mut rng);
    let mut transition = DMatrix::zeros(n_states, n_states);
    for i in 0..n_states {
        for (j, p) in jittered_uniform(n_states, &mut rng).into_iter().enumerate() {
            transition[(i, j)] = p;
        }
    }
    let model = HmmParams::new(initial, transition, mix.components().to_vec())?;
    Ok((model, mix_report.iterations))
}

/// Posterior quantities for all training sequences under fixed parameters.
struct Expectations {
    log_likelihood: f64,
    // per sequence, row-major T × n state posteriors
    gammas: Vec<Vec<f64>>,
    xi_sum: DMatrix<f64>,
    initial_sum: Vec<f64>,
}

fn expectations(model: &HmmParams, seqs: &[ObservationSequence]) -> Expectations {
    let n = model.n_states();
    let log_a = model.log_transition();
    let log_pi: Vec<f64> = model.initial.iter().map(|p| p.ln()).collect();
    let mut out = Expectations {
        log_likelihood: 0.0,
        gammas: Vec::with_capacity(seqs.len()),
        xi_sum: DMatrix::zeros(n, n),
        initial_sum: vec![0.0; n],
    };
    let mut terms = vec![0.0; n];
    let mut xi_terms = vec![0.0; n * n];
    for seq in seqs {
        let t_len = seq.len();
        let mut log_b = vec![0.0; t_len * n];
        for t in 0..t_len {
            let obs = seq.row(t);
            for j in 0..n {
                log_b[t * n + j] = model.emissions[j].log_pdf(obs);
            }
        }
        let mut log_alpha = vec![0.0; t_len * n];
        for j in 0..n {
            log_alpha[j] = log_pi[j] + log_b[j];
        }
        for t in 1..t_len {
            for j in 0..n {
                for i in 0..n {
                    terms[i] = log_alpha[(t - 1) * n + i] + log_a[i * n + j];
                }
                log_alpha[t * n + j] = log_sum_exp(&terms) + log_b[t * n + j];
            }
        }
        let mut log_beta = vec![0.0; t_len * n];
        for t in (0..t_len.saturating_sub(1)).rev() {
            for i in 0..n {
                for j in 0..n {
                    terms[j] = log_a[i * n + j] + log_b[(t + 1) * n + j] + log_beta[(t + 1) * n + j];
                }
                log_beta[t * n + i] = log_sum_exp(&terms);
            }
        }
        let ll = log_sum_exp(&log_alpha[(t_len - 1) * n..]);
        out.log_likelihood += ll;

        let mut gamma = vec![0.0; t_len * n];
        for t in 0..t_len {
            let row = &mut gamma[t * n..(t + 1) * n];
            for j in 0..n {
                row[j] = log_alpha[t * n + j] + log_beta[t * n + j];
            }
            // normalize per step so rounding never leaks mass
            let norm = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - norm).exp();
            }
        }
        for j in 0..n {
            out.initial_sum[j] += gamma[j];
        }
        for t in 0..t_len.saturating_sub(1) {
            for i in 0..n {
                for j in 0..n {
                    xi_terms[i * n + j] = log_alpha[t * n + i]
                        + log_a[i * n + j]
                        + log_b[(t + 1) * n + j]
                        + log_beta[(t + 1) * n + j];
                }
            }
            let norm = log_sum_exp(&xi_terms);
            for i in 0..n {
                for j in 0..n {
                    out.xi_sum[(i, j)] += (xi_terms[i * n + j] - norm).exp();
                }
            }
        }
        out.gammas.push(gamma);
    }
    out
}

fn maximize(
    prev: &HmmParams,
    seqs: &[ObservationSequence],
    ex: &Expectations,
    config: &FitConfig,
) -> Result<HmmParams> {
    let n = prev.n_states();
    let d = prev.feature_dim();

    let total: f64 = ex.initial_sum.iter().sum();
    let initial: Vec<f64> = ex.initial_sum.iter().map(|v| v / total).collect();

    let mut transition = prev.transition.clone();
    for i in 0..n {
        let row_mass: f64 = ex.xi_sum.row(i).sum();
        if row_mass > 1e-300 {
            for j in 0..n {
                transition[(i, j)] = ex.xi_sum[(i, j)] / row_mass;
            }
        }
    }

    let mut mass = vec![0.0; n];
    let mut sums = vec![DVector::<f64>::zeros(d); n];
    for (seq, gamma) in seqs.iter().zip(&ex.gammas) {
        for t in 0..seq.len() {
            let obs = seq.row(t);
            for j in 0..n {
                let g = gamma[t * n + j];
                mass[j] += g;
                for k in 0..d {
                    sums[j][k] += g * obs[k];
                }
            }
        }
    }
    let means: Vec<DVector<f64>> = (0..n).map(|j| &sums[j] / mass[j].max(f64::MIN_POSITIVE)).collect();
    let mut covs = vec![DMatrix::<f64>::zeros(d, d); n];
    let mut diff = vec![0.0; d];
    for (seq, gamma) in seqs.iter().zip(&ex.gammas) {
        for t in 0..seq.len() {
            let obs = seq.row(t);
            for j in 0..n {
                for k in 0..d {
                    diff[k] = obs[k] - means[j][k];
                }
                accumulate_outer(&mut covs[j], &diff, gamma[t * n + j]);
            }
        }
    }
    let mut emissions = Vec::with_capacity(n);
    for j in 0..n {
        if mass[j] < 1e-10 {
            // unused state keeps its emission
            emissions.push(prev.emissions[j].clone());
            continue;
        }
        symmetrize_lower(&mut covs[j]);
        let cov = &covs[j] / mass[j];
        emissions.push(Gaussian::regularized(means[j].clone(), cov, config.cov_floor)?);
    }
    HmmParams::with_schema(
        renormalized(initial),
        renormalized_rows(transition),
        emissions,
        prev.schema.clone(),
    )
}

fn renormalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x = (*x / s).clamp(0.0, 1.0));
    v
}

fn renormalized_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        let s: f64 = m.row(i).sum();
        for j in 0..m.ncols() {
            m[(i, j)] = (m[(i, j)] / s).clamp(0.0, 1.0);
        }
    }
    m
}

/// Baum-Welch starting from explicit parameters (used for finetuning).
pub fn baum_welch_from(
    seqs: &[ObservationSequence],
    init: HmmParams,
    config: &FitConfig,
) -> Result<(HmmParams, FitReport)> {
    let dim = validate_training_set(seqs, init.n_states())?;
    if dim != init.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: init.feature_dim(),
            got: dim,
        });
    }
    let mut model = init;
    let mut ex = expectations(&model, seqs);
    let mut report = FitReport::start(ex.log_likelihood);
    for _ in 0..config.max_iter {
        let next = maximize(&model, seqs, &ex, config)?;
        let next_ex = expectations(&next, seqs);
        let prev_ll = ex.log_likelihood;
        model = next;
        ex = next_ex;
        if report.record(prev_ll, ex.log_likelihood, config.tol) {
            break;
        }
    }
    debug!(
        "baum-welch: {} states, {} iterations, ll {:.6}",
        model.n_states(),
        report.iterations,
        ex.log_likelihood
    );
    Ok((model, report))
}

/// Seeded Baum-Welch fit of an `n_states` model.
pub fn baum_welch_fit(
    seqs: &[ObservationSequence],
    n_states: usize,
    config: &FitConfig,
    seed: u64,
) -> Result<(HmmParams, FitReport)> {
    let (init, init_iterations) = initialize_counted(seqs, n_states, config, seed)?;
    let (model, mut report) = baum_welch_from(seqs, init, config)?;
    report.init_iterations = init_iterations;
    Ok((model, report))
}

/// Hidden-state count whose mixture fit of `samples` has the highest BIC.
pub fn select_state_count(
    samples: &DataMatrix,
    candidates: std::ops::RangeInclusive<usize>,
    config: &FitConfig,
    seed: u64,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty candidate range"));
    }
    if candidates.start() == candidates.end() {
        return Ok(*candidates.start());
    }
    gmm::select_by_bic(samples, candidates, config, seed).map(|(k, _, _)| k)
}
