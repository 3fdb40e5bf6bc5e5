//! Full-covariance Gaussian mixtures: EM fitting, BIC scoring, density
//! evaluation, sampling, and block conditioning (Gaussian mixture regression).

use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{FitConfig, FitReport};
use crate::linalg::{
    accumulate_outer, clamp_min_eigenvalue, log_sum_exp, symmetrize_lower, DataMatrix, Gaussian,
};
use crate::random::rng_from_seed;

/// Mixture weights plus one Gaussian per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmDoc", into = "GmmDoc")]
pub struct GmmParams {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

#[derive(Serialize, Deserialize)]
struct GmmDoc {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl From<GmmParams> for GmmDoc {
    fn from(p: GmmParams) -> Self {
        GmmDoc {
            weights: p.weights,
            components: p.components,
        }
    }
}

impl TryFrom<GmmDoc> for GmmParams {
    type Error = Error;
    fn try_from(doc: GmmDoc) -> Result<Self> {
        GmmParams::new(doc.weights, doc.components)
    }
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid("mixture needs one weight per component"));
        }
        let dim = components[0].dim();
        if let Some(bad) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("mixture weight outside [0, 1]"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}")));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    /// Free parameter count for a full-covariance mixture.
    pub fn n_free_params(&self) -> usize {
        let k = self.n_components();
        let d = self.dim();
        (k - 1) + k * (d + d * (d + 1) / 2)
    }

    /// `log Σ_g π_g N(x; μ_g, Σ_g)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut terms = [0.0f64; 64];
        let mut heap;
        let k = self.n_components();
        let terms: &mut [f64] = if k <= terms.len() {
            &mut terms[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        for (t, (w, c)) in terms.iter_mut().zip(self.weights.iter().zip(&self.components)) {
            *t = w.ln() + c.log_pdf(x);
        }
        log_sum_exp(terms)
    }

    /// Total log-likelihood of the rows of `data`.
    pub fn log_likelihood(&self, data: &DataMatrix) -> Result<f64> {
        check_dim(self.dim(), data.ncols())?;
        Ok(data.rows().map(|r| self.log_density(r)).sum())
    }

    /// Mixture mean `Σ_g π_g μ_g`.
    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .fold(DVector::zeros(self.dim()), |acc, (w, c)| acc + c.mean() * *w)
    }

    /// `n` independent draws.
    pub fn sample(&self, n: usize, seed: u64) -> DataMatrix {
        self.sample_labeled(n, seed).0
    }

    /// `n` draws together with the component each one came from.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> (DataMatrix, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let mut out = DataMatrix::with_cols(self.dim()).expect("dim >= 1");
        let mut labels = Vec::with_capacity(n);
        let mut buf = vec![0.0; self.dim()];
        for _ in 0..n {
            let g = pick_index(&self.weights, &mut rng);
            self.components[g].sample_into(&mut rng, &mut buf);
            out.push_row(&buf).expect("row width");
            labels.push(g);
        }
        (out, labels)
    }

    /// Conditional mixture over the action block given the SE block.
    pub fn condition(&self, part: &BlockPartition, se_value: &[f64]) -> Result<GmmParams> {
        GmmRegressor::new(self, part, crate::linalg::COV_FLOOR)?.condition(se_value)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Draws an index with probability proportional to `weights`.
pub(crate) fn pick_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding at the top end
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Splits the dimensions of a joint `[SE | a]` vector into the conditioning
/// block and the predicted block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub se_indices: Vec<usize>,
    pub a_indices: Vec<usize>,
}

impl BlockPartition {
    pub fn new(se_indices: Vec<usize>, a_indices: Vec<usize>, dim: usize) -> Result<Self> {
        let part = Self {
            se_indices,
            a_indices,
        };
        part.validate(dim)?;
        Ok(part)
    }

    /// First `n_se` dimensions condition, the remaining `n_a` are predicted.
    pub fn leading(n_se: usize, n_a: usize) -> Self {
        Self {
            se_indices: (0..n_se).collect(),
            a_indices: (n_se..n_se + n_a).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.se_indices.len() + self.a_indices.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut seen = vec![false; dim];
        for &i in self.se_indices.iter().chain(&self.a_indices) {
            if i >= dim {
                return Err(Error::invalid(format!("partition index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::invalid(format!("partition index {i} repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("partition does not cover every dimension"));
        }
        if self.se_indices.is_empty() || self.a_indices.is_empty() {
            return Err(Error::invalid("both partition blocks must be non-empty"));
        }
        Ok(())
    }
}

fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Gaussian mixture regression with everything that does not depend on the
/// conditioning value precomputed.
#[derive(Clone, Debug)]
pub struct GmmRegressor {
    partition: BlockPartition,
    log_prior: Vec<f64>,
    prior: Vec<f64>,
    se_marginals: Vec<Gaussian>,
    gains: Vec<DMatrix<f64>>,
    action_means: Vec<DVector<f64>>,
    // zero-mean conditional noise per component
    noise: Vec<Gaussian>,
}

/// Result of evaluating the conditional weights at one SE value.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalWeights {
    pub weights: Vec<f64>,
    /// True when every component density underflowed and the prior was used.
    pub fell_back: bool,
}

impl GmmRegressor {
    pub fn new(model: &GmmParams, part: &BlockPartition, cov_floor: f64) -> Result<Self> {
        part.validate(model.dim())?;
        let se = &part.se_indices;
        let a = &part.a_indices;
        let mut se_marginals = Vec::new();
        let mut gains = Vec::new();
        let mut action_means = Vec::new();
        let mut noise = Vec::new();
        for c in model.components() {
            let cov_se = sub_matrix(c.cov(), se, se);
            let cov_a = sub_matrix(c.cov(), a, a);
            let cov_a_se = sub_matrix(c.cov(), a, se);
            let marginal = match Gaussian::new(sub_vector(c.mean(), se), cov_se.clone()) {
                Ok(g) => g,
                Err(_) => Gaussian::new(
                    sub_vector(c.mean(), se),
                    clamp_min_eigenvalue(cov_se, cov_floor),
                )?,
            };
            // K = Σ_{a,SE} Σ_SE⁻¹ via the cached Cholesky factor
            let chol = nalgebra::Cholesky::new(marginal.cov().clone())
                .ok_or_else(|| Error::Numerical("SE block not positive definite".into()))?;
            let gain = chol.solve(&cov_a_se.transpose()).transpose();
            let schur = &cov_a - &gain * cov_a_se.transpose();
            let schur = clamp_min_eigenvalue((&schur + schur.transpose()) * 0.5, cov_floor);
            noise.push(Gaussian::new(DVector::zeros(a.len()), schur)?);
            action_means.push(sub_vector(c.mean(), a));
            gains.push(gain);
            se_marginals.push(marginal);
        }
        Ok(Self {
            partition: part.clone(),
            log_prior: model.weights().iter().map(|w| w.ln()).collect(),
            prior: model.weights().to_vec(),
            se_marginals,
            gains,
            action_means,
            noise,
        })
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn se_dim(&self) -> usize {
        self.partition.se_indices.len()
    }

    pub fn action_dim(&self) -> usize {
        self.partition.a_indices.len()
    }

    /// Component weights `∝ π_g N(se; μ_{g,SE}, Σ_{g,SE})`.
    pub fn conditional_weights(&self, se_value: &[f64]) -> ConditionalWeights {
        let logs: Vec<f64> = self
            .log_prior
            .iter()
            .zip(&self.se_marginals)
            .map(|(lp, m)| lp + m.log_pdf(se_value))
            .collect();
        let norm = log_sum_exp(&logs);
        if !norm.is_finite() {
            warn!("conditional weights degenerate; falling back to prior weights");
            return ConditionalWeights {
                weights: self.prior.clone(),
                fell_back: true,
            };
        }
        ConditionalWeights {
            weights: logs.iter().map(|l| (l - norm).exp()).collect(),
            fell_back: false,
        }
    }

    /// `μ_{g,a} + K_g (se − μ_{g,SE})` for component `g`.
    pub fn conditional_mean(&self, g: usize, se_value: &[f64]) -> DVector<f64> {
        let diff = DVector::from_iterator(
            se_value.len(),
            se_value
                .iter()
                .zip(self.se_marginals[g].mean().iter())
                .map(|(s, m)| s - m),
        );
        &self.action_means[g] + &self.gains[g] * diff
    }

    pub fn conditional_cov(&self, g: usize) -> &DMatrix<f64> {
        self.noise[g].cov()
    }

    /// Expected action under the conditional mixture.
    pub fn predict_mean(&self, se_value: &[f64]) -> DVector<f64> {
        let w = self.conditional_weights(se_value);
        w.weights
            .iter()
            .enumerate()
            .fold(DVector::zeros(self.action_dim()), |acc, (g, wg)| {
                acc + self.conditional_mean(g, se_value) * *wg
            })
    }

    pub fn condition(&self, se_value: &[f64]) -> Result<GmmParams> {
        check_dim(self.se_dim(), se_value.len())?;
        let w = self.conditional_weights(se_value);
        let comps = (0..self.noise.len())
            .map(|g| Gaussian::new(self.conditional_mean(g, se_value), self.noise[g].cov().clone()))
            .collect::<Result<Vec<_>>>()?;
        // renormalize once more so the sum is exact to rounding
        let total: f64 = w.weights.iter().sum();
        GmmParams::new(w.weights.iter().map(|x| x / total).collect(), comps)
    }

    /// One draw from the conditional mixture; returns the action and whether
    /// the conditioning fell back to prior weights.
    pub fn sample<R: Rng + ?Sized>(&self, se_value: &[f64], rng: &mut R) -> (Vec<f64>, bool) {
        let w = self.conditional_weights(se_value);
        let g = pick_index(&w.weights, rng);
        let mut out = self.noise[g].sample(rng);
        let mean = self.conditional_mean(g, se_value);
        for (o, m) in out.iter_mut().zip(mean.iter()) {
            *o += m;
        }
        (out, w.fell_back)
    }
}

/// k-means++ seeding over the rows of `data`.
fn kmeanspp<R: Rng + ?Sized>(data: &DataMatrix, k: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let n = data.nrows();
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(DVector::from_row_slice(data.row(first)));
    let mut d2: Vec<f64> = data
        .rows()
        .map(|r| sq_dist(r, centers[0].as_slice()))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            pick_index(&d2, rng)
        } else {
            rng.random_range(0..n)
        };
        let c = DVector::from_row_slice(data.row(idx));
        for (i, r) in data.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, c.as_slice()));
        }
        centers.push(c);
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean per-dimension variance, used to scale the identity at initialization.
fn isotropic_scale(data: &DataMatrix, floor: f64) -> f64 {
    let cov = data.covariance();
    (cov.trace() / data.ncols() as f64).max(floor)
}

/// Seeded initialization: k-means++ means, identity-scaled covariances,
/// uniform weights.
pub fn initialize(data: &DataMatrix, n_components: usize, config: &FitConfig, seed: u64) -> Result<GmmParams> {
    validate_fit_input(data, n_components)?;
    let mut rng = rng_from_seed(seed);
    let scale = isotropic_scale(data, config.cov_floor);
    let d = data.ncols();
    let comps = kmeanspp(data, n_components, &mut rng)
        .into_iter()
        .map(|m| Gaussian::new(m, DMatrix::identity(d, d) * scale))
        .collect::<Result<Vec<_>>>()?;
    GmmParams::new(vec![1.0 / n_components as f64; n_components], comps)
}

fn validate_fit_input(data: &DataMatrix, n_components: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("cannot fit a mixture to empty data"));
    }
    if n_components == 0 {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    if data.nrows() < n_components {
        return Err(Error::invalid(format!(
            "{} samples cannot support {n_components} components",
            data.nrows()
        )));
    }
    if !data.all_finite() {
        return Err(Error::invalid("non-finite sample"));
    }
    Ok(())
}

/// Sufficient statistics from one E-step.
struct EStep {
    log_likelihood: f64,
    // row-major n × k responsibilities
    resp: Vec<f64>,
}

fn e_step(model: &GmmParams, data: &DataMatrix) -> EStep {
    let k = model.n_components();
    let log_w: Vec<f64> = model.weights().iter().map(|w| w.ln()).collect();
    let mut resp = vec![0.0; data.nrows() * k];
    let mut ll = 0.0;
    for (i, r) in data.rows().enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        for (g, c) in model.components().iter().enumerate() {
            row[g] = log_w[g] + c.log_pdf(r);
        }
        let norm = log_sum_exp(row);
        ll += norm;
        for v in row.iter_mut() {
            *v = (*v - norm).exp();
        }
    }
    EStep {
        log_likelihood: ll,
        resp,
    }
}

fn m_step<R: Rng + ?Sized>(
    data: &DataMatrix,
    stats: &EStep,
    prev: &GmmParams,
    config: &FitConfig,
    init_scale: f64,
    rng: &mut R,
) -> Result<GmmParams> {
    let k = prev.n_components();
    let d = data.ncols();
    let n = data.nrows();
    let mut mass = vec![0.0; k];
    let mut sums = vec![DVector::<f64>::zeros(d); k];
    for (i, r) in data.rows().enumerate() {
        for g in 0..k {
            let w = stats.resp[i * k + g];
            mass[g] += w;
            for j in 0..d {
                sums[g][j] += w * r[j];
            }
        }
    }
    let mut weights = Vec::with_capacity(k);
    let mut comps = Vec::with_capacity(k);
    let mut diff = vec![0.0; d];
    for g in 0..k {
        if mass[g] < 1e-10 {
            let idx = rng.random_range(0..n);
            warn!("mixture component {g} collapsed; re-seeding at sample {idx}");
            comps.push(Gaussian::new(
                DVector::from_row_slice(data.row(idx)),
                DMatrix::identity(d, d) * init_scale,
            )?);
            weights.push(1.0 / k as f64);
            continue;
        }
        let mean = &sums[g] / mass[g];
        let mut cov = DMatrix::zeros(d, d);
        for (i, r) in data.rows().enumerate() {
            for j in 0..d {
                diff[j] = r[j] - mean[j];
            }
            accumulate_outer(&mut cov, &diff, stats.resp[i * k + g]);
        }
        symmetrize_lower(&mut cov);
        cov /= mass[g];
        comps.push(Gaussian::regularized(mean, cov, config.cov_floor)?);
        weights.push(mass[g] / n as f64);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmParams::new(weights, comps)
}

/// Runs EM from `init` until the relative log-likelihood improvement drops
/// below `config.tol` or `config.max_iter` updates have been made.
pub fn em_from(
    data: &DataMatrix,
    init: GmmParams,
    config: &FitConfig,
    seed: u64,
) -> Result<(GmmParams, FitReport)> {
    validate_fit_input(data, init.n_components())?;
    check_dim(init.dim(), data.ncols())?;
    // reseeding draws use a stream independent of the initialization draws
    let mut rng = rng_from_seed(crate::random::derive_seed(seed, 1));
    let init_scale = isotropic_scale(data, config.cov_floor);
    let mut model = init;
    let mut stats = e_step(&model, data);
    let mut report = FitReport::start(stats.log_likelihood);
    for _ in 0..config.max_iter {
        let next = m_step(data, &stats, &model, config, init_scale, &mut rng)?;
        let next_stats = e_step(&next, data);
        let prev_ll = stats.log_likelihood;
        model = next;
        stats = next_stats;
        if report.record(prev_ll, stats.log_likelihood, config.tol) {
            break;
        }
    }
    debug!(
        "gmm em: {} components, {} iterations, ll {:.6}",
        model.n_components(),
        report.iterations,
        stats.log_likelihood
    );
    Ok((model, report))
}

/// Seeded EM fit of an `n_components` full-covariance mixture.
pub fn em_fit(
    data: &DataMatrix,
    n_components: usize,
    config: &FitConfig,
    seed: u64,
) -> Result<(GmmParams, FitReport)> {
    let init = initialize(data, n_components, config, seed)?;
    em_from(data, init, config, seed)
}

/// `2·lnL − p·ln n`; larger is better.
pub fn bic_score(model: &GmmParams, data: &DataMatrix) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("BIC needs at least one sample"));
    }
    let ll = model.log_likelihood(data)?;
    Ok(2.0 * ll - model.n_free_params() as f64 * (data.nrows() as f64).ln())
}

/// Fits one mixture per candidate component count and keeps the one with the
/// highest BIC (ties go to the smaller count). Returns the count, the model
/// and the score.
pub fn select_by_bic(
    data: &DataMatrix,
    candidates: std::ops::RangeInclusive<usize>,
    config: &FitConfig,
    seed: u64,
) -> Result<(usize, GmmParams, f64)> {
    let mut best: Option<(usize, GmmParams, f64)> = None;
    for k in candidates.clone() {
        let fitted = em_fit(data, k, config, seed).and_then(|(m, _)| {
            let s = bic_score(&m, data)?;
            Ok((m, s))
        });
        match fitted {
            Ok((m, s)) => {
                debug!("bic candidate {k}: {s:.4}");
                if best.as_ref().is_none_or(|(_, _, b)| s > *b) {
                    best = Some((k, m, s));
                }
            }
            Err(e) => warn!("bic candidate {k} skipped: {e}"),
        }
    }
    best.ok_or_else(|| {
        Error::Numerical(format!(
            "no candidate in {}..={} could be fitted",
            candidates.start(),
            candidates.end()
        ))
    })
}

/// Serialized mixture with its feature schema and optional partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmDocument {
    pub schema: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<BlockPartition>,
    pub model: GmmParams,
}

impl GmmDocument {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Self = serde_json::from_str(&text)?;
        check_dim(doc.model.dim(), doc.schema.len())?;
        if let Some(p) = &doc.partition {
            p.validate(doc.model.dim())?;
        }
        Ok(doc)
    }
}
