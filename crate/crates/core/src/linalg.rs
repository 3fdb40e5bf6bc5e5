//! Dense data containers and the multivariate normal density shared by the
//! HMM, GMM and QDA code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance regularization added after every M-step (feature units²).
pub const COV_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Row-major sample matrix: one observation per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    data: Vec<f64>,
    ncols: usize,
}

impl DataMatrix {
    /// An empty matrix with `ncols` columns.
    pub fn with_cols(ncols: usize) -> Result<Self> {
        if ncols == 0 {
            return Err(Error::invalid("data matrix needs at least one column"));
        }
        Ok(Self {
            data: Vec::new(),
            ncols,
        })
    }

    pub fn from_flat(data: Vec<f64>, ncols: usize) -> Result<Self> {
        if ncols == 0 {
            return Err(Error::invalid("data matrix needs at least one column"));
        }
        if !data.len().is_multiple_of(ncols) {
            return Err(Error::invalid(format!(
                "{} values do not fill rows of width {ncols}",
                data.len()
            )));
        }
        Ok(Self { data, ncols })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let ncols = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::invalid("no rows"))?;
        let mut m = Self::with_cols(ncols)?;
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.ncols {
            return Err(Error::DimensionMismatch {
                expected: self.ncols,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Appends every row of `other`.
    pub fn extend(&mut self, other: &DataMatrix) -> Result<()> {
        if other.ncols != self.ncols {
            return Err(Error::DimensionMismatch {
                expected: self.ncols,
                got: other.ncols,
            });
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.data.len() / self.ncols
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.ncols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Contiguous block of rows `start..end` in row-major order.
    pub fn rows_slice(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.ncols..end * self.ncols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> DataMatrix {
        DataMatrix {
            data: self.rows_slice(start, end).to_vec(),
            ncols: self.ncols,
        }
    }

    /// Keeps only the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<DataMatrix> {
        if cols.iter().any(|&c| c >= self.ncols) {
            return Err(Error::invalid("column index out of range"));
        }
        let mut out = DataMatrix::with_cols(cols.len())?;
        for r in self.rows() {
            out.data.extend(cols.iter().map(|&c| r[c]));
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn column_mean(&self) -> DVector<f64> {
        let n = self.nrows().max(1) as f64;
        let mut mean = DVector::zeros(self.ncols);
        for r in self.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean / n
    }

    /// Maximum-likelihood (divide by n) covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.column_mean();
        let d = self.ncols;
        let mut cov = DMatrix::zeros(d, d);
        let mut diff = vec![0.0; d];
        for r in self.rows() {
            for j in 0..d {
                diff[j] = r[j] - mean[j];
            }
            accumulate_outer(&mut cov, &diff, 1.0);
        }
        symmetrize_lower(&mut cov);
        cov / self.nrows().max(1) as f64
    }
}

/// Adds `w · v vᵀ` to the lower triangle of `acc`.
pub(crate) fn accumulate_outer(acc: &mut DMatrix<f64>, v: &[f64], w: f64) {
    let d = v.len();
    for j in 0..d {
        let wj = w * v[j];
        if wj == 0.0 {
            continue;
        }
        for i in j..d {
            acc[(i, j)] += wj * v[i];
        }
    }
}

/// Mirrors the lower triangle into the upper one.
pub(crate) fn symmetrize_lower(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for j in 0..d {
        for i in (j + 1)..d {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// Symmetrizes, adds `floor · I`, and clamps any eigenvalue that rounding left
/// below `floor`.
pub fn regularize_covariance(mut cov: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..cov.nrows() {
        cov[(i, i)] += floor;
    }
    clamp_min_eigenvalue(cov, floor)
}

/// Returns `cov` unchanged when its smallest eigenvalue is at least `floor`,
/// otherwise rebuilds it with eigenvalues clamped at `floor`.
pub fn clamp_min_eigenvalue(cov: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if !cov.iter().all(|v| v.is_finite()) {
        return DMatrix::identity(cov.nrows(), cov.ncols()) * floor;
    }
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.min() >= floor {
        return cov;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}

pub fn min_eigenvalue(cov: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(cov.clone()).eigenvalues.min()
}

/// `log Σ exp(xs)`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GaussianDoc", into = "GaussianDoc")]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    /// Fails unless `cov` is square, matches `mean`, and is positive definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("zero-dimensional Gaussian"));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite Gaussian parameters".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?
            .unpack();
        let log_det_half: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum();
        let log_norm = -0.5 * d as f64 * LN_2PI - log_det_half;
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    /// Regularizes `cov` with [`regularize_covariance`] before construction.
    pub fn regularized(mean: DVector<f64>, cov: DMatrix<f64>, floor: f64) -> Result<Self> {
        Self::new(mean, regularize_covariance(cov, floor))
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let mut z = [0.0f64; 32];
        let mut heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        // forward substitution L z = x - mean
        let mut q = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[(i, k)] * z[k];
            }
            z[i] = s / self.chol[(i, i)];
            q += z[i] * z[i];
        }
        q
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(x)
    }

    /// Writes one draw into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mut s = self.mean[i];
            for k in 0..=i {
                s += self.chol[(i, k)] * z[k];
            }
            out[i] = s;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianDoc {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl From<Gaussian> for GaussianDoc {
    fn from(g: Gaussian) -> Self {
        let d = g.dim();
        GaussianDoc {
            mean: g.mean.iter().copied().collect(),
            covariance: (0..d)
                .map(|i| (0..d).map(|j| g.cov[(i, j)]).collect())
                .collect(),
        }
    }
}

impl TryFrom<GaussianDoc> for Gaussian {
    type Error = Error;

    fn try_from(doc: GaussianDoc) -> Result<Self> {
        let d = doc.mean.len();
        if doc.covariance.len() != d || doc.covariance.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("covariance shape does not match mean"));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| doc.covariance[i][j]);
        Gaussian::new(DVector::from_vec(doc.mean), cov)
    }
}
