//! Domain types and deterministic linear-algebra kernels of the factor SV model.
//!
//! The conditional covariance at time t is Σ_t = Λ V_t Λ' + Σ̄_t with
//! V_t = diag(exp h_factor_t) and Σ̄_t = diag(exp h_idio_t). Matrices are dense
//! and column-major (nalgebra storage).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{ensure, FsvError, Result};

/// Log-variances are clamped to ±40 before exponentiation.
pub const LOG_VARIANCE_CLAMP: f64 = 40.0;

#[inline]
pub fn variance_from_log(h: f64) -> f64 {
    h.clamp(-LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP).exp()
}

#[inline]
pub fn clamped_log(h: f64) -> f64 {
    h.clamp(-LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP)
}

/// m×T panel of (usually demeaned) percent log-returns; rows are series.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnsPanel {
    pub values: DMatrix<f64>,
    pub series_labels: Vec<String>,
    pub date_labels: Vec<String>,
    pub demeaned: bool,
}

impl ReturnsPanel {
    pub fn new(
        values: DMatrix<f64>,
        series_labels: Vec<String>,
        date_labels: Vec<String>,
    ) -> Result<Self> {
        let (m, t) = values.shape();
        ensure!(
            m >= 1 && t >= 2,
            Contract,
            "panel must have m >= 1 and T >= 2 (got {m}x{t})"
        );
        ensure!(
            series_labels.len() == m && date_labels.len() == t,
            Contract,
            "label lengths ({}, {}) do not match panel shape {m}x{t}",
            series_labels.len(),
            date_labels.len()
        );
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FsvError::Domain(format!(
                "non-finite return at series {}, date {}",
                pos % m,
                pos / m
            )));
        }
        Ok(ReturnsPanel {
            values,
            series_labels,
            date_labels,
            demeaned: false,
        })
    }

    /// Panel with generated labels `s1..sm` and `1..T`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let (m, t) = values.shape();
        let series = (1..=m).map(|i| format!("s{i}")).collect();
        let dates = (1..=t).map(|d| d.to_string()).collect();
        Self::new(values, series, dates)
    }

    pub fn n_series(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_dates(&self) -> usize {
        self.values.ncols()
    }

    /// Subtracts each row mean.
    pub fn demean(&mut self) {
        let t = self.n_dates() as f64;
        for mut row in self.values.row_iter_mut() {
            let mean = row.iter().sum::<f64>() / t;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        self.demeaned = true;
    }

    /// The first `t` dates as a new panel.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        ensure!(
            t >= 2 && t <= self.n_dates(),
            Contract,
            "cannot truncate panel of length {} to {t}",
            self.n_dates()
        );
        Ok(ReturnsPanel {
            values: self.values.columns(0, t).into_owned(),
            series_labels: self.series_labels.clone(),
            date_labels: self.date_labels[..t].to_vec(),
            demeaned: self.demeaned,
        })
    }

    pub fn column(&self, t: usize) -> DVector<f64> {
        self.values.column(t).into_owned()
    }
}

/// m×r factor loadings, optionally with zeros above the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadingsMatrix {
    pub entries: DMatrix<f64>,
    pub restricted: bool,
}

impl LoadingsMatrix {
    pub fn new(entries: DMatrix<f64>, restricted: bool) -> Result<Self> {
        ensure!(
            entries.iter().all(|v| v.is_finite()),
            Domain,
            "loadings must be finite"
        );
        if restricted {
            for j in 0..entries.ncols() {
                for i in 0..entries.nrows().min(j) {
                    ensure!(
                        entries[(i, j)] == 0.0,
                        Contract,
                        "restricted loadings have nonzero entry at ({i}, {j})"
                    );
                }
            }
        }
        Ok(LoadingsMatrix {
            entries,
            restricted,
        })
    }

    /// Number of free loadings in row `i` (0-based).
    pub fn active_in_row(&self, i: usize) -> usize {
        active_columns(i, self.entries.ncols(), self.restricted)
    }
}

/// Free columns of row `i` (0-based): `min(i + 1, r)` when restricted, else `r`.
#[inline]
pub fn active_columns(i: usize, r: usize, restricted: bool) -> usize {
    if restricted {
        (i + 1).min(r)
    } else {
        r
    }
}

/// Log-variance paths; column 0 holds the initial state h_0.
#[derive(Clone, Debug, PartialEq)]
pub struct LogVariancePaths {
    pub idio: DMatrix<f64>,
    pub factor: DMatrix<f64>,
}

impl LogVariancePaths {
    pub fn zeros(m: usize, r: usize, t: usize) -> Self {
        LogVariancePaths {
            idio: DMatrix::zeros(m, t + 1),
            factor: DMatrix::zeros(r, t + 1),
        }
    }

    pub fn idio_at(&self, t: usize) -> Vec<f64> {
        self.idio.column(t).iter().copied().collect()
    }

    pub fn factor_at(&self, t: usize) -> Vec<f64> {
        self.factor.column(t).iter().copied().collect()
    }
}

/// AR(1) parameters (level, persistence, innovation sd) of one log-variance process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvParams {
    pub mu: f64,
    pub phi: f64,
    pub sigma: f64,
}

impl SvParams {
    pub fn new(mu: f64, phi: f64, sigma: f64) -> Result<Self> {
        let params = SvParams { mu, phi, sigma };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.mu.is_finite(), Domain, "mu must be finite");
        ensure!(
            self.phi.abs() < 1.0,
            Domain,
            "|phi| must be < 1 (got {})",
            self.phi
        );
        ensure!(
            self.sigma > 0.0 && self.sigma.is_finite(),
            Domain,
            "sigma must be positive (got {})",
            self.sigma
        );
        Ok(())
    }

    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (1.0 - self.phi * self.phi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceAtTime {
    pub sigma: DMatrix<f64>,
    pub t: usize,
}

fn check_dims(loadings: &DMatrix<f64>, h_factor: &[f64], h_idio: &[f64]) -> Result<()> {
    ensure!(
        loadings.nrows() == h_idio.len() && loadings.ncols() == h_factor.len(),
        Contract,
        "loadings are {}x{} but got {} idiosyncratic and {} factor log-variances",
        loadings.nrows(),
        loadings.ncols(),
        h_idio.len(),
        h_factor.len()
    );
    Ok(())
}

/// Λ diag(exp h_factor) Λ' + diag(exp h_idio).
pub fn covariance_at(
    loadings: &DMatrix<f64>,
    h_factor: &[f64],
    h_idio: &[f64],
) -> Result<DMatrix<f64>> {
    check_dims(loadings, h_factor, h_idio)?;
    let m = h_idio.len();
    let scaled = DMatrix::from_fn(m, h_factor.len(), |i, j| {
        loadings[(i, j)] * variance_from_log(h_factor[j])
    });
    let mut sigma = &scaled * loadings.transpose();
    for i in 0..m {
        sigma[(i, i)] += variance_from_log(h_idio[i]);
        for j in 0..i {
            let avg = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = avg;
            sigma[(j, i)] = avg;
        }
    }
    Ok(sigma)
}

/// R_ij = Σ_ij / sqrt(Σ_ii Σ_jj), with entries clipped into [-1, 1].
pub fn correlation_from_covariance(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure!(sigma.is_square(), Contract, "covariance must be square");
    let n = sigma.nrows();
    let sd: Vec<f64> = (0..n).map(|i| sigma[(i, i)]).collect(); // variances
    if let Some(i) = sd.iter().position(|&d| !(d > 0.0)) {
        return Err(FsvError::Domain(format!(
            "nonpositive variance {} at index {i}",
            sd[i]
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (sigma[(i, j)] / (sd[i] * sd[j]).sqrt()).clamp(-1.0, 1.0)
        }
    }))
}

/// Per-series communalities 1 - Σ̄_ii / Σ_ii and their mean.
pub fn communalities(
    loadings: &DMatrix<f64>,
    h_factor: &[f64],
    h_idio: &[f64],
) -> Result<(Vec<f64>, f64)> {
    check_dims(loadings, h_factor, h_idio)?;
    let per_series: Vec<f64> = (0..h_idio.len())
        .map(|i| {
            let common: f64 = (0..h_factor.len())
                .map(|j| loadings[(i, j)].powi(2) * variance_from_log(h_factor[j]))
                .sum();
            let idio = variance_from_log(h_idio[i]);
            (common / (common + idio)).clamp(0.0, 1.0)
        })
        .collect();
    let joint = per_series.iter().sum::<f64>() / per_series.len() as f64;
    Ok((per_series, joint))
}

/// Cholesky factorization with a single jittered retry (1e-10 · trace / n on the diagonal).
pub fn cholesky_jittered(mut mat: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    ensure!(
        mat.is_square(),
        Contract,
        "cholesky requires a square matrix"
    );
    let n = mat.nrows();
    if n == 0 {
        return Cholesky::new(mat).ok_or_else(|| FsvError::Numerical("empty factorization".into()));
    }
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok(chol);
    }
    let trace = mat.trace();
    let diag_max = mat.diagonal().max();
    let diag_min = mat.diagonal().min();
    let jitter = 1e-10 * trace.abs() / n as f64;
    for i in 0..n {
        mat[(i, i)] += jitter;
    }
    Cholesky::new(mat).ok_or_else(|| {
        FsvError::Numerical(format!(
            "{n}x{n} matrix not positive definite after jitter {jitter:e} (diagonal range [{diag_min:e}, {diag_max:e}])"
        ))
    })
}

/// Pieces shared by the Woodbury inverse, the determinant lemma and the
/// low-rank Gaussian density.
struct LowRank {
    /// exp(-h_idio)
    idio_precision: Vec<f64>,
    /// Σ̄⁻¹ Λ
    scaled: DMatrix<f64>,
    /// Cholesky of V⁻¹ + Λ' Σ̄⁻¹ Λ
    inner: Cholesky<f64, Dyn>,
}

impl LowRank {
    fn new(loadings: &DMatrix<f64>, h_factor: &[f64], h_idio: &[f64]) -> Result<Self> {
        check_dims(loadings, h_factor, h_idio)?;
        let (m, r) = loadings.shape();
        let idio_precision: Vec<f64> = h_idio.iter().map(|&h| 1.0 / variance_from_log(h)).collect();
        let scaled = DMatrix::from_fn(m, r, |i, j| loadings[(i, j)] * idio_precision[i]);
        let mut inner = loadings.transpose() * &scaled;
        for j in 0..r {
            inner[(j, j)] += 1.0 / variance_from_log(h_factor[j]);
        }
        let inner = cholesky_jittered(inner).map_err(|e| e.with_context("inner r x r system"))?;
        Ok(LowRank {
            idio_precision,
            scaled,
            inner,
        })
    }

    fn inner_logdet(&self) -> f64 {
        2.0 * self
            .inner
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

/// Σ⁻¹ via the Woodbury identity: Σ̄⁻¹ − Σ̄⁻¹Λ(V⁻¹ + Λ'Σ̄⁻¹Λ)⁻¹Λ'Σ̄⁻¹.
pub fn precision_woodbury(
    loadings: &DMatrix<f64>,
    h_factor: &[f64],
    h_idio: &[f64],
) -> Result<DMatrix<f64>> {
    let lr = LowRank::new(loadings, h_factor, h_idio)?;
    let m = h_idio.len();
    let solved = lr.inner.solve(&lr.scaled.transpose());
    let mut out = -(&lr.scaled * solved);
    for i in 0..m {
        out[(i, i)] += lr.idio_precision[i];
        for j in 0..i {
            let avg = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    Ok(out)
}

/// log det Σ via the matrix determinant lemma.
pub fn logdet_covariance(loadings: &DMatrix<f64>, h_factor: &[f64], h_idio: &[f64]) -> Result<f64> {
    let lr = LowRank::new(loadings, h_factor, h_idio)?;
    let factor_part: f64 = h_factor.iter().map(|&h| clamped_log(h)).sum();
    let idio_part: f64 = h_idio.iter().map(|&h| clamped_log(h)).sum();
    Ok(lr.inner_logdet() + factor_part + idio_part)
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// log N(y; 0, Σ) with Σ = ΛVΛ' + Σ̄, in O(m r²) without forming Σ.
pub fn log_density_lowrank(
    loadings: &DMatrix<f64>,
    h_factor: &[f64],
    h_idio: &[f64],
    y: &[f64],
) -> Result<f64> {
    ensure!(
        y.len() == h_idio.len(),
        Contract,
        "observation has length {} but m = {}",
        y.len(),
        h_idio.len()
    );
    let lr = LowRank::new(loadings, h_factor, h_idio)?;
    let diag_quad: f64 = y
        .iter()
        .zip(&lr.idio_precision)
        .map(|(v, p)| v * v * p)
        .sum();
    let w = lr.scaled.tr_mul(&DVector::from_column_slice(y));
    let lw = lr
        .inner
        .l_dirty()
        .solve_lower_triangular(&w)
        .ok_or_else(|| FsvError::Numerical("triangular solve failed".into()))?;
    let quad = diag_quad - lw.norm_squared();
    let logdet = lr.inner_logdet()
        + h_factor.iter().map(|&h| clamped_log(h)).sum::<f64>()
        + h_idio.iter().map(|&h| clamped_log(h)).sum::<f64>();
    Ok(-0.5 * (y.len() as f64 * LN_2PI + logdet + quad))
}

/// log N(y; 0, Σ) for a dense positive definite Σ.
pub fn log_density_dense(sigma: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    ensure!(
        sigma.is_square() && sigma.nrows() == y.len(),
        Contract,
        "covariance/observation dimension mismatch"
    );
    let chol = Cholesky::new(sigma.clone())
        .ok_or_else(|| FsvError::Domain("covariance is not positive definite".into()))?;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&DVector::from_column_slice(y))
        .ok_or_else(|| FsvError::Numerical("triangular solve failed".into()))?;
    let logdet = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    Ok(-0.5 * (y.len() as f64 * LN_2PI + logdet + z.norm_squared()))
}
