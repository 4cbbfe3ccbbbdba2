//! Full posterior sampler: SV blocks, shrinkage hierarchy, loadings rows and
//! factors, run in that order every sweep.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, FsvError, Result};
use crate::model::{active_columns, variance_from_log, LogVariancePaths, ReturnsPanel, SvParams};
use crate::samplers::{
    sample_beta, sample_gamma, sample_gig, sample_mvn_from_precision_factor, GigParams, RngHandle,
};
use crate::sv::{sv_stationary_init, sv_update, SvBlock, SvPriors};

/// Prior on the factor loadings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LoadingsPrior {
    /// λ_ij ~ N(0, tau2) with fixed tau2.
    FixedGaussian { tau2: f64 },
    /// λ_ij | τ²_ij ~ N(0, τ²_ij), τ²_ij | λ²_i ~ G(a, a λ²_i / 2), λ²_i ~ G(c, d).
    NormalGammaRowwise { a: f64, c: f64, d: f64 },
    /// As above with the global scale shared down each column.
    NormalGammaColumnwise { a: f64, c: f64, d: f64 },
}

impl LoadingsPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LoadingsPrior::FixedGaussian { tau2 } => {
                ensure!(
                    tau2 > 0.0 && tau2.is_finite(),
                    Config,
                    "tau2 must be positive (got {tau2})"
                );
            }
            LoadingsPrior::NormalGammaRowwise { a, c, d }
            | LoadingsPrior::NormalGammaColumnwise { a, c, d } => {
                for (name, v) in [("a", a), ("c", c), ("d", d)] {
                    ensure!(
                        v > 0.0 && v.is_finite(),
                        Config,
                        "shrinkage hyperparameter {name} must be positive (got {v})"
                    );
                }
            }
        }
        Ok(())
    }

    /// The named presets: `gaussian`, `lasso-row`, `lasso-col`, `ng-row`, `ng-col`.
    pub fn preset(name: &str) -> Result<Self> {
        const C: f64 = 0.001;
        const D: f64 = 0.001;
        Ok(match name {
            "gaussian" => LoadingsPrior::FixedGaussian { tau2: 1.0 },
            "lasso-row" => LoadingsPrior::NormalGammaRowwise { a: 1.0, c: C, d: D },
            "lasso-col" => LoadingsPrior::NormalGammaColumnwise { a: 1.0, c: C, d: D },
            "ng-row" => LoadingsPrior::NormalGammaRowwise { a: 0.1, c: C, d: D },
            "ng-col" => LoadingsPrior::NormalGammaColumnwise { a: 0.1, c: C, d: D },
            other => {
                return Err(FsvError::Config(format!(
                    "unknown prior preset '{other}' (expected gaussian, lasso-row, lasso-col, ng-row, ng-col)"
                )))
            }
        })
    }

    pub fn global_len(&self, m: usize, r: usize) -> usize {
        match self {
            LoadingsPrior::FixedGaussian { .. } => 0,
            LoadingsPrior::NormalGammaRowwise { .. } => m,
            LoadingsPrior::NormalGammaColumnwise { .. } => r,
        }
    }
}

/// Local (τ²) and global (λ²) shrinkage variances.
#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkageState {
    pub tau2: DMatrix<f64>,
    pub lambda2: Vec<f64>,
}

/// One full configuration of all unobservables.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// m×r
    pub loadings: DMatrix<f64>,
    /// r×T; column t−1 holds f_t.
    pub factors: DMatrix<f64>,
    pub logvar: LogVariancePaths,
    pub idio_params: Vec<SvParams>,
    pub factor_params: Vec<SvParams>,
    pub shrinkage: ShrinkageState,
}

impl LatentState {
    pub fn n_series(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn n_dates(&self) -> usize {
        self.logvar.idio.ncols() - 1
    }

    /// Σ_t for date t in 1..=T (t = 0 uses the initial states).
    pub fn covariance_at(&self, t: usize) -> Result<DMatrix<f64>> {
        crate::model::covariance_at(
            &self.loadings,
            &self.logvar.factor_at(t),
            &self.logvar.idio_at(t),
        )
    }

    /// Reorders factor columns: new column `k` is old column `perm[k]`.
    pub fn permute_factors(&self, perm: &[usize]) -> Result<LatentState> {
        let r = self.n_factors();
        let mut seen = vec![false; r];
        ensure!(
            perm.len() == r,
            Contract,
            "permutation has length {} but r = {r}",
            perm.len()
        );
        for &p in perm {
            ensure!(
                p < r && !seen[p],
                Contract,
                "invalid factor permutation {perm:?}"
            );
            seen[p] = true;
        }
        let mut out = self.clone();
        for (k, &p) in perm.iter().enumerate() {
            out.loadings.set_column(k, &self.loadings.column(p));
            out.shrinkage
                .tau2
                .set_column(k, &self.shrinkage.tau2.column(p));
            out.factors.set_row(k, &self.factors.row(p));
            out.logvar.factor.set_row(k, &self.logvar.factor.row(p));
            out.factor_params[k] = self.factor_params[p];
        }
        Ok(out)
    }
}

/// Which parts of each kept draw are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreMode {
    /// Full log-variance and factor paths.
    Full,
    /// Only the last state (h_T, f_T); enough for forecasting.
    Terminal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub r: usize,
    pub n_draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub restricted_loadings: bool,
    #[serde(skip)]
    pub fixed_factors: Option<DMatrix<f64>>,
    pub sv_priors_idio: SvPriors,
    pub sv_priors_factor: SvPriors,
    pub loadings_prior: LoadingsPrior,
    pub seed: u64,
    pub store: StoreMode,
    /// Run per-site updates on the rayon pool; output is identical either way.
    pub parallel: bool,
    /// Add the [`DeepInterweaving`] move after the loadings step.
    #[serde(default)]
    pub interweave: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            r: 1,
            n_draws: 11_000,
            burn_in: 1_000,
            thin: 10,
            restricted_loadings: false,
            fixed_factors: None,
            sv_priors_idio: SvPriors::idiosyncratic_default(),
            sv_priors_factor: SvPriors::factor_default(),
            loadings_prior: LoadingsPrior::NormalGammaRowwise {
                a: 0.1,
                c: 0.001,
                d: 0.001,
            },
            seed: 42,
            store: StoreMode::Full,
            parallel: false,
            interweave: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self, t_len: usize) -> Result<()> {
        ensure!(self.thin >= 1, Config, "thin must be >= 1");
        ensure!(
            self.burn_in < self.n_draws,
            Config,
            "burn_in ({}) must be smaller than n_draws ({})",
            self.burn_in,
            self.n_draws
        );
        self.sv_priors_idio.validate()?;
        self.sv_priors_factor.validate()?;
        self.loadings_prior.validate()?;
        if let Some(f) = &self.fixed_factors {
            ensure!(
                f.nrows() == self.r && f.ncols() == t_len,
                Config,
                "fixed factors are {}x{} but expected {}x{t_len}",
                f.nrows(),
                f.ncols(),
                self.r
            );
            ensure!(
                f.iter().all(|v| v.is_finite()),
                Config,
                "fixed factors must be finite"
            );
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        (self.n_draws - self.burn_in) / self.thin
    }
}

const STREAM_SCAFFOLD: u64 = 0;
const STREAM_IDIO: u64 = 1;
const STREAM_FACTOR_SV: u64 = 2;
const STREAM_ROW: u64 = 3;
const STREAM_TIME: u64 = 4;
const STREAM_SHRINK: u64 = 5;
const STREAM_INIT: u64 = 6;

pub(crate) fn stream_id(kind: u64, index: usize) -> u64 {
    (kind << 48) | index as u64
}

/// One RNG stream per update site, all derived from the master seed.
#[derive(Clone, Debug)]
pub struct SweepStreams {
    pub scaffold: RngHandle,
    pub shrinkage: RngHandle,
    idio: Vec<RngHandle>,
    factor_sv: Vec<RngHandle>,
    rows: Vec<RngHandle>,
    times: Vec<RngHandle>,
}

impl SweepStreams {
    pub fn new(seed: u64, m: usize, r: usize, t_len: usize) -> Self {
        let make = |kind, n| {
            (0..n)
                .map(|i| RngHandle::new(seed, stream_id(kind, i)))
                .collect::<Vec<_>>()
        };
        SweepStreams {
            scaffold: RngHandle::new(seed, stream_id(STREAM_SCAFFOLD, 0)),
            shrinkage: RngHandle::new(seed, stream_id(STREAM_SHRINK, 0)),
            idio: make(STREAM_IDIO, m),
            factor_sv: make(STREAM_FACTOR_SV, r),
            rows: make(STREAM_ROW, m),
            times: make(STREAM_TIME, t_len),
        }
    }
}

fn map_sites<T, F>(parallel: bool, streams: &mut [RngHandle], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut RngHandle) -> Result<T> + Sync + Send,
{
    if parallel {
        streams
            .par_iter_mut()
            .enumerate()
            .map(|(i, s)| f(i, s))
            .collect()
    } else {
        streams
            .iter_mut()
            .enumerate()
            .map(|(i, s)| f(i, s))
            .collect()
    }
}

/// (shape, rate) of the Gamma conditional of λ²_i for row `i` (0-based).
pub fn rowwise_global_conditional(
    tau2: &DMatrix<f64>,
    i: usize,
    a: f64,
    c: f64,
    d: f64,
    restricted: bool,
) -> (f64, f64) {
    let active = active_columns(i, tau2.ncols(), restricted);
    let sum: f64 = (0..active).map(|j| tau2[(i, j)]).sum();
    (c + a * active as f64, d + 0.5 * a * sum)
}

/// (shape, rate) of the Gamma conditional of λ²_j for column `j` (0-based).
pub fn columnwise_global_conditional(
    tau2: &DMatrix<f64>,
    j: usize,
    a: f64,
    c: f64,
    d: f64,
    restricted: bool,
) -> (f64, f64) {
    let first = if restricted { j } else { 0 };
    let m = tau2.nrows();
    let sum: f64 = (first..m).map(|i| tau2[(i, j)]).sum();
    (c + a * m.saturating_sub(first) as f64, d + 0.5 * a * sum)
}

fn draw_local(rng: &mut RngHandle, a: f64, lambda2: f64, loading: f64) -> Result<f64> {
    // A loading of exactly zero would make the GIG improper for a < 1/2.
    let l = (loading * loading).max(f64::MIN_POSITIVE);
    sample_gig(rng, GigParams::new(a - 0.5, a * lambda2, l)?)
}

/// λ²_i ~ G(c + a r̃, d + a/2 Σ_j τ²_ij), then τ²_ij ~ GIG(a − 1/2, a λ²_i, λ²_ij).
pub fn update_shrinkage_rowwise(
    rng: &mut RngHandle,
    loadings: &DMatrix<f64>,
    state: &ShrinkageState,
    prior: &LoadingsPrior,
    restricted: bool,
) -> Result<ShrinkageState> {
    let LoadingsPrior::NormalGammaRowwise { a, c, d } = *prior else {
        return Err(FsvError::Contract(
            "row-wise update requires the row-wise Normal-Gamma prior".into(),
        ));
    };
    let (m, r) = loadings.shape();
    ensure!(
        state.tau2.shape() == (m, r) && state.lambda2.len() == m,
        Contract,
        "shrinkage state does not match loadings"
    );
    let mut out = state.clone();
    for i in 0..m {
        let (shape, rate) = rowwise_global_conditional(&out.tau2, i, a, c, d, restricted);
        out.lambda2[i] = sample_gamma(rng, shape, rate)?;
        for j in 0..active_columns(i, r, restricted) {
            out.tau2[(i, j)] = draw_local(rng, a, out.lambda2[i], loadings[(i, j)])?;
        }
    }
    Ok(out)
}

/// λ²_j ~ G(c + a (m − j̃ + 1), d + a/2 Σ_{i ≥ j̃} τ²_ij), then the active τ²_ij.
pub fn update_shrinkage_columnwise(
    rng: &mut RngHandle,
    loadings: &DMatrix<f64>,
    state: &ShrinkageState,
    prior: &LoadingsPrior,
    restricted: bool,
) -> Result<ShrinkageState> {
    let LoadingsPrior::NormalGammaColumnwise { a, c, d } = *prior else {
        return Err(FsvError::Contract(
            "column-wise update requires the column-wise Normal-Gamma prior".into(),
        ));
    };
    let (m, r) = loadings.shape();
    ensure!(
        state.tau2.shape() == (m, r) && state.lambda2.len() == r,
        Contract,
        "shrinkage state does not match loadings"
    );
    let mut out = state.clone();
    for j in 0..r {
        let (shape, rate) = columnwise_global_conditional(&out.tau2, j, a, c, d, restricted);
        out.lambda2[j] = sample_gamma(rng, shape, rate)?;
        let first = if restricted { j } else { 0 };
        for i in first..m {
            out.tau2[(i, j)] = draw_local(rng, a, out.lambda2[j], loadings[(i, j)])?;
        }
    }
    Ok(out)
}

/// Bayesian regression draw of the free loadings of one row.
///
/// `factors` holds the r̃ active factor paths (r̃×T), `h_row` the row's
/// log-variances at dates 1..T and `psi` the prior precisions 1/τ²_ij.
pub fn sample_loadings_row(
    rng: &mut RngHandle,
    factors: &DMatrix<f64>,
    y_row: &[f64],
    h_row: &[f64],
    psi: &[f64],
) -> Result<DVector<f64>> {
    let k = psi.len();
    let t_len = y_row.len();
    ensure!(
        factors.nrows() >= k && factors.ncols() == t_len && h_row.len() == t_len,
        Contract,
        "loadings row regression: factors {}x{}, {} observations, {} log-variances, {k} coefficients",
        factors.nrows(),
        factors.ncols(),
        t_len,
        h_row.len()
    );
    let (precision, rhs) = row_regression_system(factors, y_row, h_row, psi);
    sample_mvn_from_precision_factor(rng, &rhs, &precision)
}

/// (X'X + Ψ, X'ỹ) for the row regression.
pub fn row_regression_system(
    factors: &DMatrix<f64>,
    y_row: &[f64],
    h_row: &[f64],
    psi: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let k = psi.len();
    let mut precision = DMatrix::from_diagonal(&DVector::from_column_slice(psi));
    let mut rhs = DVector::zeros(k);
    let mut x = vec![0.0; k];
    for t in 0..y_row.len() {
        let w = 1.0 / variance_from_log(h_row[t]);
        for j in 0..k {
            x[j] = factors[(j, t)];
        }
        for a in 0..k {
            rhs[a] += w * x[a] * y_row[t];
            for b in 0..=a {
                precision[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            precision[(b, a)] = precision[(a, b)];
        }
    }
    (precision, rhs)
}

/// Draws f_t ~ N(b, B), B⁻¹ = X_t'X_t + V_t⁻¹, b = B X_t'ỹ_t.
pub fn sample_factors_at(
    rng: &mut RngHandle,
    loadings: &DMatrix<f64>,
    y_t: &[f64],
    h_idio_t: &[f64],
    h_factor_t: &[f64],
) -> Result<DVector<f64>> {
    let (precision, rhs) = factor_system(loadings, y_t, h_idio_t, h_factor_t)?;
    sample_mvn_from_precision_factor(rng, &rhs, &precision)
}

/// (X_t'X_t + V_t⁻¹, X_t'ỹ_t) for the factor draw at one date.
pub fn factor_system(
    loadings: &DMatrix<f64>,
    y_t: &[f64],
    h_idio_t: &[f64],
    h_factor_t: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (m, r) = loadings.shape();
    ensure!(
        y_t.len() == m && h_idio_t.len() == m && h_factor_t.len() == r,
        Contract,
        "factor draw: loadings {m}x{r}, y {}, h_idio {}, h_factor {}",
        y_t.len(),
        h_idio_t.len(),
        h_factor_t.len()
    );
    let mut precision = DMatrix::zeros(r, r);
    let mut rhs = DVector::zeros(r);
    for i in 0..m {
        let w = 1.0 / variance_from_log(h_idio_t[i]);
        for a in 0..r {
            let la = loadings[(i, a)];
            if la == 0.0 {
                continue;
            }
            rhs[a] += w * la * y_t[i];
            for b in 0..=a {
                precision[(a, b)] += w * la * loadings[(i, b)];
            }
        }
    }
    for a in 0..r {
        precision[(a, a)] += 1.0 / variance_from_log(h_factor_t[a]);
        for b in 0..a {
            precision[(b, a)] = precision[(a, b)];
        }
    }
    Ok((precision, rhs))
}

/// A move applied after the loadings step, e.g. a deep interweaving
/// redraw. It must leave the posterior invariant.
pub trait BoostingMove: Send + Sync {
    fn apply(
        &self,
        rng: &mut RngHandle,
        state: LatentState,
        cfg: &ChainConfig,
    ) -> Result<LatentState>;
}

#[derive(Clone, Default)]
pub struct InterweavingHook {
    moves: Vec<Arc<dyn BoostingMove>>,
}

impl InterweavingHook {
    pub fn register(&mut self, mv: Arc<dyn BoostingMove>) {
        self.moves.push(mv);
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }
}

/// Applies the registered moves in order; identity when none are registered.
pub fn deep_interweaving_hook(
    hook: &InterweavingHook,
    rng: &mut RngHandle,
    state: LatentState,
    cfg: &ChainConfig,
) -> Result<LatentState> {
    hook.moves
        .iter()
        .try_fold(state, |s, mv| mv.apply(rng, s, cfg))
}

/// Rescales loadings column j by `scales[j]` and compensates in the factor
/// paths and log-variances, so Σ_t is unchanged.
pub struct ColumnRescale {
    pub scales: Vec<f64>,
}

fn rescale_column(state: &mut LatentState, j: usize, c: f64) {
    state.loadings.column_mut(j).scale_mut(c);
    state.factors.row_mut(j).scale_mut(1.0 / c);
    let shift = -2.0 * c.abs().ln();
    state.logvar.factor.row_mut(j).add_scalar_mut(shift);
}

impl BoostingMove for ColumnRescale {
    fn apply(
        &self,
        _rng: &mut RngHandle,
        mut state: LatentState,
        _cfg: &ChainConfig,
    ) -> Result<LatentState> {
        for (j, &c) in self.scales.iter().enumerate().take(state.n_factors()) {
            rescale_column(&mut state, j, c);
        }
        Ok(state)
    }
}

/// Redraws the scale of every factor in the parameterisation where loading
/// column j is divided by its pivot λ_jj and the factor is multiplied by it.
/// There Λf and the rescaled log-variance path no longer depend on λ_jj, whose
/// conditional combines the loadings prior with the AR(1) law of the path at
/// level log λ_jj². The sign of λ_jj is kept. Skipped for observed factors.
pub struct DeepInterweaving;

impl BoostingMove for DeepInterweaving {
    fn apply(
        &self,
        rng: &mut RngHandle,
        mut state: LatentState,
        cfg: &ChainConfig,
    ) -> Result<LatentState> {
        if cfg.fixed_factors.is_some() {
            return Ok(state);
        }
        let (m, r) = (state.n_series(), state.n_factors());
        let prior_var = |state: &LatentState, i: usize, j: usize| match cfg.loadings_prior {
            LoadingsPrior::FixedGaussian { tau2 } => tau2,
            _ => state.shrinkage.tau2[(i, j)],
        };
        for j in 0..r.min(m) {
            let pivot = state.loadings[(j, j)];
            if pivot == 0.0 || !pivot.is_finite() {
                continue;
            }
            // Gaussian part −A x²/2 and power |x|^n from the other free loadings
            let mut a = 1.0 / prior_var(&state, j, j);
            let mut n = 0usize;
            for i in (0..m).filter(|&i| i != j && j < active_columns(i, r, cfg.restricted_loadings))
            {
                let tilde = state.loadings[(i, j)] / pivot;
                a += tilde * tilde / prior_var(&state, i, j);
                n += 1;
            }
            // the rescaled path h + log λ_jj² is AR(1) around u = log λ_jj²
            let p = state.factor_params[j];
            let s2 = p.sigma * p.sigma;
            let shift = 2.0 * pivot.abs().ln();
            let path: Vec<f64> = state
                .logvar
                .factor
                .row(j)
                .iter()
                .map(|h| h + shift)
                .collect();
            let mut prec = (1.0 - p.phi * p.phi) / s2;
            let mut lin = path[0] * prec;
            for t in 1..path.len() {
                prec += (1.0 - p.phi).powi(2) / s2;
                lin += (1.0 - p.phi) * (path[t] - p.phi * path[t - 1]) / s2;
            }
            let centre = lin / prec;
            let half_n = (n + 1) as f64 / 2.0;
            let log_density =
                |u: f64| half_n * u - 0.5 * a * u.exp() - 0.5 * prec * (u - centre).powi(2);
            let u = slice_sample_log_concave(
                rng,
                shift,
                log_density,
                |u| half_n - 0.5 * a * u.exp() - prec * (u - centre),
                |u| 0.5 * a * u.exp() + prec,
            )?;
            let new_pivot = pivot.signum() * (0.5 * u).exp();
            rescale_column(&mut state, j, new_pivot / pivot);
        }
        Ok(state)
    }
}

/// One slice-sampling update of a univariate log-concave density from `x0`.
/// The bracket width comes from the curvature at the mode, so it does not
/// depend on the current point.
fn slice_sample_log_concave(
    rng: &mut RngHandle,
    x0: f64,
    log_density: impl Fn(f64) -> f64,
    gradient: impl Fn(f64) -> f64,
    neg_curvature: impl Fn(f64) -> f64,
) -> Result<f64> {
    // safeguarded Newton for the mode
    let mut mode = x0;
    for _ in 0..100 {
        let step = gradient(mode) / neg_curvature(mode);
        let step = step.clamp(-5.0, 5.0);
        mode += step;
        if step.abs() < 1e-10 {
            break;
        }
    }
    let width = 3.0 / neg_curvature(mode).sqrt();
    ensure!(
        width.is_finite() && width > 0.0 && x0.is_finite(),
        Numerical,
        "interweaving slice width is degenerate"
    );
    let level = log_density(x0) + rng.uniform_open().ln();
    let mut lo = x0 - width * rng.uniform();
    let mut hi = lo + width;
    while log_density(lo) > level {
        lo -= width;
    }
    while log_density(hi) > level {
        hi += width;
    }
    for _ in 0..200 {
        let x = lo + (hi - lo) * rng.uniform();
        if log_density(x) > level {
            return Ok(x);
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
    }
    Ok(x0)
}

/// Residuals y − Λ f (m×T).
fn residuals(data: &DMatrix<f64>, state: &LatentState) -> DMatrix<f64> {
    if state.n_factors() == 0 {
        data.clone()
    } else {
        data - &state.loadings * &state.factors
    }
}

fn check_state(data: &ReturnsPanel, state: &LatentState, cfg: &ChainConfig) -> Result<()> {
    let (m, t_len) = data.values.shape();
    let r = cfg.r;
    ensure!(
        state.loadings.shape() == (m, r)
            && state.factors.shape() == (r, t_len)
            && state.logvar.idio.shape() == (m, t_len + 1)
            && state.logvar.factor.shape() == (r, t_len + 1)
            && state.idio_params.len() == m
            && state.factor_params.len() == r
            && state.shrinkage.tau2.shape() == (m, r)
            && state.shrinkage.lambda2.len() == cfg.loadings_prior.global_len(m, r),
        Contract,
        "latent state does not conform to data ({m}x{t_len}) and r = {r}"
    );
    Ok(())
}

/// One full sweep: SV blocks, shrinkage, loadings, factors.
pub fn gibbs_sweep(
    streams: &mut SweepStreams,
    data: &ReturnsPanel,
    state: &LatentState,
    cfg: &ChainConfig,
) -> Result<LatentState> {
    gibbs_sweep_with_hook(streams, data, state, cfg, &InterweavingHook::default())
}

pub fn gibbs_sweep_with_hook(
    streams: &mut SweepStreams,
    data: &ReturnsPanel,
    state: &LatentState,
    cfg: &ChainConfig,
    hook: &InterweavingHook,
) -> Result<LatentState> {
    check_state(data, state, cfg)?;
    let y = &data.values;
    let (m, t_len) = y.shape();
    let r = cfg.r;
    let mut next = state.clone();

    // Step 1: m idiosyncratic and r factor SV updates.
    let resid = residuals(y, state);
    let idio_blocks = map_sites(cfg.parallel, &mut streams.idio, |i, rng| {
        let obs: Vec<f64> = resid.row(i).iter().copied().collect();
        let block = SvBlock {
            states: state.logvar.idio.row(i).iter().copied().collect(),
            params: state.idio_params[i],
            has_level: true,
        };
        sv_update(rng, &obs, &block, &cfg.sv_priors_idio)
            .map_err(|e| e.with_context(format!("step 1, idiosyncratic block {i}")))
    })?;
    for (i, b) in idio_blocks.into_iter().enumerate() {
        next.logvar
            .idio
            .set_row(i, &DVector::from_vec(b.states).transpose());
        next.idio_params[i] = b.params;
    }
    let factor_blocks = map_sites(cfg.parallel, &mut streams.factor_sv, |j, rng| {
        let obs: Vec<f64> = state.factors.row(j).iter().copied().collect();
        let block = SvBlock {
            states: state.logvar.factor.row(j).iter().copied().collect(),
            params: state.factor_params[j],
            has_level: false,
        };
        sv_update(rng, &obs, &block, &cfg.sv_priors_factor)
            .map_err(|e| e.with_context(format!("step 1, factor block {j}")))
    })?;
    for (j, b) in factor_blocks.into_iter().enumerate() {
        next.logvar
            .factor
            .set_row(j, &DVector::from_vec(b.states).transpose());
        next.factor_params[j] = b.params;
    }

    if r == 0 {
        return Ok(next);
    }

    // Step 2: shrinkage hierarchy.
    next.shrinkage = match cfg.loadings_prior {
        LoadingsPrior::FixedGaussian { .. } => next.shrinkage,
        LoadingsPrior::NormalGammaRowwise { .. } => update_shrinkage_rowwise(
            &mut streams.shrinkage,
            &next.loadings,
            &next.shrinkage,
            &cfg.loadings_prior,
            cfg.restricted_loadings,
        )
        .map_err(|e| e.with_context("step 2a"))?,
        LoadingsPrior::NormalGammaColumnwise { .. } => update_shrinkage_columnwise(
            &mut streams.shrinkage,
            &next.loadings,
            &next.shrinkage,
            &cfg.loadings_prior,
            cfg.restricted_loadings,
        )
        .map_err(|e| e.with_context("step 2b"))?,
    };

    // Step 3: loadings, row by row.
    let rows = {
        let next_ref = &next;
        map_sites(cfg.parallel, &mut streams.rows, |i, rng| {
            let active = active_columns(i, r, cfg.restricted_loadings);
            let psi: Vec<f64> = (0..active)
                .map(|j| match cfg.loadings_prior {
                    LoadingsPrior::FixedGaussian { tau2 } => 1.0 / tau2,
                    _ => 1.0 / next_ref.shrinkage.tau2[(i, j)],
                })
                .collect();
            let y_row: Vec<f64> = y.row(i).iter().copied().collect();
            let h_row: Vec<f64> = (1..=t_len).map(|t| next_ref.logvar.idio[(i, t)]).collect();
            sample_loadings_row(rng, &next_ref.factors, &y_row, &h_row, &psi)
                .map_err(|e| e.with_context(format!("step 3, row {i}")))
        })?
    };
    for (i, row) in rows.into_iter().enumerate() {
        for j in 0..r {
            next.loadings[(i, j)] = if j < row.len() { row[j] } else { 0.0 };
        }
    }

    next = deep_interweaving_hook(hook, &mut streams.scaffold, next, cfg)
        .map_err(|e| e.with_context("step 3*"))?;
    if cfg.interweave {
        next = DeepInterweaving
            .apply(&mut streams.scaffold, next, cfg)
            .map_err(|e| e.with_context("step 3*"))?;
    }

    // Step 4: factors, date by date, unless they are observed.
    if cfg.fixed_factors.is_none() {
        let next_ref = &next;
        let draws = map_sites(cfg.parallel, &mut streams.times, |t, rng| {
            let y_t: Vec<f64> = y.column(t).iter().copied().collect();
            sample_factors_at(
                rng,
                &next_ref.loadings,
                &y_t,
                &next_ref.logvar.idio_at(t + 1),
                &next_ref.logvar.factor_at(t + 1),
            )
            .map_err(|e| e.with_context(format!("step 4, date {}", t + 1)))
        })?;
        for (t, f) in draws.into_iter().enumerate() {
            next.factors.set_column(t, &f);
        }
    }
    debug_assert_eq!(next.loadings.nrows(), m);
    Ok(next)
}

/// Starting point of every chain: N(0, 1) loadings, zero factors and
/// log-variances, μ_i = log sample variance, φ = 0.9, σ = 0.1, τ² = λ² = 1.
pub fn initial_state(data: &ReturnsPanel, cfg: &ChainConfig) -> Result<LatentState> {
    let (m, t_len) = data.values.shape();
    let r = cfg.r;
    let mut rng = RngHandle::new(cfg.seed, stream_id(STREAM_INIT, 0));
    let loadings = DMatrix::from_fn(m, r, |i, j| {
        if cfg.restricted_loadings && j > i {
            0.0
        } else {
            rng.std_normal()
        }
    });
    let factors = cfg
        .fixed_factors
        .clone()
        .unwrap_or_else(|| DMatrix::zeros(r, t_len));
    let idio_params = (0..m)
        .map(|i| {
            let var = data.values.row(i).iter().map(|v| v * v).sum::<f64>() / t_len as f64;
            SvParams::new(var.max(1e-12).ln(), 0.9, 0.1)
        })
        .collect::<Result<Vec<_>>>()?;
    let factor_params = vec![SvParams::new(0.0, 0.9, 0.1)?; r];
    let tau2_init = match cfg.loadings_prior {
        LoadingsPrior::FixedGaussian { tau2 } => tau2,
        _ => 1.0,
    };
    Ok(LatentState {
        loadings,
        factors,
        logvar: LogVariancePaths::zeros(m, r, t_len),
        idio_params,
        factor_params,
        shrinkage: ShrinkageState {
            tau2: DMatrix::from_element(m, r, tau2_init),
            lambda2: vec![1.0; cfg.loadings_prior.global_len(m, r)],
        },
    })
}

/// Draws every unobservable from the prior, for T dates.
pub fn sample_from_prior(
    rng: &mut RngHandle,
    m: usize,
    t_len: usize,
    cfg: &ChainConfig,
) -> Result<LatentState> {
    let r = cfg.r;
    let mut shrinkage = ShrinkageState {
        tau2: DMatrix::from_element(m, r, 1.0),
        lambda2: vec![1.0; cfg.loadings_prior.global_len(m, r)],
    };
    match cfg.loadings_prior {
        LoadingsPrior::FixedGaussian { tau2 } => shrinkage.tau2.fill(tau2),
        LoadingsPrior::NormalGammaRowwise { a, c, d } => {
            for i in 0..m {
                shrinkage.lambda2[i] = sample_gamma(rng, c, d)?;
                for j in 0..r {
                    shrinkage.tau2[(i, j)] = sample_gamma(rng, a, a * shrinkage.lambda2[i] / 2.0)?;
                }
            }
        }
        LoadingsPrior::NormalGammaColumnwise { a, c, d } => {
            for j in 0..r {
                shrinkage.lambda2[j] = sample_gamma(rng, c, d)?;
                for i in 0..m {
                    shrinkage.tau2[(i, j)] = sample_gamma(rng, a, a * shrinkage.lambda2[j] / 2.0)?;
                }
            }
        }
    }
    let loadings = DMatrix::from_fn(m, r, |i, j| {
        if cfg.restricted_loadings && j > i {
            0.0
        } else {
            shrinkage.tau2[(i, j)].sqrt() * rng.std_normal()
        }
    });

    let mut logvar = LogVariancePaths::zeros(m, r, t_len);
    let draw_params = |rng: &mut RngHandle, pri: &SvPriors, has_level: bool| -> Result<SvParams> {
        let mu = if has_level {
            rng.normal(pri.b_mu, pri.big_b_mu.sqrt())
        } else {
            0.0
        };
        let phi = 2.0 * sample_beta(rng, pri.a0, pri.b0)? - 1.0;
        let sigma = (pri.big_b_sigma.sqrt() * rng.std_normal())
            .abs()
            .max(f64::MIN_POSITIVE);
        SvParams::new(mu, phi, sigma)
    };
    let mut idio_params = Vec::with_capacity(m);
    for i in 0..m {
        let p = draw_params(rng, &cfg.sv_priors_idio, true)?;
        let path = simulate_ar1_path(rng, p, true, t_len)?;
        logvar.idio.set_row(i, &DVector::from_vec(path).transpose());
        idio_params.push(p);
    }
    let mut factor_params = Vec::with_capacity(r);
    for j in 0..r {
        let p = draw_params(rng, &cfg.sv_priors_factor, false)?;
        let path = simulate_ar1_path(rng, p, false, t_len)?;
        logvar
            .factor
            .set_row(j, &DVector::from_vec(path).transpose());
        factor_params.push(p);
    }
    let factors = match &cfg.fixed_factors {
        Some(f) => f.clone(),
        None => DMatrix::from_fn(r, t_len, |j, t| {
            (0.5 * logvar.factor[(j, t + 1)]).exp() * rng.std_normal()
        }),
    };
    Ok(LatentState {
        loadings,
        factors,
        logvar,
        idio_params,
        factor_params,
        shrinkage,
    })
}

/// h_0 from the stationary law, then T AR(1) steps.
pub fn simulate_ar1_path(
    rng: &mut RngHandle,
    params: SvParams,
    has_level: bool,
    t_len: usize,
) -> Result<Vec<f64>> {
    let mu = if has_level { params.mu } else { 0.0 };
    let mut path = Vec::with_capacity(t_len + 1);
    path.push(sv_stationary_init(rng, params, has_level)?);
    for t in 1..=t_len {
        let prev = path[t - 1];
        path.push(mu + params.phi * (prev - mu) + params.sigma * rng.std_normal());
    }
    Ok(path)
}

/// Draws y_t ~ N(Λ f_t, Σ̄_t) for every date of `state`.
pub fn simulate_observations(rng: &mut RngHandle, state: &LatentState) -> DMatrix<f64> {
    let (m, t_len) = (state.n_series(), state.n_dates());
    let mean = &state.loadings * &state.factors;
    DMatrix::from_fn(m, t_len, |i, t| {
        let sd = variance_from_log(state.logvar.idio[(i, t + 1)]).sqrt();
        mean.get((i, t)).copied().unwrap_or(0.0) + sd * rng.std_normal()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_panel(m: usize, t: usize, seed: u64) -> ReturnsPanel {
        let mut rng = RngHandle::new(seed, 99);
        ReturnsPanel::from_matrix(DMatrix::from_fn(m, t, |_, _| rng.std_normal())).unwrap()
    }

    fn toy_cfg(r: usize, prior: LoadingsPrior, restricted: bool) -> ChainConfig {
        ChainConfig {
            r,
            n_draws: 10,
            burn_in: 5,
            thin: 1,
            restricted_loadings: restricted,
            loadings_prior: prior,
            ..ChainConfig::default()
        }
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(
            LoadingsPrior::preset("gaussian").unwrap(),
            LoadingsPrior::FixedGaussian { tau2: 1.0 }
        );
        assert!(matches!(
            LoadingsPrior::preset("ng-col").unwrap(),
            LoadingsPrior::NormalGammaColumnwise { a, .. } if a == 0.1
        ));
        assert!(LoadingsPrior::preset("horseshoe").is_err());
    }

    #[test]
    fn rowwise_counts_active_terms() {
        let tau2 = DMatrix::from_fn(3, 3, |i, j| 10f64.powi((3 * i + j) as i32));
        let (a, c, d) = (0.5, 0.01, 0.02);
        for i in 0..3 {
            let (shape, rate) = rowwise_global_conditional(&tau2, i, a, c, d, true);
            let expected_sum: f64 = (0..=i).map(|j| tau2[(i, j)]).sum();
            assert_eq!(shape, c + a * (i + 1) as f64);
            assert_eq!(rate, d + 0.5 * a * expected_sum);
        }
        let (shape, _) = rowwise_global_conditional(&tau2, 0, a, c, d, false);
        assert_eq!(shape, c + a * 3.0);
    }

    #[test]
    fn columnwise_shapes() {
        let tau2 = DMatrix::from_element(3, 3, 1.0);
        for j in 0..3 {
            assert_eq!(
                columnwise_global_conditional(&tau2, j, 0.1, 0.001, 0.001, false).0,
                0.001 + 0.1 * 3.0
            );
        }
        let (shape, rate) = columnwise_global_conditional(&tau2, 2, 0.1, 0.001, 0.001, true);
        assert_eq!(shape, 0.001 + 0.1 * 1.0);
        assert!((rate - (0.001 + 0.05)).abs() < 1e-15);
    }

    #[test]
    fn lasso_case_uses_half_order_gig() {
        // a = 1 gives GIG(1/2, λ², λ_ij²); check the mean against the
        // closed form for p = 1/2: sqrt(l/k) + 1/k.
        let mut rng = RngHandle::new(21, 0);
        let (lambda2, loading) = (2.0f64, 0.7f64);
        let n = 200_000;
        let m = (0..n)
            .map(|_| draw_local(&mut rng, 1.0, lambda2, loading).unwrap())
            .sum::<f64>()
            / n as f64;
        let expected = (loading * loading / lambda2).sqrt() + 1.0 / lambda2;
        assert!((m - expected).abs() / expected < 0.01, "{m} vs {expected}");
    }

    #[test]
    fn global_gamma_mean_for_fixed_tau() {
        let mut rng = RngHandle::new(22, 0);
        let loadings = DMatrix::zeros(1, 1);
        let (a, c, d) = (0.1, 0.5, 0.7);
        let prior = LoadingsPrior::NormalGammaRowwise { a, c, d };
        let state = ShrinkageState {
            tau2: DMatrix::from_element(1, 1, 2.0),
            lambda2: vec![1.0],
        };
        let n = 200_000;
        let mean = (0..n)
            .map(|_| {
                update_shrinkage_rowwise(&mut rng, &loadings, &state, &prior, false)
                    .unwrap()
                    .lambda2[0]
            })
            .sum::<f64>()
            / n as f64;
        let expected = (c + a) / (d + a / 2.0 * 2.0);
        assert!((mean - expected).abs() / expected < 0.01);
    }

    #[test]
    fn wrong_variant_is_contract_error() {
        let mut rng = RngHandle::new(1, 1);
        let state = ShrinkageState {
            tau2: DMatrix::from_element(2, 1, 1.0),
            lambda2: vec![1.0; 2],
        };
        let res = update_shrinkage_columnwise(
            &mut rng,
            &DMatrix::zeros(2, 1),
            &state,
            &LoadingsPrior::preset("ng-row").unwrap(),
            false,
        );
        assert!(matches!(res, Err(FsvError::Contract(_))));
    }

    #[test]
    fn tiny_prior_variance_pins_loadings_to_zero() {
        let mut rng = RngHandle::new(3, 0);
        let t = 200;
        let f = DMatrix::from_fn(1, t, |_, _| rng.std_normal());
        let y: Vec<f64> = (0..t).map(|i| 2.0 * f[(0, i)] + rng.std_normal()).collect();
        let h = vec![0.0; t];
        for _ in 0..1000 {
            let d = sample_loadings_row(&mut rng, &f, &y, &h, &[1e12]).unwrap();
            assert!(d[0].abs() < 1e-4);
        }
    }

    #[test]
    fn scalar_factor_posterior_variance() {
        let lam = DMatrix::from_element(1, 1, 1.0);
        let hf = 0.7;
        let (prec, _) = factor_system(&lam, &[0.3], &[0.0], &[hf]).unwrap();
        assert!((1.0 / prec[(0, 0)] - 1.0 / (1.0 + (-hf).exp())).abs() < 1e-15);
    }

    #[test]
    fn no_factor_sweep_touches_only_volatilities() {
        let data = toy_panel(3, 40, 1);
        let cfg = toy_cfg(0, LoadingsPrior::FixedGaussian { tau2: 1.0 }, false);
        let s0 = initial_state(&data, &cfg).unwrap();
        let mut streams = SweepStreams::new(cfg.seed, 3, 0, 40);
        let s1 = gibbs_sweep(&mut streams, &data, &s0, &cfg).unwrap();
        assert_eq!(s1.loadings.shape(), (3, 0));
        assert_eq!(s1.factors.shape(), (0, 40));
        assert_ne!(s1.logvar.idio, s0.logvar.idio);
    }

    #[test]
    fn fixed_factors_are_untouched() {
        let data = toy_panel(4, 30, 2);
        let mut rng = RngHandle::new(5, 5);
        let f = DMatrix::from_fn(2, 30, |_, _| rng.std_normal());
        let cfg = ChainConfig {
            fixed_factors: Some(f.clone()),
            ..toy_cfg(2, LoadingsPrior::preset("ng-row").unwrap(), false)
        };
        let mut state = initial_state(&data, &cfg).unwrap();
        let mut streams = SweepStreams::new(cfg.seed, 4, 2, 30);
        for _ in 0..5 {
            state = gibbs_sweep(&mut streams, &data, &state, &cfg).unwrap();
            assert_eq!(state.factors, f);
        }
    }

    #[test]
    fn restricted_sweeps_keep_upper_triangle_zero_and_shrinkage_positive() {
        let data = toy_panel(5, 50, 3);
        for preset in ["gaussian", "ng-row", "ng-col", "lasso-row", "lasso-col"] {
            let cfg = toy_cfg(3, LoadingsPrior::preset(preset).unwrap(), true);
            let mut state = initial_state(&data, &cfg).unwrap();
            let mut streams = SweepStreams::new(cfg.seed, 5, 3, 50);
            for _ in 0..20 {
                state = gibbs_sweep(&mut streams, &data, &state, &cfg).unwrap();
                for i in 0..5 {
                    for j in (i + 1)..3 {
                        assert_eq!(state.loadings[(i, j)], 0.0);
                    }
                }
                assert!(state.shrinkage.tau2.iter().all(|&v| v > 0.0));
                assert!(state.shrinkage.lambda2.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let data = toy_panel(3, 20, 4);
        let cfg = toy_cfg(1, LoadingsPrior::preset("gaussian").unwrap(), false);
        let state = initial_state(
            &data,
            &toy_cfg(2, LoadingsPrior::preset("gaussian").unwrap(), false),
        )
        .unwrap();
        let mut streams = SweepStreams::new(1, 3, 1, 20);
        assert!(matches!(
            gibbs_sweep(&mut streams, &data, &state, &cfg),
            Err(FsvError::Contract(_))
        ));
    }

    #[test]
    fn hook_default_and_rescale() {
        let data = toy_panel(4, 10, 6);
        let cfg = toy_cfg(2, LoadingsPrior::preset("gaussian").unwrap(), false);
        let mut rng = RngHandle::new(6, 1);
        let state = sample_from_prior(&mut rng, 4, 10, &cfg).unwrap();
        let _ = data;
        let hook = InterweavingHook::default();
        assert_eq!(
            deep_interweaving_hook(&hook, &mut rng, state.clone(), &cfg).unwrap(),
            state
        );

        let mut hook = InterweavingHook::default();
        hook.register(Arc::new(ColumnRescale {
            scales: vec![1.0, 1.0],
        }));
        assert_eq!(
            deep_interweaving_hook(&hook, &mut rng, state.clone(), &cfg).unwrap(),
            state
        );

        let mut hook = InterweavingHook::default();
        hook.register(Arc::new(ColumnRescale {
            scales: vec![2.5, -0.3],
        }));
        let moved = deep_interweaving_hook(&hook, &mut rng, state.clone(), &cfg).unwrap();
        for t in 0..=10 {
            let a = state.covariance_at(t).unwrap();
            let b = moved.covariance_at(t).unwrap();
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn interweaving_moves_scale_and_keeps_covariance() {
        let cfg = ChainConfig {
            interweave: true,
            restricted_loadings: true,
            ..toy_cfg(
                2,
                LoadingsPrior::NormalGammaRowwise {
                    a: 1.0,
                    c: 2.0,
                    d: 2.0,
                },
                true,
            )
        };
        let mut rng = RngHandle::new(8, 1);
        let state = sample_from_prior(&mut rng, 4, 30, &cfg).unwrap();
        let moved = DeepInterweaving
            .apply(&mut rng, state.clone(), &cfg)
            .unwrap();
        for j in 0..2 {
            assert_ne!(moved.loadings[(j, j)], state.loadings[(j, j)]);
            assert_eq!(
                moved.loadings[(j, j)].signum(),
                state.loadings[(j, j)].signum()
            );
        }
        assert_eq!(moved.loadings[(0, 1)], 0.0);
        for t in 0..=30 {
            let a = state.covariance_at(t).unwrap();
            let b = moved.covariance_at(t).unwrap();
            assert!((&a - &b).amax() < 1e-9 * a.amax(), "t = {t}: {a} vs {b}");
        }
        let fixed = ChainConfig {
            fixed_factors: Some(state.factors.clone()),
            ..cfg
        };
        assert_eq!(
            DeepInterweaving
                .apply(&mut rng, state.clone(), &fixed)
                .unwrap(),
            state
        );
    }

    #[test]
    fn permutation_roundtrip() {
        let cfg = toy_cfg(3, LoadingsPrior::preset("ng-row").unwrap(), false);
        let mut rng = RngHandle::new(7, 1);
        let s = sample_from_prior(&mut rng, 5, 8, &cfg).unwrap();
        let p = s.permute_factors(&[2, 0, 1]).unwrap();
        assert_eq!(p.loadings.column(0), s.loadings.column(2));
        let back = p.permute_factors(&[1, 2, 0]).unwrap();
        assert_eq!(back, s);
        assert!(s.permute_factors(&[0, 0, 1]).is_err());
        let (a, b) = (s.covariance_at(3).unwrap(), p.covariance_at(3).unwrap());
        assert!((&a - &b).amax() <= 1e-12 * a.amax());
    }
}
