//! Competitor covariance estimators, minimum-variance portfolios and the
//! evaluation metrics used for backtests and simulation studies.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, FsvError, Result};
use crate::model::log_density_dense;

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
pub const DEFAULT_MA_WINDOW: usize = 500;
pub const DEFAULT_EWMA_ALPHAS: [f64; 3] = [0.9, 0.97, 0.99];

/// Zero-mean sample covariance of the `window` columns ending at date `t`
/// (1-based, inclusive). `data` is m × T.
pub fn ma_covariance(data: &DMatrix<f64>, window: usize, t: usize) -> Result<DMatrix<f64>> {
    ensure!(window >= 1, Contract, "window must be >= 1");
    ensure!(
        t >= window,
        Contract,
        "t = {t} is shorter than the window {window}"
    );
    ensure!(
        t <= data.ncols(),
        Contract,
        "t = {t} exceeds the panel length {}",
        data.ncols()
    );
    let x = data.columns(t - window, window);
    let s = &x * x.transpose() / window as f64;
    Ok(symmetrize(s))
}

/// Forecast for date t+1 from Σ_{s+1} = (1−α) y_s y_s' + α Σ_s, s = 1..t,
/// starting at Σ_1 = sigma_init.
pub fn ewma_covariance(
    data: &DMatrix<f64>,
    alpha: f64,
    t: usize,
    sigma_init: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    ewma_covariance_from(data, alpha, 1, t, sigma_init)
}

/// As [`ewma_covariance`] but with sigma_init taken as Σ_start.
pub fn ewma_covariance_from(
    data: &DMatrix<f64>,
    alpha: f64,
    start: usize,
    t: usize,
    sigma_init: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    ensure!(
        alpha > 0.0 && alpha < 1.0,
        Domain,
        "EWMA alpha must lie in (0, 1), got {alpha}"
    );
    let mut ew = Ewma::new(alpha, sigma_init.clone(), data.nrows())?;
    ensure!(
        start >= 1 && t >= start && t <= data.ncols(),
        Contract,
        "invalid EWMA range {start}..={t}"
    );
    for s in start..=t {
        ew.update(data.column(s - 1).as_slice());
    }
    Ok(ew.current().clone())
}

/// Incremental EWMA state.
#[derive(Clone, Debug)]
pub struct Ewma {
    alpha: f64,
    sigma: DMatrix<f64>,
}

impl Ewma {
    pub fn new(alpha: f64, sigma_init: DMatrix<f64>, m: usize) -> Result<Self> {
        ensure!(
            alpha >= 0.0 && alpha < 1.0,
            Domain,
            "EWMA alpha must lie in [0, 1), got {alpha}"
        );
        ensure!(
            sigma_init.shape() == (m, m),
            Contract,
            "sigma_init must be {m}×{m}"
        );
        Ok(Ewma {
            alpha,
            sigma: sigma_init,
        })
    }

    pub fn update(&mut self, y: &[f64]) {
        let a = self.alpha;
        let m = y.len();
        for j in 0..m {
            for i in 0..m {
                self.sigma[(i, j)] = (1.0 - a) * y[i] * y[j] + a * self.sigma[(i, j)];
            }
        }
    }

    pub fn current(&self) -> &DMatrix<f64> {
        &self.sigma
    }
}

/// Ledoit-Wolf shrinkage toward μI under the zero-mean convention; the window
/// is m × n with observations in columns.
pub fn ledoit_wolf(window: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ledoit_wolf_with_intensity(window).map(|(s, _)| s)
}

/// Returns the estimate and the shrinkage intensity δ*.
pub fn ledoit_wolf_with_intensity(window: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let (p, n) = window.shape();
    ensure!(
        n >= 2,
        Contract,
        "Ledoit-Wolf needs at least 2 observations, got {n}"
    );
    ensure!(p >= 1, Contract, "Ledoit-Wolf needs at least one series");
    ensure!(
        window.iter().all(|v| v.is_finite()),
        Domain,
        "window contains non-finite values"
    );
    let s = symmetrize(window * window.transpose() / n as f64);
    let pf = p as f64;
    let mu = s.trace() / pf;
    ensure!(
        mu > 0.0,
        Domain,
        "degenerate window: all observations are zero"
    );
    let norm2 = |a: &DMatrix<f64>| a.iter().map(|v| v * v).sum::<f64>() / pf;
    let mut target_diff = s.clone();
    for i in 0..p {
        target_diff[(i, i)] -= mu;
    }
    let d2 = norm2(&target_diff);
    if d2 <= 0.0 {
        return Ok((s, 1.0));
    }
    let s_norm2 = norm2(&s);
    let mut b_bar2 = 0.0;
    for k in 0..n {
        let x = window.column(k);
        let xx = x.dot(&x);
        let xsx = (x.transpose() * &s * x)[(0, 0)];
        b_bar2 += (xx * xx - 2.0 * xsx) / pf + s_norm2;
    }
    b_bar2 /= (n * n) as f64;
    let b2 = b_bar2.max(0.0).min(d2);
    let delta = b2 / d2;
    let mut out = &s * (1.0 - delta);
    for i in 0..p {
        out[(i, i)] += delta * mu;
    }
    Ok((symmetrize(out), delta))
}

/// ω = Σ̂⁻¹ι / (ι'Σ̂⁻¹ι), renormalised to sum to one.
pub fn min_variance_weights(sigma_hat: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = sigma_hat.nrows();
    ensure!(
        m >= 1 && sigma_hat.is_square(),
        Contract,
        "covariance must be square and non-empty"
    );
    let chol = nalgebra::Cholesky::new(symmetrize(sigma_hat.clone()))
        .ok_or_else(|| FsvError::Domain("covariance estimate is not positive definite".into()))?;
    let w = chol.solve(&DVector::from_element(m, 1.0));
    let total = w.sum();
    ensure!(
        total.is_finite() && total != 0.0,
        Numerical,
        "minimum-variance weights are undefined"
    );
    let mut w = w / total;
    let drift = w.sum() - 1.0;
    if drift != 0.0 {
        let k = w.iamax();
        w[k] -= drift;
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BacktestReport {
    pub annualized_sd: f64,
    pub annualized_excess_return_vs_equal_weight: f64,
    /// None when the annualised sd is zero.
    pub sharpe_ratio: Option<f64>,
    pub daily_returns: Vec<f64>,
}

/// Realised returns ω_t'y_t against the equal-weight portfolio on the same dates.
pub fn portfolio_backtest(
    weights: &[DVector<f64>],
    realized: &[DVector<f64>],
    trading_days_per_year: f64,
) -> Result<BacktestReport> {
    ensure!(
        weights.len() == realized.len(),
        Contract,
        "{} weight vectors for {} return vectors",
        weights.len(),
        realized.len()
    );
    ensure!(!weights.is_empty(), Contract, "empty backtest");
    ensure!(
        trading_days_per_year > 0.0,
        Config,
        "annualisation factor must be positive"
    );
    let mut daily = Vec::with_capacity(weights.len());
    let mut excess = Vec::with_capacity(weights.len());
    for (w, y) in weights.iter().zip(realized) {
        ensure!(
            w.len() == y.len(),
            Contract,
            "weight/return dimension mismatch"
        );
        let r = w.dot(y);
        daily.push(r);
        let ew = DVector::from_element(y.len(), 1.0 / y.len() as f64);
        excess.push(r - ew.dot(y));
    }
    let n = daily.len() as f64;
    let mean = daily.iter().sum::<f64>() / n;
    let var = if daily.len() > 1 {
        daily.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let annualized_sd = var.sqrt() * trading_days_per_year.sqrt();
    let annualized_excess = excess.iter().sum::<f64>() / n * trading_days_per_year;
    Ok(BacktestReport {
        annualized_sd,
        annualized_excess_return_vs_equal_weight: annualized_excess,
        sharpe_ratio: (annualized_sd > 0.0).then(|| annualized_excess / annualized_sd),
        daily_returns: daily,
    })
}

/// Produces Σ̂_{t+1} from the history y_1..y_t (m × t).
pub trait CovarianceForecaster {
    fn name(&self) -> String;
    fn forecast(&mut self, history: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

pub struct MovingAverage {
    pub window: usize,
}

impl CovarianceForecaster for MovingAverage {
    fn name(&self) -> String {
        format!("MA{}", self.window)
    }

    fn forecast(&mut self, history: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ma_covariance(history, self.window, history.ncols())
    }
}

/// EWMA started from the MA covariance of the first `window` days.
pub struct ExponentialMovingAverage {
    pub alpha: f64,
    pub window: usize,
    state: Option<(usize, Ewma)>,
}

impl ExponentialMovingAverage {
    pub fn new(alpha: f64, window: usize) -> Result<Self> {
        ensure!(
            alpha > 0.0 && alpha < 1.0,
            Domain,
            "EWMA alpha must lie in (0, 1), got {alpha}"
        );
        Ok(ExponentialMovingAverage {
            alpha,
            window,
            state: None,
        })
    }
}

impl CovarianceForecaster for ExponentialMovingAverage {
    fn name(&self) -> String {
        format!("EWMA{}", self.alpha)
    }

    fn forecast(&mut self, history: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let t = history.ncols();
        ensure!(
            t >= self.window,
            Contract,
            "EWMA needs {} initial days, got {t}",
            self.window
        );
        let restart = !matches!(&self.state, Some((seen, _)) if *seen <= t);
        if restart {
            let init = ma_covariance(history, self.window, self.window)?;
            self.state = Some((self.window, Ewma::new(self.alpha, init, history.nrows())?));
        }
        let (seen, ew) = self.state.as_mut().expect("initialised");
        while *seen < t {
            ew.update(history.column(*seen).as_slice());
            *seen += 1;
        }
        Ok(ew.current().clone())
    }
}

pub struct LedoitWolf {
    pub window: usize,
}

impl CovarianceForecaster for LedoitWolf {
    fn name(&self) -> String {
        format!("LW{}", self.window)
    }

    fn forecast(&mut self, history: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let t = history.ncols();
        ensure!(
            t >= self.window,
            Contract,
            "t = {t} is shorter than the window {}",
            self.window
        );
        ledoit_wolf(&history.columns(t - self.window, self.window).into_owned())
    }
}

/// Pre-computed forecasts keyed by origin date (Σ̂_{t+1} stored at t).
pub struct Precomputed {
    pub label: String,
    pub by_origin: std::collections::BTreeMap<usize, DMatrix<f64>>,
}

impl CovarianceForecaster for Precomputed {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn forecast(&mut self, history: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.by_origin
            .get(&history.ncols())
            .cloned()
            .ok_or_else(|| {
                FsvError::Contract(format!("no forecast stored for origin {}", history.ncols()))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BacktestRun {
    pub name: String,
    pub report: BacktestReport,
    /// Mean Gaussian plug-in log score of y_{t+1} under Σ̂_{t+1}.
    pub mean_plps: f64,
}

/// For t in [t_start, t_end): Σ̂_{t+1} from columns 1..t only, min-variance
/// weights, realised return at t+1.
pub fn run_backtest(
    data: &DMatrix<f64>,
    forecaster: &mut dyn CovarianceForecaster,
    t_start: usize,
    t_end: usize,
    trading_days_per_year: f64,
) -> Result<BacktestRun> {
    ensure!(
        t_start >= 1 && t_start < t_end && t_end <= data.ncols(),
        Contract,
        "invalid backtest range [{t_start}, {t_end})"
    );
    let mut weights = Vec::with_capacity(t_end - t_start);
    let mut realized = Vec::with_capacity(t_end - t_start);
    let mut plps = 0.0;
    for t in t_start..t_end {
        let history = data.columns(0, t).into_owned();
        let sigma = forecaster.forecast(&history)?;
        let y = data.column(t).into_owned();
        plps += log_density_dense(&sigma, y.as_slice())?;
        weights.push(min_variance_weights(&sigma)?);
        realized.push(y);
    }
    let n = weights.len() as f64;
    Ok(BacktestRun {
        name: forecaster.name(),
        report: portfolio_backtest(&weights, &realized, trading_days_per_year)?,
        mean_plps: plps / n,
    })
}

/// Delimited table with one row per run: name, sd, excess return, Sharpe, PLPS.
pub fn backtest_table(runs: &[BacktestRun]) -> String {
    let mut out =
        String::from("model,annualized_sd,annualized_excess_return,sharpe_ratio,mean_plps\n");
    for r in runs {
        let sharpe = r
            .report
            .sharpe_ratio
            .map_or_else(|| "NA".to_string(), |s| format!("{s:.16e}"));
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{},{:.16e}",
            r.name,
            r.report.annualized_sd,
            r.report.annualized_excess_return_vs_equal_weight,
            sharpe,
            r.mean_plps
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationErrorReport {
    pub rmse: f64,
    pub mae: f64,
    /// Time-averaged RMSE of every pair (symmetric, zero diagonal).
    pub pair_rmse: DMatrix<f64>,
    pub per_series_geometric_relative: Option<Vec<f64>>,
}

/// RMSE and MAE over all i<j pairs and dates.
pub fn correlation_errors(
    truth: &[DMatrix<f64>],
    estimate: &[DMatrix<f64>],
) -> Result<CorrelationErrorReport> {
    ensure!(
        truth.len() == estimate.len() && !truth.is_empty(),
        Contract,
        "correlation series lengths differ or are empty"
    );
    let m = truth[0].nrows();
    ensure!(m >= 2, Contract, "need at least two series");
    ensure!(
        truth.iter().chain(estimate).all(|c| c.shape() == (m, m)),
        Contract,
        "correlation matrices must all be {m}×{m}"
    );
    let n_t = truth.len() as f64;
    let mut pair_sq = DMatrix::<f64>::zeros(m, m);
    let (mut sq, mut abs, mut count) = (0.0, 0.0, 0usize);
    for (a, b) in truth.iter().zip(estimate) {
        for j in 1..m {
            for i in 0..j {
                let e = b[(i, j)] - a[(i, j)];
                sq += e * e;
                abs += e.abs();
                pair_sq[(i, j)] += e * e;
                count += 1;
            }
        }
    }
    let mut pair_rmse = DMatrix::<f64>::zeros(m, m);
    for j in 1..m {
        for i in 0..j {
            let v = (pair_sq[(i, j)] / n_t).sqrt();
            pair_rmse[(i, j)] = v;
            pair_rmse[(j, i)] = v;
        }
    }
    Ok(CorrelationErrorReport {
        rmse: (sq / count as f64).sqrt(),
        mae: abs / count as f64,
        pair_rmse,
        per_series_geometric_relative: None,
    })
}

/// For each series, the geometric mean over its partners of pair RMSE
/// relative to the baseline's; stored in the returned report.
pub fn with_relative_to(
    report: &CorrelationErrorReport,
    baseline: &CorrelationErrorReport,
) -> Result<CorrelationErrorReport> {
    let m = report.pair_rmse.nrows();
    ensure!(
        baseline.pair_rmse.shape() == (m, m),
        Contract,
        "baseline report has a different dimension"
    );
    let mut rel = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = 0.0;
        for j in (0..m).filter(|&j| j != i) {
            let (a, b) = (report.pair_rmse[(i, j)], baseline.pair_rmse[(i, j)]);
            ensure!(
                a > 0.0 && b > 0.0,
                Domain,
                "relative error undefined for pair ({i}, {j}) with zero RMSE"
            );
            acc += (a / b).ln();
        }
        rel.push((acc / (m - 1) as f64).exp());
    }
    let mut out = report.clone();
    out.per_series_geometric_relative = Some(rel);
    Ok(out)
}

pub fn correlation_error_table(named: &[(String, CorrelationErrorReport)]) -> String {
    let mut out = String::from("model,rmse,mae\n");
    for (name, r) in named {
        let _ = writeln!(out, "{name},{:.16e},{:.16e}", r.rmse, r.mae);
    }
    out
}

fn symmetrize(mut s: DMatrix<f64>) -> DMatrix<f64> {
    let m = s.nrows();
    for j in 0..m {
        for i in 0..j {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}
