//! Out-of-sample machinery: latent propagation, the two predictive-likelihood
//! estimators, predictive draws, Bayes factors and rolling re-estimation.

use std::collections::BTreeMap;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{ensure, FsvError, Result};
use crate::gibbs::{
    initial_state, stream_id, ChainConfig, InterweavingHook, LatentState, StoreMode,
};
use crate::model::{
    covariance_at, log_density_dense, log_density_lowrank, variance_from_log, ReturnsPanel,
};
use crate::samplers::RngHandle;
use crate::store::{run_chain_from, Snapshot};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const STREAM_PREDICT: u64 = 7;
const STREAM_ROLLING: u64 = 8;

/// Latent values at the forecast date for one posterior draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDraw<'a> {
    pub h_idio_future: Vec<f64>,
    pub h_factor_future: Vec<f64>,
    /// Only filled when the conditional estimator will be used.
    pub f_future: Option<Vec<f64>>,
    pub loadings: &'a DMatrix<f64>,
}

/// (date index, log predictive likelihood) pairs with increasing dates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlSeries {
    pub values: Vec<(usize, f64)>,
}

impl PlSeries {
    pub fn new(values: Vec<(usize, f64)>) -> Result<Self> {
        for w in values.windows(2) {
            ensure!(
                w[0].0 < w[1].0,
                Contract,
                "PL dates must be strictly increasing ({} then {})",
                w[0].0,
                w[1].0
            );
        }
        ensure!(
            values.iter().all(|v| v.1.is_finite()),
            Domain,
            "PL values must be finite"
        );
        Ok(PlSeries { values })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|v| v.1).sum()
    }
}

/// Iterates the AR(1) laws `horizon` steps forward from the draw's h_T.
pub fn propagate_latents<'a>(
    rng: &mut RngHandle,
    snapshot: &'a Snapshot,
    horizon: usize,
    with_factors: bool,
) -> Result<PredictiveDraw<'a>> {
    ensure!(horizon >= 1, Contract, "forecast horizon must be >= 1");
    for p in snapshot.idio_params.iter().chain(&snapshot.factor_params) {
        p.validate().map_err(|e| {
            FsvError::Contract(format!("snapshot parameters violate invariants: {e}"))
        })?;
    }
    let step = |rng: &mut RngHandle, h: f64, mu: f64, phi: f64, sigma: f64| {
        let mut x = h;
        for _ in 0..horizon {
            x = mu + phi * (x - mu) + sigma * rng.std_normal();
        }
        x
    };
    let h_idio_future = snapshot
        .terminal_idio()
        .into_iter()
        .zip(&snapshot.idio_params)
        .map(|(h, p)| step(rng, h, p.mu, p.phi, p.sigma))
        .collect();
    let h_factor_future: Vec<f64> = snapshot
        .terminal_factor()
        .into_iter()
        .zip(&snapshot.factor_params)
        .map(|(h, p)| step(rng, h, 0.0, p.phi, p.sigma))
        .collect();
    let f_future = with_factors.then(|| {
        h_factor_future
            .iter()
            .map(|&h| variance_from_log(h).sqrt() * rng.std_normal())
            .collect()
    });
    Ok(PredictiveDraw {
        h_idio_future,
        h_factor_future,
        f_future,
        loadings: &snapshot.loadings,
    })
}

/// One predictive draw per snapshot, each from its own stream.
pub fn predictive_draws<'a>(
    snapshots: &'a [Snapshot],
    horizon: usize,
    seed: u64,
    with_factors: bool,
) -> Result<Vec<PredictiveDraw<'a>>> {
    snapshots
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut rng = RngHandle::new(seed, stream_id(STREAM_PREDICT, k));
            propagate_latents(&mut rng, s, horizon, with_factors)
        })
        .collect()
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// log of the average of N(Λf, Σ̄) densities, each a sum of univariate terms.
pub fn predictive_likelihood_conditional(draws: &[PredictiveDraw], y_obs: &[f64]) -> Result<f64> {
    ensure!(
        !draws.is_empty(),
        Contract,
        "at least one predictive draw is required"
    );
    let logs = draws
        .iter()
        .map(|d| {
            let f = d.f_future.as_ref().ok_or_else(|| {
                FsvError::Contract("conditional estimator needs factor draws".into())
            })?;
            ensure!(
                y_obs.len() == d.h_idio_future.len() && f.len() == d.loadings.ncols(),
                Contract,
                "observation/draw dimension mismatch"
            );
            let mut acc = 0.0;
            for (i, &y) in y_obs.iter().enumerate() {
                let mean: f64 = (0..f.len()).map(|j| d.loadings[(i, j)] * f[j]).sum();
                let h = crate::model::clamped_log(d.h_idio_future[i]);
                let e = y - mean;
                acc += -0.5 * (LN_2PI + h + e * e * (-h).exp());
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_mean_exp(&logs))
}

/// Result of the marginal estimator with the number of rejected draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalPl {
    pub log_pl: f64,
    pub failed_draws: usize,
}

/// Share of draws allowed to fail numerically before the evaluation errors.
pub const MAX_FAILED_FRACTION: f64 = 0.001;

/// log of the average of N(0, ΛVΛ' + Σ̄) densities (factors integrated out).
pub fn predictive_likelihood_marginal(draws: &[PredictiveDraw], y_obs: &[f64]) -> Result<f64> {
    predictive_likelihood_marginal_detailed(draws, y_obs).map(|r| r.log_pl)
}

pub fn predictive_likelihood_marginal_detailed(
    draws: &[PredictiveDraw],
    y_obs: &[f64],
) -> Result<MarginalPl> {
    ensure!(
        !draws.is_empty(),
        Contract,
        "at least one predictive draw is required"
    );
    let mut logs = Vec::with_capacity(draws.len());
    let mut failed = 0;
    for d in draws {
        match log_density_lowrank(d.loadings, &d.h_factor_future, &d.h_idio_future, y_obs) {
            Ok(v) if v.is_finite() => logs.push(v),
            Ok(_) | Err(FsvError::Numerical(_)) | Err(FsvError::Context { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if failed > 0 {
        warn!(
            "{failed} of {} predictive draws failed numerically",
            draws.len()
        );
    }
    ensure!(
        (failed as f64) <= MAX_FAILED_FRACTION * draws.len() as f64 && !logs.is_empty(),
        Numerical,
        "{failed} of {} draws failed in the predictive density evaluation",
        draws.len()
    );
    Ok(MarginalPl {
        log_pl: log_mean_exp(&logs),
        failed_draws: failed,
    })
}

/// y = Λ f* + ε with f* ~ N(0, V) and ε ~ N(0, Σ̄).
pub fn draw_predictive_y(rng: &mut RngHandle, draw: &PredictiveDraw) -> DVector<f64> {
    let f: Vec<f64> = draw
        .h_factor_future
        .iter()
        .map(|&h| variance_from_log(h).sqrt() * rng.std_normal())
        .collect();
    DVector::from_fn(draw.h_idio_future.len(), |i, _| {
        let common: f64 = f
            .iter()
            .enumerate()
            .map(|(j, fj)| draw.loadings[(i, j)] * fj)
            .sum();
        common + variance_from_log(draw.h_idio_future[i]).sqrt() * rng.std_normal()
    })
}

/// Running sum of log PL_t(A) − log PL_t(B) over t = t1+1..=t2.
pub fn cumulative_log_bayes_factor(
    pl_a: &PlSeries,
    pl_b: &PlSeries,
    t1: usize,
    t2: usize,
) -> Result<Vec<(usize, f64)>> {
    ensure!(t1 < t2, Contract, "empty comparison window ({t1}, {t2}]");
    let window = |s: &PlSeries| -> Vec<(usize, f64)> {
        s.values
            .iter()
            .copied()
            .filter(|(d, _)| *d > t1 && *d <= t2)
            .collect()
    };
    let (a, b) = (window(pl_a), window(pl_b));
    ensure!(
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0),
        Contract,
        "PL series do not cover ({t1}, {t2}] on identical dates"
    );
    let mut acc = 0.0;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| {
            acc += x.1 - y.1;
            (x.0, acc)
        })
        .collect())
}

/// Gaussian plug-in log score log N(y; 0, Σ̂).
pub fn pseudo_lps(sigma_hat: &DMatrix<f64>, y_obs: &[f64]) -> Result<f64> {
    log_density_dense(sigma_hat, y_obs)
}

/// Posterior mean of Σ at the forecast date, averaging over draws.
pub fn mean_predictive_covariance(draws: &[PredictiveDraw]) -> Result<DMatrix<f64>> {
    ensure!(
        !draws.is_empty(),
        Contract,
        "at least one predictive draw is required"
    );
    let m = draws[0].h_idio_future.len();
    let mut acc = DMatrix::zeros(m, m);
    for d in draws {
        acc += covariance_at(d.loadings, &d.h_factor_future, &d.h_idio_future)?;
    }
    Ok(acc / draws.len() as f64)
}

#[derive(Clone, Debug)]
pub struct RollingConfig {
    pub chain: ChainConfig,
    /// First forecast origin: data up to and including date `t_start` is used.
    pub t_start: usize,
    /// Origins run over `t_start..t_end`.
    pub t_end: usize,
    pub horizons: Vec<usize>,
    /// When set, origins are grouped into blocks of this many dates; inside a
    /// block each chain starts from the previous origin's final state and
    /// only `warm_burn_in` sweeps are discarded; the number of kept sweeps is
    /// unchanged.
    pub warm_block: Option<usize>,
    pub warm_burn_in: usize,
    pub workers: usize,
    pub min_train: usize,
}

impl RollingConfig {
    pub fn new(chain: ChainConfig, t_start: usize, t_end: usize, horizons: Vec<usize>) -> Self {
        RollingConfig {
            chain,
            t_start,
            t_end,
            horizons,
            warm_block: None,
            warm_burn_in: 0,
            workers: 1,
            min_train: 10,
        }
    }
}

/// Per-origin output.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRecord {
    pub origin: usize,
    /// (horizon, log PL at date origin + horizon)
    pub log_pl: Vec<(usize, f64)>,
    /// Posterior mean of Σ_{origin+1}.
    pub predictive_covariance: DMatrix<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RollingResult {
    pub pl: BTreeMap<usize, PlSeries>,
    pub records: Vec<ForecastRecord>,
    /// Origins whose estimation failed, with the error message.
    pub missing: Vec<(usize, String)>,
}

/// Seed of the chain estimated at `origin`.
pub fn origin_seed(master: u64, origin: usize) -> u64 {
    RngHandle::new(master, stream_id(STREAM_ROLLING, origin)).derive_seed()
}

fn extend_state(state: &LatentState, t_len: usize) -> LatentState {
    let mut out = state.clone();
    let old = state.n_dates();
    let (m, r) = (state.n_series(), state.n_factors());
    out.logvar.idio = state
        .logvar
        .idio
        .clone()
        .resize_horizontally(t_len + 1, 0.0);
    out.logvar.factor = state
        .logvar
        .factor
        .clone()
        .resize_horizontally(t_len + 1, 0.0);
    for c in old + 1..=t_len {
        for i in 0..m {
            out.logvar.idio[(i, c)] = state.logvar.idio[(i, old)];
        }
        for j in 0..r {
            out.logvar.factor[(j, c)] = state.logvar.factor[(j, old)];
        }
    }
    out.factors = state.factors.clone().resize_horizontally(t_len, 0.0);
    out
}

fn forecast_origin(
    data: &ReturnsPanel,
    cfg: &RollingConfig,
    origin: usize,
    warm: Option<&LatentState>,
) -> Result<(ForecastRecord, LatentState)> {
    let train = data.truncated(origin)?;
    let mut chain = cfg.chain.clone();
    chain.seed = origin_seed(cfg.chain.seed, origin);
    chain.store = StoreMode::Terminal;
    if let Some(f) = &cfg.chain.fixed_factors {
        chain.fixed_factors = Some(f.columns(0, origin).into_owned());
    }
    let init = match warm {
        Some(prev) => {
            chain.n_draws = cfg.warm_burn_in + (chain.n_draws - chain.burn_in);
            chain.burn_in = cfg.warm_burn_in;
            let mut s = extend_state(prev, origin);
            if let Some(f) = &chain.fixed_factors {
                s.factors = f.clone();
            }
            s
        }
        None => initial_state(&train, &chain)?,
    };
    let (store, last) = run_chain_from(&train, &chain, init, &InterweavingHook::default())?;
    let mut log_pl = Vec::new();
    for &h in &cfg.horizons {
        let date = origin + h;
        if date > data.n_dates() {
            continue;
        }
        let y: Vec<f64> = data.values.column(date - 1).iter().copied().collect();
        let draws = predictive_draws(&store.snapshots, h, chain.seed ^ h as u64, false)?;
        log_pl.push((h, predictive_likelihood_marginal(&draws, &y)?));
    }
    let one_step = predictive_draws(&store.snapshots, 1, chain.seed, false)?;
    Ok((
        ForecastRecord {
            origin,
            log_pl,
            predictive_covariance: mean_predictive_covariance(&one_step)?,
        },
        last,
    ))
}

/// Re-estimates the model on data[1..t] for every origin t in [t_start, t_end)
/// and evaluates the predictive likelihood of the realised y_{t+h}.
pub fn rolling_forecast(data: &ReturnsPanel, cfg: &RollingConfig) -> Result<RollingResult> {
    ensure!(
        cfg.t_start < cfg.t_end,
        Contract,
        "empty origin range [{}, {})",
        cfg.t_start,
        cfg.t_end
    );
    ensure!(
        cfg.t_start >= cfg.min_train.max(2),
        Contract,
        "first origin {} is below the minimum training length {}",
        cfg.t_start,
        cfg.min_train
    );
    ensure!(
        cfg.t_end <= data.n_dates(),
        Contract,
        "last origin {} exceeds the panel length {}",
        cfg.t_end - 1,
        data.n_dates()
    );
    ensure!(
        !cfg.horizons.is_empty() && cfg.horizons.iter().all(|&h| h >= 1),
        Contract,
        "horizons must be >= 1"
    );
    cfg.chain.validate(
        cfg.chain
            .fixed_factors
            .as_ref()
            .map_or(data.n_dates(), |f| f.ncols()),
    )?;

    let origins: Vec<usize> = (cfg.t_start..cfg.t_end).collect();
    let blocks: Vec<Vec<usize>> = match cfg.warm_block {
        Some(b) if b > 1 => origins.chunks(b).map(|c| c.to_vec()).collect(),
        _ => origins.iter().map(|&o| vec![o]).collect(),
    };
    info!(
        "rolling forecast over {} origins in {} jobs",
        origins.len(),
        blocks.len()
    );

    let run_block =
        |block: &Vec<usize>| -> Vec<(usize, std::result::Result<ForecastRecord, String>)> {
            let mut out = Vec::with_capacity(block.len());
            let mut warm: Option<LatentState> = None;
            for &origin in block {
                match forecast_origin(data, cfg, origin, warm.as_ref()) {
                    Ok((rec, last)) => {
                        warm = Some(last);
                        out.push((origin, Ok(rec)));
                    }
                    Err(e) => {
                        warn!("forecast origin {origin} failed: {e}");
                        warm = None;
                        out.push((origin, Err(e.to_string())));
                    }
                }
            }
            out
        };

    let results: Vec<_> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| FsvError::Config(e.to_string()))?;
        pool.install(|| blocks.par_iter().map(run_block).collect::<Vec<_>>())
    } else {
        blocks.iter().map(run_block).collect()
    };

    let mut result = RollingResult::default();
    let mut per_h: BTreeMap<usize, Vec<(usize, f64)>> =
        cfg.horizons.iter().map(|&h| (h, Vec::new())).collect();
    for (origin, rec) in results.into_iter().flatten() {
        match rec {
            Ok(rec) => {
                for &(h, v) in &rec.log_pl {
                    per_h
                        .get_mut(&h)
                        .expect("known horizon")
                        .push((origin + h, v));
                }
                result.records.push(rec);
            }
            Err(msg) => result.missing.push((origin, msg)),
        }
    }
    for (h, values) in per_h {
        result.pl.insert(h, PlSeries::new(values)?);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SvParams;

    fn snapshot(loadings: DMatrix<f64>, hi: Vec<f64>, hf: Vec<f64>) -> Snapshot {
        let (m, r) = loadings.shape();
        Snapshot {
            idio_logvar: DMatrix::from_column_slice(m, 1, &hi),
            factor_logvar: DMatrix::from_column_slice(r, 1, &hf),
            factors: DMatrix::zeros(r, 1),
            idio_params: vec![
                SvParams {
                    mu: -0.5,
                    phi: 0.0,
                    sigma: 1e-12
                };
                m
            ],
            factor_params: vec![
                SvParams {
                    mu: 0.0,
                    phi: 0.0,
                    sigma: 1e-12
                };
                r
            ],
            tau2: DMatrix::from_element(m, r, 1.0),
            lambda2: vec![],
            loadings,
        }
    }

    #[test]
    fn degenerate_ar1_propagates_to_level() {
        let s = snapshot(DMatrix::zeros(2, 1), vec![3.0, -2.0], vec![1.5]);
        let mut rng = RngHandle::new(1, 1);
        let d = propagate_latents(&mut rng, &s, 1, false).unwrap();
        for h in d.h_idio_future {
            assert!((h + 0.5).abs() < 1e-10);
        }
        assert!(d.h_factor_future[0].abs() < 1e-10);
        assert!(propagate_latents(&mut rng, &s, 0, false).is_err());
        let mut bad = s.clone();
        bad.idio_params[0].phi = 1.0;
        assert!(matches!(
            propagate_latents(&mut rng, &bad, 1, false),
            Err(FsvError::Contract(_))
        ));
    }

    #[test]
    fn standard_normal_conditional_pl() {
        let lam = DMatrix::zeros(1, 0);
        let d = PredictiveDraw {
            h_idio_future: vec![0.0],
            h_factor_future: vec![],
            f_future: Some(vec![]),
            loadings: &lam,
        };
        let y = 0.7;
        let v = predictive_likelihood_conditional(std::slice::from_ref(&d), &[y]).unwrap();
        assert!((v - (-0.5 * LN_2PI - 0.5 * y * y)).abs() < 1e-14);
        let many = vec![d.clone(); 7];
        assert!((predictive_likelihood_conditional(&many, &[y]).unwrap() - v).abs() < 1e-14);
        assert!(predictive_likelihood_conditional(&[], &[y]).is_err());
        assert!(predictive_likelihood_marginal(&[], &[y]).is_err());
    }

    #[test]
    fn marginal_closed_form() {
        let lam = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let d = PredictiveDraw {
            h_idio_future: vec![0.0, 0.0],
            h_factor_future: vec![0.0],
            f_future: None,
            loadings: &lam,
        };
        let v = predictive_likelihood_marginal(&[d], &[0.0, 0.0]).unwrap();
        assert!((v - (-LN_2PI - 0.5 * 3f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_tiny_densities() {
        let v = log_mean_exp(&[-1e6, -1e6 - 1.0]);
        assert!(v.is_finite());
        assert!((v - (-1e6 + ((1.0 + (-1f64).exp()) / 2.0).ln())).abs() < 1e-6);
    }

    #[test]
    fn bayes_factor_properties() {
        let a = PlSeries::new((1..=5).map(|d| (d, -1.0 - d as f64)).collect()).unwrap();
        let b = PlSeries::new((1..=5).map(|d| (d, -1.5 - d as f64)).collect()).unwrap();
        let same = cumulative_log_bayes_factor(&a, &a, 0, 5).unwrap();
        assert!(same.iter().all(|v| v.1 == 0.0));
        let ab = cumulative_log_bayes_factor(&a, &b, 1, 5).unwrap();
        assert_eq!(ab.len(), 4);
        assert!((ab.last().unwrap().1 - 4.0 * 0.5).abs() < 1e-12);
        let ba = cumulative_log_bayes_factor(&b, &a, 1, 5).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert_eq!(x.1, -y.1);
        }
        let short = PlSeries::new(vec![(2, 0.0), (3, 0.0)]).unwrap();
        assert!(cumulative_log_bayes_factor(&a, &short, 0, 5).is_err());
        assert!(PlSeries::new(vec![(2, 0.0), (2, 1.0)]).is_err());
    }

    #[test]
    fn pseudo_lps_examples() {
        let v = pseudo_lps(&DMatrix::identity(2, 2), &[0.0, 0.0]).unwrap();
        assert!((v + LN_2PI).abs() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            pseudo_lps(&bad, &[0.0, 0.0]),
            Err(FsvError::Domain(_))
        ));
    }
}
