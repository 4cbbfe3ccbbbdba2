//! Ground-truth simulation from the factor SV model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::gibbs::{
    simulate_ar1_path, simulate_observations, stream_id, ChainConfig, LatentState, LoadingsPrior,
    ShrinkageState,
};
use crate::model::{
    active_columns, correlation_from_covariance, variance_from_log, LogVariancePaths, ReturnsPanel,
    SvParams,
};
use crate::samplers::RngHandle;
use crate::store::DrawStore;

const STREAM_SIM: u64 = 9;

/// Closed intervals the AR(1) parameters are drawn from uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvRanges {
    pub mu: (f64, f64),
    pub phi: (f64, f64),
    pub sigma: (f64, f64),
}

impl SvRanges {
    pub fn idiosyncratic_default() -> Self {
        SvRanges {
            mu: (-1.0, 0.0),
            phi: (0.85, 0.98),
            sigma: (0.1, 0.3),
        }
    }

    pub fn factor_default() -> Self {
        SvRanges {
            mu: (0.0, 0.0),
            phi: (0.9, 0.99),
            sigma: (0.1, 0.3),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        ensure!(
            ok(self.mu) && ok(self.phi) && ok(self.sigma),
            Config,
            "{name}: ranges must be finite with lo <= hi"
        );
        ensure!(
            self.phi.0 > -1.0 && self.phi.1 < 1.0,
            Config,
            "{name}: phi range must lie inside (-1, 1)"
        );
        ensure!(
            self.sigma.0 > 0.0,
            Config,
            "{name}: sigma range must be positive"
        );
        Ok(())
    }

    fn draw(&self, rng: &mut RngHandle) -> SvParams {
        let u = |rng: &mut RngHandle, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.uniform();
        SvParams {
            mu: u(rng, self.mu),
            phi: u(rng, self.phi),
            sigma: u(rng, self.sigma),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LoadingsSpec {
    Explicit {
        matrix: Vec<Vec<f64>>,
    },
    /// Nonzero values have magnitude uniform in `magnitude` and a random sign.
    Random {
        zero_fraction: f64,
        magnitude: (f64, f64),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub m: usize,
    pub t_len: usize,
    pub r_true: usize,
    pub restricted: bool,
    pub loadings: LoadingsSpec,
    pub idio_ranges: SvRanges,
    pub factor_ranges: SvRanges,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.m >= 1 && self.t_len >= 1,
            Config,
            "m and T must be positive"
        );
        self.idio_ranges.validate("idiosyncratic")?;
        self.factor_ranges.validate("factor")?;
        match &self.loadings {
            LoadingsSpec::Explicit { matrix } => {
                ensure!(
                    matrix.len() == self.m && matrix.iter().all(|row| row.len() == self.r_true),
                    Config,
                    "explicit loadings must be {}x{}",
                    self.m,
                    self.r_true
                );
                ensure!(
                    matrix.iter().flatten().all(|v| v.is_finite()),
                    Config,
                    "loadings must be finite"
                );
                if self.restricted {
                    for (i, row) in matrix.iter().enumerate() {
                        ensure!(
                            row.iter().skip(i + 1).all(|&v| v == 0.0),
                            Config,
                            "row {} violates the j > i restriction",
                            i + 1
                        );
                    }
                }
            }
            LoadingsSpec::Random {
                zero_fraction,
                magnitude,
            } => {
                ensure!(
                    (0.0..=1.0).contains(zero_fraction),
                    Config,
                    "zero_fraction must lie in [0, 1]"
                );
                ensure!(
                    magnitude.0 >= 0.0 && magnitude.0 <= magnitude.1 && magnitude.1.is_finite(),
                    Config,
                    "invalid loading magnitude range"
                );
            }
        }
        Ok(())
    }

    /// Number of loadings that are not fixed to zero by the restriction.
    pub fn active_cells(&self) -> usize {
        (0..self.m)
            .map(|i| active_columns(i, self.r_true, self.restricted))
            .sum()
    }
}

/// Simulated panel together with every latent quantity that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub spec: SimSpec,
    pub data: ReturnsPanel,
    pub state: LatentState,
}

impl GroundTruth {
    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.state.loadings
    }

    /// Σ_t for t = 1..T.
    pub fn covariance(&self, t: usize) -> Result<DMatrix<f64>> {
        self.state.covariance_at(t)
    }

    pub fn correlations(&self) -> Result<Vec<DMatrix<f64>>> {
        (1..=self.data.n_dates())
            .map(|t| correlation_from_covariance(&self.covariance(t)?))
            .collect()
    }

    /// Store with a single snapshot holding the truth.
    pub fn to_store(&self) -> Result<DrawStore> {
        let cfg = ChainConfig {
            r: self.spec.r_true,
            restricted_loadings: self.spec.restricted,
            seed: self.spec.seed,
            loadings_prior: LoadingsPrior::FixedGaussian { tau2: 1.0 },
            ..ChainConfig::default()
        };
        DrawStore::from_state(&self.data, &cfg, &self.state)
    }
}

fn draw_loadings(spec: &SimSpec, rng: &mut RngHandle) -> DMatrix<f64> {
    let (m, r) = (spec.m, spec.r_true);
    match &spec.loadings {
        LoadingsSpec::Explicit { matrix } => DMatrix::from_fn(m, r, |i, j| matrix[i][j]),
        LoadingsSpec::Random {
            zero_fraction,
            magnitude,
        } => {
            let mut cells: Vec<(usize, usize)> = (0..m)
                .flat_map(|i| (0..active_columns(i, r, spec.restricted)).map(move |j| (i, j)))
                .collect();
            let n_zero = (zero_fraction * cells.len() as f64).round() as usize;
            // partial Fisher-Yates: the first n_zero cells become zeros
            for k in 0..n_zero {
                let n = cells.len();
                let pick = k + (rng.uniform() * (n - k) as f64) as usize;
                cells.swap(k, pick.min(n - 1));
            }
            let mut lam = DMatrix::zeros(m, r);
            for &(i, j) in &cells[n_zero..] {
                let size = magnitude.0 + (magnitude.1 - magnitude.0) * rng.uniform();
                lam[(i, j)] = if rng.uniform() < 0.5 { -size } else { size };
            }
            lam
        }
    }
}

/// Draws h paths with stationary initial values, f_t ~ N(0, V_t) and
/// y_t = Λ f_t + ε_t with ε_t ~ N(0, Σ̄_t).
pub fn simulate_fsv(spec: &SimSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let (m, r, t_len) = (spec.m, spec.r_true, spec.t_len);
    let rng = |k: usize| RngHandle::new(spec.seed, stream_id(STREAM_SIM, k));
    let loadings = draw_loadings(spec, &mut rng(0));
    let mut prng = rng(1);
    let idio_params: Vec<SvParams> = (0..m).map(|_| spec.idio_ranges.draw(&mut prng)).collect();
    let factor_params: Vec<SvParams> = (0..r)
        .map(|_| SvParams {
            mu: 0.0,
            ..spec.factor_ranges.draw(&mut prng)
        })
        .collect();
    let mut logvar = LogVariancePaths::zeros(m, r, t_len);
    let mut hrng = rng(2);
    for (i, p) in idio_params.iter().enumerate() {
        let path = simulate_ar1_path(&mut hrng, *p, true, t_len)?;
        logvar.idio.row_mut(i).copy_from_slice(&path);
    }
    for (j, p) in factor_params.iter().enumerate() {
        let path = simulate_ar1_path(&mut hrng, *p, false, t_len)?;
        logvar.factor.row_mut(j).copy_from_slice(&path);
    }
    let mut frng = rng(3);
    let factors = DMatrix::from_fn(r, t_len, |j, t| {
        variance_from_log(logvar.factor[(j, t + 1)]).sqrt() * frng.std_normal()
    });
    let state = LatentState {
        loadings,
        factors,
        logvar,
        idio_params,
        factor_params,
        shrinkage: ShrinkageState {
            tau2: DMatrix::from_element(m, r, 1.0),
            lambda2: vec![],
        },
    };
    let values = simulate_observations(&mut rng(4), &state);
    let data = ReturnsPanel::from_matrix(values)?;
    Ok(GroundTruth {
        spec: spec.clone(),
        data,
        state,
    })
}

/// The ten-series, two-factor fixture with a structurally uncorrelated series 9.
pub fn fixture_two_factor(seed: u64) -> SimSpec {
    // zero pattern beyond the j > i restriction: all of series 9, and two more cells
    let zero = |i: usize, j: usize| i == 8 || (i, j) == (3, 1) || (i, j) == (6, 0);
    let mut rng = RngHandle::new(seed, stream_id(STREAM_SIM, 100));
    let matrix = (0..10)
        .map(|i| {
            (0..2)
                .map(|j| {
                    let size = 0.3 + 0.9 * rng.uniform();
                    let sign = if rng.uniform() < 0.5 && i != j {
                        -1.0
                    } else {
                        1.0
                    };
                    if j > i || zero(i, j) {
                        0.0
                    } else {
                        sign * size
                    }
                })
                .collect()
        })
        .collect();
    SimSpec {
        m: 10,
        t_len: 1000,
        r_true: 2,
        restricted: true,
        loadings: LoadingsSpec::Explicit { matrix },
        idio_ranges: SvRanges::idiosyncratic_default(),
        factor_ranges: SvRanges::factor_default(),
        seed,
    }
}

pub const FIXTURE_SEED: u64 = 20170901;
