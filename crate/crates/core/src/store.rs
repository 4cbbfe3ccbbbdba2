//! Chain runner and the on-disk draw store.
//!
//! A store directory holds `meta.toml` (config echo, shapes, fingerprints) and
//! one flat little-endian f64 array per quantity, row-major with the draw
//! index outermost.

use std::fs;
use std::path::Path;

use log::{debug, info};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, FsvError, Result};
use crate::gibbs::{
    gibbs_sweep_with_hook, initial_state, ChainConfig, InterweavingHook, LatentState, StoreMode,
    SweepStreams,
};
use crate::model::{
    communalities, correlation_from_covariance, covariance_at, ReturnsPanel, SvParams,
};

/// One kept posterior draw. In terminal mode the paths hold only date T.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub idio_logvar: DMatrix<f64>,
    pub factor_logvar: DMatrix<f64>,
    pub idio_params: Vec<SvParams>,
    pub factor_params: Vec<SvParams>,
    pub tau2: DMatrix<f64>,
    pub lambda2: Vec<f64>,
}

impl Snapshot {
    fn from_state(state: &LatentState, mode: StoreMode) -> Self {
        let (idio_logvar, factor_logvar, factors) = match mode {
            StoreMode::Full => (
                state.logvar.idio.clone(),
                state.logvar.factor.clone(),
                state.factors.clone(),
            ),
            StoreMode::Terminal => {
                let last = state.n_dates();
                let f = if state.factors.ncols() > 0 {
                    state.factors.columns(last - 1, 1).into_owned()
                } else {
                    DMatrix::zeros(state.n_factors(), 1)
                };
                (
                    state.logvar.idio.columns(last, 1).into_owned(),
                    state.logvar.factor.columns(last, 1).into_owned(),
                    f,
                )
            }
        };
        Snapshot {
            loadings: state.loadings.clone(),
            factors,
            idio_logvar,
            factor_logvar,
            idio_params: state.idio_params.clone(),
            factor_params: state.factor_params.clone(),
            tau2: state.shrinkage.tau2.clone(),
            lambda2: state.shrinkage.lambda2.clone(),
        }
    }

    /// Last stored idiosyncratic log-variances (h_T).
    pub fn terminal_idio(&self) -> Vec<f64> {
        self.idio_logvar
            .column(self.idio_logvar.ncols() - 1)
            .iter()
            .copied()
            .collect()
    }

    pub fn terminal_factor(&self) -> Vec<f64> {
        self.factor_logvar
            .column(self.factor_logvar.ncols() - 1)
            .iter()
            .copied()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub n_series: usize,
    pub n_factors: usize,
    pub n_dates: usize,
    pub n_snapshots: usize,
    /// State index of the first stored log-variance column (0 or T).
    pub first_state: usize,
    pub n_global: usize,
    pub config: ChainConfig,
    pub fixed_factors: bool,
    pub data_fingerprint: String,
    pub series_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrawStore {
    pub meta: StoreMeta,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    format: String,
    fingerprint: String,
    meta: StoreMeta,
    shapes: Vec<ArrayShape>,
}

#[derive(Serialize, Deserialize)]
struct ArrayShape {
    name: String,
    shape: Vec<usize>,
}

const FORMAT: &str = "facsv-drawstore-1";

pub fn data_fingerprint(data: &ReturnsPanel) -> String {
    let mut h = Sha256::new();
    h.update((data.n_series() as u64).to_le_bytes());
    h.update((data.n_dates() as u64).to_le_bytes());
    // row-major, matching the on-disk convention
    for row in data.values.row_iter() {
        for v in row.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn push_matrix(buf: &mut Vec<f64>, m: &DMatrix<f64>) {
    for row in m.row_iter() {
        buf.extend(row.iter());
    }
}

fn read_matrix(buf: &[f64], offset: &mut usize, rows: usize, cols: usize) -> DMatrix<f64> {
    let out = DMatrix::from_row_slice(rows, cols, &buf[*offset..*offset + rows * cols]);
    *offset += rows * cols;
    out
}

impl DrawStore {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn stores_paths(&self) -> bool {
        self.meta.first_state == 0
    }

    /// Number of stored log-variance columns per draw.
    fn path_len(&self) -> usize {
        self.meta.n_dates + 1 - self.meta.first_state
    }

    fn factor_len(&self) -> usize {
        if self.stores_paths() {
            self.meta.n_dates
        } else {
            1
        }
    }

    /// Σ_t of draw `k` at state index `t` (dates are 1..=T).
    pub fn covariance(&self, k: usize, t: usize) -> Result<DMatrix<f64>> {
        ensure!(k < self.len(), Contract, "draw {k} out of range");
        let (s, hf, hi) = self.state_columns(k, t)?;
        covariance_at(&s.loadings, &hf, &hi)
    }

    fn state_columns(&self, k: usize, t: usize) -> Result<(&Snapshot, Vec<f64>, Vec<f64>)> {
        let s = &self.snapshots[k];
        ensure!(
            t >= self.meta.first_state && t <= self.meta.n_dates,
            Contract,
            "state {t} is not stored (stored range {}..={})",
            self.meta.first_state,
            self.meta.n_dates
        );
        let c = t - self.meta.first_state;
        Ok((
            s,
            s.factor_logvar.column(c).iter().copied().collect(),
            s.idio_logvar.column(c).iter().copied().collect(),
        ))
    }

    /// Posterior mean of the correlation matrix at each stored date.
    pub fn mean_correlations(&self) -> Result<Vec<DMatrix<f64>>> {
        ensure!(!self.is_empty(), Contract, "store holds no draws");
        let first = self.meta.first_state.max(1);
        (first..=self.meta.n_dates)
            .map(|t| {
                let mut acc = DMatrix::zeros(self.meta.n_series, self.meta.n_series);
                for k in 0..self.len() {
                    acc += correlation_from_covariance(&self.covariance(k, t)?)?;
                }
                Ok(acc / self.len() as f64)
            })
            .collect()
    }

    /// Per-date posterior mean of the per-series communalities and of their average.
    pub fn mean_communalities(&self) -> Result<Vec<(Vec<f64>, f64)>> {
        ensure!(!self.is_empty(), Contract, "store holds no draws");
        let first = self.meta.first_state.max(1);
        let n = self.len() as f64;
        (first..=self.meta.n_dates)
            .map(|t| {
                let mut per = vec![0.0; self.meta.n_series];
                let mut joint = 0.0;
                for k in 0..self.len() {
                    let (s, hf, hi) = self.state_columns(k, t)?;
                    let (c, j) = communalities(&s.loadings, &hf, &hi)?;
                    per.iter_mut().zip(c).for_each(|(a, v)| *a += v / n);
                    joint += j / n;
                }
                Ok((per, joint))
            })
            .collect()
    }

    /// Mean of |λ_ij| over draws.
    pub fn mean_abs_loadings(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.meta.n_series, self.meta.n_factors);
        for s in &self.snapshots {
            acc += s.loadings.abs();
        }
        acc / self.len().max(1) as f64
    }

    fn arrays(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let n = self.len();
        let (m, r, g) = (self.meta.n_series, self.meta.n_factors, self.meta.n_global);
        let (th, tf) = (self.path_len(), self.factor_len());
        let mut loadings = Vec::with_capacity(n * m * r);
        let mut factors = Vec::new();
        let mut hi = Vec::new();
        let mut hf = Vec::new();
        let mut mu = Vec::new();
        let mut phi = Vec::new();
        let mut sigma = Vec::new();
        let mut tau2 = Vec::new();
        let mut lambda2 = Vec::new();
        for s in &self.snapshots {
            push_matrix(&mut loadings, &s.loadings);
            push_matrix(&mut factors, &s.factors);
            push_matrix(&mut hi, &s.idio_logvar);
            push_matrix(&mut hf, &s.factor_logvar);
            for p in s.idio_params.iter().chain(&s.factor_params) {
                mu.push(p.mu);
                phi.push(p.phi);
                sigma.push(p.sigma);
            }
            push_matrix(&mut tau2, &s.tau2);
            lambda2.extend(&s.lambda2);
        }
        vec![
            ("loadings", vec![n, m, r], loadings),
            ("factors", vec![n, r, tf], factors),
            ("logvar_idio", vec![n, m, th], hi),
            ("logvar_factor", vec![n, r, th], hf),
            ("mu", vec![n, m + r], mu),
            ("phi", vec![n, m + r], phi),
            ("sigma", vec![n, m + r], sigma),
            ("tau2", vec![n, m, r], tau2),
            ("lambda2", vec![n, g], lambda2),
        ]
    }

    /// SHA-256 over every stored array, in file order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, values) in self.arrays() {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FsvError::io(dir, e))?;
        let mut shapes = Vec::new();
        for (name, shape, values) in self.arrays() {
            let mut bytes = Vec::with_capacity(values.len() * 8);
            for v in &values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = dir.join(format!("{name}.bin"));
            fs::write(&path, bytes).map_err(|e| FsvError::io(&path, e))?;
            shapes.push(ArrayShape {
                name: name.to_string(),
                shape,
            });
        }
        let file = MetaFile {
            format: FORMAT.to_string(),
            fingerprint: self.fingerprint(),
            meta: self.meta.clone(),
            shapes,
        };
        let text = toml::to_string(&file).map_err(|e| FsvError::Config(e.to_string()))?;
        let path = dir.join("meta.toml");
        fs::write(&path, text).map_err(|e| FsvError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<DrawStore> {
        let path = dir.join("meta.toml");
        let text = fs::read_to_string(&path).map_err(|e| FsvError::io(&path, e))?;
        let file: MetaFile = toml::from_str(&text)
            .map_err(|e| FsvError::Config(format!("{}: {e}", path.display())))?;
        ensure!(
            file.format == FORMAT,
            Config,
            "unsupported store format '{}'",
            file.format
        );
        let meta = file.meta;
        let mut arrays = std::collections::HashMap::new();
        for shape in &file.shapes {
            let p = dir.join(format!("{}.bin", shape.name));
            let bytes = fs::read(&p).map_err(|e| FsvError::io(&p, e))?;
            let expected: usize = shape.shape.iter().product();
            ensure!(
                bytes.len() == expected * 8,
                Config,
                "{} holds {} bytes but its declared shape {:?} needs {}",
                p.display(),
                bytes.len(),
                shape.shape,
                expected * 8
            );
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(shape.name.clone(), values);
        }
        let get = |name: &str| -> Result<&Vec<f64>> {
            arrays
                .get(name)
                .ok_or_else(|| FsvError::Config(format!("store is missing array '{name}'")))
        };
        let (m, r, g, n) = (
            meta.n_series,
            meta.n_factors,
            meta.n_global,
            meta.n_snapshots,
        );
        let th = meta.n_dates + 1 - meta.first_state;
        let tf = if meta.first_state == 0 {
            meta.n_dates
        } else {
            1
        };
        let (lo, fa, hi, hf, mu, phi, sg, ta, la) = (
            get("loadings")?,
            get("factors")?,
            get("logvar_idio")?,
            get("logvar_factor")?,
            get("mu")?,
            get("phi")?,
            get("sigma")?,
            get("tau2")?,
            get("lambda2")?,
        );
        ensure!(
            lo.len() == n * m * r && hi.len() == n * m * th && fa.len() == n * r * tf,
            Config,
            "store arrays disagree with metadata shapes"
        );
        let mut snapshots = Vec::with_capacity(n);
        let (mut o_lo, mut o_fa, mut o_hi, mut o_hf, mut o_ta) = (0, 0, 0, 0, 0);
        for k in 0..n {
            let params: Vec<SvParams> = (0..m + r)
                .map(|b| {
                    let idx = k * (m + r) + b;
                    SvParams {
                        mu: mu[idx],
                        phi: phi[idx],
                        sigma: sg[idx],
                    }
                })
                .collect();
            snapshots.push(Snapshot {
                loadings: read_matrix(lo, &mut o_lo, m, r),
                factors: read_matrix(fa, &mut o_fa, r, tf),
                idio_logvar: read_matrix(hi, &mut o_hi, m, th),
                factor_logvar: read_matrix(hf, &mut o_hf, r, th),
                idio_params: params[..m].to_vec(),
                factor_params: params[m..].to_vec(),
                tau2: read_matrix(ta, &mut o_ta, m, r),
                lambda2: la[k * g..(k + 1) * g].to_vec(),
            });
        }
        let store = DrawStore { meta, snapshots };
        ensure!(
            store.fingerprint() == file.fingerprint,
            Config,
            "fingerprint mismatch in {}: the binary arrays were modified",
            dir.display()
        );
        Ok(store)
    }
}

impl DrawStore {
    /// A one-snapshot store holding a full latent state, e.g. a simulated truth.
    pub fn from_state(
        data: &ReturnsPanel,
        cfg: &ChainConfig,
        state: &LatentState,
    ) -> Result<DrawStore> {
        ensure!(
            state.n_series() == data.n_series()
                && state.n_dates() == data.n_dates()
                && state.n_factors() == cfg.r,
            Contract,
            "state does not match the panel or the configured factor count"
        );
        let meta = StoreMeta {
            n_series: data.n_series(),
            n_factors: cfg.r,
            n_dates: data.n_dates(),
            n_snapshots: 1,
            first_state: 0,
            n_global: state.shrinkage.lambda2.len(),
            config: ChainConfig {
                store: StoreMode::Full,
                ..cfg.clone()
            },
            fixed_factors: false,
            data_fingerprint: data_fingerprint(data),
            series_labels: data.series_labels.clone(),
        };
        Ok(DrawStore {
            meta,
            snapshots: vec![Snapshot::from_state(state, StoreMode::Full)],
        })
    }
}

/// Runs the sampler from the default initial state.
pub fn run_chain(data: &ReturnsPanel, cfg: &ChainConfig) -> Result<DrawStore> {
    run_chain_with_hook(data, cfg, &InterweavingHook::default())
}

pub fn run_chain_with_hook(
    data: &ReturnsPanel,
    cfg: &ChainConfig,
    hook: &InterweavingHook,
) -> Result<DrawStore> {
    cfg.validate(data.n_dates())?;
    let init = initial_state(data, cfg)?;
    run_chain_from(data, cfg, init, hook).map(|(store, _)| store)
}

/// Runs `cfg.n_draws` sweeps from `init`; returns the store and the final state.
pub fn run_chain_from(
    data: &ReturnsPanel,
    cfg: &ChainConfig,
    init: LatentState,
    hook: &InterweavingHook,
) -> Result<(DrawStore, LatentState)> {
    cfg.validate(data.n_dates())?;
    let (m, t_len) = data.values.shape();
    let mut streams = SweepStreams::new(cfg.seed, m, cfg.r, t_len);
    let mut state = init;
    let mut snapshots = Vec::with_capacity(cfg.n_kept());
    info!(
        "running chain: m={m}, T={t_len}, r={}, draws={}, burn-in={}, thin={}, seed={}",
        cfg.r, cfg.n_draws, cfg.burn_in, cfg.thin, cfg.seed
    );
    for iter in 1..=cfg.n_draws {
        state = gibbs_sweep_with_hook(&mut streams, data, &state, cfg, hook)
            .map_err(|e| e.with_context(format!("iteration {iter}")))?;
        if iter > cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0 {
            snapshots.push(Snapshot::from_state(&state, cfg.store));
        }
        if iter % 1000 == 0 {
            debug!("iteration {iter}/{}", cfg.n_draws);
        }
    }
    let n_global = state.shrinkage.lambda2.len();
    let meta = StoreMeta {
        n_series: m,
        n_factors: cfg.r,
        n_dates: t_len,
        n_snapshots: snapshots.len(),
        first_state: match cfg.store {
            StoreMode::Full => 0,
            StoreMode::Terminal => t_len,
        },
        n_global,
        config: cfg.clone(),
        fixed_factors: cfg.fixed_factors.is_some(),
        data_fingerprint: data_fingerprint(data),
        series_labels: data.series_labels.clone(),
    };
    Ok((DrawStore { meta, snapshots }, state))
}
