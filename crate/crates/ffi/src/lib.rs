//! C interface to facsv.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `_free` function. Every fallible call returns a
//! [`FacsvStatus`]; on failure `facsv_last_error` describes what went wrong on
//! the calling thread. Matrices are passed row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use facsv::baselines::min_variance_weights;
use facsv::config::RunConfig;
use facsv::io::load_returns_csv;
use facsv::model::ReturnsPanel;
use facsv::predict::{predictive_draws, predictive_likelihood_marginal};
use facsv::store::{run_chain, DrawStore};
use facsv::FsvError;
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FacsvStatus {
    Ok = 0,
    NullPointer = 1,
    Contract = 2,
    Domain = 3,
    Numerical = 4,
    Parse = 5,
    Config = 6,
    Io = 7,
    Panic = 8,
}

/// A returns panel (series × dates).
pub struct FacsvPanel(ReturnsPanel);

/// Posterior draws from a fit.
pub struct FacsvStore(DrawStore);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &FsvError) -> FacsvStatus {
    match err.root() {
        FsvError::Contract(_) => FacsvStatus::Contract,
        FsvError::Domain(_) => FacsvStatus::Domain,
        FsvError::Numerical(_) => FacsvStatus::Numerical,
        FsvError::Parse { .. } => FacsvStatus::Parse,
        FsvError::Config(_) => FacsvStatus::Config,
        FsvError::Io { .. } => FacsvStatus::Io,
        FsvError::Context { .. } => unreachable!("root() strips context"),
    }
}

enum Failure {
    Null(&'static str),
    Fsv(FsvError),
}

impl From<FsvError> for Failure {
    fn from(e: FsvError) -> Self {
        Failure::Fsv(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FacsvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FacsvStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            FacsvStatus::NullPointer
        }
        Ok(Err(Failure::Fsv(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            FacsvStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn c_str(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Fsv(FsvError::Contract(format!("{what} is not valid UTF-8"))))
}

unsafe fn out_slice<'a>(
    p: *mut f64,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn facsv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a panel from `n_series * n_dates` values, row `i` holding series `i`.
///
/// # Safety
/// `values` must point to `n_series * n_dates` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn facsv_panel_new(
    values: *const f64,
    n_series: usize,
    n_dates: usize,
    out: *mut *mut FacsvPanel,
) -> FacsvStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let v = std::slice::from_raw_parts(non_null(values, "values")?, n_series * n_dates);
        let panel = ReturnsPanel::from_matrix(DMatrix::from_row_slice(n_series, n_dates, v))?;
        *out = Box::into_raw(Box::new(FacsvPanel(panel)));
        Ok(())
    })
}

/// Reads a CSV with dates in rows and a header of series labels.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn facsv_panel_load_csv(
    path: *const c_char,
    demean: bool,
    out: *mut *mut FacsvPanel,
) -> FacsvStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = PathBuf::from(c_str(path, "path")?);
        *out = Box::into_raw(Box::new(FacsvPanel(load_returns_csv(&path, demean)?)));
        Ok(())
    })
}

/// # Safety
/// `panel` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn facsv_panel_free(panel: *mut FacsvPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn facsv_panel_dims(
    panel: *const FacsvPanel,
    n_series: *mut usize,
    n_dates: *mut usize,
) -> FacsvStatus {
    guard(|| {
        let p = &non_null(panel, "panel")?.0;
        if n_series.is_null() || n_dates.is_null() {
            return Err(Failure::Null("dimension outputs"));
        }
        *n_series = p.n_series();
        *n_dates = p.n_dates();
        Ok(())
    })
}

/// Runs the sampler. `config_toml` holds a configuration document (NULL for
/// defaults); `factors` overrides its factor count when non-negative.
///
/// # Safety
/// `panel` must be valid, `config_toml` NULL or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn facsv_fit(
    panel: *const FacsvPanel,
    config_toml: *const c_char,
    factors: i64,
    out: *mut *mut FacsvStore,
) -> FacsvStatus {
    guard(|| {
        let p = &non_null(panel, "panel")?.0;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(&c_str(config_toml, "config_toml")?)?
        };
        let r = if factors >= 0 {
            factors as usize
        } else {
            cfg.chain.factors
        };
        let store = run_chain(p, &cfg.chain_config(r)?)?;
        *out = Box::into_raw(Box::new(FacsvStore(store)));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn facsv_store_load(
    path: *const c_char,
    out: *mut *mut FacsvStore,
) -> FacsvStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let dir = PathBuf::from(c_str(path, "path")?);
        *out = Box::into_raw(Box::new(FacsvStore(DrawStore::load(&dir)?)));
        Ok(())
    })
}

/// # Safety
/// `store` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn facsv_store_save(
    store: *const FacsvStore,
    path: *const c_char,
) -> FacsvStatus {
    guard(|| {
        let s = &non_null(store, "store")?.0;
        let dir = PathBuf::from(c_str(path, "path")?);
        s.save(&dir)?;
        Ok(())
    })
}

/// # Safety
/// `store` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn facsv_store_free(store: *mut FacsvStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of kept draws, series, factors and dates.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn facsv_store_dims(
    store: *const FacsvStore,
    n_draws: *mut usize,
    n_series: *mut usize,
    n_factors: *mut usize,
    n_dates: *mut usize,
) -> FacsvStatus {
    guard(|| {
        let s = &non_null(store, "store")?.0;
        for p in [n_draws, n_series, n_factors, n_dates] {
            if p.is_null() {
                return Err(Failure::Null("dimension outputs"));
            }
        }
        *n_draws = s.len();
        *n_series = s.meta.n_series;
        *n_factors = s.meta.n_factors;
        *n_dates = s.meta.n_dates;
        Ok(())
    })
}

/// Σ_t of draw `draw` into `out` (m × m, row-major); `out_len` must be m².
///
/// # Safety
/// `store` must be valid and `out` point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn facsv_store_covariance(
    store: *const FacsvStore,
    draw: usize,
    date: usize,
    out: *mut f64,
    out_len: usize,
) -> FacsvStatus {
    guard(|| {
        let s = &non_null(store, "store")?.0;
        let m = s.meta.n_series;
        if out_len != m * m {
            return Err(FsvError::Contract(format!(
                "output buffer holds {out_len} values, need {}",
                m * m
            ))
            .into());
        }
        let sigma = s.covariance(draw, date)?;
        let buf = out_slice(out, out_len, "out")?;
        for i in 0..m {
            for j in 0..m {
                buf[i * m + j] = sigma[(i, j)];
            }
        }
        Ok(())
    })
}

/// Log predictive density of `y` (length m) at `horizon` dates past the fit.
///
/// # Safety
/// `store` must be valid, `y` point to `n` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn facsv_store_log_predictive(
    store: *const FacsvStore,
    y: *const f64,
    n: usize,
    horizon: usize,
    seed: u64,
    out: *mut f64,
) -> FacsvStatus {
    guard(|| {
        let s = &non_null(store, "store")?.0;
        let y = std::slice::from_raw_parts(non_null(y, "y")?, n);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let draws = predictive_draws(&s.snapshots, horizon, seed, false)?;
        *out = predictive_likelihood_marginal(&draws, y)?;
        Ok(())
    })
}

/// Global minimum-variance weights for an m × m covariance (row-major).
///
/// # Safety
/// `sigma` must point to m² doubles and `weights` to m doubles.
#[no_mangle]
pub unsafe extern "C" fn facsv_min_variance_weights(
    sigma: *const f64,
    m: usize,
    weights: *mut f64,
) -> FacsvStatus {
    guard(|| {
        let v = std::slice::from_raw_parts(non_null(sigma, "sigma")?, m * m);
        let w = min_variance_weights(&DMatrix::from_row_slice(m, m, v))?;
        out_slice(weights, m, "weights")?.copy_from_slice(w.as_slice());
        Ok(())
    })
}
