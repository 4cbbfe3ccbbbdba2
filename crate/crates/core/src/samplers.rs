//! Random-variate generation for the Gibbs sweep.
//!
//! All Gamma draws use the shape/rate convention (mean = shape / rate).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::error::{ensure, FsvError, Result};
use crate::model::cholesky_jittered;

/// A single-owner random stream identified by `(seed, stream_id)`.
///
/// Two handles with the same pair produce identical sequences; different
/// stream ids are statistically independent ChaCha streams.
#[derive(Clone, Debug)]
pub struct RngHandle {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngHandle {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives a fresh 64-bit seed, e.g. for a sub-job with its own streams.
    pub fn derive_seed(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.inner.random::<f64>();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn std_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.std_normal()
    }
}

impl RngCore for RngHandle {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Parameters of GIG(p, k, l) with density ∝ x^{p-1} exp{-(k x + l / x) / 2}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GigParams {
    pub p: f64,
    pub k: f64,
    pub l: f64,
}

impl GigParams {
    pub fn new(p: f64, k: f64, l: f64) -> Result<Self> {
        let params = GigParams { p, k, l };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let GigParams { p, k, l } = *self;
        ensure!(
            p.is_finite() && k.is_finite() && l.is_finite() && k >= 0.0 && l >= 0.0,
            Domain,
            "GIG parameters must be finite with k, l >= 0 (got p={p}, k={k}, l={l})"
        );
        let valid = (k > 0.0 && l > 0.0)
            || (k > 0.0 && l == 0.0 && p > 0.0)
            || (k == 0.0 && l > 0.0 && p < 0.0);
        ensure!(
            valid,
            Domain,
            "GIG parameters outside the validity region (p={p}, k={k}, l={l})"
        );
        Ok(())
    }
}

const TINY_RATIO: f64 = 1e-300;

fn clamp_positive(x: f64) -> f64 {
    x.clamp(f64::MIN_POSITIVE, f64::MAX)
}

/// Draws from GIG(p, k, l).
///
/// Ratio-of-uniforms with and without mode shift plus a concave-monotone
/// rejection scheme for the small-concentration region. None of the
/// branches needs per-call setup beyond a handful of closed-form constants.
pub fn sample_gig(rng: &mut RngHandle, params: GigParams) -> Result<f64> {
    params.validate()?;
    let GigParams { p, k, l } = params;

    // Boundary reductions, including the case where one coefficient is
    // negligible relative to the other.
    if l == 0.0 || (l < TINY_RATIO * k && p > 0.0) {
        return Ok(clamp_positive(gamma_raw(rng, p, k / 2.0)));
    }
    if k == 0.0 || (k < TINY_RATIO * l && p < 0.0) {
        return Ok(clamp_positive(1.0 / gamma_raw(rng, -p, l / 2.0)));
    }

    let lambda = p.abs();
    let alpha = (l / k).sqrt();
    let omega = (k * l).sqrt();

    let y = if lambda > 2.0 || omega > 3.0 {
        gig_rou_shift(rng, lambda, omega)
    } else if lambda >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        gig_rou_noshift(rng, lambda, omega)
    } else {
        gig_concave(rng, lambda, omega)
    };
    let x = if p < 0.0 { alpha / y } else { alpha * y };
    Ok(clamp_positive(x))
}

/// Mode of y^{λ-1} exp{-ω (y + 1/y) / 2}.
fn gig_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        (((lambda - 1.0).powi(2) + omega * omega).sqrt() + (lambda - 1.0)) / omega
    } else {
        omega / (((1.0 - lambda).powi(2) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

fn gig_rou_noshift(rng: &mut RngHandle, lambda: f64, omega: f64) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0).powi(2) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * rng.uniform_open();
        let v = rng.uniform_open();
        let x = u / v;
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_rou_shift(rng: &mut RngHandle, lambda: f64, omega: f64) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);

    // Extremes of (x - xm) sqrt(f(x)) are roots of a depressed cubic.
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let pp = b - a * a / 3.0;
    let qq = (2.0 * a * a * a) / 27.0 - (a * b) / 3.0 + c;
    let fi = (-qq / (2.0 * (-(pp * pp * pp) / 27.0).sqrt()))
        .clamp(-1.0, 1.0)
        .acos();
    let fak = 2.0 * (-pp / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();

    loop {
        let u = uminus + rng.uniform() * (uplus - uminus);
        let v = rng.uniform_open();
        let x = u / v + xm;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_concave(rng: &mut RngHandle, lambda: f64, omega: f64) -> f64 {
    let xm = gig_mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;

    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;

    loop {
        let mut v = total * rng.uniform();
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    x = omega * (omega.exp() * v).exp();
                    hx = k1 / x;
                } else {
                    x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    hx = k1 * x.powf(lambda - 1.0);
                }
            } else {
                v -= a1;
                let lo = x0.max(2.0 / omega);
                x = -2.0 / omega * ((-omega / 2.0 * lo).exp() - omega / (2.0 * k2) * v).ln();
                hx = k2 * (-omega / 2.0 * x).exp();
            }
        }
        if !(x > 0.0) || !x.is_finite() {
            continue;
        }
        let u = rng.uniform() * hx;
        if u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}

fn gamma_raw(rng: &mut RngHandle, shape: f64, rate: f64) -> f64 {
    // Parameters are validated by the callers.
    Gamma::new(shape, 1.0 / rate)
        .expect("validated gamma parameters")
        .sample(rng)
}

/// Gamma(shape, rate) draw, floored at the smallest positive normal double.
pub fn sample_gamma(rng: &mut RngHandle, shape: f64, rate: f64) -> Result<f64> {
    ensure!(
        shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite(),
        Domain,
        "gamma requires positive finite shape and rate (got {shape}, {rate})"
    );
    Ok(clamp_positive(gamma_raw(rng, shape, rate)))
}

pub fn sample_beta(rng: &mut RngHandle, a0: f64, b0: f64) -> Result<f64> {
    ensure!(
        a0 > 0.0 && b0 > 0.0 && a0.is_finite() && b0.is_finite(),
        Domain,
        "beta requires positive finite shapes (got {a0}, {b0})"
    );
    let dist = Beta::new(a0, b0).map_err(|e| FsvError::Domain(e.to_string()))?;
    loop {
        let x: f64 = dist.sample(rng);
        if x > 0.0 && x < 1.0 {
            return Ok(x);
        }
    }
}

/// Draws from N(P⁻¹ b, P⁻¹) using one Cholesky factorization of the precision P.
pub fn sample_mvn_from_precision_factor(
    rng: &mut RngHandle,
    mean_rhs: &DVector<f64>,
    precision: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = mean_rhs.len();
    ensure!(
        precision.nrows() == n && precision.ncols() == n,
        Contract,
        "precision is {}x{} but right-hand side has length {n}",
        precision.nrows(),
        precision.ncols()
    );
    let chol = cholesky_jittered(precision.clone())?;
    let mean = chol.solve(mean_rhs);
    let z = DVector::from_fn(n, |_, _| rng.std_normal());
    // x = L'^{-1} z has covariance (L L')^{-1}.
    let lt = chol.l().transpose();
    let x = lt
        .solve_upper_triangular(&z)
        .ok_or_else(|| FsvError::Numerical("triangular solve failed".into()))?;
    Ok(mean + x)
}
