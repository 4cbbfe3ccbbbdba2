//! One MCMC update of a univariate stochastic volatility block.
//!
//! The observation equation y_t ~ N(0, exp h_t) is linearised as
//! log(y_t² + c) = h_t + log ε_t², and log χ²₁ is replaced by a ten-component
//! Gaussian mixture. Given the mixture indicators the whole path h_0..h_T is
//! drawn in one shot from its tridiagonal Gaussian full conditional.
//! Parameters are updated in the centered parameterisation and then
//! interweaved with a non-centered (μ, σ) draw.

use crate::error::{ensure, FsvError, Result};
use crate::model::SvParams;
use crate::samplers::{sample_gamma, RngHandle};

/// Offset added to y² before taking logs.
pub const LOG_OFFSET: f64 = 1e-8;

/// Mixture approximation of log χ²₁: (weight, mean, variance).
pub const MIXTURE: [(f64, f64, f64); 10] = [
    (0.00609, 1.92677, 0.11265),
    (0.04775, 1.34744, 0.17788),
    (0.13057, 0.73504, 0.26768),
    (0.20674, 0.02266, 0.40611),
    (0.22715, -0.85173, 0.62699),
    (0.18842, -1.97278, 0.98583),
    (0.12047, -3.46788, 1.57469),
    (0.05591, -5.55246, 2.54498),
    (0.01575, -8.68384, 4.16591),
    (0.00115, -14.65000, 7.33342),
];

/// Hyperparameters: μ ~ N(b_mu, big_b_mu), (φ+1)/2 ~ Beta(a0, b0),
/// σ² ~ big_b_sigma · χ²₁.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SvPriors {
    pub b_mu: f64,
    pub big_b_mu: f64,
    pub a0: f64,
    pub b0: f64,
    pub big_b_sigma: f64,
}

impl SvPriors {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.b_mu.is_finite(), Config, "b_mu must be finite");
        for (name, v) in [
            ("B_mu", self.big_b_mu),
            ("a0", self.a0),
            ("b0", self.b0),
            ("B_sigma", self.big_b_sigma),
        ] {
            ensure!(
                v > 0.0 && v.is_finite(),
                Config,
                "{name} must be positive (got {v})"
            );
        }
        Ok(())
    }

    pub fn idiosyncratic_default() -> Self {
        SvPriors {
            b_mu: 0.0,
            big_b_mu: 1000.0,
            a0: 10.0,
            b0: 2.5,
            big_b_sigma: 1.0,
        }
    }

    pub fn factor_default() -> Self {
        SvPriors {
            a0: 2.5,
            b0: 2.5,
            ..Self::idiosyncratic_default()
        }
    }

    fn log_phi_prior(&self, phi: f64) -> f64 {
        (self.a0 - 1.0) * ((1.0 + phi) / 2.0).ln() + (self.b0 - 1.0) * ((1.0 - phi) / 2.0).ln()
    }
}

/// A latent log-variance path (length T+1, index 0 is h_0) with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SvBlock {
    pub states: Vec<f64>,
    pub params: SvParams,
    /// `false` for factor processes, whose level is fixed at zero.
    pub has_level: bool,
}

impl SvBlock {
    pub fn new(states: Vec<f64>, params: SvParams, has_level: bool) -> Result<Self> {
        ensure!(
            states.len() >= 2,
            Contract,
            "an SV block needs at least h_0 and h_1"
        );
        ensure!(
            has_level || params.mu == 0.0,
            Contract,
            "factor blocks must have mu = 0 (got {})",
            params.mu
        );
        params.validate()?;
        Ok(SvBlock {
            states,
            params,
            has_level,
        })
    }
}

/// Draws from the stationary law N(μ·[has_level], σ²/(1−φ²)).
pub fn sv_stationary_init(rng: &mut RngHandle, params: SvParams, has_level: bool) -> Result<f64> {
    ensure!(
        params.phi.abs() < 1.0,
        Domain,
        "|phi| must be < 1 (got {})",
        params.phi
    );
    let level = if has_level { params.mu } else { 0.0 };
    Ok(rng.normal(level, params.stationary_variance().sqrt()))
}

/// One full update of states and parameters given the block's conditional data.
pub fn sv_update(
    rng: &mut RngHandle,
    observations: &[f64],
    block: &SvBlock,
    priors: &SvPriors,
) -> Result<SvBlock> {
    let t_len = observations.len();
    ensure!(
        t_len >= 1,
        Contract,
        "sv_update needs at least one observation"
    );
    ensure!(
        block.states.len() == t_len + 1,
        Contract,
        "block has {} states for {t_len} observations",
        block.states.len()
    );
    if let Some(pos) = observations.iter().position(|y| !y.is_finite()) {
        return Err(FsvError::Domain(format!(
            "non-finite observation at position {pos}"
        )));
    }

    let ystar: Vec<f64> = observations
        .iter()
        .map(|y| (y * y + LOG_OFFSET).ln())
        .collect();
    let indicators = draw_indicators(rng, &ystar, &block.states);
    let mut params = block.params;
    let mut states = draw_states(rng, &ystar, &indicators, &params, block.has_level);

    draw_params_centered(rng, &states, &mut params, priors, block.has_level)?;
    interweave(
        rng,
        &ystar,
        &indicators,
        &mut states,
        &mut params,
        priors,
        block.has_level,
    );

    if !block.has_level {
        params.mu = 0.0;
    }
    Ok(SvBlock {
        states,
        params,
        has_level: block.has_level,
    })
}

fn draw_indicators(rng: &mut RngHandle, ystar: &[f64], states: &[f64]) -> Vec<u8> {
    let mut logw = [0.0f64; 10];
    let base: [f64; 10] = std::array::from_fn(|k| MIXTURE[k].0.ln() - 0.5 * MIXTURE[k].2.ln());
    ystar
        .iter()
        .enumerate()
        .map(|(t, &ys)| {
            let e = ys - states[t + 1];
            let mut max = f64::NEG_INFINITY;
            for k in 0..10 {
                let (_, mean, var) = MIXTURE[k];
                logw[k] = base[k] - 0.5 * (e - mean) * (e - mean) / var;
                max = max.max(logw[k]);
            }
            let mut cum = [0.0f64; 10];
            let mut acc = 0.0;
            for k in 0..10 {
                acc += (logw[k] - max).exp();
                cum[k] = acc;
            }
            let u = rng.uniform() * acc;
            cum.iter().position(|&c| u < c).unwrap_or(9) as u8
        })
        .collect()
}

/// Joint draw of h_0..h_T from the tridiagonal Gaussian full conditional.
fn draw_states(
    rng: &mut RngHandle,
    ystar: &[f64],
    indicators: &[u8],
    params: &SvParams,
    has_level: bool,
) -> Vec<f64> {
    let n = ystar.len() + 1;
    let mu = if has_level { params.mu } else { 0.0 };
    let phi = params.phi;
    let prec = 1.0 / (params.sigma * params.sigma);

    let mut diag = vec![(1.0 + phi * phi) * prec; n];
    diag[0] = prec;
    diag[n - 1] = prec;
    let off = -phi * prec;
    let mut rhs = vec![(1.0 - phi) * (1.0 - phi) * prec * mu; n];
    rhs[0] = (1.0 - phi) * prec * mu;
    rhs[n - 1] = (1.0 - phi) * prec * mu;
    for t in 1..n {
        let (_, mean, var) = MIXTURE[indicators[t - 1] as usize];
        diag[t] += 1.0 / var;
        rhs[t] += (ystar[t - 1] - mean) / var;
    }

    // Banded Cholesky: L has diagonal `l` and subdiagonal `s`.
    let mut l = vec![0.0; n];
    let mut s = vec![0.0; n];
    l[0] = diag[0].sqrt();
    for t in 1..n {
        s[t] = off / l[t - 1];
        l[t] = (diag[t] - s[t] * s[t]).sqrt();
    }
    // Forward solve L u = rhs.
    let mut u = vec![0.0; n];
    u[0] = rhs[0] / l[0];
    for t in 1..n {
        u[t] = (rhs[t] - s[t] * u[t - 1]) / l[t];
    }
    // Backward solve L' h = u + z gives mean plus a N(0, Q⁻¹) perturbation.
    for v in u.iter_mut() {
        *v += rng.std_normal();
    }
    let mut h = vec![0.0; n];
    h[n - 1] = u[n - 1] / l[n - 1];
    for t in (0..n - 1).rev() {
        h[t] = (u[t] - s[t + 1] * h[t + 1]) / l[t];
    }
    h
}

fn draw_params_centered(
    rng: &mut RngHandle,
    h: &[f64],
    params: &mut SvParams,
    priors: &SvPriors,
    has_level: bool,
) -> Result<()> {
    let t_len = h.len() - 1;
    let mu = if has_level { params.mu } else { 0.0 };

    // σ² | μ, φ, h: independence Metropolis–Hastings with an inverse-gamma
    // proposal matching the AR(1) likelihood.
    {
        let phi = params.phi;
        let d0 = h[0] - mu;
        let mut ss = d0 * d0 * (1.0 - phi * phi);
        for t in 1..=t_len {
            let e = h[t] - mu - phi * (h[t - 1] - mu);
            ss += e * e;
        }
        let shape = (t_len + 1) as f64 / 2.0;
        let proposal = 1.0 / sample_gamma(rng, shape, ss / 2.0)?;
        let log_g = |s2: f64| 0.5 * s2.ln() - s2 / (2.0 * priors.big_b_sigma);
        let current = params.sigma * params.sigma;
        if rng.uniform_open().ln() < log_g(proposal) - log_g(current)
            && proposal.is_finite()
            && proposal > 0.0
        {
            params.sigma = proposal.sqrt();
        }
    }

    // φ | μ, σ, h: Gaussian proposal from the conditional likelihood of
    // h_1..h_T; the stationary initial state and the Beta prior enter the
    // acceptance ratio.
    {
        let (mut sxx, mut sxz) = (0.0, 0.0);
        for t in 1..=t_len {
            let x = h[t - 1] - mu;
            sxx += x * x;
            sxz += x * (h[t] - mu);
        }
        if sxx > 0.0 {
            let s2 = params.sigma * params.sigma;
            let proposal = rng.normal(sxz / sxx, (s2 / sxx).sqrt());
            if proposal.abs() < 1.0 {
                let d0 = h[0] - mu;
                let log_r = |phi: f64| {
                    0.5 * (1.0 - phi * phi).ln() - (1.0 - phi * phi) * d0 * d0 / (2.0 * s2)
                        + priors.log_phi_prior(phi)
                };
                if rng.uniform_open().ln() < log_r(proposal) - log_r(params.phi) {
                    params.phi = proposal;
                }
            }
        }
    }

    // μ | φ, σ, h: exact Gaussian draw.
    if has_level {
        let phi = params.phi;
        let s2 = params.sigma * params.sigma;
        let mut precision = (1.0 - phi * phi) / s2
            + t_len as f64 * (1.0 - phi) * (1.0 - phi) / s2
            + 1.0 / priors.big_b_mu;
        let mut linear = (1.0 - phi * phi) * h[0] / s2 + priors.b_mu / priors.big_b_mu;
        let mut acc = 0.0;
        for t in 1..=t_len {
            acc += h[t] - phi * h[t - 1];
        }
        linear += (1.0 - phi) * acc / s2;
        precision = precision.max(f64::MIN_POSITIVE);
        params.mu = rng.normal(linear / precision, (1.0 / precision).sqrt());
    }
    Ok(())
}

/// Non-centered move: with h̃ = (h − μ)/σ held fixed, (μ, σ) enter the
/// linearised observation equation linearly and have a Gaussian conditional
/// (σ ~ N(0, B_σ) is the symmetric version of the σ² prior).
fn interweave(
    rng: &mut RngHandle,
    ystar: &[f64],
    indicators: &[u8],
    states: &mut [f64],
    params: &mut SvParams,
    priors: &SvPriors,
    has_level: bool,
) {
    let mu = if has_level { params.mu } else { 0.0 };
    let sigma = params.sigma;
    let mut std_states: Vec<f64> = states.iter().map(|h| (h - mu) / sigma).collect();

    // Accumulate X'WX and X'Wz over t = 1..T with X = [1, h̃_t].
    let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for t in 1..std_states.len() {
        let (_, mean, var) = MIXTURE[indicators[t - 1] as usize];
        let w = 1.0 / var;
        let x = std_states[t];
        let z = ystar[t - 1] - mean;
        s11 += w;
        s12 += w * x;
        s22 += w * x * x;
        r1 += w * z;
        r2 += w * x * z;
    }

    let (new_mu, mut new_sigma);
    if has_level {
        let p11 = s11 + 1.0 / priors.big_b_mu;
        let p12 = s12;
        let p22 = s22 + 1.0 / priors.big_b_sigma;
        let b1 = r1 + priors.b_mu / priors.big_b_mu;
        let b2 = r2;
        let l11 = p11.sqrt();
        let l21 = p12 / l11;
        let l22 = (p22 - l21 * l21).max(f64::MIN_POSITIVE).sqrt();
        // mean = P⁻¹ b, draw = mean + L'⁻¹ z
        let u1 = b1 / l11;
        let u2 = (b2 - l21 * u1) / l22;
        let z1 = rng.std_normal();
        let z2 = rng.std_normal();
        new_sigma = (u2 + z2) / l22;
        new_mu = (u1 + z1 - l21 * new_sigma) / l11;
    } else {
        let p22 = s22 + 1.0 / priors.big_b_sigma;
        new_sigma = rng.normal(r2 / p22, (1.0 / p22).sqrt());
        new_mu = 0.0;
    }

    if !(new_sigma.is_finite() && new_mu.is_finite()) || new_sigma == 0.0 {
        return;
    }
    if new_sigma < 0.0 {
        new_sigma = -new_sigma;
        std_states.iter_mut().for_each(|x| *x = -*x);
    }
    for (h, x) in states.iter_mut().zip(&std_states) {
        *h = new_mu + new_sigma * x;
    }
    params.mu = new_mu;
    params.sigma = new_sigma;
}
