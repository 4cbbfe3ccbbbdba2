//! Sampler checks shared by the sampler tests and the acceptance run.
#![allow(dead_code)]

use facsv::model::SvParams;
use facsv::samplers::*;
use facsv::sv::sv_stationary_init;
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Beta, ContinuousCDF, Gamma};

const N_KS: usize = 100_000;
// Kolmogorov distribution quantile at 0.1%
const KS_C: f64 = 1.949;

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0),
    )
}

pub fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Tabulated CDF of the GIG footnote density by trapezoid quadrature on log x.
struct GigQuadrature {
    u: Vec<f64>,
    cdf: Vec<f64>,
    mean: f64,
}

impl GigQuadrature {
    fn new(p: f64, k: f64, l: f64) -> Self {
        let log_dens = |u: f64| {
            let x = u.exp();
            p * u - 0.5 * (k * x + l / x)
        };
        // locate the mode of the density in u and integrate ±60 around it
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
        let mut u = -80.0;
        while u < 80.0 {
            let v = log_dens(u);
            if v > best {
                best = v;
                arg = u;
            }
            u += 0.01;
        }
        let n = 400_000;
        let (lo, hi) = (arg - 60.0, arg + 60.0);
        let h = (hi - lo) / n as f64;
        let us: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
        let w: Vec<f64> = us.iter().map(|&u| (log_dens(u) - best).exp()).collect();
        let mut cdf = vec![0.0; n + 1];
        let mut first = 0.0;
        for i in 1..=n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (w[i] + w[i - 1]);
            first += 0.5 * h * (w[i] * us[i].exp() + w[i - 1] * us[i - 1].exp());
        }
        let z = cdf[n];
        cdf.iter_mut().for_each(|c| *c /= z);
        GigQuadrature {
            u: us,
            cdf,
            mean: first / z,
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        let u = x.ln();
        let (lo, hi) = (self.u[0], *self.u.last().unwrap());
        if u <= lo {
            return 0.0;
        }
        if u >= hi {
            return 1.0;
        }
        let pos = (u - lo) / (self.u[1] - self.u[0]);
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        self.cdf[i] * (1.0 - frac) + self.cdf[i + 1] * frac
    }
}

fn gig_draws(seed: u64, p: f64, k: f64, l: f64, n: usize) -> Vec<f64> {
    let mut rng = RngHandle::new(seed, 0);
    let params = GigParams::new(p, k, l).unwrap();
    (0..n)
        .map(|_| sample_gig(&mut rng, params).unwrap())
        .collect()
}

pub fn gig_mean_matches_quadrature() {
    let draws = gig_draws(11, 0.6, 2.0, 1.5, 1_000_000);
    let (m, _) = mean_var(&draws);
    let q = GigQuadrature::new(0.6, 2.0, 1.5);
    assert!(
        (m / q.mean - 1.0).abs() < 0.01,
        "empirical {m}, quadrature {}",
        q.mean
    );
}

pub fn gig_ks_against_quadrature_cdf_on_grid() {
    // covers the shifted ratio-of-uniforms, plain ratio-of-uniforms and
    // concave-monotone regions, positive and negative orders
    let grid = [
        (0.6, 2.0, 1.5),
        (3.5, 1.0, 1.0),
        (0.2, 10.0, 10.0),
        (0.5, 0.5, 0.5),
        (-0.4, 0.01, 0.01),
        (0.3, 1e-3, 4.0),
        (-3.0, 2.0, 5.0),
        (-0.45, 0.02, 0.3),
        (0.9, 0.05, 0.05),
    ];
    for (s, &(p, k, l)) in grid.iter().enumerate() {
        let q = GigQuadrature::new(p, k, l);
        let d = ks_statistic(gig_draws(100 + s as u64, p, k, l, N_KS), |x| q.cdf(x));
        assert!(
            d < KS_C / (N_KS as f64).sqrt(),
            "GIG({p}, {k}, {l}): KS statistic {d}"
        );
    }
}

pub fn gig_reciprocal_symmetry() {
    for (s, &(p, k, l)) in [(0.6, 2.0, 1.5), (-0.4, 0.05, 2.0), (2.5, 0.3, 7.0)]
        .iter()
        .enumerate()
    {
        let x: Vec<f64> = gig_draws(200 + s as u64, p, k, l, N_KS)
            .into_iter()
            .map(|v| 1.0 / v)
            .collect();
        let y = gig_draws(300 + s as u64, -p, l, k, N_KS);
        let d = ks_two_sample(x, y);
        let crit = KS_C * (2.0 / N_KS as f64).sqrt();
        assert!(d < crit, "GIG({p}, {k}, {l}): two-sample KS {d} >= {crit}");
    }
}

pub fn gig_stress_grid_finite_positive() {
    let mut rng = RngHandle::new(7, 7);
    let tiny = [1e-12, 1e-8, 1e-3, 1.0, 1e3];
    for &p in &[-2.0, -0.45, -0.1, 0.1, 0.5, 2.0] {
        for &k in &tiny {
            for &l in &tiny {
                let params = GigParams::new(p, k, l).unwrap();
                for _ in 0..200 {
                    let x = sample_gig(&mut rng, params).unwrap();
                    assert!(x.is_finite() && x > 0.0, "GIG({p}, {k}, {l}) gave {x}");
                }
            }
        }
    }
}

pub fn gamma_examples_and_ks() {
    let mut rng = RngHandle::new(21, 0);
    let exp: Vec<f64> = (0..1_000_000)
        .map(|_| sample_gamma(&mut rng, 1.0, 1.0).unwrap())
        .collect();
    assert!((mean_var(&exp).0 - 1.0).abs() < 0.01);
    let chi: Vec<f64> = (0..1_000_000)
        .map(|_| sample_gamma(&mut rng, 0.5, 0.5).unwrap())
        .collect();
    assert!((mean_var(&chi).1 / 2.0 - 1.0).abs() < 0.02);
    // τ² | λ² ~ G(a, a λ² / 2) has mean 2 / λ²
    let (a, lam2) = (0.1, 3.0);
    let tau: Vec<f64> = (0..1_000_000)
        .map(|_| sample_gamma(&mut rng, a, a * lam2 / 2.0).unwrap())
        .collect();
    let (m, v) = mean_var(&tau);
    assert!((m - 2.0 / lam2).abs() < 4.0 * (v / 1e6).sqrt());
    for (s, &(shape, rate)) in [(0.1, 0.05), (0.5, 0.5), (2.5, 4.0), (30.0, 1.0)]
        .iter()
        .enumerate()
    {
        let mut rng = RngHandle::new(22, s as u64);
        let xs: Vec<f64> = (0..N_KS)
            .map(|_| sample_gamma(&mut rng, shape, rate).unwrap())
            .collect();
        let g = Gamma::new(shape, rate).unwrap();
        let d = ks_statistic(xs, |x| g.cdf(x));
        assert!(
            d < KS_C / (N_KS as f64).sqrt(),
            "Gamma({shape}, {rate}): {d}"
        );
    }
    assert!(sample_gamma(&mut rng, 0.0, 1.0).is_err());
    assert!(sample_gamma(&mut rng, 1.0, -1.0).is_err());
}

pub fn beta_examples_and_ks() {
    let mut rng = RngHandle::new(31, 0);
    let u: Vec<f64> = (0..1_000_000)
        .map(|_| sample_beta(&mut rng, 1.0, 1.0).unwrap())
        .collect();
    assert!((mean_var(&u).0 - 0.5).abs() < 0.01);
    let b: Vec<f64> = (0..1_000_000)
        .map(|_| sample_beta(&mut rng, 10.0, 2.5).unwrap())
        .collect();
    assert!((mean_var(&b).0 - 0.8).abs() < 0.01);
    assert!(b.iter().all(|x| (2.0 * x - 1.0).abs() < 1.0));
    for (s, &(a0, b0)) in [(10.0, 2.5), (2.5, 2.5), (0.5, 0.7), (20.0, 1.5)]
        .iter()
        .enumerate()
    {
        let mut rng = RngHandle::new(32, s as u64);
        let xs: Vec<f64> = (0..N_KS)
            .map(|_| sample_beta(&mut rng, a0, b0).unwrap())
            .collect();
        let dist = Beta::new(a0, b0).unwrap();
        let d = ks_statistic(xs, |x| dist.cdf(x));
        assert!(d < KS_C / (N_KS as f64).sqrt(), "Beta({a0}, {b0}): {d}");
    }
}

pub fn mvn_examples() {
    let mut rng = RngHandle::new(41, 0);
    let n = 1_000_000;
    let id = DMatrix::identity(3, 3);
    let zero = DVector::zeros(3);
    let mut sums = [0.0; 3];
    for _ in 0..n {
        let x = sample_mvn_from_precision_factor(&mut rng, &zero, &id).unwrap();
        for i in 0..3 {
            sums[i] += x[i];
        }
    }
    assert!(sums.iter().all(|s| (s / n as f64).abs() < 0.01));

    let p = DMatrix::from_element(1, 1, 4.0);
    let b = DVector::from_element(1, 4.0);
    let xs: Vec<f64> = (0..200_000)
        .map(|_| sample_mvn_from_precision_factor(&mut rng, &b, &p).unwrap()[0])
        .collect();
    let (m, v) = mean_var(&xs);
    assert!((m - 1.0).abs() < 0.005 && (v / 0.25 - 1.0).abs() < 0.02);
}

pub fn mvn_covariance_matches_dense_inverse() {
    let mut rng = RngHandle::new(42, 0);
    let a = DMatrix::from_fn(5, 5, |_, _| rng.std_normal());
    let precision = &a * a.transpose() + DMatrix::identity(5, 5) * 0.5;
    let cov = precision.clone().try_inverse().unwrap();
    let rhs = DVector::from_fn(5, |_, _| rng.std_normal());
    let mean = &cov * &rhs;
    let n = 1_000_000;
    let mut s1 = DVector::zeros(5);
    let mut s2 = DMatrix::zeros(5, 5);
    for _ in 0..n {
        let x = sample_mvn_from_precision_factor(&mut rng, &rhs, &precision).unwrap() - &mean;
        s1 += &x;
        s2 += &x * x.transpose();
    }
    let emp = s2 / n as f64;
    assert!((s1 / n as f64).amax() < 0.01 * cov.diagonal().amax().sqrt());
    assert!((&emp - &cov).norm() / cov.norm() < 0.02);
}

pub fn stationary_initial_values() {
    let mut rng = RngHandle::new(51, 0);
    let n = 1_000_000;
    let p = SvParams {
        mu: 0.0,
        phi: 0.9,
        sigma: 1.0,
    };
    let xs: Vec<f64> = (0..n)
        .map(|_| sv_stationary_init(&mut rng, p, true).unwrap())
        .collect();
    assert!((mean_var(&xs).1 / (1.0 / 0.19) - 1.0).abs() < 0.02);
    let p = SvParams {
        mu: -1.0,
        phi: 0.0,
        sigma: 1.0,
    };
    let xs: Vec<f64> = (0..n)
        .map(|_| sv_stationary_init(&mut rng, p, true).unwrap())
        .collect();
    assert!((mean_var(&xs).0 + 1.0).abs() < 0.01);
    let bad = SvParams {
        mu: 0.0,
        phi: 1.0,
        sigma: 1.0,
    };
    assert!(sv_stationary_init(&mut rng, bad, true).is_err());
}

pub const SAMPLER_CHECKS: &[(&str, fn())] = &[
    ("gig mean", gig_mean_matches_quadrature),
    ("gig ks grid", gig_ks_against_quadrature_cdf_on_grid),
    ("gig reciprocal", gig_reciprocal_symmetry),
    ("gig stress", gig_stress_grid_finite_positive),
    ("gamma", gamma_examples_and_ks),
    ("beta", beta_examples_and_ks),
    ("mvn", mvn_examples),
    ("mvn covariance", mvn_covariance_matches_dense_inverse),
    ("stationary init", stationary_initial_values),
];
