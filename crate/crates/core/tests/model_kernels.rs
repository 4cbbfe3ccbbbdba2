use facsv::model::*;
use facsv::samplers::RngHandle;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn random_instance(
    rng: &mut RngHandle,
    m: usize,
    r: usize,
    h_scale: f64,
) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let lam = DMatrix::from_fn(m, r, |_, _| rng.std_normal());
    let hf = (0..r)
        .map(|_| h_scale * (2.0 * rng.uniform() - 1.0))
        .collect();
    let hi = (0..m)
        .map(|_| h_scale * (2.0 * rng.uniform() - 1.0))
        .collect();
    (lam, hf, hi)
}

#[test]
fn covariance_matches_triple_loop() {
    let mut rng = RngHandle::new(1, 0);
    let (lam, hf, hi) = random_instance(&mut rng, 5, 2, 2.0);
    let sigma = covariance_at(&lam, &hf, &hi).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let mut v = 0.0;
            for k in 0..2 {
                v += hf[k].exp() * lam[(i, k)] * lam[(j, k)];
            }
            if i == j {
                v += hi[i].exp();
            }
            assert!((sigma[(i, j)] - v).abs() < 1e-12 * v.abs().max(1.0));
        }
    }
}

#[test]
fn communalities_match_covariance_oracle() {
    let mut rng = RngHandle::new(2, 0);
    let (lam, hf, hi) = random_instance(&mut rng, 6, 3, 1.5);
    let sigma = covariance_at(&lam, &hf, &hi).unwrap();
    let (per, joint) = communalities(&lam, &hf, &hi).unwrap();
    for i in 0..6 {
        assert!((per[i] - (1.0 - hi[i].exp() / sigma[(i, i)])).abs() < 1e-12);
    }
    assert_eq!(joint, per.iter().sum::<f64>() / 6.0);
}

fn dense_logdet(sigma: &DMatrix<f64>) -> f64 {
    let lu = sigma.clone().lu();
    lu.determinant().ln()
}

#[test]
fn woodbury_and_determinant_lemma_match_dense() {
    let mut rng = RngHandle::new(3, 0);
    let (lam, hf, hi) = random_instance(&mut rng, 50, 5, 3.0);
    let sigma = covariance_at(&lam, &hf, &hi).unwrap();
    let dense_inv = sigma.clone().try_inverse().unwrap();
    let prec = precision_woodbury(&lam, &hf, &hi).unwrap();
    assert!((&prec - &dense_inv).amax() < 1e-8);
    assert!((&prec * &sigma - DMatrix::identity(50, 50)).amax() < 1e-8);
    let ld = logdet_covariance(&lam, &hf, &hi).unwrap();
    let eig = sigma.clone().symmetric_eigen();
    let dense = eig.eigenvalues.iter().map(|v| v.ln()).sum::<f64>();
    assert!((ld - dense).abs() < 1e-8);
    assert!((ld - dense_logdet(&sigma)).abs() < 1e-8);
}

#[test]
fn lowrank_density_matches_dense() {
    let mut rng = RngHandle::new(4, 0);
    let (lam, hf, hi) = random_instance(&mut rng, 50, 5, 2.0);
    let sigma = covariance_at(&lam, &hf, &hi).unwrap();
    let y: Vec<f64> = (0..50).map(|_| 2.0 * rng.std_normal()).collect();
    let a = log_density_lowrank(&lam, &hf, &hi, &y).unwrap();
    let b = log_density_dense(&sigma, &y).unwrap();
    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
}

#[test]
fn covariance_is_positive_definite_up_to_m100() {
    let mut rng = RngHandle::new(5, 0);
    for &(m, r) in &[(10, 1), (40, 5), (100, 10)] {
        let (lam, hf, hi) = random_instance(&mut rng, m, r, 6.0);
        let sigma = covariance_at(&lam, &hf, &hi).unwrap();
        let min = sigma.symmetric_eigen().eigenvalues.min();
        assert!(min > 0.0, "m={m}: min eigenvalue {min}");
    }
}

#[test]
fn clamped_log_variances_stay_finite() {
    let lam = DMatrix::from_element(3, 1, 1.0);
    let sigma = covariance_at(&lam, &[1e4], &[-1e4, 0.0, 500.0]).unwrap();
    assert!(sigma.iter().all(|v| v.is_finite()));
    assert!(
        log_density_lowrank(&lam, &[1e4], &[-1e4, 0.0, 500.0], &[1.0, 1.0, 1.0])
            .unwrap()
            .is_finite()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identities_hold_for_random_instances(seed in any::<u64>(), m in 2usize..30, r in 1usize..6) {
        let mut rng = RngHandle::new(seed, 0);
        let (lam, hf, hi) = random_instance(&mut rng, m, r, 6.0);
        let sigma = covariance_at(&lam, &hf, &hi).unwrap();
        for i in 0..m {
            prop_assert!(sigma[(i, i)] >= hi[i].exp());
            for j in 0..m {
                prop_assert_eq!(sigma[(i, j)], sigma[(j, i)]);
            }
        }
        let prec = precision_woodbury(&lam, &hf, &hi).unwrap();
        let prod = &prec * &sigma;
        prop_assert!((prod - DMatrix::identity(m, m)).amax() < 1e-8);
        let eig = sigma.clone().symmetric_eigen();
        let dense: f64 = eig.eigenvalues.iter().map(|v| v.ln()).sum();
        let ld = logdet_covariance(&lam, &hf, &hi).unwrap();
        prop_assert!((ld - dense).abs() < 1e-8 * dense.abs().max(1.0));
    }

    #[test]
    fn correlations_and_communalities_bounded(seed in any::<u64>(), m in 1usize..15, r in 0usize..4) {
        let mut rng = RngHandle::new(seed, 1);
        let (lam, hf, hi) = random_instance(&mut rng, m, r, 5.0);
        let sigma = covariance_at(&lam, &hf, &hi).unwrap();
        let c = correlation_from_covariance(&sigma).unwrap();
        for i in 0..m {
            prop_assert_eq!(c[(i, i)], 1.0);
            for j in 0..m {
                prop_assert!(c[(i, j)].abs() <= 1.0);
            }
        }
        let (per, joint) = communalities(&lam, &hf, &hi).unwrap();
        prop_assert!(per.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(joint, per.iter().sum::<f64>() / m as f64);
    }

    #[test]
    fn sign_flip_leaves_covariance_unchanged(seed in any::<u64>(), m in 2usize..12, r in 1usize..4, col in 0usize..4) {
        let mut rng = RngHandle::new(seed, 2);
        let (lam, hf, hi) = random_instance(&mut rng, m, r, 3.0);
        let mut flipped = lam.clone();
        let j = col % r;
        flipped.column_mut(j).neg_mut();
        let a = covariance_at(&lam, &hf, &hi).unwrap();
        let b = covariance_at(&flipped, &hf, &hi).unwrap();
        prop_assert!((a - b).amax() < 1e-12 * 1.0f64.max(hf.iter().chain(&hi).map(|h| h.exp()).fold(0.0, f64::max)));
    }
}

#[test]
fn panel_invariants() {
    assert!(ReturnsPanel::from_matrix(DMatrix::from_element(2, 1, 1.0)).is_err());
    assert!(ReturnsPanel::from_matrix(DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN])).is_err());
    let mut p = ReturnsPanel::from_matrix(DMatrix::from_row_slice(
        2,
        3,
        &[1.0, 2.0, 6.0, -1e6, 0.0, 3e6],
    ))
    .unwrap();
    p.demean();
    for i in 0..2 {
        let row = p.values.row(i);
        let scale = row.amax();
        assert!(row.sum().abs() / 3.0 <= 1e-10 * scale);
    }
}
