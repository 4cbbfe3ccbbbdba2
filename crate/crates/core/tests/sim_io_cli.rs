use facsv::cli::cli_dispatch;
use facsv::io::{load_returns_csv, write_returns_csv};
use facsv::model::ReturnsPanel;
use facsv::sim::{simulate_fsv, LoadingsSpec, SimSpec, SvRanges};
use facsv::store::DrawStore;
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::path::Path;

fn spec(m: usize, t_len: usize, r: usize, seed: u64) -> SimSpec {
    SimSpec {
        m,
        t_len,
        r_true: r,
        restricted: true,
        loadings: LoadingsSpec::Random {
            zero_fraction: 0.0,
            magnitude: (0.5, 1.0),
        },
        idio_ranges: SvRanges::idiosyncratic_default(),
        factor_ranges: SvRanges::factor_default(),
        seed,
    }
}

#[test]
fn no_factor_simulation_is_uncorrelated() {
    let t_len = 2000;
    let truth = simulate_fsv(&spec(5, t_len, 0, 11)).unwrap();
    let y = &truth.data.values;
    let bound = 4.0 / (t_len as f64).sqrt();
    for i in 0..5 {
        for j in i + 1..5 {
            let (a, b) = (y.row(i), y.row(j));
            let c = a.dot(&b) / (a.norm() * b.norm());
            assert!(c.abs() < bound, "corr({i},{j}) = {c}");
        }
    }
}

#[test]
fn replicated_observation_covariance_matches_model() {
    // fixed parameters, first date, stationary latents: E[yy'] = Λ E[V] Λ' + E[Σ̄]
    let lam = vec![vec![0.8, 0.0], vec![-0.5, 0.6], vec![0.3, 0.9]];
    let idio = SvRanges {
        mu: (-1.0, -1.0),
        phi: (0.9, 0.9),
        sigma: (0.3, 0.3),
    };
    let fac = SvRanges {
        mu: (0.0, 0.0),
        phi: (0.95, 0.95),
        sigma: (0.2, 0.2),
    };
    let lognormal_mean = |mu: f64, phi: f64, s: f64| (mu + 0.5 * s * s / (1.0 - phi * phi)).exp();
    let (ei, ef) = (
        lognormal_mean(-1.0, 0.9, 0.3),
        lognormal_mean(0.0, 0.95, 0.2),
    );
    let l = DMatrix::from_fn(3, 2, |i, j| lam[i][j]);
    let want = &l * l.transpose() * ef + DMatrix::identity(3, 3) * ei;

    let n = 100_000;
    let mut acc = DMatrix::zeros(3, 3);
    for seed in 0..n {
        let s = SimSpec {
            loadings: LoadingsSpec::Explicit {
                matrix: lam.clone(),
            },
            idio_ranges: idio.clone(),
            factor_ranges: fac.clone(),
            ..spec(3, 2, 2, seed)
        };
        let y = simulate_fsv(&s).unwrap().data.values.column(0).into_owned();
        acc += &y * y.transpose();
    }
    let emp = acc / n as f64;
    assert!(
        (&emp - &want).norm() / want.norm() < 0.03,
        "{emp} vs {want}"
    );
}

fn write_then_load(panel: &ReturnsPanel, dir: &Path) -> ReturnsPanel {
    let p = dir.join("r.csv");
    write_returns_csv(&p, panel).unwrap();
    load_returns_csv(&p, false).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn csv_round_trip_is_bitwise(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 12)) {
        let panel = ReturnsPanel::from_matrix(DMatrix::from_column_slice(3, 4, &values)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let back = write_then_load(&panel, dir.path());
        prop_assert!(back.values.iter().zip(panel.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.series_labels, panel.series_labels);
    }
}

#[test]
fn malformed_csv_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "date,a,b\n1,0.5,0.1\n2,0.3,abc\n").unwrap();
    let msg = load_returns_csv(&p, false).unwrap_err().to_string();
    assert!(msg.contains('3'), "{msg}");
}

fn run(args: &[&str]) -> i32 {
    cli_dispatch(std::iter::once("facsv").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = d.join("sim");
    assert_eq!(
        run(&[
            "simulate",
            "--out",
            s(&sim),
            "--m",
            "6",
            "--dates",
            "260",
            "--factors",
            "2",
            "--seed",
            "3"
        ]),
        0
    );
    let returns = sim.join("returns.csv");
    assert!(returns.exists() && sim.join("true_loadings.csv").exists());

    let fit_args = |out: &Path| {
        vec![
            "fit".to_string(),
            "--out".into(),
            s(out).into(),
            "--data".into(),
            s(&returns).into(),
            "--factors".into(),
            "2".into(),
            "--draws".into(),
            "400".into(),
            "--burnin".into(),
            "100".into(),
            "--thin".into(),
            "3".into(),
            "--restricted".into(),
        ]
    };
    let (fa, fb) = (d.join("fit_a"), d.join("fit_b"));
    for out in [&fa, &fb] {
        let a = fit_args(out);
        assert_eq!(run(&a.iter().map(String::as_str).collect::<Vec<_>>()), 0);
    }
    let (sa, sb) = (DrawStore::load(&fa).unwrap(), DrawStore::load(&fb).unwrap());
    assert_eq!(sa.fingerprint(), sb.fingerprint());
    assert_eq!(sa.len(), 100);

    let ev = d.join("eval");
    assert_eq!(
        run(&[
            "evaluate",
            "--out",
            s(&ev),
            "--truth",
            s(&sim.join("truth")),
            "--store",
            s(&fa)
        ]),
        0
    );
    for f in [
        "correlation_errors.csv",
        "pair_rmse.csv",
        "communalities.csv",
    ] {
        assert!(ev.join(f).exists(), "{f}");
    }

    let (p1, p2) = (d.join("plot1"), d.join("plot2"));
    for p in [&p1, &p2] {
        assert_eq!(run(&["plotdata", "--out", s(p), "--store", s(&fa)]), 0);
    }
    for entry in std::fs::read_dir(&p1).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(p1.join(&name)).unwrap(),
            std::fs::read(p2.join(&name)).unwrap(),
            "{name:?}"
        );
    }

    assert_eq!(
        run(&[
            "fit",
            "--out",
            s(&d.join("x")),
            "--data",
            s(&d.join("missing.csv"))
        ]),
        1
    );
    assert_ne!(run(&["fit", "--bogus"]), 0);
}

#[test]
fn cli_rolling_prefers_true_factor_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = d.join("sim");
    assert_eq!(
        run(&[
            "simulate",
            "--out",
            s(&sim),
            "--m",
            "6",
            "--dates",
            "260",
            "--factors",
            "2",
            "--seed",
            "5"
        ]),
        0
    );
    let out = d.join("pred");
    let code = run(&[
        "predict",
        "--out",
        s(&out),
        "--data",
        s(&sim.join("returns.csv")),
        "--factors",
        "2,0",
        "--horizons",
        "1",
        "--start",
        "230",
        "--end",
        "250",
        "--warm-block",
        "10",
        "--warm-burnin",
        "100",
        "--draws",
        "500",
        "--burnin",
        "200",
        "--thin",
        "2",
        "--workers",
        "2",
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(out.join("bf_h1.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("date,r2_vs_r0"));
    let last: f64 = lines
        .last()
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(last > 0.0, "cumulative log BF {last}");
}
