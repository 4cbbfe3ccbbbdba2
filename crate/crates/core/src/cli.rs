//! Command-line surface: `simulate`, `fit`, `predict`, `backtest`,
//! `evaluate` and `plotdata`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use nalgebra::DMatrix;

use crate::baselines::{
    backtest_table, correlation_error_table, correlation_errors, run_backtest, with_relative_to,
    CovarianceForecaster, ExponentialMovingAverage, LedoitWolf, MovingAverage, Precomputed,
};
use crate::config::RunConfig;
use crate::error::{FsvError, Result};
use crate::gibbs::StoreMode;
use crate::io::{
    fmt_f64, load_matrix_csv, load_returns_csv, write_returns_csv, write_table, write_text,
};
use crate::model::correlation_from_covariance;
use crate::predict::{
    cumulative_log_bayes_factor, predictive_draws, predictive_likelihood_marginal_detailed,
    rolling_forecast, PlSeries, RollingConfig,
};
use crate::sim::simulate_fsv;
use crate::store::{data_fingerprint, run_chain, DrawStore};

#[derive(Parser, Debug)]
#[command(
    name = "facsv",
    version,
    about = "Factor stochastic volatility estimation and forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a panel and save it with its ground truth.
    Simulate(SimulateArgs),
    /// Run the sampler on a returns panel and save the draws.
    Fit(FitArgs),
    /// Predictive likelihoods from a saved fit or by rolling re-estimation.
    Predict(PredictArgs),
    /// Minimum-variance portfolio backtest of covariance forecasts.
    Backtest(BacktestArgs),
    /// Correlation errors of a fit against a simulated truth.
    Evaluate(EvaluateArgs),
    /// Plot-ready tables from a saved fit.
    Plotdata(PlotArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ChainArgs {
    /// gaussian, lasso-row, lasso-col, ng-row or ng-col.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Fix λ_ij = 0 for j > i.
    #[arg(long)]
    restricted: bool,
    /// Redraw each factor's scale after the loadings step.
    #[arg(long)]
    interweave: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of series; switches from the built-in fixture to a random design.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    dates: Option<usize>,
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long)]
    zero_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    chain: ChainArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    demean: bool,
    #[arg(long)]
    factors: Option<usize>,
    /// CSV of factor paths (dates × factors) to hold fixed.
    #[arg(long)]
    fixed_factors: Option<PathBuf>,
    /// Keep only the last state of each draw.
    #[arg(long)]
    terminal: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    chain: ChainArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    demean: bool,
    /// Evaluate a saved fit on the dates following its sample.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Competing factor counts for rolling evaluation.
    #[arg(long, value_delimiter = ',')]
    factors: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
    /// First forecast origin (number of training dates).
    #[arg(long)]
    start: Option<usize>,
    /// Origins run up to but excluding this date.
    #[arg(long)]
    end: Option<usize>,
    #[arg(long)]
    warm_block: Option<usize>,
    #[arg(long)]
    warm_burnin: Option<usize>,
}

#[derive(Args, Debug)]
struct BacktestArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    demean: bool,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long)]
    start: Option<usize>,
    #[arg(long)]
    end: Option<usize>,
    /// NAME=PATH of a forecast covariance file written by `predict`.
    #[arg(long)]
    covariances: Vec<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// A second fit to report relative errors against.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Dates of the correlation snapshots (default: first, middle, last).
    #[arg(long, value_delimiter = ',')]
    dates: Vec<usize>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Backtest(a) => backtest(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plotdata(a) => plotdata(a),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FsvError::io(dir, e))
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.chain.seed = s;
        cfg.simulate.seed = s;
    }
    Ok(cfg)
}

fn apply_chain(cfg: &mut RunConfig, a: &ChainArgs) {
    if let Some(p) = &a.prior {
        cfg.prior.preset = p.clone();
    }
    if let Some(v) = a.draws {
        cfg.chain.draws = v;
    }
    if let Some(v) = a.burnin {
        cfg.chain.burnin = v;
    }
    if let Some(v) = a.thin {
        cfg.chain.thin = v;
    }
    if a.restricted {
        cfg.chain.restricted = true;
    }
    if a.interweave {
        cfg.chain.interweave = true;
    }
    if let Some(w) = a.workers {
        cfg.chain.workers = w.max(1);
    }
}

/// Prints the resolved configuration and stores a copy next to the outputs.
fn echo(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = cfg.to_toml();
    eprintln!("# resolved configuration (seed {})\n{text}", cfg.chain.seed);
    write_text(&out.join("config.toml"), &text)
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers <= 1 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| FsvError::Config(e.to_string()))?
        .install(f)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    let s = &mut cfg.simulate;
    if let Some(m) = a.m {
        s.fixture = false;
        s.m = m;
    }
    if let Some(v) = a.dates {
        s.dates = v;
    }
    if let Some(v) = a.factors {
        s.factors = v;
    }
    if let Some(v) = a.zero_fraction {
        s.zero_fraction = v;
    }
    prepare_out(&a.common.out)?;
    echo(&cfg, &a.common.out)?;
    let truth = simulate_fsv(&cfg.simulate.spec())?;
    write_returns_csv(&a.common.out.join("returns.csv"), &truth.data)?;
    truth.to_store()?.save(&a.common.out.join("truth"))?;
    let header: Vec<String> = std::iter::once("series".to_string())
        .chain((1..=truth.spec.r_true).map(|j| format!("factor{j}")))
        .collect();
    let rows = (0..truth.spec.m).map(|i| {
        std::iter::once(truth.data.series_labels[i].clone())
            .chain(truth.loadings().row(i).iter().map(|&v| fmt_f64(v)))
            .collect()
    });
    write_table(&a.common.out.join("true_loadings.csv"), &header, rows)?;
    println!(
        "simulated m = {}, T = {}, r = {} (seed {}) into {}",
        truth.spec.m,
        truth.spec.t_len,
        truth.spec.r_true,
        truth.spec.seed,
        a.common.out.display()
    );
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_chain(&mut cfg, &a.chain);
    if let Some(r) = a.factors {
        cfg.chain.factors = r;
    }
    if a.terminal {
        cfg.chain.store = StoreMode::Terminal;
    }
    prepare_out(&a.common.out)?;
    echo(&cfg, &a.common.out)?;
    let data = load_returns_csv(&a.data, a.demean)?;
    let mut chain = cfg.chain_config(cfg.chain.factors)?;
    if let Some(p) = &a.fixed_factors {
        chain.fixed_factors = Some(load_matrix_csv(p)?);
    }
    let store = with_workers(cfg.chain.workers, || run_chain(&data, &chain))?;
    store.save(&a.common.out)?;
    println!(
        "{} draws saved to {}; fingerprint {}",
        store.len(),
        a.common.out.display(),
        store.fingerprint()
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_chain(&mut cfg, &a.chain);
    if !a.factors.is_empty() {
        cfg.predict.models = a.factors.clone();
    }
    if !a.horizons.is_empty() {
        cfg.predict.horizons = a.horizons.clone();
    }
    if a.start.is_some() {
        cfg.predict.start = a.start;
    }
    if a.end.is_some() {
        cfg.predict.end = a.end;
    }
    if a.warm_block.is_some() {
        cfg.predict.warm_block = a.warm_block;
    }
    if let Some(b) = a.warm_burnin {
        cfg.predict.warm_burnin = b;
    }
    prepare_out(&a.common.out)?;
    echo(&cfg, &a.common.out)?;
    let data = load_returns_csv(&a.data, a.demean)?;
    match &a.store {
        Some(dir) => predict_from_store(&cfg, &data, dir, &a.common.out),
        None => predict_rolling(&cfg, &data, &a.common.out),
    }
}

fn predict_from_store(
    cfg: &RunConfig,
    data: &crate::model::ReturnsPanel,
    dir: &Path,
    out: &Path,
) -> Result<()> {
    let store = DrawStore::load(dir)?;
    let t_fit = store.meta.n_dates;
    if data.n_dates() < t_fit
        || data_fingerprint(&data.truncated(t_fit)?) != store.meta.data_fingerprint
    {
        warn!("the panel does not start with the data the store was fitted on");
    }
    let mut rows = Vec::new();
    for &h in &cfg.predict.horizons {
        let date = t_fit + h;
        if date > data.n_dates() {
            warn!("horizon {h}: date {date} is beyond the panel");
            continue;
        }
        let draws = predictive_draws(&store.snapshots, h, cfg.chain.seed, false)?;
        let y: Vec<f64> = data.values.column(date - 1).iter().copied().collect();
        let pl = predictive_likelihood_marginal_detailed(&draws, &y)?;
        println!(
            "h = {h}: log PL(y_{date}) = {:.6} ({} failed draws)",
            pl.log_pl, pl.failed_draws
        );
        rows.push(vec![
            h.to_string(),
            date.to_string(),
            fmt_f64(pl.log_pl),
            pl.failed_draws.to_string(),
        ]);
    }
    write_table(
        &out.join("pl.csv"),
        &strings(&["horizon", "date", "log_pl", "failed_draws"]),
        rows,
    )
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn predict_rolling(cfg: &RunConfig, data: &crate::model::ReturnsPanel, out: &Path) -> Result<()> {
    let p = &cfg.predict;
    let t_start = p
        .start
        .ok_or_else(|| FsvError::Config("rolling prediction needs --start".into()))?;
    let t_end = p.end.unwrap_or(data.n_dates());
    let mut series: BTreeMap<usize, BTreeMap<usize, PlSeries>> = BTreeMap::new();
    for &r in &p.models {
        let mut chain = cfg.chain_config(r)?;
        chain.parallel = false;
        let mut rc = RollingConfig::new(chain, t_start, t_end, p.horizons.clone());
        rc.warm_block = p.warm_block;
        rc.warm_burn_in = p.warm_burnin;
        rc.workers = cfg.chain.workers;
        info!("rolling evaluation of the {r}-factor model");
        let res = rolling_forecast(data, &rc)?;
        let rows = res.pl.iter().flat_map(|(h, s)| {
            s.values
                .iter()
                .map(move |(d, v)| vec![h.to_string(), d.to_string(), fmt_f64(*v)])
        });
        write_table(
            &out.join(format!("pl_r{r}.csv")),
            &strings(&["horizon", "date", "log_pl"]),
            rows,
        )?;
        let m = data.n_series();
        let cov_rows = res.records.iter().flat_map(|rec| {
            (0..m).flat_map(move |i| {
                (0..m).map(move |j| {
                    vec![
                        rec.origin.to_string(),
                        i.to_string(),
                        j.to_string(),
                        fmt_f64(rec.predictive_covariance[(i, j)]),
                    ]
                })
            })
        });
        write_table(
            &out.join(format!("forecast_cov_r{r}.csv")),
            &strings(&["origin", "i", "j", "value"]),
            cov_rows,
        )?;
        if !res.missing.is_empty() {
            let rows = res
                .missing
                .iter()
                .map(|(o, msg)| vec![o.to_string(), msg.clone()]);
            write_table(
                &out.join(format!("missing_r{r}.csv")),
                &strings(&["origin", "error"]),
                rows,
            )?;
        }
        for (h, s) in &res.pl {
            println!(
                "r = {r}, h = {h}: total log PL {:.4} over {} dates",
                s.total(),
                s.values.len()
            );
        }
        series.insert(r, res.pl);
    }
    write_bayes_factors(&series, &p.models, &p.horizons, out)
}

/// Cumulative log BF of every ordered pair of models on the dates all models cover.
fn write_bayes_factors(
    series: &BTreeMap<usize, BTreeMap<usize, PlSeries>>,
    models: &[usize],
    horizons: &[usize],
    out: &Path,
) -> Result<()> {
    for &h in horizons {
        let common: Vec<usize> = {
            let mut it = models.iter().map(|r| {
                series[r][&h]
                    .values
                    .iter()
                    .map(|v| v.0)
                    .collect::<std::collections::BTreeSet<_>>()
            });
            let first = it.next().unwrap_or_default();
            it.fold(first, |acc, s| acc.intersection(&s).copied().collect())
                .into_iter()
                .collect()
        };
        if common.is_empty() {
            continue;
        }
        let restrict = |s: &PlSeries| PlSeries {
            values: s
                .values
                .iter()
                .copied()
                .filter(|v| common.binary_search(&v.0).is_ok())
                .collect(),
        };
        let (t1, t2) = (common[0] - 1, *common.last().expect("non-empty"));
        let mut header = vec!["date".to_string()];
        let mut columns = Vec::new();
        for (ia, &ra) in models.iter().enumerate() {
            for &rb in &models[ia + 1..] {
                header.push(format!("r{ra}_vs_r{rb}"));
                let bf = cumulative_log_bayes_factor(
                    &restrict(&series[&ra][&h]),
                    &restrict(&series[&rb][&h]),
                    t1,
                    t2,
                )?;
                println!(
                    "h = {h}: cumulative log BF r{ra} vs r{rb} = {:.4}",
                    bf.last().map_or(0.0, |v| v.1)
                );
                columns.push(bf);
            }
        }
        let rows = common.iter().enumerate().map(|(k, d)| {
            std::iter::once(d.to_string())
                .chain(columns.iter().map(|c| fmt_f64(c[k].1)))
                .collect()
        });
        write_table(&out.join(format!("bf_h{h}.csv")), &header, rows)?;
    }
    Ok(())
}

fn load_forecasts(label: &str, path: &Path) -> Result<Precomputed> {
    let text = fs::read_to_string(path).map_err(|e| FsvError::io(path, e))?;
    let mut entries: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let bad = |column: usize| FsvError::Parse {
            line: n + 1,
            column,
            message: "expected origin,i,j,value".into(),
        };
        if cells.len() != 4 {
            return Err(bad(cells.len() + 1));
        }
        let origin = cells[0].trim().parse().map_err(|_| bad(1))?;
        let i = cells[1].trim().parse().map_err(|_| bad(2))?;
        let j = cells[2].trim().parse().map_err(|_| bad(3))?;
        let v = cells[3].trim().parse().map_err(|_| bad(4))?;
        entries.entry(origin).or_default().push((i, j, v));
    }
    let mut by_origin = BTreeMap::new();
    for (origin, cells) in entries {
        let m = cells.iter().map(|c| c.0.max(c.1)).max().unwrap_or(0) + 1;
        let mut s = DMatrix::zeros(m, m);
        for (i, j, v) in cells {
            s[(i, j)] = v;
        }
        by_origin.insert(origin, s);
    }
    Ok(Precomputed {
        label: label.to_string(),
        by_origin,
    })
}

fn backtest(a: BacktestArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    let b = &mut cfg.backtest;
    if let Some(w) = a.window {
        b.window = w;
    }
    if !a.alphas.is_empty() {
        b.alphas = a.alphas.clone();
    }
    if a.start.is_some() {
        b.start = a.start;
    }
    if a.end.is_some() {
        b.end = a.end;
    }
    prepare_out(&a.common.out)?;
    echo(&cfg, &a.common.out)?;
    let b = &cfg.backtest;
    let data = load_returns_csv(&a.data, a.demean)?;
    let t_start = b.start.unwrap_or(b.window);
    let t_end = b.end.unwrap_or(data.n_dates());
    let mut models: Vec<Box<dyn CovarianceForecaster>> =
        vec![Box::new(MovingAverage { window: b.window })];
    for &alpha in &b.alphas {
        models.push(Box::new(ExponentialMovingAverage::new(alpha, b.window)?));
    }
    models.push(Box::new(LedoitWolf { window: b.window }));
    for spec in &a.covariances {
        let (name, path) = spec.split_once('=').ok_or_else(|| {
            FsvError::Config(format!("--covariances expects NAME=PATH, got '{spec}'"))
        })?;
        models.push(Box::new(load_forecasts(name, Path::new(path))?));
    }
    let mut runs = Vec::new();
    for model in models.iter_mut() {
        runs.push(run_backtest(
            &data.values,
            model.as_mut(),
            t_start,
            t_end,
            b.trading_days,
        )?);
    }
    let table = backtest_table(&runs);
    print!("{table}");
    write_text(&a.common.out.join("backtest.csv"), &table)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    prepare_out(&a.out)?;
    let truth = DrawStore::load(&a.truth)?;
    let store = DrawStore::load(&a.store)?;
    if truth.meta.data_fingerprint != store.meta.data_fingerprint {
        return Err(FsvError::Contract(
            "the fit was not run on the simulated panel".into(),
        ));
    }
    let true_corr = truth.mean_correlations()?;
    let est = correlation_errors(&true_corr, &store.mean_correlations()?)?;
    let mut named = vec![("estimate".to_string(), est.clone())];
    if let Some(dir) = &a.baseline {
        let base = DrawStore::load(dir)?;
        let base_rep = correlation_errors(&true_corr, &base.mean_correlations()?)?;
        let rel = with_relative_to(&est, &base_rep)?;
        let rows = store
            .meta
            .series_labels
            .iter()
            .zip(rel.per_series_geometric_relative.unwrap_or_default())
            .map(|(l, v)| vec![l.clone(), fmt_f64(v)]);
        write_table(
            &a.out.join("relative_rmse.csv"),
            &strings(&["series", "geometric_relative_rmse"]),
            rows,
        )?;
        named.push(("baseline".to_string(), base_rep));
    }
    let table = correlation_error_table(&named);
    print!("{table}");
    write_text(&a.out.join("correlation_errors.csv"), &table)?;
    let m = est.pair_rmse.nrows();
    let rows = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .map(|(i, j)| {
            vec![
                store.meta.series_labels[i].clone(),
                store.meta.series_labels[j].clone(),
                fmt_f64(est.pair_rmse[(i, j)]),
            ]
        });
    write_table(
        &a.out.join("pair_rmse.csv"),
        &strings(&["series_a", "series_b", "rmse"]),
        rows,
    )?;
    write_communalities(&store, &a.out.join("communalities.csv"))
}

fn write_communalities(store: &DrawStore, path: &Path) -> Result<()> {
    let comm = store.mean_communalities()?;
    let first = store.meta.first_state.max(1);
    let mut header = strings(&["date", "joint"]);
    header.extend(store.meta.series_labels.iter().cloned());
    let rows = comm.into_iter().enumerate().map(|(k, (per, joint))| {
        [(first + k).to_string(), fmt_f64(joint)]
            .into_iter()
            .chain(per.into_iter().map(fmt_f64))
            .collect()
    });
    write_table(path, &header, rows)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

fn plotdata(a: PlotArgs) -> Result<()> {
    prepare_out(&a.out)?;
    let store = DrawStore::load(&a.store)?;
    if store.is_empty() {
        return Err(FsvError::Contract("store holds no draws".into()));
    }
    let (m, r) = (store.meta.n_series, store.meta.n_factors);
    let rows = store.snapshots.iter().enumerate().flat_map(|(k, s)| {
        (0..m).flat_map(move |i| {
            (0..r).map(move |j| {
                vec![
                    k.to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    fmt_f64(s.loadings[(i, j)]),
                ]
            })
        })
    });
    write_table(
        &a.out.join("loadings.csv"),
        &strings(&["draw", "series", "factor", "value"]),
        rows,
    )?;

    let first = store.meta.first_state;
    for (name, n_rows, pick) in [
        (
            "logvar_idio.csv",
            m,
            (|s: &crate::store::Snapshot| &s.idio_logvar)
                as fn(&crate::store::Snapshot) -> &DMatrix<f64>,
        ),
        ("logvar_factor.csv", r, |s: &crate::store::Snapshot| {
            &s.factor_logvar
        }),
    ] {
        let n_cols = pick(&store.snapshots[0]).ncols();
        let mut rows = Vec::with_capacity(n_rows * n_cols);
        for i in 0..n_rows {
            for c in 0..n_cols {
                let mut v: Vec<f64> = store.snapshots.iter().map(|s| pick(s)[(i, c)]).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.sort_by(f64::total_cmp);
                rows.push(vec![
                    (first + c).to_string(),
                    (i + 1).to_string(),
                    fmt_f64(mean),
                    fmt_f64(quantile(&v, 0.05)),
                    fmt_f64(quantile(&v, 0.5)),
                    fmt_f64(quantile(&v, 0.95)),
                ]);
            }
        }
        write_table(
            &a.out.join(name),
            &strings(&["state", "series", "mean", "q05", "q50", "q95"]),
            rows,
        )?;
    }

    let n = store.meta.n_dates;
    let dates = if a.dates.is_empty() {
        let lo = first.max(1);
        let mut d = vec![lo, (lo + n) / 2, n];
        d.dedup();
        d
    } else {
        a.dates.clone()
    };
    for t in dates {
        let mut acc = DMatrix::zeros(m, m);
        for k in 0..store.len() {
            acc += correlation_from_covariance(&store.covariance(k, t)?)?;
        }
        acc /= store.len() as f64;
        let header: Vec<String> = std::iter::once("series".to_string())
            .chain(store.meta.series_labels.iter().cloned())
            .collect();
        let rows = (0..m).map(|i| {
            std::iter::once(store.meta.series_labels[i].clone())
                .chain(acc.row(i).iter().map(|&v| fmt_f64(v)))
                .collect()
        });
        write_table(&a.out.join(format!("correlation_t{t}.csv")), &header, rows)?;
    }
    write_communalities(&store, &a.out.join("communalities.csv"))?;
    println!("plot data written to {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_rejected() {
        assert_ne!(cli_dispatch(["facsv", "fit", "--bogus"]), 0);
        assert_ne!(
            cli_dispatch([
                "facsv",
                "fit",
                "--data",
                "/nonexistent.csv",
                "--out",
                "/tmp/facsv-none"
            ]),
            0
        );
    }
}
