//! Run modes behind the command-line tool and their reports.
//!
//! Every run writes a JSON report with a `canonical` section (inputs echo,
//! profile summary, results) that is byte-stable for a fixed config, and a
//! `timing` section with wall-clock seconds per stage. A CSV of per-client
//! tuples is written next to it with the `.csv` extension.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::client_game::{
    best_response, client_utility, delta_u, fixed_point_residual, nash_solve, perf_impact, perf_impact_derivative,
    perf_impact_second_derivative, thresholds, uniqueness_check, EquilibriumResult, NashConfig, UniquenessReport,
};
use crate::embedding::{KernelSpec, SamplePoint};
use crate::error::{Error, Result};
use crate::oracle::{
    finite_difference, grid_best_response, grid_nash, lemma1_check, second_difference, DiscreteDomain, OracleConfig,
};
use crate::par;
use crate::scenario::{build_profile, load_config, validate_config, GameProfile, ScenarioConfig};
use crate::server_opt::{haipo, metric_bounds, uniform_baseline, HaipoResult, MetricsReport, SolverConfig};

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_INTEGRITY: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Nash,
    Haipo,
    Uniform,
    Sweep,
    OracleSuite,
}

/// A fully specified run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    pub mode: Mode,
    pub config_path: PathBuf,
    /// JSON report path; the CSV goes to the same path with `.csv`.
    pub out_path: PathBuf,
    /// Payments for `nash` mode; zero payments when absent.
    pub payment_override: Option<Vec<f64>>,
    /// Config field swept in `sweep` mode; defaults to `dirichlet_beta`.
    pub sweep_key: Option<String>,
    /// Defaults to `0.2, 0.5, 0.8`.
    pub sweep_values: Option<Vec<f64>>,
    pub seed_override: Option<u64>,
    pub epsilon: Option<f64>,
    pub budget_override: Option<f64>,
    pub grid_points: Option<usize>,
    pub quiet: bool,
}

impl RunRequest {
    pub fn new(mode: Mode, config_path: impl Into<PathBuf>, out_path: impl Into<PathBuf>) -> Self {
        RunRequest {
            mode,
            config_path: config_path.into(),
            out_path: out_path.into(),
            payment_override: None,
            sweep_key: None,
            sweep_values: None,
            seed_override: None,
            epsilon: None,
            budget_override: None,
            grid_points: None,
            quiet: true,
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConvergence(_) => EXIT_NONCONVERGENCE,
        Error::NumericalIntegrity(_) | Error::DegenerateState(_) => EXIT_INTEGRITY,
        Error::InvalidInput(_)
        | Error::DimensionMismatch { .. }
        | Error::DegenerateBandwidth(_)
        | Error::Config { .. }
        | Error::Io(_)
        | Error::Json(_) => EXIT_CONFIG,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::DegenerateBandwidth(_) => "degenerate_bandwidth",
        Error::NumericalIntegrity(_) => "numerical_integrity",
        Error::DegenerateState(_) => "degenerate_state",
        Error::NonConvergence(_) => "non_convergence",
        Error::Config { .. } => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Per-client summary of a game instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub alpha: Vec<f64>,
    pub cost: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: f64,
    pub budget: f64,
    /// `|mu_i - mu_j|_H` among remaining clients.
    pub distance_matrix: Vec<Vec<f64>>,
    /// `|mu_i - mu_R|_H`; absent when no client is removed.
    pub het_to_removed: Option<Vec<f64>>,
}

pub fn profile_summary(g: &GameProfile) -> Result<ProfileSummary> {
    let n = g.num_clients();
    let distance_matrix = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| Ok(g.client_dist_sq(i, j)?.sqrt()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProfileSummary {
        alpha: g.alphas().to_vec(),
        cost: g.costs().to_vec(),
        delta: g.clients().iter().map(|c| c.delta).collect(),
        gamma: g.gamma(),
        budget: g.budget(),
        distance_matrix,
        het_to_removed: g.heterogeneity_to_removed()?,
    })
}

/// Average ranks (1-based); ties share the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks; `None` if either input is
/// constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Rank correlations of equilibrium participation with client features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub participation_vs_alpha: Option<f64>,
    pub participation_vs_het_to_removed: Option<f64>,
}

pub fn correlations(g: &GameProfile, x: &[f64]) -> Result<Correlations> {
    let het = g.heterogeneity_to_removed()?;
    Ok(Correlations {
        participation_vs_alpha: spearman(x, g.alphas()),
        participation_vs_het_to_removed: het.and_then(|h| spearman(x, &h)),
    })
}

/// Side-by-side optimizer and uniform-price results on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub haipo: HaipoResult,
    pub uniform: HaipoResult,
    pub haipo_metrics: MetricsReport,
    pub uniform_metrics: MetricsReport,
    /// `haipo.server_utility - uniform.server_utility`
    pub utility_gap: f64,
    pub haipo_correlations: Correlations,
    pub uniform_correlations: Correlations,
}

pub fn compare_modes(g: &GameProfile, cfg: &SolverConfig) -> Result<Comparison> {
    let h = haipo(g, cfg)?;
    let u = uniform_baseline(g, cfg)?;
    Ok(Comparison {
        haipo_metrics: metric_bounds(g, &h.x_star)?,
        uniform_metrics: metric_bounds(g, &u.x_star)?,
        utility_gap: h.server_utility - u.server_utility,
        haipo_correlations: correlations(g, &h.x_star)?,
        uniform_correlations: correlations(g, &u.x_star)?,
        haipo: h,
        uniform: u,
    })
}

/// One row of the per-client CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct CsvRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep_value: Option<f64>,
    client_id: usize,
    alpha: f64,
    cost: f64,
    het_to_removed: Option<f64>,
    payment: f64,
    participation: f64,
    q_bound: f64,
}

fn csv_rows(g: &GameProfile, p: &[f64], x: &[f64], sweep_value: Option<f64>) -> Result<Vec<CsvRow>> {
    let het = g.heterogeneity_to_removed()?;
    let q = metric_bounds(g, x)?.q_bounds;
    Ok((0..g.num_clients())
        .map(|i| CsvRow {
            sweep_value,
            client_id: i,
            alpha: g.alphas()[i],
            cost: g.costs()[i],
            het_to_removed: het.as_ref().map(|h| h[i]),
            payment: p[i],
            participation: x[i],
            q_bound: q[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct NashOutput {
    payments: Vec<f64>,
    equilibrium: EquilibriumResult,
    uniqueness: UniquenessReport,
    correlations: Correlations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SweepEntry {
    key: String,
    value: f64,
    profile: ProfileSummary,
    comparison: Comparison,
}

/// Outcome of one named self-check in `oracle-suite` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

struct Outcome {
    mode_output: Value,
    profile: Option<ProfileSummary>,
    metrics: Option<MetricsReport>,
    rows: Vec<CsvRow>,
    converged: bool,
    integrity_ok: bool,
}

#[derive(Serialize)]
struct Canonical<'a> {
    mode: Mode,
    config: &'a ScenarioConfig,
    solver: &'a SolverConfig,
    profile: Option<ProfileSummary>,
    result: Value,
    metrics_at_equilibrium: Option<MetricsReport>,
    exit_code: i32,
}

#[derive(Serialize)]
struct Report<'a> {
    canonical: Canonical<'a>,
    timing: BTreeMap<String, f64>,
}

/// Scenario config after command-line overrides.
pub fn effective_config(req: &RunRequest) -> Result<ScenarioConfig> {
    let mut cfg = load_config(&req.config_path)?;
    if let Some(seed) = req.seed_override {
        cfg.seed = seed;
    }
    if let Some(b) = req.budget_override {
        cfg.budget = b;
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

/// Solver config after command-line overrides.
pub fn effective_solver(req: &RunRequest) -> Result<SolverConfig> {
    let mut s = SolverConfig::default();
    if let Some(e) = req.epsilon {
        s.epsilon = e;
    }
    s.validate().map_err(|e| Error::config("epsilon", e.to_string()))?;
    Ok(s)
}

/// CSV path paired with a report path.
pub fn csv_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

/// Executes a request and returns the process exit code. Errors are printed
/// to standard error as one JSON object.
pub fn run(req: &RunRequest) -> i32 {
    match run_inner(req) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            let msg = serde_json::json!({
                "error": error_kind(&e),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{msg}");
            code
        }
    }
}

fn run_inner(req: &RunRequest) -> Result<i32> {
    if req.out_path.as_os_str().is_empty() {
        return Err(Error::config("out", "output path is empty"));
    }
    let mut timing = BTreeMap::new();
    let t0 = Instant::now();
    let cfg = effective_config(req)?;
    let solver = effective_solver(req)?;
    timing.insert("config".to_owned(), t0.elapsed().as_secs_f64());

    let outcome = match req.mode {
        Mode::Nash => run_nash(req, &cfg, &solver, &mut timing)?,
        Mode::Haipo => run_haipo(&cfg, &solver, &mut timing)?,
        Mode::Uniform => run_uniform(&cfg, &solver, &mut timing)?,
        Mode::Sweep => run_sweep(req, &cfg, &solver, &mut timing)?,
        Mode::OracleSuite => run_oracles(req, &cfg, &mut timing)?,
    };
    let code = if !outcome.integrity_ok {
        EXIT_INTEGRITY
    } else if !outcome.converged {
        EXIT_NONCONVERGENCE
    } else {
        EXIT_OK
    };

    let report = Report {
        canonical: Canonical {
            mode: req.mode,
            config: &cfg,
            solver: &solver,
            profile: outcome.profile,
            result: outcome.mode_output,
            metrics_at_equilibrium: outcome.metrics,
            exit_code: code,
        },
        timing,
    };
    if let Some(dir) = req.out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&req.out_path, text)?;
    write_csv(&csv_path(&req.out_path), &outcome.rows, req.mode == Mode::Sweep)?;
    if !req.quiet {
        println!(
            "{}: wrote {} (exit {code})",
            serde_json::to_value(req.mode)?.as_str().unwrap_or("run"),
            req.out_path.display()
        );
    }
    Ok(code)
}

/// Parses the `canonical` section of a written report.
pub fn canonical_section(report_json: &str) -> Result<String> {
    let v: Value = serde_json::from_str(report_json)?;
    Ok(serde_json::to_string(&v["canonical"])?)
}

fn write_csv(path: &Path, rows: &[CsvRow], sweep: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    let mut header = vec![];
    if sweep {
        header.push("sweep_value");
    }
    header.extend([
        "client_id",
        "alpha",
        "cost",
        "het_to_removed",
        "payment",
        "participation",
        "q_bound",
    ]);
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn timed<T>(timing: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    timing.insert(stage.to_owned(), t.elapsed().as_secs_f64());
    Ok(out)
}

fn run_nash(
    req: &RunRequest,
    cfg: &ScenarioConfig,
    solver: &SolverConfig,
    timing: &mut BTreeMap<String, f64>,
) -> Result<Outcome> {
    let g = timed(timing, "scenario", || build_profile(cfg))?;
    let p = match &req.payment_override {
        Some(p) => {
            if p.len() != g.num_clients() {
                return Err(Error::config(
                    "payments",
                    format!("expected {} payments, got {}", g.num_clients(), p.len()),
                ));
            }
            p.clone()
        }
        None => vec![0.0; g.num_clients()],
    };
    let eq = timed(timing, "nash", || nash_solve(&g, &p, &solver.nash))?;
    let out = NashOutput {
        payments: p.clone(),
        uniqueness: uniqueness_check(&g, &p)?,
        correlations: correlations(&g, &eq.x_star)?,
        equilibrium: eq.clone(),
    };
    Ok(Outcome {
        mode_output: serde_json::to_value(&out)?,
        profile: Some(profile_summary(&g)?),
        metrics: Some(metric_bounds(&g, &eq.x_star)?),
        rows: csv_rows(&g, &p, &eq.x_star, None)?,
        converged: eq.converged,
        integrity_ok: true,
    })
}

fn run_haipo(cfg: &ScenarioConfig, solver: &SolverConfig, timing: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    let g = timed(timing, "scenario", || build_profile(cfg))?;
    let cmp = timed(timing, "optimize", || compare_modes(&g, solver))?;
    Ok(Outcome {
        profile: Some(profile_summary(&g)?),
        metrics: Some(cmp.haipo_metrics.clone()),
        rows: csv_rows(&g, &cmp.haipo.p_star, &cmp.haipo.x_star, None)?,
        converged: cmp.haipo.converged,
        integrity_ok: true,
        mode_output: serde_json::to_value(&cmp)?,
    })
}

fn run_uniform(cfg: &ScenarioConfig, solver: &SolverConfig, timing: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    let g = timed(timing, "scenario", || build_profile(cfg))?;
    let u = timed(timing, "optimize", || uniform_baseline(&g, solver))?;
    Ok(Outcome {
        profile: Some(profile_summary(&g)?),
        metrics: Some(metric_bounds(&g, &u.x_star)?),
        rows: csv_rows(&g, &u.p_star, &u.x_star, None)?,
        converged: u.converged,
        integrity_ok: true,
        mode_output: serde_json::to_value(&u)?,
    })
}

/// Config with `key` set to `value`, revalidated.
pub fn with_field(cfg: &ScenarioConfig, key: &str, value: f64) -> Result<ScenarioConfig> {
    let mut v = serde_json::to_value(cfg)?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    if !obj.contains_key(key) || key == "client_deltas" {
        return Err(Error::config(key, "not a sweepable config field"));
    }
    let integral = matches!(
        key,
        "num_remaining" | "num_removed" | "num_classes" | "points_per_class_cap" | "feature_dim" | "seed"
    );
    let num = if integral {
        if value < 0.0 || value.fract() != 0.0 {
            return Err(Error::config(
                key,
                format!("expects a nonnegative integer, got {value}"),
            ));
        }
        Value::from(value as u64)
    } else {
        serde_json::Number::from_f64(value)
            .map(Value::Number)
            .ok_or_else(|| Error::config(key, "value must be finite"))?
    };
    obj.insert(key.to_owned(), num);
    let out: ScenarioConfig = serde_json::from_value(v).map_err(|e| Error::config(key, e.to_string()))?;
    validate_config(&out)?;
    Ok(out)
}

fn run_sweep(
    req: &RunRequest,
    cfg: &ScenarioConfig,
    solver: &SolverConfig,
    timing: &mut BTreeMap<String, f64>,
) -> Result<Outcome> {
    let key = req.sweep_key.clone().unwrap_or_else(|| "dirichlet_beta".to_owned());
    let values = req.sweep_values.clone().unwrap_or_else(|| vec![0.2, 0.5, 0.8]);
    if values.is_empty() {
        return Err(Error::config("sweep_values", "no sweep values given"));
    }
    let cfgs = values
        .iter()
        .map(|&v| with_field(cfg, &key, v))
        .collect::<Result<Vec<_>>>()?;
    let entries = timed(timing, "sweep", || {
        par::map_slice(&cfgs, |c| -> Result<(GameProfile, Comparison)> {
            let g = build_profile(c)?;
            let cmp = compare_modes(&g, solver)?;
            Ok((g, cmp))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    let mut out = Vec::new();
    let mut converged = true;
    for ((g, cmp), &v) in entries.into_iter().zip(&values) {
        converged &= cmp.haipo.converged;
        rows.extend(csv_rows(&g, &cmp.haipo.p_star, &cmp.haipo.x_star, Some(v))?);
        out.push(SweepEntry {
            key: key.clone(),
            value: v,
            profile: profile_summary(&g)?,
            comparison: cmp,
        });
    }
    Ok(Outcome {
        mode_output: serde_json::to_value(&out)?,
        profile: None,
        metrics: None,
        rows,
        converged,
        integrity_ok: true,
    })
}

fn check(name: &str, errors: &[f64], tolerance: f64) -> OracleCheck {
    let worst = errors.iter().copied().fold(0.0, f64::max);
    OracleCheck {
        name: name.to_owned(),
        cases: errors.len(),
        worst,
        tolerance,
        passed: errors.iter().all(|e| *e <= tolerance),
    }
}

fn run_oracles(req: &RunRequest, cfg: &ScenarioConfig, timing: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    let g = timed(timing, "scenario", || build_profile(cfg))?;
    let grid_points = req.grid_points.unwrap_or(2001);
    let checks = timed(timing, "oracles", || oracle_checks(&g, cfg.seed, grid_points))?;
    let integrity_ok = checks.iter().all(|c| c.passed);
    let zeros = vec![0.0; g.num_clients()];
    let eq = nash_solve(&g, &zeros, &NashConfig::default())?;
    Ok(Outcome {
        mode_output: serde_json::to_value(&checks)?,
        profile: Some(profile_summary(&g)?),
        metrics: Some(metric_bounds(&g, &eq.x_star)?),
        rows: csv_rows(&g, &zeros, &eq.x_star, None)?,
        converged: true,
        integrity_ok,
    })
}

/// Closed forms against brute force on one instance.
pub fn oracle_checks(g: &GameProfile, seed: u64, grid_points: usize) -> Result<Vec<OracleCheck>> {
    let n = g.num_clients();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1.0 / (grid_points.max(2) - 1) as f64;
    let mut checks = Vec::new();

    let mut br_err = Vec::new();
    let mut d1_err = Vec::new();
    let mut d2_err = Vec::new();
    let mut cor_err = Vec::new();
    for k in 0..n {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let th = thresholds(g, k, &x)?;
        for i in 0..5 {
            let p = (th.p_low - 0.1 + (th.p_high - th.p_low + 0.2) * i as f64 / 4.0).max(0.0);
            let closed = best_response(g, k, p, &x)?;
            let grid = grid_best_response(g, k, p, &x, grid_points)?;
            br_err.push((closed - grid).abs() / step);
        }
        let f = |y: &[f64]| perf_impact(g, y, k).unwrap_or(f64::NAN);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        let mut xi = x.clone();
        xi[k] = xi[k].clamp(0.01, 0.99);
        d1_err.push(rel(
            perf_impact_derivative(g, &xi, k)?,
            finite_difference(f, &xi, k, 1e-5),
        ));
        d2_err.push(rel(
            perf_impact_second_derivative(g, &xi, k)?,
            second_difference(f, &xi, k, 1e-4),
        ));
        let (a, b) = (0.9, 0.3);
        let mut xa = x.clone();
        xa[k] = a;
        let mut xb = x.clone();
        xb[k] = b;
        let direct = perf_impact(g, &xa, k)? - perf_impact(g, &xb, k)?;
        cor_err.push((delta_u(g, k, a, b, &x)? - direct).abs());
    }
    checks.push(check("best_response_vs_grid (grid steps)", &br_err, 1.0));
    checks.push(check("impact_derivative_vs_fd (relative)", &d1_err, 1e-4));
    checks.push(check("impact_second_derivative_vs_fd (relative)", &d2_err, 1e-4));
    checks.push(check("delta_u_vs_direct (absolute)", &cor_err, 1e-10));

    let p: Vec<f64> = g.costs().iter().map(|c| c * rng.random_range(0.5..1.5)).collect();
    let eq = nash_solve(g, &p, &NashConfig::default())?;
    let fp = fixed_point_residual(g, &p, &eq.x_star)?;
    checks.push(check(
        "nash_fixed_point",
        &[if eq.converged { fp } else { f64::INFINITY }],
        1e-8,
    ));
    if n <= 3 {
        let pts = 201;
        let gx = grid_nash(g, &p, pts)?;
        let errs: Vec<f64> = gx
            .iter()
            .zip(&eq.x_star)
            .map(|(a, b)| (a - b).abs() * (pts - 1) as f64)
            .collect();
        checks.push(check("nash_vs_grid (grid steps)", &errs, 2.0));
    }
    let utility_ok: Vec<f64> = (0..n)
        .map(|k| {
            let u = client_utility(g, &eq.x_star, &p, k).unwrap_or(f64::NAN);
            if u.is_finite() {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    checks.push(check("client_utility_finite", &utility_ok, 0.0));

    let atoms: Vec<SamplePoint> = (0..20)
        .map(|_| SamplePoint::new(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
        .collect::<Result<_>>()?;
    let domain = DiscreteDomain::new(atoms)?;
    let kernel = KernelSpec::rbf(crate::embedding::median_heuristic(domain.atoms())?)?;
    let ocfg = OracleConfig::default();
    let mut slack = Vec::new();
    for _ in 0..5 {
        let d1 = random_simplex(&mut rng, 20);
        let d2 = random_simplex(&mut rng, 20);
        let out = lemma1_check(&d1, &d2, &domain, &kernel, &ocfg)?;
        slack.push((out.lhs - out.rhs).max(0.0));
    }
    checks.push(check("likelihood_bound (excess)", &slack, crate::oracle::LEMMA1_SLACK));
    Ok(checks)
}

fn random_simplex<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    crate::scenario::sample_dirichlet(rng, 1.0, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basic() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn sweep_field_replacement() {
        let cfg = ScenarioConfig::with_seed(1);
        assert_eq!(with_field(&cfg, "dirichlet_beta", 0.2).unwrap().dirichlet_beta, 0.2);
        assert_eq!(with_field(&cfg, "num_removed", 2.0).unwrap().num_removed, 2);
        assert!(with_field(&cfg, "num_removed", 2.5).is_err());
        assert!(with_field(&cfg, "nope", 1.0).is_err());
        assert!(with_field(&cfg, "dirichlet_beta", -1.0).is_err());
    }

    #[test]
    fn exit_code_taxonomy() {
        assert_eq!(exit_code(&Error::config("seed", "x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::NonConvergence("x".into())), EXIT_NONCONVERGENCE);
        assert_eq!(exit_code(&Error::NumericalIntegrity("x".into())), EXIT_INTEGRITY);
    }
}
