//! Server objective and payment optimization.
//!
//! The server's loss is
//! `u_server(x) = lambda_v_hat |mu(x) - mu_N|^2 + lambda_s_hat |mu(x) - mu_O|^2`
//! and its utility is `-u_server(x*(p)) - p^T x*(p)` subject to
//! `p^T x*(p) <= B`.
//!
//! [`haipo`] works in two stages. First each client gets a payment cap
//! `p_B,k` from its share of the budget. Then the optimizer repeatedly
//! linearizes `u_server` in the embedding around the current equilibrium and
//! minimizes the linearized loss plus payments over the box `[0, p_B]` with a
//! level-set search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client_game::{nash_solve, sweep_to_equilibrium, thresholds, NashConfig};
use crate::embedding::WeightedEmbedding;
use crate::error::{Error, Result};
use crate::par;
use crate::scenario::GameProfile;

/// Objective values closer than this are ties.
pub const TIE_TOL: f64 = 1e-12;

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Outer loop stops once `|p_{k+1} - p_k|_2 < epsilon`.
    pub epsilon: f64,
    pub max_iterations: usize,
    pub bisection_tol: f64,
    pub levelset_tol: f64,
    pub multistart_count: usize,
    pub search_seed: u64,
    pub nash: NashConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 1e-6,
            max_iterations: 100,
            bisection_tol: 1e-8,
            levelset_tol: 1e-6,
            multistart_count: 16,
            search_seed: 0,
            nash: NashConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("bisection_tol", self.bisection_tol),
            ("levelset_tol", self.levelset_tol),
            ("nash.tolerance", self.nash.tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be > 0")));
            }
        }
        if self.max_iterations < 1 || self.multistart_count < 1 || self.nash.max_iters < 1 {
            return Err(Error::InvalidInput("iteration and start counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Heterogeneity bounds on the unlearning metrics at a participation profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub v_bound: f64,
    pub s_bound: f64,
    pub q_bounds: Vec<f64>,
}

fn check_len(g: &GameProfile, v: &[f64], what: &str) -> Result<()> {
    if v.len() != g.num_clients() {
        return Err(Error::DimensionMismatch {
            expected: g.num_clients(),
            actual: v.len(),
        });
    }
    if v.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::InvalidInput(format!("{what} entries must be finite and >= 0")));
    }
    Ok(())
}

fn check_x(g: &GameProfile, x: &[f64]) -> Result<()> {
    check_len(g, x, "participation")?;
    if x.iter().any(|v| *v > 1.0) {
        return Err(Error::InvalidInput("participation levels must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `C |mu_N - mu(x)|^2`, `C |mu_O - mu(x)|^2` and `C |mu_i - mu(x)|^2 + delta_i`.
pub fn metric_bounds(g: &GameProfile, x: &[f64]) -> Result<MetricsReport> {
    check_x(g, x)?;
    let c = g.bound_constant();
    let mu = g.mixture(x);
    let t = g.table();
    let q_bounds = g
        .clients()
        .iter()
        .enumerate()
        .map(|(i, cl)| Ok(c * t.dist_sq(&g.client_embedding(i), &mu)? + cl.delta))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        v_bound: c * t.dist_sq(g.mu_n(), &mu)?,
        s_bound: c * t.dist_sq(g.mu_o(), &mu)?,
        q_bounds,
    })
}

fn u_server_at(g: &GameProfile, mu: &WeightedEmbedding) -> Result<f64> {
    let t = g.table();
    Ok(g.lambda_hat_v() * t.dist_sq(mu, g.mu_n())? + g.lambda_hat_s() * t.dist_sq(mu, g.mu_o())?)
}

/// Server loss `u_server(x)`.
pub fn u_server(g: &GameProfile, x: &[f64]) -> Result<f64> {
    check_x(g, x)?;
    u_server_at(g, &g.mixture(x))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Server utility `-u_server(x) - p^T x`.
pub fn server_utility(g: &GameProfile, x: &[f64], p: &[f64]) -> Result<f64> {
    check_len(g, p, "payment")?;
    Ok(-u_server(g, x)? - dot(p, x))
}

/// First-order model of `u_server` in the embedding around `mu0`.
#[derive(Debug, Clone)]
pub struct Linearization {
    mu0: Vec<f64>,
    u0: f64,
    /// `G (lambda_v_hat (mu0 - mu_N) + lambda_s_hat (mu0 - mu_O))`
    grad: Vec<f64>,
    alpha: Vec<f64>,
    index: Vec<usize>,
}

impl Linearization {
    pub fn new(g: &GameProfile, mu0: &WeightedEmbedding, u0: f64) -> Result<Self> {
        let m = g.table().base_count();
        if mu0.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: mu0.len(),
            });
        }
        let dir: Vec<f64> = (0..m)
            .map(|a| {
                let c0 = mu0.coefficients()[a];
                g.lambda_hat_v() * (c0 - g.mu_n().coefficients()[a])
                    + g.lambda_hat_s() * (c0 - g.mu_o().coefficients()[a])
            })
            .collect();
        let grad = (0..m)
            .map(|a| (0..m).map(|b| g.table().get(a, b) * dir[b]).sum())
            .collect();
        Ok(Linearization {
            mu0: mu0.coefficients().to_vec(),
            u0,
            grad,
            alpha: g.alphas().to_vec(),
            index: g.clients().iter().map(|c| c.embedding_index).collect(),
        })
    }

    /// `u0 + 2 <grad, mu(x) - mu0>`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let s: f64 = dot(&self.alpha, x);
        let w = |i: usize| {
            if s > 0.0 {
                self.alpha[i] * x[i] / s
            } else {
                self.alpha[i]
            }
        };
        let mut mu = vec![0.0; self.mu0.len()];
        for (i, &a) in self.index.iter().enumerate() {
            mu[a] = w(i);
        }
        let delta: f64 = self
            .grad
            .iter()
            .zip(mu.iter().zip(&self.mu0))
            .map(|(gr, (m, m0))| gr * (m - m0))
            .sum();
        self.u0 + 2.0 * delta
    }
}

/// Linearized server loss at `x` around `mu0` with anchor value `u0`.
pub fn linearized_u_server(g: &GameProfile, x: &[f64], mu0: &WeightedEmbedding, u0: f64) -> Result<f64> {
    check_x(g, x)?;
    Ok(Linearization::new(g, mu0, u0)?.eval(x))
}

/// Budget split `B_i = B alpha_i`.
pub fn budget_share(g: &GameProfile) -> Vec<f64> {
    g.alphas().iter().map(|a| g.budget() * a).collect()
}

/// Largest payment client `k` can be offered while its own spend stays in
/// its budget share: `sup { p >= 0 : p BR_k(p; x_{-k}) <= b_k }`.
///
/// `p BR_k(p)` is nondecreasing for `p >= 0`, so the feasible set is an
/// interval starting at zero and the endpoint is bracketed by
/// `[0, max(b_k, c_k)]`. The returned value is feasible and lies within
/// `bisection_tol` of the endpoint. With `b_k = 0` this is
/// `max(p_low_k, 0)`; for a client whose best response steps from 0 to 1 at
/// `c_k` it is `b_k` when `b_k > c_k` and `c_k` otherwise.
pub fn budget_bisection(g: &GameProfile, k: usize, b_k: f64, x: &[f64], cfg: &SolverConfig) -> Result<f64> {
    if !(b_k.is_finite() && b_k >= 0.0) {
        return Err(Error::InvalidInput(format!("budget share must be >= 0, got {b_k}")));
    }
    let feasible = |p: f64| -> Result<bool> { Ok(p * crate::client_game::best_response(g, k, p, x)? <= b_k) };
    let mut lo = 0.0;
    let mut hi = b_k.max(g.costs()[k]);
    if feasible(hi)? {
        return Ok(hi);
    }
    while hi - lo > cfg.bisection_tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Per-client payment caps against full participation of the others.
pub fn payment_bounds(g: &GameProfile, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let shares = budget_share(g);
    let ones = vec![1.0; g.num_clients()];
    par::map_range(g.num_clients(), |k| budget_bisection(g, k, shares[k], &ones, cfg))
        .into_iter()
        .collect()
}

/// `a` beats `b`: lower value, or a tie broken toward the lexicographically
/// smaller payment vector.
fn better(a_val: f64, a_p: &[f64], b_val: f64, b_p: &[f64]) -> bool {
    if a_val < b_val - TIE_TOL {
        return true;
    }
    if (a_val - b_val).abs() <= TIE_TOL {
        for (x, y) in a_p.iter().zip(b_p) {
            if x != y {
                return x < y;
            }
        }
    }
    false
}

/// Result of [`quasiconvex_min`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSetResult {
    pub p: Vec<f64>,
    pub value: f64,
    /// Final bracket `[t_lo, t_hi]` on the optimal level.
    pub bracket: (f64, f64),
    pub bisection_steps: usize,
    pub evaluations: usize,
}

const SCAN_POINTS: usize = 9;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// One coordinate-descent run.
#[derive(Debug, Clone)]
struct Descent {
    p: Vec<f64>,
    value: f64,
    coord: usize,
    idle: usize,
    searches: usize,
    done: bool,
}

impl Descent {
    /// Minimizes along the current coordinate; returns evaluations used.
    fn step<F>(&mut self, upper: &[f64], f: &F, tol: f64) -> usize
    where
        F: Fn(&[f64]) -> f64,
    {
        let c = self.coord;
        let n = self.p.len();
        let hi = upper[c];
        let mut evals = 0;
        let mut best_p = self.p.clone();
        let mut best_v = self.value;
        let mut trial = self.p.clone();
        let mut eval_at = |t: f64, evals: &mut usize| {
            trial[c] = t;
            *evals += 1;
            f(&trial)
        };
        if hi > 0.0 {
            let grid: Vec<f64> = (0..SCAN_POINTS)
                .map(|i| hi * i as f64 / (SCAN_POINTS - 1) as f64)
                .collect();
            let vals: Vec<f64> = grid.iter().map(|&t| eval_at(t, &mut evals)).collect();
            let mut bi = 0;
            for i in 1..SCAN_POINTS {
                if vals[i] < vals[bi] - TIE_TOL {
                    bi = i;
                }
            }
            let cand = |t: f64, v: f64, best_p: &mut Vec<f64>, best_v: &mut f64| {
                let mut q = best_p.clone();
                q[c] = t;
                if better(v, &q, *best_v, best_p) {
                    *best_p = q;
                    *best_v = v;
                }
            };
            for (t, v) in grid.iter().zip(&vals) {
                cand(*t, *v, &mut best_p, &mut best_v);
            }
            // golden section on the bracket around the best scan point, and
            // around the incumbent coordinate
            let step = hi / (SCAN_POINTS - 1) as f64;
            let mut centers = vec![grid[bi]];
            if (self.p[c] - grid[bi]).abs() > step {
                centers.push(self.p[c]);
            }
            // near a smooth minimum the values settle once the bracket is
            // sqrt(tol) wide; at a kink they keep differing, so go on to tol
            let coarse = tol.sqrt() * hi.max(1e-12);
            let fine = tol * hi.max(1e-12);
            for center in centers {
                let mut a = (center - step).max(0.0);
                let mut b = (center + step).min(hi);
                let mut x1 = b - INV_PHI * (b - a);
                let mut x2 = a + INV_PHI * (b - a);
                let mut f1 = eval_at(x1, &mut evals);
                let mut f2 = eval_at(x2, &mut evals);
                cand(x1, f1, &mut best_p, &mut best_v);
                cand(x2, f2, &mut best_p, &mut best_v);
                while b - a > fine && (b - a > coarse || (f1 - f2).abs() > tol) {
                    if f1 <= f2 {
                        b = x2;
                        x2 = x1;
                        f2 = f1;
                        x1 = b - INV_PHI * (b - a);
                        f1 = eval_at(x1, &mut evals);
                        cand(x1, f1, &mut best_p, &mut best_v);
                    } else {
                        a = x1;
                        x1 = x2;
                        f1 = f2;
                        x2 = a + INV_PHI * (b - a);
                        f2 = eval_at(x2, &mut evals);
                        cand(x2, f2, &mut best_p, &mut best_v);
                    }
                }
            }
        }
        if best_p != self.p && better(best_v, &best_p, self.value, &self.p) {
            // moves that gain less than the level tolerance still count as idle
            if self.value - best_v > tol {
                self.idle = 0;
            } else {
                self.idle += 1;
            }
            self.p = best_p;
            self.value = best_v;
        } else {
            self.idle += 1;
        }
        self.searches += 1;
        self.coord = (c + 1) % n;
        if self.idle >= n || self.searches >= MAX_SWEEPS * n {
            self.done = true;
        }
        evals
    }
}

const MAX_SWEEPS: usize = 20;

/// Minimizes `objective` over the box `[0, upper]` by bisection on the level
/// `t`.
///
/// Feasibility of `{p : objective(p) <= t}` is decided by seeded multistart
/// coordinate descent. Descent runs are resumed across bisection steps, so
/// each level test only continues the runs that have not converged yet.
/// Start 0 is `start`, start 1 the zero vector, the rest are uniform draws
/// from the box. Infeasible points should evaluate to `+inf`.
pub fn quasiconvex_min<F>(upper: &[f64], start: &[f64], objective: F, cfg: &SolverConfig) -> Result<LevelSetResult>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let n = upper.len();
    if n == 0 || start.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: start.len(),
        });
    }
    if upper.iter().any(|u| !u.is_finite() || *u < 0.0) {
        return Err(Error::InvalidInput("box bounds must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.search_seed);
    let mut starts: Vec<Vec<f64>> = vec![start.iter().zip(upper).map(|(s, u)| s.clamp(0.0, *u)).collect()];
    if cfg.multistart_count > 1 {
        starts.push(vec![0.0; n]);
    }
    while starts.len() < cfg.multistart_count {
        starts.push(upper.iter().map(|u| u * rng.random::<f64>()).collect());
    }
    let values = par::map_slice(&starts, |p| objective(p));
    let mut evaluations = starts.len();
    let mut runs: Vec<Descent> = starts
        .into_iter()
        .zip(values)
        .map(|(p, value)| Descent {
            p,
            value,
            coord: 0,
            idle: 0,
            searches: 0,
            done: false,
        })
        .collect();

    // upper level: worst sampled corner or the incumbent
    let corner_count = if n <= 10 { 1usize << n } else { 1024 };
    let corners: Vec<Vec<f64>> = (0..corner_count)
        .map(|mask| {
            if n <= 10 {
                (0..n)
                    .map(|i| if mask >> i & 1 == 1 { upper[i] } else { 0.0 })
                    .collect()
            } else {
                upper
                    .iter()
                    .map(|u| if rng.random::<bool>() { *u } else { 0.0 })
                    .collect()
            }
        })
        .collect();
    let corner_vals = par::map_slice(&corners, |p| objective(p));
    evaluations += corners.len();

    let best_of = |runs: &[Descent]| -> (Vec<f64>, f64) {
        let mut bp = runs[0].p.clone();
        let mut bv = runs[0].value;
        for r in &runs[1..] {
            if better(r.value, &r.p, bv, &bp) {
                bp = r.p.clone();
                bv = r.value;
            }
        }
        (bp, bv)
    };
    let (mut best_p, mut best_v) = best_of(&runs);
    for (c, v) in corners.iter().zip(&corner_vals) {
        if better(*v, c, best_v, &best_p) {
            best_p = c.clone();
            best_v = *v;
        }
    }
    if !best_v.is_finite() {
        return Err(Error::InvalidInput(
            "objective is infeasible at every start and corner".into(),
        ));
    }
    let t_top = corner_vals
        .iter()
        .chain(runs.iter().map(|r| &r.value))
        .copied()
        .filter(|v| v.is_finite())
        .fold(best_v, f64::max);
    let span = t_top - best_v;
    let mut lo = best_v - span;
    let mut hi = best_v;
    let mut steps = 0;
    if span > 0.0 {
        while hi - lo > cfg.levelset_tol {
            steps += 1;
            let t = 0.5 * (lo + hi);
            let reached = loop {
                if runs.iter().any(|r| r.value <= t) {
                    break true;
                }
                if runs.iter().all(|r| r.done) {
                    break false;
                }
                let mut active: Vec<Descent> = runs.iter().filter(|r| !r.done).cloned().collect();
                let used = step_all(&mut active, upper, &objective, cfg.levelset_tol);
                evaluations += used;
                let mut it = active.into_iter();
                for r in runs.iter_mut().filter(|r| !r.done) {
                    *r = it.next().expect("one result per active run");
                }
            };
            if reached {
                hi = runs.iter().map(|r| r.value).fold(f64::INFINITY, f64::min).min(t);
            } else {
                lo = t;
            }
        }
    }
    let (rp, rv) = best_of(&runs);
    if better(rv, &rp, best_v, &best_p) {
        best_p = rp;
        best_v = rv;
    }
    Ok(LevelSetResult {
        p: best_p,
        value: best_v,
        bracket: (lo, hi.max(lo)),
        bisection_steps: steps,
        evaluations,
    })
}

#[cfg(feature = "parallel")]
fn step_all<F>(runs: &mut [Descent], upper: &[f64], f: &F, tol: f64) -> usize
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    use rayon::prelude::*;
    runs.par_iter_mut()
        .map(|r| r.step(upper, f, tol))
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

#[cfg(not(feature = "parallel"))]
fn step_all<F>(runs: &mut [Descent], upper: &[f64], f: &F, tol: f64) -> usize
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    runs.iter_mut().map(|r| r.step(upper, f, tol)).sum()
}

/// One outer iteration of [`haipo`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub p: Vec<f64>,
    pub x: Vec<f64>,
    /// Linearized loss plus payments at `p`, under the model built at the
    /// previous iterate.
    pub objective: f64,
    pub server_utility: f64,
    pub payment_total: f64,
    pub accepted: bool,
}

/// Outcome of [`haipo`] or [`uniform_baseline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaipoResult {
    pub p_star: Vec<f64>,
    pub x_star: Vec<f64>,
    pub server_utility: f64,
    pub u_server_term: f64,
    pub payment_total: f64,
    pub budget_bounds: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
}

/// Equilibrium, true utility and spend at `p`, or `None` when the game does
/// not settle or the spend exceeds the budget.
struct Evaluation {
    x: Vec<f64>,
    utility: f64,
    spend: f64,
}

fn evaluate(g: &GameProfile, p: &[f64], nash: &NashConfig) -> Result<Option<Evaluation>> {
    let eq = sweep_to_equilibrium(g, p, nash)?;
    if !eq.converged {
        return Ok(None);
    }
    let spend = dot(p, &eq.x_star);
    if spend > g.budget() {
        return Ok(None);
    }
    let utility = server_utility(g, &eq.x_star, p)?;
    Ok(Some(Evaluation {
        x: eq.x_star,
        utility,
        spend,
    }))
}

const MAX_HALVINGS: usize = 60;
const MAX_BACKTRACKS: usize = 10;

/// Heterogeneity-aware incremental payment optimization.
///
/// Stage 1 caps each client's payment by [`payment_bounds`]. Stage 2 starts
/// from the midpoint of each client's threshold payments (halved until the
/// budget holds) and alternates equilibrium solving with minimization of
/// `linearized u_server + p^T x*(p)` over the box. A new iterate is accepted
/// only if it raises the true server utility; otherwise the step toward it is
/// halved a few times before the loop stops. The loop also stops once the
/// payment change is below `epsilon` or the utility gain of an accepted step
/// is below `epsilon (1 + |U|)`.
pub fn haipo(g: &GameProfile, cfg: &SolverConfig) -> Result<HaipoResult> {
    cfg.validate()?;
    let n = g.num_clients();
    let bounds = payment_bounds(g, cfg)?;
    let ones = vec![1.0; n];
    let mut p: Vec<f64> = (0..n)
        .map(|k| {
            let th = thresholds(g, k, &ones)?;
            Ok((0.5 * (th.p_low + th.p_high)).clamp(0.0, bounds[k]))
        })
        .collect::<Result<_>>()?;

    let mut trace = Vec::new();
    let mut current = None;
    for _ in 0..MAX_HALVINGS {
        if let Some(ev) = evaluate(g, &p, &cfg.nash)? {
            current = Some(ev);
            break;
        }
        p.iter_mut().for_each(|v| *v *= 0.5);
    }
    let mut current = match current {
        Some(ev) => ev,
        None => {
            p = vec![0.0; n];
            match evaluate(g, &p, &cfg.nash)? {
                Some(ev) => ev,
                None => return unsettled(g, p, bounds, trace, &cfg.nash),
            }
        }
    };
    trace.push(TraceEntry {
        iteration: 0,
        p: p.clone(),
        x: current.x.clone(),
        objective: u_server(g, &current.x)? + current.spend,
        server_utility: current.utility,
        payment_total: current.spend,
        accepted: true,
    });

    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mu0 = g.mixture(&current.x);
        let u0 = u_server(g, &current.x)?;
        let lin = Linearization::new(g, &mu0, u0)?;
        let nash = &cfg.nash;
        let budget = g.budget();
        let objective = |q: &[f64]| -> f64 {
            match sweep_to_equilibrium(g, q, nash) {
                Ok(eq) if eq.converged => {
                    let spend = dot(q, &eq.x_star);
                    if spend > budget {
                        f64::INFINITY
                    } else {
                        lin.eval(&eq.x_star) + spend
                    }
                }
                _ => f64::INFINITY,
            }
        };
        let found = quasiconvex_min(&bounds, &p, objective, cfg)?;

        let mut accepted = None;
        let mut t = 1.0;
        for _ in 0..=MAX_BACKTRACKS {
            let cand: Vec<f64> = p.iter().zip(&found.p).map(|(a, b)| a + t * (b - a)).collect();
            if let Some(ev) = evaluate(g, &cand, &cfg.nash)? {
                let gain = ev.utility - current.utility;
                let no_worse = gain > TIE_TOL || (gain.abs() <= TIE_TOL && better(0.0, &cand, 0.0, &p));
                trace.push(TraceEntry {
                    iteration: iterations,
                    p: cand.clone(),
                    x: ev.x.clone(),
                    objective: objective(&cand),
                    server_utility: ev.utility,
                    payment_total: ev.spend,
                    accepted: no_worse,
                });
                if no_worse {
                    accepted = Some((cand, ev));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, ev)) = accepted else {
            converged = true;
            break;
        };
        let step: f64 = next.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let gain = ev.utility - current.utility;
        let stalled = gain <= cfg.epsilon * (1.0 + current.utility.abs());
        p = next;
        current = ev;
        if step < cfg.epsilon || stalled {
            converged = true;
            break;
        }
    }

    Ok(HaipoResult {
        u_server_term: u_server(g, &current.x)?,
        server_utility: current.utility,
        payment_total: current.spend,
        x_star: current.x,
        p_star: p,
        budget_bounds: bounds,
        iterations,
        converged,
        trace,
    })
}

/// Result for a start point where the game never settles.
fn unsettled(
    g: &GameProfile,
    p: Vec<f64>,
    bounds: Vec<f64>,
    trace: Vec<TraceEntry>,
    nash: &NashConfig,
) -> Result<HaipoResult> {
    let eq = nash_solve(g, &p, nash)?;
    Ok(HaipoResult {
        u_server_term: u_server(g, &eq.x_star)?,
        server_utility: server_utility(g, &eq.x_star, &p)?,
        payment_total: dot(&p, &eq.x_star),
        x_star: eq.x_star,
        p_star: p,
        budget_bounds: bounds,
        iterations: 0,
        converged: false,
        trace,
    })
}

const UNIFORM_SCAN: usize = 201;

/// Best single price `q` offered to every client, searched over
/// `[0, max_k p_B,k]` by a scan refined with golden section.
pub fn uniform_baseline(g: &GameProfile, cfg: &SolverConfig) -> Result<HaipoResult> {
    cfg.validate()?;
    let n = g.num_clients();
    let bounds = payment_bounds(g, cfg)?;
    let q_max = bounds.iter().copied().fold(0.0, f64::max);
    let util =
        |q: f64| -> Result<f64> { Ok(evaluate(g, &vec![q; n], &cfg.nash)?.map_or(f64::NEG_INFINITY, |e| e.utility)) };
    let grid: Vec<f64> = (0..UNIFORM_SCAN)
        .map(|i| q_max * i as f64 / (UNIFORM_SCAN - 1) as f64)
        .collect();
    let vals: Vec<f64> = par::map_slice(&grid, |&q| util(q)).into_iter().collect::<Result<_>>()?;
    let mut bi = 0;
    for i in 1..UNIFORM_SCAN {
        if vals[i] > vals[bi] + TIE_TOL {
            bi = i;
        }
    }
    let mut best_q = grid[bi];
    let mut best_u = vals[bi];
    let mut evaluations = UNIFORM_SCAN;
    if q_max > 0.0 {
        let mut a = grid[bi.saturating_sub(1)];
        let mut b = grid[(bi + 1).min(UNIFORM_SCAN - 1)];
        let mut x1 = b - INV_PHI * (b - a);
        let mut x2 = a + INV_PHI * (b - a);
        let mut f1 = util(x1)?;
        let mut f2 = util(x2)?;
        let consider = |q: f64, u: f64, bq: &mut f64, bu: &mut f64| {
            if u > *bu + TIE_TOL || ((u - *bu).abs() <= TIE_TOL && q < *bq) {
                *bq = q;
                *bu = u;
            }
        };
        consider(x1, f1, &mut best_q, &mut best_u);
        consider(x2, f2, &mut best_q, &mut best_u);
        while b - a > cfg.levelset_tol * q_max {
            if f1 >= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - INV_PHI * (b - a);
                f1 = util(x1)?;
                consider(x1, f1, &mut best_q, &mut best_u);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + INV_PHI * (b - a);
                f2 = util(x2)?;
                consider(x2, f2, &mut best_q, &mut best_u);
            }
            evaluations += 1;
        }
    }
    let p = vec![best_q; n];
    let eq = nash_solve(g, &p, &cfg.nash)?;
    let spend = dot(&p, &eq.x_star);
    let utility = server_utility(g, &eq.x_star, &p)?;
    Ok(HaipoResult {
        u_server_term: u_server(g, &eq.x_star)?,
        server_utility: utility,
        payment_total: spend,
        trace: vec![TraceEntry {
            iteration: 0,
            p: p.clone(),
            x: eq.x_star.clone(),
            objective: -utility,
            server_utility: utility,
            payment_total: spend,
            accepted: true,
        }],
        x_star: eq.x_star,
        p_star: p,
        budget_bounds: bounds,
        iterations: evaluations,
        converged: eq.converged && spend <= g.budget(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::InnerProductTable;
    use crate::scenario::{ClientProfile, ProfileParts};
    use approx::assert_relative_eq;

    fn game(rows: Vec<Vec<f64>>, alpha: &[f64], cost: &[f64], budget: f64) -> GameProfile {
        let clients = alpha
            .iter()
            .zip(cost)
            .enumerate()
            .map(|(i, (&alpha, &cost))| ClientProfile {
                alpha,
                cost,
                delta: 0.1 * i as f64,
                embedding_index: i,
            })
            .collect();
        GameProfile::new(ProfileParts {
            clients,
            table: InnerProductTable::from_rows(rows).unwrap(),
            mu_o: None,
            mu_r: None,
            lambda_v: 1.0,
            lambda_s: 1.0,
            lambda_q: 1.0,
            bound_constant: 1.0,
            budget,
            gamma: 1.0,
        })
        .unwrap()
    }

    fn homogeneous(n: usize, budget: f64) -> GameProfile {
        game(vec![vec![1.0; n]; n], &vec![1.0 / n as f64; n], &vec![0.5; n], budget)
    }

    #[test]
    fn budget_share_partitions() {
        let g = game(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &[0.75, 0.25], &[1.0, 1.0], 10.0);
        assert_eq!(budget_share(&g), vec![7.5, 2.5]);
        assert_eq!(budget_share(&g.with_budget(0.0).unwrap()), vec![0.0, 0.0]);
    }

    #[test]
    fn metric_bounds_at_full_participation() {
        let g = homogeneous(3, 1.0);
        let m = metric_bounds(&g, &[1.0; 3]).unwrap();
        assert_eq!(m.v_bound, 0.0);
        assert_eq!(m.s_bound, 0.0);
        assert_relative_eq!(m.q_bounds[2], 0.2);
    }

    #[test]
    fn homogeneous_payment_caps_follow_the_step() {
        let g = homogeneous(2, 2.0);
        let cfg = SolverConfig::default();
        let ones = [1.0, 1.0];
        // share 1.0 > c = 0.5
        assert_relative_eq!(budget_bisection(&g, 0, 1.0, &ones, &cfg).unwrap(), 1.0, epsilon = 1e-8);
        // share 0.2 <= c: cap sits at c
        assert_relative_eq!(budget_bisection(&g, 0, 0.2, &ones, &cfg).unwrap(), 0.5, epsilon = 1e-8);
        assert_relative_eq!(budget_bisection(&g, 0, 0.0, &ones, &cfg).unwrap(), 0.5, epsilon = 1e-8);
    }

    #[test]
    fn linearization_matches_at_anchor() {
        let g = game(vec![vec![1.0, 0.2], vec![0.2, 1.0]], &[0.6, 0.4], &[1.0, 1.0], 1.0);
        let x = [0.3, 0.8];
        let mu0 = g.mixture(&x);
        let u0 = u_server(&g, &x).unwrap();
        assert_relative_eq!(linearized_u_server(&g, &x, &mu0, u0).unwrap(), u0, epsilon = 1e-15);
    }

    #[test]
    fn homogeneous_haipo_pays_nothing() {
        let g = homogeneous(3, 2.0);
        let r = haipo(&g, &SolverConfig::default()).unwrap();
        assert!(r.p_star.iter().all(|p| *p == 0.0), "{:?}", r.p_star);
        assert_eq!(r.payment_total, 0.0);
        assert_eq!(r.server_utility, 0.0);
        let u = uniform_baseline(&g, &SolverConfig::default()).unwrap();
        assert_eq!(u.p_star, vec![0.0; 3]);
    }

    #[test]
    fn level_set_search_one_dimension() {
        let cfg = SolverConfig::default();
        let r = quasiconvex_min(&[2.0], &[1.5], |p: &[f64]| (p[0] - 0.7).abs(), &cfg).unwrap();
        assert!((r.p[0] - 0.7).abs() < 1e-5, "{:?}", r);
        let flat = quasiconvex_min(&[2.0, 1.0], &[1.0, 1.0], |_: &[f64]| 3.0, &cfg).unwrap();
        assert_eq!(flat.p, vec![0.0, 0.0]);
    }
}
