//! Brute-force and analytic cross-checks.
//!
//! Grid searches over participation and payment, central finite differences,
//! and a regularized exponential-family learner on a finite domain used to
//! test the log-likelihood bound in terms of embedding distance.

use serde::{Deserialize, Serialize};

use crate::client_game::{client_utility, nash_solve};
use crate::embedding::{kernel_eval, KernelSpec, SamplePoint};
use crate::error::{Error, Result};
use crate::par;
use crate::scenario::GameProfile;
use crate::server_opt::{payment_bounds, server_utility, SolverConfig};

/// Finite set of atoms with a uniform base measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDomain {
    atoms: Vec<SamplePoint>,
}

impl DiscreteDomain {
    pub fn new(atoms: Vec<SamplePoint>) -> Result<Self> {
        if atoms.len() < 2 {
            return Err(Error::InvalidInput("domain needs at least two atoms".into()));
        }
        for i in 0..atoms.len() {
            for j in (i + 1)..atoms.len() {
                if atoms[i] == atoms[j] {
                    return Err(Error::InvalidInput(format!("atoms {i} and {j} coincide")));
                }
            }
        }
        Ok(DiscreteDomain { atoms })
    }

    pub fn atoms(&self) -> &[SamplePoint] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Row-major atom Gram matrix.
    pub fn gram(&self, k: &KernelSpec) -> Result<Vec<f64>> {
        let m = self.atoms.len();
        let mut out = vec![0.0; m * m];
        for a in 0..m {
            for b in a..m {
                let v = kernel_eval(k, &self.atoms[a], &self.atoms[b])?;
                out[a * m + b] = v;
                out[b * m + a] = v;
            }
        }
        Ok(out)
    }
}

/// Oracle settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub reg_lambda: f64,
    pub fit_tol: f64,
    pub fit_max_iters: usize,
    pub grid_points: usize,
    pub fd_step: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            reg_lambda: 0.1,
            fit_tol: 1e-8,
            fit_max_iters: 100_000,
            grid_points: 201,
            fd_step: 1e-5,
        }
    }
}

/// Coefficients of `w = sum_a w_a k(., atom_a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParameter {
    pub w: Vec<f64>,
}

fn mat_vec(gram: &[f64], v: &[f64]) -> Vec<f64> {
    let m = v.len();
    (0..m)
        .map(|a| gram[a * m..(a + 1) * m].iter().zip(v).map(|(g, x)| g * x).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log sum_a exp(f_a) - log m` for function values `f`.
fn log_partition_of(f: &[f64]) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = f.iter().map(|v| (v - max).exp()).sum();
    max + s.ln() - (f.len() as f64).ln()
}

fn check_w(w: &NaturalParameter, domain: &DiscreteDomain) -> Result<()> {
    if w.w.len() != domain.len() {
        return Err(Error::DimensionMismatch {
            expected: domain.len(),
            actual: w.w.len(),
        });
    }
    if w.w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("natural parameter must be finite".into()));
    }
    Ok(())
}

/// Log-partition `A(w)` under the uniform base measure.
pub fn log_partition(w: &NaturalParameter, domain: &DiscreteDomain, k: &KernelSpec) -> Result<f64> {
    check_w(w, domain)?;
    Ok(log_partition_of(&mat_vec(&domain.gram(k)?, &w.w)))
}

/// `P_w(atom_a)` (normalized over atoms).
pub fn probabilities(w: &NaturalParameter, domain: &DiscreteDomain, k: &KernelSpec) -> Result<Vec<f64>> {
    check_w(w, domain)?;
    let f = mat_vec(&domain.gram(k)?, &w.w);
    let a = log_partition_of(&f);
    let m = f.len() as f64;
    Ok(f.iter().map(|v| (v - a).exp() / m).collect())
}

/// Fitted parameter and its stationarity certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub w: NaturalParameter,
    pub iterations: usize,
    /// `|grad A(w) - mu_target + lambda w|_H` at `w`.
    pub residual: f64,
}

fn check_target(target: &[f64], domain: &DiscreteDomain) -> Result<()> {
    if target.len() != domain.len() {
        return Err(Error::DimensionMismatch {
            expected: domain.len(),
            actual: target.len(),
        });
    }
    if target.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidInput("target must be nonnegative".into()));
    }
    let s: f64 = target.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("target sums to {s}, expected 1")));
    }
    Ok(())
}

struct FitState {
    w: Vec<f64>,
    objective: f64,
    /// Coefficient form of the functional gradient.
    r: Vec<f64>,
    grad_norm: f64,
}

fn fit_state(gram: &[f64], target: &[f64], lambda: f64, w: Vec<f64>) -> FitState {
    let kw = mat_vec(gram, &w);
    let a = log_partition_of(&kw);
    let m = w.len() as f64;
    let objective = a - dot(target, &kw) + 0.5 * lambda * dot(&w, &kw);
    let r: Vec<f64> = kw
        .iter()
        .zip(target)
        .zip(&w)
        .map(|((f, t), wi)| (f - a).exp() / m - t + lambda * wi)
        .collect();
    let kr = mat_vec(gram, &r);
    let grad_norm = dot(&r, &kr).max(0.0).sqrt();
    FitState {
        w,
        objective,
        r,
        grad_norm,
    }
}

const MAX_HALVINGS: usize = 30;

/// Minimizes `-E_target[log P_w] + (lambda/2) |w|_H^2` by functional
/// gradient descent with a capped backtracking line search.
///
/// Near the optimum round-off can make every trial step look like an ascent;
/// the step is then taken anyway at the smallest length tried, since the
/// convergence test is on the gradient norm rather than the objective.
pub fn expfam_fit(target: &[f64], domain: &DiscreteDomain, k: &KernelSpec, cfg: &OracleConfig) -> Result<FitResult> {
    check_target(target, domain)?;
    if !(cfg.reg_lambda.is_finite() && cfg.reg_lambda > 0.0) {
        return Err(Error::InvalidInput("reg_lambda must be > 0".into()));
    }
    let gram = domain.gram(k)?;
    let lambda = cfg.reg_lambda;
    let mut st = fit_state(&gram, target, lambda, vec![0.0; domain.len()]);
    let mut iterations = 0;
    let mut eta: f64 = 1.0;
    while st.grad_norm >= cfg.fit_tol {
        if iterations >= cfg.fit_max_iters {
            return Err(Error::NonConvergence(format!(
                "exponential-family fit: gradient norm {:e} after {iterations} iterations",
                st.grad_norm
            )));
        }
        iterations += 1;
        let mut step = eta.min(1.0 / lambda);
        let mut next = None;
        for _ in 0..MAX_HALVINGS {
            let w: Vec<f64> = st.w.iter().zip(&st.r).map(|(w, r)| w - step * r).collect();
            let cand = fit_state(&gram, target, lambda, w);
            let sufficient = st.objective - 0.5 * step * st.grad_norm * st.grad_norm;
            if cand.objective <= sufficient + 1e-15 * st.objective.abs().max(1.0) {
                next = Some(cand);
                break;
            }
            step *= 0.5;
        }
        st = match next {
            Some(s) => {
                eta = (2.0 * step).min(1.0);
                s
            }
            None => {
                let w: Vec<f64> = st.w.iter().zip(&st.r).map(|(w, r)| w - step * r).collect();
                fit_state(&gram, target, lambda, w)
            }
        };
    }
    Ok(FitResult {
        w: NaturalParameter { w: st.w },
        iterations,
        residual: st.grad_norm,
    })
}

/// Both sides of the log-likelihood bound for one pair of distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Outcome {
    /// `|E_{d2}[log P_{w2} - log P_{w1}]|`
    pub lhs: f64,
    /// `(1/lambda) |mu_1 - mu_2|_H^2`
    pub rhs: f64,
    pub holds: bool,
}

/// Absolute slack allowed on the bound, covering fit tolerance and round-off.
pub const LEMMA1_SLACK: f64 = 1e-9;

/// Fits both distributions and compares the expected log-likelihood gap with
/// `(1/lambda)` times their squared embedding distance.
pub fn lemma1_check(
    d1: &[f64],
    d2: &[f64],
    domain: &DiscreteDomain,
    k: &KernelSpec,
    cfg: &OracleConfig,
) -> Result<Lemma1Outcome> {
    let gram = domain.gram(k)?;
    let w1 = expfam_fit(d1, domain, k, cfg)?.w.w;
    let w2 = expfam_fit(d2, domain, k, cfg)?.w.w;
    let f1 = mat_vec(&gram, &w1);
    let f2 = mat_vec(&gram, &w2);
    let (a1, a2) = (log_partition_of(&f1), log_partition_of(&f2));
    let gap: f64 = d2
        .iter()
        .zip(f1.iter().zip(&f2))
        .map(|(t, (g1, g2))| t * ((g2 - a2) - (g1 - a1)))
        .sum();
    let diff: Vec<f64> = d1.iter().zip(d2).map(|(a, b)| a - b).collect();
    let rhs = dot(&diff, &mat_vec(&gram, &diff)).max(0.0) / cfg.reg_lambda;
    let lhs = gap.abs();
    Ok(Lemma1Outcome {
        lhs,
        rhs,
        holds: lhs <= rhs + LEMMA1_SLACK,
    })
}

fn grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::InvalidInput("grid needs at least two points".into()));
    }
    Ok((0..points).map(|i| i as f64 / (points - 1) as f64).collect())
}

/// Argmax of client `k`'s utility over a uniform grid on `[0, 1]`; ties go
/// to the smaller level. Entry `k` of `x` is ignored.
pub fn grid_best_response(g: &GameProfile, k: usize, p_k: f64, x: &[f64], grid_points: usize) -> Result<f64> {
    let levels = grid(grid_points)?;
    let mut p = vec![0.0; g.num_clients()];
    if k >= p.len() {
        return Err(Error::InvalidInput(format!("client index {k} out of range")));
    }
    p[k] = p_k;
    let mut xs = x.to_vec();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in &levels {
        xs[k] = t;
        let u = client_utility(g, &xs, &p, k)?;
        if u > best.0 {
            best = (u, t);
        }
    }
    Ok(best.1)
}

/// Grid profile minimizing the total unilateral deviation gain (zero at a
/// grid equilibrium). Ties go to the lowest profile index. `N <= 3` only.
pub fn grid_nash(g: &GameProfile, p: &[f64], grid_points: usize) -> Result<Vec<f64>> {
    let n = g.num_clients();
    if n > 3 {
        return Err(Error::InvalidInput(format!(
            "grid Nash search supports N <= 3, got {n}"
        )));
    }
    if p.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: p.len(),
        });
    }
    let levels = grid(grid_points)?;
    let gp = grid_points;
    let others = gp.pow(n as u32 - 1);
    // decode the others' grid indices for client k, in client order
    let profile_of = |k: usize, code: usize, own: usize| -> Vec<f64> {
        let mut x = vec![0.0; n];
        let mut c = code;
        for (i, xi) in x.iter_mut().enumerate() {
            if i == k {
                *xi = levels[own];
            } else {
                *xi = levels[c % gp];
                c /= gp;
            }
        }
        x
    };
    // best achievable utility for each client against each profile of others
    let best: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            par::map_range(others, |code| -> Result<f64> {
                let mut top = f64::NEG_INFINITY;
                for own in 0..gp {
                    top = top.max(client_utility(g, &profile_of(k, code, own), p, k)?);
                }
                Ok(top)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let total = gp.pow(n as u32);
    let gains: Vec<f64> = par::map_range(total, |idx| -> Result<f64> {
        let mut digits = vec![0; n];
        let mut c = idx;
        for d in digits.iter_mut() {
            *d = c % gp;
            c /= gp;
        }
        let x: Vec<f64> = digits.iter().map(|&d| levels[d]).collect();
        let mut gain = 0.0;
        for (k, best_k) in best.iter().enumerate() {
            let mut code = 0;
            let mut mul = 1;
            for (i, &d) in digits.iter().enumerate() {
                if i != k {
                    code += d * mul;
                    mul *= gp;
                }
            }
            gain += best_k[code] - client_utility(g, &x, p, k)?;
        }
        Ok(gain)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut bi = 0;
    for (i, v) in gains.iter().enumerate() {
        if *v < gains[bi] {
            bi = i;
        }
    }
    let mut c = bi;
    Ok((0..n)
        .map(|_| {
            let d = c % gp;
            c /= gp;
            levels[d]
        })
        .collect())
}

/// Best budget-feasible payment on a uniform grid over `[0, p_B]^N`, with an
/// exact equilibrium per cell. `N <= 2` only. Ties go to the lowest cell
/// index, i.e. the lexicographically smallest payment.
pub fn grid_payment_search(g: &GameProfile, grid_points: usize, cfg: &SolverConfig) -> Result<(Vec<f64>, f64)> {
    let n = g.num_clients();
    if n > 2 {
        return Err(Error::InvalidInput(format!(
            "grid payment search supports N <= 2, got {n}"
        )));
    }
    let levels = grid(grid_points)?;
    let bounds = payment_bounds(g, cfg)?;
    let cells = grid_points.pow(n as u32);
    let cell_p = |idx: usize| -> Vec<f64> {
        let mut c = idx;
        let mut p = vec![0.0; n];
        // first client is the most significant digit
        for i in (0..n).rev() {
            p[i] = bounds[i] * levels[c % grid_points];
            c /= grid_points;
        }
        p
    };
    let utils: Vec<f64> = par::map_range(cells, |idx| -> Result<f64> {
        let p = cell_p(idx);
        let eq = nash_solve(g, &p, &cfg.nash)?;
        let spend: f64 = p.iter().zip(&eq.x_star).map(|(a, b)| a * b).sum();
        if !eq.converged || spend > g.budget() {
            return Ok(f64::NEG_INFINITY);
        }
        server_utility(g, &eq.x_star, &p)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut bi = 0;
    for (i, u) in utils.iter().enumerate() {
        if *u > utils[bi] {
            bi = i;
        }
    }
    Ok((cell_p(bi), utils[bi]))
}

/// Central difference `(f(x + h e_c) - f(x - h e_c)) / 2h`.
pub fn finite_difference<F>(f: F, point: &[f64], coordinate: usize, h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut a = point.to_vec();
    let mut b = point.to_vec();
    a[coordinate] += h;
    b[coordinate] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// Central second difference `(f(x + h e_c) - 2 f(x) + f(x - h e_c)) / h^2`.
pub fn second_difference<F>(f: F, point: &[f64], coordinate: usize, h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut a = point.to_vec();
    let mut b = point.to_vec();
    a[coordinate] += h;
    b[coordinate] -= h;
    (f(&a) - 2.0 * f(point) + f(&b)) / (h * h)
}
