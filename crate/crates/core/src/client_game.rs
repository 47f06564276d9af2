//! The client-side participation game.
//!
//! Client `k` picks `x_k` in `[0, 1]` to maximize
//! `p_k x_k - u_k(x) - c_k x_k`, where the performance impact
//! `u_k(x) = lambda_q_hat * |mu(x) - mu_k|_H^2`.
//!
//! Writing `S_0 = sum_{j != k} alpha_j x_j` and
//! `Psi = |sum_{i != k} alpha_i x_i (mu_i - mu_k)|_H^2`, the impact is
//! `lambda_q_hat * Psi / (S_0 + alpha_k x_k)^2`, which is what every routine
//! here evaluates.

use serde::{Deserialize, Serialize};

use crate::embedding::CLAMP_REL_TOL;
use crate::error::{Error, Result};
use crate::scenario::GameProfile;

/// Bound helper `alpha (1 - alpha)^2`; peaks at `4/27` for `alpha = 1/3`.
///
/// Evaluated as `4/27 - (alpha - 1/3)^2 (4/3 - alpha)` so the peak value is
/// returned exactly.
pub fn uniqueness_factor(alpha: f64) -> f64 {
    let d = alpha - 1.0 / 3.0;
    4.0 / 27.0 - d * d * (4.0 / 3.0 - alpha)
}

fn check_x(g: &GameProfile, x: &[f64]) -> Result<()> {
    if x.len() != g.num_clients() {
        return Err(Error::DimensionMismatch {
            expected: g.num_clients(),
            actual: x.len(),
        });
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("participation levels must lie in [0, 1]".into()));
    }
    Ok(())
}

fn check_p(g: &GameProfile, p: &[f64]) -> Result<()> {
    if p.len() != g.num_clients() {
        return Err(Error::DimensionMismatch {
            expected: g.num_clients(),
            actual: p.len(),
        });
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput("payments must be finite and >= 0".into()));
    }
    Ok(())
}

fn check_k(g: &GameProfile, k: usize) -> Result<()> {
    if k >= g.num_clients() {
        return Err(Error::InvalidInput(format!(
            "client index {k} out of range for {} clients",
            g.num_clients()
        )));
    }
    Ok(())
}

/// `|sum_i y_i (mu_i - mu_k)|_H^2` over remaining clients, ignoring `y_k`.
fn centered_norm_sq(g: &GameProfile, k: usize, y: &[f64]) -> Result<f64> {
    let gkk = g.gram(k, k);
    let mut q = 0.0;
    let mut mass = 0.0;
    for (i, yi) in y.iter().enumerate() {
        if i == k || *yi == 0.0 {
            continue;
        }
        mass += yi.abs();
        let gik = g.gram(i, k);
        let mut row = 0.0;
        for (j, yj) in y.iter().enumerate() {
            if j == k || *yj == 0.0 {
                continue;
            }
            row += yj * (g.gram(i, j) - gik - g.gram(k, j) + gkk);
        }
        q += yi * row;
    }
    if q >= 0.0 {
        return Ok(q);
    }
    let tol = CLAMP_REL_TOL * g.table().trace().abs() * mass * mass;
    if q >= -tol {
        Ok(0.0)
    } else {
        Err(Error::NumericalIntegrity(format!(
            "squared RKHS norm {q:e} below clamp tolerance -{tol:e}"
        )))
    }
}

fn others_mass(g: &GameProfile, k: usize, x: &[f64]) -> f64 {
    g.alphas()
        .iter()
        .zip(x)
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, (a, xi))| a * xi)
        .sum()
}

fn weighted(g: &GameProfile, x: &[f64]) -> Vec<f64> {
    g.alphas().iter().zip(x).map(|(a, xi)| a * xi).collect()
}

/// `|mu(x) - mu_k|_H^2`, with `mu(0) = mu_N`.
fn dist_to_client_sq(g: &GameProfile, x: &[f64], k: usize) -> Result<f64> {
    let y = weighted(g, x);
    let s: f64 = y.iter().sum();
    if s > 0.0 {
        Ok(centered_norm_sq(g, k, &y)? / (s * s))
    } else {
        centered_norm_sq(g, k, g.alphas())
    }
}

/// Performance impact `u_k(x)`.
pub fn perf_impact(g: &GameProfile, x: &[f64], k: usize) -> Result<f64> {
    check_x(g, x)?;
    check_k(g, k)?;
    Ok(g.lambda_hat_q() * dist_to_client_sq(g, x, k)?)
}

fn total_mass(g: &GameProfile, x: &[f64], k: usize) -> Result<f64> {
    check_x(g, x)?;
    check_k(g, k)?;
    let s: f64 = g.alphas().iter().zip(x).map(|(a, xi)| a * xi).sum();
    if s > 0.0 {
        Ok(s)
    } else {
        Err(Error::DegenerateState("sum_j alpha_j x_j = 0".into()))
    }
}

/// `d u_k / d x_k = -(2 alpha_k / S) u_k(x)`; never positive.
pub fn perf_impact_derivative(g: &GameProfile, x: &[f64], k: usize) -> Result<f64> {
    let s = total_mass(g, x, k)?;
    Ok(-2.0 * g.alphas()[k] / s * perf_impact(g, x, k)?)
}

/// `d^2 u_k / d x_k^2 = (6 alpha_k^2 / S^2) u_k(x)`.
pub fn perf_impact_second_derivative(g: &GameProfile, x: &[f64], k: usize) -> Result<f64> {
    let s = total_mass(g, x, k)?;
    let a = g.alphas()[k];
    Ok(6.0 * a * a / (s * s) * perf_impact(g, x, k)?)
}

/// `u_k(x_k, x_{-k}) - u_k(x_k', x_{-k})` in closed form.
///
/// Entry `k` of `x` is ignored. With `mu_hat` the mixture of the other
/// clients, `A = lambda_q_hat |mu_hat - mu_k|^2` and `beta = alpha_k / S_0`,
/// the change is `A (1/(1 + beta x_k)^2 - 1/(1 + beta x_k')^2)`.
pub fn delta_u(g: &GameProfile, k: usize, x_k: f64, x_k_prime: f64, x: &[f64]) -> Result<f64> {
    check_x(g, x)?;
    check_k(g, k)?;
    if !(0.0..=1.0).contains(&x_k) || !(0.0..=1.0).contains(&x_k_prime) {
        return Err(Error::InvalidInput("participation levels must lie in [0, 1]".into()));
    }
    let s0 = others_mass(g, k, x);
    if s0 <= 0.0 {
        return Err(Error::DegenerateState("others' participation mass is zero".into()));
    }
    let mut y = weighted(g, x);
    y[k] = 0.0;
    let a = g.lambda_hat_q() * centered_norm_sq(g, k, &y)? / (s0 * s0);
    let beta = g.alphas()[k] / s0;
    let f = |t: f64| 1.0 / ((1.0 + beta * t) * (1.0 + beta * t));
    Ok(a * (f(x_k) - f(x_k_prime)))
}

/// Client utility `p_k x_k - u_k(x) - c_k x_k`.
pub fn client_utility(g: &GameProfile, x: &[f64], p: &[f64], k: usize) -> Result<f64> {
    check_p(g, p)?;
    let u = perf_impact(g, x, k)?;
    Ok((p[k] - g.costs()[k]) * x[k] - u)
}

/// `phi = 2 lambda_q_hat |sum_{i != k} alpha_i x_i (mu_i - mu_k)|_H^2`.
/// Entry `k` of `x` is ignored.
pub fn phi(g: &GameProfile, k: usize, x: &[f64]) -> Result<f64> {
    check_x(g, x)?;
    check_k(g, k)?;
    Ok(phi_unchecked(g, k, x)?.0)
}

/// `(phi, S_0)`.
fn phi_unchecked(g: &GameProfile, k: usize, x: &[f64]) -> Result<(f64, f64)> {
    let mut y = weighted(g, x);
    y[k] = 0.0;
    let s0: f64 = y.iter().sum();
    Ok((2.0 * g.lambda_hat_q() * centered_norm_sq(g, k, &y)?, s0))
}

/// Payments delimiting zero, interior and full participation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub p_low: f64,
    pub p_high: f64,
}

fn thresholds_from(alpha: f64, cost: f64, phi: f64, s0: f64) -> Thresholds {
    if s0 <= 0.0 {
        return Thresholds {
            p_low: cost,
            p_high: cost,
        };
    }
    Thresholds {
        p_low: cost - alpha * phi / (s0 * s0 * s0),
        p_high: cost - alpha * phi / ((s0 + alpha) * (s0 + alpha) * (s0 + alpha)),
    }
}

/// Threshold payments for client `k` against `x_{-k}` (entry `k` ignored).
/// When the others are all idle both thresholds equal `c_k`.
pub fn thresholds(g: &GameProfile, k: usize, x: &[f64]) -> Result<Thresholds> {
    check_x(g, x)?;
    check_k(g, k)?;
    let (phi, s0) = phi_unchecked(g, k, x)?;
    Ok(thresholds_from(g.alphas()[k], g.costs()[k], phi, s0))
}

fn best_response_from(alpha: f64, cost: f64, phi: f64, s0: f64, p: f64) -> Result<f64> {
    if s0 <= 0.0 || phi <= 0.0 {
        return Ok(if p > cost { 1.0 } else { 0.0 });
    }
    let th = thresholds_from(alpha, cost, phi, s0);
    if p < th.p_low {
        return Ok(0.0);
    }
    if p > th.p_high {
        return Ok(1.0);
    }
    let v = (phi / (alpha * alpha * (cost - p))).cbrt() - s0 / alpha;
    if (-CLAMP_REL_TOL..=1.0 + CLAMP_REL_TOL).contains(&v) {
        Ok(v.clamp(0.0, 1.0))
    } else {
        Err(Error::NumericalIntegrity(format!(
            "interior best response {v} outside [0, 1] beyond tolerance"
        )))
    }
}

/// Closed-form best response of client `k` to payment `p_k` and `x_{-k}`
/// (entry `k` of `x` ignored).
pub fn best_response(g: &GameProfile, k: usize, p_k: f64, x: &[f64]) -> Result<f64> {
    check_x(g, x)?;
    check_k(g, k)?;
    if !p_k.is_finite() || p_k < 0.0 {
        return Err(Error::InvalidInput(format!(
            "payment must be finite and >= 0, got {p_k}"
        )));
    }
    let (phi, s0) = phi_unchecked(g, k, x)?;
    best_response_from(g.alphas()[k], g.costs()[k], phi, s0, p_k)
}

/// Nash iteration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashConfig {
    pub tolerance: f64,
    pub max_iters: usize,
    /// Starting profile; `None` starts from full participation.
    pub init: Option<Vec<f64>>,
}

impl Default for NashConfig {
    fn default() -> Self {
        NashConfig {
            tolerance: 1e-8,
            max_iters: 10_000,
            init: None,
        }
    }
}

/// Outcome of [`nash_solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub x_star: Vec<f64>,
    /// Completed sweeps.
    pub iterations: usize,
    /// Largest coordinate change in the final sweep.
    pub residual: f64,
    /// `max_k |BR_k(x*_{-k}) - x*_k|` recomputed at the returned point.
    pub certificate: f64,
    pub converged: bool,
    pub unique_certified: bool,
}

/// `max_k |BR_k(x_{-k}) - x_k|`.
pub fn fixed_point_residual(g: &GameProfile, p: &[f64], x: &[f64]) -> Result<f64> {
    check_x(g, x)?;
    check_p(g, p)?;
    let mut worst: f64 = 0.0;
    for k in 0..g.num_clients() {
        let (phi, s0) = phi_unchecked(g, k, x)?;
        let br = best_response_from(g.alphas()[k], g.costs()[k], phi, s0, p[k])?;
        worst = worst.max((br - x[k]).abs());
    }
    Ok(worst)
}

/// Gauss-Seidel best-response sweeps in client order.
///
/// Stops once a sweep moves no coordinate by `tolerance` or more and the
/// fixed-point certificate at the resulting point is also below it. Hitting
/// `max_iters` returns the last iterate with `converged = false`.
pub fn nash_solve(g: &GameProfile, p: &[f64], cfg: &NashConfig) -> Result<EquilibriumResult> {
    let mut r = sweep_to_equilibrium(g, p, cfg)?;
    r.unique_certified = uniqueness_check(g, p)?.holds;
    Ok(r)
}

/// [`nash_solve`] without the uniqueness certificate.
pub(crate) fn sweep_to_equilibrium(g: &GameProfile, p: &[f64], cfg: &NashConfig) -> Result<EquilibriumResult> {
    check_p(g, p)?;
    if !(cfg.tolerance.is_finite() && cfg.tolerance > 0.0) {
        return Err(Error::InvalidInput("nash tolerance must be > 0".into()));
    }
    let n = g.num_clients();
    let mut x = match &cfg.init {
        Some(init) => {
            check_x(g, init)?;
            init.clone()
        }
        None => vec![1.0; n],
    };
    let alphas = g.alphas();
    let costs = g.costs();
    let lq = 2.0 * g.lambda_hat_q();
    let mut y = weighted(g, &x);
    // one pass of best responses; returns the largest coordinate change
    let pass = |x: &mut [f64], y: &mut [f64], update: bool| -> Result<f64> {
        let mut moved: f64 = 0.0;
        for k in 0..n {
            let s0: f64 = y.iter().sum::<f64>() - y[k];
            let phi = lq * centered_norm_sq(g, k, y)?;
            let br = best_response_from(alphas[k], costs[k], phi, s0, p[k])?;
            moved = moved.max((br - x[k]).abs());
            if update {
                x[k] = br;
                y[k] = alphas[k] * br;
            }
        }
        Ok(moved)
    };
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut certificate = f64::INFINITY;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        residual = pass(&mut x, &mut y, true)?;
        if residual < cfg.tolerance {
            certificate = pass(&mut x, &mut y, false)?;
            if certificate < cfg.tolerance {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        certificate = pass(&mut x, &mut y, false)?;
    }
    Ok(EquilibriumResult {
        x_star: x,
        iterations,
        residual,
        certificate,
        converged,
        unique_certified: false,
    })
}

/// Sufficient uniqueness condition and its per-client slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub holds: bool,
    /// Largest pairwise `|mu_i - mu_j|_H` among remaining clients.
    pub max_distance: f64,
    /// `(3 alpha_k (1 - alpha_k)^2 / 4) sqrt(3 |c_k - p_k| / lambda_q_hat) - D`.
    pub margins: Vec<f64>,
}

/// Checks `D < (3 alpha_k (1 - alpha_k)^2 / 4) sqrt(3 |c_k - p_k| / lambda_q_hat)`
/// for every client.
pub fn uniqueness_check(g: &GameProfile, p: &[f64]) -> Result<UniquenessReport> {
    check_p(g, p)?;
    let n = g.num_clients();
    let d = g.max_client_distance();
    let margins: Vec<f64> = (0..n)
        .map(|k| {
            let a = g.alphas()[k];
            let rhs = 0.75 * uniqueness_factor(a) * (3.0 * (g.costs()[k] - p[k]).abs() / g.lambda_hat_q()).sqrt();
            rhs - d
        })
        .collect();
    Ok(UniquenessReport {
        holds: margins.iter().all(|m| *m > 0.0),
        max_distance: d,
        margins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::InnerProductTable;
    use crate::scenario::{ClientProfile, ProfileParts};
    use approx::assert_relative_eq;

    fn game(rows: Vec<Vec<f64>>, alpha: &[f64], cost: &[f64]) -> GameProfile {
        let table = InnerProductTable::from_rows(rows).unwrap();
        let clients = alpha
            .iter()
            .zip(cost)
            .enumerate()
            .map(|(i, (&alpha, &cost))| ClientProfile {
                alpha,
                cost,
                delta: 0.0,
                embedding_index: i,
            })
            .collect();
        GameProfile::new(ProfileParts {
            clients,
            table,
            mu_o: None,
            mu_r: None,
            lambda_v: 1.0,
            lambda_s: 1.0,
            lambda_q: 1.0,
            bound_constant: 1.0,
            budget: 1.0,
            gamma: 1.0,
        })
        .unwrap()
    }

    /// Two clients with orthonormal embeddings; at full participation the
    /// thresholds are 1 and 4.5.
    fn orthogonal_pair() -> GameProfile {
        game(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, 0.5], &[5.0, 5.0])
    }

    fn homogeneous(n: usize) -> GameProfile {
        let rows = vec![vec![1.0; n]; n];
        game(rows, &vec![1.0 / n as f64; n], &vec![0.5; n])
    }

    #[test]
    fn impact_zero_at_own_indicator() {
        let g = orthogonal_pair();
        assert_eq!(perf_impact(&g, &[1.0, 0.0], 0).unwrap(), 0.0);
        // mu(x) = (mu_0 + mu_1)/2, distance^2 to mu_0 = 1/2
        assert_relative_eq!(perf_impact(&g, &[1.0, 1.0], 0).unwrap(), 0.5);
        // x = 0 uses mu_N
        assert_relative_eq!(perf_impact(&g, &[0.0, 0.0], 0).unwrap(), 0.5);
    }

    #[test]
    fn homogeneous_impact_vanishes() {
        let g = homogeneous(3);
        assert_eq!(perf_impact(&g, &[0.2, 0.7, 1.0], 1).unwrap(), 0.0);
        assert_eq!(perf_impact_derivative(&g, &[0.2, 0.7, 1.0], 1).unwrap(), 0.0);
        assert_eq!(phi(&g, 0, &[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn derivative_needs_positive_mass() {
        let g = orthogonal_pair();
        assert!(matches!(
            perf_impact_derivative(&g, &[0.0, 0.0], 0),
            Err(Error::DegenerateState(_))
        ));
        assert!(matches!(
            delta_u(&g, 0, 1.0, 0.5, &[1.0, 0.0]),
            Err(Error::DegenerateState(_))
        ));
    }

    #[test]
    fn phi_single_other_client() {
        let g = orthogonal_pair();
        // 2 * 0.5^2 * 0.6^2 * |mu_1 - mu_0|^2 = 2 * 0.25 * 0.36 * 2
        assert_relative_eq!(phi(&g, 0, &[0.3, 0.6]).unwrap(), 0.36, epsilon = 1e-15);
    }

    #[test]
    fn thresholds_ordered_below_cost() {
        let g = orthogonal_pair();
        let th = thresholds(&g, 0, &[1.0, 1.0]).unwrap();
        assert_eq!((th.p_low, th.p_high), (1.0, 4.5));
        let idle = thresholds(&g, 0, &[1.0, 0.0]).unwrap();
        assert_eq!((idle.p_low, idle.p_high), (5.0, 5.0));
        assert_eq!(best_response(&g, 0, th.p_low, &[1.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(
            best_response(&g, 0, th.p_high, &[1.0, 1.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn homogeneous_best_response_is_a_step() {
        let g = homogeneous(2);
        assert_eq!(best_response(&g, 0, 0.6, &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(best_response(&g, 0, 0.5, &[1.0, 1.0]).unwrap(), 0.0);
        assert!(best_response(&g, 0, -0.1, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn homogeneous_nash_in_one_sweep() {
        let g = homogeneous(3);
        let r = nash_solve(&g, &[0.6; 3], &NashConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.x_star, vec![1.0; 3]);
        assert_eq!(r.iterations, 1);
        assert!(r.unique_certified);
    }

    #[test]
    fn nash_reports_iteration_cap() {
        let g = orthogonal_pair();
        let th = thresholds(&g, 0, &[1.0, 1.0]).unwrap();
        let p = [0.5 * (th.p_low + th.p_high); 2];
        let cfg = NashConfig {
            max_iters: 1,
            init: Some(vec![0.1, 0.9]),
            ..NashConfig::default()
        };
        let r = nash_solve(&g, &p, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
        let full = nash_solve(&g, &p, &NashConfig::default()).unwrap();
        assert!(full.converged && full.certificate < 1e-8);
    }

    #[test]
    fn uniqueness_strict_at_cost() {
        let g = homogeneous(2);
        assert!(!uniqueness_check(&g, &[0.5, 0.7]).unwrap().holds);
        assert!(uniqueness_check(&g, &[0.4, 0.7]).unwrap().holds);
        assert_eq!(uniqueness_factor(1.0 / 3.0), 4.0 / 27.0);
        assert_relative_eq!(uniqueness_factor(0.2), 0.2 * 0.64, epsilon = 1e-16);
    }
}
