//! Synthetic non-IID game instances.
//!
//! All randomness comes from a single `ChaCha8Rng` seeded with
//! `rand_chacha::ChaCha8Rng::seed_from_u64(seed)`. Draw order is fixed:
//! per-client label proportions (clients in index order, remaining clients
//! first, removed clients last), then the quantity split, then features
//! client by client and class by class.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{
    median_heuristic, mixture_weights, EmpiricalDistribution, InnerProductTable, KernelSpec, SamplePoint,
    WeightedEmbedding, CLAMP_REL_TOL,
};
use crate::error::{Error, Result};

fn default_num_remaining() -> usize {
    7
}
fn default_num_removed() -> usize {
    3
}
fn default_beta() -> f64 {
    0.5
}
fn default_num_classes() -> usize {
    4
}
fn default_points_per_class() -> usize {
    50
}
fn default_feature_dim() -> usize {
    2
}
fn default_class_spread() -> f64 {
    0.5
}
fn default_budget() -> f64 {
    2.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_bound_constant() -> f64 {
    1.0
}

/// Scenario file contents. Every field except `seed` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_num_remaining")]
    pub num_remaining: usize,
    #[serde(default = "default_num_removed")]
    pub num_removed: usize,
    #[serde(default = "default_beta")]
    pub dirichlet_beta: f64,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Points available per class; the scenario holds
    /// `points_per_class_cap * num_classes` points in total.
    #[serde(default = "default_points_per_class")]
    pub points_per_class_cap: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_class_spread")]
    pub class_spread: f64,
    /// Cost per data point. `null` selects `10 / n_O`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default = "default_lambda")]
    pub lambda_v: f64,
    #[serde(default = "default_lambda")]
    pub lambda_s: f64,
    #[serde(default = "default_lambda")]
    pub lambda_q: f64,
    #[serde(default = "default_bound_constant")]
    pub bound_constant: f64,
    pub seed: u64,
    /// Per remaining client local optimality gap; `null` means all zero.
    #[serde(default)]
    pub client_deltas: Option<Vec<f64>>,
}

impl ScenarioConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        ScenarioConfig {
            num_remaining: default_num_remaining(),
            num_removed: default_num_removed(),
            dirichlet_beta: default_beta(),
            num_classes: default_num_classes(),
            points_per_class_cap: default_points_per_class(),
            feature_dim: default_feature_dim(),
            class_spread: default_class_spread(),
            gamma: None,
            budget: default_budget(),
            lambda_v: default_lambda(),
            lambda_s: default_lambda(),
            lambda_q: default_lambda(),
            bound_constant: default_bound_constant(),
            seed,
            client_deltas: None,
        }
    }
}

/// Checks every config invariant, reporting the first offending field.
pub fn validate_config(cfg: &ScenarioConfig) -> Result<()> {
    let positive = |field: &str, v: f64| -> Result<()> {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(Error::config(field, format!("must be finite and > 0, got {v}")))
        }
    };
    if cfg.num_remaining < 1 {
        return Err(Error::config("num_remaining", "must be >= 1"));
    }
    positive("dirichlet_beta", cfg.dirichlet_beta)?;
    if cfg.num_classes < 1 {
        return Err(Error::config("num_classes", "must be >= 1"));
    }
    if cfg.points_per_class_cap < 1 {
        return Err(Error::config("points_per_class_cap", "must be >= 1"));
    }
    let clients = cfg.num_remaining + cfg.num_removed;
    if cfg.points_per_class_cap * cfg.num_classes < clients {
        return Err(Error::config(
            "points_per_class_cap",
            format!("total points must cover at least one point for each of {clients} clients"),
        ));
    }
    if cfg.feature_dim < 2 {
        return Err(Error::config(
            "feature_dim",
            "must be >= 2 (class means lie on a circle)",
        ));
    }
    positive("class_spread", cfg.class_spread)?;
    if let Some(g) = cfg.gamma {
        positive("gamma", g)?;
    }
    if !cfg.budget.is_finite() || cfg.budget < 0.0 {
        return Err(Error::config(
            "budget",
            format!("must be finite and >= 0, got {}", cfg.budget),
        ));
    }
    positive("lambda_v", cfg.lambda_v)?;
    positive("lambda_s", cfg.lambda_s)?;
    positive("lambda_q", cfg.lambda_q)?;
    positive("bound_constant", cfg.bound_constant)?;
    if let Some(deltas) = &cfg.client_deltas {
        if deltas.len() != cfg.num_remaining {
            return Err(Error::config(
                "client_deltas",
                format!("expected {} entries, got {}", cfg.num_remaining, deltas.len()),
            ));
        }
        if deltas.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::config("client_deltas", "entries must be finite and >= 0"));
        }
    }
    Ok(())
}

/// Parses a scenario config from JSON text and validates it.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .map(str::to_owned)
            .unwrap_or_else(|| "<document>".to_owned());
        Error::config(field, msg)
    })?;
    validate_config(&cfg)?;
    Ok(cfg)
}

/// Reads and validates a scenario file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::config("<file>", format!("{}: {e}", path.as_ref().display())))?;
    parse_config(&text)
}

/// One client's generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub dataset: EmpiricalDistribution,
    pub n_i: usize,
    pub removed: bool,
}

/// Dirichlet(beta * 1_k) sample.
///
/// Gamma variates are drawn as `Gamma(beta + 1) * U^(1/beta)` and combined in
/// log space, which keeps very small concentrations from underflowing to an
/// all-zero vector.
pub fn sample_dirichlet<R: Rng>(rng: &mut R, beta: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(beta + 1.0, 1.0).expect("beta > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / beta
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Splits `n` into integer parts proportional to `props` (largest remainder,
/// ties to the lower index).
fn apportion(n: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws client datasets and the median-heuristic RBF kernel.
///
/// Remaining clients come first, removed clients last.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<(Vec<ClientSpec>, KernelSpec)> {
    validate_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.num_remaining + cfg.num_removed;
    let l = cfg.num_classes;

    let label_props: Vec<Vec<f64>> = (0..m)
        .map(|_| sample_dirichlet(&mut rng, cfg.dirichlet_beta, l))
        .collect();
    let quantity = sample_dirichlet(&mut rng, cfg.dirichlet_beta, m);
    let total = (cfg.points_per_class_cap * l) as f64;
    // floor of one point keeps every alpha_i > 0
    let sizes: Vec<usize> = quantity.iter().map(|q| ((q * total).round() as usize).max(1)).collect();

    let means: Vec<Vec<f64>> = (0..l)
        .map(|c| {
            let angle = 2.0 * PI * c as f64 / l as f64;
            let mut mu = vec![0.0; cfg.feature_dim];
            mu[0] = angle.cos();
            mu[1] = angle.sin();
            mu
        })
        .collect();

    let mut specs = Vec::with_capacity(m);
    for (i, &n_i) in sizes.iter().enumerate() {
        let counts = apportion(n_i, &label_props[i]);
        let mut points = Vec::with_capacity(n_i);
        for (class, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let coords: Vec<f64> = means[class]
                    .iter()
                    .map(|mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + cfg.class_spread * z
                    })
                    .collect();
                points.push(SamplePoint::new(coords)?);
            }
        }
        specs.push(ClientSpec {
            dataset: EmpiricalDistribution::uniform(points)?,
            n_i,
            removed: i >= cfg.num_remaining,
        });
    }

    let pooled: Vec<SamplePoint> = specs.iter().flat_map(|s| s.dataset.points().iter().cloned()).collect();
    let sigma = median_heuristic(&pooled)?;
    Ok((specs, KernelSpec::rbf(sigma)?))
}

/// A remaining client as seen by the game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// Data share among remaining clients.
    pub alpha: f64,
    /// Participation cost per unit level.
    pub cost: f64,
    /// Local optimality gap entering the performance-change bound.
    pub delta: f64,
    /// Row of this client's embedding in the inner-product table.
    pub embedding_index: usize,
}

/// Inputs for [`GameProfile::new`].
#[derive(Debug, Clone)]
pub struct ProfileParts {
    pub clients: Vec<ClientProfile>,
    pub table: InnerProductTable,
    /// Defaults to `mu_N` (no removed clients).
    pub mu_o: Option<WeightedEmbedding>,
    pub mu_r: Option<WeightedEmbedding>,
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub lambda_q: f64,
    pub bound_constant: f64,
    pub budget: f64,
    pub gamma: f64,
}

/// A complete game instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameProfile {
    clients: Vec<ClientProfile>,
    table: InnerProductTable,
    mu_n: WeightedEmbedding,
    mu_o: WeightedEmbedding,
    mu_r: Option<WeightedEmbedding>,
    lambda_hat_v: f64,
    lambda_hat_s: f64,
    lambda_hat_q: f64,
    bound_constant: f64,
    budget: f64,
    gamma: f64,
    #[serde(skip)]
    alpha: Vec<f64>,
    #[serde(skip)]
    cost: Vec<f64>,
    /// Gram matrix restricted to remaining clients, row-major `N x N`.
    #[serde(skip)]
    gram: Vec<f64>,
    #[serde(skip)]
    clamp_tol: f64,
    /// Largest `|mu_i - mu_j|_H` among remaining clients.
    #[serde(skip)]
    max_distance: f64,
}

impl GameProfile {
    pub fn new(parts: ProfileParts) -> Result<Self> {
        let ProfileParts {
            clients,
            table,
            mu_o,
            mu_r,
            lambda_v,
            lambda_s,
            lambda_q,
            bound_constant,
            budget,
            gamma,
        } = parts;
        let n = clients.len();
        let m = table.base_count();
        if n == 0 {
            return Err(Error::InvalidInput("game needs at least one remaining client".into()));
        }
        let mut seen = vec![false; m];
        for (i, c) in clients.iter().enumerate() {
            if !(c.alpha.is_finite() && c.alpha > 0.0) {
                return Err(Error::InvalidInput(format!("client {i}: alpha must be > 0")));
            }
            if !(c.cost.is_finite() && c.cost > 0.0) {
                return Err(Error::InvalidInput(format!("client {i}: cost must be > 0")));
            }
            if !(c.delta.is_finite() && c.delta >= 0.0) {
                return Err(Error::InvalidInput(format!("client {i}: delta must be >= 0")));
            }
            if c.embedding_index >= m || seen[c.embedding_index] {
                return Err(Error::InvalidInput(format!(
                    "client {i}: embedding index {} invalid or reused",
                    c.embedding_index
                )));
            }
            seen[c.embedding_index] = true;
        }
        let alpha: Vec<f64> = clients.iter().map(|c| c.alpha).collect();
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("client alphas sum to {total}, expected 1")));
        }
        for (name, v) in [
            ("lambda_v", lambda_v),
            ("lambda_s", lambda_s),
            ("lambda_q", lambda_q),
            ("bound_constant", bound_constant),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be > 0")));
            }
        }
        if !(budget.is_finite() && budget >= 0.0) {
            return Err(Error::InvalidInput("budget must be >= 0".into()));
        }

        let mut mu_n = vec![0.0; m];
        for c in &clients {
            mu_n[c.embedding_index] = c.alpha;
        }
        let mu_n = WeightedEmbedding::mixture(mu_n)?;
        let mu_o = match mu_o {
            Some(e) => {
                if e.len() != m {
                    return Err(Error::DimensionMismatch {
                        expected: m,
                        actual: e.len(),
                    });
                }
                WeightedEmbedding::mixture(e.coefficients().to_vec())?
            }
            None => mu_n.clone(),
        };
        if let Some(r) = &mu_r {
            if r.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: r.len(),
                });
            }
        }
        let cost = clients.iter().map(|c| c.cost).collect();
        let mut gram = vec![0.0; n * n];
        for (i, ci) in clients.iter().enumerate() {
            for (j, cj) in clients.iter().enumerate() {
                gram[i * n + j] = table.get(ci.embedding_index, cj.embedding_index);
            }
        }
        let clamp_tol = CLAMP_REL_TOL * table.trace().abs();
        let mut out = GameProfile {
            clients,
            table,
            mu_n,
            mu_o,
            mu_r,
            lambda_hat_v: lambda_v * bound_constant,
            lambda_hat_s: lambda_s * bound_constant,
            lambda_hat_q: lambda_q * bound_constant,
            bound_constant,
            budget,
            gamma,
            alpha,
            cost,
            gram,
            clamp_tol,
            max_distance: 0.0,
        };
        for i in 0..n {
            for j in (i + 1)..n {
                out.max_distance = out.max_distance.max(out.client_dist_sq(i, j)?.sqrt());
            }
        }
        Ok(out)
    }

    /// Largest pairwise `|mu_i - mu_j|_H` among remaining clients.
    pub fn max_client_distance(&self) -> f64 {
        self.max_distance
    }

    /// Number of remaining clients.
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn clients(&self) -> &[ClientProfile] {
        &self.clients
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn costs(&self) -> &[f64] {
        &self.cost
    }

    pub fn table(&self) -> &InnerProductTable {
        &self.table
    }

    pub fn mu_n(&self) -> &WeightedEmbedding {
        &self.mu_n
    }

    pub fn mu_o(&self) -> &WeightedEmbedding {
        &self.mu_o
    }

    pub fn mu_r(&self) -> Option<&WeightedEmbedding> {
        self.mu_r.as_ref()
    }

    pub fn lambda_hat_v(&self) -> f64 {
        self.lambda_hat_v
    }

    pub fn lambda_hat_s(&self) -> f64 {
        self.lambda_hat_s
    }

    pub fn lambda_hat_q(&self) -> f64 {
        self.lambda_hat_q
    }

    pub fn bound_constant(&self) -> f64 {
        self.bound_constant
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Same game with a different budget.
    pub fn with_budget(&self, budget: f64) -> Result<Self> {
        if !(budget.is_finite() && budget >= 0.0) {
            return Err(Error::InvalidInput("budget must be >= 0".into()));
        }
        let mut out = self.clone();
        out.budget = budget;
        Ok(out)
    }

    /// Embedding of remaining client `i` as a basis vector over the table.
    pub fn client_embedding(&self, i: usize) -> WeightedEmbedding {
        WeightedEmbedding::basis(self.table.base_count(), self.clients[i].embedding_index)
    }

    /// Lifts coefficients over remaining clients to table coefficients.
    pub fn lift(&self, local: &[f64]) -> WeightedEmbedding {
        let mut out = vec![0.0; self.table.base_count()];
        for (c, w) in self.clients.iter().zip(local) {
            out[c.embedding_index] = *w;
        }
        WeightedEmbedding::from_raw(out)
    }

    /// `mu(x)` over table bases.
    pub fn mixture(&self, x: &[f64]) -> WeightedEmbedding {
        self.lift(&mixture_weights(x, &self.alpha))
    }

    /// Gram entry between remaining clients `i` and `j`.
    #[inline]
    pub fn gram(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.clients.len() + j]
    }

    /// `d^T G d` over remaining clients with the table's clamp rule.
    pub(crate) fn local_norm_sq(&self, d: &[f64]) -> Result<f64> {
        let n = self.clients.len();
        let mut q = 0.0;
        for (i, di) in d.iter().enumerate() {
            if *di == 0.0 {
                continue;
            }
            let row = &self.gram[i * n..(i + 1) * n];
            let r: f64 = row.iter().zip(d).map(|(g, dj)| g * dj).sum();
            q += di * r;
        }
        if q >= 0.0 {
            Ok(q)
        } else if q >= -self.clamp_tol {
            Ok(0.0)
        } else {
            Err(Error::NumericalIntegrity(format!(
                "squared RKHS norm {q:e} below clamp tolerance -{:e}",
                self.clamp_tol
            )))
        }
    }

    /// `|mu_i - mu_j|_H^2` between remaining clients.
    pub fn client_dist_sq(&self, i: usize, j: usize) -> Result<f64> {
        let mut d = vec![0.0; self.clients.len()];
        d[i] += 1.0;
        d[j] -= 1.0;
        self.local_norm_sq(&d)
    }

    /// `|mu_i - mu_R|_H` per remaining client; `None` without removed clients.
    pub fn heterogeneity_to_removed(&self) -> Result<Option<Vec<f64>>> {
        let Some(mu_r) = &self.mu_r else {
            return Ok(None);
        };
        (0..self.num_clients())
            .map(|i| Ok(self.table.dist_sq(&self.client_embedding(i), mu_r)?.sqrt()))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// Builds the game profile from generated client data.
pub fn assemble_profile(specs: &[ClientSpec], kernel: &KernelSpec, cfg: &ScenarioConfig) -> Result<GameProfile> {
    validate_config(cfg)?;
    let remaining: Vec<usize> = (0..specs.len()).filter(|&i| !specs[i].removed).collect();
    if remaining.is_empty() {
        return Err(Error::InvalidInput("no remaining clients".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.n_i < 1 || s.n_i != s.dataset.len() {
            return Err(Error::InvalidInput(format!(
                "client {i}: n_i = {} does not match {} points",
                s.n_i,
                s.dataset.len()
            )));
        }
    }
    let n_o: usize = specs.iter().map(|s| s.n_i).sum();
    let n_n: usize = remaining.iter().map(|&i| specs[i].n_i).sum();
    let n_r = n_o - n_n;
    let gamma = cfg.gamma.unwrap_or(10.0 / n_o as f64);
    if let Some(d) = &cfg.client_deltas {
        if d.len() != remaining.len() {
            return Err(Error::config(
                "client_deltas",
                "length must equal the remaining client count",
            ));
        }
    }

    let dists: Vec<EmpiricalDistribution> = specs.iter().map(|s| s.dataset.clone()).collect();
    let table = InnerProductTable::build(&dists, kernel)?;

    let clients: Vec<ClientProfile> = remaining
        .iter()
        .enumerate()
        .map(|(local, &i)| ClientProfile {
            alpha: specs[i].n_i as f64 / n_n as f64,
            cost: gamma * specs[i].n_i as f64,
            delta: cfg.client_deltas.as_ref().map_or(0.0, |d| d[local]),
            embedding_index: i,
        })
        .collect();
    let mu_o = WeightedEmbedding::new(specs.iter().map(|s| s.n_i as f64 / n_o as f64).collect())?;
    let mu_r = if n_r > 0 {
        Some(WeightedEmbedding::new(
            specs
                .iter()
                .map(|s| if s.removed { s.n_i as f64 / n_r as f64 } else { 0.0 })
                .collect(),
        )?)
    } else {
        None
    };
    GameProfile::new(ProfileParts {
        clients,
        table,
        mu_o: Some(mu_o),
        mu_r,
        lambda_v: cfg.lambda_v,
        lambda_s: cfg.lambda_s,
        lambda_q: cfg.lambda_q,
        bound_constant: cfg.bound_constant,
        budget: cfg.budget,
        gamma,
    })
}

/// `generate_scenario` followed by `assemble_profile`.
pub fn build_profile(cfg: &ScenarioConfig) -> Result<GameProfile> {
    let (specs, kernel) = generate_scenario(cfg)?;
    assemble_profile(&specs, &kernel, cfg)
}
