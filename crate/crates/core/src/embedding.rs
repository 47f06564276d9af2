//! Kernels, empirical kernel mean embeddings and RKHS geometry.
//!
//! Embeddings are never materialized as functions. Every quantity downstream
//! (distances between mixtures, performance impacts, server losses) is a
//! bilinear form over an [`InnerProductTable`] holding `<mu_a, mu_b>` for a
//! fixed list of base embeddings, and a [`WeightedEmbedding`] is just a
//! coefficient vector over those bases.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Symmetry tolerance for tables handed in from outside.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Allowed negative eigenvalue, relative to the table trace.
pub const PSD_REL_TOL: f64 = 1e-8;
/// Allowed negative squared distance before clamping becomes an error,
/// relative to the table trace.
pub const CLAMP_REL_TOL: f64 = 1e-9;

/// A point in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SamplePoint(Vec<f64>);

impl SamplePoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput("sample point has no coordinates".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("sample point has non-finite coordinate".into()));
        }
        Ok(SamplePoint(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    fn sq_dist(&self, other: &SamplePoint) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn dot(&self, other: &SamplePoint) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Weighted sample set standing in for a client's local distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    points: Vec<SamplePoint>,
    weights: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(points: Vec<SamplePoint>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("distribution has no points".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                actual: weights.len(),
            });
        }
        let d = points[0].dim();
        if let Some(p) = points.iter().find(|p| p.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: p.dim(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, expected 1")));
        }
        Ok(EmpiricalDistribution { points, weights })
    }

    /// Equal weight `1/n` on every point.
    pub fn uniform(points: Vec<SamplePoint>) -> Result<Self> {
        let n = points.len().max(1);
        let weights = vec![1.0 / n as f64; points.len()];
        Self::new(points, weights)
    }

    pub fn points(&self) -> &[SamplePoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    /// Weighted sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (p, w) in self.points.iter().zip(&self.weights) {
            for (acc, c) in m.iter_mut().zip(p.coords()) {
                *acc += w * c;
            }
        }
        m
    }
}

/// Positive-definite kernel used for the embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-|a-b|^2 / (2 sigma^2))`
    Rbf { sigma: f64 },
    /// `<a, b>`
    Linear,
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "rbf bandwidth must be finite and > 0, got {sigma}"
            )));
        }
        Ok(KernelSpec::Rbf { sigma })
    }

    fn eval_unchecked(&self, a: &SamplePoint, b: &SamplePoint) -> f64 {
        match *self {
            KernelSpec::Rbf { sigma } => (-a.sq_dist(b) / (2.0 * sigma * sigma)).exp(),
            KernelSpec::Linear => a.dot(b),
        }
    }
}

/// Evaluates `k(a, b)`.
pub fn kernel_eval(k: &KernelSpec, a: &SamplePoint, b: &SamplePoint) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(k.eval_unchecked(a, b))
}

/// Median-heuristic RBF bandwidth.
///
/// `sigma^2` is the median squared distance over distinct unordered pairs
/// (self-pairs excluded; for an even pair count the two middle values are
/// averaged). A zero median falls back to the smallest nonzero squared
/// distance.
pub fn median_heuristic(points: &[SamplePoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::DegenerateBandwidth(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let d = points[0].dim();
    if let Some(p) = points.iter().find(|p| p.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: p.dim(),
        });
    }
    let n = points.len();
    let mut sq: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            sq.push(points[i].sq_dist(&points[j]));
        }
    }
    let len = sq.len();
    let mid = len / 2;
    let (_, upper, _) = sq.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if len % 2 == 1 {
        upper
    } else {
        let lower = sq[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median > 0.0 {
        return Ok(median.sqrt());
    }
    let min_nonzero = sq.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    if min_nonzero.is_finite() {
        Ok(min_nonzero.sqrt())
    } else {
        Err(Error::DegenerateBandwidth("all points are identical".into()))
    }
}

/// `<mu_A, mu_B>_H` for two empirical distributions.
pub fn kme_inner(a: &EmpiricalDistribution, b: &EmpiricalDistribution, k: &KernelSpec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    // fixed row-major order so results are bit-stable
    let mut total = 0.0;
    for (pa, wa) in a.points.iter().zip(&a.weights) {
        let mut row = 0.0;
        for (pb, wb) in b.points.iter().zip(&b.weights) {
            row += wb * k.eval_unchecked(pa, pb);
        }
        total += wa * row;
    }
    Ok(total)
}

/// Coefficients `c` representing `sum_a c_a mu_a` over the table's bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightedEmbedding {
    coefficients: Vec<f64>,
}

impl WeightedEmbedding {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("embedding coefficients must be finite".into()));
        }
        Ok(WeightedEmbedding { coefficients })
    }

    /// A probability mixture: nonnegative coefficients summing to one.
    pub fn mixture(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput(
                "mixture coefficients must be finite and >= 0".into(),
            ));
        }
        let total: f64 = coefficients.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("mixture coefficients sum to {total}")));
        }
        Ok(WeightedEmbedding { coefficients })
    }

    /// Indicator of base `index` among `m` bases.
    pub fn basis(m: usize, index: usize) -> Self {
        let mut coefficients = vec![0.0; m];
        coefficients[index] = 1.0;
        WeightedEmbedding { coefficients }
    }

    pub(crate) fn from_raw(coefficients: Vec<f64>) -> Self {
        WeightedEmbedding { coefficients }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }
}

/// Mixture embedding `mu(x)` over remaining clients, as local coefficients
/// `alpha_i x_i / sum_j alpha_j x_j`.
///
/// When every `x_i` is zero the mixture is undefined; the value returned is
/// the full-participation mixture `alpha`, which is the limit of `mu(eps * 1)`.
pub fn mixture_coefficients(x: &[f64], alpha: &[f64]) -> Result<WeightedEmbedding> {
    if x.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            expected: alpha.len(),
            actual: x.len(),
        });
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("participation levels must lie in [0, 1]".into()));
    }
    if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
        return Err(Error::InvalidInput("client weights must be > 0".into()));
    }
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("client weights sum to {total}")));
    }
    Ok(WeightedEmbedding::from_raw(mixture_weights(x, alpha)))
}

/// Unchecked mixture weights; shared by the game modules.
pub(crate) fn mixture_weights(x: &[f64], alpha: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().zip(alpha).map(|(xi, ai)| xi * ai).sum();
    if s > 0.0 {
        x.iter().zip(alpha).map(|(xi, ai)| ai * xi / s).collect()
    } else {
        alpha.to_vec()
    }
}

/// Symmetric table of RKHS inner products between base embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerProductTable {
    m: usize,
    /// Row-major `m x m`.
    entries: Vec<f64>,
}

impl InnerProductTable {
    /// Computes `<mu_a, mu_b>` for every pair of distributions.
    pub fn build(dists: &[EmpiricalDistribution], k: &KernelSpec) -> Result<Self> {
        if dists.is_empty() {
            return Err(Error::InvalidInput("need at least one distribution".into()));
        }
        let d = dists[0].dim();
        if let Some(bad) = dists.iter().find(|x| x.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: bad.dim(),
            });
        }
        let m = dists.len();
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a..m).map(move |b| (a, b))).collect();
        let values = par::map_slice(&pairs, |&(a, b)| kme_inner(&dists[a], &dists[b], k));
        let mut entries = vec![0.0; m * m];
        for (&(a, b), v) in pairs.iter().zip(values) {
            let v = v?;
            entries[a * m + b] = v;
            entries[b * m + a] = v;
        }
        let table = InnerProductTable { m, entries };
        table.check_psd()?;
        Ok(table)
    }

    /// Wraps an explicit Gram matrix after validating the table invariants.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::InvalidInput("empty table".into()));
        }
        let mut entries = Vec::with_capacity(m * m);
        for row in &rows {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("table entries must be finite".into()));
        }
        for a in 0..m {
            if entries[a * m + a] < 0.0 {
                return Err(Error::NumericalIntegrity(format!("negative diagonal entry at {a}")));
            }
            for b in (a + 1)..m {
                if (entries[a * m + b] - entries[b * m + a]).abs() > SYMMETRY_TOL {
                    return Err(Error::NumericalIntegrity(format!("table not symmetric at ({a}, {b})")));
                }
            }
        }
        let table = InnerProductTable { m, entries };
        table.check_psd()?;
        Ok(table)
    }

    fn check_psd(&self) -> Result<()> {
        let min_eig = self.min_eigenvalue();
        let tol = PSD_REL_TOL * self.trace().abs();
        if min_eig < -tol {
            return Err(Error::NumericalIntegrity(format!(
                "inner-product table not PSD: min eigenvalue {min_eig:e} below -{tol:e}"
            )));
        }
        Ok(())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let mat = DMatrix::from_row_slice(self.m, self.m, &self.entries);
        SymmetricEigen::new(mat)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn base_count(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[a * self.m + b]
    }

    pub fn trace(&self) -> f64 {
        (0..self.m).map(|a| self.get(a, a)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.m).map(<[f64]>::to_vec).collect()
    }

    /// `u^T G v` for raw coefficient vectors.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut total = 0.0;
        for (a, ua) in u.iter().enumerate() {
            if *ua == 0.0 {
                continue;
            }
            let row = &self.entries[a * self.m..(a + 1) * self.m];
            let rv: f64 = row.iter().zip(v).map(|(g, vb)| g * vb).sum();
            total += ua * rv;
        }
        total
    }

    /// `<A, B>_H`.
    pub fn inner(&self, a: &WeightedEmbedding, b: &WeightedEmbedding) -> Result<f64> {
        self.check_len(a)?;
        self.check_len(b)?;
        Ok(self.bilinear(&a.coefficients, &b.coefficients))
    }

    /// `|A - B|_H^2`, clamped at zero within tolerance.
    pub fn dist_sq(&self, a: &WeightedEmbedding, b: &WeightedEmbedding) -> Result<f64> {
        self.check_len(a)?;
        self.check_len(b)?;
        let diff: Vec<f64> = a.coefficients.iter().zip(&b.coefficients).map(|(x, y)| x - y).collect();
        self.clamp_sq(self.bilinear(&diff, &diff))
    }

    fn clamp_sq(&self, q: f64) -> Result<f64> {
        if q >= 0.0 {
            return Ok(q);
        }
        let tol = CLAMP_REL_TOL * self.trace().abs();
        if q >= -tol {
            Ok(0.0)
        } else {
            Err(Error::NumericalIntegrity(format!(
                "squared RKHS norm {q:e} below clamp tolerance -{tol:e}"
            )))
        }
    }

    fn check_len(&self, e: &WeightedEmbedding) -> Result<()> {
        if e.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                actual: e.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pt(c: &[f64]) -> SamplePoint {
        SamplePoint::new(c.to_vec()).unwrap()
    }

    fn single(c: &[f64]) -> EmpiricalDistribution {
        EmpiricalDistribution::uniform(vec![pt(c)]).unwrap()
    }

    #[test]
    fn rbf_at_zero_distance_is_one() {
        let k = KernelSpec::rbf(0.7).unwrap();
        assert_eq!(kernel_eval(&k, &pt(&[1.0, 2.0]), &pt(&[1.0, 2.0])).unwrap(), 1.0);
    }

    #[test]
    fn rbf_unit_distance() {
        let k = KernelSpec::rbf(1.0).unwrap();
        let v = kernel_eval(&k, &pt(&[0.0, 0.0]), &pt(&[0.6, 0.8])).unwrap();
        assert_relative_eq!(v, (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(v, 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn kernel_rejects_mismatched_dims() {
        let k = KernelSpec::Linear;
        assert!(matches!(
            kernel_eval(&k, &pt(&[1.0]), &pt(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bad_bandwidth_rejected() {
        assert!(KernelSpec::rbf(0.0).is_err());
        assert!(KernelSpec::rbf(f64::NAN).is_err());
    }

    #[test]
    fn median_heuristic_small_cases() {
        assert_eq!(median_heuristic(&[pt(&[0.0]), pt(&[1.0])]).unwrap(), 1.0);
        // squared distances {1, 9, 4} -> median 4
        assert_eq!(median_heuristic(&[pt(&[0.0]), pt(&[1.0]), pt(&[3.0])]).unwrap(), 2.0);
    }

    #[test]
    fn median_heuristic_degenerate() {
        assert!(matches!(
            median_heuristic(&[pt(&[0.0])]),
            Err(Error::DegenerateBandwidth(_))
        ));
        let same = vec![pt(&[2.0, 1.0]); 4];
        assert!(matches!(median_heuristic(&same), Err(Error::DegenerateBandwidth(_))));
    }

    #[test]
    fn median_heuristic_duplicate_heavy_falls_back() {
        // five copies of 0 and one 2: 15 pairs, 10 zero, 5 at distance^2 = 4
        let mut pts = vec![pt(&[0.0]); 5];
        pts.push(pt(&[2.0]));
        assert_eq!(median_heuristic(&pts).unwrap(), 2.0);
    }

    #[test]
    fn median_heuristic_even_pair_count() {
        // 4 points on a line: pairs {1, 4, 9, 1, 4, 1} -> sorted 1,1,1,4,4,9 -> (1+4)/2
        let pts = vec![pt(&[0.0]), pt(&[1.0]), pt(&[2.0]), pt(&[3.0])];
        assert_relative_eq!(median_heuristic(&pts).unwrap(), 2.5f64.sqrt());
    }

    #[test]
    fn kme_inner_basic() {
        let k = KernelSpec::rbf(1.0).unwrap();
        let a = single(&[0.3, -0.2]);
        assert_eq!(kme_inner(&a, &a, &k).unwrap(), 1.0);
        let b = single(&[1.3, -0.2]);
        assert_relative_eq!(kme_inner(&a, &b, &k).unwrap(), (-0.5f64).exp());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let r = EmpiricalDistribution::new(vec![pt(&[0.0]), pt(&[1.0])], vec![0.5, 0.6]);
        assert!(r.is_err());
    }

    #[test]
    fn one_distribution_table() {
        let k = KernelSpec::rbf(1.0).unwrap();
        let d = EmpiricalDistribution::uniform(vec![pt(&[0.0]), pt(&[2.0])]).unwrap();
        let t = InnerProductTable::build(&[d], &k).unwrap();
        assert_eq!(t.base_count(), 1);
        assert!(t.get(0, 0) >= 0.0);
    }

    #[test]
    fn duplicated_distribution_gives_identical_rows() {
        let k = KernelSpec::rbf(0.8).unwrap();
        let d = EmpiricalDistribution::uniform(vec![pt(&[0.0, 1.0]), pt(&[2.0, 0.5])]).unwrap();
        let e = single(&[-1.0, 0.0]);
        let t = InnerProductTable::build(&[d.clone(), d, e], &k).unwrap();
        let rows = t.rows();
        assert_eq!(rows[0], rows[1]);
    }

    #[test]
    fn dist_sq_of_basis_pair() {
        let t =
            InnerProductTable::from_rows(vec![vec![1.0, 0.3, 0.1], vec![0.3, 1.0, 0.2], vec![0.1, 0.2, 1.0]]).unwrap();
        let e0 = WeightedEmbedding::basis(3, 0);
        let e2 = WeightedEmbedding::basis(3, 2);
        assert_relative_eq!(t.dist_sq(&e0, &e2).unwrap(), 1.0 - 0.2 + 1.0);
        assert_eq!(t.dist_sq(&e0, &e0).unwrap(), 0.0);
    }

    #[test]
    fn non_psd_table_rejected() {
        let r = InnerProductTable::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(r, Err(Error::NumericalIntegrity(_))));
    }

    #[test]
    fn asymmetric_table_rejected() {
        let r = InnerProductTable::from_rows(vec![vec![1.0, 0.5], vec![0.4, 1.0]]);
        assert!(matches!(r, Err(Error::NumericalIntegrity(_))));
    }

    #[test]
    fn mixture_special_cases() {
        let alpha = [0.5, 0.3, 0.2];
        let full = mixture_coefficients(&[1.0, 1.0, 1.0], &alpha).unwrap();
        assert_eq!(full.coefficients(), &alpha);
        let one = mixture_coefficients(&[0.0, 0.4, 0.0], &alpha).unwrap();
        assert_eq!(one.coefficients(), &[0.0, 1.0, 0.0]);
        let zero = mixture_coefficients(&[0.0, 0.0, 0.0], &alpha).unwrap();
        assert_eq!(zero.coefficients(), &alpha);
    }

    #[test]
    fn mixture_zero_matches_small_uniform_limit() {
        let alpha = [0.5, 0.3, 0.2];
        let zero = mixture_coefficients(&[0.0; 3], &alpha).unwrap();
        let eps = mixture_coefficients(&[1e-12; 3], &alpha).unwrap();
        for (a, b) in zero.coefficients().iter().zip(eps.coefficients()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn mixture_rejects_bad_inputs() {
        assert!(mixture_coefficients(&[1.2, 0.0], &[0.5, 0.5]).is_err());
        assert!(mixture_coefficients(&[1.0, 0.0], &[0.6, 0.6]).is_err());
        assert!(mixture_coefficients(&[1.0], &[0.5, 0.5]).is_err());
    }
}
