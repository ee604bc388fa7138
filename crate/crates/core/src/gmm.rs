//! Gaussian-mixture targets with diagonal covariances.
//!
//! The mixture provides everything the flows and baselines need in closed
//! form: Boltzmann energy `u(x) = -log p(x)`, the score of the
//! Gaussian-smoothed density `p(x; sigma)` (each covariance inflated by
//! `sigma^2 I`, so the smoothed mixture is again a mixture), its Laplacian
//! and Hessian-vector products, an exact sampler used as a verification
//! oracle, and maximum-responsibility mode assignment.
//!
//! All densities are evaluated in log space with log-sum-exp; there is no
//! raw-density path (a 1000-dimensional component density underflows).

use crate::error::check_dim;
use crate::vecmath::{dot, logsumexp, norm_sq};
use crate::{CoreError, Result};
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

const LOG_TWO_PI: f64 = 1.8378770664093453;

/// A mixture of `k` diagonal-covariance Gaussians in `dim` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "GmmSpecRaw", into = "GmmSpecRaw")]
pub struct GmmSpec {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

/// Wire form: `{dim, k, weights, means, variances}` with full-precision
/// floats. `k` is redundant and revalidated on input.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmSpecRaw {
    dim: usize,
    k: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl TryFrom<GmmSpecRaw> for GmmSpec {
    type Error = CoreError;

    fn try_from(raw: GmmSpecRaw) -> Result<Self> {
        if raw.k != raw.weights.len() {
            return Err(CoreError::invalid(format!(
                "component count k={} does not match weights length {}",
                raw.k,
                raw.weights.len()
            )));
        }
        if raw.means.iter().any(|m| m.len() != raw.dim)
            || raw.variances.iter().any(|v| v.len() != raw.dim)
        {
            return Err(CoreError::invalid(
                "means/variances rows must all have length dim",
            ));
        }
        GmmSpec::new(raw.weights, raw.means, raw.variances)
    }
}

impl From<GmmSpec> for GmmSpecRaw {
    fn from(spec: GmmSpec) -> Self {
        GmmSpecRaw {
            dim: spec.dim,
            k: spec.weights.len(),
            weights: spec.weights,
            means: spec.means,
            variances: spec.variances,
        }
    }
}

impl GmmSpec {
    /// Build a mixture, validating the invariants: weights sum to one
    /// (within 1e-12), every variance entry is positive, and all rows
    /// share one dimension.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(CoreError::invalid("mixture needs at least one component"));
        }
        if means.len() != k || variances.len() != k {
            return Err(CoreError::invalid(format!(
                "expected {k} means and variances, got {} and {}",
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(CoreError::invalid("dimension must be at least 1"));
        }
        for (j, (m, v)) in means.iter().zip(&variances).enumerate() {
            check_dim(dim, m.len())?;
            check_dim(dim, v.len())?;
            if let Some(bad) = v.iter().find(|&&d| !(d > 0.0) || !d.is_finite()) {
                return Err(CoreError::invalid(format!(
                    "component {j} has non-positive variance entry {bad}"
                )));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
            return Err(CoreError::invalid(format!(
                "weights must be non-negative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(GmmSpec {
            dim,
            weights,
            means,
            variances,
        })
    }

    /// Random mixture with equal weights, standard-normal means and
    /// diagonal variances drawn as `0.4 + |N(0.1, 0.5^2)|`.
    pub fn random(dim: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::random_scaled(dim, k, 1.0, rng)
    }

    /// Like [`GmmSpec::random`], with means multiplied by `mean_scale`.
    ///
    /// The unscaled recipe can leave modes overlapping at low dimension;
    /// mode-occupancy statistics need guaranteed separation, which a scale
    /// of a few provides.
    pub fn random_scaled(
        dim: usize,
        k: usize,
        mean_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim < 1 || k < 1 {
            return Err(CoreError::invalid(format!(
                "dim and k must be >= 1 (got dim={dim}, k={k})"
            )));
        }
        if !mean_scale.is_finite() {
            return Err(CoreError::invalid("mean_scale must be finite"));
        }
        let weights = vec![1.0 / k as f64; k];
        let means = (0..k)
            .map(|_| {
                (0..dim)
                    .map(|_| mean_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let variances = (0..k)
            .map(|_| {
                (0..dim)
                    .map(|_| 0.4 + (0.1 + 0.5 * rng.sample::<f64, _>(StandardNormal)).abs())
                    .collect()
            })
            .collect();
        GmmSpec::new(weights, means, variances)
    }

    /// A controlled corruption of this mixture, used as the "model"
    /// driving the flow: weights redrawn from a symmetric Dirichlet and
    /// means jittered by Gaussian noise of scale `mean_jitter`.
    pub fn corrupt(&self, mean_jitter: f64, weight_alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(mean_jitter >= 0.0) || !(weight_alpha > 0.0) {
            return Err(CoreError::invalid(
                "corruption needs mean_jitter >= 0 and weight_alpha > 0",
            ));
        }
        let gamma = Gamma::new(weight_alpha, 1.0)
            .map_err(|e| CoreError::invalid(format!("bad Dirichlet alpha: {e}")))?;
        let mut weights: Vec<f64> = (0..self.k()).map(|_| rng.sample(gamma)).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        // Renormalize the largest entry so the sum is exactly representable
        // near 1 even after division rounding.
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        let means = self
            .means
            .iter()
            .map(|m| {
                m.iter()
                    .map(|&mu| mu + mean_jitter * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        GmmSpec::new(weights, means, self.variances.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// Log-density of component `j` of the sigma-smoothed mixture at `x`,
    /// including the mixture weight.
    fn log_weighted_component(&self, j: usize, x: &[f64], sigma_sq: f64) -> f64 {
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for i in 0..self.dim {
            let v = self.variances[j][i] + sigma_sq;
            let d = x[i] - self.means[j][i];
            quad += d * d / v;
            logdet += v.ln();
        }
        self.weights[j].max(f64::MIN_POSITIVE).ln()
            - 0.5 * (self.dim as f64 * LOG_TWO_PI + logdet + quad)
    }

    fn log_components(&self, x: &[f64], sigma_sq: f64) -> Vec<f64> {
        (0..self.k())
            .map(|j| self.log_weighted_component(j, x, sigma_sq))
            .collect()
    }

    /// `log p(x)` via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(logsumexp(&self.log_components(x, 0.0)))
    }

    /// Boltzmann energy `u(x) = -log p(x)`.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.log_density(x)?)
    }

    /// Exact score of the smoothed density: `grad_x log p(x; sigma)`.
    pub fn score_smoothed(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_sigma(sigma)?;
        let mut out = vec![0.0; self.dim];
        self.score_smoothed_into(x, sigma, &mut out);
        Ok(out)
    }

    pub(crate) fn score_smoothed_into(&self, x: &[f64], sigma: f64, out: &mut [f64]) {
        let sigma_sq = sigma * sigma;
        let logs = self.log_components(x, sigma_sq);
        let logp = logsumexp(&logs);
        out.fill(0.0);
        for j in 0..self.k() {
            let resp = (logs[j] - logp).exp();
            if resp == 0.0 {
                continue;
            }
            for i in 0..self.dim {
                let v = self.variances[j][i] + sigma_sq;
                out[i] -= resp * (x[i] - self.means[j][i]) / v;
            }
        }
    }

    /// Exact Laplacian of `log p(x; sigma)`: responsibility-weighted
    /// component terms minus the squared score norm.
    pub fn divergence_score_smoothed(&self, x: &[f64], sigma: f64) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        check_sigma(sigma)?;
        Ok(self.laplacian_log_density(x, sigma * sigma))
    }

    pub(crate) fn laplacian_log_density(&self, x: &[f64], sigma_sq: f64) -> f64 {
        let logs = self.log_components(x, sigma_sq);
        let logp = logsumexp(&logs);
        let mut score = vec![0.0; self.dim];
        let mut weighted = 0.0;
        for j in 0..self.k() {
            let resp = (logs[j] - logp).exp();
            if resp == 0.0 {
                continue;
            }
            let mut grad_sq = 0.0;
            let mut trace_hess = 0.0;
            for i in 0..self.dim {
                let v = self.variances[j][i] + sigma_sq;
                let g = -(x[i] - self.means[j][i]) / v;
                grad_sq += g * g;
                trace_hess -= 1.0 / v;
                score[i] += resp * g;
            }
            weighted += resp * (grad_sq + trace_hess);
        }
        weighted - norm_sq(&score)
    }

    /// Exact Hessian-vector product `(hess_x log p(x; sigma)) u`.
    pub fn hvp_score_smoothed(&self, x: &[f64], sigma: f64, u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, u.len())?;
        check_sigma(sigma)?;
        let mut out = vec![0.0; self.dim];
        self.hvp_into(x, sigma * sigma, u, &mut out);
        Ok(out)
    }

    pub(crate) fn hvp_into(&self, x: &[f64], sigma_sq: f64, u: &[f64], out: &mut [f64]) {
        let logs = self.log_components(x, sigma_sq);
        let logp = logsumexp(&logs);
        out.fill(0.0);
        let mut score = vec![0.0; self.dim];
        for j in 0..self.k() {
            let resp = (logs[j] - logp).exp();
            if resp == 0.0 {
                continue;
            }
            let mut g_dot_u = 0.0;
            for i in 0..self.dim {
                let v = self.variances[j][i] + sigma_sq;
                g_dot_u -= (x[i] - self.means[j][i]) / v * u[i];
            }
            for i in 0..self.dim {
                let v = self.variances[j][i] + sigma_sq;
                let g = -(x[i] - self.means[j][i]) / v;
                out[i] += resp * (g * g_dot_u - u[i] / v);
                score[i] += resp * g;
            }
        }
        let s_dot_u = dot(&score, u);
        for i in 0..self.dim {
            out[i] -= score[i] * s_dot_u;
        }
    }

    /// The quadratic form `u^T (hess_x log p(x; sigma)) u` without
    /// materializing the product vector.
    pub(crate) fn hvp_quadratic_form(&self, x: &[f64], sigma_sq: f64, u: &[f64]) -> f64 {
        let logs = self.log_components(x, sigma_sq);
        let logp = logsumexp(&logs);
        let mut acc = 0.0;
        let mut score_dot_u = 0.0;
        for j in 0..self.k() {
            let resp = (logs[j] - logp).exp();
            if resp == 0.0 {
                continue;
            }
            let mut g_dot_u = 0.0;
            let mut u_h_u = 0.0;
            for i in 0..self.dim {
                let v = self.variances[j][i] + sigma_sq;
                let g = -(x[i] - self.means[j][i]) / v;
                g_dot_u += g * u[i];
                u_h_u -= u[i] * u[i] / v;
            }
            acc += resp * (g_dot_u * g_dot_u + u_h_u);
            score_dot_u += resp * g_dot_u;
        }
        acc - score_dot_u * score_dot_u
    }

    /// Draw `n` i.i.d. exact samples (categorical component choice, then a
    /// Gaussian draw). Verification oracle only; the samplers under test
    /// never see it.
    pub fn sample_exact(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        if n < 1 {
            return Err(CoreError::invalid("sample count must be >= 1"));
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }

    pub(crate) fn sample_one(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut u: f64 = rng.random();
        let mut j = self.k() - 1;
        for (idx, &w) in self.weights.iter().enumerate() {
            if u < w {
                j = idx;
                break;
            }
            u -= w;
        }
        (0..self.dim)
            .map(|i| {
                self.means[j][i]
                    + self.variances[j][i].sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    /// Index of the component with maximal responsibility at `x`; ties go
    /// to the lowest index.
    pub fn mode_assign(&self, x: &[f64]) -> Result<usize> {
        check_dim(self.dim, x.len())?;
        let logs = self.log_components(x, 0.0);
        let mut best = 0;
        for j in 1..logs.len() {
            if logs[j] > logs[best] {
                best = j;
            }
        }
        Ok(best)
    }

    /// Fraction of samples assigned to each mode.
    pub fn mode_occupancy(&self, samples: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut counts = vec![0usize; self.k()];
        for x in samples {
            counts[self.mode_assign(x)?] += 1;
        }
        let n = samples.len().max(1) as f64;
        Ok(counts.into_iter().map(|c| c as f64 / n).collect())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CoreError::invalid(format!(
            "smoothing scale must be finite and >= 0, got {sigma}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn standard_1d() -> GmmSpec {
        GmmSpec::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap()
    }

    #[test]
    fn log_density_standard_normal_at_mode() {
        let spec = standard_1d();
        let expected = -0.5 * LOG_TWO_PI;
        assert_abs_diff_eq!(spec.log_density(&[0.0]).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, -0.918_938_533_204_672_7, epsilon = 1e-9);
    }

    #[test]
    fn log_density_far_components_reduce_to_one() {
        let spec = GmmSpec::new(
            vec![0.5, 0.5],
            vec![vec![0.0, 0.0], vec![60.0, 60.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let x = [0.0, 0.0];
        let comp = -0.5 * (2.0 * LOG_TWO_PI);
        assert_abs_diff_eq!(
            spec.log_density(&x).unwrap(),
            0.5f64.ln() + comp,
            epsilon = 1e-9
        );
    }

    #[test]
    fn log_density_matches_naive_summation() {
        let mut r = rng(3);
        let spec = GmmSpec::random(2, 3, &mut r).unwrap();
        for _ in 0..20 {
            let x = crate::rng::standard_normal_vec(&mut r, 2);
            // naive oracle: direct density summation without log-sum-exp
            let mut p = 0.0;
            for j in 0..spec.k() {
                let mut comp = spec.weights()[j];
                for i in 0..2 {
                    let v = spec.variances()[j][i];
                    let d = x[i] - spec.means()[j][i];
                    comp *= (-0.5 * d * d / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                p += comp;
            }
            let got = spec.log_density(&x).unwrap();
            assert!((got - p.ln()).abs() / p.ln().abs().max(1.0) < 1e-10);
        }
    }

    #[test]
    fn log_density_rejects_dim_mismatch() {
        let spec = standard_1d();
        assert!(matches!(
            spec.log_density(&[0.0, 1.0]),
            Err(CoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn score_single_gaussian_closed_form() {
        let spec = standard_1d();
        // -(x - mu) / (d + sigma^2) = -1/2
        let s = spec.score_smoothed(&[1.0], 1.0).unwrap();
        assert_abs_diff_eq!(s[0], -0.5, epsilon = 1e-14);
    }

    #[test]
    fn score_vanishes_at_symmetric_point() {
        let spec = GmmSpec::new(
            vec![0.5, 0.5],
            vec![vec![-2.0], vec![2.0]],
            vec![vec![0.7], vec![0.7]],
        )
        .unwrap();
        let s = spec.score_smoothed(&[0.0], 0.3).unwrap();
        assert_abs_diff_eq!(s[0], 0.0, epsilon = 1e-14);
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    #[test]
    fn score_matches_finite_differences_of_smoothed_density() {
        let mut r = rng(11);
        let spec = GmmSpec::random(3, 3, &mut r).unwrap();
        let sigma = 0.4;
        // the smoothed mixture is again a mixture with inflated variances
        let inflated = GmmSpec::new(
            spec.weights().to_vec(),
            spec.means().to_vec(),
            spec.variances()
                .iter()
                .map(|v| v.iter().map(|d| d + sigma * sigma).collect())
                .collect(),
        )
        .unwrap();
        for _ in 0..5 {
            let x = crate::rng::standard_normal_vec(&mut r, 3);
            let s = spec.score_smoothed(&x, sigma).unwrap();
            for i in 0..3 {
                let fd = central_diff(|y| inflated.log_density(y).unwrap(), &x, i, 1e-5);
                let denom = fd.abs().max(1e-3);
                assert!(
                    ((s[i] - fd) / denom).abs() < 1e-5,
                    "score[{i}]={} vs fd={}",
                    s[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn score_at_zero_sigma_matches_log_density_gradient() {
        let mut r = rng(17);
        for dim in [1usize, 3, 5] {
            let spec = GmmSpec::random(dim, 2, &mut r).unwrap();
            let x = crate::rng::standard_normal_vec(&mut r, dim);
            let s = spec.score_smoothed(&x, 0.0).unwrap();
            for i in 0..dim {
                let fd = central_diff(|y| spec.log_density(y).unwrap(), &x, i, 1e-5);
                assert!((s[i] - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn divergence_single_gaussian_closed_form() {
        let spec = standard_1d();
        for x in [-2.0, 0.0, 1.7] {
            let d = spec.divergence_score_smoothed(&[x], 1.0).unwrap();
            assert_abs_diff_eq!(d, -0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn divergence_single_gaussian_multidim_is_sum_of_rates() {
        let spec = GmmSpec::new(
            vec![1.0],
            vec![vec![0.0, 1.0, -2.0]],
            vec![vec![0.5, 1.0, 2.0]],
        )
        .unwrap();
        let sigma = 0.7;
        let expected: f64 = [0.5, 1.0, 2.0]
            .iter()
            .map(|d| -1.0 / (d + sigma * sigma))
            .sum();
        let got = spec
            .divergence_score_smoothed(&[0.3, -0.2, 0.9], sigma)
            .unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn divergence_matches_finite_difference_laplacian() {
        let mut r = rng(23);
        let spec = GmmSpec::random(3, 3, &mut r).unwrap();
        let sigma = 0.5;
        let inflated_logp = |y: &[f64]| {
            let logs = spec.log_components(y, sigma * sigma);
            logsumexp(&logs)
        };
        let x = crate::rng::standard_normal_vec(&mut r, 3);
        let h = 1e-4;
        let mut lap = 0.0;
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            lap += (inflated_logp(&xp) - 2.0 * inflated_logp(&x) + inflated_logp(&xm)) / (h * h);
        }
        let got = spec.divergence_score_smoothed(&x, sigma).unwrap();
        assert!(
            ((got - lap) / lap.abs().max(1e-3)).abs() < 1e-4,
            "analytic {got} vs fd {lap}"
        );
    }

    #[test]
    fn hvp_single_gaussian_is_diagonal() {
        let spec = GmmSpec::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![0.5, 2.0]]).unwrap();
        let sigma = 1.0;
        let u = vec![1.0, -2.0];
        let got = spec.hvp_score_smoothed(&[0.4, -1.2], sigma, &u).unwrap();
        assert_abs_diff_eq!(got[0], -u[0] / (0.5 + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], -u[1] / (2.0 + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn hvp_zero_vector_is_zero() {
        let mut r = rng(5);
        let spec = GmmSpec::random(4, 2, &mut r).unwrap();
        let x = crate::rng::standard_normal_vec(&mut r, 4);
        let got = spec.hvp_score_smoothed(&x, 0.2, &[0.0; 4]).unwrap();
        assert!(got.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hvp_trace_identity_matches_divergence() {
        let mut r = rng(7);
        let spec = GmmSpec::random(4, 3, &mut r).unwrap();
        let sigma = 0.6;
        let x = crate::rng::standard_normal_vec(&mut r, 4);
        let mut trace = 0.0;
        for i in 0..4 {
            let mut e = vec![0.0; 4];
            e[i] = 1.0;
            trace += spec.hvp_score_smoothed(&x, sigma, &e).unwrap()[i];
        }
        let div = spec.divergence_score_smoothed(&x, sigma).unwrap();
        assert_abs_diff_eq!(trace, div, epsilon = 1e-9);
        // the quadratic-form path agrees with the materialized product
        let u = crate::rng::standard_normal_vec(&mut r, 4);
        let q = spec.hvp_quadratic_form(&x, sigma * sigma, &u);
        let full = dot(&spec.hvp_score_smoothed(&x, sigma, &u).unwrap(), &u);
        assert_abs_diff_eq!(q, full, epsilon = 1e-10);
    }

    #[test]
    fn random_spec_shapes_and_weights() {
        let mut r = rng(1);
        let spec = GmmSpec::random(1000, 10, &mut r).unwrap();
        assert_eq!(spec.dim(), 1000);
        assert_eq!(spec.k(), 10);
        for &w in spec.weights() {
            assert_abs_diff_eq!(w, 0.1, epsilon = 1e-15);
        }
        let single = GmmSpec::random(1, 1, &mut r).unwrap();
        assert_eq!(single.weights(), &[1.0]);
        assert!(GmmSpec::random(0, 1, &mut r).is_err());
        assert!(GmmSpec::random(1, 0, &mut r).is_err());
    }

    #[test]
    fn random_variances_at_least_point_four() {
        let mut r = rng(2);
        for _ in 0..10 {
            let spec = GmmSpec::random(8, 4, &mut r).unwrap();
            let min = spec
                .variances()
                .iter()
                .flatten()
                .copied()
                .fold(f64::INFINITY, f64::min);
            assert!(min >= 0.4);
        }
    }

    #[test]
    fn mode_assign_recovers_component_at_mean() {
        let mut r = rng(9);
        let spec = GmmSpec::random_scaled(6, 5, 8.0, &mut r).unwrap();
        for j in 0..spec.k() {
            let mean = spec.means()[j].clone();
            assert_eq!(spec.mode_assign(&mean).unwrap(), j);
        }
    }

    #[test]
    fn mode_assign_tie_breaks_to_lowest_index() {
        let spec = GmmSpec::new(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap();
        assert_eq!(spec.mode_assign(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn mode_occupancy_of_exact_samples_is_uniform() {
        let mut r = rng(13);
        let spec = GmmSpec::random_scaled(8, 10, 8.0, &mut r).unwrap();
        let samples = spec.sample_exact(100_000, &mut r).unwrap();
        let occ = spec.mode_occupancy(&samples).unwrap();
        for &o in &occ {
            assert!((o - 0.1).abs() < 0.01, "occupancy {o}");
        }
    }

    #[test]
    fn exact_sampler_mean_is_near_zero() {
        let mut r = rng(21);
        let spec = standard_1d();
        let samples = spec.sample_exact(1_000_000, &mut r).unwrap();
        let mean: f64 = samples.iter().map(|s| s[0]).sum::<f64>() / samples.len() as f64;
        assert!(mean.abs() < 4e-3, "mean {mean}");
    }

    #[test]
    fn exact_sampler_component_frequencies() {
        let mut r = rng(31);
        let spec = GmmSpec::new(
            vec![0.5, 0.5],
            vec![vec![-40.0], vec![40.0]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap();
        let samples = spec.sample_exact(1_000_000, &mut r).unwrap();
        let f0 = samples.iter().filter(|s| s[0] < 0.0).count() as f64 / samples.len() as f64;
        assert!((f0 - 0.5).abs() < 0.002, "freq {f0}");
    }

    #[test]
    fn exact_sampler_mean_energy_standard_normal() {
        let mut r = rng(41);
        let spec = standard_1d();
        let samples = spec.sample_exact(1_000_000, &mut r).unwrap();
        let mean_e: f64 = samples
            .iter()
            .map(|s| spec.energy(s).unwrap())
            .sum::<f64>()
            / samples.len() as f64;
        let expected = 0.5 + 0.5 * LOG_TWO_PI; // 1.4189...
        assert!((mean_e - expected).abs() < 0.01, "mean energy {mean_e}");
    }

    #[test]
    fn log_density_invariant_under_component_permutation() {
        let mut r = rng(51);
        let spec = GmmSpec::random(3, 4, &mut r).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted = GmmSpec::new(
            perm.iter().map(|&j| spec.weights()[j]).collect(),
            perm.iter().map(|&j| spec.means()[j].clone()).collect(),
            perm.iter().map(|&j| spec.variances()[j].clone()).collect(),
        )
        .unwrap();
        for _ in 0..10 {
            let x = crate::rng::standard_normal_vec(&mut r, 3);
            assert_abs_diff_eq!(
                spec.log_density(&x).unwrap(),
                permuted.log_density(&x).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn energy_is_translation_covariant() {
        let mut r = rng(61);
        let spec = GmmSpec::random(3, 3, &mut r).unwrap();
        let c = [0.7, -1.3, 2.2];
        let shifted = GmmSpec::new(
            spec.weights().to_vec(),
            spec.means()
                .iter()
                .map(|m| m.iter().zip(&c).map(|(a, b)| a + b).collect())
                .collect(),
            spec.variances().to_vec(),
        )
        .unwrap();
        for _ in 0..10 {
            let x = crate::rng::standard_normal_vec(&mut r, 3);
            let xc: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a + b).collect();
            assert_abs_diff_eq!(
                spec.energy(&x).unwrap(),
                shifted.energy(&xc).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn corrupt_keeps_shape_and_changes_weights() {
        let mut r = rng(71);
        let spec = GmmSpec::random(4, 3, &mut r).unwrap();
        let model = spec.corrupt(0.3, 1.0, &mut r).unwrap();
        assert_eq!(model.dim(), spec.dim());
        assert_eq!(model.k(), spec.k());
        assert!((model.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_ne!(model.weights(), spec.weights());
        assert_eq!(model.variances(), spec.variances());
    }

    #[test]
    fn json_round_trip_preserves_values_exactly() {
        let mut r = rng(81);
        let spec = GmmSpec::random(5, 3, &mut r).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: GmmSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        assert!(json.contains("\"k\":3"));
    }

    #[test]
    fn json_rejects_inconsistent_k() {
        let json = r#"{"dim":1,"k":2,"weights":[1.0],"means":[[0.0]],"variances":[[1.0]]}"#;
        assert!(serde_json::from_str::<GmmSpec>(json).is_err());
    }
}
