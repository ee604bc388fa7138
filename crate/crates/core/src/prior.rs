//! The latent prior `q(z)`.
//!
//! The probability-flow ODE starts from the isotropic Gaussian
//! `N(0, t_max^2 I)`; affine test flows use unit scale. Coordinates are
//! independent, which is what makes partial Metropolis updates of `z`
//! possible.

use crate::{CoreError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    dim: usize,
    sigma: f64,
}

impl GaussianPrior {
    pub fn new(dim: usize, sigma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::invalid("prior dimension must be >= 1"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CoreError::invalid(format!(
                "prior scale must be positive and finite, got {sigma}"
            )));
        }
        Ok(GaussianPrior { dim, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianPrior { dim, sigma: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Normalized energy `u_Z(z) = |z|^2 / (2 sigma^2) + (D/2) log(2 pi sigma^2)`.
    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        crate::error::check_dim(self.dim, z.len())?;
        let quad = crate::vecmath::norm_sq(z) / (2.0 * self.sigma * self.sigma);
        let norm = 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln();
        Ok(quad + norm)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dim).map(|_| self.sample_coord(rng)).collect()
    }

    /// One marginal draw; used by partial coordinate updates.
    pub fn sample_coord(&self, rng: &mut impl Rng) -> f64 {
        self.sigma * rng.sample::<f64, _>(StandardNormal)
    }
}
