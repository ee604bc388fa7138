//! The invertible-map abstraction shared by the ODE flow and the affine
//! reference flows.

use crate::Result;

/// An invertible differentiable map `f: z -> x` between spaces of equal
/// dimension. Implementations must be deterministic: identical inputs give
/// bit-identical outputs.
pub trait FlowMap: Send + Sync {
    fn dim(&self) -> usize;

    /// `x = f(z)`.
    fn forward(&self, z: &[f64]) -> Result<Vec<f64>>;

    /// `z = f^{-1}(x)`.
    fn inverse(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl<T: FlowMap + ?Sized> FlowMap for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        (**self).forward(z)
    }

    fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).inverse(x)
    }
}
