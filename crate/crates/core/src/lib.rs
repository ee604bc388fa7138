//! Unbiased Boltzmann sampling with stochastically perturbed flows.
//!
//! The central object is a perturbed flow: an invertible map `f: z -> x`
//! (here a probability-flow ODE driven by an analytic Gaussian-mixture
//! score, or an affine reference flow) with Gaussian noise appended to the
//! forward and backward directions,
//!
//! ```text
//! forward:   x = f(z)      + sigma_f        * eps
//! backward:  z = f^-1(x)   - sigma_b(x)     * eps_tilde
//! ```
//!
//! A trajectory `z -> x` carries a generalized work
//! `W = u_X(x) - u_Z(z) - dS`, where the entropy term
//! `dS = (|eps|^2 - |eps_tilde|^2)/2 + log|det Sigma_f / det Sigma_b|`
//! replaces the Jacobian log-determinant that deterministic-flow
//! reweighting needs. Metropolis Monte Carlo over trajectories with
//! acceptance `min(1, e^{-dW})` then samples the Boltzmann distribution
//! of the target exactly, for any positive backward scale.
//!
//! Modules:
//! - [`gmm`]: Gaussian-mixture targets with analytic energy, smoothed
//!   score, Laplacian and Hessian-vector products, plus an exact sampler.
//! - [`affine`]: diagonal affine reference flows with exact Jacobians.
//! - [`ode`]: the probability-flow ODE (Heun integrator, power-law time
//!   grid) with divergence-integrated and Hutchinson-estimated log-dets.
//! - [`perturb`]: perturbed maps, entropy/work assembly, trajectories.
//! - [`sigma_b`]: the trainable scalar backward-scale network and its
//!   gradient-descent training loop.
//! - [`sampler`]: Metropolis chains with partial coordinate updates, for
//!   the perturbed flow and the deterministic-flow baselines.
//! - [`diagnostics`]: running means, histograms, effective sample size,
//!   and per-step cost benchmarks.

pub mod affine;
pub mod diagnostics;
mod error;
pub mod flow;
pub mod gmm;
pub mod ode;
pub mod perturb;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod sigma_b;
mod vecmath;

pub use error::CoreError;
pub use flow::FlowMap;

/// Convenience result alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
