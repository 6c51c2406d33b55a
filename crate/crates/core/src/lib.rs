//! Interacting-particle simulation of distribution-dependent (McKean–Vlasov)
//! SDEs together with their tangent flow, and Monte Carlo estimators of
//! intrinsic (Lions) derivatives of `μ ↦ E f(X_T)`.
//!
//! The crate is organised bottom-up:
//!
//! * [`measure`]: equal-weight empirical measures, `W₂`, shift push-forwards.
//! * [`model`]: coefficient sets `(B, b, σ)` with gradients and Lions kernels,
//!   the built-in model registry and mollification.
//! * [`rng`]: counter-based Gaussian streams keyed by
//!   `(seed, replication, particle, step, axis)`.
//! * [`solver`]: Euler–Maruyama co-simulation of particles and tangents.
//! * [`bismut`]: the Malliavin-weight estimator.
//! * [`oracle`]: finite-difference and closed-form reference values and the
//!   gradient/total-variation shape sweeps.
//! * [`config`]: serialisable experiment descriptions shared with the CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bismut;
pub mod config;
pub mod error;
pub mod functional;
pub mod measure;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod solver;
pub mod stats;

pub use bismut::{
    accumulate, estimate_intrinsic_derivative, gradient_norm_estimate, weight_at, EstimatorResult, GateFunction,
    GateKind, NormEstimate, WeightAccumulator,
};
pub use config::{ExperimentConfig, FunctionSpec, PhiSpec, TaskSpec};
pub use error::{Error, Result};
pub use functional::Observable;
pub use measure::{EmpiricalMeasure, Perturbation};
pub use model::{Coefficients, ModelSpec};
pub use oracle::{FdConfig, LinearMfParams};
pub use rng::{CounterRng, NoiseSource, RngSpec};
pub use solver::{Budget, InitialLaw, TimeGrid, TrajectoryBundle};
