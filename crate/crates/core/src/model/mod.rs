//! Coefficient sets `(B, b, σ)` of the distribution-dependent SDE
//!
//! ```text
//! dX_t = (B_t + b_t)(X_t, L_{X_t}) dt + σ_t(X_t) dW_t
//! ```
//!
//! together with their spatial gradients and Lions-derivative kernels.
//!
//! Measure dependence goes through a per-step *summary*: a model declares a
//! fixed-length vector of statistics of the empirical measure (its mean,
//! feature averages `μ(f_i)`, ...) that [`Coefficients::summarize`] computes
//! once per time step. Every pointwise evaluation then takes the summary in
//! place of the measure, keeping a full ensemble step `O(N)`.
//!
//! Matrix outputs are row-major `d × d` slices. Lions kernels follow the
//! convention that rows index the drift component and columns the tangent
//! component at the atom `y`. `diffusion_grad` is `d × d × d` with
//! `out[(a*d + b)*d + c] = ∂σ_ab / ∂x_c`.

mod builtin;
mod cylindrical;
mod mollify;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

pub use builtin::{DoubleWellMf, LinearMfOu};
pub use cylindrical::{build_cylindrical, CylindricalDini, CylindricalDriftSpec, FeatureKind, FeatureSpec, OuterKind};
pub use mollify::{bump, mollify_drift, Mollified, Mollifier, RadialPowerMollifier, QUADRATURE_POINTS};

pub trait Coefficients: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Length of the vector written by [`Coefficients::summarize`].
    fn summary_len(&self) -> usize {
        0
    }

    /// Statistics of the measure with row-major `atoms` that the pointwise
    /// evaluations depend on.
    fn summarize(&self, _t: f64, _atoms: &[f64], _out: &mut [f64]) {}

    /// `B_t(x, μ)`.
    fn drift_regular(&self, t: f64, x: &[f64], summary: &[f64], out: &mut [f64]);

    /// `b_t(x, μ)`; zero unless the model has a singular part.
    fn drift_singular(&self, _t: f64, _x: &[f64], _summary: &[f64], out: &mut [f64]) {
        fill_small(out, 0.0);
    }

    /// `∇B_t(·, μ)(x)`.
    fn regular_grad_x(&self, t: f64, x: &[f64], summary: &[f64], out: &mut [f64]);

    /// Gradient used for the singular part inside the tangent flow.
    fn singular_grad_x(&self, _t: f64, _x: &[f64], _summary: &[f64], out: &mut [f64]) {
        fill_small(out, 0.0);
    }

    /// `D^L(B_t + b_t)(x, μ)(y)`.
    fn lions_kernel(&self, t: f64, x: &[f64], summary: &[f64], y: &[f64], out: &mut [f64]);

    /// Number `m` of channels in the factorisation
    /// `kernel(x, y) = Σ_i coef_i(x) ⊗ feature_grad_i(y)`; zero when absent.
    fn separable_channels(&self) -> usize {
        0
    }

    /// `coef_i(t, x, μ)` for each channel, written as `m × d`.
    fn lions_coef(&self, _t: f64, _x: &[f64], _summary: &[f64], _out: &mut [f64]) {}

    /// `feature_grad_i(t, y)` for each channel, written as `m × d`.
    fn lions_feature_grad(&self, _t: f64, _y: &[f64], _out: &mut [f64]) {}

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);

    fn diffusion_grad(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        fill_small(out, 0.0);
    }

    /// `σ_t(x)^{-1}`. The default inverts [`Coefficients::diffusion`].
    fn diffusion_inverse(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let mut sigma = vec![0.0; d * d];
        self.diffusion(t, x, &mut sigma);
        invert(d, &sigma, out).ok_or_else(|| Error::SingularDiffusion { t, x: x.to_vec() })
    }

    /// `false` lets the solver skip the `∇σ` contraction.
    fn state_dependent_diffusion(&self) -> bool {
        true
    }

    /// `(B_t + b_t)(x, μ)`.
    #[inline]
    fn drift(&self, t: f64, x: &[f64], summary: &[f64], out: &mut [f64]) {
        let mut sing = [0.0f64; 8];
        let d = out.len();
        self.drift_regular(t, x, summary, out);
        if d <= sing.len() {
            self.drift_singular(t, x, summary, &mut sing[..d]);
            out.iter_mut().zip(&sing[..d]).for_each(|(o, s)| *o += s);
        } else {
            let mut sing = vec![0.0; d];
            self.drift_singular(t, x, summary, &mut sing);
            out.iter_mut().zip(&sing).for_each(|(o, s)| *o += s);
        }
    }

    /// `∇(B_t + b_t)(·, μ)(x)` as used by the tangent flow.
    #[inline]
    fn drift_grad_x(&self, t: f64, x: &[f64], summary: &[f64], out: &mut [f64]) {
        let mut stack = [0.0f64; 16];
        let mut heap;
        let sing: &mut [f64] = if out.len() <= stack.len() {
            &mut stack[..out.len()]
        } else {
            heap = vec![0.0; out.len()];
            &mut heap
        };
        self.regular_grad_x(t, x, summary, out);
        self.singular_grad_x(t, x, summary, sing);
        out.iter_mut().zip(sing.iter()).for_each(|(o, s)| *o += s);
    }
}

/// `out.fill(v)` without a `memset` call for the short rows used per particle.
#[inline(always)]
pub(crate) fn fill_small(out: &mut [f64], v: f64) {
    match out {
        [a] => *a = v,
        [a, b] => (*a, *b) = (v, v),
        [a, b, c, e] => (*a, *b, *c, *e) = (v, v, v, v),
        _ => out.fill(v),
    }
}

/// Summary of `mu` for `coeffs` at time `t`.
pub fn summarize(coeffs: &dyn Coefficients, t: f64, mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
    check_dim(coeffs, mu.dim())?;
    let mut s = vec![0.0; coeffs.summary_len()];
    coeffs.summarize(t, mu.atoms(), &mut s);
    Ok(s)
}

/// `(B_t + b_t)(x, μ)`.
pub fn eval_drift(coeffs: &dyn Coefficients, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
    check_dim(coeffs, x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("evaluation point must be finite"));
    }
    let s = summarize(coeffs, t, mu)?;
    let mut out = vec![0.0; x.len()];
    coeffs.drift(t, x, &s, &mut out);
    finite_or(out, t, x)
}

/// `∇(B_t + b_t)(·, μ)(x)`, row-major `d × d`.
pub fn eval_drift_grad_x(coeffs: &dyn Coefficients, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
    check_dim(coeffs, x.len())?;
    let s = summarize(coeffs, t, mu)?;
    let d = x.len();
    let mut out = vec![0.0; d * d];
    coeffs.drift_grad_x(t, x, &s, &mut out);
    finite_or(out, t, x)
}

/// `D^L(B_t + b_t)(x, μ)(y)`, row-major `d × d`.
pub fn eval_lions_kernel(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y: &[f64],
) -> Result<Vec<f64>> {
    check_dim(coeffs, x.len())?;
    check_dim(coeffs, y.len())?;
    let s = summarize(coeffs, t, mu)?;
    let d = x.len();
    let mut out = vec![0.0; d * d];
    coeffs.lions_kernel(t, x, &s, y, &mut out);
    finite_or(out, t, x)
}

/// Kernel reassembled from the separable channels, if the model has them.
pub fn reassembled_kernel(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    summary: &[f64],
    y: &[f64],
) -> Option<Vec<f64>> {
    let m = coeffs.separable_channels();
    if m == 0 {
        return None;
    }
    let d = coeffs.dim();
    let mut coef = vec![0.0; m * d];
    let mut feat = vec![0.0; m * d];
    coeffs.lions_coef(t, x, summary, &mut coef);
    coeffs.lions_feature_grad(t, y, &mut feat);
    let mut k = vec![0.0; d * d];
    for ch in 0..m {
        for a in 0..d {
            for c in 0..d {
                k[a * d + c] += coef[ch * d + a] * feat[ch * d + c];
            }
        }
    }
    Some(k)
}

fn check_dim(coeffs: &dyn Coefficients, got: usize) -> Result<()> {
    if coeffs.dim() != got {
        return Err(Error::DimensionMismatch {
            expected: coeffs.dim(),
            got,
        });
    }
    Ok(())
}

fn finite_or(out: Vec<f64>, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::ModelEvaluation { t, x: x.to_vec() })
    }
}

/// Gauss–Jordan inverse with partial pivoting; `None` if singular.
pub fn invert(d: usize, m: &[f64], out: &mut [f64]) -> Option<()> {
    let mut a = m.to_vec();
    fill_small(out, 0.0);
    for i in 0..d {
        out[i * d + i] = 1.0;
    }
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..d {
        let pivot = (col..d).max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs()))?;
        if a[pivot * d + col].abs() <= 1e-14 * scale {
            return None;
        }
        if pivot != col {
            for k in 0..d {
                a.swap(pivot * d + k, col * d + k);
                out.swap(pivot * d + k, col * d + k);
            }
        }
        let p = a[col * d + col];
        for k in 0..d {
            a[col * d + k] /= p;
            out[col * d + k] /= p;
        }
        for row in 0..d {
            if row != col {
                let f = a[row * d + col];
                if f != 0.0 {
                    for k in 0..d {
                        a[row * d + k] -= f * a[col * d + k];
                        out[row * d + k] -= f * out[col * d + k];
                    }
                }
            }
        }
    }
    Some(())
}

/// `out = m · v` for row-major `d × d` `m`.
#[inline]
pub fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (a, o) in out.iter_mut().enumerate() {
        *o = m[a * d..(a + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

/// Registry of built-in models, keyed by `name`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `B(x, μ) = a·x + c·mean(μ)`, `σ = sigma·I`.
    LinearMfOu {
        #[serde(default = "one")]
        dim: usize,
        a: f64,
        c: f64,
        sigma: f64,
    },
    /// `b(x, μ) = F(|x|^α, μ(f))` with a bounded-feature measure dependence.
    CylindricalDini(CylindricalDriftSpec),
    /// `B(x, μ) = x − x³ − κ(x − mean(μ))` per axis,
    /// `σ(x) = sigma·diag(1 + sigma_mod·tanh x_a)`.
    DoubleWellMf {
        #[serde(default = "one")]
        dim: usize,
        kappa: f64,
        sigma: f64,
        #[serde(default)]
        sigma_mod: f64,
    },
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::LinearMfOu { .. } => "linear_mf_ou",
            ModelSpec::CylindricalDini(_) => "cylindrical_dini",
            ModelSpec::DoubleWellMf { .. } => "double_well_mf",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::LinearMfOu { dim, .. } | ModelSpec::DoubleWellMf { dim, .. } => *dim,
            ModelSpec::CylindricalDini(spec) => spec.dim,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Coefficients>> {
        Ok(match self {
            ModelSpec::LinearMfOu { dim, a, c, sigma } => Arc::new(LinearMfOu::new(*dim, *a, *c, *sigma)?),
            ModelSpec::CylindricalDini(spec) => Arc::new(build_cylindrical(spec)?),
            ModelSpec::DoubleWellMf {
                dim,
                kappa,
                sigma,
                sigma_mod,
            } => Arc::new(DoubleWellMf::new(*dim, *kappa, *sigma, *sigma_mod)?),
        })
    }
}
