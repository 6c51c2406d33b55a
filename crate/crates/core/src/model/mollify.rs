//! Mollification by a compactly supported `C^∞` bump.
//!
//! `ρ(u) ∝ exp(−1/(1−|u|²))` on the unit ball, scaled to radius `δ`. The
//! convolution is evaluated on a fixed tensor Gauss–Legendre stencil, so
//! mollified coefficients are deterministic functions of their inputs.
//! Gradients use `∇(b * ρ_δ) = b * ∇ρ_δ`, which stays bounded for the
//! non-differentiable drifts this is meant for.

use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

use super::{fill_small, Coefficients};

/// Gauss–Legendre points per axis.
pub const QUADRATURE_POINTS: usize = 33;

/// Unnormalised bump `exp(−1/(1−|u|²))` on `|u| < 1`.
pub fn bump(u: &[f64]) -> f64 {
    let r2: f64 = u.iter().map(|v| v * v).sum();
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

/// Quadrature stencil for `f ↦ f * ρ_δ` and its gradient.
#[derive(Clone, Debug)]
pub struct Mollifier {
    dim: usize,
    delta: f64,
    /// Offsets `u_i` in the unit ball, `n × d`.
    nodes: Vec<f64>,
    /// Normalised `ρ` weights, summing to one.
    weights: Vec<f64>,
    /// `∇ρ(u_i)/δ` weights, `n × d`, scaled so linear maps differentiate exactly.
    grad_weights: Vec<f64>,
}

impl Mollifier {
    pub fn new(dim: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::arg(format!(
                "mollification radius must be positive, got {delta}"
            )));
        }
        if !(1..=2).contains(&dim) {
            return Err(Error::Unsupported(format!(
                "mollification is limited to d <= 2, got d = {dim}"
            )));
        }
        let rule = GaussLegendre::new(NonZeroUsize::new(QUADRATURE_POINTS).unwrap());
        let axis: Vec<(f64, f64)> = rule.iter().map(|(x, w)| (*x, *w)).collect();

        let mut nodes = Vec::new();
        let mut raw = Vec::new();
        let mut raw_grad = Vec::new();
        let mut push = |u: &[f64], w: f64| {
            let rho = bump(u);
            if rho <= 0.0 {
                return;
            }
            let r2: f64 = u.iter().map(|v| v * v).sum();
            let g = -2.0 / ((1.0 - r2) * (1.0 - r2));
            nodes.extend_from_slice(u);
            raw.push(w * rho);
            raw_grad.extend(u.iter().map(|uc| w * rho * g * uc));
        };
        match dim {
            1 => axis.iter().for_each(|&(x, w)| push(&[x], w)),
            _ => {
                for &(x, wx) in &axis {
                    for &(y, wy) in &axis {
                        push(&[x, y], wx * wy);
                    }
                }
            }
        }
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut grad_weights: Vec<f64> = raw_grad.iter().map(|g| g / (total * delta)).collect();
        // Gradient of x_c must come out as e_c: −δ Σ_i gw_ic u_ic = 1.
        for c in 0..dim {
            let s: f64 = -delta
                * grad_weights
                    .chunks_exact(dim)
                    .zip(nodes.chunks_exact(dim))
                    .map(|(g, u)| g[c] * u[c])
                    .sum::<f64>();
            grad_weights.chunks_exact_mut(dim).for_each(|g| g[c] /= s);
        }
        Ok(Self {
            dim,
            delta,
            nodes,
            weights,
            grad_weights,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Discrete moment `Σ_i w_i |u_i|^{2k}` of the normalised bump.
    pub fn even_moment(&self, k: u32) -> f64 {
        self.nodes
            .chunks_exact(self.dim)
            .zip(&self.weights)
            .map(|(u, w)| w * u.iter().map(|v| v * v).sum::<f64>().powi(k as i32))
            .sum()
    }

    /// `out = Σ_i w_i f(x − δu_i)` for `f: R^d → R^k`.
    pub fn smooth<F>(&self, x: &[f64], mut f: F, out: &mut [f64])
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let k = out.len();
        fill_small(out, 0.0);
        let mut z = vec![0.0; self.dim];
        let mut val = vec![0.0; k];
        for (u, w) in self.nodes.chunks_exact(self.dim).zip(&self.weights) {
            for ((zi, xi), ui) in z.iter_mut().zip(x).zip(u) {
                *zi = xi - self.delta * ui;
            }
            f(&z, &mut val);
            for (o, v) in out.iter_mut().zip(&val) {
                *o += w * v;
            }
        }
    }

    /// Gradient of the mollified map, row-major `k × d`.
    pub fn smooth_gradient<F>(&self, x: &[f64], mut f: F, out: &mut [f64])
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let d = self.dim;
        let k = out.len() / d;
        fill_small(out, 0.0);
        let mut z = vec![0.0; d];
        let mut val = vec![0.0; k];
        for (u, g) in self.nodes.chunks_exact(d).zip(self.grad_weights.chunks_exact(d)) {
            for ((zi, xi), ui) in z.iter_mut().zip(x).zip(u) {
                *zi = xi - self.delta * ui;
            }
            f(&z, &mut val);
            for a in 0..k {
                for c in 0..d {
                    out[a * d + c] += val[a] * g[c];
                }
            }
        }
    }
}

/// Mollified radial power `h_δ = |·|^α * ρ_δ` and its gradient.
///
/// Inside `|x| < SWITCH·δ` the stencil is applied directly. Outside, the
/// kink is out of the stencil's reach and the same convolution is summed as
/// its Laplacian series `Σ_k δ^{2k} A_k Δ^k |x|^α`, where
/// `Δ^k r^α = Π_{j<k}(α−2j)(α−2j+d−2) r^{α−2k}` and `A_k` comes from the
/// stencil's even moments. One `powf` per evaluation instead of one per node.
#[derive(Clone, Debug)]
pub struct RadialPowerMollifier {
    alpha: f64,
    stencil: Mollifier,
    switch_radius: f64,
    /// `δ^{2k} A_k Π_{j<k}(α−2j)(α−2j+d−2)`.
    series: Vec<f64>,
}

impl RadialPowerMollifier {
    pub const SWITCH: f64 = 4.0;
    const TERMS: u32 = 8;

    pub fn new(dim: usize, alpha: f64, delta: f64) -> Result<Self> {
        let stencil = Mollifier::new(dim, delta)?;
        let d = dim as f64;
        let mut series = Vec::with_capacity(Self::TERMS as usize);
        let mut poly = 1.0;
        let mut denom = 1.0;
        for k in 0..Self::TERMS {
            if k > 0 {
                let j = (k - 1) as f64;
                poly *= (alpha - 2.0 * j) * (alpha - 2.0 * j + d - 2.0);
                denom *= 2.0 * k as f64 * (d + 2.0 * j);
            }
            series.push(delta.powi(2 * k as i32) * stencil.even_moment(k) / denom * poly);
        }
        Ok(Self {
            alpha,
            switch_radius: Self::SWITCH * delta,
            stencil,
            series,
        })
    }

    pub fn delta(&self) -> f64 {
        self.stencil.delta()
    }

    pub fn switch_radius(&self) -> f64 {
        self.switch_radius
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let r = norm(x);
        if r < self.switch_radius {
            self.stencil_value(x)
        } else {
            self.series_value(r)
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let r = norm(x);
        if r < self.switch_radius {
            self.stencil_gradient(x, out)
        } else {
            self.series_gradient(x, r, out)
        }
    }

    pub fn stencil_value(&self, x: &[f64]) -> f64 {
        let mut out = [0.0];
        let alpha = self.alpha;
        self.stencil.smooth(x, |z, o| o[0] = norm(z).powf(alpha), &mut out);
        out[0]
    }

    pub fn stencil_gradient(&self, x: &[f64], out: &mut [f64]) {
        let alpha = self.alpha;
        self.stencil.smooth_gradient(x, |z, o| o[0] = norm(z).powf(alpha), out);
    }

    fn series_value(&self, r: f64) -> f64 {
        let inv2 = 1.0 / (r * r);
        let poly = self.series.iter().rev().fold(0.0, |acc, c| acc * inv2 + c);
        r.powf(self.alpha) * poly
    }

    fn series_gradient(&self, x: &[f64], r: f64, out: &mut [f64]) {
        let inv2 = 1.0 / (r * r);
        let poly = self
            .series
            .iter()
            .enumerate()
            .rev()
            .fold(0.0, |acc, (k, c)| acc * inv2 + c * (self.alpha - 2.0 * k as f64));
        let scale = r.powf(self.alpha - 2.0) * poly;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = scale * xi;
        }
    }
}

#[inline]
fn norm(x: &[f64]) -> f64 {
    if x.len() == 1 {
        x[0].abs()
    } else {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A coefficient set whose singular drift (and its Lions kernel) is
/// convolved with `ρ_δ`. Regular drift and diffusion pass through.
pub struct Mollified {
    inner: Arc<dyn Coefficients>,
    stencil: Mollifier,
}

impl Mollified {
    pub fn stencil(&self) -> &Mollifier {
        &self.stencil
    }
}

/// Convolve the singular drift of `coeffs` with the bump of radius `delta`.
pub fn mollify_drift(coeffs: Arc<dyn Coefficients>, delta: f64) -> Result<Mollified> {
    let stencil = Mollifier::new(coeffs.dim(), delta)?;
    Ok(Mollified { inner: coeffs, stencil })
}

impl Coefficients for Mollified {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn summary_len(&self) -> usize {
        self.inner.summary_len()
    }

    fn summarize(&self, t: f64, atoms: &[f64], out: &mut [f64]) {
        self.inner.summarize(t, atoms, out)
    }

    fn drift_regular(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        self.inner.drift_regular(t, x, s, out)
    }

    fn drift_singular(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        self.stencil
            .smooth(x, |z, o| self.inner.drift_singular(t, z, s, o), out)
    }

    fn regular_grad_x(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        self.inner.regular_grad_x(t, x, s, out)
    }

    fn singular_grad_x(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        self.stencil
            .smooth_gradient(x, |z, o| self.inner.drift_singular(t, z, s, o), out)
    }

    fn lions_kernel(&self, t: f64, x: &[f64], s: &[f64], y: &[f64], out: &mut [f64]) {
        self.stencil
            .smooth(x, |z, o| self.inner.lions_kernel(t, z, s, y, o), out)
    }

    fn separable_channels(&self) -> usize {
        self.inner.separable_channels()
    }

    fn lions_coef(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        self.stencil.smooth(x, |z, o| self.inner.lions_coef(t, z, s, o), out)
    }

    fn lions_feature_grad(&self, t: f64, y: &[f64], out: &mut [f64]) {
        self.inner.lions_feature_grad(t, y, out)
    }

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.diffusion(t, x, out)
    }

    fn diffusion_grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.diffusion_grad(t, x, out)
    }

    fn diffusion_inverse(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner.diffusion_inverse(t, x, out)
    }

    fn state_dependent_diffusion(&self) -> bool {
        self.inner.state_dependent_diffusion()
    }
}
