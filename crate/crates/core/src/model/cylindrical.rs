//! Cylindrical singular drifts `b(x, μ) = F(|x|^α, μ(f_1), …, μ(f_m))·𝟙`.
//!
//! `h(x) = |x|^α` with `α ∈ (0, ½)` is Dini continuous but not Lipschitz at
//! the origin. The measure enters only through bounded smooth features, so
//! the Lions kernel `Σ_i ∂_{z_i}F · ∇f_i(y)` is smooth and separable.
//!
//! The particle flow sees the exact drift. The tangent flow sees
//! `∂_r F · 𝟙 ⊗ ∇(h * ρ_δ)` when `mollify_radius > 0`, else the a.e.
//! gradient `α|x|^{α−2}x` (zero at the origin).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mollify::RadialPowerMollifier;
use super::{fill_small, Coefficients};

/// Scalar outer function `F(r, z)`; the drift is `F·𝟙` in every axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterKind {
    /// `F = r`
    Radial,
    /// `F = Σ z_i`
    Feature,
    /// `F = tanh(r + Σ z_i)`
    TanhSum,
    /// `F = r + Σ z_i`
    Sum,
}

impl OuterKind {
    /// `(F, ∂_r F, ∂_z F)`; `∂_z F` is the same for every channel.
    #[inline]
    fn eval(self, r: f64, zsum: f64) -> (f64, f64, f64) {
        match self {
            OuterKind::Radial => (r, 1.0, 0.0),
            OuterKind::Feature => (zsum, 0.0, 1.0),
            OuterKind::TanhSum => {
                let th = (r + zsum).tanh();
                let s = 1.0 - th * th;
                (th, s, s)
            }
            OuterKind::Sum => (r + zsum, 1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Sin,
    Cos,
    Tanh,
}

/// Feature `f(y) = kind(y[axis])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    #[serde(default)]
    pub axis: usize,
}

impl FeatureSpec {
    #[inline]
    fn value(&self, y: &[f64]) -> f64 {
        let v = y[self.axis];
        match self.kind {
            FeatureKind::Sin => v.sin(),
            FeatureKind::Cos => v.cos(),
            FeatureKind::Tanh => v.tanh(),
        }
    }

    /// Derivative along `axis`; the gradient vanishes elsewhere.
    #[inline]
    fn slope(&self, y: &[f64]) -> f64 {
        let v = y[self.axis];
        match self.kind {
            FeatureKind::Sin => v.cos(),
            FeatureKind::Cos => -v.sin(),
            FeatureKind::Tanh => {
                let th = v.tanh();
                1.0 - th * th
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylindricalDriftSpec {
    #[serde(default = "one")]
    pub dim: usize,
    /// Exponent of `h(x) = |x|^α`.
    pub alpha: f64,
    pub outer: OuterKind,
    #[serde(default)]
    pub features: Vec<FeatureSpec>,
    /// Constant diffusion `σ·I`.
    #[serde(default = "unit")]
    pub sigma: f64,
    /// Radius `δ` of the mollifier used in the tangent flow; 0 selects the
    /// a.e. gradient.
    #[serde(default = "default_radius")]
    pub mollify_radius: f64,
    /// Regular part `B(x) = −confinement·x`.
    #[serde(default)]
    pub confinement: f64,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn default_radius() -> f64 {
    1e-3
}

pub struct CylindricalDini {
    spec: CylindricalDriftSpec,
    radial: Option<RadialPowerMollifier>,
    feature_grad_sup: Vec<f64>,
}

/// Validate `spec` and assemble its coefficient set.
pub fn build_cylindrical(spec: &CylindricalDriftSpec) -> Result<CylindricalDini> {
    let d = spec.dim;
    if d == 0 {
        return Err(Error::arg("cylindrical_dini: dim must be positive"));
    }
    if !(spec.alpha > 0.0 && spec.alpha < 0.5) {
        return Err(Error::arg(format!(
            "cylindrical_dini: alpha must lie in (0, 1/2), got {}",
            spec.alpha
        )));
    }
    if !(spec.sigma > 0.0) || !spec.sigma.is_finite() || !spec.confinement.is_finite() {
        return Err(Error::arg(
            "cylindrical_dini: sigma must be positive and confinement finite",
        ));
    }
    if !(spec.mollify_radius >= 0.0) || !spec.mollify_radius.is_finite() {
        return Err(Error::arg("cylindrical_dini: mollify_radius must be nonnegative"));
    }
    if let Some(f) = spec.features.iter().find(|f| f.axis >= d) {
        return Err(Error::arg(format!(
            "cylindrical_dini: feature axis {} out of range for d = {d}",
            f.axis
        )));
    }
    let radial = if spec.mollify_radius > 0.0 {
        Some(RadialPowerMollifier::new(d, spec.alpha, spec.mollify_radius)?)
    } else {
        None
    };
    let feature_grad_sup = spec
        .features
        .iter()
        .map(|f| {
            let mut y = vec![0.0; d];
            (0..=4000)
                .map(|i| {
                    y[f.axis] = -10.0 + i as f64 * 5e-3;
                    f.slope(&y).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(CylindricalDini {
        spec: spec.clone(),
        radial,
        feature_grad_sup,
    })
}

impl CylindricalDini {
    pub fn spec(&self) -> &CylindricalDriftSpec {
        &self.spec
    }

    /// `sup |∇f_i|` over a grid on `[−10, 10]` along each feature's axis.
    pub fn feature_grad_sup(&self) -> &[f64] {
        &self.feature_grad_sup
    }

    #[inline]
    fn radius(&self, x: &[f64]) -> f64 {
        if x.len() == 1 {
            x[0].abs()
        } else {
            x.iter().map(|v| v * v).sum::<f64>().sqrt()
        }
    }

    #[inline]
    fn outer(&self, x: &[f64], z: &[f64]) -> (f64, f64, f64) {
        let r = self.radius(x).powf(self.spec.alpha);
        self.spec.outer.eval(r, z.iter().sum())
    }

    /// Gradient of `h` used by the tangent flow.
    fn radial_gradient(&self, x: &[f64], out: &mut [f64]) {
        match &self.radial {
            Some(m) => m.gradient(x, out),
            None => {
                let r = self.radius(x);
                if r == 0.0 {
                    fill_small(out, 0.0);
                } else {
                    let s = self.spec.alpha * r.powf(self.spec.alpha - 2.0);
                    out.iter_mut().zip(x).for_each(|(o, xi)| *o = s * xi);
                }
            }
        }
    }
}

impl Coefficients for CylindricalDini {
    fn id(&self) -> &str {
        "cylindrical_dini"
    }

    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn summary_len(&self) -> usize {
        self.spec.features.len()
    }

    fn summarize(&self, _t: f64, atoms: &[f64], out: &mut [f64]) {
        let d = self.spec.dim;
        let n = (atoms.len() / d) as f64;
        for (o, f) in out.iter_mut().zip(&self.spec.features) {
            *o = atoms.chunks_exact(d).map(|y| f.value(y)).sum::<f64>() / n;
        }
    }

    #[inline]
    fn drift_regular(&self, _t: f64, x: &[f64], _s: &[f64], out: &mut [f64]) {
        out.iter_mut()
            .zip(x)
            .for_each(|(o, xi)| *o = -self.spec.confinement * xi);
    }

    #[inline]
    fn drift_singular(&self, _t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        let (g, _, _) = self.outer(x, z);
        fill_small(out, g);
    }

    fn regular_grad_x(&self, _t: f64, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        let d = self.spec.dim;
        fill_small(out, 0.0);
        (0..d).for_each(|a| out[a * d + a] = -self.spec.confinement);
    }

    fn singular_grad_x(&self, _t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        let d = self.spec.dim;
        let (_, dr, _) = self.outer(x, z);
        let mut gh = [0.0f64; 8];
        let mut heap;
        let gh: &mut [f64] = if d <= gh.len() {
            &mut gh[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        self.radial_gradient(x, gh);
        for row in out.chunks_exact_mut(d) {
            row.iter_mut().zip(gh.iter()).for_each(|(o, g)| *o = dr * g);
        }
    }

    fn lions_kernel(&self, _t: f64, x: &[f64], z: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.spec.dim;
        let (_, _, dz) = self.outer(x, z);
        let mut grad = vec![0.0; d];
        for f in &self.spec.features {
            grad[f.axis] += dz * f.slope(y);
        }
        for row in out.chunks_exact_mut(d) {
            row.copy_from_slice(&grad);
        }
    }

    fn separable_channels(&self) -> usize {
        self.spec.features.len()
    }

    fn lions_coef(&self, _t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        let (_, _, dz) = self.outer(x, z);
        fill_small(out, dz);
    }

    fn lions_feature_grad(&self, _t: f64, y: &[f64], out: &mut [f64]) {
        let d = self.spec.dim;
        fill_small(out, 0.0);
        for (row, f) in out.chunks_exact_mut(d).zip(&self.spec.features) {
            row[f.axis] = f.slope(y);
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        let d = self.spec.dim;
        fill_small(out, 0.0);
        (0..d).for_each(|a| out[a * d + a] = self.spec.sigma);
    }

    fn diffusion_inverse(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.spec.dim;
        fill_small(out, 0.0);
        (0..d).for_each(|a| out[a * d + a] = 1.0 / self.spec.sigma);
        Ok(())
    }

    fn state_dependent_diffusion(&self) -> bool {
        false
    }
}
