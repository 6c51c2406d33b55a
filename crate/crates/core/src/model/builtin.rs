use crate::error::{Error, Result};

use super::{fill_small, Coefficients};

fn mean_into(dim: usize, atoms: &[f64], out: &mut [f64]) {
    fill_small(out, 0.0);
    for x in atoms.chunks_exact(dim) {
        for (o, v) in out.iter_mut().zip(x) {
            *o += v;
        }
    }
    let n = (atoms.len() / dim) as f64;
    out.iter_mut().for_each(|o| *o /= n);
}

fn scaled_identity(d: usize, s: f64, out: &mut [f64]) {
    fill_small(out, 0.0);
    for a in 0..d {
        out[a * d + a] = s;
    }
}

/// Linear mean-field Ornstein–Uhlenbeck model, `dX = (aX + c E[X]) dt + σ dW`.
///
/// The law's mean solves `m' = (a + c) m`, which gives closed-form
/// intrinsic derivatives for the coordinate functional.
#[derive(Clone, Debug)]
pub struct LinearMfOu {
    dim: usize,
    pub a: f64,
    pub c: f64,
    pub sigma: f64,
}

impl LinearMfOu {
    pub fn new(dim: usize, a: f64, c: f64, sigma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("linear_mf_ou: dim must be positive"));
        }
        if !(sigma > 0.0) || !a.is_finite() || !c.is_finite() || !sigma.is_finite() {
            return Err(Error::arg("linear_mf_ou: a, c must be finite and sigma > 0"));
        }
        Ok(Self { dim, a, c, sigma })
    }
}

impl Coefficients for LinearMfOu {
    fn id(&self) -> &str {
        "linear_mf_ou"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn summary_len(&self) -> usize {
        self.dim
    }

    fn summarize(&self, _t: f64, atoms: &[f64], out: &mut [f64]) {
        mean_into(self.dim, atoms, out);
    }

    #[inline]
    fn drift_regular(&self, _t: f64, x: &[f64], mean: &[f64], out: &mut [f64]) {
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(mean) {
            *o = self.a * xi + self.c * mi;
        }
    }

    fn regular_grad_x(&self, _t: f64, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        scaled_identity(self.dim, self.a, out);
    }

    fn lions_kernel(&self, _t: f64, _x: &[f64], _s: &[f64], _y: &[f64], out: &mut [f64]) {
        scaled_identity(self.dim, self.c, out);
    }

    fn separable_channels(&self) -> usize {
        self.dim
    }

    fn lions_coef(&self, _t: f64, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        scaled_identity(self.dim, self.c, out);
    }

    fn lions_feature_grad(&self, _t: f64, _y: &[f64], out: &mut [f64]) {
        scaled_identity(self.dim, 1.0, out);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        scaled_identity(self.dim, self.sigma, out);
    }

    fn diffusion_inverse(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        scaled_identity(self.dim, 1.0 / self.sigma, out);
        Ok(())
    }

    fn state_dependent_diffusion(&self) -> bool {
        false
    }
}

/// Quartic double well with attraction to the ensemble mean.
#[derive(Clone, Debug)]
pub struct DoubleWellMf {
    dim: usize,
    pub kappa: f64,
    pub sigma: f64,
    pub sigma_mod: f64,
}

impl DoubleWellMf {
    pub fn new(dim: usize, kappa: f64, sigma: f64, sigma_mod: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("double_well_mf: dim must be positive"));
        }
        if !(sigma > 0.0) || !kappa.is_finite() || !sigma.is_finite() {
            return Err(Error::arg("double_well_mf: kappa must be finite and sigma > 0"));
        }
        if !(sigma_mod.abs() < 1.0) {
            return Err(Error::arg(
                "double_well_mf: |sigma_mod| must be < 1 to keep σ invertible",
            ));
        }
        Ok(Self {
            dim,
            kappa,
            sigma,
            sigma_mod,
        })
    }
}

impl Coefficients for DoubleWellMf {
    fn id(&self) -> &str {
        "double_well_mf"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn summary_len(&self) -> usize {
        self.dim
    }

    fn summarize(&self, _t: f64, atoms: &[f64], out: &mut [f64]) {
        mean_into(self.dim, atoms, out);
    }

    #[inline]
    fn drift_regular(&self, _t: f64, x: &[f64], mean: &[f64], out: &mut [f64]) {
        for ((o, &xi), mi) in out.iter_mut().zip(x).zip(mean) {
            *o = xi - xi * xi * xi - self.kappa * (xi - mi);
        }
    }

    fn regular_grad_x(&self, _t: f64, x: &[f64], _s: &[f64], out: &mut [f64]) {
        let d = self.dim;
        fill_small(out, 0.0);
        for a in 0..d {
            out[a * d + a] = 1.0 - 3.0 * x[a] * x[a] - self.kappa;
        }
    }

    fn lions_kernel(&self, _t: f64, _x: &[f64], _s: &[f64], _y: &[f64], out: &mut [f64]) {
        scaled_identity(self.dim, self.kappa, out);
    }

    fn separable_channels(&self) -> usize {
        self.dim
    }

    fn lions_coef(&self, _t: f64, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        scaled_identity(self.dim, self.kappa, out);
    }

    fn lions_feature_grad(&self, _t: f64, _y: &[f64], out: &mut [f64]) {
        scaled_identity(self.dim, 1.0, out);
    }

    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        fill_small(out, 0.0);
        for a in 0..d {
            out[a * d + a] = self.sigma * (1.0 + self.sigma_mod * x[a].tanh());
        }
    }

    fn diffusion_grad(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        fill_small(out, 0.0);
        for a in 0..d {
            let th = x[a].tanh();
            out[(a * d + a) * d + a] = self.sigma * self.sigma_mod * (1.0 - th * th);
        }
    }

    fn diffusion_inverse(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        fill_small(out, 0.0);
        for a in 0..d {
            out[a * d + a] = 1.0 / (self.sigma * (1.0 + self.sigma_mod * x[a].tanh()));
        }
        Ok(())
    }

    fn state_dependent_diffusion(&self) -> bool {
        self.sigma_mod != 0.0
    }
}
