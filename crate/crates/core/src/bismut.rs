//! Malliavin-weight estimator of intrinsic derivatives.
//!
//! For a gate `g` with `g(0) = 0`, `g(T) = 1` the weight along `φ` is
//!
//! ```text
//! ζ_t = σ_t(X_t)^{-1} [ g'(t) V_t + g(t) F_t(V) ]
//! ```
//!
//! where `V` is the tangent started at `φ(X_0)` and `F_t(V)` the mean-field
//! tangent term. Then `D_φ P_T f(μ) = E[f(X_T) ∫⟨ζ_t, dW_t⟩]`, estimated by
//! the particle average of `f(X_T^i) I^i` with `I^i` the left-point Itô sum.
//! Error bars come from independent replications only.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::Observable;
use crate::measure::{EmpiricalMeasure, Perturbation};
use crate::model::Coefficients;
use crate::rng::{RngSpec, StreamDomain};
use crate::solver::{
    apply_field, mean_field_tangent_term, run_ensemble, Budget, EnsembleState, InitialLaw, TrajectoryBundle,
};
use crate::stats;

/// Fewest replications an estimate may be reported from.
pub const MIN_REPLICATIONS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    #[default]
    Linear,
    Smoothstep,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::Linear => "linear",
            GateKind::Smoothstep => "smoothstep",
        }
    }
}

/// `g` on `[0, T]` with `g(0) = 0`, `g(T) = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateFunction {
    pub kind: GateKind,
    pub horizon: f64,
}

impl GateFunction {
    pub fn new(kind: GateKind, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::arg("gate horizon must be positive"));
        }
        Ok(Self { kind, horizon })
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let s = t / self.horizon;
        match self.kind {
            GateKind::Linear => s,
            GateKind::Smoothstep => s * s * (3.0 - 2.0 * s),
        }
    }

    #[inline]
    pub fn derivative(&self, t: f64) -> f64 {
        let s = t / self.horizon;
        match self.kind {
            GateKind::Linear => 1.0 / self.horizon,
            GateKind::Smoothstep => 6.0 * s * (1.0 - s) / self.horizon,
        }
    }
}

/// `ζ = σ(t, x)^{-1} [g'(t) v + g(t) mf]` for one particle.
pub fn weight_at(
    coeffs: &dyn Coefficients,
    gate: &GateFunction,
    t: f64,
    x: &[f64],
    v: &[f64],
    mf: &[f64],
) -> Result<Vec<f64>> {
    let d = coeffs.dim();
    if x.len() != d || v.len() != d || mf.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len().max(v.len()).max(mf.len()),
        });
    }
    let mut inv = vec![0.0; d * d];
    coeffs.diffusion_inverse(t, x, &mut inv)?;
    let mut out = vec![0.0; d];
    weight_into(gate, t, &inv, v, mf, &mut out);
    Ok(out)
}

#[inline]
fn weight_into(gate: &GateFunction, t: f64, inv: &[f64], v: &[f64], mf: &[f64], out: &mut [f64]) {
    let (gp, g) = (gate.derivative(t), gate.value(t));
    let d = v.len();
    for (a, o) in out.iter_mut().enumerate() {
        *o = (0..d).map(|c| inv[a * d + c] * (gp * v[c] + g * mf[c])).sum();
    }
}

/// Per-particle Itô sums `I^i = Σ_k ⟨ζ^i_{t_k}, ΔW^i_k⟩` and `Σ_k |ζ^i_{t_k}|² dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightAccumulator {
    pub integrals: Vec<f64>,
    pub zeta_sq: Vec<f64>,
    pub steps: usize,
}

impl WeightAccumulator {
    pub fn new(particles: usize) -> Self {
        Self {
            integrals: vec![0.0; particles],
            zeta_sq: vec![0.0; particles],
            steps: 0,
        }
    }

    /// Add the increment `⟨ζ_k, ΔW_k⟩` for every particle, with `inverses`
    /// the stacked `σ^{-1}(X_k^i)` or a single shared matrix.
    #[allow(clippy::too_many_arguments)]
    fn add_step(
        &mut self,
        gate: &GateFunction,
        t: f64,
        dt: f64,
        d: usize,
        inverses: &[f64],
        v: &[f64],
        mf: &[f64],
        dw: &[f64],
    ) {
        let stride = if inverses.len() == d * d { 0 } else { d * d };
        let mut zeta = [0.0f64; 8];
        let mut heap;
        let zeta: &mut [f64] = if d <= zeta.len() {
            &mut zeta[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for (i, (acc, sq)) in self.integrals.iter_mut().zip(self.zeta_sq.iter_mut()).enumerate() {
            let r = i * d..(i + 1) * d;
            weight_into(
                gate,
                t,
                &inverses[i * stride..i * stride + d * d],
                &v[r.clone()],
                &mf[r.clone()],
                zeta,
            );
            *acc += zeta.iter().zip(&dw[r]).map(|(z, w)| z * w).sum::<f64>();
            *sq += zeta.iter().map(|z| z * z).sum::<f64>() * dt;
        }
        self.steps += 1;
    }
}

/// Stacked `σ^{-1}(X^i)` into `out`; returns the used prefix, which is a
/// single matrix when the diffusion does not depend on the state.
fn inverses_into<'a>(coeffs: &dyn Coefficients, t: f64, x: &[f64], out: &'a mut [f64]) -> Result<&'a [f64]> {
    let d = coeffs.dim();
    let rows = if coeffs.state_dependent_diffusion() {
        x.len() / d
    } else {
        1
    };
    for (xi, inv) in x.chunks_exact(d).zip(out.chunks_exact_mut(d * d)).take(rows) {
        coeffs.diffusion_inverse(t, xi, inv)?;
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularDiffusion { t, x: xi.to_vec() });
        }
    }
    Ok(&out[..rows * d * d])
}

/// Itô sums of a stored trajectory.
pub fn accumulate(
    traj: &TrajectoryBundle,
    coeffs: &dyn Coefficients,
    gate: &GateFunction,
) -> Result<WeightAccumulator> {
    let d = traj.dim;
    let n = traj.particles;
    let mut acc = WeightAccumulator::new(n);
    let mut inv = vec![0.0; n * d * d];
    for k in 0..traj.grid.steps {
        let t = traj.grid.node(k);
        let x = traj.positions_at(k);
        let v = traj.tangents_at(k);
        let mu = EmpiricalMeasure::new(d, x.to_vec())?;
        let mf = mean_field_tangent_term(coeffs, t, x, &mu, v)?;
        let inv = inverses_into(coeffs, t, x, &mut inv)?;
        acc.add_step(gate, t, traj.grid.dt(), d, inv, v, &mf, traj.increments_at(k));
    }
    Ok(acc)
}

/// Monte Carlo estimate of `D_φ P_T f(μ)` with its replication statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimate: f64,
    pub std_error: f64,
    #[serde(rename = "N")]
    pub particles: usize,
    #[serde(rename = "M")]
    pub replications: usize,
    #[serde(rename = "K")]
    pub steps: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub gate: String,
    pub model: String,
    pub phi: String,
    pub f: String,
    pub seed: u64,
    pub elapsed_s: f64,
    /// Per-replication estimates, in replication order.
    #[serde(skip)]
    pub replicates: Vec<f64>,
    /// Per-replication particle means of `I` (no `f`).
    #[serde(skip)]
    pub weight_means: Vec<f64>,
    /// Per-replication particle means of `f(X_T)` and `f(X_T)²`.
    #[serde(skip)]
    pub f_moments: Vec<(f64, f64)>,
}

impl EstimatorResult {
    pub(crate) fn from_replicates(replicates: Vec<f64>) -> (f64, f64) {
        (stats::mean(&replicates), stats::std_error(&replicates))
    }

    /// Grand mean of `I` over particles and replications, with its error bar.
    pub fn weight_mean(&self) -> (f64, f64) {
        (stats::mean(&self.weight_means), stats::std_error(&self.weight_means))
    }

    /// `sqrt(P_T f² − (P_T f)²)` from the within-ensemble variances, and its
    /// standard error across replications.
    pub fn f_std(&self) -> (f64, f64) {
        f_std_of(&self.f_moments, self.particles)
    }
}

pub(crate) fn f_std_of(moments: &[(f64, f64)], n: usize) -> (f64, f64) {
    let bessel = n as f64 / (n as f64 - 1.0);
    let vars: Vec<f64> = moments
        .iter()
        .map(|(m1, m2)| ((m2 - m1 * m1) * bessel).max(0.0))
        .collect();
    let var = stats::mean(&vars);
    let std = var.sqrt();
    let se = if std > 0.0 {
        stats::std_error(&vars) / (2.0 * std)
    } else {
        0.0
    };
    (std, se)
}

pub(crate) fn check_budget(coeffs: &dyn Coefficients, init: &InitialLaw, budget: &Budget) -> Result<()> {
    budget.grid.validate()?;
    init.validate()?;
    if budget.replications < MIN_REPLICATIONS {
        return Err(Error::arg(format!(
            "at least {MIN_REPLICATIONS} replications are required, got {}",
            budget.replications
        )));
    }
    if budget.particles < 2 {
        return Err(Error::arg("at least two particles are required"));
    }
    if init.dim() != coeffs.dim() {
        return Err(Error::DimensionMismatch {
            expected: coeffs.dim(),
            got: init.dim(),
        });
    }
    Ok(())
}

/// Outcome of one replication for several directions on one position path.
struct Replicate {
    estimates: Vec<f64>,
    weight_means: Vec<f64>,
    f_mean: f64,
    f_sq_mean: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_replicate(
    coeffs: &dyn Coefficients,
    init: &InitialLaw,
    phis: &[Perturbation],
    f: &Observable,
    budget: &Budget,
    gate: &GateFunction,
    rng: &RngSpec,
    rep: u32,
) -> Result<Replicate> {
    let d = coeffs.dim();
    let n = budget.particles;
    let x0 = init.sample_replication(n, rng, rep);
    let tangents = phis.iter().map(|p| apply_field(p, &x0)).collect();
    let mut state = EnsembleState::new(x0, tangents);
    let mut accs: Vec<WeightAccumulator> = phis.iter().map(|_| WeightAccumulator::new(n)).collect();
    let mut inv = vec![0.0; n * d * d];
    let noise = rng.brownian(rep);
    run_ensemble(coeffs, &mut state, &budget.grid, &noise, |node, s| {
        let Some(dw) = node.increments else { return Ok(()) };
        let inv = inverses_into(coeffs, node.t, &s.positions, &mut inv)?;
        for ((acc, v), mf) in accs.iter_mut().zip(&s.tangents).zip(&s.mean_field) {
            acc.add_step(gate, node.t, node.dt, d, inv, v, mf, dw);
        }
        Ok(())
    })
    .map_err(|e| e.in_replication(rep))?;

    let fx: Vec<f64> = state.positions.chunks_exact(d).map(|x| f.eval(x)).collect();
    if let Some(i) = fx.iter().position(|v| !v.is_finite()) {
        return Err(Error::Evaluation { index: i });
    }
    let nf = n as f64;
    let estimates = accs
        .iter()
        .map(|a| fx.iter().zip(&a.integrals).map(|(f, i)| f * i).sum::<f64>() / nf)
        .collect();
    let weight_means = accs.iter().map(|a| a.integrals.iter().sum::<f64>() / nf).collect();
    Ok(Replicate {
        estimates,
        weight_means,
        f_mean: fx.iter().sum::<f64>() / nf,
        f_sq_mean: fx.iter().map(|v| v * v).sum::<f64>() / nf,
    })
}

/// Estimates for several directions sharing positions and noise.
pub fn estimate_directions(
    coeffs: &dyn Coefficients,
    init: &InitialLaw,
    phis: &[Perturbation],
    f: &Observable,
    budget: &Budget,
    gate: GateKind,
    rng: &RngSpec,
) -> Result<Vec<EstimatorResult>> {
    check_budget(coeffs, init, budget)?;
    if let Some(p) = phis.iter().find(|p| p.dim() != coeffs.dim()) {
        return Err(Error::DimensionMismatch {
            expected: coeffs.dim(),
            got: p.dim(),
        });
    }
    let gate_fn = GateFunction::new(gate, budget.grid.horizon)?;
    let start = Instant::now();
    let reps: Vec<Replicate> = (0..budget.replications as u32)
        .into_par_iter()
        .map(|r| run_replicate(coeffs, init, phis, f, budget, &gate_fn, rng, r))
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let f_moments: Vec<(f64, f64)> = reps.iter().map(|r| (r.f_mean, r.f_sq_mean)).collect();
    Ok(phis
        .iter()
        .enumerate()
        .map(|(p, phi)| {
            let replicates: Vec<f64> = reps.iter().map(|r| r.estimates[p]).collect();
            let (estimate, std_error) = EstimatorResult::from_replicates(replicates.clone());
            EstimatorResult {
                estimate,
                std_error,
                particles: budget.particles,
                replications: budget.replications,
                steps: budget.grid.steps,
                horizon: budget.grid.horizon,
                gate: gate.name().into(),
                model: coeffs.id().into(),
                phi: phi.label().into(),
                f: f.label().into(),
                seed: rng.seed,
                elapsed_s: elapsed,
                replicates,
                weight_means: reps.iter().map(|r| r.weight_means[p]).collect(),
                f_moments: f_moments.clone(),
            }
        })
        .collect())
}

/// `D_φ P_T f(μ)` for `μ` the initial law.
pub fn estimate_intrinsic_derivative(
    coeffs: &dyn Coefficients,
    init: &InitialLaw,
    phi: &Perturbation,
    f: &Observable,
    budget: &Budget,
    gate: GateKind,
    rng: &RngSpec,
) -> Result<EstimatorResult> {
    let mut out = estimate_directions(coeffs, init, std::slice::from_ref(phi), f, budget, gate, rng)?;
    Ok(out.remove(0))
}

/// `‖D^I P_t f(μ)‖` probed over unit directions, next to `std f(X_t)`.
#[derive(Clone, Debug)]
pub struct NormEstimate {
    pub norm: f64,
    /// Standard error of the maximising probe.
    pub norm_se: f64,
    pub f_std: f64,
    pub f_std_se: f64,
    pub probes: Vec<EstimatorResult>,
}

/// Size of the reference sample that normalises random probe fields.
const PROBE_REFERENCE: usize = 1 << 16;

/// Unit-`L²(μ)` probe directions: the `d` coordinate constants followed by
/// `count − d` random cosine fields `u·cos(⟨ω, x⟩ + β)/c`.
pub fn probe_directions(init: &InitialLaw, count: usize, rng: &RngSpec) -> Result<Vec<Perturbation>> {
    let d = init.dim();
    if count < d {
        return Err(Error::arg(format!("need at least d = {d} probes, got {count}")));
    }
    let mut probes: Vec<Perturbation> = (0..d)
        .map(|a| {
            let mut e = vec![0.0; d];
            e[a] = 1.0;
            Perturbation::constant(&e).with_label(format!("e{a}"))
        })
        .collect();
    let stream = rng.stream(0, StreamDomain::Probe);
    let reference = init.sample(
        PROBE_REFERENCE,
        &rng.derive(0x70_72_6f_62).stream(0, StreamDomain::Initial),
    );
    for p in d..count {
        let mut omega = vec![0.0; d];
        let mut u = vec![0.0; d];
        crate::rng::NoiseSource::standard_normals(&stream, 0, p, &mut omega);
        crate::rng::NoiseSource::standard_normals(&stream, 1, p, &mut u);
        let beta = std::f64::consts::TAU * stream.uniform(p, 2);
        let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= un);
        let phase = |x: &[f64]| (x.iter().zip(&omega).map(|(a, b)| a * b).sum::<f64>() + beta).cos();
        let c = (reference.chunks_exact(d).map(|x| phase(x).powi(2)).sum::<f64>() / PROBE_REFERENCE as f64).sqrt();
        if c < 1e-8 {
            continue;
        }
        let label = format!("cos{p}");
        probes.push(Perturbation::new(label, d, move |x, out| {
            let s = (x.iter().zip(&omega).map(|(a, b)| a * b).sum::<f64>() + beta).cos() / c;
            out.iter_mut().zip(&u).for_each(|(o, ui)| *o = ui * s);
        }));
    }
    Ok(probes)
}

pub fn gradient_norm_estimate(
    coeffs: &dyn Coefficients,
    init: &InitialLaw,
    f: &Observable,
    budget: &Budget,
    gate: GateKind,
    rng: &RngSpec,
    probe_count: usize,
) -> Result<NormEstimate> {
    let phis = probe_directions(init, probe_count, rng)?;
    let probes = estimate_directions(coeffs, init, &phis, f, budget, gate, rng)?;
    let best = probes
        .iter()
        .max_by(|a, b| a.estimate.abs().total_cmp(&b.estimate.abs()))
        .expect("at least one probe");
    let (f_std, f_std_se) = best.f_std();
    Ok(NormEstimate {
        norm: best.estimate.abs(),
        norm_se: best.std_error,
        f_std,
        f_std_se,
        probes: probes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DoubleWellMf, LinearMfOu};
    use crate::rng::CoarsenedNoise;
    use crate::solver::{simulate, simulate_with_noise, TimeGrid};

    fn budget(n: usize, m: usize, t: f64, k: usize) -> Budget {
        Budget::new(n, m, TimeGrid::new(t, k).unwrap())
    }

    #[test]
    fn gates_hit_their_endpoints() {
        for kind in [GateKind::Linear, GateKind::Smoothstep] {
            let g = GateFunction::new(kind, 2.0).unwrap();
            assert_eq!(g.value(0.0), 0.0);
            assert_eq!(g.value(2.0), 1.0);
            for t in [0.1, 0.7, 1.3, 1.9] {
                let h = 1e-6;
                let fd = (g.value(t + h) - g.value(t - h)) / (2.0 * h);
                assert!((fd - g.derivative(t)).abs() < 1e-8);
            }
        }
        assert_eq!(GateFunction::new(GateKind::Linear, 2.0).unwrap().derivative(0.3), 0.5);
        assert!(GateFunction::new(GateKind::Linear, 0.0).is_err());
    }

    #[test]
    fn weight_examples() {
        let g = GateFunction::new(GateKind::Linear, 2.0).unwrap();
        let bm = LinearMfOu::new(2, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(
            weight_at(&bm, &g, 0.5, &[0.1, 0.2], &[0.0, 0.0], &[0.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            weight_at(&bm, &g, 0.5, &[0.1, 0.2], &[1.0, -3.0], &[0.0, 0.0]).unwrap(),
            vec![0.5, -1.5]
        );

        let (c, sigma, v, vbar) = (0.5, 0.2, 1.3, 0.9);
        let ou = LinearMfOu::new(1, -1.0, c, sigma).unwrap();
        let z = weight_at(&ou, &g, 2.0, &[0.4], &[v], &[c * vbar]).unwrap()[0];
        assert!((z - (v / 2.0 + c * vbar) / sigma).abs() < 1e-14);
    }

    #[test]
    fn zero_direction_gives_zero_integrals() {
        let dw = DoubleWellMf::new(1, 0.5, 0.7, 0.2).unwrap();
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let traj = simulate(
            &dw,
            &InitialLaw::standard_normal(1),
            &Perturbation::zero(1),
            &grid,
            16,
            &RngSpec::new(3),
            0,
        )
        .unwrap();
        let acc = accumulate(&traj, &dw, &GateFunction::new(GateKind::Linear, 1.0).unwrap()).unwrap();
        assert!(acc.integrals.iter().all(|&v| v == 0.0));
        assert_eq!(acc.steps, 32);
    }

    #[test]
    fn constant_weight_integrates_to_scaled_brownian_endpoint() {
        let bm = LinearMfOu::new(1, 0.0, 0.0, 1.0).unwrap();
        let grid = TimeGrid::new(2.0, 40).unwrap();
        let v = 0.8;
        let traj = simulate(
            &bm,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[v]),
            &grid,
            2000,
            &RngSpec::new(4),
            0,
        )
        .unwrap();
        let acc = accumulate(&traj, &bm, &GateFunction::new(GateKind::Linear, 2.0).unwrap()).unwrap();
        for (i, got) in acc.integrals.iter().enumerate() {
            let w: f64 = (0..40).map(|k| traj.increments_at(k)[i]).sum();
            assert!((got - v / 2.0 * w).abs() < 1e-12);
        }
        let m = stats::mean(&acc.integrals);
        assert!(m.abs() < 3.0 * stats::std_error(&acc.integrals));
    }

    #[test]
    fn itô_sum_converges_at_first_order_under_step_halving() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.5).unwrap();
        let gate = GateFunction::new(GateKind::Smoothstep, 1.0).unwrap();
        let phi = Perturbation::constant(&[1.0]);
        let fine = RngSpec::new(21).brownian(0);
        let x0 = InitialLaw::standard_normal(1).sample_replication(256, &RngSpec::new(21), 0);
        let integrals = |k: usize, factor: usize| {
            let noise = CoarsenedNoise { fine: &fine, factor };
            let grid = TimeGrid::new(1.0, k).unwrap();
            let traj = simulate_with_noise(&ou, x0.clone(), &phi, &grid, &noise, 21, 0).unwrap();
            accumulate(&traj, &ou, &gate).unwrap().integrals
        };
        let levels: Vec<Vec<f64>> = [(16, 8), (32, 4), (64, 2), (128, 1)]
            .iter()
            .map(|&(k, f)| integrals(k, f))
            .collect();
        let gaps: Vec<f64> = levels
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 256.0)
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] / w[0] < 0.7, "{gaps:?}");
        }
        assert!(gaps[2] < 0.05, "{gaps:?}");
    }

    #[test]
    fn zero_direction_estimate_is_exactly_zero() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let r = estimate_intrinsic_derivative(
            &ou,
            &InitialLaw::standard_normal(1),
            &Perturbation::zero(1),
            &Observable::coordinate(0),
            &budget(32, 8, 1.0, 16),
            GateKind::Linear,
            &RngSpec::new(1),
        )
        .unwrap();
        assert_eq!((r.estimate, r.std_error), (0.0, 0.0));
    }

    #[test]
    fn constant_payoff_estimate_is_centred() {
        let dw = DoubleWellMf::new(1, 0.5, 0.8, 0.2).unwrap();
        let r = estimate_intrinsic_derivative(
            &dw,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[1.0]),
            &Observable::constant(2.0),
            &budget(128, 16, 1.0, 32),
            GateKind::Linear,
            &RngSpec::new(2),
        )
        .unwrap();
        assert!(
            r.estimate.abs() <= 3.0 * r.std_error,
            "{} ± {}",
            r.estimate,
            r.std_error
        );
    }

    #[test]
    fn linear_mean_field_estimate_matches_closed_form() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let r = estimate_intrinsic_derivative(
            &ou,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[1.0]),
            &Observable::coordinate(0),
            &budget(512, 16, 1.0, 128),
            GateKind::Linear,
            &RngSpec::new(3),
        )
        .unwrap();
        let exact = (-0.5f64).exp();
        assert!(
            (r.estimate - exact).abs() < 3.0 * r.std_error + 0.005,
            "{} ± {}",
            r.estimate,
            r.std_error
        );
        assert_eq!(r.replicates.len(), 16);
    }

    #[test]
    fn brownian_translation_derivative_is_one() {
        let bm = LinearMfOu::new(1, 0.0, 0.0, 1.0).unwrap();
        let r = estimate_intrinsic_derivative(
            &bm,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[1.0]),
            &Observable::coordinate(0),
            &budget(512, 16, 1.0, 32),
            GateKind::Linear,
            &RngSpec::new(4),
        )
        .unwrap();
        assert!(
            (r.estimate - 1.0).abs() < 3.0 * r.std_error,
            "{} ± {}",
            r.estimate,
            r.std_error
        );
    }

    #[test]
    fn estimate_is_linear_in_the_direction() {
        let dw = DoubleWellMf::new(1, 0.5, 0.8, 0.3).unwrap();
        let phi = Perturbation::new("sin", 1, |x, o| o[0] = x[0].sin());
        let out = estimate_directions(
            &dw,
            &InitialLaw::standard_normal(1),
            &[phi.clone(), phi.scaled(-2.5)],
            &Observable::sigmoid(0, 1.5),
            &budget(64, 8, 1.0, 32),
            GateKind::Smoothstep,
            &RngSpec::new(5),
        )
        .unwrap();
        let (a, b) = (out[0].estimate, out[1].estimate);
        assert!((b + 2.5 * a).abs() <= 1e-10 * b.abs());
    }

    #[test]
    fn gates_agree_within_combined_error() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let run = |gate, seed| {
            estimate_intrinsic_derivative(
                &ou,
                &InitialLaw::standard_normal(1),
                &Perturbation::constant(&[1.0]),
                &Observable::coordinate(0),
                &budget(256, 16, 1.0, 64),
                gate,
                &RngSpec::new(seed),
            )
            .unwrap()
        };
        let (a, b) = (run(GateKind::Linear, 6), run(GateKind::Smoothstep, 7));
        let combined = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.estimate - b.estimate).abs() <= 3.0 * combined);
    }

    #[test]
    fn weights_have_zero_mean() {
        let dw = DoubleWellMf::new(1, 0.5, 0.8, 0.3).unwrap();
        let r = estimate_intrinsic_derivative(
            &dw,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[1.0]),
            &Observable::coordinate(0),
            &budget(128, 16, 1.0, 32),
            GateKind::Linear,
            &RngSpec::new(8),
        )
        .unwrap();
        let (m, se) = r.weight_mean();
        assert!(m.abs() <= 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn too_few_replications_is_rejected() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let err = estimate_intrinsic_derivative(
            &ou,
            &InitialLaw::standard_normal(1),
            &Perturbation::zero(1),
            &Observable::coordinate(0),
            &budget(16, 7, 1.0, 4),
            GateKind::Linear,
            &RngSpec::new(0),
        );
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn results_are_reproducible_and_serialise_with_the_documented_keys() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let run = || {
            estimate_intrinsic_derivative(
                &ou,
                &InitialLaw::standard_normal(1),
                &Perturbation::constant(&[1.0]),
                &Observable::coordinate(0),
                &budget(32, 8, 1.0, 8),
                GateKind::Linear,
                &RngSpec::new(12),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.replicates, b.replicates);
        let json = serde_json::to_value(&a).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "estimate",
            "std_error",
            "N",
            "M",
            "K",
            "T",
            "gate",
            "model",
            "phi",
            "f",
            "seed",
            "elapsed_s",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(keys.len(), 12);
    }

    #[test]
    fn gradient_norm_examples() {
        let init = InitialLaw::standard_normal(1);
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let flat = gradient_norm_estimate(
            &ou,
            &init,
            &Observable::constant(1.0),
            &budget(128, 8, 1.0, 32),
            GateKind::Linear,
            &RngSpec::new(1),
            3,
        )
        .unwrap();
        assert_eq!(flat.f_std, 0.0);
        let max_se = flat.probes.iter().map(|p| p.std_error).fold(0.0, f64::max);
        assert!(flat.norm <= 4.0 * max_se);

        let est = gradient_norm_estimate(
            &ou,
            &init,
            &Observable::coordinate(0),
            &budget(512, 16, 1.0, 64),
            GateKind::Linear,
            &RngSpec::new(2),
            1,
        )
        .unwrap();
        assert!(
            (est.norm - (-0.5f64).exp()).abs() < 3.0 * est.norm_se + 0.01,
            "{} ± {}",
            est.norm,
            est.norm_se
        );
        assert!(probe_directions(&InitialLaw::standard_normal(2), 1, &RngSpec::new(0)).is_err());
    }

    #[test]
    fn random_probes_have_unit_norm() {
        let init = InitialLaw::standard_normal(2);
        let probes = probe_directions(&init, 6, &RngSpec::new(77)).unwrap();
        assert_eq!(probes.len(), 6);
        let sample = init.sample(1 << 15, &RngSpec::new(1234).stream(0, StreamDomain::Initial));
        let mu = EmpiricalMeasure::new(2, sample).unwrap();
        for p in &probes {
            let n = crate::measure::l2_norm(p, &mu).unwrap();
            assert!((n - 1.0).abs() < 0.03, "{} {n}", p.label());
        }
    }
}
