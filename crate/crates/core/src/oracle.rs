//! Reference values the estimator is checked against.
//!
//! * Coupled finite differences: the base ensemble and ensembles started
//!   from `X_0 + εφ(X_0)` run in lockstep on identical increments.
//! * The closed form for the linear mean-field model.
//! * Shape sweeps for the gradient bound `‖D^I P_t f‖ ≤ (C_t/√t)·std f(X_t)`
//!   and the total-variation bound `‖P_t^*μ − P_t^*ν‖ ≤ (C_t/√t)·W₂(μ, ν)`,
//!   which only assert that the implied constants stay bounded.
//! * Pathwise convergence of difference quotients to the tangent flow.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bismut::{check_budget, f_std_of, gradient_norm_estimate, EstimatorResult, GateKind};
use crate::error::{Error, Result};
use crate::functional::Observable;
use crate::measure::{wasserstein2_1d, Perturbation};
use crate::model::Coefficients;
use crate::rng::RngSpec;
use crate::solver::{apply_field, run_coupled, Budget, EnsembleState, InitialLaw, TimeGrid};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    /// Strictly decreasing positive steps.
    #[serde(default = "default_ladder")]
    pub eps: Vec<f64>,
    /// Report `(ε₁Q₂ − ε₂Q₁)/(ε₁ − ε₂)` from the two smallest steps.
    #[serde(default)]
    pub richardson: bool,
}

fn default_ladder() -> Vec<f64> {
    vec![1e-2, 5e-3, 2.5e-3]
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            eps: default_ladder(),
            richardson: false,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        validate_ladder(&self.eps)?;
        if self.richardson && self.eps.len() < 2 {
            return Err(Error::arg("Richardson extrapolation needs two ladder steps"));
        }
        Ok(())
    }
}

fn validate_ladder(eps: &[f64]) -> Result<()> {
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::arg("eps ladder must be nonempty and positive"));
    }
    if eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::arg("eps ladder must be strictly decreasing"));
    }
    Ok(())
}

/// One rung of a finite-difference ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderEntry {
    pub eps: f64,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug)]
pub struct FdResult {
    /// Smallest-`ε` quotient, or the Richardson value when enabled.
    pub result: EstimatorResult,
    pub ladder: Vec<LadderEntry>,
    pub richardson: Option<LadderEntry>,
}

/// Coupled difference quotient `(P_T f(μ∘(Id+εφ)^{-1}) − P_T f(μ))/ε`.
pub fn fd_intrinsic_derivative(
    coeffs: &dyn Coefficients,
    init: &InitialLaw,
    phi: &Perturbation,
    f: &Observable,
    budget: &Budget,
    fd: &FdConfig,
    rng: &RngSpec,
) -> Result<FdResult> {
    check_budget(coeffs, init, budget)?;
    fd.validate()?;
    let d = coeffs.dim();
    let n = budget.particles;
    let start = Instant::now();
    // Per replication: quotient per rung, then base f moments.
    let reps: Vec<(Vec<f64>, (f64, f64))> = (0..budget.replications as u32)
        .into_par_iter()
        .map(|rep| {
            let x0 = init.sample_replication(n, rng, rep);
            let eta = apply_field(phi, &x0);
            let mut states = vec![EnsembleState::new(x0.clone(), vec![])];
            for &eps in &fd.eps {
                let shifted = x0.iter().zip(&eta).map(|(x, e)| x + eps * e).collect();
                states.push(EnsembleState::new(shifted, vec![]));
            }
            run_coupled(coeffs, &mut states, &budget.grid, &rng.brownian(rep), |_, _| Ok(()))
                .map_err(|e| e.in_replication(rep))?;
            let fbar = |s: &EnsembleState| -> Result<(f64, f64)> {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for (i, x) in s.positions.chunks_exact(d).enumerate() {
                    let v = f.eval(x);
                    if !v.is_finite() {
                        return Err(Error::Evaluation { index: i });
                    }
                    m1 += v;
                    m2 += v * v;
                }
                Ok((m1 / n as f64, m2 / n as f64))
            };
            let base = fbar(&states[0])?;
            let quotients = states[1..]
                .iter()
                .zip(&fd.eps)
                .map(|(s, eps)| Ok((fbar(s)?.0 - base.0) / eps))
                .collect::<Result<Vec<f64>>>()?;
            Ok((quotients, base))
        })
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();

    let column = |j: usize| -> Vec<f64> { reps.iter().map(|r| r.0[j]).collect() };
    let ladder: Vec<LadderEntry> = fd
        .eps
        .iter()
        .enumerate()
        .map(|(j, &eps)| {
            let c = column(j);
            LadderEntry {
                eps,
                estimate: stats::mean(&c),
                std_error: stats::std_error(&c),
            }
        })
        .collect();
    let l = fd.eps.len();
    let extrapolated: Option<Vec<f64>> = fd.richardson.then(|| {
        let (e1, e2) = (fd.eps[l - 2], fd.eps[l - 1]);
        column(l - 2)
            .iter()
            .zip(&column(l - 1))
            .map(|(a, b)| (e1 * b - e2 * a) / (e1 - e2))
            .collect()
    });
    let richardson = extrapolated.as_ref().map(|r| LadderEntry {
        eps: 0.0,
        estimate: stats::mean(r),
        std_error: stats::std_error(r),
    });
    let (replicates, label) = match extrapolated {
        Some(r) => (r, "fd-richardson".to_string()),
        None => (column(l - 1), format!("fd(eps={})", fd.eps[l - 1])),
    };
    let (estimate, std_error) = EstimatorResult::from_replicates(replicates.clone());
    let result = EstimatorResult {
        estimate,
        std_error,
        particles: n,
        replications: budget.replications,
        steps: budget.grid.steps,
        horizon: budget.grid.horizon,
        gate: label,
        model: coeffs.id().into(),
        phi: phi.label().into(),
        f: f.label().into(),
        seed: rng.seed,
        elapsed_s: elapsed,
        replicates,
        weight_means: Vec::new(),
        f_moments: reps.iter().map(|r| r.1).collect(),
    };
    Ok(FdResult {
        result,
        ladder,
        richardson,
    })
}

/// Parameters of `dX = (aX + c E[X]) dt + σ dW`, per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMfParams {
    pub a: f64,
    pub c: f64,
    pub sigma: f64,
}

/// Exact `D_φ E[X_T^{axis}]` for constant `φ ≡ v`: the mean solves
/// `m' = (a + c) m`, so a shift `v` of the initial law becomes `e^{(a+c)T} v`.
pub fn linear_mf_exact(params: &LinearMfParams, horizon: f64, axis: usize, v: &[f64]) -> Result<f64> {
    if axis >= v.len() {
        return Err(Error::arg(format!(
            "coordinate {axis} out of range for a {}-vector",
            v.len()
        )));
    }
    if !(horizon >= 0.0) || !params.a.is_finite() || !params.c.is_finite() {
        return Err(Error::arg("linear_mf_exact needs finite parameters and T >= 0"));
    }
    Ok(((params.a + params.c) * horizon).exp() * v[axis])
}

/// A sweep row; `implied` is `None` where the entry is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A1Row {
    pub t: f64,
    pub steps: usize,
    pub norm: f64,
    pub norm_se: f64,
    pub f_std: f64,
    pub f_std_se: f64,
    pub implied: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A1Table {
    pub rows: Vec<A1Row>,
    pub pass: bool,
}

/// Steps for horizon `t` keeping the step size of `budget.grid`.
fn steps_for(budget: &Budget, t: f64) -> usize {
    ((budget.grid.steps as f64 * t / budget.grid.horizon).round() as usize).max(1)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() || times.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::arg("sweep times must be positive"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("sweep times must be strictly increasing"));
    }
    Ok(())
}

/// Implied constant `Ĉ_t = ‖D^I P_t f‖·√t / std f(X_t)` over `times`.
///
/// `budget.grid` fixes the step size; each `t` runs `K·t/T` steps. Entries
/// whose std is not resolved (`std ≤ 10·SE(std)`) are undefined. PASS iff
/// the largest defined `Ĉ_t` is within 25% of the one at the largest
/// defined `t`, or nothing is defined.
#[allow(clippy::too_many_arguments)]
pub fn a1_sweep(
    coeffs: &dyn Coefficients,
    init: &InitialLaw,
    f: &Observable,
    times: &[f64],
    budget: &Budget,
    gate: GateKind,
    rng: &RngSpec,
    probes: usize,
) -> Result<A1Table> {
    check_times(times)?;
    let mut rows = Vec::with_capacity(times.len());
    for (j, &t) in times.iter().enumerate() {
        let steps = steps_for(budget, t);
        let b = Budget::new(budget.particles, budget.replications, TimeGrid::new(t, steps)?);
        let est = gradient_norm_estimate(coeffs, init, f, &b, gate, &rng.derive(j as u64), probes)?;
        let resolved = est.f_std > 10.0 * est.f_std_se && est.f_std > 0.0;
        rows.push(A1Row {
            t,
            steps,
            norm: est.norm,
            norm_se: est.norm_se,
            f_std: est.f_std,
            f_std_se: est.f_std_se,
            implied: resolved.then(|| est.norm * t.sqrt() / est.f_std),
        });
    }
    let defined: Vec<f64> = rows.iter().filter_map(|r| r.implied).collect();
    let pass = match defined.last() {
        None => true,
        Some(&last) => defined.iter().cloned().fold(f64::MIN, f64::max) <= 1.25 * last,
    };
    Ok(A1Table { rows, pass })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2Row {
    pub t: f64,
    /// `sup_s |P(X_t^μ > s) − P(X_t^ν > s)|` over the threshold dictionary.
    pub lower_bound: f64,
    /// `(Ĉ/√t)·W₂(μ, ν)` with `Ĉ` fitted at the largest `t`.
    pub rhs: f64,
    /// `lower_bound·√t / W₂(μ, ν)`.
    pub scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2Table {
    pub w2: f64,
    pub rows: Vec<A2Row>,
    pub pass: bool,
}

/// Thresholds per time in the total-variation dictionary.
pub const A2_THRESHOLDS: usize = 64;

fn pooled_terminal(coeffs: &dyn Coefficients, init: &InitialLaw, budget: &Budget, rng: &RngSpec) -> Result<Vec<f64>> {
    let n = budget.particles;
    let per_rep: Vec<Vec<f64>> = (0..budget.replications as u32)
        .into_par_iter()
        .map(|rep| {
            let mut states = vec![EnsembleState::new(init.sample_replication(n, rng, rep), vec![])];
            run_coupled(coeffs, &mut states, &budget.grid, &rng.brownian(rep), |_, _| Ok(()))
                .map_err(|e| e.in_replication(rep))?;
            Ok(states.pop().expect("one state").positions)
        })
        .collect::<Result<_>>()?;
    Ok(per_rep.concat())
}

/// `sup_s |P̂(X > s) − P̂(Y > s)|` over `A2_THRESHOLDS` quantiles of the
/// pooled sample; half the gap of `E sign(X − s)`.
pub fn threshold_tv_lower_bound(x: &[f64], y: &[f64]) -> f64 {
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut pooled: Vec<f64> = xs.iter().chain(&ys).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let above =
        |sorted: &[f64], s: f64| (sorted.len() - sorted.partition_point(|v| *v <= s)) as f64 / sorted.len() as f64;
    (0..A2_THRESHOLDS)
        .map(|q| {
            let idx = ((q as f64 + 0.5) / A2_THRESHOLDS as f64 * pooled.len() as f64) as usize;
            let s = pooled[idx.min(pooled.len() - 1)];
            (above(&xs, s) - above(&ys, s)).abs()
        })
        .fold(0.0, f64::max)
}

/// Shape check of the total-variation bound in d = 1 between the laws
/// started from `mu` and `nu`. `W₂(μ, ν)` is computed on `budget.particles`
/// samples of each. PASS iff `max_t lv_t·√t/W₂ ≤ 1.5·median`.
pub fn a2_check(
    coeffs: &dyn Coefficients,
    mu: &InitialLaw,
    nu: &InitialLaw,
    times: &[f64],
    budget: &Budget,
    rng: &RngSpec,
) -> Result<A2Table> {
    if coeffs.dim() != 1 || mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::Unsupported(
            "the total-variation check is implemented for d = 1 only".into(),
        ));
    }
    check_times(times)?;
    check_budget(coeffs, mu, budget)?;
    check_budget(coeffs, nu, budget)?;
    let (rng_mu, rng_nu) = (rng.derive(1), rng.derive(2));
    let w2 = wasserstein2_1d(
        &mu.sample_replication(budget.particles, &rng_mu, u32::MAX),
        &nu.sample_replication(budget.particles, &rng_nu, u32::MAX),
    );
    if !(w2 > 0.0) {
        return Err(Error::arg("the two initial laws coincide (W2 = 0)"));
    }
    let mut rows = Vec::with_capacity(times.len());
    for (j, &t) in times.iter().enumerate() {
        let b = Budget::new(
            budget.particles,
            budget.replications,
            TimeGrid::new(t, steps_for(budget, t))?,
        );
        let x = pooled_terminal(coeffs, mu, &b, &rng_mu.derive(j as u64))?;
        let y = pooled_terminal(coeffs, nu, &b, &rng_nu.derive(j as u64))?;
        let lv = threshold_tv_lower_bound(&x, &y);
        rows.push(A2Row {
            t,
            lower_bound: lv,
            rhs: 0.0,
            scaled: lv * t.sqrt() / w2,
        });
    }
    let c_hat = rows.last().map_or(0.0, |r| r.scaled);
    for r in &mut rows {
        r.rhs = c_hat / r.t.sqrt() * w2;
    }
    let mut scaled: Vec<f64> = rows.iter().map(|r| r.scaled).collect();
    scaled.sort_by(f64::total_cmp);
    let median = if scaled.len() % 2 == 1 {
        scaled[scaled.len() / 2]
    } else {
        0.5 * (scaled[scaled.len() / 2 - 1] + scaled[scaled.len() / 2])
    };
    let pass = scaled.last().copied().unwrap_or(0.0) <= 1.5 * median;
    Ok(A2Table { w2, rows, pass })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentRow {
    pub eps: f64,
    /// `E sup_t |(X_t^ε − X_t)/ε − V_t|²` over particles and replications.
    pub mean_sup_sq: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentTable {
    pub rows: Vec<TangentRow>,
    pub ratios: Vec<f64>,
    pub pass: bool,
}

/// Values at or below this count as exact agreement.
pub const AFFINE_TOLERANCE: f64 = 1e-10;

/// Pathwise comparison of coupled difference quotients with the tangent.
/// PASS iff every value is at most [`AFFINE_TOLERANCE`] or every successive
/// ratio is at most 0.6.
pub fn pathwise_tangent_check(
    coeffs: &dyn Coefficients,
    init: &InitialLaw,
    phi: &Perturbation,
    budget: &Budget,
    eps: &[f64],
    rng: &RngSpec,
) -> Result<TangentTable> {
    validate_ladder(eps)?;
    check_budget(coeffs, init, budget)?;
    let n = budget.particles;
    let l = eps.len();
    // Per replication: (Σ_i sup_t |·|², max |·|) per rung.
    let reps: Vec<Vec<(f64, f64)>> = (0..budget.replications as u32)
        .into_par_iter()
        .map(|rep| {
            let x0 = init.sample_replication(n, rng, rep);
            let eta = apply_field(phi, &x0);
            let mut states = vec![EnsembleState::new(x0.clone(), vec![eta.clone()])];
            for &e in eps {
                states.push(EnsembleState::new(
                    x0.iter().zip(&eta).map(|(x, h)| x + e * h).collect(),
                    vec![],
                ));
            }
            let d = coeffs.dim();
            let mut sup_sq = vec![0.0f64; l * n];
            let mut max_abs = vec![0.0f64; l];
            run_coupled(coeffs, &mut states, &budget.grid, &rng.brownian(rep), |_, s| {
                let (base, v) = (&s[0].positions, &s[0].tangents[0]);
                for (j, &e) in eps.iter().enumerate() {
                    let shifted = &s[j + 1].positions;
                    for i in 0..n {
                        let mut sq = 0.0;
                        for a in i * d..(i + 1) * d {
                            let diff = (shifted[a] - base[a]) / e - v[a];
                            sq += diff * diff;
                            max_abs[j] = max_abs[j].max(diff.abs());
                        }
                        let slot = &mut sup_sq[j * n + i];
                        *slot = slot.max(sq);
                    }
                }
                Ok(())
            })
            .map_err(|e| e.in_replication(rep))?;
            Ok((0..l)
                .map(|j| (sup_sq[j * n..(j + 1) * n].iter().sum::<f64>(), max_abs[j]))
                .collect())
        })
        .collect::<Result<_>>()?;
    let total = (n * budget.replications) as f64;
    let rows: Vec<TangentRow> = eps
        .iter()
        .enumerate()
        .map(|(j, &e)| TangentRow {
            eps: e,
            mean_sup_sq: reps.iter().map(|r| r[j].0).sum::<f64>() / total,
            max_abs: reps.iter().map(|r| r[j].1).fold(0.0, f64::max),
        })
        .collect();
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].mean_sup_sq / w[0].mean_sup_sq).collect();
    let exact = rows.iter().all(|r| r.mean_sup_sq <= AFFINE_TOLERANCE);
    let pass = exact || (!ratios.is_empty() && ratios.iter().all(|r| *r <= 0.6));
    Ok(TangentTable { rows, ratios, pass })
}

/// `sqrt(P_T f² − (P_T f)²)` of an FD run's base ensemble.
pub fn fd_f_std(result: &FdResult) -> (f64, f64) {
    f_std_of(&result.result.f_moments, result.result.particles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bismut::estimate_intrinsic_derivative;
    use crate::model::{DoubleWellMf, LinearMfOu};

    fn budget(n: usize, m: usize, t: f64, k: usize) -> Budget {
        Budget::new(n, m, TimeGrid::new(t, k).unwrap())
    }

    /// Classical RK4 for the scalar ODE `m' = λ m`.
    fn rk4(lambda: f64, m0: f64, t: f64, steps: usize) -> f64 {
        let h = t / steps as f64;
        let mut m = m0;
        for _ in 0..steps {
            let k1 = lambda * m;
            let k2 = lambda * (m + 0.5 * h * k1);
            let k3 = lambda * (m + 0.5 * h * k2);
            let k4 = lambda * (m + h * k3);
            m += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        m
    }

    #[test]
    fn closed_form_examples() {
        let p = LinearMfParams {
            a: -1.0,
            c: 0.5,
            sigma: 0.2,
        };
        let v = linear_mf_exact(&p, 1.0, 0, &[1.0]).unwrap();
        assert!((v - 0.60653066).abs() < 1e-8);
        // A unit shift of the initial mean, propagated by RK4.
        assert!((v - (rk4(-0.5, 1.0, 1.0, 1000) - rk4(-0.5, 0.0, 1.0, 1000))).abs() < 1e-12);
        let neutral = LinearMfParams {
            a: -0.3,
            c: 0.3,
            sigma: 1.0,
        };
        assert_eq!(linear_mf_exact(&neutral, 5.0, 1, &[0.0, 2.5]).unwrap(), 2.5);
        assert_eq!(linear_mf_exact(&p, 1.0, 0, &[0.0]).unwrap(), 0.0);
        assert!(linear_mf_exact(&p, 1.0, 1, &[1.0]).is_err());
    }

    #[test]
    fn ladder_must_decrease() {
        assert!(FdConfig {
            eps: vec![1e-2, 1e-2],
            richardson: false
        }
        .validate()
        .is_err());
        assert!(FdConfig {
            eps: vec![],
            richardson: false
        }
        .validate()
        .is_err());
        assert!(FdConfig {
            eps: vec![1e-2],
            richardson: true
        }
        .validate()
        .is_err());
        assert!(FdConfig::default().validate().is_ok());
    }

    #[test]
    fn fd_zero_direction_is_exactly_zero() {
        let dw = DoubleWellMf::new(1, 0.5, 0.7, 0.2).unwrap();
        let r = fd_intrinsic_derivative(
            &dw,
            &InitialLaw::standard_normal(1),
            &Perturbation::zero(1),
            &Observable::coordinate(0),
            &budget(32, 8, 1.0, 16),
            &FdConfig::default(),
            &RngSpec::new(1),
        )
        .unwrap();
        assert_eq!((r.result.estimate, r.result.std_error), (0.0, 0.0));
        assert!(r.ladder.iter().all(|e| e.estimate == 0.0));
    }

    #[test]
    fn fd_translation_of_brownian_motion_is_one() {
        let bm = LinearMfOu::new(1, 0.0, 0.0, 1.0).unwrap();
        let r = fd_intrinsic_derivative(
            &bm,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[1.0]),
            &Observable::coordinate(0),
            &budget(32, 8, 1.0, 16),
            &FdConfig::default(),
            &RngSpec::new(2),
        )
        .unwrap();
        for e in &r.ladder {
            assert!((e.estimate - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_linear_mean_field_matches_closed_form() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let b = budget(64, 8, 1.0, 256);
        let r = fd_intrinsic_derivative(
            &ou,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[1.0]),
            &Observable::coordinate(0),
            &b,
            &FdConfig {
                eps: vec![1e-2, 5e-3],
                richardson: true,
            },
            &RngSpec::new(3),
        )
        .unwrap();
        // The flow is affine, so the quotient is the Euler tangent exactly.
        let euler = (1.0 - 0.5 * b.grid.dt()).powi(256);
        assert!((r.result.estimate - euler).abs() < 1e-9, "{}", r.result.estimate);
        assert!((euler - (-0.5f64).exp()).abs() < 1e-3);
        let rich = r.richardson.unwrap();
        let (lo, hi) = (
            r.ladder[0].estimate.min(r.ladder[1].estimate),
            r.ladder[0].estimate.max(r.ladder[1].estimate),
        );
        assert!(
            (lo - 1e-12..=hi + 1e-12).contains(&rich.estimate)
                || r.ladder
                    .iter()
                    .all(|e| (e.estimate - rich.estimate).abs() <= e.std_error.max(1e-12))
        );
    }

    #[test]
    fn richardson_consistency_on_a_nonlinear_model() {
        let dw = DoubleWellMf::new(1, 0.5, 0.7, 0.0).unwrap();
        let r = fd_intrinsic_derivative(
            &dw,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[1.0]),
            &Observable::sigmoid(0, 2.0),
            &budget(64, 8, 0.5, 32),
            &FdConfig {
                eps: vec![1e-2, 5e-3],
                richardson: true,
            },
            &RngSpec::new(4),
        )
        .unwrap();
        let rich = r.richardson.unwrap();
        let (a, b) = (r.ladder[0].estimate, r.ladder[1].estimate);
        let between = (a.min(b)..=a.max(b)).contains(&rich.estimate);
        let near = r
            .ladder
            .iter()
            .all(|e| (e.estimate - rich.estimate).abs() <= e.std_error);
        assert!(between || near, "{a} {b} {}", rich.estimate);
    }

    #[test]
    fn fd_and_bismut_agree_on_the_linear_model() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let init = InitialLaw::standard_normal(1);
        let phi = Perturbation::constant(&[1.0]);
        let f = Observable::coordinate(0);
        let b = budget(512, 16, 1.0, 128);
        let fd = fd_intrinsic_derivative(&ou, &init, &phi, &f, &b, &FdConfig::default(), &RngSpec::new(5)).unwrap();
        let bis = estimate_intrinsic_derivative(&ou, &init, &phi, &f, &b, GateKind::Linear, &RngSpec::new(6)).unwrap();
        let tol = 3.0 * (fd.result.std_error + bis.std_error) + 1e-9;
        assert!(
            (fd.result.estimate - bis.estimate).abs() <= tol,
            "{} {}",
            fd.result.estimate,
            bis.estimate
        );
    }

    #[test]
    fn a1_constant_payoff_is_vacuous() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let t = a1_sweep(
            &ou,
            &InitialLaw::standard_normal(1),
            &Observable::constant(1.0),
            &[0.5, 1.0],
            &budget(64, 8, 1.0, 16),
            GateKind::Linear,
            &RngSpec::new(1),
            1,
        )
        .unwrap();
        assert!(t.pass);
        assert!(t.rows.iter().all(|r| r.implied.is_none()));
    }

    #[test]
    fn a1_brownian_constant_is_at_most_one() {
        let bm = LinearMfOu::new(1, 0.0, 0.0, 1.0).unwrap();
        let t = a1_sweep(
            &bm,
            &InitialLaw::standard_normal(1),
            &Observable::coordinate(0),
            &[0.25, 0.5, 1.0],
            &budget(256, 16, 1.0, 32),
            GateKind::Linear,
            &RngSpec::new(2),
            1,
        )
        .unwrap();
        for r in &t.rows {
            // norm = 1 and std = sqrt(1 + t).
            let exact = r.t.sqrt() / (1.0 + r.t).sqrt();
            let c = r.implied.unwrap();
            assert!((c - exact).abs() < 0.15, "{r:?}");
        }
        assert!(t.pass);
    }

    #[test]
    fn a1_linear_mean_field_is_bounded() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let t = a1_sweep(
            &ou,
            &InitialLaw::standard_normal(1),
            &Observable::coordinate(0),
            &[0.25, 0.5, 1.0],
            &budget(256, 16, 1.0, 64),
            GateKind::Linear,
            &RngSpec::new(3),
            2,
        )
        .unwrap();
        assert!(t.rows.iter().all(|r| r.implied.is_some_and(f64::is_finite)));
        assert!(t.pass, "{t:?}");
    }

    #[test]
    fn threshold_dictionary_recovers_gaussian_total_variation() {
        let bm = LinearMfOu::new(1, 0.0, 0.0, 1.0).unwrap();
        let table = a2_check(
            &bm,
            &InitialLaw::Point { at: vec![0.0] },
            &InitialLaw::Point { at: vec![0.5] },
            &[0.25, 0.5, 1.0],
            &budget(1024, 8, 1.0, 16),
            &RngSpec::new(4),
        )
        .unwrap();
        assert_eq!(table.w2, 0.5);
        let last = table.rows.last().unwrap();
        // TV of N(0, 1) and N(0.5, 1) is P(|Z| < 0.25), by Simpson's rule.
        let h = 0.5 / 2000.0;
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let exact = (0..=2000)
            .map(|k| {
                let w = if k == 0 || k == 2000 {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * phi(-0.25 + k as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0;
        assert!(
            (last.lower_bound - exact).abs() < 0.05,
            "{} vs {exact}",
            last.lower_bound
        );
        assert!(table.pass);
    }

    #[test]
    fn threshold_distance_of_a_law_to_itself_is_small() {
        let bm = LinearMfOu::new(1, 0.0, 0.0, 1.0).unwrap();
        let same = InitialLaw::Point { at: vec![0.0] };
        let err = a2_check(&bm, &same, &same, &[1.0], &budget(256, 8, 1.0, 8), &RngSpec::new(5));
        assert!(matches!(err, Err(Error::Argument(_))));
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let b = Budget::new(1024, 8, grid);
        let x = pooled_terminal(&bm, &same, &b, &RngSpec::new(6)).unwrap();
        let y = pooled_terminal(&bm, &same, &b, &RngSpec::new(7)).unwrap();
        assert!(threshold_tv_lower_bound(&x, &y) < 0.03);
    }

    #[test]
    fn ergodic_laws_merge_over_time() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.5).unwrap();
        let table = a2_check(
            &ou,
            &InitialLaw::Gaussian {
                mean: vec![-1.0],
                std: 0.3,
            },
            &InitialLaw::Gaussian {
                mean: vec![1.0],
                std: 0.3,
            },
            &[0.5, 2.0, 6.0],
            &budget(512, 8, 1.0, 16),
            &RngSpec::new(8),
        )
        .unwrap();
        let lv: Vec<f64> = table.rows.iter().map(|r| r.lower_bound).collect();
        assert!(lv.windows(2).all(|w| w[1] < w[0]), "{lv:?}");
    }

    #[test]
    fn a2_rejects_higher_dimensions() {
        let ou = LinearMfOu::new(2, -1.0, 0.5, 0.5).unwrap();
        let law = InitialLaw::standard_normal(2);
        let err = a2_check(&ou, &law, &law, &[1.0], &budget(16, 8, 1.0, 4), &RngSpec::new(0));
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn affine_models_have_exact_tangents() {
        let ou = LinearMfOu::new(1, -1.0, 0.5, 0.2).unwrap();
        let init = InitialLaw::standard_normal(1);
        for phi in [Perturbation::constant(&[1.0]), Perturbation::scaled_identity(1, 0.7)] {
            let t = pathwise_tangent_check(
                &ou,
                &init,
                &phi,
                &budget(64, 8, 1.0, 64),
                &[1e-2, 5e-3, 2.5e-3],
                &RngSpec::new(1),
            )
            .unwrap();
            assert!(t.rows.iter().all(|r| r.mean_sup_sq <= 1e-10), "{t:?}");
            assert!(t.pass);
        }
        let pure = LinearMfOu::new(1, -0.4, 0.0, 1.0).unwrap();
        let t = pathwise_tangent_check(
            &pure,
            &init,
            &Perturbation::constant(&[1.0]),
            &budget(16, 8, 1.0, 16),
            &[1e-2, 5e-3],
            &RngSpec::new(2),
        )
        .unwrap();
        assert!(t.rows.iter().all(|r| r.max_abs < 1e-11));
    }

    #[test]
    fn double_well_remainder_is_second_order() {
        let dw = DoubleWellMf::new(1, 0.5, 0.7, 0.2).unwrap();
        let t = pathwise_tangent_check(
            &dw,
            &InitialLaw::standard_normal(1),
            &Perturbation::constant(&[1.0]),
            &budget(64, 8, 1.0, 128),
            &[1e-2, 5e-3, 2.5e-3],
            &RngSpec::new(3),
        )
        .unwrap();
        for r in &t.ratios {
            assert!((r - 0.25).abs() < 0.05, "{t:?}");
        }
        assert!(t.pass);
    }

    #[test]
    fn coupled_runs_with_zero_shift_coincide() {
        let dw = DoubleWellMf::new(1, 0.5, 0.7, 0.2).unwrap();
        let t = pathwise_tangent_check(
            &dw,
            &InitialLaw::standard_normal(1),
            &Perturbation::zero(1),
            &budget(16, 8, 1.0, 16),
            &[1e-2],
            &RngSpec::new(4),
        )
        .unwrap();
        assert_eq!(t.rows[0].mean_sup_sq, 0.0);
    }
}
