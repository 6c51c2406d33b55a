//! Euler–Maruyama co-simulation of the particle system and its tangent flow.
//!
//! One step from `t_k` with the empirical measure `μ_k` frozen:
//!
//! ```text
//! X_{k+1} = X_k + (B+b)(t_k, X_k, μ_k) dt + σ(t_k, X_k) ΔW_k
//! V_{k+1} = V_k + [∇(B+b)·V_k + F_k(V)] dt + (∇σ·V_k) ΔW_k
//! F_k(V)^i = (1/N) Σ_j D^L(B+b)(t_k, X_k^i, μ_k)(X_k^j) V_k^j
//! ```
//!
//! Several ensembles can be advanced in lockstep on the same increments,
//! each carrying any number of tangent directions over one position path.
//! All accumulation orders are fixed, so results depend only on the inputs.

// Per-particle kernels index several short rows by the same axis.
#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, Perturbation};
use crate::model::{fill_small, Coefficients};
use crate::rng::{CounterRng, NoiseSource, RngSpec, StreamDomain};

/// Uniform grid `t_k = k·T/K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        let g = Self { horizon, steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::arg(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.steps == 0 {
            return Err(Error::arg("grid needs at least one step"));
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor,
        }
    }
}

/// Monte Carlo budget: `N` particles per ensemble, `M` replications.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub particles: usize,
    pub replications: usize,
    pub grid: TimeGrid,
}

impl Budget {
    pub fn new(particles: usize, replications: usize, grid: TimeGrid) -> Self {
        Self {
            particles,
            replications,
            grid,
        }
    }
}

/// Law of `X_0`, sampled once per replication from its own stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Independent `N(mean_a, std²)` coordinates.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Every particle starts at `at`.
    Point { at: Vec<f64> },
    /// Particle `i` starts at atom `i mod n`.
    Atoms { atoms: Vec<Vec<f64>> },
}

impl InitialLaw {
    pub fn standard_normal(dim: usize) -> Self {
        InitialLaw::Gaussian {
            mean: vec![0.0; dim],
            std: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Point { at } => at.len(),
            InitialLaw::Atoms { atoms } => atoms.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            InitialLaw::Gaussian { mean, std } => !mean.is_empty() && finite(mean) && *std >= 0.0 && std.is_finite(),
            InitialLaw::Point { at } => !at.is_empty() && finite(at),
            InitialLaw::Atoms { atoms } => {
                !atoms.is_empty()
                    && atoms
                        .iter()
                        .all(|a| a.len() == atoms[0].len() && !a.is_empty() && finite(a))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(
                "initial law needs finite, nonempty, dimension-consistent parameters",
            ))
        }
    }

    /// `n × d` initial positions drawn from `rng`.
    pub fn sample(&self, n: usize, rng: &CounterRng) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        match self {
            InitialLaw::Gaussian { mean, std } => {
                for (i, x) in out.chunks_exact_mut(d).enumerate() {
                    rng.standard_normals(0, i, x);
                    for (xi, m) in x.iter_mut().zip(mean) {
                        *xi = m + std * *xi;
                    }
                }
            }
            InitialLaw::Point { at } => out.chunks_exact_mut(d).for_each(|x| x.copy_from_slice(at)),
            InitialLaw::Atoms { atoms } => {
                for (i, x) in out.chunks_exact_mut(d).enumerate() {
                    x.copy_from_slice(&atoms[i % atoms.len()]);
                }
            }
        }
        out
    }

    /// Initial positions of replication `replication` under `rng`.
    pub fn sample_replication(&self, n: usize, rng: &RngSpec, replication: u32) -> Vec<f64> {
        self.sample(n, &rng.stream(replication, StreamDomain::Initial))
    }
}

/// `η_i = φ(x_i)` for row-major positions.
pub fn apply_field(phi: &Perturbation, positions: &[f64]) -> Vec<f64> {
    let d = phi.dim();
    let mut out = vec![0.0; positions.len()];
    for (x, o) in positions.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        phi.apply(x, o);
    }
    out
}

/// Mutable state of one ensemble: positions and any number of tangent
/// directions driven by the same positions.
#[derive(Clone, Debug)]
pub struct EnsembleState {
    pub positions: Vec<f64>,
    pub tangents: Vec<Vec<f64>>,
    /// Mean-field tangent term per direction at the current node.
    pub mean_field: Vec<Vec<f64>>,
    /// Model summary of the current empirical measure.
    pub summary: Vec<f64>,
}

impl EnsembleState {
    pub fn new(positions: Vec<f64>, tangents: Vec<Vec<f64>>) -> Self {
        let mean_field = tangents.iter().map(|v| vec![0.0; v.len()]).collect();
        Self {
            positions,
            tangents,
            mean_field,
            summary: Vec::new(),
        }
    }
}

/// The current node as seen by an observer.
#[derive(Clone, Copy, Debug)]
pub struct Node<'a> {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    /// `ΔW_k` (`N × d`) for `k < K`; `None` at the terminal node.
    pub increments: Option<&'a [f64]>,
}

/// Per-particle scratch for one step.
struct Scratch {
    drift: Vec<f64>,
    jac: Vec<f64>,
    sigma: Vec<f64>,
    dsigma: Vec<f64>,
    coef: Vec<f64>,
    feat: Vec<f64>,
    kern: Vec<f64>,
    channel: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, m: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            jac: vec![0.0; d * d],
            sigma: vec![0.0; d * d],
            dsigma: vec![0.0; d * d * d],
            coef: vec![0.0; m * d],
            feat: vec![0.0; m * d],
            kern: vec![0.0; d * d],
            channel: vec![0.0; m],
            tmp: vec![0.0; d],
        }
    }
}

fn check_shapes(coeffs: &dyn Coefficients, state: &EnsembleState) -> Result<usize> {
    let d = coeffs.dim();
    if state.positions.is_empty() || state.positions.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: state.positions.len(),
        });
    }
    if let Some(v) = state.tangents.iter().find(|v| v.len() != state.positions.len()) {
        return Err(Error::DimensionMismatch {
            expected: state.positions.len(),
            got: v.len(),
        });
    }
    Ok(state.positions.len() / d)
}

/// Advance `states` in lockstep over `grid`, all driven by `noise`.
///
/// `observe` runs at every node `k = 0..=K` after the summaries and
/// mean-field terms of node `k` are in place and before the step to `k+1`.
pub fn run_coupled<O>(
    coeffs: &dyn Coefficients,
    states: &mut [EnsembleState],
    grid: &TimeGrid,
    noise: &dyn NoiseSource,
    mut observe: O,
) -> Result<()>
where
    O: FnMut(&Node<'_>, &[EnsembleState]) -> Result<()>,
{
    grid.validate()?;
    let d = coeffs.dim();
    let n = match states.first() {
        Some(s) => check_shapes(coeffs, s)?,
        None => return Ok(()),
    };
    for s in states.iter() {
        if check_shapes(coeffs, s)? != n {
            return Err(Error::arg("coupled ensembles must have equal particle counts"));
        }
    }
    let m = coeffs.separable_channels();
    let mut scratch = Scratch::new(d, m);
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut dw = vec![0.0; n * d];
    for s in states.iter_mut() {
        s.summary = vec![0.0; coeffs.summary_len()];
    }

    for k in 0..=grid.steps {
        let t = grid.node(k);
        let terminal = k == grid.steps;
        for s in states.iter_mut() {
            coeffs.summarize(t, &s.positions, &mut s.summary);
            if !terminal {
                for (v, mf) in s.tangents.iter().zip(s.mean_field.iter_mut()) {
                    mean_field_into(coeffs, t, &s.positions, &s.summary, v, mf, &mut scratch);
                }
            }
        }
        if !terminal {
            noise.fill_step(k, d, &mut dw);
            dw.iter_mut().for_each(|z| *z *= sqrt_dt);
        }
        let node = Node {
            step: k,
            t,
            dt,
            increments: (!terminal).then_some(&dw[..]),
        };
        observe(&node, states)?;
        if terminal {
            break;
        }
        for s in states.iter_mut() {
            let EnsembleState {
                positions,
                tangents,
                mean_field,
                summary,
            } = s;
            for (v, mf) in tangents.iter_mut().zip(mean_field.iter()) {
                tangent_step_into(coeffs, k, t, dt, positions, summary, v, mf, &dw, &mut scratch)?;
            }
            particle_step_into(coeffs, k, t, dt, positions, summary, &dw, &mut scratch)?;
        }
    }
    Ok(())
}

/// Single-ensemble wrapper around [`run_coupled`].
pub fn run_ensemble<O>(
    coeffs: &dyn Coefficients,
    state: &mut EnsembleState,
    grid: &TimeGrid,
    noise: &dyn NoiseSource,
    mut observe: O,
) -> Result<()>
where
    O: FnMut(&Node<'_>, &EnsembleState) -> Result<()>,
{
    run_coupled(coeffs, std::slice::from_mut(state), grid, noise, |node, s| {
        observe(node, &s[0])
    })
}

#[allow(clippy::too_many_arguments)]
fn particle_step_into(
    coeffs: &dyn Coefficients,
    k: usize,
    t: f64,
    dt: f64,
    x: &mut [f64],
    summary: &[f64],
    dw: &[f64],
    sc: &mut Scratch,
) -> Result<()> {
    let d = coeffs.dim();
    let state_dependent = coeffs.state_dependent_diffusion();
    if !state_dependent {
        coeffs.diffusion(t, &x[..d], &mut sc.sigma);
    }
    for (i, (xi, wi)) in x.chunks_exact_mut(d).zip(dw.chunks_exact(d)).enumerate() {
        coeffs.drift(t, xi, summary, &mut sc.drift);
        if state_dependent {
            coeffs.diffusion(t, xi, &mut sc.sigma);
        }
        let mut finite = true;
        for a in 0..d {
            let noise: f64 = sc.sigma[a * d..(a + 1) * d].iter().zip(wi).map(|(s, w)| s * w).sum();
            xi[a] += sc.drift[a] * dt + noise;
            finite &= xi[a].is_finite();
        }
        if !finite {
            return Err(Error::Divergence {
                step: k,
                particle: i,
                replication: None,
            });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn tangent_step_into(
    coeffs: &dyn Coefficients,
    k: usize,
    t: f64,
    dt: f64,
    x: &[f64],
    summary: &[f64],
    v: &mut [f64],
    mf: &[f64],
    dw: &[f64],
    sc: &mut Scratch,
) -> Result<()> {
    let d = coeffs.dim();
    let state_dependent = coeffs.state_dependent_diffusion();
    for (i, ((xi, vi), (mfi, wi))) in x
        .chunks_exact(d)
        .zip(v.chunks_exact_mut(d))
        .zip(mf.chunks_exact(d).zip(dw.chunks_exact(d)))
        .enumerate()
    {
        coeffs.drift_grad_x(t, xi, summary, &mut sc.jac);
        for a in 0..d {
            let jv: f64 = sc.jac[a * d..(a + 1) * d]
                .iter()
                .zip(vi.iter())
                .map(|(j, v)| j * v)
                .sum();
            sc.tmp[a] = (jv + mfi[a]) * dt;
        }
        if state_dependent {
            coeffs.diffusion_grad(t, xi, &mut sc.dsigma);
            for a in 0..d {
                let mut acc = 0.0;
                for b in 0..d {
                    let row = &sc.dsigma[(a * d + b) * d..(a * d + b + 1) * d];
                    let dsv: f64 = row.iter().zip(vi.iter()).map(|(g, v)| g * v).sum();
                    acc += dsv * wi[b];
                }
                sc.tmp[a] += acc;
            }
        }
        let mut finite = true;
        for a in 0..d {
            vi[a] += sc.tmp[a];
            finite &= vi[a].is_finite();
        }
        if !finite {
            return Err(Error::Divergence {
                step: k,
                particle: i,
                replication: None,
            });
        }
    }
    Ok(())
}

fn mean_field_into(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    summary: &[f64],
    v: &[f64],
    out: &mut [f64],
    sc: &mut Scratch,
) {
    if coeffs.separable_channels() > 0 {
        separable_into(coeffs, t, x, summary, v, out, sc)
    } else {
        generic_into(coeffs, t, x, summary, v, out, sc)
    }
}

fn separable_into(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    summary: &[f64],
    v: &[f64],
    out: &mut [f64],
    sc: &mut Scratch,
) {
    let d = coeffs.dim();
    let m = coeffs.separable_channels();
    let n = x.len() / d;
    // channel_c = (1/N) Σ_j ⟨feature_grad_c(y_j), V_j⟩
    fill_small(&mut sc.channel, 0.0);
    for (y, vj) in x.chunks_exact(d).zip(v.chunks_exact(d)) {
        coeffs.lions_feature_grad(t, y, &mut sc.feat);
        for (c, row) in sc.feat.chunks_exact(d).enumerate() {
            sc.channel[c] += row.iter().zip(vj).map(|(g, w)| g * w).sum::<f64>();
        }
    }
    sc.channel.iter_mut().for_each(|c| *c /= n as f64);
    if sc.channel.iter().all(|&c| c == 0.0) {
        fill_small(out, 0.0);
        return;
    }
    for (xi, oi) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        coeffs.lions_coef(t, xi, summary, &mut sc.coef);
        fill_small(oi, 0.0);
        for c in 0..m {
            let w = sc.channel[c];
            for a in 0..d {
                oi[a] += sc.coef[c * d + a] * w;
            }
        }
    }
}

fn generic_into(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    summary: &[f64],
    v: &[f64],
    out: &mut [f64],
    sc: &mut Scratch,
) {
    let d = coeffs.dim();
    let n = x.len() / d;
    for (xi, oi) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        fill_small(oi, 0.0);
        for (y, vj) in x.chunks_exact(d).zip(v.chunks_exact(d)) {
            coeffs.lions_kernel(t, xi, summary, y, &mut sc.kern);
            for a in 0..d {
                oi[a] += sc.kern[a * d..(a + 1) * d]
                    .iter()
                    .zip(vj)
                    .map(|(k, w)| k * w)
                    .sum::<f64>();
            }
        }
        oi.iter_mut().for_each(|o| *o /= n as f64);
    }
}

fn summary_of(coeffs: &dyn Coefficients, t: f64, mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
    crate::model::summarize(coeffs, t, mu)
}

fn check_aligned(mu: &EmpiricalMeasure, arrays: &[&[f64]]) -> Result<()> {
    for a in arrays {
        if a.len() != mu.atoms().len() {
            return Err(Error::DimensionMismatch {
                expected: mu.atoms().len(),
                got: a.len(),
            });
        }
    }
    Ok(())
}

/// One Euler–Maruyama step of the positions; `mu` is the empirical measure
/// the coefficients are frozen at (normally that of `x`).
pub fn step_particles(
    coeffs: &dyn Coefficients,
    mu: &EmpiricalMeasure,
    x: &[f64],
    dw: &[f64],
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    check_aligned(mu, &[x, dw])?;
    let s = summary_of(coeffs, t, mu)?;
    let mut next = x.to_vec();
    let mut sc = Scratch::new(coeffs.dim(), coeffs.separable_channels());
    particle_step_into(coeffs, 0, t, dt, &mut next, &s, dw, &mut sc)?;
    Ok(next)
}

/// `(1/N) Σ_j kernel(t, X^i, μ, X^j)·V^j` for every `i`, by the separable
/// path when the model provides one.
pub fn mean_field_tangent_term(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_aligned(mu, &[x, v])?;
    let s = summary_of(coeffs, t, mu)?;
    let mut out = vec![0.0; x.len()];
    let mut sc = Scratch::new(coeffs.dim(), coeffs.separable_channels());
    mean_field_into(coeffs, t, x, &s, v, &mut out, &mut sc);
    finite(out)
}

/// The `O(N²)` double loop over the full kernel.
pub fn mean_field_generic(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_aligned(mu, &[x, v])?;
    let s = summary_of(coeffs, t, mu)?;
    let mut out = vec![0.0; x.len()];
    let mut sc = Scratch::new(coeffs.dim(), coeffs.separable_channels());
    generic_into(coeffs, t, x, &s, v, &mut out, &mut sc);
    finite(out)
}

/// The `O(N·m)` separable path; unsupported without separable channels.
pub fn mean_field_separable(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    v: &[f64],
) -> Result<Vec<f64>> {
    if coeffs.separable_channels() == 0 {
        return Err(Error::Unsupported(format!("{} has no separable kernel", coeffs.id())));
    }
    check_aligned(mu, &[x, v])?;
    let s = summary_of(coeffs, t, mu)?;
    let mut out = vec![0.0; x.len()];
    let mut sc = Scratch::new(coeffs.dim(), coeffs.separable_channels());
    separable_into(coeffs, t, x, &s, v, &mut out, &mut sc);
    finite(out)
}

fn finite(out: Vec<f64>) -> Result<Vec<f64>> {
    match out.iter().position(|v| !v.is_finite()) {
        None => Ok(out),
        Some(p) => Err(Error::Evaluation { index: p }),
    }
}

/// One step of the tangent flow.
pub fn step_tangents(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    v: &[f64],
    dw: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let mf = mean_field_tangent_term(coeffs, t, x, mu, v)?;
    let s = summary_of(coeffs, t, mu)?;
    let mut next = v.to_vec();
    let mut sc = Scratch::new(coeffs.dim(), coeffs.separable_channels());
    tangent_step_into(coeffs, 0, t, dt, x, &s, &mut next, &mf, dw, &mut sc)?;
    Ok(next)
}

/// Full record of one replication.
#[derive(Clone, Debug)]
pub struct TrajectoryBundle {
    pub particles: usize,
    pub dim: usize,
    /// `(K+1) × N × d`.
    pub positions: Vec<f64>,
    /// `(K+1) × N × d`.
    pub tangents: Vec<f64>,
    /// `K × N × d`.
    pub dw: Vec<f64>,
    pub grid: TimeGrid,
    pub seed: u64,
    pub replication: u32,
    pub model: String,
}

impl TrajectoryBundle {
    fn slab(&self, k: usize) -> std::ops::Range<usize> {
        let w = self.particles * self.dim;
        k * w..(k + 1) * w
    }

    pub fn positions_at(&self, k: usize) -> &[f64] {
        &self.positions[self.slab(k)]
    }

    pub fn tangents_at(&self, k: usize) -> &[f64] {
        &self.tangents[self.slab(k)]
    }

    pub fn increments_at(&self, k: usize) -> &[f64] {
        &self.dw[self.slab(k)]
    }

    pub fn measure_at(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.dim, self.positions_at(k).to_vec()).expect("bundle positions are finite")
    }
}

/// Co-simulate positions and the tangent along `phi` for one replication.
pub fn simulate(
    coeffs: &dyn Coefficients,
    init: &InitialLaw,
    phi: &Perturbation,
    grid: &TimeGrid,
    n: usize,
    rng: &RngSpec,
    replication: u32,
) -> Result<TrajectoryBundle> {
    let x0 = init.sample_replication(n, rng, replication);
    simulate_with_noise(coeffs, x0, phi, grid, &rng.brownian(replication), rng.seed, replication)
}

/// [`simulate`] from given initial positions and noise.
pub fn simulate_with_noise(
    coeffs: &dyn Coefficients,
    x0: Vec<f64>,
    phi: &Perturbation,
    grid: &TimeGrid,
    noise: &dyn NoiseSource,
    seed: u64,
    replication: u32,
) -> Result<TrajectoryBundle> {
    let d = coeffs.dim();
    if phi.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: phi.dim(),
        });
    }
    let n = x0.len() / d.max(1);
    if n < 2 {
        return Err(Error::arg("simulation needs at least two particles"));
    }
    let v0 = apply_field(phi, &x0);
    let mut state = EnsembleState::new(x0, vec![v0]);
    let k = grid.steps;
    let mut positions = Vec::with_capacity((k + 1) * n * d);
    let mut tangents = Vec::with_capacity((k + 1) * n * d);
    let mut dw = Vec::with_capacity(k * n * d);
    run_ensemble(coeffs, &mut state, grid, noise, |node, s| {
        positions.extend_from_slice(&s.positions);
        tangents.extend_from_slice(&s.tangents[0]);
        if let Some(w) = node.increments {
            dw.extend_from_slice(w);
        }
        Ok(())
    })
    .map_err(|e| e.in_replication(replication))?;
    Ok(TrajectoryBundle {
        particles: n,
        dim: d,
        positions,
        tangents,
        dw,
        grid: *grid,
        seed,
        replication,
        model: coeffs.id().to_string(),
    })
}
