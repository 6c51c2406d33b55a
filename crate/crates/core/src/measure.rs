//! Equal-weight empirical measures on R^d.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Cap on the number of atoms for exact assignment in d ≥ 2.
pub const ASSIGNMENT_CAP: usize = 512;

/// Equal-weight particle cloud standing in for a law in P₂.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    /// `atoms` is row-major, `count × dim`.
    pub fn new(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("dimension must be positive"));
        }
        if atoms.is_empty() || atoms.len() % dim != 0 {
            return Err(Error::arg(format!(
                "atom buffer of length {} is not a nonempty multiple of dim {dim}",
                atoms.len()
            )));
        }
        if let Some(pos) = atoms.iter().position(|a| !a.is_finite()) {
            return Err(Error::Evaluation { index: pos / dim });
        }
        Ok(Self { dim, atoms })
    }

    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
        let mut atoms = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            atoms.extend_from_slice(p);
        }
        Self::new(dim, atoms)
    }

    /// Point mass at `x`.
    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::new(x.len(), x.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.atoms.chunks_exact(self.dim)
    }

    /// `μ(f)` for vector-valued `f: R^d → R^k`.
    pub fn integrate<F>(&self, k: usize, mut f: F) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let mut acc = vec![0.0; k];
        let mut buf = vec![0.0; k];
        for (i, x) in self.iter().enumerate() {
            f(x, &mut buf);
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation { index: i });
            }
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        let n = self.count() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// `μ(f)` for scalar `f`.
    pub fn integrate_scalar<F>(&self, mut f: F) -> Result<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        Ok(self.integrate(1, |x, out| out[0] = f(x))?[0])
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for x in self.iter() {
            for (a, b) in m.iter_mut().zip(x) {
                *a += b;
            }
        }
        let n = self.count() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// CSV with header `x0,...,x{d-1}` and one atom per row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((0..self.dim).map(|k| format!("x{k}")))?;
        for x in self.iter() {
            w.write_record(x.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let dim = headers.len();
        for (k, h) in headers.iter().enumerate() {
            if h.trim() != format!("x{k}") {
                return Err(Error::arg(format!("unexpected CSV header `{h}` in column {k}")));
            }
        }
        let mut atoms = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::arg(format!("cannot parse `{field}` as a number")))?;
                atoms.push(v);
            }
        }
        Self::new(dim, atoms)
    }
}

type Field = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A direction `φ ∈ L²(R^d → R^d; μ)`.
#[derive(Clone)]
pub struct Perturbation {
    label: String,
    dim: usize,
    field: Arc<Field>,
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Perturbation")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .finish()
    }
}

impl Perturbation {
    pub fn new<F>(label: impl Into<String>, dim: usize, field: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            dim,
            field: Arc::new(field),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new("zero", dim, |_, out| out.fill(0.0))
    }

    /// `φ ≡ v`.
    pub fn constant(v: &[f64]) -> Self {
        let v = v.to_vec();
        let label = format!("const{v:?}");
        Self::new(label, v.len(), move |_, out| out.copy_from_slice(&v))
    }

    /// `φ(x) = s·x`.
    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self::new(format!("{s}*id"), dim, move |x, out| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = s * xi;
            }
        })
    }

    /// `αφ` on the same underlying field.
    pub fn scaled(&self, alpha: f64) -> Self {
        let inner = self.field.clone();
        Self {
            label: format!("{alpha}*{}", self.label),
            dim: self.dim,
            field: Arc::new(move |x, out| {
                inner(x, out);
                out.iter_mut().for_each(|o| *o *= alpha);
            }),
        }
    }

    /// `αφ + βψ`.
    pub fn combine(&self, alpha: f64, other: &Perturbation, beta: f64) -> Self {
        let a = self.field.clone();
        let b = other.field.clone();
        let dim = self.dim;
        Self {
            label: format!("{alpha}*{}+{beta}*{}", self.label, other.label),
            dim,
            field: Arc::new(move |x, out| {
                let mut tmp = vec![0.0; dim];
                a(x, out);
                b(x, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o = alpha * *o + beta * t;
                }
            }),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        (self.field)(x, out)
    }
}

/// `‖φ‖_{L²(μ)}`: root mean square of `|φ|` over the atoms.
pub fn l2_norm(phi: &Perturbation, mu: &EmpiricalMeasure) -> Result<f64> {
    check_dim(mu.dim(), phi.dim())?;
    let sq = mu.integrate_scalar(|x| {
        let mut out = vec![0.0; x.len()];
        phi.apply(x, &mut out);
        out.iter().map(|v| v * v).sum()
    })?;
    Ok(sq.sqrt())
}

/// `μ∘(Id+εφ)^{-1}`: every atom `x` moves to `x + εφ(x)`.
pub fn shift_pushforward(mu: &EmpiricalMeasure, phi: &Perturbation, eps: f64) -> Result<EmpiricalMeasure> {
    check_dim(mu.dim(), phi.dim())?;
    let d = mu.dim();
    let mut atoms = mu.atoms().to_vec();
    let mut buf = vec![0.0; d];
    for (i, x) in atoms.chunks_exact_mut(d).enumerate() {
        phi.apply(x, &mut buf);
        for (xi, p) in x.iter_mut().zip(&buf) {
            *xi += eps * p;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation { index: i });
        }
    }
    EmpiricalMeasure::new(d, atoms)
}

/// Exact `W₂` between equal-weight clouds: quantile coupling in d = 1,
/// optimal assignment in d ≥ 2 (equal counts, at most [`ASSIGNMENT_CAP`]).
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_dim(mu.dim(), nu.dim())?;
    if mu.dim() == 1 {
        return Ok(wasserstein2_1d(mu.atoms(), nu.atoms()));
    }
    if mu.count() > ASSIGNMENT_CAP || nu.count() > ASSIGNMENT_CAP {
        return Err(Error::Unsupported(format!(
            "W2 in d={} is limited to {ASSIGNMENT_CAP} atoms per measure",
            mu.dim()
        )));
    }
    if mu.count() != nu.count() {
        return Err(Error::Unsupported("W2 in d>=2 requires equal atom counts".into()));
    }
    let n = mu.count();
    let cost: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(mu.atom(i), nu.atom(j)))
        .collect();
    let assignment = min_cost_assignment(n, &cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Monotone coupling between the two quantile functions. Handles unequal
/// counts by integrating over the merged breakpoints of both step functions.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    if n == m {
        let s: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / n as f64).sqrt();
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut level = 0.0f64;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let diff = xs[i] - ys[j];
        total += (next - level) * diff * diff;
        level = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total.max(0.0).sqrt()
}

/// Hungarian algorithm with potentials (shortest augmenting paths),
/// `O(n³)`. Returns `assignment[row] = column` minimising the total cost of
/// the row-major `n × n` matrix.
pub fn min_cost_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; column 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(1, xs.to_vec()).unwrap()
    }

    /// Brute force over all permutations.
    fn w2_by_enumeration(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) {
            let n = perm.len();
            if k == n {
                let c: f64 = (0..n).map(|i| sq_dist(mu.atom(i), nu.atom(perm[i]))).sum();
                *best = best.min(c);
                return;
            }
            for i in k..n {
                perm.swap(k, i);
                permute(k + 1, perm, best, mu, nu);
                perm.swap(k, i);
            }
        }
        let mut perm: Vec<usize> = (0..mu.count()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut perm, &mut best, mu, nu);
        (best / mu.count() as f64).sqrt()
    }

    #[test]
    fn integrate_examples() {
        let dirac = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        assert_eq!(dirac.integrate(1, |x, o| o[0] = x[0]).unwrap(), vec![0.0]);
        assert_eq!(line(&[1.0, 2.0, 3.0]).integrate_scalar(|x| x[0]).unwrap(), 2.0);
        let v = line(&[0.0, std::f64::consts::PI])
            .integrate_scalar(|x| x[0].sin())
            .unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn integrate_reports_the_offending_atom() {
        let mu = line(&[1.0, 0.0, 2.0]);
        let err = mu.integrate_scalar(|x| 1.0 / x[0]).unwrap_err();
        assert!(matches!(err, Error::Evaluation { index: 1 }));
    }

    #[test]
    fn non_finite_atoms_are_rejected() {
        assert!(EmpiricalMeasure::new(1, vec![1.0, f64::NAN]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn shift_examples() {
        let mu = line(&[-1.0, 1.0]);
        assert_eq!(
            shift_pushforward(&mu, &Perturbation::scaled_identity(1, 1.0), 0.0).unwrap(),
            mu
        );
        let shifted = shift_pushforward(&mu, &Perturbation::scaled_identity(1, 1.0), 0.5).unwrap();
        assert_eq!(shifted.atoms(), &[-1.5, 1.5]);
        let cloud = EmpiricalMeasure::from_points(&[[0.0, 1.0], [2.0, -1.0]]).unwrap();
        let t = shift_pushforward(&cloud, &Perturbation::constant(&[1.0, 2.0]), 0.25).unwrap();
        assert_eq!(t.atoms(), &[0.25, 1.5, 2.25, -0.5]);
    }

    #[test]
    fn l2_norm_examples() {
        let mu = line(&[3.0, 4.0]);
        assert_eq!(l2_norm(&Perturbation::zero(1), &mu).unwrap(), 0.0);
        let cloud = EmpiricalMeasure::from_points(&[[0.0, 1.0], [2.0, -1.0]]).unwrap();
        assert!((l2_norm(&Perturbation::constant(&[3.0, 4.0]), &cloud).unwrap() - 5.0).abs() < 1e-15);
        let n = l2_norm(&Perturbation::scaled_identity(1, 1.0), &mu).unwrap();
        assert!((n - 3.535533906).abs() < 1e-9);
    }

    #[test]
    fn w2_examples() {
        let mu = line(&[0.0, 1.0]);
        assert_eq!(wasserstein2(&mu, &mu).unwrap(), 0.0);
        let x = EmpiricalMeasure::dirac(&[1.0, 2.0]).unwrap();
        let y = EmpiricalMeasure::dirac(&[4.0, 6.0]).unwrap();
        assert!((wasserstein2(&x, &y).unwrap() - 5.0).abs() < 1e-15);
        let nu = line(&[1.0, 2.0]);
        let expected = w2_by_enumeration(&mu, &nu);
        assert!((expected - 1.0).abs() < 1e-15);
        assert!((wasserstein2(&mu, &nu).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn w2_errors() {
        let a = line(&[0.0]);
        let b = EmpiricalMeasure::dirac(&[0.0, 0.0]).unwrap();
        assert!(matches!(wasserstein2(&a, &b), Err(Error::DimensionMismatch { .. })));
        let c = EmpiricalMeasure::from_points(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(wasserstein2(&b, &c), Err(Error::Unsupported(_))));
        let big = EmpiricalMeasure::new(2, vec![0.0; 2 * (ASSIGNMENT_CAP + 1)]).unwrap();
        assert!(matches!(wasserstein2(&big, &big), Err(Error::Unsupported(_))));
    }

    #[test]
    fn unequal_counts_in_1d_use_the_quantile_coupling() {
        // {0,1} vs {0.5}: every mass moves by 0.5.
        let w = wasserstein2(&line(&[0.0, 1.0]), &line(&[0.5])).unwrap();
        assert!((w - 0.5).abs() < 1e-15);
    }

    fn cloud_strategy(d: usize, n: usize) -> impl Strategy<Value = EmpiricalMeasure> {
        proptest::collection::vec(-5.0f64..5.0, d * n).prop_map(move |atoms| EmpiricalMeasure::new(d, atoms).unwrap())
    }

    proptest! {
        #[test]
        fn assignment_matches_enumeration(mu in cloud_strategy(2, 6), nu in cloud_strategy(2, 6)) {
            let exact = w2_by_enumeration(&mu, &nu);
            prop_assert!((wasserstein2(&mu, &nu).unwrap() - exact).abs() < 1e-12);
        }

        #[test]
        fn sorted_coupling_matches_enumeration(mu in cloud_strategy(1, 6), nu in cloud_strategy(1, 6)) {
            let exact = w2_by_enumeration(&mu, &nu);
            prop_assert!((wasserstein2(&mu, &nu).unwrap() - exact).abs() < 1e-12);
        }

        #[test]
        fn w2_is_a_metric(a in cloud_strategy(1, 64), b in cloud_strategy(1, 64), c in cloud_strategy(1, 64)) {
            let ab = wasserstein2(&a, &b).unwrap();
            let ba = wasserstein2(&b, &a).unwrap();
            let bc = wasserstein2(&b, &c).unwrap();
            let ac = wasserstein2(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn shift_is_a_coupling(mu in cloud_strategy(2, 24), eps in -1.0f64..1.0, s in -2.0f64..2.0) {
            let phi = Perturbation::new("sin", 2, move |x, o| { o[0] = (s * x[1]).sin(); o[1] = x[0] * 0.3; });
            let shifted = shift_pushforward(&mu, &phi, eps).unwrap();
            let w = wasserstein2(&mu, &shifted).unwrap();
            prop_assert!(w <= eps.abs() * l2_norm(&phi, &mu).unwrap() + 1e-12);
        }

        #[test]
        fn integrate_is_linear_and_permutation_invariant(atoms in proptest::collection::vec(-3.0f64..3.0, 2..40), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mu = EmpiricalMeasure::new(1, atoms.clone()).unwrap();
            let mut rev = atoms.clone();
            rev.reverse();
            let nu = EmpiricalMeasure::new(1, rev).unwrap();
            let f = |x: &[f64]| x[0].sin();
            let g = |x: &[f64]| x[0] * x[0];
            let lhs = mu.integrate_scalar(|x| a * f(x) + b * g(x)).unwrap();
            let rhs = a * mu.integrate_scalar(f).unwrap() + b * mu.integrate_scalar(g).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!((mu.integrate_scalar(f).unwrap() - nu.integrate_scalar(f).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let mu = EmpiricalMeasure::from_points(&[[0.1, -2.0], [1e-17, 3.5]]).unwrap();
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1\n"));
        assert_eq!(EmpiricalMeasure::read_csv(buf.as_slice()).unwrap(), mu);
    }
}
