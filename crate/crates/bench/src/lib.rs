//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use mfbismut::model::{CylindricalDriftSpec, FeatureKind, FeatureSpec, OuterKind};
use mfbismut::rng::{NoiseSource, StreamDomain};
use mfbismut::{Coefficients, EmpiricalMeasure, ModelSpec, RngSpec};

/// The three built-in models at the parameters used by the acceptance suite.
pub fn builtin_models() -> Vec<(&'static str, Arc<dyn Coefficients>)> {
    let specs = [
        ModelSpec::LinearMfOu {
            dim: 1,
            a: -1.0,
            c: 0.5,
            sigma: 0.2,
        },
        ModelSpec::DoubleWellMf {
            dim: 1,
            kappa: 0.5,
            sigma: 0.7,
            sigma_mod: 0.2,
        },
        ModelSpec::CylindricalDini(CylindricalDriftSpec {
            dim: 1,
            alpha: 0.3,
            outer: OuterKind::TanhSum,
            features: vec![FeatureSpec {
                kind: FeatureKind::Sin,
                axis: 0,
            }],
            sigma: 1.0,
            mollify_radius: 1e-3,
            confinement: 0.0,
        }),
    ];
    specs
        .iter()
        .map(|s| (s.name(), s.build().expect("valid built-in spec")))
        .collect()
}

/// Standard normal cloud of `n` atoms and a matching direction field.
pub fn ensemble(n: usize, d: usize, seed: u64) -> (EmpiricalMeasure, Vec<f64>) {
    let s = RngSpec::new(seed).stream(0, StreamDomain::Probe);
    let mut x = vec![0.0; n * d];
    let mut v = vec![0.0; n * d];
    s.fill_step(0, d, &mut x);
    s.fill_step(1, d, &mut v);
    (EmpiricalMeasure::new(d, x).expect("finite atoms"), v)
}
