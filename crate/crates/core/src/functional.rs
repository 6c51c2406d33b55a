//! Terminal test functions `f: R^d → R` applied to `X_T`.

use std::fmt;
use std::sync::Arc;

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A labelled terminal functional.
#[derive(Clone)]
pub struct Observable {
    label: String,
    func: ScalarFn,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Observable").field(&self.label).finish()
    }
}

impl Observable {
    pub fn new<F>(label: impl Into<String>, func: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            func: Arc::new(func),
        }
    }

    /// `f(x) = x_axis`; its expectation is the coordinate mean.
    pub fn coordinate(axis: usize) -> Self {
        Self::new(format!("x{axis}"), move |x| x[axis])
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), move |_| c)
    }

    /// `f(x) = 1 / (1 + exp(-scale·x_axis))`, bounded in (0, 1).
    pub fn sigmoid(axis: usize, scale: f64) -> Self {
        Self::new(format!("sigmoid(x{axis};{scale})"), move |x| {
            1.0 / (1.0 + (-scale * x[axis]).exp())
        })
    }

    /// Smoothed indicator of `{x_axis > threshold}` with transition width `width`.
    pub fn smooth_indicator(axis: usize, threshold: f64, width: f64) -> Self {
        Self::new(format!("ind(x{axis}>{threshold};{width})"), move |x| {
            0.5 * (1.0 + ((x[axis] - threshold) / width).tanh())
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.func)(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_functionals_stay_in_range() {
        let s = Observable::sigmoid(0, 3.0);
        let ind = Observable::smooth_indicator(0, 0.5, 0.1);
        for x in [-50.0, -1.0, 0.0, 0.5, 2.0, 50.0] {
            let v = s.eval(&[x]);
            assert!((0.0..=1.0).contains(&v));
            let w = ind.eval(&[x]);
            assert!((0.0..=1.0).contains(&w));
        }
        assert_eq!(s.eval(&[0.0]), 0.5);
        assert_eq!(ind.eval(&[0.5]), 0.5);
        assert_eq!(Observable::coordinate(1).eval(&[3.0, -2.0]), -2.0);
    }
}
