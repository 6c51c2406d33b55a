//! JSON experiment descriptions.
//!
//! A config is one JSON object; times are in the abstract units of `[0, T]`.
//! Parsing is per top-level key so every error names the offending field.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bismut::{GateKind, MIN_REPLICATIONS};
use crate::error::{Error, Result};
use crate::functional::Observable;
use crate::measure::Perturbation;
use crate::model::ModelSpec;
use crate::oracle::{linear_mf_exact, FdConfig, LinearMfParams};
use crate::rng::RngSpec;
use crate::solver::{Budget, InitialLaw, TimeGrid};

/// Perturbation direction `φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    /// `φ ≡ value`.
    Constant { value: Vec<f64> },
    /// `φ(x) = scale·x`.
    ScaledIdentity { scale: f64 },
    /// `φ(x) = direction·cos(⟨frequency, x⟩ + phase)`.
    Cosine {
        direction: Vec<f64>,
        frequency: Vec<f64>,
        #[serde(default)]
        phase: f64,
    },
}

impl PhiSpec {
    pub fn build(&self, dim: usize) -> Perturbation {
        match self {
            PhiSpec::Constant { value } => Perturbation::constant(value),
            PhiSpec::ScaledIdentity { scale } => Perturbation::scaled_identity(dim, *scale),
            PhiSpec::Cosine {
                direction,
                frequency,
                phase,
            } => {
                let (u, w, p) = (direction.clone(), frequency.clone(), *phase);
                Perturbation::new(format!("cos(w={w:?};p={p})*{u:?}"), dim, move |x, out| {
                    let s = (x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + p).cos();
                    out.iter_mut().zip(&u).for_each(|(o, ui)| *o = ui * s);
                })
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let check = |field: &str, v: &[f64]| {
            if v.len() != dim {
                Err(Error::config(
                    format!("phi.{field}"),
                    format!("expected {dim} entries, got {}", v.len()),
                ))
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(Error::config(format!("phi.{field}"), "entries must be finite"))
            } else {
                Ok(())
            }
        };
        match self {
            PhiSpec::Constant { value } => check("value", value),
            PhiSpec::ScaledIdentity { scale } if !scale.is_finite() => {
                Err(Error::config("phi.scale", "must be finite"))
            }
            PhiSpec::ScaledIdentity { .. } => Ok(()),
            PhiSpec::Cosine {
                direction,
                frequency,
                phase,
            } => {
                check("direction", direction)?;
                check("frequency", frequency)?;
                if phase.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config("phi.phase", "must be finite"))
                }
            }
        }
    }
}

/// Test function `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSpec {
    /// `f(x) = x_axis`, so `P_T f` is a coordinate of the mean.
    CoordinateMean {
        #[serde(default)]
        axis: usize,
    },
    /// `f(x) = 1/(1 + e^{−scale·x_axis})`.
    Sigmoid {
        #[serde(default)]
        axis: usize,
        #[serde(default = "unit")]
        scale: f64,
    },
    /// `f(x) = (1 + tanh((x_axis − threshold)/width))/2`.
    SmoothIndicator {
        #[serde(default)]
        axis: usize,
        #[serde(default)]
        threshold: f64,
        width: f64,
    },
    Constant {
        value: f64,
    },
}

fn unit() -> f64 {
    1.0
}

impl FunctionSpec {
    pub fn build(&self) -> Observable {
        match *self {
            FunctionSpec::CoordinateMean { axis } => Observable::coordinate(axis),
            FunctionSpec::Sigmoid { axis, scale } => Observable::sigmoid(axis, scale),
            FunctionSpec::SmoothIndicator { axis, threshold, width } => {
                Observable::smooth_indicator(axis, threshold, width)
            }
            FunctionSpec::Constant { value } => Observable::constant(value),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let axis_ok = |axis: usize| {
            if axis < dim {
                Ok(())
            } else {
                Err(Error::config(
                    "f.axis",
                    format!("axis {axis} out of range for d = {dim}"),
                ))
            }
        };
        match *self {
            FunctionSpec::CoordinateMean { axis } => axis_ok(axis),
            FunctionSpec::Sigmoid { axis, scale } => {
                axis_ok(axis)?;
                if scale.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config("f.scale", "must be finite"))
                }
            }
            FunctionSpec::SmoothIndicator { axis, threshold, width } => {
                axis_ok(axis)?;
                if !(width > 0.0) || !width.is_finite() {
                    Err(Error::config("f.width", "must be positive"))
                } else if !threshold.is_finite() {
                    Err(Error::config("f.threshold", "must be finite"))
                } else {
                    Ok(())
                }
            }
            FunctionSpec::Constant { value } if !value.is_finite() => Err(Error::config("f.value", "must be finite")),
            FunctionSpec::Constant { .. } => Ok(()),
        }
    }
}

fn default_times() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}

fn default_probes() -> usize {
    4
}

fn default_tangent_ladder() -> Vec<f64> {
    FdConfig::default().eps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Bismut estimate, checked against the closed form where one exists.
    Estimate,
    /// Bismut against coupled finite differences.
    Compare {
        #[serde(default)]
        fd: FdConfig,
    },
    /// Implied gradient constant over `times`; `grid` fixes the step size.
    A1Sweep {
        #[serde(default = "default_times")]
        times: Vec<f64>,
        #[serde(default = "default_probes")]
        probes: usize,
    },
    /// Threshold total-variation bound between two initial laws, d = 1.
    A2Check {
        mu: InitialLaw,
        nu: InitialLaw,
        #[serde(default = "default_times")]
        times: Vec<f64>,
    },
    /// Pathwise difference quotients against the tangent flow.
    TangentCheck {
        #[serde(default = "default_tangent_ladder")]
        eps: Vec<f64>,
    },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Estimate => "estimate",
            TaskSpec::Compare { .. } => "compare",
            TaskSpec::A1Sweep { .. } => "a1_sweep",
            TaskSpec::A2Check { .. } => "a2_check",
            TaskSpec::TangentCheck { .. } => "tangent_check",
        }
    }
}

fn default_init() -> InitialLaw {
    InitialLaw::standard_normal(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// Defaults to the standard normal in the model's dimension.
    pub init: InitialLaw,
    pub grid: TimeGrid,
    pub particles: usize,
    pub replications: usize,
    pub gate: GateKind,
    pub phi: PhiSpec,
    pub f: FunctionSpec,
    pub seed: u64,
    pub task: TaskSpec,
    /// Not part of the experiment identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

const KEYS: [&str; 11] = [
    "model",
    "init",
    "grid",
    "particles",
    "replications",
    "gate",
    "phi",
    "f",
    "seed",
    "task",
    "output_dir",
];

fn field_at<T: serde::de::DeserializeOwned>(map: &Map<String, Value>, prefix: &str, key: &str) -> Result<T> {
    let path = format!("{prefix}{key}");
    let v = map
        .get(key)
        .ok_or_else(|| Error::config(path.as_str(), "missing field"))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::config(path, e.to_string()))
}

fn field<T: serde::de::DeserializeOwned>(map: &Map<String, Value>, key: &str) -> Result<T> {
    field_at(map, "", key)
}

fn field_or<T: serde::de::DeserializeOwned>(map: &Map<String, Value>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(_) => field(map, key),
    }
}

impl ExperimentConfig {
    /// Parse and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config("$", e.to_string()))?;
        let cfg = Self::from_value(&value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Parse without validating.
    pub fn from_value(value: &Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::config("$", "expected a JSON object"))?;
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(k.as_str(), "unknown field"));
        }
        let model: ModelSpec = field(map, "model")?;
        let init = match map.get("init") {
            None | Some(Value::Null) => InitialLaw::standard_normal(model.dim()),
            Some(_) => field(map, "init")?,
        };
        let grid = match map.get("grid") {
            Some(Value::Object(g)) => {
                if let Some(k) = g.keys().find(|k| *k != "horizon" && *k != "steps") {
                    return Err(Error::config(format!("grid.{k}"), "unknown field"));
                }
                TimeGrid {
                    horizon: field_at(g, "grid.", "horizon")?,
                    steps: field_at(g, "grid.", "steps")?,
                }
            }
            Some(_) => return Err(Error::config("grid", "expected an object")),
            None => return Err(Error::config("grid", "missing field")),
        };
        Ok(Self {
            model,
            init,
            grid,
            particles: field(map, "particles")?,
            replications: field(map, "replications")?,
            gate: field_or(map, "gate", GateKind::default())?,
            phi: field(map, "phi")?,
            f: field(map, "f")?,
            seed: field_or(map, "seed", 0)?,
            task: field_or(map, "task", TaskSpec::Estimate)?,
            output_dir: field_or(map, "output_dir", None)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Checks every field; errors carry the dotted path of the first bad one.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        self.model.build().map_err(|e| Error::config("model", e.to_string()))?;
        if !(self.grid.horizon > 0.0) || !self.grid.horizon.is_finite() {
            return Err(Error::config("grid.horizon", "must be positive and finite"));
        }
        if self.grid.steps == 0 {
            return Err(Error::config("grid.steps", "must be at least 1"));
        }
        if self.particles < 2 {
            return Err(Error::config("particles", "need at least 2 particles"));
        }
        if self.replications < MIN_REPLICATIONS {
            return Err(Error::config(
                "replications",
                format!("need at least {MIN_REPLICATIONS} replications"),
            ));
        }
        self.init.validate().map_err(|e| Error::config("init", e.to_string()))?;
        if self.init.dim() != d {
            return Err(Error::config(
                "init",
                format!("dimension {} does not match model dimension {d}", self.init.dim()),
            ));
        }
        self.phi.validate(d)?;
        self.f.validate(d)?;
        let times_ok = |t: &[f64]| {
            !t.is_empty() && t.iter().all(|x| *x > 0.0 && x.is_finite()) && t.windows(2).all(|w| w[1] > w[0])
        };
        match &self.task {
            TaskSpec::Estimate => {}
            TaskSpec::Compare { fd } => fd.validate().map_err(|e| Error::config("task.fd.eps", e.to_string()))?,
            TaskSpec::A1Sweep { times, probes } => {
                if !times_ok(times) {
                    return Err(Error::config("task.times", "must be positive and strictly increasing"));
                }
                if *probes < d {
                    return Err(Error::config("task.probes", format!("need at least d = {d} probes")));
                }
            }
            TaskSpec::A2Check { mu, nu, times } => {
                if d != 1 {
                    return Err(Error::config("model", "a2_check supports d = 1 only"));
                }
                for (name, law) in [("task.mu", mu), ("task.nu", nu)] {
                    law.validate().map_err(|e| Error::config(name, e.to_string()))?;
                    if law.dim() != 1 {
                        return Err(Error::config(name, "must be one-dimensional"));
                    }
                }
                if mu == nu {
                    return Err(Error::config("task.nu", "must differ from task.mu"));
                }
                if !times_ok(times) {
                    return Err(Error::config("task.times", "must be positive and strictly increasing"));
                }
            }
            TaskSpec::TangentCheck { eps } => FdConfig {
                eps: eps.clone(),
                richardson: false,
            }
            .validate()
            .map_err(|e| Error::config("task.eps", e.to_string()))?,
        }
        Ok(())
    }

    pub fn budget(&self) -> Budget {
        Budget::new(self.particles, self.replications, self.grid)
    }

    pub fn rng(&self) -> RngSpec {
        RngSpec::new(self.seed)
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir`.
    ///
    /// Object keys serialise sorted and defaults are filled in, so configs
    /// that differ only in layout or omitted defaults hash alike.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Closed-form `D_φ P_T f` where one is known: the linear mean-field
    /// model with a coordinate-mean `f` and constant `φ`.
    pub fn analytic_reference(&self) -> Option<f64> {
        match (&self.model, &self.f, &self.phi) {
            (
                ModelSpec::LinearMfOu { a, c, sigma, .. },
                FunctionSpec::CoordinateMean { axis },
                PhiSpec::Constant { value },
            ) => linear_mf_exact(
                &LinearMfParams {
                    a: *a,
                    c: *c,
                    sigma: *sigma,
                },
                self.grid.horizon,
                *axis,
                value,
            )
            .ok(),
            _ => None,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::LinearMfOu {
                dim: 1,
                a: -1.0,
                c: 0.5,
                sigma: 0.2,
            },
            init: default_init(),
            grid: TimeGrid {
                horizon: 1.0,
                steps: 1024,
            },
            particles: 4096,
            replications: 64,
            gate: GateKind::Linear,
            phi: PhiSpec::Constant { value: vec![1.0] },
            f: FunctionSpec::CoordinateMean { axis: 0 },
            seed: 0,
            task: TaskSpec::Estimate,
            output_dir: None,
        }
    }
}
