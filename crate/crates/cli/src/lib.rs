//! Experiment runner behind the `mfbismut` binary.
//!
//! [`execute`] runs the task named in a config and returns tables and
//! curves; [`run`] adds the thread cap and writes the artifacts:
//! `report.json`, `results.csv`, one two-column `*.dat` file per curve and
//! a gnuplot script `plot.gp`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mfbismut::bismut::estimate_intrinsic_derivative;
use mfbismut::oracle::{a1_sweep, a2_check, fd_intrinsic_derivative, pathwise_tangent_check};
use mfbismut::solver::simulate;
use mfbismut::{ExperimentConfig, TaskSpec};
use serde::Serialize;
use serde_json::{json, Value};

/// Stream tag of the finite-difference runs in `compare`, disjoint from the
/// estimator's streams.
pub const FD_STREAM_TAG: u64 = 0x6664;

/// Relative tolerance of the closed-form check in `estimate`.
pub const RELATIVE_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    /// Ran to completion with nothing to check against.
    Complete,
    /// Aborted; artifacts are partial.
    Error,
}

/// One line of `results.csv`. `pass_flag` is empty for informational rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub t: f64,
    pub statistic: String,
    pub value: f64,
    pub se: Option<f64>,
    pub pass_flag: String,
}

impl Row {
    fn info(t: f64, statistic: impl Into<String>, value: f64, se: Option<f64>) -> Self {
        Self {
            t,
            statistic: statistic.into(),
            value,
            se,
            pass_flag: String::new(),
        }
    }

    fn flagged(t: f64, statistic: impl Into<String>, value: f64, se: Option<f64>, pass: bool) -> Self {
        Self {
            pass_flag: flag(pass).into(),
            ..Self::info(t, statistic, value, se)
        }
    }
}

fn flag(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// A plotted curve, written as `<name>.dat`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub name: String,
    pub xlabel: String,
    pub ylabel: String,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    fn new(name: &str, xlabel: &str, ylabel: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
            points,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub status: Status,
    pub payload: Value,
    pub rows: Vec<Row>,
    pub curves: Vec<Curve>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub task: String,
    pub status: Status,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub result: Value,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs the configured task on the current rayon pool.
pub fn execute(cfg: &ExperimentConfig) -> mfbismut::Result<Outcome> {
    let coeffs = cfg.model.build()?;
    let coeffs = coeffs.as_ref();
    let d = cfg.dim();
    let phi = cfg.phi.build(d);
    let f = cfg.f.build();
    let budget = cfg.budget();
    let rng = cfg.rng();
    let horizon = cfg.grid.horizon;
    match &cfg.task {
        TaskSpec::Estimate => {
            let est = estimate_intrinsic_derivative(coeffs, &cfg.init, &phi, &f, &budget, cfg.gate, &rng)?;
            let (wm, wm_se) = est.weight_mean();
            let mut rows = vec![Row::info(horizon, "bismut", est.estimate, Some(est.std_error))];
            let reference = cfg.analytic_reference();
            let (status, tolerance) = match reference {
                Some(exact) => {
                    let tol = (3.0 * est.std_error).max(RELATIVE_TOLERANCE * exact.abs());
                    let pass = (est.estimate - exact).abs() <= tol;
                    rows.push(Row::flagged(horizon, "analytic", exact, None, pass));
                    (if pass { Status::Pass } else { Status::Fail }, Some(tol))
                }
                None => (Status::Complete, None),
            };
            rows.push(Row::info(horizon, "weight_mean", wm, Some(wm_se)));
            let curves = vec![replicate_curve("replicates", &est.replicates)];
            Ok(Outcome {
                status,
                payload: json!({
                    "bismut": est,
                    "analytic": reference,
                    "tolerance": tolerance,
                    "weight_mean": wm,
                    "weight_mean_se": wm_se,
                }),
                rows,
                curves,
            })
        }
        TaskSpec::Compare { fd } => {
            let bis = estimate_intrinsic_derivative(coeffs, &cfg.init, &phi, &f, &budget, cfg.gate, &rng)?;
            let fdr = fd_intrinsic_derivative(coeffs, &cfg.init, &phi, &f, &budget, fd, &rng.derive(FD_STREAM_TAG))?;
            let diff = (bis.estimate - fdr.result.estimate).abs();
            let threshold = 3.0 * (bis.std_error + fdr.result.std_error);
            let pass = diff <= threshold;
            let mut rows = vec![
                Row::info(horizon, "bismut", bis.estimate, Some(bis.std_error)),
                Row::info(horizon, "fd", fdr.result.estimate, Some(fdr.result.std_error)),
            ];
            for e in &fdr.ladder {
                rows.push(Row::info(
                    horizon,
                    format!("fd(eps={})", e.eps),
                    e.estimate,
                    Some(e.std_error),
                ));
            }
            if let Some(r) = &fdr.richardson {
                rows.push(Row::info(horizon, "fd_richardson", r.estimate, Some(r.std_error)));
            }
            rows.push(Row::info(horizon, "threshold", threshold, None));
            rows.push(Row::flagged(horizon, "abs_diff", diff, None, pass));
            let curves = vec![
                replicate_curve("bismut_replicates", &bis.replicates),
                replicate_curve("fd_replicates", &fdr.result.replicates),
                Curve::new(
                    "fd_ladder",
                    "eps",
                    "difference quotient",
                    fdr.ladder.iter().map(|e| (e.eps, e.estimate)).collect(),
                ),
            ];
            Ok(Outcome {
                status: if pass { Status::Pass } else { Status::Fail },
                payload: json!({
                    "bismut": bis,
                    "fd": fdr.result,
                    "fd_ladder": fdr.ladder,
                    "fd_richardson": fdr.richardson,
                    "abs_diff": diff,
                    "threshold": threshold,
                    "pass": pass,
                }),
                rows,
                curves,
            })
        }
        TaskSpec::A1Sweep { times, probes } => {
            let table = a1_sweep(coeffs, &cfg.init, &f, times, &budget, cfg.gate, &rng, *probes)?;
            let mut rows = Vec::new();
            for r in &table.rows {
                rows.push(Row::info(r.t, "norm", r.norm, Some(r.norm_se)));
                rows.push(Row::info(r.t, "f_std", r.f_std, Some(r.f_std_se)));
                rows.push(Row {
                    pass_flag: if r.implied.is_some() {
                        flag(table.pass)
                    } else {
                        "UNDEFINED"
                    }
                    .into(),
                    ..Row::info(r.t, "implied_constant", r.implied.unwrap_or(f64::NAN), None)
                });
            }
            let curve = |name: &str, label: &str, g: &dyn Fn(&mfbismut::oracle::A1Row) -> Option<f64>| {
                Curve::new(
                    name,
                    "t",
                    label,
                    table.rows.iter().filter_map(|r| g(r).map(|v| (r.t, v))).collect(),
                )
            };
            let curves = vec![
                curve("a1_implied_constant", "implied constant", &|r| r.implied),
                curve("a1_norm", "gradient norm", &|r| Some(r.norm)),
                curve("a1_f_std", "std f(X_t)", &|r| Some(r.f_std)),
            ];
            Ok(Outcome {
                status: if table.pass { Status::Pass } else { Status::Fail },
                payload: serde_json::to_value(&table)?,
                rows,
                curves,
            })
        }
        TaskSpec::A2Check { mu, nu, times } => {
            let table = a2_check(coeffs, mu, nu, times, &budget, &rng)?;
            let mut rows = vec![Row::info(0.0, "w2", table.w2, None)];
            for r in &table.rows {
                rows.push(Row::info(r.t, "tv_lower_bound", r.lower_bound, None));
                rows.push(Row::info(r.t, "rhs", r.rhs, None));
                rows.push(Row::flagged(r.t, "scaled", r.scaled, None, table.pass));
            }
            let curves = vec![
                Curve::new(
                    "a2_tv_lower_bound",
                    "t",
                    "TV lower bound",
                    table.rows.iter().map(|r| (r.t, r.lower_bound)).collect(),
                ),
                Curve::new(
                    "a2_rhs",
                    "t",
                    "C/sqrt(t) W2",
                    table.rows.iter().map(|r| (r.t, r.rhs)).collect(),
                ),
            ];
            Ok(Outcome {
                status: if table.pass { Status::Pass } else { Status::Fail },
                payload: serde_json::to_value(&table)?,
                rows,
                curves,
            })
        }
        TaskSpec::TangentCheck { eps } => {
            let table = pathwise_tangent_check(coeffs, &cfg.init, &phi, &budget, eps, &rng)?;
            let mut rows: Vec<Row> = table
                .rows
                .iter()
                .map(|r| Row::info(horizon, format!("sup_sq_error(eps={})", r.eps), r.mean_sup_sq, None))
                .collect();
            for (w, ratio) in table.rows.windows(2).zip(&table.ratios) {
                rows.push(Row::info(horizon, format!("ratio(eps={})", w[1].eps), *ratio, None));
            }
            rows.push(Row::flagged(
                horizon,
                "tangent_check",
                f64::from(u8::from(table.pass)),
                None,
                table.pass,
            ));
            let curves = vec![Curve::new(
                "tangent_error",
                "eps",
                "E sup |dX/eps - V|^2",
                table.rows.iter().map(|r| (r.eps, r.mean_sup_sq)).collect(),
            )];
            Ok(Outcome {
                status: if table.pass { Status::Pass } else { Status::Fail },
                payload: serde_json::to_value(&table)?,
                rows,
                curves,
            })
        }
    }
}

fn replicate_curve(name: &str, values: &[f64]) -> Curve {
    Curve::new(
        name,
        "replication",
        "estimate",
        values.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect(),
    )
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker cap; results do not depend on it.
    pub threads: Option<usize>,
    pub dump_trajectories: bool,
}

/// Particles written by `--dump-trajectories`.
pub const DUMP_PARTICLES: usize = 64;

/// Runs `cfg`, writes the artifacts and returns the report. On a runtime
/// error a report with status `ERROR` is still written before returning it.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().context("building the worker pool")?;
    let start = Instant::now();
    let outcome = pool.install(|| execute(cfg));
    let mut report = RunReport {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task: cfg.task.name().into(),
        status: Status::Error,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        result: Value::Null,
        wall_time_s: 0.0,
        error: None,
    };
    match outcome {
        Ok(out) => {
            report.status = out.status;
            report.result = out.payload;
            write_rows(&opts.out_dir.join("results.csv"), &out.rows)?;
            write_curves(&opts.out_dir, &out.curves)?;
            if opts.dump_trajectories {
                pool.install(|| dump_trajectories(cfg, &opts.out_dir.join("trajectories.csv")))?;
            }
            report.wall_time_s = start.elapsed().as_secs_f64();
            write_report(&opts.out_dir, &report)?;
            Ok(report)
        }
        Err(e) => {
            report.error = Some(e.to_string());
            report.wall_time_s = start.elapsed().as_secs_f64();
            write_report(&opts.out_dir, &report)?;
            Err(anyhow::Error::new(e).context("task aborted; report.json is flagged ERROR"))
        }
    }
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One `<name>.dat` per curve plus `plot.gp` drawing each into a PNG.
pub fn write_curves(dir: &Path, curves: &[Curve]) -> Result<()> {
    let mut script = String::from("set terminal pngcairo size 800,600\nset grid\n");
    for c in curves {
        let mut f = fs::File::create(dir.join(format!("{}.dat", c.name)))?;
        writeln!(f, "# {} {}", c.xlabel, c.ylabel)?;
        for (x, y) in &c.points {
            writeln!(f, "{x} {y}")?;
        }
        script.push_str(&format!(
            "set output '{n}.png'\nset xlabel '{x}'\nset ylabel '{y}'\nplot '{n}.dat' using 1:2 with linespoints title '{n}'\n",
            n = c.name,
            x = c.xlabel,
            y = c.ylabel,
        ));
    }
    fs::write(dir.join("plot.gp"), script)?;
    Ok(())
}

/// Replication 0 for the first [`DUMP_PARTICLES`] particles, every node.
fn dump_trajectories(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let coeffs = cfg.model.build()?;
    let d = cfg.dim();
    let traj = simulate(
        coeffs.as_ref(),
        &cfg.init,
        &cfg.phi.build(d),
        &cfg.grid,
        cfg.particles,
        &cfg.rng(),
        0,
    )?;
    let shown = traj.particles.min(DUMP_PARTICLES);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "t".into(), "particle".into()];
    header.extend((0..d).map(|a| format!("x{a}")));
    header.extend((0..d).map(|a| format!("v{a}")));
    w.write_record(&header)?;
    for k in 0..=cfg.grid.steps {
        let (x, v) = (traj.positions_at(k), traj.tangents_at(k));
        for i in 0..shown {
            let mut rec = vec![k.to_string(), cfg.grid.node(k).to_string(), i.to_string()];
            rec.extend(x[i * d..(i + 1) * d].iter().map(f64::to_string));
            rec.extend(v[i * d..(i + 1) * d].iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
