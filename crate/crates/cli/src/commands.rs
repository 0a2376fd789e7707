use std::fmt::Write as _;

use pdecalib::config::{preset, preset_names, ConfiguredFit, SweepAxis};
use pdecalib::experiments::{
    baseline_calibrate, bound_check_on, bound_sweep, convergence_sweep, curve_csv, loglog_slope, summarize_sweep,
    sweep_csv, total_variation, BoundCheck, SweepRow, SweepSummary,
};
use pdecalib::forward::TimeStepping;
use pdecalib::sensitivity::nested_regions;
use pdecalib::{NetworkArchitecture, NetworkCheckpoint, ProblemKind, RunConfig};
use serde_json::json;

use crate::output::{RunDir, Summary};
use crate::{config_err, CliError};

fn fit(cfg: &RunConfig) -> Result<ConfiguredFit, CliError> {
    let f = cfg.fit().map_err(|e| CliError::from_lib("calibration", e))?;
    if !f.result.trace.final_loss().is_finite() {
        return Err(CliError::Numerical {
            context: "calibration",
            source: pdecalib::Error::NonFinite {
                context: "final loss".into(),
            },
        });
    }
    Ok(f)
}

fn interior_tv(values: &[f64]) -> f64 {
    total_variation(&values[1..values.len() - 1])
}

fn fit_summary(f: &ConfiguredFit) -> (String, serde_json::Value) {
    let trace = &f.result.trace;
    let report = f.result.report.as_ref().expect("exact field supplied");
    let line = format!(
        "final_loss={:.6e} linf={:.6e} l2={:.6e} iters={} stop={}",
        trace.final_loss(),
        report.linf_interior,
        report.l2_interior,
        trace.iterations(),
        trace.stop_reason.as_str()
    );
    let data = json!({
        "final_loss": trace.final_loss(),
        "linf_interior": report.linf_interior,
        "l2_interior": report.l2_interior,
        "iterations": trace.iterations(),
        "evaluations": trace.evaluations,
        "stop_reason": trace.stop_reason.as_str(),
    });
    (line, data)
}

fn write_fit(run: &mut RunDir, f: &ConfiguredFit, baseline: Option<&[f64]>) -> Result<(), CliError> {
    let xs = f.residual.grid().points();
    let exact: Vec<f64> = xs.iter().map(|&x| f.problem.exact_field(x)).collect();
    run.write("curve.csv", curve_csv(&xs, Some(&exact), &f.result.field, baseline))?;
    run.write("trace.csv", f.result.trace.to_csv())?;
    let ck = NetworkCheckpoint {
        architecture: f.residual.arch.clone(),
        params: f.result.params.clone(),
    };
    run.write("network.json", ck.to_json() + "\n")
}

pub fn presets(name: Option<&str>) -> Result<String, CliError> {
    match name {
        None => Ok(preset_names().collect::<Vec<_>>().join("\n")),
        Some(n) => preset(n)
            .map(|t| t.trim().to_string())
            .ok_or_else(|| CliError::Config(format!("unknown preset `{n}`"))),
    }
}

pub fn simulate(cfg: &RunConfig, run: &mut RunDir) -> Result<Summary, CliError> {
    let problem = cfg.manufactured().map_err(config_err)?;
    let grid = cfg.grid().map_err(config_err)?;
    let dt = match (cfg.simulate.dt, problem.kind()) {
        (Some(dt), _) => dt,
        (None, ProblemKind::Wave) => cfg.wave.sim_dt,
        (None, ProblemKind::Burgers) => cfg.burgers.sim_dt,
        (None, ProblemKind::Diffusion) => cfg
            .snapshots
            .dt
            .ok_or_else(|| config_err(pdecalib::Error::MissingKey("simulate.dt".into())))?,
    };
    let t_end = match cfg.simulate.t_end {
        Some(t) => t,
        None => {
            let spec = cfg.snapshot_spec().map_err(|_| config_err(pdecalib::Error::MissingKey("simulate.t_end".into())))?;
            let last = spec.times.iter().copied().fold(0.0, f64::max);
            last + (spec.m - 1) as f64 * spec.dt
        }
    };
    let stepping = TimeStepping::until(dt, 0.0, t_end).map_err(config_err)?;
    let every = cfg.simulate.every.unwrap_or((stepping.steps / 100).max(1)).max(1);
    let last = stepping.steps;
    let traj = problem
        .simulate_with(&grid, &stepping, |k| k % every == 0 || k == last)
        .map_err(|e| CliError::from_lib("forward simulation", e))?;
    run.write("trajectory.csv", traj.to_csv())?;
    if let Some(ck) = traj.checkpoint() {
        run.write("checkpoint.bin", ck.to_bytes())?;
    }
    let end = traj.states.last().expect("final state kept");
    let max_abs = end.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(Summary {
        line: format!("steps={last} stored={} t_end={t_end:.6e} max_abs_u={max_abs:.6e}", traj.len()),
        data: json!({
            "steps": last,
            "stored_states": traj.len(),
            "dt": dt,
            "t_end": t_end,
            "max_abs_final_state": max_abs,
        }),
    })
}

pub fn calibrate(cfg: &RunConfig, run: &mut RunDir) -> Result<Summary, CliError> {
    let f = fit(cfg)?;
    write_fit(run, &f, None)?;
    let (line, data) = fit_summary(&f);
    Ok(Summary { line, data })
}

pub fn baseline(cfg: &RunConfig, run: &mut RunDir) -> Result<Summary, CliError> {
    let f = fit(cfg)?;
    let scalar = NetworkArchitecture::scalar(vec![1]).map_err(config_err)?;
    let ls_problem = f
        .problem
        .residual_problem(f.snapshots.observed.clone(), scalar, 0.0)
        .map_err(|e| CliError::from_lib("baseline", e))?;
    let exact = |x: f64| f.problem.exact_field(x);
    let b = baseline_calibrate(&ls_problem, &cfg.optimizer, cfg.baseline.initial, Some(&exact))
        .map_err(|e| CliError::from_lib("baseline", e))?;
    write_fit(run, &f, Some(&b.values))?;
    run.write("baseline_trace.csv", b.trace.to_csv())?;
    let (tv_nn, tv_ls) = (interior_tv(&f.result.field), interior_tv(&b.values));
    let br = b.report.as_ref().expect("exact field supplied");
    let (line, mut data) = fit_summary(&f);
    data["baseline"] = json!({
        "linf_interior": br.linf_interior,
        "l2_interior": br.l2_interior,
        "final_loss": b.trace.final_loss(),
        "iterations": b.trace.iterations(),
        "underdetermined": b.underdetermined,
    });
    data["tv_network"] = json!(tv_nn);
    data["tv_baseline"] = json!(tv_ls);
    Ok(Summary {
        line: format!(
            "{line} baseline_linf={:.6e} tv_network={tv_nn:.6e} tv_baseline={tv_ls:.6e}",
            br.linf_interior
        ),
        data,
    })
}

fn summary_csv(summary: &[SweepSummary]) -> String {
    let mut out = String::from("dt,h,n,median_linf,runs\n");
    for s in summary {
        let _ = writeln!(out, "{:.16e},{:.16e},{},{:.16e},{}", s.dt, s.h, s.n, s.median_linf, s.runs);
    }
    out
}

/// Log-log slope of the median error along the configured axis, one value
/// per curve, skipping curves with fewer than two finite points.
fn curve_slopes(summary: &[SweepSummary], axis: SweepAxis) -> Vec<serde_json::Value> {
    let key = |s: &SweepSummary| match axis {
        SweepAxis::Dt => s.n as f64,
        SweepAxis::H => s.dt,
    };
    let mut keys: Vec<f64> = summary.iter().map(key).collect();
    keys.sort_by(f64::total_cmp);
    keys.dedup();
    keys.into_iter()
        .filter_map(|k| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = summary
                .iter()
                .filter(|s| key(s) == k && s.median_linf.is_finite() && s.median_linf > 0.0)
                .map(|s| (if axis == SweepAxis::Dt { s.dt } else { s.h }, s.median_linf))
                .unzip();
            (xs.len() >= 2).then(|| match axis {
                SweepAxis::Dt => json!({ "n": k as usize, "slope_vs_dt": loglog_slope(&xs, &ys) }),
                SweepAxis::H => json!({ "dt": k, "slope_vs_h": loglog_slope(&xs, &ys) }),
            })
        })
        .collect()
}

pub fn sweep(cfg: &RunConfig, run: &mut RunDir) -> Result<Summary, CliError> {
    let problem = cfg.manufactured().map_err(config_err)?;
    let sc = cfg.sweep_config().map_err(config_err)?;
    let rows = convergence_sweep(&problem, &sc).map_err(|e| CliError::from_lib("sweep", e))?;
    let summary = summarize_sweep(&rows);
    run.write("sweep.csv", sweep_csv(&rows))?;
    run.write("summary.csv", summary_csv(&summary))?;
    let failed = rows.iter().filter(|r| r.stop_reason == "failed").count();
    let best = rows.iter().map(|r| r.linf).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    Ok(Summary {
        line: format!("rows={} failed={failed} best_linf={best:.6e}", rows.len()),
        data: json!({
            "rows": rows.len(),
            "failed": failed,
            "best_linf": best,
            "slopes": curve_slopes(&summary, cfg.sweep.axis),
        }),
    })
}

pub fn sensitivity(cfg: &RunConfig, run: &mut RunDir) -> Result<Summary, CliError> {
    cfg.check_sensitivity().map_err(config_err)?;
    let f = fit(cfg)?;
    let s = &cfg.sensitivity;
    let xs = f.residual.grid().points();
    let exact: Vec<f64> = xs.iter().map(|&x| f.problem.exact_field(x)).collect();
    let regions = nested_regions(&f.result.params, &f.residual.arch, &s.anchor, &xs, &s.deltas, s.n_alpha)
        .map_err(|e| CliError::from_lib("sensitivity", e))?;
    write_fit(run, &f, None)?;
    let mut metas = Vec::new();
    for (k, r) in regions.iter().enumerate() {
        run.write(&format!("region_{k}.csv"), r.to_csv(Some(&exact)))?;
        let meta = r.meta(&s.anchor);
        run.write(
            &format!("region_{k}.json"),
            serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n",
        )?;
        let outside = (1..xs.len() - 1)
            .filter(|&i| exact[i] < r.env_min[i] || exact[i] > r.env_max[i])
            .count();
        metas.push(json!({ "delta": r.delta, "grad_norm": r.grad_norm, "exact_outside": outside }));
    }
    let (line, mut data) = fit_summary(&f);
    let quantity = regions.first().map_or(f64::NAN, |r| r.quantity);
    data["anchor"] = json!(s.anchor.describe());
    data["quantity"] = json!(quantity);
    data["regions"] = json!(metas);
    Ok(Summary {
        line: format!("{line} quantity={quantity:.6e} regions={}", regions.len()),
        data,
    })
}

fn bounds_csv(rows: &[(SweepRow, Option<BoundCheck>)]) -> String {
    let mut out = String::from("dt,h,n,seed,linf,applicable,observed,bound,noise_term,holds\n");
    for (r, b) in rows {
        let (applicable, observed, rhs, noise, holds) = match b {
            Some(b) => (b.applicable, b.observed, b.rhs, b.noise_term, b.holds),
            None => (false, f64::NAN, f64::NAN, f64::NAN, false),
        };
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{},{},{:.16e},{applicable},{observed:.16e},{rhs:.16e},{noise:.16e},{holds}",
            r.dt, r.h, r.n, r.seed, r.linf
        );
    }
    out
}

pub fn verify_bounds(cfg: &RunConfig, run: &mut RunDir) -> Result<Summary, CliError> {
    let problem = cfg.manufactured().map_err(config_err)?;
    if problem.exact_solution(0.0, 0.0).is_none() {
        return Err(CliError::Config(format!(
            "verify-bounds needs a closed-form solution; problem `{}` has none",
            problem.kind()
        )));
    }
    let window = cfg.bounds.window;
    let rows = if cfg.sweep.dts.is_some() || cfg.sweep.ns.is_some() {
        let sc = cfg.sweep_config().map_err(config_err)?;
        bound_sweep(&problem, &sc, window).map_err(|e| CliError::from_lib("bound sweep", e))?
    } else {
        let f = fit(cfg)?;
        let b = bound_check_on(&f.problem, &f.snapshots, &f.residual, &f.result.trace.params, window)
            .map_err(|e| CliError::from_lib("bound check", e))?;
        let report = f.result.report.as_ref().expect("exact field supplied");
        let grid = f.residual.grid();
        let row = SweepRow {
            dt: f.snapshots.observed.dt,
            h: grid.h(),
            n: grid.n - 1,
            seed: cfg.seed,
            linf: report.linf_interior,
            l2: report.l2_interior,
            stop_reason: f.result.trace.stop_reason.as_str().to_string(),
            iters: f.result.trace.iterations(),
            final_loss: f.result.trace.final_loss(),
        };
        vec![(row, Some(b))]
    };
    run.write("bounds.csv", bounds_csv(&rows))?;
    let applicable = rows.iter().filter(|(_, b)| b.is_some_and(|b| b.applicable)).count();
    let violations = rows
        .iter()
        .filter(|(_, b)| b.is_some_and(|b| b.applicable && !b.holds))
        .count();
    Ok(Summary {
        line: format!("runs={} applicable={applicable} violations={violations}", rows.len()),
        data: json!({
            "window": [window.0, window.1],
            "runs": rows.len(),
            "applicable": applicable,
            "violations": violations,
        }),
    })
}
