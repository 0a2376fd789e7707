//! Manufactured test problems, snapshot generation, calibration drivers,
//! convergence sweeps and error-bound diagnostics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_net::{init_params, NetworkArchitecture, NetworkParams};
use crate::forward::{
    burgers_reference, simulate_keep, FieldSample, Grid1D, NewtonConfig, Problem, TimeStepping, Trajectory,
};
use crate::lbfgs::{minimize, OptimizationTrace, OptimizerConfig};
use crate::residual::{KnownTerms, ProblemKind, ResidualProblem, SnapshotGroup, SnapshotSet, SourceFn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
}

/// I.i.d. additive observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub family: NoiseFamily,
    pub std: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(std: f64, seed: u64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::InvalidConfig(format!("noise std must be non-negative, got {std}")));
        }
        Ok(NoiseSpec {
            family: NoiseFamily::Gaussian,
            std,
            seed,
        })
    }

    pub fn none() -> Self {
        NoiseSpec {
            family: NoiseFamily::Gaussian,
            std: 0.0,
            seed: 0,
        }
    }
}

/// Deterministic per-job seed from a master seed and a job index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn diffusion_coefficient(x: f64) -> f64 {
    1.0 + (-(x - 0.5) * (x - 0.5)).exp()
}

pub fn diffusion_solution(x: f64, t: f64) -> f64 {
    (-PI * PI * t).exp() * (PI * x).sin()
}

pub fn burgers_percolation(x: f64) -> f64 {
    -1.0 + (-(x - 0.5) * (x - 0.5)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveVelocity {
    /// `1 + exp(−(x − 0.5)²)`
    Smooth,
    /// Piecewise constant with five levels.
    Layered,
}

/// Level intervals `[a, b)` of the layered velocity; the last one is closed.
pub const LAYERED_LEVELS: [(f64, f64, f64); 5] = [
    (-1.0, -0.5, 2.0),
    (-0.5, -0.1, 1.0),
    (-0.1, 0.1, 0.2),
    (0.1, 0.3, 1.0),
    (0.3, 1.0, 1.5),
];

impl WaveVelocity {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            WaveVelocity::Smooth => 1.0 + (-(x - 0.5) * (x - 0.5)).exp(),
            WaveVelocity::Layered => LAYERED_LEVELS
                .iter()
                .find(|(a, b, _)| x >= *a && x < *b)
                .map_or(LAYERED_LEVELS[4].2, |l| l.2),
        }
    }
}

/// A test problem whose coefficient field is known.
#[derive(Debug, Clone, PartialEq)]
pub enum ManufacturedProblem {
    /// `u = e^{−π²t} sin(πx)` with `c(x) = 1 + e^{−(x−0.5)²}` and the
    /// matching source; snapshots come from the closed form.
    Diffusion,
    /// Pulse `e^{−10x²}` released at rest; snapshots from a leapfrog
    /// simulation with step `sim_dt` on the observation grid.
    Wave { velocity: WaveVelocity, sim_dt: f64 },
    /// Reference-profile initial and boundary data, percolation
    /// `f(x) = −1 + e^{−(x−0.5)²}`; snapshots from the implicit scheme.
    Burgers {
        diffusivity: f64,
        c_ref: f64,
        clamp: f64,
        sim_dt: f64,
        newton: NewtonConfig,
    },
}

impl ManufacturedProblem {
    pub fn burgers(diffusivity: f64, sim_dt: f64) -> Self {
        ManufacturedProblem::Burgers {
            diffusivity,
            c_ref: 1.0,
            clamp: 1e-2,
            sim_dt,
            newton: NewtonConfig::default(),
        }
    }

    pub fn kind(&self) -> ProblemKind {
        match self {
            ManufacturedProblem::Diffusion => ProblemKind::Diffusion,
            ManufacturedProblem::Wave { .. } => ProblemKind::Wave,
            ManufacturedProblem::Burgers { .. } => ProblemKind::Burgers,
        }
    }

    pub fn exact_field(&self, x: f64) -> f64 {
        match self {
            ManufacturedProblem::Diffusion => diffusion_coefficient(x),
            ManufacturedProblem::Wave { velocity, .. } => velocity.eval(x),
            ManufacturedProblem::Burgers { .. } => burgers_percolation(x),
        }
    }

    /// Closed-form solution, when one exists.
    pub fn exact_solution(&self, x: f64, t: f64) -> Option<f64> {
        match self {
            ManufacturedProblem::Diffusion => Some(diffusion_solution(x, t)),
            _ => None,
        }
    }

    pub fn known_terms(&self) -> KnownTerms {
        match self {
            ManufacturedProblem::Diffusion => {
                let source: SourceFn =
                    Arc::new(|x, t| PI * PI * (diffusion_coefficient(x) - 1.0) * diffusion_solution(x, t));
                KnownTerms::Diffusion { source: Some(source) }
            }
            ManufacturedProblem::Wave { .. } => KnownTerms::Wave,
            ManufacturedProblem::Burgers { diffusivity, .. } => KnownTerms::Burgers {
                diffusivity: *diffusivity,
            },
        }
    }

    /// Residual problem over the given observations.
    pub fn residual_problem(&self, observations: SnapshotSet, arch: NetworkArchitecture, lambda: f64) -> Result<ResidualProblem> {
        ResidualProblem::new(self.known_terms(), observations, arch, lambda)
    }

    /// Exact states at the requested times, in order.
    fn states_at(&self, grid: &Grid1D, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        match self {
            ManufacturedProblem::Diffusion => {
                let xs = grid.points();
                Ok(times
                    .iter()
                    .map(|&t| xs.iter().map(|&x| diffusion_solution(x, t)).collect())
                    .collect())
            }
            ManufacturedProblem::Wave { sim_dt, .. } | ManufacturedProblem::Burgers { sim_dt, .. } => {
                let steps: Vec<usize> = times.iter().map(|&t| lattice_step(t, *sim_dt)).collect::<Result<_>>()?;
                let mut wanted = steps.clone();
                wanted.sort_unstable();
                wanted.dedup();
                let stepping = TimeStepping::new(*sim_dt, 0.0, wanted.last().copied().unwrap_or(0))?;
                let traj = self.simulate_with(grid, &stepping, |k| wanted.binary_search(&k).is_ok())?;
                Ok(steps
                    .iter()
                    .map(|&k| traj.at_step(k).expect("kept step").to_vec())
                    .collect())
            }
        }
    }

    /// Runs the forward scheme with the exact coefficient field from the
    /// problem's initial data, keeping the steps selected by `keep`.
    /// Diffusion uses Crank–Nicolson with the manufactured source.
    pub fn simulate_with(&self, grid: &Grid1D, stepping: &TimeStepping, keep: impl Fn(usize) -> bool) -> Result<Trajectory> {
        let xs = grid.points();
        let (x0, x1) = (grid.x_min, grid.x_max);
        match self {
            ManufacturedProblem::Diffusion => {
                let c = FieldSample::from_fn(grid, diffusion_coefficient)?;
                let source = |x: f64, t: f64| PI * PI * (diffusion_coefficient(x) - 1.0) * diffusion_solution(x, t);
                let boundary = move |t: f64| (diffusion_solution(x0, t), diffusion_solution(x1, t));
                let init: Vec<f64> = xs.iter().map(|&x| diffusion_solution(x, stepping.t0)).collect();
                let problem = Problem::Diffusion {
                    c: &c,
                    source: &source,
                    boundary: &boundary,
                };
                simulate_keep(&problem, grid, stepping, &init, keep)
            }
            ManufacturedProblem::Wave { velocity, .. } => {
                let c = FieldSample::from_fn(grid, |x| velocity.eval(x))?;
                let init: Vec<f64> = xs.iter().map(|&x| (-10.0 * x * x).exp()).collect();
                simulate_keep(&Problem::Wave { c: &c }, grid, stepping, &init, keep)
            }
            ManufacturedProblem::Burgers {
                diffusivity,
                c_ref,
                clamp,
                newton,
                ..
            } => {
                let (d, c, cl) = (*diffusivity, *c_ref, *clamp);
                let f = FieldSample::from_fn(grid, burgers_percolation)?;
                let init: Vec<f64> = xs
                    .iter()
                    .map(|&x| burgers_reference(x, stepping.t0, burgers_percolation(x), c, d, cl))
                    .collect();
                let boundary = move |t: f64| {
                    (
                        burgers_reference(x0, t, burgers_percolation(x0), c, d, cl),
                        burgers_reference(x1, t, burgers_percolation(x1), c, d, cl),
                    )
                };
                let problem = Problem::Burgers {
                    f: &f,
                    diffusivity: d,
                    boundary: &boundary,
                    newton: *newton,
                };
                simulate_keep(&problem, grid, stepping, &init, keep)
            }
        }
    }

    /// Snapshot groups at `spec.times`, each holding `spec.m` states spaced
    /// `spec.dt`. Every distinct observation time receives one noise draw,
    /// so groups sharing a time share its noisy snapshot.
    pub fn make_snapshots(&self, grid: &Grid1D, spec: &SnapshotSpec, noise: &NoiseSpec) -> Result<Snapshots> {
        grid.validate()?;
        spec.validate()?;
        let mut times: Vec<f64> = Vec::new();
        let mut index: Vec<Vec<usize>> = Vec::new();
        for &t in &spec.times {
            let mut ids = Vec::with_capacity(spec.m);
            for k in 0..spec.m {
                let tk = t + k as f64 * spec.dt;
                let pos = times.iter().position(|&s| (s - tk).abs() <= 1e-12).unwrap_or_else(|| {
                    times.push(tk);
                    times.len() - 1
                });
                ids.push(pos);
            }
            index.push(ids);
        }
        let clean_states = self.states_at(grid, &times)?;
        let mut noisy_states = clean_states.clone();
        if noise.std > 0.0 {
            let normal = Normal::new(0.0, noise.std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            let mut order: Vec<usize> = (0..times.len()).collect();
            order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
            for k in order {
                for v in noisy_states[k].iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        let build = |states: &[Vec<f64>], noise: Option<NoiseSpec>| SnapshotSet {
            grid: *grid,
            dt: spec.dt,
            groups: spec
                .times
                .iter()
                .zip(&index)
                .map(|(&t, ids)| SnapshotGroup {
                    t,
                    snapshots: ids.iter().map(|&i| states[i].clone()).collect(),
                })
                .collect(),
            noise,
        };
        Ok(Snapshots {
            observed: build(&noisy_states, Some(*noise)),
            clean: build(&clean_states, None),
        })
    }
}

fn lattice_step(t: f64, dt: f64) -> Result<usize> {
    let k = (t / dt).round();
    if k < 0.0 || (t - k * dt).abs() > 1e-12 {
        return Err(Error::TimeNotOnLattice { t, dt });
    }
    Ok(k as usize)
}


/// Group start times, states per group and their spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSpec {
    pub times: Vec<f64>,
    pub m: usize,
    pub dt: f64,
}

impl SnapshotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::EmptySnapshots);
        }
        if self.m < 2 || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "snapshot groups need m ≥ 2 and dt > 0, got m={} dt={}",
                self.m, self.dt
            )));
        }
        Ok(())
    }
}

/// Observed (possibly noisy) snapshots with their noiseless counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshots {
    pub observed: SnapshotSet,
    pub clean: SnapshotSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub exact: f64,
    pub fitted: f64,
}

/// Field error over the interior grid points `x_2 … x_{n−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub linf_interior: f64,
    /// `sqrt(h Σ e_i²)` over the interior points.
    pub l2_interior: f64,
    pub curve: Vec<CurvePoint>,
}

impl ErrorReport {
    pub fn new(grid: &Grid1D, fitted: &[f64], exact: impl Fn(f64) -> f64) -> Self {
        let curve: Vec<CurvePoint> = grid
            .points()
            .into_iter()
            .zip(fitted)
            .map(|(x, &f)| CurvePoint {
                x,
                exact: exact(x),
                fitted: f,
            })
            .collect();
        let interior = &curve[1..curve.len() - 1];
        let linf = interior.iter().fold(0.0_f64, |m, p| m.max((p.fitted - p.exact).abs()));
        let l2 = (grid.h() * interior.iter().map(|p| (p.fitted - p.exact).powi(2)).sum::<f64>()).sqrt();
        ErrorReport {
            linf_interior: linf,
            l2_interior: l2,
            curve,
        }
    }

    /// Max error over interior points lying in `[a, b]`.
    pub fn linf_on(&self, window: (f64, f64)) -> f64 {
        let interior = &self.curve[1..self.curve.len() - 1];
        interior
            .iter()
            .filter(|p| p.x >= window.0 - 1e-12 && p.x <= window.1 + 1e-12)
            .fold(0.0_f64, |m, p| m.max((p.fitted - p.exact).abs()))
    }
}

/// Network and optimizer settings for one calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSettings {
    pub arch: NetworkArchitecture,
    pub optimizer: OptimizerConfig,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub params: NetworkParams,
    pub trace: OptimizationTrace,
    /// Network values at the grid points.
    pub field: Vec<f64>,
    pub report: Option<ErrorReport>,
}

/// Fits the network field to an assembled residual problem, starting from
/// the Glorot initialization for `settings.seed`.
pub fn calibrate_problem(
    problem: &ResidualProblem,
    settings: &CalibrationSettings,
    exact: Option<&dyn Fn(f64) -> f64>,
) -> Result<CalibrationResult> {
    let theta0 = init_params(&problem.arch, settings.seed);
    let mut objective = problem.objective();
    let trace = minimize(&mut objective, theta0.as_slice(), &settings.optimizer)?;
    let field = problem.field_values(&trace.params);
    let report = exact.map(|f| ErrorReport::new(problem.grid(), &field, f));
    let params = NetworkParams::from_vec(&problem.arch, trace.params.clone())?;
    Ok(CalibrationResult {
        params,
        trace,
        field,
        report,
    })
}

pub fn calibrate(
    known: KnownTerms,
    observations: SnapshotSet,
    settings: &CalibrationSettings,
    exact: Option<&dyn Fn(f64) -> f64>,
) -> Result<CalibrationResult> {
    let problem = ResidualProblem::new(known, observations, settings.arch.clone(), settings.lambda)?;
    calibrate_problem(&problem, settings, exact)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub values: Vec<f64>,
    pub trace: OptimizationTrace,
    pub report: Option<ErrorReport>,
    /// Some interior point carries no information in any residual row.
    pub underdetermined: bool,
}

/// Least-squares fit of the field's grid values, started from `initial`
/// everywhere.
pub fn baseline_calibrate(
    problem: &ResidualProblem,
    optimizer: &OptimizerConfig,
    initial: f64,
    exact: Option<&dyn Fn(f64) -> f64>,
) -> Result<BaselineResult> {
    let n = problem.grid().n;
    let mut information = vec![0.0; n];
    for st in problem.stencils() {
        for j in 1..n - 1 {
            information[j - 1] += st.lo[j] * st.lo[j];
            information[j] += st.mid[j] * st.mid[j];
            information[j + 1] += st.hi[j] * st.hi[j];
        }
    }
    let underdetermined = information[1..n - 1].contains(&0.0);
    let mut ls = problem.least_squares_problem();
    let optimizer = OptimizerConfig {
        projection: None,
        ..optimizer.clone()
    };
    let trace = minimize(&mut ls, &vec![initial; n], &optimizer)?;
    let values = trace.params.clone();
    let report = exact.map(|f| ErrorReport::new(problem.grid(), &values, f));
    Ok(BaselineResult {
        values,
        trace,
        report,
        underdetermined,
    })
}

/// `Σ |f_{i+1} − f_i|`.
pub fn total_variation(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

/// Settings for a grid of calibrations over `(Δt, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub points: Vec<(f64, f64)>,
    pub seeds: Vec<u64>,
    /// Start times of the snapshot groups.
    pub times: Vec<f64>,
    pub noise_std: f64,
    pub settings: CalibrationSettings,
    /// Worker count; `None` uses all logical cores.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dt: f64,
    pub h: f64,
    /// Number of grid intervals, `(x_max − x_min)/h`.
    pub n: usize,
    pub seed: u64,
    pub linf: f64,
    pub l2: f64,
    pub stop_reason: String,
    pub iters: usize,
    pub final_loss: f64,
}

/// One calibration per `(point, seed)`. Failed runs are kept as rows with
/// `stop_reason = "failed"` and NaN metrics. Rows are sorted by decreasing
/// `dt`, decreasing `h`, then seed.
pub fn convergence_sweep(problem: &ManufacturedProblem, config: &SweepConfig) -> Result<Vec<SweepRow>> {
    Ok(sweep_with(problem, config, |_, _, _| ())?
        .into_iter()
        .map(|(row, _)| row)
        .collect())
}

/// Sweep that also evaluates the error bound on `window` for every
/// successful run.
pub fn bound_sweep(
    problem: &ManufacturedProblem,
    config: &SweepConfig,
    window: (f64, f64),
) -> Result<Vec<(SweepRow, Option<BoundCheck>)>> {
    let rows = sweep_with(problem, config, |snaps, rp, result| {
        bound_check_on(problem, snaps, rp, &result.trace.params, window).ok()
    })?;
    Ok(rows.into_iter().map(|(row, b)| (row, b.flatten())).collect())
}

/// Sweep driver: runs every job on a bounded pool and applies `inspect` to
/// each successful calibration.
pub fn sweep_with<T, F>(problem: &ManufacturedProblem, config: &SweepConfig, inspect: F) -> Result<Vec<(SweepRow, Option<T>)>>
where
    T: Send,
    F: Fn(&Snapshots, &ResidualProblem, &CalibrationResult) -> T + Sync,
{
    let jobs: Vec<(usize, (f64, f64), u64)> = config
        .points
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| config.seeds.iter().map(move |&s| (i, p, s)))
        .collect();
    let run = |&(index, (dt, h), seed): &(usize, (f64, f64), u64)| -> (SweepRow, Option<T>) {
        let job_seed = derive_seed(seed, index as u64);
        let outcome = (|| -> Result<(CalibrationResult, T)> {
            let grid = Grid1D::with_spacing(-1.0, 1.0, h)?;
            let spec = SnapshotSpec {
                times: config.times.clone(),
                m: problem.kind().group_size(),
                dt,
            };
            let noise = if config.noise_std > 0.0 {
                NoiseSpec::gaussian(config.noise_std, derive_seed(job_seed, 1))?
            } else {
                NoiseSpec::none()
            };
            let snaps = problem.make_snapshots(&grid, &spec, &noise)?;
            let settings = CalibrationSettings {
                seed: job_seed,
                ..config.settings.clone()
            };
            let rp = problem.residual_problem(snaps.observed.clone(), settings.arch.clone(), settings.lambda)?;
            let exact = |x: f64| problem.exact_field(x);
            let result = calibrate_problem(&rp, &settings, Some(&exact))?;
            let extra = inspect(&snaps, &rp, &result);
            Ok((result, extra))
        })();
        let intervals = ((2.0 / h).round()) as usize;
        match outcome {
            Ok((r, extra)) => {
                let report = r.report.expect("exact field supplied");
                let row = SweepRow {
                    dt,
                    h,
                    n: intervals,
                    seed,
                    linf: report.linf_interior,
                    l2: report.l2_interior,
                    stop_reason: r.trace.stop_reason.as_str().to_string(),
                    iters: r.trace.iterations(),
                    final_loss: r.trace.final_loss(),
                };
                (row, Some(extra))
            }
            Err(_) => {
                let row = SweepRow {
                    dt,
                    h,
                    n: intervals,
                    seed,
                    linf: f64::NAN,
                    l2: f64::NAN,
                    stop_reason: "failed".into(),
                    iters: 0,
                    final_loss: f64::NAN,
                };
                (row, None)
            }
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = config.jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let mut rows: Vec<(SweepRow, Option<T>)> = pool.install(|| jobs.par_iter().map(run).collect());
    rows.sort_by(|(a, _), (b, _)| {
        b.dt.total_cmp(&a.dt)
            .then(b.h.total_cmp(&a.h))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("dt,h,n,seed,linf,l2,stop_reason,iters,final_loss\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{},{},{:.16e},{:.16e},{},{},{:.16e}",
            r.dt, r.h, r.n, r.seed, r.linf, r.l2, r.stop_reason, r.iters, r.final_loss
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub dt: f64,
    pub h: f64,
    pub n: usize,
    pub median_linf: f64,
    pub runs: usize,
}

/// Median `linf` per `(dt, h)` over successful runs, in row order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut out: Vec<SweepSummary> = Vec::new();
    let mut seen: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if seen.contains(&(r.dt, r.h)) {
            continue;
        }
        seen.push((r.dt, r.h));
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|s| s.dt == r.dt && s.h == r.h && s.linf.is_finite())
            .map(|s| s.linf)
            .collect();
        v.sort_by(f64::total_cmp);
        let median = match v.len() {
            0 => f64::NAN,
            k if k % 2 == 1 => v[k / 2],
            k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
        };
        out.push(SweepSummary {
            dt: r.dt,
            h: r.h,
            n: r.n,
            median_linf: median,
            runs: v.len(),
        });
    }
    out
}

/// `x,f_exact,f_theta[,f_baseline]` with one row per grid point.
pub fn curve_csv(xs: &[f64], exact: Option<&[f64]>, fitted: &[f64], baseline: Option<&[f64]>) -> String {
    let mut out = String::from("x,f_exact,f_theta");
    if baseline.is_some() {
        out.push_str(",f_baseline");
    }
    out.push('\n');
    for (i, x) in xs.iter().enumerate() {
        let e = exact.map_or(f64::NAN, |e| e[i]);
        let _ = write!(out, "{x:.16e},{e:.16e},{:.16e}", fitted[i]);
        if let Some(b) = baseline {
            let _ = write!(out, ",{:.16e}", b[i]);
        }
        out.push('\n');
    }
    out
}

/// Largest interior residual of the scheme on exact data with the exact
/// field, over groups at `times`. Needs a closed-form solution.
pub fn consistency_check(problem: &ManufacturedProblem, grid: &Grid1D, dt: f64, times: &[f64]) -> Result<f64> {
    if problem.exact_solution(0.0, 0.0).is_none() {
        return Err(Error::InvalidConfig("consistency check needs a closed-form solution".into()));
    }
    let spec = SnapshotSpec {
        times: times.to_vec(),
        m: problem.kind().group_size(),
        dt,
    };
    let snaps = problem.make_snapshots(grid, &spec, &NoiseSpec::none())?;
    let arch = NetworkArchitecture::scalar(vec![1])?;
    let rp = problem.residual_problem(snaps.clean, arch, 0.0)?;
    let f: Vec<f64> = grid.points().iter().map(|&x| problem.exact_field(x)).collect();
    Ok(rp
        .residuals_for_field(&f)
        .iter()
        .flatten()
        .fold(0.0_f64, |m, r| m.max(r.abs())))
}

/// Constants entering the pointwise error bound, estimated by finite
/// differences on a grid ten times finer than `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticConstants {
    /// min |u_xx| over the window
    pub delta2: f64,
    /// max |u_xxxx|
    pub delta4: f64,
    /// max |f_θ|
    pub f0: f64,
    /// max |f_θ''|
    pub f2: f64,
    /// max |f''|
    pub f2f: f64,
}

impl DiagnosticConstants {
    /// Samples over `[a − h, b + h]` at time `t`.
    pub fn estimate(
        problem: &ManufacturedProblem,
        fitted: &dyn Fn(f64) -> f64,
        t: f64,
        window: (f64, f64),
        h: f64,
    ) -> Result<Self> {
        if problem.exact_solution(0.0, 0.0).is_none() {
            return Err(Error::InvalidConfig("diagnostic constants need a closed-form solution".into()));
        }
        let u = |x: f64| problem.exact_solution(x, t).expect("closed form");
        let f = |x: f64| problem.exact_field(x);
        let hr = h / 10.0;
        let (a, b) = (window.0 - h, window.1 + h);
        let count = ((b - a) / hr).round() as usize;
        let d2 = |g: &dyn Fn(f64) -> f64, x: f64| (g(x + hr) - 2.0 * g(x) + g(x - hr)) / (hr * hr);
        let d4 = |g: &dyn Fn(f64) -> f64, x: f64| {
            (g(x + 2.0 * hr) - 4.0 * g(x + hr) + 6.0 * g(x) - 4.0 * g(x - hr) + g(x - 2.0 * hr)) / hr.powi(4)
        };
        let mut c = DiagnosticConstants {
            delta2: f64::INFINITY,
            delta4: 0.0,
            f0: 0.0,
            f2: 0.0,
            f2f: 0.0,
        };
        for k in 0..=count {
            let x = a + k as f64 * hr;
            c.delta2 = c.delta2.min(d2(&u, x).abs());
            c.delta4 = c.delta4.max(d4(&u, x).abs());
            c.f0 = c.f0.max(fitted(x).abs());
            c.f2 = c.f2.max(d2(fitted, x).abs());
            c.f2f = c.f2f.max(d2(&f, x).abs());
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub dt: f64,
    pub h: f64,
    /// Consistency constant: residual on exact data divided by `Δt² + h²`.
    pub c1: f64,
    /// Observation error bound.
    pub eps_o: f64,
    /// Optimization error: largest residual at the optimum.
    pub eps_opt: f64,
    pub constants: DiagnosticConstants,
    pub observed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// The bound's preconditions hold (`δ₂ > 0`, `h < sqrt(6δ₂/δ₄)`).
    pub applicable: bool,
    /// Bound value; NaN when not applicable.
    pub rhs: f64,
    /// Contribution of the observation error.
    pub noise_term: f64,
    pub observed: f64,
    pub holds: bool,
}

/// Pointwise bound
/// `2C₁/δ₂ Δt² + (2C₁/δ₂ + (F₂+F₂ᶠ)/2) h² + 2/δ₂ ε_opt + 4/δ₂ (1/Δt + 2F₀/h²) ε_o`.
pub fn theorem_bound(inputs: &BoundInputs) -> BoundCheck {
    let BoundInputs {
        dt,
        h,
        c1,
        eps_o,
        eps_opt,
        constants: k,
        observed,
    } = *inputs;
    let applicable = k.delta2 > 0.0 && (k.delta4 == 0.0 || h < (6.0 * k.delta2 / k.delta4).sqrt());
    if !applicable {
        return BoundCheck {
            applicable,
            rhs: f64::NAN,
            noise_term: f64::NAN,
            observed,
            holds: false,
        };
    }
    let noise_term = 4.0 / k.delta2 * (1.0 / dt + 2.0 * k.f0 / (h * h)) * eps_o;
    let rhs = 2.0 * c1 / k.delta2 * dt * dt
        + (2.0 * c1 / k.delta2 + 0.5 * (k.f2 + k.f2f)) * h * h
        + 2.0 / k.delta2 * eps_opt
        + noise_term;
    BoundCheck {
        applicable,
        rhs,
        noise_term,
        observed,
        holds: observed <= rhs,
    }
}

/// Largest residual of `problem` at `theta` over rows whose grid point lies
/// in `window`.
pub fn max_residual_on(problem: &ResidualProblem, theta: &[f64], window: (f64, f64)) -> f64 {
    let xs = problem.grid().points();
    problem
        .residuals(theta)
        .iter()
        .flat_map(|r| r.iter().zip(&xs))
        .filter(|(_, &x)| x >= window.0 - 1e-12 && x <= window.1 + 1e-12)
        .fold(0.0_f64, |m, (r, _)| m.max(r.abs()))
}

/// Bound check for a fitted network on `window`. The consistency constant
/// comes from the exact field on the clean snapshots, the optimization error
/// from the fitted residual, the observation error is the largest deviation
/// of the observed snapshots from the clean ones, and the diagnostic
/// constants are sampled at the first group time.
pub fn bound_check_on(
    problem: &ManufacturedProblem,
    snapshots: &Snapshots,
    fitted: &ResidualProblem,
    theta: &[f64],
    window: (f64, f64),
) -> Result<BoundCheck> {
    let eps_o = snapshots
        .observed
        .groups
        .iter()
        .zip(&snapshots.clean.groups)
        .flat_map(|(o, c)| o.snapshots.iter().flatten().zip(c.snapshots.iter().flatten()))
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let grid = *fitted.grid();
    let (dt, h) = (snapshots.observed.dt, grid.h());
    let xs = grid.points();
    let in_window = |x: f64| x >= window.0 - 1e-12 && x <= window.1 + 1e-12;
    let exact: Vec<f64> = xs.iter().map(|&x| problem.exact_field(x)).collect();
    let clean = problem.residual_problem(snapshots.clean.clone(), NetworkArchitecture::scalar(vec![1])?, 0.0)?;
    let consistency = clean
        .residuals_for_field(&exact)
        .iter()
        .flat_map(|r| r.iter().zip(&xs))
        .filter(|(_, &x)| in_window(x))
        .fold(0.0_f64, |m, (r, _)| m.max(r.abs()));
    let values = fitted.field_values(theta);
    let observed = (1..grid.n - 1)
        .filter(|&i| in_window(xs[i]))
        .fold(0.0_f64, |m, i| m.max((values[i] - exact[i]).abs()));
    let arch = &fitted.arch;
    let net = |x: f64| arch.forward_many(theta, &[x])[0];
    let t = snapshots.observed.groups.first().ok_or(Error::EmptySnapshots)?.t;
    let constants = DiagnosticConstants::estimate(problem, &net, t, window, h)?;
    Ok(theorem_bound(&BoundInputs {
        dt,
        h,
        c1: consistency / (dt * dt + h * h),
        eps_o,
        eps_opt: max_residual_on(fitted, theta, window),
        constants,
        observed,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_net::OutputTransform;

    fn quick_settings(widths: Vec<usize>, iters: usize) -> CalibrationSettings {
        CalibrationSettings {
            arch: NetworkArchitecture::scalar(widths).unwrap(),
            optimizer: OptimizerConfig {
                max_iters: iters,
                ..Default::default()
            },
            lambda: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn noiseless_snapshots_are_exact_and_noise_is_reproducible() {
        let g = Grid1D::with_spacing(-1.0, 1.0, 0.01).unwrap();
        let p = ManufacturedProblem::Diffusion;
        let spec = SnapshotSpec {
            times: vec![0.1],
            m: 2,
            dt: 0.001,
        };
        let s = p.make_snapshots(&g, &spec, &NoiseSpec::none()).unwrap();
        assert_eq!(s.observed.groups, s.clean.groups);
        for (x, u) in g.points().iter().zip(&s.clean.groups[0].snapshots[0]) {
            assert_eq!(*u, diffusion_solution(*x, 0.1));
        }
        let noise = NoiseSpec::gaussian(1e-3, 42).unwrap();
        let a = p.make_snapshots(&g, &spec, &noise).unwrap();
        let b = p.make_snapshots(&g, &spec, &noise).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.observed.groups, a.clean.groups);
        let c = p.make_snapshots(&g, &spec, &NoiseSpec::gaussian(1e-3, 43).unwrap()).unwrap();
        assert_ne!(a.observed.groups, c.observed.groups);
    }

    #[test]
    fn shared_observation_times_share_noise() {
        let g = Grid1D::new(11, -1.0, 1.0).unwrap();
        let spec = SnapshotSpec {
            times: vec![0.01, 0.02],
            m: 2,
            dt: 0.01,
        };
        let s = ManufacturedProblem::Diffusion
            .make_snapshots(&g, &spec, &NoiseSpec::gaussian(0.1, 3).unwrap())
            .unwrap();
        assert_eq!(s.observed.groups[0].snapshots[1], s.observed.groups[1].snapshots[0]);
    }

    #[test]
    fn simulated_snapshots_match_the_trajectory() {
        let g = Grid1D::with_spacing(-1.0, 1.0, 0.02).unwrap();
        let p = ManufacturedProblem::Wave {
            velocity: WaveVelocity::Smooth,
            sim_dt: 1e-3,
        };
        let spec = SnapshotSpec {
            times: vec![0.1, 0.3],
            m: 3,
            dt: 0.01,
        };
        let s = p.make_snapshots(&g, &spec, &NoiseSpec::none()).unwrap();
        let c = FieldSample::from_fn(&g, |x| WaveVelocity::Smooth.eval(x)).unwrap();
        let init: Vec<f64> = g.points().iter().map(|&x| (-10.0 * x * x).exp()).collect();
        let traj = crate::forward::simulate(
            &Problem::Wave { c: &c },
            &g,
            &TimeStepping::new(1e-3, 0.0, 320).unwrap(),
            &init,
        )
        .unwrap();
        assert_eq!(s.clean.groups[1].snapshots[2].as_slice(), traj.at_step(320).unwrap());
        assert_eq!(s.clean.groups[0].snapshots[1].as_slice(), traj.at_step(110).unwrap());

        let off = SnapshotSpec {
            times: vec![0.10005],
            m: 3,
            dt: 0.01,
        };
        assert!(matches!(
            p.make_snapshots(&g, &off, &NoiseSpec::none()),
            Err(Error::TimeNotOnLattice { .. })
        ));
    }

    #[test]
    fn error_report_metrics() {
        let g = Grid1D::new(5, -1.0, 1.0).unwrap();
        let fitted = [9.0, 1.0, 2.0, 3.0, -9.0];
        let r = ErrorReport::new(&g, &fitted, |_| 2.0);
        assert_eq!(r.linf_interior, 1.0);
        assert!((r.l2_interior - (0.5f64 * 2.0).sqrt()).abs() <= 1e-15);
        assert!(r.linf_interior >= r.l2_interior / 3f64.sqrt());
        assert_eq!(r.linf_on((0.0, 1.0)), 1.0);
        assert_eq!(r.linf_on((-0.1, 0.1)), 0.0);
        assert_eq!(total_variation(&[0.0, 1.0, -1.0, -1.0]), 3.0);
    }

    #[test]
    fn consistency_is_second_order_and_deterministic() {
        let p = ManufacturedProblem::Diffusion;
        let coarse = consistency_check(&p, &Grid1D::with_spacing(-1.0, 1.0, 2e-3).unwrap(), 1e-3, &[0.1]).unwrap();
        let fine = consistency_check(&p, &Grid1D::with_spacing(-1.0, 1.0, 1e-3).unwrap(), 5e-4, &[0.1]).unwrap();
        assert!(coarse / fine >= 3.5, "{coarse} / {fine}");
        let again = consistency_check(&p, &Grid1D::with_spacing(-1.0, 1.0, 2e-3).unwrap(), 1e-3, &[0.1]).unwrap();
        assert_eq!(coarse, again);
        let wave = ManufacturedProblem::Wave {
            velocity: WaveVelocity::Smooth,
            sim_dt: 1e-4,
        };
        assert!(consistency_check(&wave, &Grid1D::new(11, -1.0, 1.0).unwrap(), 1e-3, &[0.1]).is_err());
    }

    #[test]
    fn bound_gate_and_linearity() {
        let constants = DiagnosticConstants {
            delta2: 2.0,
            delta4: 30.0,
            f0: 2.0,
            f2: 1.0,
            f2f: 1.0,
        };
        let mut inputs = BoundInputs {
            dt: 1e-3,
            h: 2e-3,
            c1: 5.0,
            eps_o: 1e-7,
            eps_opt: 1e-6,
            constants,
            observed: 1e-4,
        };
        let a = theorem_bound(&inputs);
        inputs.eps_o *= 2.0;
        let b = theorem_bound(&inputs);
        assert!((b.noise_term - 2.0 * a.noise_term).abs() <= 1e-15 * b.noise_term);
        assert!(((b.rhs - a.rhs) - a.noise_term).abs() <= 1e-12 * b.rhs);
        inputs.constants.delta2 = 0.0;
        assert!(!theorem_bound(&inputs).applicable);
        inputs.constants.delta2 = 1e-6;
        inputs.h = 0.1;
        assert!(!theorem_bound(&inputs).applicable);
    }

    #[test]
    fn diagnostic_constants_for_the_closed_form() {
        let p = ManufacturedProblem::Diffusion;
        let t = 0.1;
        let k = DiagnosticConstants::estimate(&p, &|x: f64| diffusion_coefficient(x), t, (0.2, 0.8), 0.01).unwrap();
        let decay = (-PI * PI * t).exp();
        // |u_xx| = π² e^{−π²t} |sin πx| is smallest at the window edge x = 0.19.
        assert!((k.delta2 - PI * PI * decay * (PI * 0.19).sin()).abs() <= 1e-3);
        assert!((k.delta4 - PI.powi(4) * decay).abs() <= 1e-2 * k.delta4);
        assert!((k.f0 - 2.0).abs() <= 1e-4);
        assert!((k.f2 - k.f2f).abs() <= 1e-9);
    }

    #[test]
    fn calibration_recovers_the_diffusion_coefficient() {
        let p = ManufacturedProblem::Diffusion;
        let g = Grid1D::with_spacing(-1.0, 1.0, 0.01).unwrap();
        let spec = SnapshotSpec {
            times: vec![0.1],
            m: 2,
            dt: 0.001,
        };
        let snaps = p.make_snapshots(&g, &spec, &NoiseSpec::none()).unwrap();
        let exact = |x: f64| p.exact_field(x);
        let r = calibrate(p.known_terms(), snaps.observed.clone(), &quick_settings(vec![10, 10], 2000), Some(&exact)).unwrap();
        let report = r.report.unwrap();
        assert!(report.linf_interior <= 2e-2, "{}", report.linf_interior);
        assert!(r.trace.losses.windows(2).all(|w| w[1] <= w[0]));

        let rp = p.residual_problem(snaps.observed, NetworkArchitecture::scalar(vec![1]).unwrap(), 0.0).unwrap();
        let base = baseline_calibrate(&rp, &OptimizerConfig::default(), 1.0, Some(&exact)).unwrap();
        let oracle = rp.least_squares_problem().pointwise_minimizer().unwrap();
        for i in 1..g.n - 1 {
            if let Some(v) = oracle[i] {
                assert!((base.values[i] - v).abs() <= 1e-6 * v.abs().max(1.0), "i={i}");
            }
        }
        assert!(!base.underdetermined || oracle.iter().skip(1).take(g.n - 2).any(Option::is_none));
    }

    #[test]
    fn degenerate_baseline_is_flagged() {
        let g = Grid1D::new(9, -1.0, 1.0).unwrap();
        let set = SnapshotSet {
            grid: g,
            dt: 0.1,
            groups: vec![SnapshotGroup {
                t: 0.0,
                snapshots: vec![vec![0.5; 9]; 2],
            }],
            noise: None,
        };
        let rp = ResidualProblem::new(KnownTerms::Diffusion { source: None }, set, NetworkArchitecture::scalar(vec![1]).unwrap(), 0.0).unwrap();
        let b = baseline_calibrate(&rp, &OptimizerConfig::default(), 1.0, None).unwrap();
        assert!(b.underdetermined);
        assert!(b.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sweep_rows_are_sorted_and_deterministic() {
        let p = ManufacturedProblem::Diffusion;
        let cfg = SweepConfig {
            points: vec![(0.01, 0.2), (0.05, 0.2), (0.01, 0.1)],
            seeds: vec![0, 1],
            times: vec![0.1],
            noise_std: 0.0,
            settings: quick_settings(vec![5], 50),
            jobs: Some(2),
        };
        let a = convergence_sweep(&p, &cfg).unwrap();
        let b = convergence_sweep(&p, &SweepConfig { jobs: Some(1), ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!((a[0].dt, a[0].h, a[0].seed, a[0].n), (0.05, 0.2, 0, 10));
        assert_eq!((a[5].dt, a[5].h, a[5].seed, a[5].n), (0.01, 0.1, 1, 20));
        let summary = summarize_sweep(&a);
        assert_eq!(summary.len(), 3);
        assert_eq!(sweep_csv(&a).lines().count(), 7);
        assert!(sweep_csv(&a).starts_with("dt,h,n,seed,linf,l2,stop_reason,iters,final_loss\n"));
    }

    #[test]
    fn layered_velocity_levels() {
        let v = WaveVelocity::Layered;
        assert_eq!(v.eval(-1.0), 2.0);
        assert_eq!(v.eval(-0.5), 1.0);
        assert_eq!(v.eval(0.0), 0.2);
        assert_eq!(v.eval(0.15), 1.0);
        assert_eq!(v.eval(0.3), 1.5);
        assert_eq!(v.eval(1.0), 1.5);
        let bounded = NetworkArchitecture::new(1, vec![4], OutputTransform::Bounded { lo: 0.0, hi: 2.0 }).unwrap();
        assert_eq!(bounded.num_params(), 13);
    }

    #[test]
    fn seeds_derive_distinct_streams() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 100);
        assert_eq!(derive_seed(7, 3), s[3]);
        assert_eq!(loglog_slope(&[1.0, 2.0, 4.0], &[3.0, 12.0, 48.0]), 2.0);
    }
}
