//! Forward solvers used to generate snapshot data: Crank–Nicolson diffusion
//! with a source, leapfrog wave propagation and an implicit Burgers-type
//! scheme solved by Newton iteration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `x_1 = x_min < … < x_n = x_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub n: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl Grid1D {
    pub fn new(n: usize, x_min: f64, x_max: f64) -> Result<Self> {
        let g = Grid1D { n, x_min, x_max };
        g.validate()?;
        Ok(g)
    }

    /// Grid on `[x_min, x_max]` with spacing `h`, which must divide the
    /// interval to within 1e-9 relative.
    pub fn with_spacing(x_min: f64, x_max: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidConfig(format!("grid spacing must be positive, got {h}")));
        }
        let intervals = (x_max - x_min) / h;
        let rounded = intervals.round();
        if (intervals - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "spacing {h} does not divide [{x_min}, {x_max}]"
            )));
        }
        Grid1D::new(rounded as usize + 1, x_min, x_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::InvalidConfig(format!("grid needs at least 3 points, got {}", self.n)));
        }
        if !(self.x_max > self.x_min) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid interval [{}, {}] is empty or non-finite",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.x_max
        } else {
            self.x_min + i as f64 * self.h()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    fn check_len(&self, context: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.n,
                got: v.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeStepping {
    pub dt: f64,
    pub t0: f64,
    pub steps: usize,
}

impl TimeStepping {
    pub fn new(dt: f64, t0: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidConfig(format!("time step must be positive and finite, got {dt}")));
        }
        Ok(TimeStepping { dt, t0, steps })
    }

    /// Stepping from `t0` to `t_end`; the span must be an integer number of
    /// steps to within 1e-9 relative.
    pub fn until(dt: f64, t0: f64, t_end: f64) -> Result<Self> {
        let k = (t_end - t0) / dt;
        let steps = k.round();
        if !(steps >= 0.0) || (k - steps).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "step {dt} does not divide the interval [{t0}, {t_end}]"
            )));
        }
        TimeStepping::new(dt, t0, steps as usize)
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }
}

/// A coefficient field sampled at the grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldSample(Vec<f64>);

impl FieldSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("field sample at index {i}"),
            });
        }
        Ok(FieldSample(values))
    }

    pub fn from_fn(grid: &Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        FieldSample::new(grid.points().into_iter().map(f).collect())
    }

    pub fn constant(grid: &Grid1D, value: f64) -> Result<Self> {
        FieldSample::new(vec![value; grid.n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Solves a tridiagonal system. `lower[i]` multiplies `x[i-1]` and
/// `upper[i]` multiplies `x[i+1]`; `lower[0]` and `upper[n-1]` are ignored.
pub fn thomas_solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    for (context, v) in [("thomas lower", lower), ("thomas upper", upper), ("thomas rhs", rhs)] {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                context,
                expected: n,
                got: v.len(),
            });
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    for i in 0..n {
        if i > 0 {
            pivot = diag[i] - lower[i] * c[i - 1];
        }
        if !(pivot.abs() >= 1e-14) {
            return Err(Error::SingularSystem { row: i, pivot });
        }
        c[i] = if i + 1 < n { upper[i] / pivot } else { 0.0 };
        d[i] = if i == 0 {
            rhs[0] / pivot
        } else {
            (rhs[i] - lower[i] * d[i - 1]) / pivot
        };
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Unscaled centered second difference `v[i+1] - 2v[i] + v[i-1]` at an
/// interior index.
#[inline]
pub(crate) fn second_diff(v: &[f64], i: usize) -> f64 {
    v[i + 1] - 2.0 * v[i] + v[i - 1]
}

/// One Crank–Nicolson step of `u_t = c(x) u_xx + s(x, t)` with the source
/// averaged over both time levels and Dirichlet values `bc` at the new level.
pub fn cn_diffusion_step(
    v: &[f64],
    c: &FieldSample,
    source_now: &[f64],
    source_next: &[f64],
    bc: (f64, f64),
    grid: &Grid1D,
    dt: f64,
) -> Result<Vec<f64>> {
    let n = grid.n;
    grid.check_len("diffusion state", v)?;
    grid.check_len("diffusion coefficient", c.values())?;
    grid.check_len("diffusion source", source_now)?;
    grid.check_len("diffusion source", source_next)?;
    let r = dt / (2.0 * grid.h() * grid.h());
    let c = c.values();
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    rhs[0] = bc.0;
    rhs[n - 1] = bc.1;
    for i in 1..n - 1 {
        let rc = r * c[i];
        lower[i] = -rc;
        diag[i] = 1.0 + 2.0 * rc;
        upper[i] = -rc;
        rhs[i] = v[i] + rc * second_diff(v, i) + 0.5 * dt * (source_now[i] + source_next[i]);
    }
    thomas_solve(&lower, &diag, &upper, &rhs)
}

fn check_cfl(c: &FieldSample, grid: &Grid1D, dt: f64) -> Result<()> {
    let c_max = c.values().iter().fold(0.0_f64, |m, &v| m.max(v));
    let nu = dt / grid.h();
    // The stability limit for u_tt = c u_xx is sqrt(c)·dt/h ≤ 1; the c·dt/h
    // form is also enforced.
    let ratio = (c_max * nu).max(c_max.sqrt() * nu);
    if ratio > 1.0 {
        return Err(Error::CflViolation { ratio });
    }
    Ok(())
}

/// Leapfrog step of `u_tt = c(x) u_xx` with homogeneous Dirichlet boundaries.
pub fn wave_step(v_prev: &[f64], v: &[f64], c: &FieldSample, grid: &Grid1D, dt: f64) -> Result<Vec<f64>> {
    grid.check_len("wave state", v_prev)?;
    grid.check_len("wave state", v)?;
    grid.check_len("wave coefficient", c.values())?;
    check_cfl(c, grid, dt)?;
    let k = (dt / grid.h()).powi(2);
    let c = c.values();
    let n = grid.n;
    let mut next = vec![0.0; n];
    for i in 1..n - 1 {
        next[i] = 2.0 * v[i] - v_prev[i] + k * c[i] * second_diff(v, i);
    }
    Ok(next)
}

/// First leapfrog level from a state at rest:
/// `v¹ = v⁰ + (dt²/2) c D₂v⁰`, zero at the boundary.
pub fn wave_bootstrap(u0: &[f64], c: &FieldSample, grid: &Grid1D, dt: f64) -> Result<Vec<f64>> {
    grid.check_len("wave initial state", u0)?;
    grid.check_len("wave coefficient", c.values())?;
    let k = 0.5 * (dt / grid.h()).powi(2);
    let c = c.values();
    let mut v1 = vec![0.0; grid.n];
    for i in 1..grid.n - 1 {
        v1[i] = u0[i] + k * c[i] * second_diff(u0, i);
    }
    Ok(v1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol: 1e-10,
            max_iters: 50,
        }
    }
}

/// Row residuals of the implicit Burgers-type scheme for the pair
/// `(v0, v1)`; boundary entries are zero.
///
/// With `s = v1 + v0`, row `j` reads
/// `v1_j - v0_j + Δt/(8h)[f_{j+1} s_{j+1}(2 - s_{j+1}) - f_{j-1} s_{j-1}(2 - s_{j-1})]
///  - DΔt/(2h²)(D₂v1 + D₂v0)_j`.
pub fn burgers_residual(v0: &[f64], v1: &[f64], f: &[f64], d: f64, grid: &Grid1D, dt: f64) -> Vec<f64> {
    let n = grid.n;
    let h = grid.h();
    let a = dt / (8.0 * h);
    let b = d * dt / (2.0 * h * h);
    let flux = |j: usize| {
        let s = v0[j] + v1[j];
        f[j] * s * (2.0 - s)
    };
    let mut r = vec![0.0; n];
    for j in 1..n - 1 {
        r[j] = v1[j] - v0[j] + a * (flux(j + 1) - flux(j - 1)) - b * (second_diff(v1, j) + second_diff(v0, j));
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurgersStep {
    pub state: Vec<f64>,
    pub newton_iterations: usize,
    /// Interior residual ∞-norm at return.
    pub residual: f64,
}

/// Advances the Burgers-type scheme by one step with Newton iteration on the
/// tridiagonal Jacobian. `bc` are the Dirichlet values at the new level.
pub fn burgers_step(
    v0: &[f64],
    f: &FieldSample,
    d: f64,
    bc: (f64, f64),
    grid: &Grid1D,
    dt: f64,
    newton: &NewtonConfig,
) -> Result<BurgersStep> {
    grid.check_len("burgers state", v0)?;
    grid.check_len("burgers field", f.values())?;
    if !(d > 0.0) {
        return Err(Error::InvalidConfig(format!("diffusivity must be positive, got {d}")));
    }
    let n = grid.n;
    let h = grid.h();
    let a = dt / (8.0 * h);
    let b = d * dt / (2.0 * h * h);
    let f = f.values();

    let mut v1 = v0.to_vec();
    v1[0] = bc.0;
    v1[n - 1] = bc.1;
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    for it in 0..=newton.max_iters {
        let mut r = burgers_residual(v0, &v1, f, d, grid, dt);
        let norm = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "burgers Newton residual".into(),
            });
        }
        if norm <= newton.tol {
            return Ok(BurgersStep {
                state: v1,
                newton_iterations: it,
                residual: norm,
            });
        }
        if it == newton.max_iters {
            return Err(Error::NewtonDiverged {
                iterations: it,
                residual: norm,
            });
        }
        for j in 1..n - 1 {
            let sp = v0[j + 1] + v1[j + 1];
            let sm = v0[j - 1] + v1[j - 1];
            upper[j] = a * f[j + 1] * (2.0 - 2.0 * sp) - b;
            diag[j] = 1.0 + 2.0 * b;
            lower[j] = -a * f[j - 1] * (2.0 - 2.0 * sm) - b;
        }
        r.iter_mut().for_each(|v| *v = -*v);
        let delta = thomas_solve(&lower, &diag, &upper, &r)?;
        for j in 1..n - 1 {
            v1[j] += delta[j];
        }
    }
    unreachable!("Newton loop returns on its last iteration")
}

/// Which scheme to run, with its coefficient data.
pub enum Problem<'a> {
    /// `source(x, t)` and Dirichlet `boundary(t) -> (left, right)`.
    Diffusion {
        c: &'a FieldSample,
        source: &'a (dyn Fn(f64, f64) -> f64 + Sync),
        boundary: &'a (dyn Fn(f64) -> (f64, f64) + Sync),
    },
    /// Starts at rest with homogeneous Dirichlet boundaries.
    Wave { c: &'a FieldSample },
    Burgers {
        f: &'a FieldSample,
        diffusivity: f64,
        boundary: &'a (dyn Fn(f64) -> (f64, f64) + Sync),
        newton: NewtonConfig,
    },
}

/// Stored states of a simulation with their step indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: Grid1D,
    pub stepping: TimeStepping,
    pub steps: Vec<usize>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.stepping.time(self.steps[k])
    }

    /// State stored for simulation step `step`, if kept.
    pub fn at_step(&self, step: usize) -> Option<&[f64]> {
        self.steps.binary_search(&step).ok().map(|k| self.states[k].as_slice())
    }

    /// Long-format CSV `t,x,u`.
    pub fn to_csv(&self) -> String {
        let xs = self.grid.points();
        let mut out = String::from("t,x,u\n");
        for k in 0..self.len() {
            let t = self.time(k);
            for (x, u) in xs.iter().zip(&self.states[k]) {
                let _ = writeln!(out, "{t:.16e},{x:.16e},{u:.16e}");
            }
        }
        out
    }

    /// Binary checkpoint of the last two stored states.
    pub fn checkpoint(&self) -> Option<Checkpoint> {
        let k = self.len();
        if k < 2 {
            return None;
        }
        Some(Checkpoint {
            dt: self.stepping.dt * (self.steps[k - 1] - self.steps[k - 2]) as f64,
            t_last: self.time(k - 1),
            previous: self.states[k - 2].clone(),
            last: self.states[k - 1].clone(),
        })
    }
}

/// Final two snapshots, written as little-endian binary:
/// magic `PDCK`, u32 version, u64 n, f64 dt, f64 t_last, then `previous`
/// and `last` as n f64 each.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dt: f64,
    pub t_last: f64,
    pub previous: Vec<f64>,
    pub last: Vec<f64>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.last.len();
        let mut out = Vec::with_capacity(32 + 16 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        out.extend_from_slice(&self.t_last.to_le_bytes());
        for v in self.previous.iter().chain(&self.last) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedCheckpoint(m.to_string());
        if bytes.len() < 32 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing header"));
        }
        let word = |at: usize| -> [u8; 8] { bytes[at..at + 8].try_into().expect("8-byte slice") };
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(word(8)) as usize;
        if bytes.len() != 32 + 16 * n {
            return Err(bad("length does not match the declared grid size"));
        }
        let read = |start: usize| -> Vec<f64> { (0..n).map(|i| f64::from_le_bytes(word(start + 8 * i))).collect() };
        Ok(Checkpoint {
            dt: f64::from_le_bytes(word(16)),
            t_last: f64::from_le_bytes(word(24)),
            previous: read(32),
            last: read(32 + 8 * n),
        })
    }
}

/// Runs a scheme and stores every state.
pub fn simulate(problem: &Problem<'_>, grid: &Grid1D, stepping: &TimeStepping, initial: &[f64]) -> Result<Trajectory> {
    simulate_keep(problem, grid, stepping, initial, |_| true)
}

/// Runs a scheme and stores only the states whose step index satisfies
/// `keep`.
pub fn simulate_keep(
    problem: &Problem<'_>,
    grid: &Grid1D,
    stepping: &TimeStepping,
    initial: &[f64],
    keep: impl Fn(usize) -> bool,
) -> Result<Trajectory> {
    grid.validate()?;
    grid.check_len("initial state", initial)?;
    let mut traj = Trajectory {
        grid: *grid,
        stepping: *stepping,
        steps: Vec::new(),
        states: Vec::new(),
    };
    let store = |k: usize, v: &[f64], traj: &mut Trajectory| {
        if keep(k) {
            traj.steps.push(k);
            traj.states.push(v.to_vec());
        }
    };
    store(0, initial, &mut traj);
    let dt = stepping.dt;
    let xs = grid.points();
    match problem {
        Problem::Diffusion { c, source, boundary } => {
            let sample = |t: f64| xs.iter().map(|&x| source(x, t)).collect::<Vec<f64>>();
            let mut v = initial.to_vec();
            let mut s_now = sample(stepping.t0);
            for k in 1..=stepping.steps {
                let t = stepping.time(k);
                let s_next = sample(t);
                v = cn_diffusion_step(&v, c, &s_now, &s_next, boundary(t), grid, dt)?;
                s_now = s_next;
                store(k, &v, &mut traj);
            }
        }
        Problem::Wave { c } => {
            check_cfl(c, grid, dt)?;
            if stepping.steps >= 1 {
                let mut prev = initial.to_vec();
                let mut cur = wave_bootstrap(initial, c, grid, dt)?;
                store(1, &cur, &mut traj);
                for k in 2..=stepping.steps {
                    let next = wave_step(&prev, &cur, c, grid, dt)?;
                    prev = std::mem::replace(&mut cur, next);
                    store(k, &cur, &mut traj);
                }
            }
        }
        Problem::Burgers {
            f,
            diffusivity,
            boundary,
            newton,
        } => {
            let mut v = initial.to_vec();
            for k in 1..=stepping.steps {
                let step = burgers_step(&v, f, *diffusivity, boundary(stepping.time(k)), grid, dt, newton)?;
                v = step.state;
                store(k, &v, &mut traj);
            }
        }
    }
    Ok(traj)
}

/// Reference profile used for Burgers initial and boundary data:
/// `u(x,t) = (c − f)/(2f)·(−1 + (x − ct)·tanh(c − f)/(2D))` with `f`
/// replaced by `sign(f)·max(|f|, clamp)` (sign of zero taken as negative).
pub fn burgers_reference(x: f64, t: f64, f: f64, c: f64, d: f64, clamp: f64) -> f64 {
    let sign = if f > 0.0 { 1.0 } else { -1.0 };
    let fc = sign * f.abs().max(clamp);
    (c - fc) / (2.0 * fc) * (-1.0 + (x - c * t) * (c - fc).tanh() / (2.0 * d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    fn slope(hs: &[f64], errs: &[f64]) -> f64 {
        let lx: Vec<f64> = hs.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = errs.iter().map(|v| v.ln()).collect();
        let mx = lx.iter().sum::<f64>() / lx.len() as f64;
        let my = ly.iter().sum::<f64>() / ly.len() as f64;
        let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn grid_layout() {
        let g = Grid1D::with_spacing(-1.0, 1.0, 0.002).unwrap();
        assert_eq!(g.n, 1001);
        assert_eq!(g.x(0), -1.0);
        assert_eq!(g.x(1000), 1.0);
        assert!(Grid1D::new(2, 0.0, 1.0).is_err());
        assert!(Grid1D::with_spacing(0.0, 1.0, 0.3).is_err());
        assert_eq!(TimeStepping::until(1e-4, 0.0, 0.1).unwrap().steps, 1000);
    }

    #[test]
    fn thomas_examples() {
        let r = vec![1.0, -2.0, 3.5];
        assert_eq!(thomas_solve(&[0.0; 3], &[1.0; 3], &[0.0; 3], &r).unwrap(), r);
        let v = thomas_solve(&[0.0, -1.0, -1.0], &[2.0; 3], &[-1.0, -1.0, 0.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(max_abs_diff(&v, &[1.0; 3]) <= 1e-14);
        assert!(matches!(
            thomas_solve(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]),
            Err(Error::SingularSystem { row: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn thomas_inverts_dominant_systems(
            rows in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.1f64..2.0, -1.0f64..1.0), 1..60),
            flip in any::<bool>(),
        ) {
            let n = rows.len();
            let lower: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let upper: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let sign = if flip { -1.0 } else { 1.0 };
            let diag: Vec<f64> = rows.iter().map(|r| sign * (r.0.abs() + r.1.abs() + r.2)).collect();
            let v: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let mut rhs = vec![0.0; n];
            for i in 0..n {
                rhs[i] = diag[i] * v[i];
                if i > 0 { rhs[i] += lower[i] * v[i - 1]; }
                if i + 1 < n { rhs[i] += upper[i] * v[i + 1]; }
            }
            let got = thomas_solve(&lower, &diag, &upper, &rhs).unwrap();
            let scale = v.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
            prop_assert!(max_abs_diff(&got, &v) <= 1e-10 * scale);
        }
    }

    #[test]
    fn cn_without_dynamics_is_stationary() {
        let g = Grid1D::new(11, -1.0, 1.0).unwrap();
        let v = vec![0.7; 11];
        let zero = vec![0.0; 11];
        let c = FieldSample::constant(&g, 0.0).unwrap();
        let next = cn_diffusion_step(&v, &c, &zero, &zero, (0.7, 0.7), &g, 0.01).unwrap();
        assert_eq!(next, v);
    }

    #[test]
    fn cn_single_heat_step() {
        let g = Grid1D::new(201, -1.0, 1.0).unwrap();
        let dt = 1e-4;
        let exact = |t: f64| g.points().iter().map(|x| (-PI * PI * t).exp() * (PI * x).sin()).collect::<Vec<_>>();
        let c = FieldSample::constant(&g, 1.0).unwrap();
        let zero = vec![0.0; g.n];
        let next = cn_diffusion_step(&exact(0.0), &c, &zero, &zero, (0.0, 0.0), &g, dt).unwrap();
        assert!(max_abs_diff(&next, &exact(dt)) <= 1e-5);
    }

    fn manufactured_diffusion(h: f64, dt: f64, t_end: f64) -> f64 {
        let g = Grid1D::with_spacing(-1.0, 1.0, h).unwrap();
        let cf = |x: f64| 1.0 + (-(x - 0.5) * (x - 0.5)).exp();
        let u = |x: f64, t: f64| (-PI * PI * t).exp() * (PI * x).sin();
        let c = FieldSample::from_fn(&g, cf).unwrap();
        let source = move |x: f64, t: f64| PI * PI * (cf(x) - 1.0) * u(x, t);
        let boundary = |_t: f64| (0.0, 0.0);
        let stepping = TimeStepping::until(dt, 0.0, t_end).unwrap();
        let init: Vec<f64> = g.points().iter().map(|&x| u(x, 0.0)).collect();
        let problem = Problem::Diffusion {
            c: &c,
            source: &source,
            boundary: &boundary,
        };
        let traj = simulate(&problem, &g, &stepping, &init).unwrap();
        let last = traj.states.last().unwrap();
        let exact: Vec<f64> = g.points().iter().map(|&x| u(x, t_end)).collect();
        max_abs_diff(last, &exact)
    }

    #[test]
    fn cn_manufactured_solution() {
        assert!(manufactured_diffusion(0.002, 1e-4, 0.1) <= 1e-4);
    }

    #[test]
    fn cn_second_order_under_joint_refinement() {
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let errs: Vec<f64> = hs.iter().map(|&h| manufactured_diffusion(h, h / 2.0, 0.1)).collect();
        let s = slope(&hs, &errs);
        assert!((s - 2.0).abs() <= 0.3, "slope {s}, errors {errs:?}");
    }

    #[test]
    fn wave_free_drift_and_cfl() {
        let g = Grid1D::new(11, -1.0, 1.0).unwrap();
        let a: Vec<f64> = (0..11).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..11).map(|i| (i as f64).cos()).collect();
        let zero = FieldSample::constant(&g, 0.0).unwrap();
        let next = wave_step(&a, &b, &zero, &g, 0.1).unwrap();
        for i in 1..10 {
            assert_eq!(next[i], 2.0 * b[i] - a[i]);
        }
        assert_eq!((next[0], next[10]), (0.0, 0.0));
        let one = FieldSample::constant(&g, 1.0).unwrap();
        assert!(matches!(wave_step(&a, &b, &one, &g, 2.0 * g.h()), Err(Error::CflViolation { .. })));
    }

    fn standing_wave_error(h: f64, dt: f64, t_end: f64) -> f64 {
        let g = Grid1D::with_spacing(-1.0, 1.0, h).unwrap();
        let c = FieldSample::constant(&g, 1.0).unwrap();
        let init: Vec<f64> = g.points().iter().map(|&x| (PI * x).sin()).collect();
        let stepping = TimeStepping::until(dt, 0.0, t_end).unwrap();
        let traj = simulate(&Problem::Wave { c: &c }, &g, &stepping, &init).unwrap();
        let exact: Vec<f64> = g.points().iter().map(|&x| (PI * t_end).cos() * (PI * x).sin()).collect();
        max_abs_diff(traj.states.last().unwrap(), &exact)
    }

    #[test]
    fn wave_standing_mode() {
        let h = 0.01;
        assert!(standing_wave_error(h, h / 4.0, 0.5) <= 1e-3);
    }

    #[test]
    fn wave_second_order_under_joint_refinement() {
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let errs: Vec<f64> = hs.iter().map(|&h| standing_wave_error(h, h / 2.0, 0.5)).collect();
        let s = slope(&hs, &errs);
        assert!((s - 2.0).abs() <= 0.3, "slope {s}, errors {errs:?}");
    }

    #[test]
    fn wave_bootstrap_cases() {
        let g = Grid1D::new(21, -1.0, 1.0).unwrap();
        let u0: Vec<f64> = g.points().iter().map(|&x| (PI * x).sin()).collect();
        let zero = FieldSample::constant(&g, 0.0).unwrap();
        let v1 = wave_bootstrap(&u0, &zero, &g, 0.01).unwrap();
        assert_eq!(&v1[1..20], &u0[1..20]);

        let linear: Vec<f64> = g.points().iter().map(|&x| 0.3 * x + 0.1).collect();
        let one = FieldSample::constant(&g, 1.0).unwrap();
        let v1 = wave_bootstrap(&linear, &one, &g, 0.01).unwrap();
        assert!(max_abs_diff(&v1[1..20], &linear[1..20]) <= 1e-15);

        let g = Grid1D::new(201, -1.0, 1.0).unwrap();
        let dt = 0.005;
        let u0: Vec<f64> = g.points().iter().map(|&x| (PI * x).sin()).collect();
        let v1 = wave_bootstrap(&u0, &one_on(&g), &g, dt).unwrap();
        let taylor: Vec<f64> = u0.iter().map(|u| (1.0 - (PI * dt).powi(2) / 2.0) * u).collect();
        // D₂ sin = −(π² − π⁴h²/12 + …) sin, so the gap is O(dt²h²).
        assert!(max_abs_diff(&v1, &taylor) <= dt * dt * g.h() * g.h() * PI.powi(4));
    }

    fn one_on(g: &Grid1D) -> FieldSample {
        FieldSample::constant(g, 1.0).unwrap()
    }

    #[test]
    fn wave_discrete_energy_is_conserved() {
        let g = Grid1D::with_spacing(-1.0, 1.0, 0.004).unwrap();
        let dt = 1e-4;
        let c = FieldSample::from_fn(&g, |x| 1.0 + (-(x - 0.5) * (x - 0.5)).exp()).unwrap();
        let init: Vec<f64> = g.points().iter().map(|&x| (-10.0 * x * x).exp()).collect();
        let stepping = TimeStepping::until(dt, 0.0, 1.0).unwrap();
        let traj = simulate(&Problem::Wave { c: &c }, &g, &stepping, &init).unwrap();
        let h = g.h();
        let cv = c.values();
        // Σ (1/c)((v' − v)/dt)² h + Σ D₊v'·D₊v h is invariant for the leapfrog scheme.
        let energy = |a: &[f64], b: &[f64]| {
            let kinetic: f64 = (1..g.n - 1).map(|i| ((b[i] - a[i]) / dt).powi(2) / cv[i]).sum::<f64>() * h;
            let potential: f64 = (0..g.n - 1).map(|i| (b[i + 1] - b[i]) * (a[i + 1] - a[i]) / (h * h)).sum::<f64>() * h;
            kinetic + potential
        };
        let e: Vec<f64> = traj.states.windows(2).skip(1).map(|w| energy(&w[0], &w[1])).collect();
        let e0 = e[0];
        let drift = e.iter().fold(0.0_f64, |m, v| m.max((v - e0).abs())) / e0;
        assert!(drift <= 1e-9, "relative drift {drift}");

    }

    #[test]
    fn burgers_constant_state_is_fixed() {
        let g = Grid1D::new(51, -1.0, 1.0).unwrap();
        let f = FieldSample::constant(&g, 0.0).unwrap();
        let v = vec![0.4; 51];
        let step = burgers_step(&v, &f, 0.1, (0.4, 0.4), &g, 1e-3, &NewtonConfig::default()).unwrap();
        assert!(max_abs_diff(&step.state, &v) <= 1e-14);
    }

    #[test]
    fn burgers_without_flux_is_crank_nicolson_heat() {
        let g = Grid1D::new(101, -1.0, 1.0).unwrap();
        let d = 0.1;
        let dt = 1e-3;
        let v0: Vec<f64> = g.points().iter().map(|&x| (2.0 * x).sin() + 0.3 * x * x).collect();
        let bc = (0.2, -0.1);
        let f = FieldSample::constant(&g, 0.0).unwrap();
        let step = burgers_step(&v0, &f, d, bc, &g, dt, &NewtonConfig::default()).unwrap();
        let c = FieldSample::constant(&g, d).unwrap();
        let zero = vec![0.0; g.n];
        let direct = cn_diffusion_step(&v0, &c, &zero, &zero, bc, &g, dt).unwrap();
        assert!(max_abs_diff(&step.state, &direct) <= 1e-10);
    }

    fn percolation(x: f64) -> f64 {
        -1.0 + (-(x - 0.5) * (x - 0.5)).exp()
    }

    #[test]
    fn burgers_reference_configuration_converges_fast() {
        let (d, c) = (0.1, 1.0);
        let g = Grid1D::with_spacing(-1.0, 1.0, 0.004).unwrap();
        let dt = 2e-6;
        let f = FieldSample::from_fn(&g, percolation).unwrap();
        let v0: Vec<f64> = g.points().iter().map(|&x| burgers_reference(x, 0.0, percolation(x), c, d, 1e-2)).collect();
        let bc = (
            burgers_reference(-1.0, dt, percolation(-1.0), c, d, 1e-2),
            burgers_reference(1.0, dt, percolation(1.0), c, d, 1e-2),
        );
        let newton = NewtonConfig::default();
        let step = burgers_step(&v0, &f, d, bc, &g, dt, &newton).unwrap();
        assert!(step.newton_iterations <= 5, "{} iterations", step.newton_iterations);
        let r = burgers_residual(&v0, &step.state, f.values(), d, &g, dt);
        assert!(r.iter().all(|v| v.abs() <= newton.tol));
    }

    #[test]
    fn burgers_simulation_residuals_stay_below_tolerance() {
        let (d, c) = (0.1, 1.0);
        let g = Grid1D::with_spacing(-1.0, 1.0, 0.008).unwrap();
        let dt = 2e-5;
        let f = FieldSample::from_fn(&g, percolation).unwrap();
        let init: Vec<f64> = g.points().iter().map(|&x| burgers_reference(x, 0.0, percolation(x), c, d, 1e-2)).collect();
        let boundary = move |t: f64| {
            (
                burgers_reference(-1.0, t, percolation(-1.0), c, d, 1e-2),
                burgers_reference(1.0, t, percolation(1.0), c, d, 1e-2),
            )
        };
        let newton = NewtonConfig::default();
        let problem = Problem::Burgers {
            f: &f,
            diffusivity: d,
            boundary: &boundary,
            newton,
        };
        let stepping = TimeStepping::new(dt, 0.0, 200).unwrap();
        let traj = simulate(&problem, &g, &stepping, &init).unwrap();
        for w in traj.states.windows(2) {
            let r = burgers_residual(&w[0], &w[1], f.values(), d, &g, dt);
            assert!(r.iter().all(|v| v.abs() <= newton.tol));
        }
    }

    #[test]
    fn simulate_edge_cases_and_determinism() {
        let g = Grid1D::new(41, -1.0, 1.0).unwrap();
        let c = FieldSample::from_fn(&g, |x| 1.0 + 0.5 * x).unwrap();
        let init: Vec<f64> = g.points().iter().map(|&x| (-10.0 * x * x).exp()).collect();
        let zero = TimeStepping::new(0.01, 0.0, 0).unwrap();
        let traj = simulate(&Problem::Wave { c: &c }, &g, &zero, &init).unwrap();
        assert_eq!(traj.states, vec![init.clone()]);
        let stepping = TimeStepping::new(0.01, 0.0, 50).unwrap();
        let a = simulate(&Problem::Wave { c: &c }, &g, &stepping, &init).unwrap();
        let b = simulate(&Problem::Wave { c: &c }, &g, &stepping, &init).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 51);
        let sparse = simulate_keep(&Problem::Wave { c: &c }, &g, &stepping, &init, |k| k % 10 == 0).unwrap();
        assert_eq!(sparse.steps, vec![0, 10, 20, 30, 40, 50]);
        assert_eq!(sparse.at_step(30), a.at_step(30));
    }

    #[test]
    fn checkpoint_and_csv_round_trip() {
        let g = Grid1D::new(5, 0.0, 1.0).unwrap();
        let traj = Trajectory {
            grid: g,
            stepping: TimeStepping::new(0.1, 0.0, 1).unwrap(),
            steps: vec![0, 1],
            states: vec![vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![1.0 / 3.0, -2.0, 0.0, 1e-300, 7.0]],
        };
        let ck = traj.checkpoint().unwrap();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"PDCK");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let csv = traj.to_csv();
        assert_eq!(csv.lines().count(), 11);
        let row: Vec<f64> = csv.lines().nth(6).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(row, vec![0.1, 0.0, 1.0 / 3.0]);
    }
}
