//! Scheme-residual losses over observed snapshots.
//!
//! Every supported scheme is affine in the grid values of the unknown field:
//! row `j` of a group reads `a_j + lo_j f_{j-1} + mid_j f_j + hi_j f_{j+1}`.
//! The coefficients depend only on the data, so they are assembled once and
//! each loss evaluation costs one network pass over the grid.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::NoiseSpec;
use crate::field_net::NetworkArchitecture;
use crate::forward::{second_diff, Grid1D};
use crate::lbfgs::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Diffusion,
    Wave,
    Burgers,
}

impl ProblemKind {
    /// Snapshots per group consumed by the scheme.
    pub fn group_size(&self) -> usize {
        match self {
            ProblemKind::Wave => 3,
            _ => 2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKind::Diffusion => "diffusion",
            ProblemKind::Wave => "wave",
            ProblemKind::Burgers => "burgers",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Consecutive snapshots `U_0 … U_{m-1}` spaced `dt` apart starting at `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotGroup {
    pub t: f64,
    pub snapshots: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSet {
    pub grid: Grid1D,
    pub dt: f64,
    pub groups: Vec<SnapshotGroup>,
    pub noise: Option<NoiseSpec>,
}

impl SnapshotSet {
    pub fn validate(&self, kind: ProblemKind) -> Result<()> {
        self.grid.validate()?;
        if self.groups.is_empty() {
            return Err(Error::EmptySnapshots);
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("snapshot spacing must be positive, got {}", self.dt)));
        }
        let m = kind.group_size();
        for (gi, g) in self.groups.iter().enumerate() {
            if g.snapshots.len() != m {
                return Err(Error::InvalidConfig(format!(
                    "group {gi} has {} snapshots, {kind} needs {m}",
                    g.snapshots.len()
                )));
            }
            for s in &g.snapshots {
                if s.len() != self.grid.n {
                    return Err(Error::DimensionMismatch {
                        context: "snapshot length",
                        expected: self.grid.n,
                        got: s.len(),
                    });
                }
            }
        }
        for (i, a) in self.groups.iter().enumerate() {
            if self.groups[..i].iter().any(|b| b.t == a.t) {
                return Err(Error::InvalidConfig(format!("duplicate group time {}", a.t)));
            }
        }
        Ok(())
    }
}

/// Source term `s(x, t)` of the diffusion equation.
pub type SourceFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Terms of the model that are known and not calibrated.
#[derive(Clone)]
pub enum KnownTerms {
    Diffusion { source: Option<SourceFn> },
    Wave,
    Burgers { diffusivity: f64 },
}

impl KnownTerms {
    pub fn kind(&self) -> ProblemKind {
        match self {
            KnownTerms::Diffusion { .. } => ProblemKind::Diffusion,
            KnownTerms::Wave => ProblemKind::Wave,
            KnownTerms::Burgers { .. } => ProblemKind::Burgers,
        }
    }
}

impl fmt::Debug for KnownTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KnownTerms::Diffusion { source } => f
                .debug_struct("Diffusion")
                .field("source", &source.as_ref().map(|_| "<fn>"))
                .finish(),
            KnownTerms::Wave => f.write_str("Wave"),
            KnownTerms::Burgers { diffusivity } => f.debug_struct("Burgers").field("diffusivity", diffusivity).finish(),
        }
    }
}

/// Affine row coefficients of one group, indexed by grid point; boundary
/// rows are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub a: Vec<f64>,
    pub lo: Vec<f64>,
    pub mid: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Stencil {
    fn zeros(n: usize) -> Self {
        Stencil {
            a: vec![0.0; n],
            lo: vec![0.0; n],
            mid: vec![0.0; n],
            hi: vec![0.0; n],
        }
    }

    #[inline]
    fn row(&self, f: &[f64], j: usize) -> f64 {
        self.a[j] + self.lo[j] * f[j - 1] + self.mid[j] * f[j] + self.hi[j] * f[j + 1]
    }
}

fn build_stencil(kind: &KnownTerms, grid: &Grid1D, dt: f64, group: &SnapshotGroup) -> Stencil {
    let n = grid.n;
    let h = grid.h();
    let mut st = Stencil::zeros(n);
    let u = &group.snapshots;
    match kind {
        KnownTerms::Diffusion { source } => {
            let xs = grid.points();
            for i in 1..n - 1 {
                let s = source
                    .as_ref()
                    .map_or(0.0, |s| 0.5 * (s(xs[i], group.t) + s(xs[i], group.t + dt)));
                st.a[i] = (u[1][i] - u[0][i]) / dt - s;
                st.mid[i] = -(second_diff(&u[1], i) + second_diff(&u[0], i)) / (2.0 * h * h);
            }
        }
        KnownTerms::Wave => {
            for i in 1..n - 1 {
                st.a[i] = (u[2][i] - 2.0 * u[1][i] + u[0][i]) / (dt * dt);
                st.mid[i] = -second_diff(&u[1], i) / (h * h);
            }
        }
        KnownTerms::Burgers { diffusivity } => {
            let c = dt / (8.0 * h);
            let b = diffusivity * dt / (2.0 * h * h);
            let s: Vec<f64> = u[0].iter().zip(&u[1]).map(|(p, q)| p + q).collect();
            for j in 1..n - 1 {
                st.a[j] = u[1][j] - u[0][j] - b * (second_diff(&u[1], j) + second_diff(&u[0], j));
                st.hi[j] = c * s[j + 1] * (2.0 - s[j + 1]);
                st.lo[j] = -c * s[j - 1] * (2.0 - s[j - 1]);
            }
        }
    }
    st
}

/// Group residuals and the loss weights `Σ_j 2 r_j ∂r_j/∂f_k` for a field
/// given by its grid values.
struct Assembly {
    loss: f64,
    weights: Vec<f64>,
}

fn assemble(stencils: &[Stencil], f: &[f64]) -> Result<Assembly> {
    let n = f.len();
    let parts: Vec<Result<Assembly>> = stencils
        .par_iter()
        .enumerate()
        .map(|(g, st)| {
            let mut loss = 0.0;
            let mut weights = vec![0.0; n];
            for j in 1..n - 1 {
                let r = st.row(f, j);
                if !r.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("residual of group {g} at grid index {j}"),
                    });
                }
                loss += r * r;
                weights[j - 1] += 2.0 * r * st.lo[j];
                weights[j] += 2.0 * r * st.mid[j];
                weights[j + 1] += 2.0 * r * st.hi[j];
            }
            Ok(Assembly { loss, weights })
        })
        .collect();
    // Fixed-order reduction keeps results independent of the thread count.
    let mut total = Assembly {
        loss: 0.0,
        weights: vec![0.0; n],
    };
    for part in parts {
        let part = part?;
        total.loss += part.loss;
        for (t, w) in total.weights.iter_mut().zip(&part.weights) {
            *t += w;
        }
    }
    Ok(total)
}

const POINT_CHUNK: usize = 64;

/// Squared scheme residuals of snapshot data with the unknown field given by
/// a network, plus an L2 penalty on the parameters.
#[derive(Debug, Clone)]
pub struct ResidualProblem {
    pub known: KnownTerms,
    pub observations: SnapshotSet,
    pub arch: NetworkArchitecture,
    pub lambda: f64,
    xs: Vec<f64>,
    stencils: Vec<Stencil>,
}

impl ResidualProblem {
    pub fn new(known: KnownTerms, observations: SnapshotSet, arch: NetworkArchitecture, lambda: f64) -> Result<Self> {
        observations.validate(known.kind())?;
        arch.validate()?;
        if arch.input_dim != 1 {
            return Err(Error::InvalidArchitecture(format!(
                "field networks take one input, got {}",
                arch.input_dim
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("regularization weight must be non-negative, got {lambda}")));
        }
        if let KnownTerms::Burgers { diffusivity } = known {
            if !(diffusivity > 0.0) {
                return Err(Error::InvalidConfig(format!("diffusivity must be positive, got {diffusivity}")));
            }
        }
        let stencils = observations
            .groups
            .iter()
            .map(|g| build_stencil(&known, &observations.grid, observations.dt, g))
            .collect();
        Ok(ResidualProblem {
            xs: observations.grid.points(),
            known,
            observations,
            arch,
            lambda,
            stencils,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.known.kind()
    }

    pub fn grid(&self) -> &Grid1D {
        &self.observations.grid
    }

    pub fn stencils(&self) -> &[Stencil] {
        &self.stencils
    }

    /// Network values at the grid points.
    pub fn field_values(&self, theta: &[f64]) -> Vec<f64> {
        let chunks: Vec<Vec<f64>> = self
            .xs
            .par_chunks(POINT_CHUNK)
            .map(|xs| self.arch.forward_many(theta, xs))
            .collect();
        chunks.concat()
    }

    /// Residual rows per group for grid values `f`; entries at the two
    /// boundary points are zero.
    pub fn residuals_for_field(&self, f: &[f64]) -> Vec<Vec<f64>> {
        let n = self.grid().n;
        self.stencils
            .iter()
            .map(|st| {
                let mut r = vec![0.0; n];
                for j in 1..n - 1 {
                    r[j] = st.row(f, j);
                }
                r
            })
            .collect()
    }

    pub fn residuals(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        self.residuals_for_field(&self.field_values(theta))
    }

    /// `Σ_groups Σ_j r_j² + λ‖θ‖²` and its exact gradient.
    pub fn loss_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.arch.check_params(theta)?;
        let f = self.field_values(theta);
        let Assembly { loss, weights } = assemble(&self.stencils, &f)?;
        let partial: Vec<Vec<f64>> = self
            .xs
            .par_chunks(POINT_CHUNK)
            .zip(weights.par_chunks(POINT_CHUNK))
            .map(|(xs, ws)| {
                let mut g = vec![0.0; theta.len()];
                self.arch.vjp_many(theta, xs, ws, &mut g);
                g
            })
            .collect();
        let mut grad: Vec<f64> = theta.iter().map(|t| 2.0 * self.lambda * t).collect();
        for g in &partial {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let penalty = self.lambda * theta.iter().map(|t| t * t).sum::<f64>();
        Ok((loss + penalty, grad))
    }

    /// Same loss with the field's grid values as free variables and no
    /// penalty.
    pub fn field_loss_and_grad(&self, f: &[f64]) -> Result<(f64, Vec<f64>)> {
        if f.len() != self.grid().n {
            return Err(Error::DimensionMismatch {
                context: "field values",
                expected: self.grid().n,
                got: f.len(),
            });
        }
        let Assembly { loss, weights } = assemble(&self.stencils, f)?;
        Ok((loss, weights))
    }

    /// Objective over network parameters for the optimizer. Evaluation
    /// errors surface as a NaN loss.
    pub fn objective(&self) -> impl FnMut(&[f64], &mut [f64]) -> f64 + '_ {
        move |theta: &[f64], grad: &mut [f64]| match self.loss_and_grad(theta) {
            Ok((l, g)) => {
                grad.copy_from_slice(&g);
                l
            }
            Err(_) => f64::NAN,
        }
    }

    /// Objective over discrete field values.
    pub fn least_squares_problem(&self) -> LeastSquaresProblem<'_> {
        LeastSquaresProblem { problem: self }
    }
}

/// Least-squares objective with the field's grid values as unknowns.
pub struct LeastSquaresProblem<'a> {
    problem: &'a ResidualProblem,
}

impl LeastSquaresProblem<'_> {
    pub fn dim(&self) -> usize {
        self.problem.grid().n
    }

    /// Row-wise minimizer for schemes where row `i` involves only `f_i`:
    /// `f_i = −Σ_g a_i mid_i / Σ_g mid_i²`. Points whose rows carry no
    /// information (zero denominator) and boundary points are `None`.
    /// Returns `None` altogether for schemes coupling neighbours.
    pub fn pointwise_minimizer(&self) -> Option<Vec<Option<f64>>> {
        if self.problem.kind() == ProblemKind::Burgers {
            return None;
        }
        let n = self.dim();
        let mut out = vec![None; n];
        for (i, slot) in out.iter_mut().enumerate().take(n - 1).skip(1) {
            let (num, den) = self
                .problem
                .stencils
                .iter()
                .fold((0.0, 0.0), |(p, q), st| (p - st.a[i] * st.mid[i], q + st.mid[i] * st.mid[i]));
            if den > 0.0 {
                *slot = Some(num / den);
            }
        }
        Some(out)
    }
}

impl Objective for LeastSquaresProblem<'_> {
    fn eval(&mut self, f: &[f64], grad: &mut [f64]) -> f64 {
        match self.problem.field_loss_and_grad(f) {
            Ok((l, g)) => {
                grad.copy_from_slice(&g);
                l
            }
            Err(_) => f64::NAN,
        }
    }
}
