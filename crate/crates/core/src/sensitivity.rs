//! Sensitivity regions: field curves obtained by moving the parameters along
//! the gradient of a scalar quantity of interest.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_net::{NetworkArchitecture, NetworkParams, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantityFunctional {
    /// Maximum of the field over the evaluation grid.
    MaxOverDomain,
    /// Field value at `x`.
    ValueAtPoint { x: f64 },
}

impl QuantityFunctional {
    pub fn describe(&self) -> String {
        match self {
            QuantityFunctional::MaxOverDomain => "max_over_domain".to_string(),
            QuantityFunctional::ValueAtPoint { x } => format!("value_at_point({x})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantityGrad {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Grid index of the maximum (lowest on ties) for `MaxOverDomain`.
    pub argmax: Option<usize>,
}

/// Quantity value and its parameter gradient. For the maximum, the
/// gradient is taken at the discrete argmax, which is held fixed.
pub fn quantity_grad(
    params: &NetworkParams,
    arch: &NetworkArchitecture,
    functional: &QuantityFunctional,
    xs: &[f64],
) -> Result<QuantityGrad> {
    let theta = params.as_slice();
    arch.check_params(theta)?;
    if arch.input_dim != 1 {
        return Err(Error::InvalidArchitecture("sensitivity needs a scalar-input network".into()));
    }
    if xs.is_empty() {
        return Err(Error::InvalidConfig("evaluation grid is empty".into()));
    }
    let (x, argmax) = match *functional {
        QuantityFunctional::ValueAtPoint { x } => {
            let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if !(x >= lo && x <= hi) {
                return Err(Error::InvalidConfig(format!("anchor {x} outside the domain [{lo}, {hi}]")));
            }
            (x, None)
        }
        QuantityFunctional::MaxOverDomain => {
            let values = arch.forward_many(theta, xs);
            let mut best = 0;
            for (i, &v) in values.iter().enumerate() {
                if v > values[best] {
                    best = i;
                }
            }
            (xs[best], Some(best))
        }
    };
    let mut tape = Tape::new(arch);
    let value = arch.forward_tape(theta, &[x], &mut tape);
    let mut grad = vec![0.0; theta.len()];
    arch.backward_tape(theta, &mut tape, 1.0, &mut grad, None);
    Ok(QuantityGrad { value, grad, argmax })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRegion {
    pub delta: f64,
    pub alphas: Vec<f64>,
    pub xs: Vec<f64>,
    /// Field at `θ + α ∇q` for each α, on `xs`.
    pub curves: Vec<Vec<f64>>,
    /// The unperturbed field.
    pub base: Vec<f64>,
    pub env_min: Vec<f64>,
    pub env_max: Vec<f64>,
    pub grad_norm: f64,
    pub quantity: f64,
}

impl SensitivityRegion {
    pub fn width(&self, i: usize) -> f64 {
        self.env_max[i] - self.env_min[i]
    }

    /// `x,f_theta,env_min,env_max[,f_exact]`.
    pub fn to_csv(&self, exact: Option<&[f64]>) -> String {
        let mut out = String::from("x,f_theta,env_min,env_max");
        if exact.is_some() {
            out.push_str(",f_exact");
        }
        out.push('\n');
        for i in 0..self.xs.len() {
            let _ = write!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.xs[i], self.base[i], self.env_min[i], self.env_max[i]
            );
            if let Some(e) = exact {
                let _ = write!(out, ",{:.16e}", e[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn meta(&self, functional: &QuantityFunctional) -> RegionMeta {
        RegionMeta {
            delta: self.delta,
            n_alpha: self.alphas.len(),
            grad_norm: self.grad_norm,
            anchor: functional.describe(),
            quantity: self.quantity,
        }
    }
}

/// Metadata stored next to a region CSV. `α` multiplies the raw gradient,
/// so `grad_norm` is needed to interpret `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMeta {
    pub delta: f64,
    pub n_alpha: usize,
    pub grad_norm: f64,
    pub anchor: String,
    pub quantity: f64,
}

fn check_alpha_grid(delta: f64, n_alpha: usize) -> Result<()> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidConfig(format!("delta must be non-negative, got {delta}")));
    }
    if n_alpha == 0 || n_alpha.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("n_alpha must be odd and positive, got {n_alpha}")));
    }
    Ok(())
}

/// Uniform grid of `n_alpha` (odd) values on `[−δ, δ]` with an exact zero
/// in the middle: `α_j = j·(δ/M)`, `j = −M…M`.
pub fn alpha_grid(delta: f64, n_alpha: usize) -> Vec<f64> {
    let m = (n_alpha / 2) as i64;
    if m == 0 {
        return vec![0.0];
    }
    let step = delta / m as f64;
    (-m..=m).map(|j| j as f64 * step).collect()
}

fn region_on(
    theta: &[f64],
    arch: &NetworkArchitecture,
    q: &QuantityGrad,
    xs: &[f64],
    delta: f64,
    alphas: Vec<f64>,
) -> SensitivityRegion {
    let base = arch.forward_many(theta, xs);
    let curves: Vec<Vec<f64>> = alphas
        .par_iter()
        .map(|&a| {
            if a == 0.0 {
                return base.clone();
            }
            let shifted: Vec<f64> = theta.iter().zip(&q.grad).map(|(t, g)| t + a * g).collect();
            arch.forward_many(&shifted, xs)
        })
        .collect();
    let mut env_min = base.clone();
    let mut env_max = base.clone();
    for c in &curves {
        for i in 0..xs.len() {
            env_min[i] = env_min[i].min(c[i]);
            env_max[i] = env_max[i].max(c[i]);
        }
    }
    SensitivityRegion {
        delta,
        alphas,
        xs: xs.to_vec(),
        curves,
        base,
        env_min,
        env_max,
        grad_norm: q.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        quantity: q.value,
    }
}

/// Region `{f_{θ+α∇q} : α on a uniform grid of [−δ, δ]}` and its
/// pointwise envelope.
pub fn region(
    params: &NetworkParams,
    arch: &NetworkArchitecture,
    functional: &QuantityFunctional,
    xs: &[f64],
    delta: f64,
    n_alpha: usize,
) -> Result<SensitivityRegion> {
    check_alpha_grid(delta, n_alpha)?;
    let q = quantity_grad(params, arch, functional, xs)?;
    Ok(region_on(params.as_slice(), arch, &q, xs, delta, alpha_grid(delta, n_alpha)))
}

/// Regions for several radii sharing one α grid: the grid of the largest δ
/// with `n_alpha` points, restricted to `|α| ≤ δ_k` for the others, so the
/// envelopes nest exactly.
pub fn nested_regions(
    params: &NetworkParams,
    arch: &NetworkArchitecture,
    functional: &QuantityFunctional,
    xs: &[f64],
    deltas: &[f64],
    n_alpha: usize,
) -> Result<Vec<SensitivityRegion>> {
    let delta_max = deltas.iter().copied().fold(0.0_f64, f64::max);
    for &d in deltas {
        check_alpha_grid(d, n_alpha)?;
    }
    let q = quantity_grad(params, arch, functional, xs)?;
    let full = alpha_grid(delta_max, n_alpha);
    Ok(deltas
        .iter()
        .map(|&d| {
            let alphas: Vec<f64> = full.iter().copied().filter(|a| a.abs() <= d * (1.0 + 1e-12)).collect();
            region_on(params.as_slice(), arch, &q, xs, d, alphas)
        })
        .collect())
}
