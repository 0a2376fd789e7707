//! Dense tanh networks used to represent unknown coefficient fields.
//!
//! A network with hidden widths `[n_1, ..., n_{L-1}]` computes
//!
//! ```text
//! y_1 = x
//! y_{l+1} = tanh(W_l y_l + b_l)      l = 1..L-1
//! z = W_L y_L + b_L
//! f(x) = T(z)
//! ```
//!
//! where `T` is the output transform (identity, or a tanh squashed into
//! `[lo, hi]`). All parameters live in one flat vector laid out as
//! `W_1, b_1, W_2, b_2, ..., W_L, b_L` with every matrix stored row-major
//! (`rows = fan_out`, `cols = fan_in`). The optimizer, the checkpoint
//! format and the sensitivity code all rely on this order.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Map applied to the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum OutputTransform {
    #[default]
    Identity,
    /// `lo + (hi - lo) * (tanh(z) + 1) / 2`.
    Bounded { lo: f64, hi: f64 },
}


impl OutputTransform {
    /// Returns `(T(z), T'(z), T''(z))`.
    #[inline]
    fn apply(&self, z: f64) -> (f64, f64, f64) {
        match *self {
            OutputTransform::Identity => (z, 1.0, 0.0),
            OutputTransform::Bounded { lo, hi } => {
                let half = 0.5 * (hi - lo);
                let t = z.tanh();
                let s = 1.0 - t * t;
                (lo + half * (t + 1.0), half * s, -2.0 * half * t * s)
            }
        }
    }
}

/// Shape of a dense tanh network `R^d -> R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub output_transform: OutputTransform,
}

/// Row/column counts and offsets of one affine layer inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub rows: usize,
    pub cols: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }
}

impl NetworkArchitecture {
    pub fn new(
        input_dim: usize,
        layer_widths: Vec<usize>,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        let arch = NetworkArchitecture {
            input_dim,
            layer_widths,
            output_transform,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Scalar-input network with identity output.
    pub fn scalar(layer_widths: Vec<usize>) -> Result<Self> {
        Self::new(1, layer_widths, OutputTransform::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArchitecture("input_dim must be positive".into()));
        }
        if self.layer_widths.is_empty() {
            return Err(Error::InvalidArchitecture("layer_widths must be non-empty".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArchitecture("layer widths must be positive".into()));
        }
        if let OutputTransform::Bounded { lo, hi } = self.output_transform {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArchitecture(format!(
                    "bounded output requires finite lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Number of weight matrices (`n_l`).
    pub fn depth(&self) -> usize {
        self.layer_widths.len() + 1
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut slots = Vec::with_capacity(self.depth());
        let mut fan_in = self.input_dim;
        let mut offset = 0;
        for &rows in self.layer_widths.iter().chain(std::iter::once(&1)) {
            let slot = LayerSlot {
                rows,
                cols: fan_in,
                weight_offset: offset,
                bias_offset: offset + rows * fan_in,
            };
            offset = slot.bias_offset + rows;
            fan_in = rows;
            slots.push(slot);
        }
        slots
    }

    pub fn num_params(&self) -> usize {
        let last = *self.layers().last().expect("at least one layer");
        last.bias_offset + last.rows
    }

    fn max_width(&self) -> usize {
        self.layer_widths
            .iter()
            .copied()
            .chain(std::iter::once(self.input_dim))
            .max()
            .unwrap_or(1)
    }

    pub fn check_params(&self, theta: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "network parameters",
                expected,
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Flat parameter vector `θ` of a [`NetworkArchitecture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NetworkParams(Vec<f64>);

impl NetworkParams {
    pub fn from_vec(arch: &NetworkArchitecture, values: Vec<f64>) -> Result<Self> {
        arch.check_params(&values)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("network parameter {i}"),
            });
        }
        Ok(NetworkParams(values))
    }

    pub fn zeros(arch: &NetworkArchitecture) -> Self {
        NetworkParams(vec![0.0; arch.num_params()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weight<'a>(&'a self, slot: &LayerSlot) -> &'a [f64] {
        &self.0[slot.weight_offset..slot.weight_offset + slot.weight_len()]
    }

    pub fn bias<'a>(&'a self, slot: &LayerSlot) -> &'a [f64] {
        &self.0[slot.bias_offset..slot.bias_offset + slot.rows]
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(arch: &NetworkArchitecture, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; arch.num_params()];
    for slot in arch.layers() {
        let limit = (6.0 / (slot.rows + slot.cols) as f64).sqrt();
        for w in &mut theta[slot.weight_offset..slot.weight_offset + slot.weight_len()] {
            *w = rng.random_range(-limit..limit);
        }
    }
    NetworkParams(theta)
}

/// Scratch storage for one forward/backward pass, reusable across points.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    slots: Vec<LayerSlot>,
    z_out: f64,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Tape {
    pub fn new(arch: &NetworkArchitecture) -> Self {
        let mut acts = Vec::with_capacity(arch.depth());
        acts.push(vec![0.0; arch.input_dim]);
        for &w in &arch.layer_widths {
            acts.push(vec![0.0; w]);
        }
        let width = arch.max_width();
        Tape {
            acts,
            slots: arch.layers(),
            z_out: 0.0,
            delta: vec![0.0; width],
            delta_next: vec![0.0; width],
        }
    }
}

impl NetworkArchitecture {
    /// Forward pass recording activations. No dimension checks.
    pub fn forward_tape(&self, theta: &[f64], x: &[f64], tape: &mut Tape) -> f64 {
        tape.acts[0].copy_from_slice(x);
        let layers = &tape.slots;
        let (hidden, last) = layers.split_at(layers.len() - 1);
        for (l, slot) in hidden.iter().enumerate() {
            let (prev, next) = tape.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut next[0];
            let w = &theta[slot.weight_offset..slot.weight_offset + slot.weight_len()];
            let b = &theta[slot.bias_offset..slot.bias_offset + slot.rows];
            for (i, o) in out.iter_mut().enumerate() {
                let row = &w[i * slot.cols..(i + 1) * slot.cols];
                let z = row.iter().zip(input).fold(b[i], |acc, (a, y)| acc + a * y);
                *o = z.tanh();
            }
        }
        let slot = last[0];
        let w = &theta[slot.weight_offset..slot.weight_offset + slot.weight_len()];
        let input = tape.acts.last().expect("hidden layer");
        let z = w
            .iter()
            .zip(input)
            .fold(theta[slot.bias_offset], |acc, (a, y)| acc + a * y);
        tape.z_out = z;
        self.output_transform.apply(z).0
    }

    /// Reverse pass after [`forward_tape`](Self::forward_tape): accumulates
    /// `upstream * ∂f/∂θ` into `grad` and, if requested, writes `∂f/∂x`
    /// scaled by `upstream` into `input_grad`.
    pub fn backward_tape(
        &self,
        theta: &[f64],
        tape: &mut Tape,
        upstream: f64,
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) {
        let layers = &tape.slots;
        let depth = layers.len();
        let d_out = upstream * self.output_transform.apply(tape.z_out).1;

        let last = layers[depth - 1];
        let y_last = &tape.acts[depth - 1];
        for (j, y) in y_last.iter().enumerate() {
            grad[last.weight_offset + j] += d_out * y;
        }
        grad[last.bias_offset] += d_out;
        // delta holds ∂f/∂y for the current layer output.
        for j in 0..last.cols {
            tape.delta[j] = d_out * theta[last.weight_offset + j];
        }

        for l in (0..depth - 1).rev() {
            let slot = layers[l];
            let y_out = &tape.acts[l + 1];
            let y_in = &tape.acts[l];
            for i in 0..slot.rows {
                tape.delta[i] *= 1.0 - y_out[i] * y_out[i];
            }
            for j in 0..slot.cols {
                tape.delta_next[j] = 0.0;
            }
            for i in 0..slot.rows {
                let dz = tape.delta[i];
                let row = slot.weight_offset + i * slot.cols;
                for j in 0..slot.cols {
                    grad[row + j] += dz * y_in[j];
                    tape.delta_next[j] += dz * theta[row + j];
                }
                grad[slot.bias_offset + i] += dz;
            }
            std::mem::swap(&mut tape.delta, &mut tape.delta_next);
        }
        if let Some(out) = input_grad {
            out.copy_from_slice(&tape.delta[..self.input_dim]);
        }
    }

    /// Values at many points, reusing one tape.
    pub fn forward_many(&self, theta: &[f64], xs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(xs.len() % self.input_dim, 0);
        let mut tape = Tape::new(self);
        xs.chunks(self.input_dim)
            .map(|x| self.forward_tape(theta, x, &mut tape))
            .collect()
    }

    /// Vector-Jacobian product `Σ_k w_k ∇_θ f(x_k)`.
    pub fn vjp_many(&self, theta: &[f64], xs: &[f64], weights: &[f64], grad: &mut [f64]) {
        let mut tape = Tape::new(self);
        for (x, &w) in xs.chunks(self.input_dim).zip(weights) {
            if w == 0.0 {
                continue;
            }
            self.forward_tape(theta, x, &mut tape);
            self.backward_tape(theta, &mut tape, w, grad, None);
        }
    }
}

pub fn forward(params: &NetworkParams, arch: &NetworkArchitecture, x: &[f64]) -> Result<f64> {
    arch.check_params(params.as_slice())?;
    arch.check_input(x)?;
    let mut tape = Tape::new(arch);
    Ok(arch.forward_tape(params.as_slice(), x, &mut tape))
}

/// Exact gradient of the network output with respect to its input.
pub fn grad_input(params: &NetworkParams, arch: &NetworkArchitecture, x: &[f64]) -> Result<Vec<f64>> {
    arch.check_params(params.as_slice())?;
    arch.check_input(x)?;
    let mut tape = Tape::new(arch);
    let mut scratch = vec![0.0; arch.num_params()];
    let mut out = vec![0.0; arch.input_dim];
    arch.forward_tape(params.as_slice(), x, &mut tape);
    arch.backward_tape(params.as_slice(), &mut tape, 1.0, &mut scratch, Some(&mut out));
    Ok(out)
}

/// Exact gradient of the network output with respect to every parameter,
/// in the flat layout order.
pub fn grad_params(params: &NetworkParams, arch: &NetworkArchitecture, x: &[f64]) -> Result<Vec<f64>> {
    arch.check_params(params.as_slice())?;
    arch.check_input(x)?;
    let mut tape = Tape::new(arch);
    let mut grad = vec![0.0; arch.num_params()];
    arch.forward_tape(params.as_slice(), x, &mut tape);
    arch.backward_tape(params.as_slice(), &mut tape, 1.0, &mut grad, None);
    Ok(grad)
}

/// Exact input Hessian (`d × d`, row-major), by forward-mode propagation of
/// first and second input derivatives through every layer.
pub fn second_deriv_input(
    params: &NetworkParams,
    arch: &NetworkArchitecture,
    x: &[f64],
) -> Result<Vec<f64>> {
    arch.check_params(params.as_slice())?;
    arch.check_input(x)?;
    let theta = params.as_slice();
    let d = arch.input_dim;

    // y, J = ∂y/∂x (width × d), H = ∂²y/∂x² (width × d × d)
    let mut y = x.to_vec();
    let mut jac: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
    let mut hess = vec![0.0; d * d * d];

    let layers = arch.layers();
    let depth = layers.len();
    for (l, slot) in layers.iter().enumerate() {
        let w = &theta[slot.weight_offset..slot.weight_offset + slot.weight_len()];
        let b = &theta[slot.bias_offset..slot.bias_offset + slot.rows];
        let mut z = vec![0.0; slot.rows];
        let mut zj = vec![0.0; slot.rows * d];
        let mut zh = vec![0.0; slot.rows * d * d];
        for i in 0..slot.rows {
            z[i] = b[i];
            for k in 0..slot.cols {
                let a = w[i * slot.cols + k];
                z[i] += a * y[k];
                for p in 0..d {
                    zj[i * d + p] += a * jac[k * d + p];
                }
                for pq in 0..d * d {
                    zh[i * d * d + pq] += a * hess[k * d * d + pq];
                }
            }
        }
        let last = l + 1 == depth;
        for i in 0..slot.rows {
            let (s0, s1, s2) = if last {
                arch.output_transform.apply(z[i])
            } else {
                let t = z[i].tanh();
                let s = 1.0 - t * t;
                (t, s, -2.0 * t * s)
            };
            z[i] = s0;
            for p in 0..d {
                for q in 0..d {
                    let idx = i * d * d + p * d + q;
                    zh[idx] = s1 * zh[idx] + s2 * zj[i * d + p] * zj[i * d + q];
                }
            }
            for p in 0..d {
                zj[i * d + p] *= s1;
            }
        }
        y = z;
        jac = zj;
        hess = zh;
    }
    Ok(hess)
}

/// `‖θ‖` bound used by the projected optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConstraint {
    pub bound: f64,
    pub enabled: bool,
}

impl ProjectionConstraint {
    pub fn new(bound: f64) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "projection bound must be positive, got {bound}"
            )));
        }
        Ok(ProjectionConstraint {
            bound,
            enabled: true,
        })
    }

    /// Relative slack under which a matrix counts as feasible; keeps
    /// [`project`] idempotent despite SVD round-off.
    pub const SLACK: f64 = 1e-12;

    pub fn is_satisfied(&self, params: &NetworkParams, arch: &NetworkArchitecture) -> bool {
        let limit = self.bound * (1.0 + Self::SLACK);
        let layers = arch.layers();
        let last = layers[layers.len() - 1];
        layers
            .iter()
            .all(|s| spectral_norm(params.weight(s), s.rows, s.cols) <= limit)
            && euclidean_norm(params.bias(&last)) <= limit
    }
}

fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Largest singular value of a row-major `rows × cols` matrix.
pub fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 1 || cols == 1 {
        return euclidean_norm(w);
    }
    DMatrix::from_row_slice(rows, cols, w)
        .singular_values()
        .iter()
        .fold(0.0_f64, |m, &s| m.max(s))
}

/// `π(W, C) = W / max(1, ‖W‖₂ / C)` applied to every weight matrix and to
/// the output bias. Other biases are left alone.
pub fn project(
    params: &NetworkParams,
    arch: &NetworkArchitecture,
    constraint: &ProjectionConstraint,
) -> NetworkParams {
    let mut out = params.clone();
    project_in_place(out.as_mut_slice(), arch, constraint);
    out
}

pub fn project_in_place(theta: &mut [f64], arch: &NetworkArchitecture, constraint: &ProjectionConstraint) {
    if !constraint.enabled {
        return;
    }
    let c = constraint.bound;
    let limit = c * (1.0 + ProjectionConstraint::SLACK);
    let layers = arch.layers();
    let shrink = |block: &mut [f64], norm: f64| {
        if norm > limit {
            let scale = c / norm;
            block.iter_mut().for_each(|v| *v *= scale);
        }
    };
    for slot in &layers {
        let block = &mut theta[slot.weight_offset..slot.weight_offset + slot.weight_len()];
        let norm = spectral_norm(block, slot.rows, slot.cols);
        shrink(block, norm);
    }
    let last = layers[layers.len() - 1];
    let block = &mut theta[last.bias_offset..last.bias_offset + last.rows];
    let norm = euclidean_norm(block);
    shrink(block, norm);
}

/// Upper bounds on `‖∂f/∂x‖₂` and `‖∂²f/∂x²‖₂` for a network whose weight
/// matrices all have spectral norm at most `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBounds {
    pub first_order: f64,
    pub second_order: f64,
}

pub fn derivative_bounds(arch: &NetworkArchitecture, constraint: &ProjectionConstraint) -> DerivativeBounds {
    let c = constraint.bound;
    let nl = arch.depth() as i32;
    let first_order = c.powi(nl);
    let second_order = if (c - 1.0).abs() < 1e-12 {
        2.0 * (nl - 1) as f64 * c.powi(nl + 1)
    } else {
        2.0 * c.powi(nl + 1) * (c.powi(nl - 1) - 1.0) / (c - 1.0)
    };
    DerivativeBounds {
        first_order,
        second_order,
    }
}

/// Architecture descriptor plus flat parameters, as written to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub architecture: NetworkArchitecture,
    pub params: NetworkParams,
}

impl NetworkCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: NetworkCheckpoint =
            serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("checkpoint: {e}")))?;
        ck.architecture.validate()?;
        NetworkParams::from_vec(&ck.architecture, ck.params.0.clone())?;
        Ok(ck)
    }
}
