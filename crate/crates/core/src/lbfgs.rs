//! Limited-memory BFGS with a strong-Wolfe line search and an optional
//! weight projection after every step.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_net::{project_in_place, NetworkArchitecture, ProjectionConstraint};

/// A differentiable scalar function. `eval` writes the gradient into `grad`
/// and returns the value.
pub trait Objective {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> Objective for F
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearchConfig {
    pub c1: f64,
    pub c2: f64,
    pub max_trials: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            c1: 1e-4,
            c2: 0.9,
            max_trials: 40,
        }
    }
}

/// Projection of network weights applied after each accepted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamProjection {
    pub arch: NetworkArchitecture,
    pub constraint: ProjectionConstraint,
}

impl ParamProjection {
    fn apply(&self, x: &mut [f64]) {
        project_in_place(x, &self.arch, &self.constraint);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Relative loss decrease tolerance.
    pub eps1: f64,
    /// Gradient ∞-norm tolerance.
    pub eps2: f64,
    pub line_search: LineSearchConfig,
    #[serde(skip)]
    pub projection: Option<ParamProjection>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            memory: 10,
            max_iters: 5000,
            eps1: 1e-12,
            eps2: 1e-12,
            line_search: LineSearchConfig::default(),
            projection: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        if self.memory == 0 || self.max_iters == 0 {
            return Err(Error::InvalidConfig("memory and max_iters must be positive".into()));
        }
        if !(0.0 < ls.c1 && ls.c1 < ls.c2 && ls.c2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "line search requires 0 < c1 < c2 < 1, got c1={} c2={}",
                ls.c1, ls.c2
            )));
        }
        if !(self.eps1 > 0.0 && self.eps2 > 0.0) {
            return Err(Error::InvalidConfig("eps1 and eps2 must be positive".into()));
        }
        if ls.max_trials == 0 {
            return Err(Error::InvalidConfig("line search needs at least one trial".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RelativeDecrease,
    GradientNorm,
    MaxIters,
    LineSearchFailure,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::RelativeDecrease => "relative_decrease",
            StopReason::GradientNorm => "gradient_norm",
            StopReason::MaxIters => "max_iters",
            StopReason::LineSearchFailure => "line_search_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Accepted losses; entry 0 is the loss at the starting point.
    pub losses: Vec<f64>,
    /// Gradient ∞-norms at the accepted points.
    pub grad_norms: Vec<f64>,
    pub stop_reason: StopReason,
    pub params: Vec<f64>,
    pub evaluations: usize,
}

impl OptimizationTrace {
    pub fn iterations(&self) -> usize {
        self.losses.len() - 1
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace has the initial loss")
    }

    /// `iteration,loss,grad_norm` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,grad_norm\n");
        for (i, (l, g)) in self.losses.iter().zip(&self.grad_norms).enumerate() {
            let _ = writeln!(out, "{i},{l:.16e},{g:.16e}");
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

struct Counted<'a, O: Objective> {
    inner: &'a mut O,
    evaluations: usize,
}

impl<O: Objective> Counted<'_, O> {
    /// Evaluation that maps any non-finite output to `+∞`.
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluations += 1;
        let f = self.inner.eval(x, grad);
        if f.is_finite() && grad.iter().all(|g| g.is_finite()) {
            f
        } else {
            f64::INFINITY
        }
    }
}

/// Minimizer of the cubic interpolating `(x1, f1, g1)` and `(x2, f2, g2)`,
/// clamped to `bounds`.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: Option<(f64, f64)>) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    if ![x1, f1, g1, x2, f2, g2].iter().all(|v| v.is_finite()) {
        return 0.5 * (lo + hi);
    }
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct LineSearchResult {
    step: f64,
    f: f64,
    grad: Vec<f64>,
    wolfe: bool,
}

struct Point {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

/// Strong-Wolfe search along `d` from `x` (bracketing followed by cubic zoom).
fn strong_wolfe<O: Objective>(
    obj: &mut Counted<'_, O>,
    x: &[f64],
    d: &[f64],
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    initial_step: f64,
    cfg: &LineSearchConfig,
) -> LineSearchResult {
    let n = x.len();
    let mut trial = vec![0.0; n];
    let d_norm = inf_norm(d);
    let mut evaluate = |t: f64, obj: &mut Counted<'_, O>| -> Point {
        for i in 0..n {
            trial[i] = x[i] + t * d[i];
        }
        let mut g = vec![0.0; n];
        let f = obj.eval(&trial, &mut g);
        let gtd = if f.is_finite() { dot(&g, d) } else { f64::INFINITY };
        Point { t, f, g, gtd }
    };

    let mut trials = 0;
    let mut t = initial_step;
    let mut new = evaluate(t, obj);
    trials += 1;
    // Step back into the region where the objective is finite.
    while !new.f.is_finite() && trials < cfg.max_trials {
        t *= 0.5;
        new = evaluate(t, obj);
        trials += 1;
    }

    let mut prev = Point {
        t: 0.0,
        f: f0,
        g: g0.to_vec(),
        gtd: gtd0,
    };
    let mut bracket: Vec<Point>;
    let mut done = false;
    let mut bracket_iters = 0;
    loop {
        if trials >= cfg.max_trials {
            bracket = vec![
                Point {
                    t: 0.0,
                    f: f0,
                    g: g0.to_vec(),
                    gtd: gtd0,
                },
                new,
            ];
            break;
        }
        if new.f > f0 + cfg.c1 * new.t * gtd0 || (bracket_iters > 1 && new.f >= prev.f) {
            bracket = vec![prev, new];
            break;
        }
        if new.gtd.abs() <= -cfg.c2 * gtd0 {
            bracket = vec![new];
            done = true;
            break;
        }
        if new.gtd >= 0.0 {
            bracket = vec![prev, new];
            break;
        }
        let min_step = new.t + 0.01 * (new.t - prev.t);
        let max_step = new.t * 10.0;
        let next_t = cubic_interpolate(prev.t, prev.f, prev.gtd, new.t, new.f, new.gtd, Some((min_step, max_step)));
        prev = new;
        new = evaluate(next_t, obj);
        trials += 1;
        bracket_iters += 1;
    }

    // Zoom phase.
    let mut insufficient_progress = false;
    if bracket.len() == 2 {
        let (mut low, mut high) = if bracket[0].f <= bracket[1].f { (0, 1) } else { (1, 0) };
        while !done && trials < cfg.max_trials {
            let (a, b) = (&bracket[0], &bracket[1]);
            if (b.t - a.t).abs() * d_norm < 1e-14 {
                break;
            }
            let mut t = cubic_interpolate(a.t, a.f, a.gtd, b.t, b.f, b.gtd, None);
            let (bmin, bmax) = (a.t.min(b.t), a.t.max(b.t));
            let eps = 0.1 * (bmax - bmin);
            if (bmax - t).min(t - bmin) < eps {
                if insufficient_progress || t >= bmax || t <= bmin {
                    t = if (t - bmax).abs() < (t - bmin).abs() { bmax - eps } else { bmin + eps };
                    insufficient_progress = false;
                } else {
                    insufficient_progress = true;
                }
            } else {
                insufficient_progress = false;
            }
            let p = evaluate(t, obj);
            trials += 1;
            if p.f > f0 + cfg.c1 * p.t * gtd0 || p.f >= bracket[low].f {
                bracket[high] = p;
            } else {
                if p.gtd.abs() <= -cfg.c2 * gtd0 {
                    done = true;
                } else if p.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                    bracket.swap(high, low);
                }
                bracket[low] = p;
            }
            if bracket[0].f <= bracket[1].f {
                low = 0;
                high = 1;
            } else {
                low = 1;
                high = 0;
            }
        }
        let best = bracket.swap_remove(low);
        return LineSearchResult {
            step: best.t,
            f: best.f,
            grad: best.g,
            wolfe: done,
        };
    }
    let best = bracket.pop().expect("bracket holds one point");
    LineSearchResult {
        step: best.t,
        f: best.f,
        grad: best.g,
        wolfe: done,
    }
}

/// One extra cubic-interpolation probe along `d` when the accepted step is
/// visibly off the interpolated line minimum. Keeps the probe only if it is
/// lower. On quadratics this makes the line search exact.
fn refine_step<O: Objective>(
    obj: &mut Counted<'_, O>,
    x: &[f64],
    d: &[f64],
    f0: f64,
    gtd0: f64,
    ls: LineSearchResult,
) -> (f64, f64, Vec<f64>) {
    let t = ls.step;
    let gtd = dot(&ls.grad, d);
    let t_star = cubic_interpolate(0.0, f0, gtd0, t, ls.f, gtd, Some((0.0, 10.0 * t)));
    if !(t_star > 0.0) || (t_star - t).abs() <= 1e-3 * t {
        return (t, ls.f, ls.grad);
    }
    let trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t_star * di).collect();
    let mut g = vec![0.0; x.len()];
    let f = obj.eval(&trial, &mut g);
    if f < ls.f {
        (t_star, f, g)
    } else {
        (t, ls.f, ls.grad)
    }
}

/// Two-loop recursion: returns `-H g`.
fn search_direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

/// Minimizes `objective` from `x0`.
///
/// With a projection configured, the start point and every accepted iterate
/// satisfy the weight constraint. Accepted losses never increase.
pub fn minimize<O: Objective>(objective: &mut O, x0: &[f64], config: &OptimizerConfig) -> Result<OptimizationTrace> {
    config.validate()?;
    let n = x0.len();
    let mut obj = Counted {
        inner: objective,
        evaluations: 0,
    };
    let mut x = x0.to_vec();
    if let Some(p) = &config.projection {
        p.apply(&mut x);
    }
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&x, &mut g);
    if !f.is_finite() {
        return Err(Error::NonFinite {
            context: "objective or gradient at the initial point".into(),
        });
    }

    let mut losses = vec![f];
    let mut grad_norms = vec![inf_norm(&g)];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);

    let finish = |losses, grad_norms, stop_reason, params, evaluations| OptimizationTrace {
        losses,
        grad_norms,
        stop_reason,
        params,
        evaluations,
    };

    if inf_norm(&g) <= config.eps2 {
        let evals = obj.evaluations;
        return Ok(finish(losses, grad_norms, StopReason::GradientNorm, x, evals));
    }

    for _ in 0..config.max_iters {
        let mut step = None;
        // Try the quasi-Newton direction, then plain steepest descent.
        for attempt in 0..2 {
            if attempt == 1 {
                if pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
            let mut d = search_direction(&g, &pairs);
            let mut gtd = dot(&g, &d);
            if !(gtd < 0.0) || !gtd.is_finite() {
                pairs.clear();
                d = g.iter().map(|v| -v).collect();
                gtd = dot(&g, &d);
            }
            let t0 = if pairs.is_empty() {
                (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
            } else {
                1.0
            };
            let ls = strong_wolfe(&mut obj, &x, &d, f, &g, gtd, t0, &config.line_search);
            if ls.f.is_finite() && (ls.wolfe || ls.f < f) && ls.f <= f {
                step = Some((d, ls));
                break;
            }
        }
        let Some((d, ls)) = step else {
            let evals = obj.evaluations;
            return Ok(finish(losses, grad_norms, StopReason::LineSearchFailure, x, evals));
        };

        let (step_len, mut f_new, mut g_new) = refine_step(&mut obj, &x, &d, f, dot(&g, &d), ls);
        let mut x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step_len * di).collect();
        if let Some(p) = &config.projection {
            let before = x_new.clone();
            p.apply(&mut x_new);
            if x_new != before {
                f_new = obj.eval(&x_new, &mut g_new);
                let mut t = step_len;
                let mut trials = 0;
                while !(f_new <= f) && trials < config.line_search.max_trials {
                    t *= 0.5;
                    for i in 0..n {
                        x_new[i] = x[i] + t * d[i];
                    }
                    p.apply(&mut x_new);
                    f_new = obj.eval(&x_new, &mut g_new);
                    trials += 1;
                }
                if !(f_new <= f) {
                    let evals = obj.evaluations;
                    return Ok(finish(losses, grad_norms, StopReason::LineSearchFailure, x, evals));
                }
            }
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == config.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        let f_prev = f;
        x = x_new;
        f = f_new;
        g = g_new;
        losses.push(f);
        let gnorm = inf_norm(&g);
        grad_norms.push(gnorm);

        if gnorm <= config.eps2 {
            let evals = obj.evaluations;
            return Ok(finish(losses, grad_norms, StopReason::GradientNorm, x, evals));
        }
        if (f - f_prev).abs() <= config.eps1 * f_prev.abs().max(1e-300) {
            let evals = obj.evaluations;
            return Ok(finish(losses, grad_norms, StopReason::RelativeDecrease, x, evals));
        }
    }
    let evals = obj.evaluations;
    Ok(finish(losses, grad_norms, StopReason::MaxIters, x, evals))
}

/// Largest relative discrepancy between the analytic gradient and central
/// differences over `coords` randomly chosen coordinates (all if `coords`
/// is at least the dimension).
///
/// Per-coordinate error is `|g - fd| / max(|g|, |fd|, 1e-8)`, with the
/// difference step scaled by `max(1, |x_k|)`.
pub fn gradient_check<O: Objective>(objective: &mut O, x: &[f64], step: f64, coords: usize, seed: u64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("gradient check step must be positive, got {step}")));
    }
    let n = x.len();
    let mut g = vec![0.0; n];
    objective.eval(x, &mut g);
    let chosen: Vec<usize> = if coords >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, n, coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut scratch = vec![0.0; n];
    let mut xp = x.to_vec();
    let mut worst = 0.0_f64;
    for k in chosen {
        let hk = step * x[k].abs().max(1.0);
        xp[k] = x[k] + hk;
        let fp = objective.eval(&xp, &mut scratch);
        xp[k] = x[k] - hk;
        let fm = objective.eval(&xp, &mut scratch);
        xp[k] = x[k];
        let fd = (fp - fm) / (2.0 * hk);
        let err = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
