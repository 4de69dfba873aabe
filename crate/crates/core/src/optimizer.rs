// SPDX-License-Identifier: MIT OR Apache-2.0

//! MAP optimization of a hidden state against a probe.
//!
//! The objective is `log f(h) − λ d(h, h0)`, with `d` the squared distance.
//! Each iteration takes a gradient-ascent step with an adaptive step size and
//! adds Gaussian exploration noise:
//!
//! ```text
//! α_t     = α0 · |τ − f(h_t)| / (|f(h0)| + ε)
//! h_{t+1} = h_t + α_t ∇[log f(h_t) − λ d(h_t, h0)] + √α_t · z
//! ```
//!
//! and stops as soon as `f(h_{t+1}) > τ`. Every step also records the two
//! bounds on λ: an upper bound keeping the regularized gradient aligned with
//! the likelihood gradient, and a lower bound limiting how far a step may
//! move away from `h0`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_similarity, distance_gradient, l2_distance, RngStream, Vector,
};
use crate::probe::Probe;

/// How the adaptive step normalizes by the starting score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StepDenominator {
    /// `|f(h0)| + ε`
    #[default]
    AbsPlusEpsilon,
    /// `1 + f(h0)`
    OnePlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub alpha0: f64,
    pub lambda: f64,
    pub tau: f64,
    pub max_iters: usize,
    pub epsilon: f64,
    pub noise_enabled: bool,
    pub epsilon_c: f64,
    pub epsilon_d: f64,
    pub seed: u64,
    pub denominator: StepDenominator,
    /// Abort with [`Error::BoundViolation`] when λ leaves its bounds.
    pub strict_bounds: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.1,
            lambda: 0.01,
            tau: 0.9,
            max_iters: 200,
            epsilon: 1e-8,
            noise_enabled: true,
            epsilon_c: 0.1,
            epsilon_d: 0.0,
            seed: 0,
            denominator: StepDenominator::AbsPlusEpsilon,
            strict_bounds: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return bad("alpha0 must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must be in (0, 1)");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be > 0");
        }
        if !(self.epsilon_c > 0.0 && self.epsilon_c < 1.0) {
            return bad("epsilon_c must be in (0, 1)");
        }
        if !(self.epsilon_d >= 0.0 && self.epsilon_d.is_finite()) {
            return bad("epsilon_d must be >= 0");
        }
        Ok(())
    }

    fn step_denominator(&self, f_h0: f64) -> f64 {
        match self.denominator {
            StepDenominator::AbsPlusEpsilon => f_h0.abs() + self.epsilon,
            StepDenominator::OnePlus => 1.0 + f_h0,
        }
    }
}

/// One iteration. Gradient, step and bound fields describe the state `h_t`
/// the step was taken from; `f_value` and `distance_to_h0` describe `h_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub f_value: f64,
    pub distance_to_h0: f64,
    pub step_size: f64,
    pub grad_likelihood_norm: f64,
    pub grad_total_norm: f64,
    /// `cos(∇*, ∇**)`; `None` when either gradient vanishes.
    pub cosine: Option<f64>,
    /// `None` when the upper bound is inactive (non-binding).
    pub lemma1_upper: Option<f64>,
    /// `None` when undefined (state still at `h0`).
    pub lemma2_lower: Option<f64>,
    pub bound_violated: bool,
}

impl StepRecord {
    pub fn in_bounds(&self) -> bool {
        !self.bound_violated
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub steps: Vec<StepRecord>,
}

impl OptimizerTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub const CSV_HEADER: [&'static str; 10] = [
        "t",
        "f",
        "dist",
        "alpha_t",
        "grad_star_norm",
        "grad_total_norm",
        "cosine",
        "lemma1_ub",
        "lemma2_lb",
        "in_bounds",
    ];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.steps {
            out.write_record([
                s.t.to_string(),
                s.f_value.to_string(),
                s.distance_to_h0.to_string(),
                s.step_size.to_string(),
                s.grad_likelihood_norm.to_string(),
                s.grad_total_norm.to_string(),
                opt(s.cosine),
                opt(s.lemma1_upper),
                opt(s.lemma2_lower),
                u8::from(s.in_bounds()).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let mut steps = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row[i]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad trace value {:?}", &row[i])))
            };
            let opt = |i: usize| -> Result<Option<f64>> {
                if row[i].is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            steps.push(StepRecord {
                t: num(0)? as usize,
                f_value: num(1)?,
                distance_to_h0: num(2)?,
                step_size: num(3)?,
                grad_likelihood_norm: num(4)?,
                grad_total_norm: num(5)?,
                cosine: opt(6)?,
                lemma1_upper: opt(7)?,
                lemma2_lower: opt(8)?,
                bound_violated: &row[9] == "0",
            });
        }
        Ok(Self { steps })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub h_star: Vector,
    /// `f(h_star) > τ`.
    pub converged: bool,
    pub iterations_used: usize,
    pub trace: OptimizerTrace,
}

fn finite(x: f64, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `log f(h) − λ d(h, h0)`.
pub fn objective(p: &Probe, h: &Vector, h0: &Vector, lambda: f64) -> Result<f64> {
    let d = l2_distance(h, h0)?;
    finite(p.log_forward(h)? - lambda * d, "objective")
}

/// `∇_h log f(h) − 2λ (h − h0)`.
pub fn objective_gradient(p: &Probe, h: &Vector, h0: &Vector, lambda: f64) -> Result<Vector> {
    let prior = distance_gradient(h, h0)?;
    p.input_gradient(h)?.axpy(-lambda, &prior)
}

/// `α0 · |τ − f(h_t)| / (|f(h0)| + ε)`.
pub fn adaptive_step(alpha0: f64, tau: f64, f_ht: f64, f_h0: f64, epsilon: f64) -> f64 {
    alpha0 * (tau - f_ht).abs() / (f_h0.abs() + epsilon)
}

/// Largest λ keeping `cos(∇*, ∇**) ≥ 1 − ε_c`:
/// `ε_c Σ ∇*ᵢ² / (2 Σ hᵢ ∇*ᵢ)`.
///
/// `h` is the displacement of the current state from the prior center
/// (the optimizer passes `h_t − h0`). Returns `None` when `Σ hᵢ ∇*ᵢ ≤ 0`,
/// in which case any λ ≥ 0 keeps the alignment and the bound does not bind.
pub fn lemma1_upper_bound(h: &Vector, grad_star: &Vector, epsilon_c: f64) -> Result<Option<f64>> {
    let denom = 2.0 * h.dot(grad_star)?;
    let g2 = grad_star.norm().powi(2);
    if g2 == 0.0 {
        return Err(Error::ZeroNorm("lemma1_upper_bound gradient"));
    }
    if denom <= 0.0 {
        return Ok(None);
    }
    Ok(Some(epsilon_c * g2 / denom))
}

/// Smallest λ keeping the per-step distance growth within `ε_d`:
/// `[S − √(S² − ε_d)] / D`, with `S = ‖∇*‖ + ‖h_t − h0‖·c_t` and
/// `D = ‖2 (h_t − h0)‖`, clamped at 0 from below.
pub fn lemma2_lower_bound(
    h_t: &Vector,
    h0: &Vector,
    grad_star: &Vector,
    c_t: f64,
    epsilon_d: f64,
) -> Result<f64> {
    let d_norm = distance_gradient(h_t, h0)?.norm();
    if d_norm == 0.0 {
        return Err(Error::ZeroNorm("lemma2_lower_bound distance gradient"));
    }
    if grad_star.dim() != h_t.dim() {
        return Err(Error::DimensionMismatch {
            expected: h_t.dim(),
            got: grad_star.dim(),
        });
    }
    let s = grad_star.norm() + h_t.sub(h0)?.norm() * c_t;
    let disc = s * s - epsilon_d;
    if disc < 0.0 {
        return Err(Error::NegativeDiscriminant);
    }
    Ok(((s - disc.sqrt()) / d_norm).max(0.0))
}

/// Whether λ sits inside `[lower, upper]`; missing bounds do not constrain.
fn violates(lambda: f64, upper: Option<f64>, lower: Option<f64>) -> bool {
    upper.is_some_and(|u| lambda > u) || lower.is_some_and(|l| lambda < l)
}

struct StepEval {
    grad_total: Vector,
    alpha: f64,
    record: StepRecord,
}

/// Gradient, step size and bounds at `h`; `f_value`/`distance` are filled in by the caller.
fn evaluate_step(
    p: &Probe,
    h: &Vector,
    h0: &Vector,
    f_h: f64,
    f_h0: f64,
    cfg: &OptimizerConfig,
    t: usize,
) -> Result<StepEval> {
    let grad_star = p.input_gradient(h)?;
    let grad_total = grad_star.axpy(-cfg.lambda, &distance_gradient(h, h0)?)?;
    let alpha = cfg.alpha0 * (cfg.tau - f_h).abs() / cfg.step_denominator(f_h0);
    let cosine = cosine_similarity(&grad_star, &grad_total).ok();
    let displacement = h.sub(h0)?;
    let upper = lemma1_upper_bound(&displacement, &grad_star, cfg.epsilon_c)
        .ok()
        .flatten();
    let lower = if displacement.norm() > 0.0 {
        // alignment of the predicted (noise-free) next displacement with the current one
        let next = displacement.axpy(alpha, &grad_total)?;
        let c_t = cosine_similarity(&next, &displacement).unwrap_or(1.0);
        lemma2_lower_bound(h, h0, &grad_star, c_t, cfg.epsilon_d).ok()
    } else if cfg.epsilon_d == 0.0 {
        Some(0.0)
    } else {
        None
    };
    let bound_violated = violates(cfg.lambda, upper, lower);
    Ok(StepEval {
        record: StepRecord {
            t,
            f_value: f_h,
            distance_to_h0: 0.0,
            step_size: alpha,
            grad_likelihood_norm: grad_star.norm(),
            grad_total_norm: grad_total.norm(),
            cosine,
            lemma1_upper: upper,
            lemma2_lower: lower,
            bound_violated,
        },
        grad_total,
        alpha,
    })
}

fn take_step(
    h: &Vector,
    eval: &StepEval,
    cfg: &OptimizerConfig,
    rng: &mut RngStream,
) -> Option<Vector> {
    let mut next: Vec<f64> = h
        .as_slice()
        .iter()
        .zip(eval.grad_total.as_slice())
        .map(|(x, g)| x + eval.alpha * g)
        .collect();
    if cfg.noise_enabled {
        let scale = eval.alpha.sqrt();
        for x in next.iter_mut() {
            *x += scale * rng.standard_normal();
        }
    }
    Vector::new(next).ok()
}

/// Runs the MAP iteration from `h0`.
///
/// States the probe already scores at `f(h0) ≥ 0.5` are returned unchanged
/// with zero iterations. A non-finite state aborts with [`Error::Diverged`],
/// which carries the trace up to that point.
pub fn optimize_hidden_state(
    p: &Probe,
    h0: &Vector,
    cfg: &OptimizerConfig,
    rng: &mut RngStream,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    let f_h0 = p.forward(h0)?;
    let mut trace = OptimizerTrace::default();
    if f_h0 >= 0.5 {
        return Ok(OptimizeResult {
            h_star: h0.clone(),
            converged: f_h0 > cfg.tau,
            iterations_used: 0,
            trace,
        });
    }
    let mut h = h0.clone();
    let mut f_h = f_h0;
    for t in 0..cfg.max_iters {
        let eval = evaluate_step(p, &h, h0, f_h, f_h0, cfg, t)?;
        if cfg.strict_bounds && eval.record.bound_violated {
            return Err(Error::BoundViolation { step: t, lambda: cfg.lambda });
        }
        let Some(next) = take_step(&h, &eval, cfg, rng) else {
            return Err(Error::Diverged { step: t, trace: Box::new(trace) });
        };
        let mut record = eval.record;
        f_h = p.forward(&next)?;
        record.f_value = f_h;
        record.distance_to_h0 = l2_distance(&next, h0)?;
        if !record.distance_to_h0.is_finite() {
            return Err(Error::Diverged { step: t, trace: Box::new(trace) });
        }
        trace.steps.push(record);
        h = next;
        if f_h > cfg.tau {
            break;
        }
    }
    Ok(OptimizeResult {
        converged: f_h > cfg.tau,
        iterations_used: trace.len(),
        h_star: h,
        trace,
    })
}

/// Result of optimizing several states jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub states: Vec<Vector>,
    /// Which input states were optimized (initially scored below 0.5).
    pub optimized: Vec<bool>,
    pub iterations_used: usize,
    pub positive_fraction: f64,
    pub traces: Vec<OptimizerTrace>,
}

/// Jointly optimizes every state the probe scores below 0.5.
///
/// The objective is the sum of per-state objectives, so gradients decouple;
/// all states share one step counter. A state stops moving once it exceeds
/// `τ`, and the whole batch stops once `target_fraction` of *all* states
/// score at least 0.5 or after `max_iters` steps.
pub fn optimize_batch(
    p: &Probe,
    states: &[Vector],
    cfg: &OptimizerConfig,
    target_fraction: f64,
    rng: &mut RngStream,
) -> Result<BatchResult> {
    cfg.validate()?;
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::InvalidArgument("target_fraction must be in (0, 1]".into()));
    }
    let f0: Vec<f64> = states.iter().map(|h| p.forward(h)).collect::<Result<_>>()?;
    let optimized: Vec<bool> = f0.iter().map(|&f| f < 0.5).collect();
    let mut current: Vec<Vector> = states.to_vec();
    let mut f_now = f0.clone();
    let mut active: Vec<bool> = optimized.clone();
    let mut traces = vec![OptimizerTrace::default(); states.len()];
    let positive_fraction = |f: &[f64]| {
        if f.is_empty() {
            1.0
        } else {
            f.iter().filter(|&&x| x >= 0.5).count() as f64 / f.len() as f64
        }
    };
    let mut iterations = 0;
    while iterations < cfg.max_iters
        && positive_fraction(&f_now) < target_fraction
        && active.iter().any(|&a| a)
    {
        for i in 0..states.len() {
            if !active[i] {
                continue;
            }
            let eval = evaluate_step(p, &current[i], &states[i], f_now[i], f0[i], cfg, iterations)?;
            if cfg.strict_bounds && eval.record.bound_violated {
                return Err(Error::BoundViolation { step: iterations, lambda: cfg.lambda });
            }
            let Some(next) = take_step(&current[i], &eval, cfg, rng) else {
                return Err(Error::Diverged {
                    step: iterations,
                    trace: Box::new(traces.swap_remove(i)),
                });
            };
            let mut record = eval.record;
            f_now[i] = p.forward(&next)?;
            record.f_value = f_now[i];
            record.distance_to_h0 = l2_distance(&next, &states[i])?;
            traces[i].steps.push(record);
            current[i] = next;
            if f_now[i] > cfg.tau {
                active[i] = false;
            }
        }
        iterations += 1;
    }
    Ok(BatchResult {
        positive_fraction: positive_fraction(&f_now),
        states: current,
        optimized,
        iterations_used: iterations,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub lambda: f64,
    pub in_bounds: Vec<bool>,
    pub in_bounds_fraction: f64,
}

/// Per-step check of `λ ∈ [lower, upper]` against the bounds stored in a trace.
pub fn check_bounds(trace: &OptimizerTrace, lambda: f64) -> Result<BoundsReport> {
    if trace.is_empty() {
        return Err(Error::Empty("optimizer trace"));
    }
    let in_bounds: Vec<bool> = trace
        .steps
        .iter()
        .map(|s| !violates(lambda, s.lemma1_upper, s.lemma2_lower))
        .collect();
    let n_in = in_bounds.iter().filter(|&&b| b).count();
    Ok(BoundsReport {
        lambda,
        in_bounds_fraction: n_in as f64 / in_bounds.len() as f64,
        in_bounds,
    })
}

/// A probe that is exactly logistic-linear in `w` over `|h·w| < 100`:
/// one hidden unit with a large bias keeps the rectifier active.
pub fn linear_probe(w: &[f64], bias: f64) -> Result<Probe> {
    const SHIFT: f64 = 100.0;
    Probe::from_parts(w.len(), 1, w.to_vec(), vec![SHIFT], vec![1.0], bias - SHIFT)
}
