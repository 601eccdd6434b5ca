//! Small dense log-barrier interior-point minimizer.
//!
//! Solves `min f(x) s.t. g_j(x) <= 0, lo < x < hi` for smooth convex `f`,
//! `g_j` by damped Newton on the barrier `t_b f(x) - sum ln(-g_j(x))`, with
//! `t_b` multiplied by 10 per stage from 1 until `(#barrier terms)/t_b < 1e-8`.
//! A phase-I stage ([`find_feasible`]) minimizes an auxiliary slack to locate
//! a strictly feasible start. There are no randomized components: identical
//! inputs produce bit-identical iterate sequences.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

const BARRIER_FACTOR: f64 = 10.0;
const STOP_GAP: f64 = 1e-8;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const MAX_INNER: usize = 250;
const MAX_STAGES: usize = 64;

/// A smooth scalar function returning `(value, gradient)`, with an optional
/// analytic Hessian (row-major `dim*dim`). Without one, Newton falls back to
/// central finite differences of the supplied gradient.
pub struct ScalarFn<'a> {
    eval: Box<dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'a>,
    hess: Option<Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>>,
}

impl<'a> ScalarFn<'a> {
    pub fn new(eval: impl Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'a) -> Self {
        Self {
            eval: Box::new(eval),
            hess: None,
        }
    }

    pub fn with_hessian(
        mut self,
        hess: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a,
    ) -> Self {
        self.hess = Some(Box::new(hess));
        self
    }

    #[inline]
    pub fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.eval)(x)
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        if let Some(h) = &self.hess {
            let data = h(x);
            debug_assert_eq!(data.len(), n * n);
            return DMatrix::from_row_slice(n, n, &data);
        }
        // central differences of the gradient, step 1e-6 * (1 + |x_i|)
        let mut cols = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        for i in 0..n {
            let h = 1e-6 * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let gp = (self.eval)(&xp).1;
            xp[i] = x[i] - h;
            let gm = (self.eval)(&xp).1;
            xp[i] = x[i];
            for k in 0..n {
                cols[(k, i)] = (gp[k] - gm[k]) / (2.0 * h);
            }
        }
        // symmetrize
        0.5 * (&cols + cols.transpose())
    }
}

/// Inequality-constrained program: `min objective` over `g_j <= 0` with
/// optional open box bounds per coordinate. Every callable must be convex
/// and twice continuously differentiable on the open feasible set.
pub struct SmoothProgram<'a> {
    pub dim: usize,
    pub objective: ScalarFn<'a>,
    pub constraints: Vec<ScalarFn<'a>>,
    /// Per-coordinate open bounds `(lo, hi)`; use infinities for "none".
    /// Empty means unbounded.
    pub bounds: Vec<(f64, f64)>,
}

impl<'a> SmoothProgram<'a> {
    pub fn unconstrained(dim: usize, objective: ScalarFn<'a>) -> Self {
        Self {
            dim,
            objective,
            constraints: Vec::new(),
            bounds: Vec::new(),
        }
    }

    fn barrier_term_count(&self) -> usize {
        let finite_bounds = self
            .bounds
            .iter()
            .map(|(lo, hi)| usize::from(lo.is_finite()) + usize::from(hi.is_finite()))
            .sum::<usize>();
        self.constraints.len() + finite_bounds
    }

    fn inside_bounds(&self, x: &[f64]) -> bool {
        self.bounds.is_empty()
            || x.iter()
                .zip(&self.bounds)
                .all(|(&v, &(lo, hi))| v > lo && v < hi)
    }

    /// Strict feasibility (bounds and all constraints).
    pub fn strictly_feasible(&self, x: &[f64]) -> bool {
        self.inside_bounds(x) && self.max_constraint(x) < 0.0
    }

    /// `max_j g_j(x)`, `-inf` when there are no constraints.
    pub fn max_constraint(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|g| g.value_grad(x).0)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    /// Total Newton iterations across barrier stages.
    pub iterations: usize,
    pub barrier_stages: usize,
    /// `max_j g_j` at the solution (`-inf` without constraints).
    pub final_slack: f64,
    /// `||grad f + sum lambda_j grad g_j||` with `lambda_j = 1/(-t_b g_j)`.
    pub kkt_residual: f64,
    pub wall_time: std::time::Duration,
    /// True objective value after each barrier stage (non-increasing).
    pub stage_objectives: Vec<f64>,
}

struct BarrierEval {
    value: f64,
    grad: DVector<f64>,
    feasible: bool,
}

fn barrier_value_grad(program: &SmoothProgram, t_b: f64, x: &[f64]) -> BarrierEval {
    let n = program.dim;
    let (f, fg) = program.objective.value_grad(x);
    let mut value = t_b * f;
    let mut grad = DVector::from_vec(fg) * t_b;
    let mut feasible = value.is_finite() && program.inside_bounds(x);
    if feasible {
        for g in &program.constraints {
            let (gv, gg) = g.value_grad(x);
            if !(gv < 0.0) || !gv.is_finite() {
                feasible = false;
                break;
            }
            value -= (-gv).ln();
            for k in 0..n {
                grad[k] += gg[k] / (-gv);
            }
        }
    }
    if feasible {
        for (i, &(lo, hi)) in program.bounds.iter().enumerate() {
            if lo.is_finite() {
                value -= (x[i] - lo).ln();
                grad[i] -= 1.0 / (x[i] - lo);
            }
            if hi.is_finite() {
                value -= (hi - x[i]).ln();
                grad[i] += 1.0 / (hi - x[i]);
            }
        }
    }
    feasible = feasible && value.is_finite();
    BarrierEval {
        value,
        grad,
        feasible,
    }
}

fn barrier_hessian(program: &SmoothProgram, t_b: f64, x: &[f64]) -> DMatrix<f64> {
    let mut h = program.objective.hessian(x) * t_b;
    for g in &program.constraints {
        let (gv, gg) = g.value_grad(x);
        let gg = DVector::from_vec(gg);
        h += &gg * gg.transpose() / (gv * gv);
        h += g.hessian(x) / (-gv);
    }
    for (i, &(lo, hi)) in program.bounds.iter().enumerate() {
        if lo.is_finite() {
            h[(i, i)] += 1.0 / ((x[i] - lo) * (x[i] - lo));
        }
        if hi.is_finite() {
            h[(i, i)] += 1.0 / ((hi - x[i]) * (hi - x[i]));
        }
    }
    h
}

/// Newton direction with escalating diagonal regularization when the Hessian
/// is not positive definite.
fn newton_direction(h: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    let max_diag = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max);
    let mut ridge = 0.0;
    for _ in 0..24 {
        let mut hr = h.clone();
        if ridge > 0.0 {
            for i in 0..n {
                hr[(i, i)] += ridge;
            }
        }
        if let Some(ch) = Cholesky::new(hr) {
            let d = ch.solve(&(-grad));
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d);
            }
        }
        ridge = if ridge == 0.0 {
            1e-12 * (1.0 + max_diag)
        } else {
            ridge * 100.0
        };
    }
    Err(Error::Numeric(
        "Newton system not solvable even with heavy regularization".into(),
    ))
}

/// Minimizes one barrier subproblem in place. Returns Newton iterations used.
///
/// Stops on the gradient target, on a tiny Newton decrement (the
/// affine-invariant criterion), or when the gradient norm has stalled at the
/// f64 noise floor. Running out of iterations accepts the current point: the
/// line search keeps the barrier value monotone, so the next (re-centered)
/// stage starts no worse.
fn newton_stage(
    program: &SmoothProgram,
    t_b: f64,
    x: &mut Vec<f64>,
    grad_target: f64,
    early_stop: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<usize> {
    let mut iters = 0;
    let mut best_gnorm = f64::INFINITY;
    let mut since_best = 0;
    loop {
        let cur = barrier_value_grad(program, t_b, x);
        debug_assert!(cur.feasible, "Newton iterate left the feasible set");
        let gnorm = cur.grad.norm();
        if gnorm <= grad_target || iters >= MAX_INNER {
            return Ok(iters);
        }
        if gnorm < best_gnorm * 0.999 {
            best_gnorm = gnorm;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 10 {
                return Ok(iters);
            }
        }
        let h = barrier_hessian(program, t_b, x);
        let dir = newton_direction(&h, &cur.grad)?;
        let slope = cur.grad.dot(&dir);
        if slope >= 0.0 {
            // regularized direction lost descent: converged at noise
            return Ok(iters);
        }
        let decrement = -slope;
        if 0.5 * decrement <= 1e-14 {
            return Ok(iters);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = x
                .iter()
                .zip(dir.iter())
                .map(|(xi, di)| xi + step * di)
                .collect();
            let trial = barrier_value_grad(program, t_b, &cand);
            if trial.feasible && trial.value <= cur.value + ARMIJO_C * step * slope {
                *x = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if 0.5 * decrement <= 1e-8 {
                // the barrier value is flat to f64 resolution near the
                // minimizer; nothing left to gain
                return Ok(iters);
            }
            return Err(Error::Numeric(format!(
                "line search failed after {MAX_HALVINGS} halvings at t_b={t_b:e} \
                 (barrier {:.6e}, grad norm {gnorm:.3e})",
                cur.value
            )));
        }
        iters += 1;
        if let Some(stop) = early_stop {
            if stop(x) {
                return Ok(iters);
            }
        }
    }
}

fn barrier_loop(
    program: &SmoothProgram,
    x0: &[f64],
    early_stop: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<(Vec<f64>, SolveStats)> {
    let start = Instant::now();
    if x0.len() != program.dim {
        return Err(Error::Usage(format!(
            "start point has dimension {}, program needs {}",
            x0.len(),
            program.dim
        )));
    }
    if !program.strictly_feasible(x0) {
        return Err(Error::Usage(
            "minimize requires a strictly feasible start point".into(),
        ));
    }
    let mut x = x0.to_vec();
    let terms = program.barrier_term_count() as f64;
    let grad_norm_f = |x: &[f64]| {
        DVector::from_vec(program.objective.value_grad(x).1).norm()
    };
    let mut stats = SolveStats::default();
    let mut t_b = 1.0;
    for _ in 0..MAX_STAGES {
        stats.barrier_stages += 1;
        let finishing = terms / t_b < STOP_GAP;
        // polish the final stage hard enough that the KKT residual
        // (= ||grad B|| / t_b) meets its documented bound
        let target = if finishing {
            0.5e-6 * t_b * (1.0 + grad_norm_f(&x))
        } else {
            1e-9 * t_b.max(1.0)
        };
        stats.iterations += newton_stage(program, t_b, &mut x, target, early_stop)?;
        stats.stage_objectives.push(program.objective.value_grad(&x).0);
        if let Some(stop) = early_stop {
            if stop(&x) {
                break;
            }
        }
        if finishing {
            break;
        }
        t_b *= BARRIER_FACTOR;
    }
    let fin = barrier_value_grad(program, t_b, &x);
    stats.kkt_residual = fin.grad.norm() / t_b;
    stats.final_slack = program.max_constraint(&x);
    stats.wall_time = start.elapsed();
    Ok((x, stats))
}

/// Barrier method from a strictly feasible start point.
pub fn minimize(program: &SmoothProgram, x0: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
    barrier_loop(program, x0, None)
}

/// Phase-I: finds `x` with `max_j g_j(x) <= -1e-9` by minimizing an
/// auxiliary slack `s` subject to `g_j(x) <= s`. Box bounds stay hard.
/// Fails with the residual slack when no strictly feasible point exists.
pub fn find_feasible(program: &SmoothProgram, hint: &[f64]) -> Result<Vec<f64>> {
    if hint.len() != program.dim {
        return Err(Error::Usage(format!(
            "hint has dimension {}, program needs {}",
            hint.len(),
            program.dim
        )));
    }
    if !program.inside_bounds(hint) {
        return Err(Error::Usage(
            "find_feasible hint must lie strictly inside the box bounds".into(),
        ));
    }
    if program.max_constraint(hint) <= -1e-9 {
        return Ok(hint.to_vec());
    }
    let n = program.dim;
    // relaxed program over (x, s): each g_j(x) <= 0 becomes g_j(x) - s <= 0
    let relaxed = SmoothProgram {
        dim: n + 1,
        objective: ScalarFn::new(move |z: &[f64]| {
            let mut grad = vec![0.0; z.len()];
            grad[z.len() - 1] = 1.0;
            (z[z.len() - 1], grad)
        })
        .with_hessian(move |z: &[f64]| vec![0.0; z.len() * z.len()]),
        constraints: program
            .constraints
            .iter()
            .map(|g| {
                ScalarFn::new(move |z: &[f64]| {
                    let (v, mut grad) = g.value_grad(&z[..n]);
                    grad.push(-1.0);
                    (v - z[n], grad)
                })
                .with_hessian(move |z: &[f64]| {
                    let h = g.hessian(&z[..n]);
                    let np = n + 1;
                    let mut out = vec![0.0; np * np];
                    for i in 0..n {
                        for k in 0..n {
                            out[i * np + k] = h[(i, k)];
                        }
                    }
                    out
                })
            })
            .collect(),
        bounds: {
            let mut b = program.bounds.clone();
            if !b.is_empty() {
                b.push((f64::NEG_INFINITY, f64::INFINITY));
            }
            b
        },
    };
    let mut z0 = hint.to_vec();
    z0.push(program.max_constraint(hint) + 1.0);
    let stop = move |z: &[f64]| program.max_constraint(&z[..n]) <= -1e-6;
    let (z, _) = barrier_loop(&relaxed, &z0, Some(&stop))?;
    let x = z[..n].to_vec();
    let residual = program.max_constraint(&x);
    if residual <= -1e-9 {
        Ok(x)
    } else {
        Err(Error::Infeasible {
            residual,
            detail: "phase-I could not reach a strictly feasible point".into(),
        })
    }
}

/// Worst relative deviation between an analytic gradient and central finite
/// differences with per-coordinate step `1e-6 * (1 + |x_i|)`.
pub fn check_gradient<F>(f: F, x: &[f64]) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    let mut xp = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp).0;
        xp[i] = x[i] - h;
        let fm = f(&xp).0;
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs());
        if denom > 0.0 {
            worst = worst.max((fd - analytic[i]).abs() / denom);
        }
    }
    worst
}
