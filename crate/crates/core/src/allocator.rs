//! Multi-user min-max error allocation of blocklength and transmit power.
//!
//! The instance fixes a blocklength budget `sum m_i <= M`, an energy budget
//! `sum m_i p_i <= E`, a per-user error cap and an SNR floor. Three solvers
//! are provided:
//!
//! - [`solve_joint`]: substitute `a = 1/m`, `b = sqrt(p)` (which turns the
//!   energy constraint into the convex `sum b^2/a`) and minimize the epigraph
//!   of the max error with the interior-point solver. Globally optimal.
//! - [`solve_integer`]: enumerate every integer blocklength vector within the
//!   budget and solve the remaining convex power problem per vector. Exact
//!   but exponential; guarded by an enumeration cap.
//! - [`solve_alternating`]: block-coordinate descent alternating between the
//!   blocklength subproblem at fixed power and the power subproblem at fixed
//!   blocklength. Cheap, init-dependent, possibly suboptimal.
//!
//! All epigraph machinery works on `ln eps` rather than `eps`: optimal errors
//! reach far below 1e-100, and the barrier stop rule is an absolute gap, so
//! only the log formulation delivers relative accuracy (the feasible sets are
//! unchanged).

use crate::error::{Error, Result};
use crate::exec;
use crate::fbl::{
    self, error_probability, hazard, ln_q, normal_pdf, w_derivatives_raw, w_raw, LinkPoint, LN_2,
};
use crate::region::{self, ConvexityVerdict};
use crate::solver::{self, ScalarFn, SmoothProgram, SolveStats};

const LN_10: f64 = std::f64::consts::LN_10;

/// Default cap on the number of integer-enumeration subproblems.
pub const DEFAULT_ENUM_CAP: u64 = 20_000_000;

/// Blocklengths are kept above one channel use in all continuous solves,
/// i.e. `a = 1/m` lives in the open interval (0, 1).
const A_BOUNDS: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    pub n_users: usize,
    /// Payload per user in bits.
    pub d_bits: Vec<f64>,
    /// Effective channel gain z/sigma^2 per user.
    pub gain: Vec<f64>,
    /// Total blocklength budget M.
    pub m_total: f64,
    /// Total energy budget E (power x channel uses).
    pub e_total: f64,
    pub eps_max: f64,
    pub gamma_th: f64,
}

impl AllocationProblem {
    pub fn new(
        d_bits: Vec<f64>,
        gain: Vec<f64>,
        m_total: f64,
        e_total: f64,
        eps_max: f64,
        gamma_th: f64,
    ) -> Result<Self> {
        let n_users = d_bits.len();
        if n_users == 0 {
            return Err(Error::Usage("allocation problem needs at least one user".into()));
        }
        if gain.len() != n_users {
            return Err(Error::Usage(format!(
                "gain has {} entries for {} users",
                gain.len(),
                n_users
            )));
        }
        for (name, xs) in [("d_bits", &d_bits), ("gain", &gain)] {
            if let Some(v) = xs.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Domain(format!("{name} entries must be positive, got {v}")));
            }
        }
        if !(m_total.is_finite() && m_total > 0.0) || !(e_total.is_finite() && e_total > 0.0) {
            return Err(Error::Domain("budgets must be positive and finite".into()));
        }
        if !(eps_max > 0.0 && eps_max < 0.5) {
            return Err(Error::Domain(format!("eps_max must lie in (0, 0.5), got {eps_max}")));
        }
        if !(gamma_th >= 1.0 && gamma_th.is_finite()) {
            return Err(Error::Domain(format!("gamma_th must be >= 1, got {gamma_th}")));
        }
        Ok(Self {
            n_users,
            d_bits,
            gain,
            m_total,
            e_total,
            eps_max,
            gamma_th,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Joint,
    Integer,
    Alternating,
    Relay,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Joint => "joint",
            Method::Integer => "integer",
            Method::Alternating => "alternating",
            Method::Relay => "relay",
        })
    }
}

/// Which resource constraints are active (within 1e-6 relative) at the
/// returned allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub m_budget: bool,
    pub e_budget: bool,
    pub eps_cap: Vec<bool>,
    pub snr_floor: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct AllocationResult {
    pub m: Vec<f64>,
    pub p: Vec<f64>,
    pub eps: Vec<f64>,
    /// `max_i eps_i` (for the relay solver: the overall two-hop error).
    pub objective: f64,
    /// log10 of the objective, finite even when the objective underflows f64.
    pub objective_log10: f64,
    pub binding: Binding,
    pub stats: SolveStats,
    pub method: Method,
    /// Users whose worst-case corner fails the convexity certificates.
    pub out_of_region_users: Vec<usize>,
    /// Solver-attached advisories (e.g. a loosened error cap leaving the
    /// certified region).
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// ln eps and its derivatives in the substituted coordinates
// ---------------------------------------------------------------------------

/// `w`, `ln eps = ln Q(w)`, the hazard `phi(w)/Q(w)` and the curvature of `w`
/// at `(m, gamma)`. `None` when `w` overflowed (callers treat that as a
/// saturated error with zero slope; the constraints then reject the point).
pub(crate) struct LnErr {
    pub w: f64,
    pub val: f64,
    pub lambda: f64,
    pub curv: fbl::FblCurvature,
}

pub(crate) fn ln_err_parts(m: f64, gamma: f64, d_bits: f64) -> Option<LnErr> {
    let w = w_raw(m, gamma, d_bits);
    if !w.is_finite() {
        return None;
    }
    Some(LnErr {
        w,
        val: ln_q(w),
        lambda: hazard(w),
        curv: w_derivatives_raw(m, gamma, d_bits),
    })
}

/// Value, gradient and Hessian of `ln eps` in `(a, b)` with `m = 1/a`,
/// `p = b^2`, `snr = gain b^2`.
pub(crate) struct LnEpsAb {
    pub val: f64,
    pub da: f64,
    pub db: f64,
    pub daa: f64,
    pub dab: f64,
    pub dbb: f64,
}

pub(crate) fn ln_eps_ab_value(a: f64, b: f64, gain: f64, d_bits: f64) -> f64 {
    let w = w_raw(1.0 / a, gain * (b * b), d_bits);
    if w.is_finite() {
        ln_q(w)
    } else if w > 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

pub(crate) fn ln_eps_ab(a: f64, b: f64, gain: f64, d_bits: f64) -> LnEpsAb {
    let m = 1.0 / a;
    let gamma = gain * (b * b);
    let Some(LnErr { w, val, lambda, curv }) = ln_err_parts(m, gamma, d_bits) else {
        return LnEpsAb { val: 0.0, da: 0.0, db: 0.0, daa: 0.0, dab: 0.0, dbb: 0.0 };
    };
    let a2 = a * a;
    let w_a = -curv.dw_dm / a2;
    let w_b = 2.0 * gain * b * curv.dw_dgamma;
    let w_aa = curv.d2w_dm2 / (a2 * a2) + 2.0 * curv.dw_dm / (a2 * a);
    let w_bb = 4.0 * gain * gain * b * b * curv.d2w_dgamma2 + 2.0 * gain * curv.dw_dgamma;
    let w_ab = -2.0 * gain * b * curv.d2w_dmdgamma / a2;
    // d lnQ(w) = -lambda dw ;  d2 lnQ(w) = lambda (lambda - w) dw dw - lambda d2w
    let k = lambda * (lambda - w);
    LnEpsAb {
        val,
        da: -lambda * w_a,
        db: -lambda * w_b,
        daa: k * w_a * w_a - lambda * w_aa,
        dab: k * w_a * w_b - lambda * w_ab,
        dbb: k * w_b * w_b - lambda * w_bb,
    }
}

/// Error probability in the substituted coordinates (`m = 1/a`, `p = b^2`).
pub fn error_prob_ab(a: f64, b: f64, gain: f64, d_bits: f64) -> f64 {
    let p = b * b;
    error_probability(&LinkPoint { m: 1.0 / a, p, gain, d_bits })
}

/// Error probability and its gradient in `(a, b)`:
/// `de/da = phi(w) w_m / a^2`, `de/db = -2 gain b phi(w) w_gamma`.
pub fn error_prob_ab_grad(a: f64, b: f64, gain: f64, d_bits: f64) -> (f64, f64, f64) {
    let m = 1.0 / a;
    let gamma = gain * (b * b);
    let w = w_raw(m, gamma, d_bits);
    let curv = w_derivatives_raw(m, gamma, d_bits);
    let pdf = normal_pdf(w);
    (
        fbl::q_raw(w),
        pdf * curv.dw_dm / (a * a),
        -2.0 * gain * b * pdf * curv.dw_dgamma,
    )
}

// ---------------------------------------------------------------------------
// program builders
// ---------------------------------------------------------------------------

fn set_block(h: &mut [f64], dim: usize, i: usize, j: usize, v: f64) {
    h[i * dim + j] = v;
    h[j * dim + i] = v;
}

/// Budget and floor constraints shared by the feasibility stage and the full
/// epigraph program, over `(a_1..a_n, b_1..b_n, <extras>)` of size `dim`.
pub(crate) fn ab_resource_constraints(
    problem: &AllocationProblem,
    dim: usize,
) -> Vec<ScalarFn<'_>> {
    let n = problem.n_users;
    let mut cons: Vec<ScalarFn<'_>> = Vec::new();
    // sum 1/a_i <= M
    cons.push(
        ScalarFn::new(move |x: &[f64]| {
            let mut v = -problem.m_total;
            let mut grad = vec![0.0; dim];
            for i in 0..n {
                v += 1.0 / x[i];
                grad[i] = -1.0 / (x[i] * x[i]);
            }
            (v, grad)
        })
        .with_hessian(move |x: &[f64]| {
            let mut h = vec![0.0; dim * dim];
            for i in 0..n {
                h[i * dim + i] = 2.0 / (x[i] * x[i] * x[i]);
            }
            h
        }),
    );
    // sum b_i^2 / a_i <= E
    cons.push(
        ScalarFn::new(move |x: &[f64]| {
            let mut v = -problem.e_total;
            let mut grad = vec![0.0; dim];
            for i in 0..n {
                let (a, b) = (x[i], x[n + i]);
                v += b * b / a;
                grad[i] = -b * b / (a * a);
                grad[n + i] = 2.0 * b / a;
            }
            (v, grad)
        })
        .with_hessian(move |x: &[f64]| {
            let mut h = vec![0.0; dim * dim];
            for i in 0..n {
                let (a, b) = (x[i], x[n + i]);
                set_block(&mut h, dim, i, i, 2.0 * b * b / (a * a * a));
                set_block(&mut h, dim, i, n + i, -2.0 * b / (a * a));
                h[(n + i) * dim + (n + i)] = 2.0 / a;
            }
            h
        }),
    );
    // per-user error cap (log space) and SNR floor (linear in b)
    for i in 0..n {
        let gain = problem.gain[i];
        let d = problem.d_bits[i];
        let ln_cap = problem.eps_max.ln();
        cons.push(
            ScalarFn::new(move |x: &[f64]| {
                let e = ln_eps_ab(x[i], x[n + i], gain, d);
                let mut grad = vec![0.0; dim];
                grad[i] = e.da;
                grad[n + i] = e.db;
                (e.val - ln_cap, grad)
            })
            .with_hessian(move |x: &[f64]| {
                let e = ln_eps_ab(x[i], x[n + i], gain, d);
                let mut h = vec![0.0; dim * dim];
                h[i * dim + i] = e.daa;
                set_block(&mut h, dim, i, n + i, e.dab);
                h[(n + i) * dim + (n + i)] = e.dbb;
                h
            }),
        );
        let b_floor = (problem.gamma_th / gain).sqrt();
        cons.push(
            ScalarFn::new(move |x: &[f64]| {
                let mut grad = vec![0.0; dim];
                grad[n + i] = -1.0;
                (b_floor - x[n + i], grad)
            })
            .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim]),
        );
    }
    cons
}

pub(crate) fn ab_bounds(n: usize, extras: usize) -> Vec<(f64, f64)> {
    let mut b = Vec::with_capacity(2 * n + extras);
    b.extend(std::iter::repeat(A_BOUNDS).take(n));
    b.extend(std::iter::repeat((0.0, f64::INFINITY)).take(n));
    b.extend(std::iter::repeat((f64::NEG_INFINITY, f64::INFINITY)).take(extras));
    b
}

/// Strictly feasible `(a, b)` for the resource constraints, or infeasibility.
pub(crate) fn feasible_ab(problem: &AllocationProblem) -> Result<Vec<f64>> {
    let n = problem.n_users;
    let dim = 2 * n;
    let program = SmoothProgram {
        dim,
        objective: ScalarFn::new(move |_x: &[f64]| (0.0, vec![0.0; dim]))
            .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim]),
        constraints: ab_resource_constraints(problem, dim),
        bounds: ab_bounds(n, 0),
    };
    let mut hint = Vec::with_capacity(dim);
    let m_each = (problem.m_total / n as f64).max(1.5);
    hint.extend(std::iter::repeat((1.0 / m_each).min(0.99)).take(n));
    let p_each = problem.e_total / problem.m_total;
    hint.extend(std::iter::repeat(p_each.sqrt()).take(n));
    solver::find_feasible(&program, &hint)
}

// ---------------------------------------------------------------------------
// joint solve
// ---------------------------------------------------------------------------

/// Globally optimal min-max allocation through the `(a, b)` substitution.
pub fn solve_joint(problem: &AllocationProblem) -> Result<AllocationResult> {
    let n = problem.n_users;
    let dim = 2 * n + 1;
    let iu = 2 * n;

    let ab = feasible_ab(problem)?;

    let mut constraints = ab_resource_constraints(problem, dim);
    for i in 0..n {
        let gain = problem.gain[i];
        let d = problem.d_bits[i];
        constraints.push(
            ScalarFn::new(move |x: &[f64]| {
                let e = ln_eps_ab(x[i], x[n + i], gain, d);
                let mut grad = vec![0.0; dim];
                grad[i] = e.da;
                grad[n + i] = e.db;
                grad[iu] = -1.0;
                (e.val - x[iu], grad)
            })
            .with_hessian(move |x: &[f64]| {
                let e = ln_eps_ab(x[i], x[n + i], gain, d);
                let mut h = vec![0.0; dim * dim];
                h[i * dim + i] = e.daa;
                set_block(&mut h, dim, i, n + i, e.dab);
                h[(n + i) * dim + (n + i)] = e.dbb;
                h
            }),
        );
    }
    let program = SmoothProgram {
        dim,
        objective: ScalarFn::new(move |x: &[f64]| {
            let mut grad = vec![0.0; dim];
            grad[iu] = 1.0;
            (x[iu], grad)
        })
        .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim]),
        constraints,
        bounds: ab_bounds(n, 1),
    };

    let worst_ln = (0..n)
        .map(|i| ln_eps_ab_value(ab[i], ab[n + i], problem.gain[i], problem.d_bits[i]))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut x0 = ab;
    x0.push(worst_ln + LN_2);

    let (x, stats) = solver::minimize(&program, &x0)?;
    let m: Vec<f64> = (0..n).map(|i| 1.0 / x[i]).collect();
    let p: Vec<f64> = (0..n).map(|i| x[n + i] * x[n + i]).collect();
    Ok(finalize(problem, m, p, stats, Method::Joint))
}

// ---------------------------------------------------------------------------
// power subproblem (fixed blocklengths)
// ---------------------------------------------------------------------------

struct PowerSolution {
    p: Vec<f64>,
    ln_objective: f64,
    iterations: usize,
}

/// `ln eps` and its first/second derivative in the power at fixed
/// blocklength.
fn ln_eps_power(m: f64, gain: f64, p: f64, d: f64) -> (f64, f64, f64) {
    match ln_err_parts(m, gain * p, d) {
        Some(e) => {
            let k = e.lambda * (e.lambda - e.w);
            let wp = gain * e.curv.dw_dgamma;
            (
                e.val,
                -e.lambda * wp,
                k * wp * wp - e.lambda * gain * gain * e.curv.d2w_dgamma2,
            )
        }
        None => (0.0, 0.0, 0.0),
    }
}

/// Min-max power allocation at fixed blocklengths. `Ok(None)` when the
/// subproblem is infeasible.
fn solve_powers(problem: &AllocationProblem, m: &[f64]) -> Result<Option<PowerSolution>> {
    let n = problem.n_users;
    let dim = n + 1;
    let iu = n;

    // a hint that is strictly feasible in energy and SNR floor by
    // construction; only the error caps may still be violated
    let e_floor: f64 = (0..n)
        .map(|i| m[i] * problem.gamma_th / problem.gain[i])
        .sum();
    let spare = problem.e_total - e_floor;
    if spare <= 0.0 {
        return Ok(None);
    }
    let hint: Vec<f64> = (0..n)
        .map(|i| problem.gamma_th / problem.gain[i] + 0.5 * spare / (n as f64 * m[i]))
        .collect();

    let energy = |dim: usize| -> ScalarFn<'_> {
        let mv = m.to_vec();
        ScalarFn::new(move |x: &[f64]| {
            let mut v = -problem.e_total;
            let mut grad = vec![0.0; dim];
            for (i, &mi) in mv.iter().enumerate() {
                v += mi * x[i];
                grad[i] = mi;
            }
            (v, grad)
        })
        .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim])
    };
    let cap = |dim: usize, i: usize| -> ScalarFn<'_> {
        let (gain, d, mi) = (problem.gain[i], problem.d_bits[i], m[i]);
        let ln_cap = problem.eps_max.ln();
        ScalarFn::new(move |x: &[f64]| {
            let (v, dv, _) = ln_eps_power(mi, gain, x[i], d);
            let mut grad = vec![0.0; dim];
            grad[i] = dv;
            (v - ln_cap, grad)
        })
        .with_hessian(move |x: &[f64]| {
            let (_, _, d2) = ln_eps_power(mi, gain, x[i], d);
            let mut h = vec![0.0; dim * dim];
            h[i * dim + i] = d2;
            h
        })
    };
    let floor = |dim: usize, i: usize| -> ScalarFn<'_> {
        let f = problem.gamma_th / problem.gain[i];
        ScalarFn::new(move |x: &[f64]| {
            let mut grad = vec![0.0; dim];
            grad[i] = -1.0;
            (f - x[i], grad)
        })
        .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim])
    };

    // feasibility over p alone
    let mut feas_cons = vec![energy(n)];
    for i in 0..n {
        feas_cons.push(cap(n, i));
        feas_cons.push(floor(n, i));
    }
    let feas = SmoothProgram {
        dim: n,
        objective: ScalarFn::new(move |_x: &[f64]| (0.0, vec![0.0; n]))
            .with_hessian(move |_x: &[f64]| vec![0.0; n * n]),
        constraints: feas_cons,
        bounds: vec![(0.0, f64::INFINITY); n],
    };
    let p0 = match solver::find_feasible(&feas, &hint) {
        Ok(p0) => p0,
        Err(Error::Infeasible { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };

    let mut cons = vec![energy(dim)];
    for i in 0..n {
        let (gain, d, mi) = (problem.gain[i], problem.d_bits[i], m[i]);
        cons.push(
            ScalarFn::new(move |x: &[f64]| {
                let (v, dv, _) = ln_eps_power(mi, gain, x[i], d);
                let mut grad = vec![0.0; dim];
                grad[i] = dv;
                grad[iu] = -1.0;
                (v - x[iu], grad)
            })
            .with_hessian(move |x: &[f64]| {
                let (_, _, d2) = ln_eps_power(mi, gain, x[i], d);
                let mut h = vec![0.0; dim * dim];
                h[i * dim + i] = d2;
                h
            }),
        );
        cons.push(cap(dim, i));
        cons.push(floor(dim, i));
    }
    let program = SmoothProgram {
        dim,
        objective: ScalarFn::new(move |x: &[f64]| {
            let mut grad = vec![0.0; dim];
            grad[iu] = 1.0;
            (x[iu], grad)
        })
        .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim]),
        constraints: cons,
        bounds: {
            let mut b = vec![(0.0, f64::INFINITY); n];
            b.push((f64::NEG_INFINITY, f64::INFINITY));
            b
        },
    };
    let worst_ln = (0..n)
        .map(|i| ln_q(w_raw(m[i], problem.gain[i] * p0[i], problem.d_bits[i])))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut x0 = p0;
    x0.push(worst_ln + LN_2);
    let (x, stats) = solver::minimize(&program, &x0)?;
    let p = x[..n].to_vec();
    let ln_objective = (0..n)
        .map(|i| ln_q(w_raw(m[i], problem.gain[i] * p[i], problem.d_bits[i])))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(PowerSolution {
        p,
        ln_objective,
        iterations: stats.iterations,
    }))
}

// ---------------------------------------------------------------------------
// integer enumeration
// ---------------------------------------------------------------------------

/// Number of positive integer vectors of length `n` with sum <= `m`,
/// i.e. `binom(m, n)`; saturates at `cap + 1`.
fn composition_count(m: u64, n: u64, cap: u64) -> u64 {
    if m < n {
        return 0;
    }
    let mut c: u128 = 1;
    for k in 1..=n {
        c = c * (m - n + k) as u128 / k as u128;
        if c > cap as u128 {
            return cap + 1;
        }
    }
    c as u64
}

struct EnumBest {
    ln_objective: f64,
    m: Vec<u64>,
    p: Vec<f64>,
}

/// Deterministic tie-break: lower objective, then lexicographically
/// smaller blocklength vector.
fn better(candidate: &EnumBest, incumbent: &Option<EnumBest>) -> bool {
    match incumbent {
        None => true,
        Some(b) => {
            candidate.ln_objective < b.ln_objective
                || (candidate.ln_objective == b.ln_objective && candidate.m < b.m)
        }
    }
}

/// Cheap per-vector lower bound on the max ln-error: each user gets all the
/// spare energy on top of everyone's SNR floor. `None` when the vector cannot
/// even meet the floors.
fn ln_objective_lower_bound(problem: &AllocationProblem, m: &[u64]) -> Option<f64> {
    let e_floor: f64 = m
        .iter()
        .zip(&problem.gain)
        .map(|(&mi, &g)| mi as f64 * problem.gamma_th / g)
        .sum();
    let spare = problem.e_total - e_floor;
    if spare <= 0.0 {
        return None;
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..m.len() {
        let mi = m[i] as f64;
        let p_max = problem.gamma_th / problem.gain[i] + spare / mi;
        let w = w_raw(mi, problem.gain[i] * p_max, problem.d_bits[i]);
        let ln_e = if w.is_finite() {
            ln_q(w)
        } else if w > 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        worst = worst.max(ln_e);
    }
    Some(worst)
}

fn enumerate_tail(
    problem: &AllocationProblem,
    prefix: &mut Vec<u64>,
    budget_left: u64,
    best: &mut Option<EnumBest>,
    iterations: &mut usize,
    solves: &mut usize,
) -> Result<()> {
    let n = problem.n_users;
    let depth = prefix.len();
    if depth == n {
        if let Some(lb) = ln_objective_lower_bound(problem, prefix) {
            if lb > problem.eps_max.ln() {
                return Ok(());
            }
            // the bound can only skip vectors that are strictly worse than
            // the incumbent, so pruning never changes the final winner
            if let Some(b) = best {
                if lb > b.ln_objective {
                    return Ok(());
                }
            }
            let m_f: Vec<f64> = prefix.iter().map(|&v| v as f64).collect();
            *solves += 1;
            match solve_powers(problem, &m_f) {
                Ok(Some(sol)) => {
                    *iterations += sol.iterations;
                    let cand = EnumBest {
                        ln_objective: sol.ln_objective,
                        m: prefix.clone(),
                        p: sol.p,
                    };
                    if better(&cand, best) {
                        *best = Some(cand);
                    }
                }
                Ok(None) => {}
                // an isolated numeric failure must not abort the sweep
                Err(Error::Numeric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        return Ok(());
    }
    let remaining_users = (n - depth - 1) as u64;
    if budget_left <= remaining_users {
        return Ok(());
    }
    for v in 1..=(budget_left - remaining_users) {
        prefix.push(v);
        enumerate_tail(problem, prefix, budget_left - v, best, iterations, solves)?;
        prefix.pop();
    }
    Ok(())
}

/// Exhaustive search over integer blocklength vectors; exact up to the power
/// subproblem tolerance. Rejected with a resource error when the enumeration
/// would exceed `cap` subproblems.
pub fn solve_integer(problem: &AllocationProblem, cap: u64) -> Result<AllocationResult> {
    let n = problem.n_users;
    let m_budget = problem.m_total.floor() as u64;
    let count = composition_count(m_budget, n as u64, cap);
    if count > cap {
        return Err(Error::Resource(format!(
            "integer enumeration needs more than {cap} subproblems \
             (M={m_budget}, N={n}); use solve_joint instead"
        )));
    }
    if count == 0 {
        return Err(Error::Infeasible {
            residual: f64::INFINITY,
            detail: format!("blocklength budget {m_budget} cannot serve {n} users"),
        });
    }

    let first_max = m_budget - (n as u64 - 1);
    let chunks = exec::map_range(first_max as usize, |idx| {
        let first = (idx + 1) as u64;
        let mut best: Option<EnumBest> = None;
        let mut iterations = 0usize;
        let mut solves = 0usize;
        let mut prefix = vec![first];
        enumerate_tail(
            problem,
            &mut prefix,
            m_budget - first,
            &mut best,
            &mut iterations,
            &mut solves,
        )
        .map(|_| (best, iterations, solves))
    });

    let mut best: Option<EnumBest> = None;
    let mut iterations = 0usize;
    let mut solves = 0usize;
    for chunk in chunks {
        let (cand, it, sv) = chunk?;
        iterations += it;
        solves += sv;
        if let Some(c) = cand {
            if better(&c, &best) {
                best = Some(c);
            }
        }
    }
    let Some(best) = best else {
        return Err(Error::Infeasible {
            residual: f64::INFINITY,
            detail: "no integer blocklength vector admits a feasible power allocation".into(),
        });
    };
    let m: Vec<f64> = best.m.iter().map(|&v| v as f64).collect();
    let stats = SolveStats {
        iterations,
        barrier_stages: solves,
        ..SolveStats::default()
    };
    Ok(finalize(problem, m, best.p, stats, Method::Integer))
}

// ---------------------------------------------------------------------------
// alternating search
// ---------------------------------------------------------------------------

/// `ln eps` and its derivatives in the blocklength at fixed power.
fn ln_eps_blocklength(m: f64, gain: f64, p: f64, d: f64) -> (f64, f64, f64) {
    match ln_err_parts(m, gain * p, d) {
        Some(e) => {
            let k = e.lambda * (e.lambda - e.w);
            (
                e.val,
                -e.lambda * e.curv.dw_dm,
                k * e.curv.dw_dm * e.curv.dw_dm - e.lambda * e.curv.d2w_dm2,
            )
        }
        None => (0.0, 0.0, 0.0),
    }
}

/// Blocklength subproblem at fixed powers. `Ok(None)` when infeasible.
fn solve_blocklengths(
    problem: &AllocationProblem,
    p: &[f64],
    m_hint: Option<&[f64]>,
) -> Result<Option<(Vec<f64>, usize)>> {
    let n = problem.n_users;
    let dim = n + 1;
    let iu = n;

    let budget = |dim: usize| -> ScalarFn<'_> {
        ScalarFn::new(move |x: &[f64]| {
            let v = x[..n].iter().sum::<f64>() - problem.m_total;
            let mut grad = vec![0.0; dim];
            grad[..n].fill(1.0);
            (v, grad)
        })
        .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim])
    };
    let energy = |dim: usize| -> ScalarFn<'_> {
        let pv = p.to_vec();
        ScalarFn::new(move |x: &[f64]| {
            let mut v = -problem.e_total;
            let mut grad = vec![0.0; dim];
            for (i, &pi) in pv.iter().enumerate() {
                v += x[i] * pi;
                grad[i] = pi;
            }
            (v, grad)
        })
        .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim])
    };
    let cap = |dim: usize, i: usize| -> ScalarFn<'_> {
        let (gain, d, pi) = (problem.gain[i], problem.d_bits[i], p[i]);
        let ln_cap = problem.eps_max.ln();
        ScalarFn::new(move |x: &[f64]| {
            let (v, dv, _) = ln_eps_blocklength(x[i], gain, pi, d);
            let mut grad = vec![0.0; dim];
            grad[i] = dv;
            (v - ln_cap, grad)
        })
        .with_hessian(move |x: &[f64]| {
            let (_, _, d2) = ln_eps_blocklength(x[i], gain, pi, d);
            let mut h = vec![0.0; dim * dim];
            h[i * dim + i] = d2;
            h
        })
    };

    let mut feas_cons = vec![budget(n), energy(n)];
    for i in 0..n {
        feas_cons.push(cap(n, i));
    }
    let feas = SmoothProgram {
        dim: n,
        objective: ScalarFn::new(move |_x: &[f64]| (0.0, vec![0.0; n]))
            .with_hessian(move |_x: &[f64]| vec![0.0; n * n]),
        constraints: feas_cons,
        bounds: vec![(1.0, f64::INFINITY); n],
    };
    let hint: Vec<f64> = match m_hint {
        Some(h) => h.to_vec(),
        None => vec![(problem.m_total / n as f64).max(1.5); n],
    };
    let m0 = match solver::find_feasible(&feas, &hint) {
        Ok(m0) => m0,
        Err(Error::Infeasible { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };

    let mut cons = vec![budget(dim), energy(dim)];
    for i in 0..n {
        let (gain, d, pi) = (problem.gain[i], problem.d_bits[i], p[i]);
        cons.push(
            ScalarFn::new(move |x: &[f64]| {
                let (v, dv, _) = ln_eps_blocklength(x[i], gain, pi, d);
                let mut grad = vec![0.0; dim];
                grad[i] = dv;
                grad[iu] = -1.0;
                (v - x[iu], grad)
            })
            .with_hessian(move |x: &[f64]| {
                let (_, _, d2) = ln_eps_blocklength(x[i], gain, pi, d);
                let mut h = vec![0.0; dim * dim];
                h[i * dim + i] = d2;
                h
            }),
        );
        cons.push(cap(dim, i));
    }
    let program = SmoothProgram {
        dim,
        objective: ScalarFn::new(move |x: &[f64]| {
            let mut grad = vec![0.0; dim];
            grad[iu] = 1.0;
            (x[iu], grad)
        })
        .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim]),
        constraints: cons,
        bounds: {
            let mut b = vec![(1.0, f64::INFINITY); n];
            b.push((f64::NEG_INFINITY, f64::INFINITY));
            b
        },
    };
    let worst_ln = (0..n)
        .map(|i| ln_q(w_raw(m0[i], problem.gain[i] * p[i], problem.d_bits[i])))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut x0 = m0;
    x0.push(worst_ln + LN_2);
    let (x, stats) = solver::minimize(&program, &x0)?;
    Ok(Some((x[..n].to_vec(), stats.iterations)))
}

/// Default power initialization for the alternating search: `p_i = E/M`.
pub fn default_p_init(problem: &AllocationProblem) -> Vec<f64> {
    vec![problem.e_total / problem.m_total; problem.n_users]
}

/// Block-coordinate descent: blocklength subproblem at fixed power, then
/// power subproblem at fixed blocklength, until the max-error improvement
/// drops below 1e-9 (or 200 rounds). `stats.iterations` counts rounds;
/// `stats.barrier_stages` the accumulated Newton iterations.
pub fn solve_alternating(problem: &AllocationProblem, p_init: &[f64]) -> Result<AllocationResult> {
    let n = problem.n_users;
    if p_init.len() != n {
        return Err(Error::Usage(format!(
            "p_init has {} entries for {} users",
            p_init.len(),
            n
        )));
    }
    for i in 0..n {
        if !(p_init[i].is_finite() && p_init[i] > 0.0) {
            return Err(Error::Usage(format!("p_init[{i}] must be positive")));
        }
        if problem.gain[i] * p_init[i] < problem.gamma_th {
            return Err(Error::Usage(format!(
                "p_init[{i}] violates the SNR floor (snr {}, needs {})",
                problem.gain[i] * p_init[i],
                problem.gamma_th
            )));
        }
    }

    let mut p = p_init.to_vec();
    let mut m: Vec<f64>;
    let mut newton_total;
    // the first blocklength solve doubles as the init feasibility check
    match solve_blocklengths(problem, &p, None)? {
        Some((m0, it)) => {
            m = m0;
            newton_total = it;
        }
        None => {
            return Err(Error::Usage(
                "p_init admits no feasible blocklength completion".into(),
            ));
        }
    }

    let objective_of = |m: &[f64], p: &[f64]| -> f64 {
        (0..n)
            .map(|i| ln_q(w_raw(m[i], problem.gain[i] * p[i], problem.d_bits[i])))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut obj_ln = objective_of(&m, &p);
    let mut rounds = 0usize;
    for _ in 0..200 {
        rounds += 1;
        let prev_eps = obj_ln.exp();
        match solve_powers(problem, &m)? {
            Some(sol) => {
                newton_total += sol.iterations;
                p = sol.p;
            }
            None => break,
        }
        match solve_blocklengths(problem, &p, Some(&m))? {
            Some((m1, it)) => {
                newton_total += it;
                m = m1;
            }
            None => break,
        }
        obj_ln = objective_of(&m, &p);
        if prev_eps - obj_ln.exp() < 1e-9 {
            break;
        }
    }

    let stats = SolveStats {
        iterations: rounds,
        barrier_stages: newton_total,
        ..SolveStats::default()
    };
    Ok(finalize(problem, m, p, stats, Method::Alternating))
}

// ---------------------------------------------------------------------------
// rounding
// ---------------------------------------------------------------------------

/// Rounds a continuous allocation to integer blocklengths: evaluates the
/// floor/ceil neighborhood (all 2^N combinations for N <= 20, a greedy
/// per-user pass otherwise), re-solving the power subproblem at each
/// candidate, and keeps the best feasible one.
pub fn round_solution(
    problem: &AllocationProblem,
    result: &AllocationResult,
) -> Result<AllocationResult> {
    let n = problem.n_users;
    if result.m.len() != n || result.p.len() != n {
        return Err(Error::Usage("result does not match problem dimensions".into()));
    }
    if result.m.iter().all(|&v| v.fract() == 0.0) {
        // already integer: keep the allocation, re-verify the errors
        return Ok(finalize(
            problem,
            result.m.clone(),
            result.p.clone(),
            result.stats.clone(),
            result.method,
        ));
    }
    let m_budget = problem.m_total.floor() as u64;

    let mut best: Option<EnumBest> = None;
    let mut iterations = 0usize;
    let mut solves = 0usize;
    let mut consider = |m: Vec<u64>, best: &mut Option<EnumBest>| -> Result<()> {
        if m.iter().any(|&v| v == 0) || m.iter().sum::<u64>() > m_budget {
            return Ok(());
        }
        match ln_objective_lower_bound(problem, &m) {
            None => return Ok(()),
            Some(lb) => {
                if let Some(b) = &*best {
                    if lb > b.ln_objective {
                        return Ok(());
                    }
                }
            }
        }
        let m_f: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        solves += 1;
        if let Some(sol) = solve_powers(problem, &m_f)? {
            iterations += sol.iterations;
            let cand = EnumBest {
                ln_objective: sol.ln_objective,
                m,
                p: sol.p,
            };
            if better(&cand, best) {
                *best = Some(cand);
            }
        }
        Ok(())
    };

    if n <= 20 {
        for mask in 0u64..(1u64 << n) {
            let m: Vec<u64> = (0..n)
                .map(|i| result.m[i].floor().max(1.0) as u64 + (mask >> i & 1))
                .collect();
            consider(m, &mut best)?;
        }
    } else {
        // greedy: start from floors, ceil one user at a time while it helps
        let mut m: Vec<u64> = result.m.iter().map(|&v| v.floor().max(1.0) as u64).collect();
        consider(m.clone(), &mut best)?;
        for i in 0..n {
            if m.iter().sum::<u64>() + 1 > m_budget {
                break;
            }
            m[i] += 1;
            let before = best.as_ref().map(|b| b.ln_objective);
            consider(m.clone(), &mut best)?;
            let after = best.as_ref().map(|b| b.ln_objective);
            if before == after {
                m[i] -= 1;
            }
        }
    }

    let Some(best) = best else {
        return Err(Error::Infeasible {
            residual: f64::INFINITY,
            detail: "no feasible integer neighbor of the continuous solution".into(),
        });
    };
    let m: Vec<f64> = best.m.iter().map(|&v| v as f64).collect();
    let stats = SolveStats {
        iterations,
        barrier_stages: solves,
        ..SolveStats::default()
    };
    Ok(finalize(problem, m, best.p, stats, result.method))
}

// ---------------------------------------------------------------------------
// validation and result assembly
// ---------------------------------------------------------------------------

/// Region check for one user at the conservative corner of its feasible set.
#[derive(Debug, Clone)]
pub struct UserRegionCheck {
    pub user: usize,
    /// Corner operating point: full blocklength budget at the SNR floor
    /// (the lowest feasible coding rate and SNR).
    pub corner: LinkPoint,
    pub verdict: ConvexityVerdict,
}

/// Flags users whose worst-case corner fails both convexity certificates.
/// Advisory: solvers attach the flags but never refuse an instance.
pub fn validate(problem: &AllocationProblem) -> Result<Vec<UserRegionCheck>> {
    (0..problem.n_users)
        .map(|i| {
            let corner = LinkPoint::new(
                problem.m_total,
                problem.gamma_th / problem.gain[i],
                problem.gain[i],
                problem.d_bits[i],
            )?;
            Ok(UserRegionCheck {
                user: i,
                corner,
                verdict: region::convexity_condition(&corner, problem.eps_max, problem.gamma_th),
            })
        })
        .collect()
}

pub(crate) fn finalize(
    problem: &AllocationProblem,
    m: Vec<f64>,
    p: Vec<f64>,
    stats: SolveStats,
    method: Method,
) -> AllocationResult {
    let n = problem.n_users;
    let eps: Vec<f64> = (0..n)
        .map(|i| {
            error_probability(&LinkPoint {
                m: m[i],
                p: p[i],
                gain: problem.gain[i],
                d_bits: problem.d_bits[i],
            })
        })
        .collect();
    let objective = eps.iter().copied().fold(0.0_f64, f64::max);
    let ln_obj = (0..n)
        .map(|i| ln_q(w_raw(m[i], problem.gain[i] * p[i], problem.d_bits[i])))
        .fold(f64::NEG_INFINITY, f64::max);
    let m_used: f64 = m.iter().sum();
    let e_used: f64 = m.iter().zip(&p).map(|(mi, pi)| mi * pi).sum();
    debug_assert!(m_used <= problem.m_total * (1.0 + 1e-9));
    debug_assert!(e_used <= problem.e_total * (1.0 + 1e-9));
    let binding = Binding {
        m_budget: m_used >= problem.m_total * (1.0 - 1e-6),
        e_budget: e_used >= problem.e_total * (1.0 - 1e-6),
        eps_cap: eps.iter().map(|&e| e >= problem.eps_max * (1.0 - 1e-6)).collect(),
        snr_floor: (0..n)
            .map(|i| problem.gain[i] * p[i] <= problem.gamma_th * (1.0 + 1e-6))
            .collect(),
    };
    let out_of_region_users = validate(problem)
        .map(|checks| {
            checks
                .into_iter()
                .filter(|c| !c.verdict.cond_rate_ok && !c.verdict.cond_snr_ok)
                .map(|c| c.user)
                .collect()
        })
        .unwrap_or_default();
    AllocationResult {
        m,
        p,
        eps,
        objective,
        objective_log10: ln_obj / LN_10,
        binding,
        stats,
        method,
        out_of_region_users,
        warnings: Vec::new(),
    }
}

/// Polynomial error penalty `sum_i sum_k coeffs[i][k] * eps_i^(k+1)` with
/// non-negative coefficients, jointly convex inside the region like the
/// errors themselves. Exposed as a modeling hook; the solvers in this crate
/// exercise only the min-max and expectation objectives.
pub fn polynomial_penalty(eps: &[f64], coeffs: &[Vec<f64>]) -> Result<f64> {
    if eps.len() != coeffs.len() {
        return Err(Error::Usage(format!(
            "{} error values vs {} coefficient rows",
            eps.len(),
            coeffs.len()
        )));
    }
    let mut total = 0.0;
    for (e, row) in eps.iter().zip(coeffs) {
        if !(0.0..=1.0).contains(e) {
            return Err(Error::Domain(format!("error probability {e} outside [0,1]")));
        }
        let mut power = *e;
        for &a in row {
            if a < 0.0 {
                return Err(Error::Domain("penalty coefficients must be non-negative".into()));
            }
            total += a * power;
            power *= e;
        }
    }
    Ok(total)
}
