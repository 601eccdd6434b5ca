//! Two-hop decode-and-forward relaying.
//!
//! A packet crosses two links in sequence; the transmission fails when
//! either hop fails, so the end-to-end error is
//! `eps_o = eps_1 + eps_2 - eps_1 eps_2`. The cross term keeps `eps_o`
//! jointly convex in the per-hop `(w_1, w_2)` as long as both hops stay in
//! the reliable region (`w_i >= 1.2`, i.e. `eps_i <= 0.1`), which is what
//! [`relay_w_hessian`] certifies. [`solve_relay`] minimizes `eps_o` directly
//! (not the `eps_1 + eps_2` surrogate) under the shared blocklength and
//! energy budgets.

use crate::allocator::{
    ab_bounds, ab_resource_constraints, feasible_ab, finalize, ln_eps_ab, AllocationProblem,
    AllocationResult, Method,
};
use crate::error::{Error, Result};
use crate::fbl::{normal_pdf, q_raw};
use crate::solver::{self, ScalarFn, SmoothProgram};

/// Two-hop instance: one payload forwarded over both hops, shared budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayProblem {
    /// Payload forwarded over both hops (bits).
    pub d_bits: f64,
    /// Effective channel gain of each hop.
    pub gain: [f64; 2],
    pub m_total: f64,
    pub e_total: f64,
    pub eps_max: f64,
    pub gamma_th: f64,
}

impl RelayProblem {
    pub fn new(
        d_bits: f64,
        gain: [f64; 2],
        m_total: f64,
        e_total: f64,
        eps_max: f64,
        gamma_th: f64,
    ) -> Result<Self> {
        // same positivity and range rules as a two-user allocation
        AllocationProblem::new(
            vec![d_bits; 2],
            gain.to_vec(),
            m_total,
            e_total,
            eps_max,
            gamma_th,
        )?;
        Ok(Self {
            d_bits,
            gain,
            m_total,
            e_total,
            eps_max,
            gamma_th,
        })
    }

    /// The two-hop instance as a two-user allocation problem (the budget
    /// semantics are identical; only the objective differs).
    pub fn as_allocation(&self) -> AllocationProblem {
        AllocationProblem {
            n_users: 2,
            d_bits: vec![self.d_bits; 2],
            gain: self.gain.to_vec(),
            m_total: self.m_total,
            e_total: self.e_total,
            eps_max: self.eps_max,
            gamma_th: self.gamma_th,
        }
    }
}

/// End-to-end error of two hops in series.
pub fn overall_error(eps1: f64, eps2: f64) -> Result<f64> {
    for e in [eps1, eps2] {
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::Domain(format!("hop error {e} outside [0,1]")));
        }
    }
    Ok(eps1 + eps2 - eps1 * eps2)
}

/// Hessian of `eps_o` over the Q-function arguments `(w_1, w_2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelayHessian {
    pub h11: f64,
    pub h22: f64,
    pub h12: f64,
}

impl RelayHessian {
    pub fn det(&self) -> f64 {
        self.h11 * self.h22 - self.h12 * self.h12
    }

    pub fn trace(&self) -> f64 {
        self.h11 + self.h22
    }
}

/// Curvature of the end-to-end error in `(w_1, w_2)`:
/// diagonal `(1 - Q(w_j)) w_i phi(w_i)`, off-diagonal `-phi(w_1) phi(w_2)`.
/// Only certified on `w_i >= 1.2` (both hop errors at most ~0.1).
pub fn relay_w_hessian(w1: f64, w2: f64) -> Result<RelayHessian> {
    if !(w1 >= 1.2 && w2 >= 1.2) {
        return Err(Error::Region(format!(
            "relay curvature is certified for w >= 1.2 only, got ({w1}, {w2})"
        )));
    }
    Ok(RelayHessian {
        h11: (1.0 - q_raw(w2)) * w1 * normal_pdf(w1),
        h22: (1.0 - q_raw(w1)) * w2 * normal_pdf(w2),
        h12: -normal_pdf(w1) * normal_pdf(w2),
    })
}

/// `ln eps_o` with gradient and Hessian over `(a1, b1, a2, b2)`, assembled
/// in log space so hop errors far below f64 underflow stay exact.
fn ln_overall(problem: &RelayProblem, x: &[f64]) -> (f64, [f64; 4], [[f64; 4]; 4]) {
    let e1 = ln_eps_ab(x[0], x[1], problem.gain[0], problem.d_bits);
    let e2 = ln_eps_ab(x[2], x[3], problem.gain[1], problem.d_bits);
    let (l1, l2) = (e1.val, e2.val);
    let (lmax, lmin) = if l1 >= l2 { (l1, l2) } else { (l2, l1) };
    // eps_o = e^lmax (1 + e^{lmin-lmax} - e^{lmin})
    let val = lmax + ((lmin - lmax).exp() - lmin.exp()).ln_1p();
    // s_i = d val / d l_i = e^{l_i - val} (1 - e^{l_j})
    let s1 = (l1 - val).exp() * (-l2.exp_m1());
    let s2 = (l2 - val).exp() * (-l1.exp_m1());
    let q = (l1 + l2 - val).exp();

    let g1 = [e1.da, e1.db, 0.0, 0.0];
    let g2 = [0.0, 0.0, e2.da, e2.db];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = s1 * g1[k] + s2 * g2[k];
    }

    // curvature in (l1, l2) plus the per-hop curvature of each l_i
    let c11 = s1 * (1.0 - s1);
    let c22 = s2 * (1.0 - s2);
    let c12 = -s1 * s2 - q;
    let mut h = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            h[r][c] = c11 * g1[r] * g1[c]
                + c22 * g2[r] * g2[c]
                + c12 * (g1[r] * g2[c] + g2[r] * g1[c]);
        }
    }
    h[0][0] += s1 * e1.daa;
    h[0][1] += s1 * e1.dab;
    h[1][0] += s1 * e1.dab;
    h[1][1] += s1 * e1.dbb;
    h[2][2] += s2 * e2.daa;
    h[2][3] += s2 * e2.dab;
    h[3][2] += s2 * e2.dab;
    h[3][3] += s2 * e2.dbb;
    (val, grad, h)
}

/// Joint two-hop allocation minimizing the end-to-end error under the shared
/// budgets, through the same `(a, b)` substitution as the allocator. The
/// result reuses [`AllocationResult`] with `objective = eps_o`.
pub fn solve_relay(problem: &RelayProblem) -> Result<AllocationResult> {
    let alloc = problem.as_allocation();
    let x0 = feasible_ab(&alloc)?;

    let program = SmoothProgram {
        dim: 4,
        objective: ScalarFn::new(|x: &[f64]| {
            let (v, g, _) = ln_overall(problem, x);
            (v, g.to_vec())
        })
        .with_hessian(|x: &[f64]| {
            let (_, _, h) = ln_overall(problem, x);
            h.iter().flatten().copied().collect()
        }),
        constraints: ab_resource_constraints(&alloc, 4),
        bounds: ab_bounds(2, 0),
    };
    let (x, stats) = solver::minimize(&program, &x0)?;

    let m = vec![1.0 / x[0], 1.0 / x[2]];
    let p = vec![x[1] * x[1], x[3] * x[3]];
    let mut out = finalize(&alloc, m, p, stats, Method::Relay);
    // the reported objective is the end-to-end error, not max eps_i
    out.objective = overall_error(out.eps[0], out.eps[1])?;
    let (ln_eo, _, _) = ln_overall(problem, &x);
    out.objective_log10 = ln_eo / std::f64::consts::LN_10;
    if problem.eps_max > 0.1 {
        out.warnings.push(format!(
            "eps_max {} exceeds the certified region of the cross-term curvature (needs <= 0.1)",
            problem.eps_max
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbl::{error_probability, LinkPoint};
    use crate::region::convexity_condition;
    use crate::rng::SeededUniform;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vi_relay(gain2: f64) -> RelayProblem {
        RelayProblem::new(480.0, [100.0, gain2], 800.0, 2400.0, 0.1, 1.0).unwrap()
    }

    #[test]
    fn overall_error_examples() {
        assert_eq!(overall_error(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(overall_error(1.0, 0.3).unwrap(), 1.0);
        assert_eq!(overall_error(0.7, 1.0).unwrap(), 1.0);
        assert_relative_eq!(overall_error(0.05, 0.05).unwrap(), 0.0975, max_relative = 1e-14);
        assert!(overall_error(-0.1, 0.5).is_err());
        assert!(overall_error(0.1, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn overall_error_bounds(e1 in 0.0..=1.0f64, e2 in 0.0..=1.0f64) {
            let eo = overall_error(e1, e2).unwrap();
            prop_assert!(eo >= e1.max(e2) - 1e-15);
            prop_assert!(eo <= e1 + e2 + 1e-15);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&eo));
            // symmetry
            prop_assert_eq!(eo, overall_error(e2, e1).unwrap());
            // the gap to the additive surrogate is exactly the cross term
            prop_assert!(((e1 + e2) - eo - e1 * e2).abs() <= 1e-15);
        }
    }

    #[test]
    fn hessian_reference_values() {
        let h = relay_w_hessian(2.0, 2.0).unwrap();
        assert_relative_eq!(h.h11, 0.1055253298, max_relative = 1e-9);
        assert_relative_eq!(h.h12, -0.002915024465, max_relative = 1e-9);
        assert_relative_eq!(h.det(), 0.01112709786, max_relative = 1e-9);
        assert!(h.h11 > 0.0 && h.h22 > 0.0 && h.det() > 0.0);
        // proof-region boundary
        let hb = relay_w_hessian(1.2, 1.2).unwrap();
        assert_relative_eq!(hb.h11, 0.2062093556, max_relative = 1e-9);
        assert_relative_eq!(hb.h12, -0.03770822395, max_relative = 1e-9);
        assert!(hb.det() >= 0.0);
        assert!(relay_w_hessian(1.0, 2.0).is_err());
    }

    #[test]
    fn hessian_symmetry_under_swap() {
        let a = relay_w_hessian(1.7, 3.1).unwrap();
        let b = relay_w_hessian(3.1, 1.7).unwrap();
        assert_eq!(a.h11, b.h22);
        assert_eq!(a.h22, b.h11);
        assert_eq!(a.h12, b.h12);
        assert_eq!(a.det(), b.det());
    }

    #[test]
    fn hessian_matches_finite_differences_of_composition() {
        // d2 of Q(w1)+Q(w2)-Q(w1)Q(w2) vs the closed form
        let eo = |w1: f64, w2: f64| {
            let (q1, q2) = (q_raw(w1), q_raw(w2));
            q1 + q2 - q1 * q2
        };
        let (w1, w2) = (2.0, 2.6);
        let h = relay_w_hessian(w1, w2).unwrap();
        let s = 1e-4;
        let fd11 = (eo(w1 + s, w2) - 2.0 * eo(w1, w2) + eo(w1 - s, w2)) / (s * s);
        let fd22 = (eo(w1, w2 + s) - 2.0 * eo(w1, w2) + eo(w1, w2 - s)) / (s * s);
        let fd12 = (eo(w1 + s, w2 + s) - eo(w1 + s, w2 - s) - eo(w1 - s, w2 + s)
            + eo(w1 - s, w2 - s))
            / (4.0 * s * s);
        assert_relative_eq!(h.h11, fd11, max_relative = 1e-6);
        assert_relative_eq!(h.h22, fd22, max_relative = 1e-6);
        assert_relative_eq!(h.h12, fd12, max_relative = 1e-6);
    }

    #[test]
    fn psd_over_certified_region() {
        for i in 0..=20 {
            for j in 0..=20 {
                let w1 = 1.2 + 8.8 * i as f64 / 20.0;
                let w2 = 1.2 + 8.8 * j as f64 / 20.0;
                let h = relay_w_hessian(w1, w2).unwrap();
                assert!(h.det() >= 0.0, "det < 0 at ({w1}, {w2})");
                assert!(h.trace() >= 0.0);
            }
        }
    }

    #[test]
    fn equal_gains_split_symmetrically() {
        let result = solve_relay(&vi_relay(100.0)).unwrap();
        assert!((result.m[0] / result.m[1] - 1.0).abs() <= 1e-3);
        assert!((result.p[0] / result.p[1] - 1.0).abs() <= 1e-3);
        assert!(result.binding.m_budget && result.binding.e_budget);
        // cross-term gap: 0 <= eps1*eps2 <= eps_max^2
        let gap = result.eps[0] * result.eps[1];
        assert!(gap >= 0.0 && gap <= 0.1 * 0.1);
        assert!(result.warnings.is_empty());
    }

    #[test]
    fn weaker_hop_receives_more_resources() {
        // hop 2 four times stronger: hop 1 gets more blocklength and energy
        let result = solve_relay(&vi_relay(400.0)).unwrap();
        assert!(result.m[0] > result.m[1]);
        assert!(result.m[0] * result.p[0] > result.m[1] * result.p[1]);

        // 2-D grid oracle on the active-budget manifold, refined twice
        let objective = |m1: f64, p1: f64| -> f64 {
            let m2 = 800.0 - m1;
            let p2 = (2400.0 - m1 * p1) / m2;
            if p2 <= 0.0 {
                return f64::INFINITY;
            }
            let e1 = error_probability(&LinkPoint { m: m1, p: p1, gain: 100.0, d_bits: 480.0 });
            let e2 = error_probability(&LinkPoint { m: m2, p: p2, gain: 400.0, d_bits: 480.0 });
            e1 + e2 - e1 * e2
        };
        let (mut m_lo, mut m_hi, mut p_lo, mut p_hi) = (300.0, 700.0, 1.0, 6.0);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for _pass in 0..3 {
            for i in 0..=200 {
                for j in 0..=200 {
                    let m1 = m_lo + (m_hi - m_lo) * i as f64 / 200.0;
                    let p1 = p_lo + (p_hi - p_lo) * j as f64 / 200.0;
                    let v = objective(m1, p1);
                    if v < best.0 {
                        best = (v, m1, p1);
                    }
                }
            }
            let dm = (m_hi - m_lo) / 200.0;
            let dp = (p_hi - p_lo) / 200.0;
            m_lo = best.1 - 2.0 * dm;
            m_hi = best.1 + 2.0 * dm;
            p_lo = best.2 - 2.0 * dp;
            p_hi = best.2 + 2.0 * dp;
        }
        assert_relative_eq!(result.objective, best.0, max_relative = 1e-3);
        assert_relative_eq!(result.m[0], best.1, max_relative = 1e-3);
    }

    #[test]
    fn beats_balanced_split_heuristic() {
        for gain2 in [50.0, 100.0, 250.0] {
            let problem = vi_relay(gain2);
            let result = solve_relay(&problem).unwrap();
            // m1 = m2 = M/2, energy split proportional to 1/gain
            let m = 400.0;
            let w = [1.0 / problem.gain[0], 1.0 / gain2];
            let etot: f64 = 2400.0;
            let e1 = etot * w[0] / (w[0] + w[1]);
            let eps = |gain: f64, e: f64| {
                error_probability(&LinkPoint { m, p: e / m, gain, d_bits: 480.0 })
            };
            let heuristic =
                overall_error(eps(problem.gain[0], e1), eps(gain2, etot - e1)).unwrap();
            assert!(result.objective <= heuristic * (1.0 + 1e-9));
        }
    }

    #[test]
    fn infeasible_when_budgets_too_small() {
        // two hops cannot both reach eps_max at these budgets
        let problem = RelayProblem::new(480.0, [1.0, 1.0], 900.0, 950.0, 0.1, 1.0).unwrap();
        assert!(matches!(solve_relay(&problem), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn end_to_end_convexity_spot_check() {
        // finite-difference Hessian of eps_o over (m1,p1,m2,p2) at random
        // in-region points is numerically PSD
        let mut rng = SeededUniform::new(1203);
        let mut checked = 0;
        while checked < 50 {
            let m1 = rng.range(300.0, 1200.0);
            let m2 = rng.range(300.0, 1200.0);
            let g1 = rng.range(1.5, 6.0);
            let g2 = rng.range(1.5, 6.0);
            let d = 480.0;
            let p1 = LinkPoint { m: m1, p: g1, gain: 1.0, d_bits: d };
            let p2 = LinkPoint { m: m2, p: g2, gain: 1.0, d_bits: d };
            let v1 = convexity_condition(&p1, 0.1, 1.0);
            let v2 = convexity_condition(&p2, 0.1, 1.0);
            if !(v1.in_region && v2.in_region) {
                continue;
            }
            if v1.eps < 1e-8 || v2.eps < 1e-8 {
                continue; // flat to f64; nothing to measure
            }
            let f = |x: &[f64; 4]| {
                let e1 = error_probability(&LinkPoint { m: x[0], p: x[1], gain: 1.0, d_bits: d });
                let e2 = error_probability(&LinkPoint { m: x[2], p: x[3], gain: 1.0, d_bits: d });
                e1 + e2 - e1 * e2
            };
            let x = [m1, g1, m2, g2];
            let mut h = nalgebra::DMatrix::zeros(4, 4);
            for r in 0..4 {
                for c in 0..4 {
                    let (hr, hc) = (1e-4 * x[r], 1e-4 * x[c]);
                    let mut xs = x;
                    let val = if r == c {
                        xs[r] = x[r] + hr;
                        let fp = f(&xs);
                        xs[r] = x[r] - hr;
                        let fm = f(&xs);
                        (fp - 2.0 * f(&x) + fm) / (hr * hr)
                    } else {
                        xs[r] = x[r] + hr;
                        xs[c] = x[c] + hc;
                        let fpp = f(&xs);
                        xs[c] = x[c] - hc;
                        let fpm = f(&xs);
                        xs[r] = x[r] - hr;
                        let fmm = f(&xs);
                        xs[c] = x[c] + hc;
                        let fmp = f(&xs);
                        (fpp - fpm - fmp + fmm) / (4.0 * hr * hc)
                    };
                    h[(r, c)] = val;
                }
            }
            let h = 0.5 * (&h + h.transpose());
            let trace = h.trace();
            let eig = h.symmetric_eigenvalues();
            let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(
                min_eig >= -1e-8 * (1.0 + trace.abs()),
                "min eig {min_eig} at {x:?}"
            );
            checked += 1;
        }
    }
}
