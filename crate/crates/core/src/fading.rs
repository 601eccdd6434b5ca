//! Quasi-static fading: expected error over a channel-gain distribution.
//!
//! Two CSI regimes. With per-realization CSI the link adapts blocklength and
//! power to the current gain, so the expectation runs over a quantile
//! discretization of the gain ([`quantize`], [`expected_error_csi`],
//! [`solve_per_state`]); states too weak to decode even at full resources are
//! dropped and count as errors. With average CSI only, one fixed `(m, p)`
//! pair must serve every realization ([`expected_error_avg`],
//! [`solve_avg_csi`]); no drop rule applies because a fixed policy cannot
//! adapt, the packet is simply sent and fails with `eps(z)`.
//!
//! [`monte_carlo_error`] is the seeded sampling cross-check for both
//! expectations.

use crate::allocator;
use crate::error::{Error, Result};
use crate::exec;
use crate::fbl::{error_probability, normal_pdf, q_raw, w_raw, LinkPoint};
use crate::rng::SeededUniform;
use crate::solver::{self, ScalarFn, SmoothProgram};

/// Channel-gain (power) distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum FadingModel {
    /// Gain `z = |h|^2` exponentially distributed with the given mean
    /// (Rayleigh amplitude fading).
    RayleighPower { mean: f64 },
    /// Deterministic gain.
    PointMass { z: f64 },
    /// Density samples `(z, pdf)`; validated to integrate to 1 by trapezoid.
    Tabulated { z: Vec<f64>, pdf: Vec<f64> },
}

impl FadingModel {
    pub fn rayleigh_power(mean: f64) -> Result<Self> {
        if !(mean.is_finite() && mean > 0.0) {
            return Err(Error::Model(format!("rayleigh mean must be positive, got {mean}")));
        }
        Ok(Self::RayleighPower { mean })
    }

    pub fn point_mass(z: f64) -> Result<Self> {
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::Model(format!("point mass must be positive, got {z}")));
        }
        Ok(Self::PointMass { z })
    }

    pub fn tabulated(z: Vec<f64>, pdf: Vec<f64>) -> Result<Self> {
        if z.len() != pdf.len() || z.len() < 2 {
            return Err(Error::Model("tabulated model needs matching z/pdf samples".into()));
        }
        if z.windows(2).any(|w| w[1] <= w[0]) || z[0] < 0.0 {
            return Err(Error::Model("tabulated z grid must be non-negative and increasing".into()));
        }
        if pdf.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Model("tabulated pdf must be non-negative".into()));
        }
        let total = trapezoid_total(&z, &pdf);
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Model(format!(
                "tabulated pdf integrates to {total}, must be 1 within 1e-9"
            )));
        }
        Ok(Self::Tabulated { z, pdf })
    }

    /// Inverse CDF at probability `u` in [0, 1).
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&u) {
            return Err(Error::Domain(format!("quantile argument must lie in [0,1), got {u}")));
        }
        match self {
            Self::RayleighPower { mean } => Ok(-mean * (-u).ln_1p()),
            Self::PointMass { z } => Ok(*z),
            Self::Tabulated { z, pdf } => {
                let cdf = trapezoid_cdf(z, pdf);
                tabulated_quantile(z, &cdf, u)
            }
        }
    }
}

fn trapezoid_total(z: &[f64], pdf: &[f64]) -> f64 {
    z.windows(2)
        .zip(pdf.windows(2))
        .map(|(zs, ps)| 0.5 * (ps[0] + ps[1]) * (zs[1] - zs[0]))
        .sum()
}

fn trapezoid_cdf(z: &[f64], pdf: &[f64]) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(z.len());
    let mut acc = 0.0;
    cdf.push(0.0);
    for k in 1..z.len() {
        acc += 0.5 * (pdf[k - 1] + pdf[k]) * (z[k] - z[k - 1]);
        cdf.push(acc);
    }
    cdf
}

fn tabulated_quantile(z: &[f64], cdf: &[f64], u: f64) -> Result<f64> {
    let total = *cdf.last().unwrap();
    if u > total {
        return Err(Error::Model(format!(
            "quantile {u} exceeds the tabulated support (mass {total})"
        )));
    }
    let k = cdf.partition_point(|&c| c < u).max(1);
    let (c0, c1) = (cdf[k - 1], cdf[k]);
    let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
    Ok(z[k - 1] + t * (z[k] - z[k - 1]))
}

/// Equal-mass discretization of a fading model: Φ states at the quantiles
/// `(φ - 1/2)/Φ`, each carrying probability 1/Φ.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChannel {
    /// Gain states, ascending.
    pub states: Vec<f64>,
    /// Gains below this threshold are dropped (counted as a full error).
    pub z_th: f64,
}

impl QuantizedChannel {
    pub fn phi(&self) -> usize {
        self.states.len()
    }

    /// Probability mass of each state.
    pub fn weight(&self) -> f64 {
        1.0 / self.states.len() as f64
    }

    pub fn with_drop_threshold(mut self, z_th: f64) -> Self {
        self.z_th = z_th;
        self
    }
}

/// Gain below which a packet cannot be decoded even at full resources:
/// `z_th = sigma^2 (2^(D/M_max) - 1) / P_max`.
pub fn z_threshold(d_bits: f64, m_max: f64, p_max: f64, sigma2: f64) -> f64 {
    sigma2 * ((d_bits / m_max) * crate::fbl::LN_2).exp_m1() / p_max
}

/// Quantile (inverse-CDF) discretization with Φ equal-mass states.
pub fn quantize(model: &FadingModel, phi: usize) -> Result<QuantizedChannel> {
    if phi == 0 {
        return Err(Error::Usage("quantization needs at least one state".into()));
    }
    let states = (1..=phi)
        .map(|k| model.quantile((k as f64 - 0.5) / phi as f64))
        .collect::<Result<Vec<f64>>>()?;
    Ok(QuantizedChannel { states, z_th: 0.0 })
}

/// Per-state allocation: `m[phi]`, `p[phi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePolicy {
    pub m: Vec<f64>,
    pub p: Vec<f64>,
}

/// Expected error of a per-state policy over a quantized channel. States
/// below the drop threshold contribute a full error.
pub fn expected_error_csi(
    channel: &QuantizedChannel,
    policy: &StatePolicy,
    d_bits: f64,
    sigma2: f64,
) -> Result<f64> {
    let phi = channel.phi();
    if policy.m.len() != phi || policy.p.len() != phi {
        return Err(Error::Usage(format!(
            "policy length {} does not match {} channel states",
            policy.m.len(),
            phi
        )));
    }
    let mut sum = 0.0;
    for (k, &z) in channel.states.iter().enumerate() {
        sum += if z < channel.z_th {
            1.0
        } else {
            error_probability(&LinkPoint {
                m: policy.m[k],
                p: policy.p[k],
                gain: z / sigma2,
                d_bits,
            })
        };
    }
    Ok(sum / phi as f64)
}

/// Error probability and derivatives in `(a, b)` coordinates (plain eps
/// space; the per-state objective is a weighted sum, not an epigraph).
struct EpsAb {
    val: f64,
    da: f64,
    db: f64,
    daa: f64,
    dab: f64,
    dbb: f64,
}

fn eps_ab(a: f64, b: f64, gain: f64, d_bits: f64) -> EpsAb {
    let m = 1.0 / a;
    let gamma = gain * (b * b);
    let w = w_raw(m, gamma, d_bits);
    if !w.is_finite() {
        let val = if w > 0.0 { 0.0 } else { 1.0 };
        return EpsAb { val, da: 0.0, db: 0.0, daa: 0.0, dab: 0.0, dbb: 0.0 };
    }
    let curv = crate::fbl::w_derivatives_raw(m, gamma, d_bits);
    let pdf = normal_pdf(w);
    let a2 = a * a;
    let w_a = -curv.dw_dm / a2;
    let w_b = 2.0 * gain * b * curv.dw_dgamma;
    let w_aa = curv.d2w_dm2 / (a2 * a2) + 2.0 * curv.dw_dm / (a2 * a);
    let w_bb = 4.0 * gain * gain * b * b * curv.d2w_dgamma2 + 2.0 * gain * curv.dw_dgamma;
    let w_ab = -2.0 * gain * b * curv.d2w_dmdgamma / a2;
    EpsAb {
        val: q_raw(w),
        da: -pdf * w_a,
        db: -pdf * w_b,
        daa: pdf * (w * w_a * w_a - w_aa),
        dab: pdf * (w * w_a * w_b - w_ab),
        dbb: pdf * (w * w_b * w_b - w_bb),
    }
}

/// Minimizes the expected error over per-state blocklengths and powers under
/// average budgets `sum m(phi)/Φ <= m_bar` and `sum m(phi) p(phi)/Φ <= e_bar`.
///
/// Below-threshold states stay in the decision vector with their error pinned
/// at 1 (zero objective gradient); the optimizer starves them of resources
/// through the budget terms alone.
pub fn solve_per_state(
    channel: &QuantizedChannel,
    d_bits: f64,
    sigma2: f64,
    m_bar: f64,
    e_bar: f64,
    eps_max: f64,
    gamma_th: f64,
) -> Result<StatePolicy> {
    let phi = channel.phi();
    if phi == 0 {
        return Err(Error::Usage("empty channel".into()));
    }
    if !(m_bar > 0.0 && e_bar > 0.0) {
        return Err(Error::Infeasible {
            residual: f64::INFINITY,
            detail: "budgets must be positive".into(),
        });
    }
    let n = phi;
    let gains: Vec<f64> = channel.states.iter().map(|&z| z / sigma2).collect();
    let live: Vec<bool> = channel.states.iter().map(|&z| z >= channel.z_th).collect();

    // budgets scaled by Φ so the constraint set matches the allocator's form
    let alloc_like = allocator::AllocationProblem {
        n_users: n,
        d_bits: vec![d_bits; n],
        gain: gains.clone(),
        m_total: m_bar * phi as f64,
        e_total: e_bar * phi as f64,
        eps_max,
        gamma_th,
    };

    let mk_constraints = |dim: usize| -> Vec<ScalarFn<'_>> {
        let mut cons: Vec<ScalarFn<'_>> = Vec::new();
        // the two budget constraints from the allocator builder
        cons.extend(
            allocator::ab_resource_constraints(&alloc_like, dim)
                .into_iter()
                .take(2),
        );
        // per live state: error cap (log space) and SNR floor
        for i in 0..n {
            if !live[i] {
                continue;
            }
            let gain = gains[i];
            let ln_cap = eps_max.ln();
            cons.push(
                ScalarFn::new(move |x: &[f64]| {
                    let e = allocator::ln_eps_ab(x[i], x[n + i], gain, d_bits);
                    let mut grad = vec![0.0; dim];
                    grad[i] = e.da;
                    grad[n + i] = e.db;
                    (e.val - ln_cap, grad)
                })
                .with_hessian(move |x: &[f64]| {
                    let e = allocator::ln_eps_ab(x[i], x[n + i], gain, d_bits);
                    let mut h = vec![0.0; dim * dim];
                    h[i * dim + i] = e.daa;
                    h[i * dim + (n + i)] = e.dab;
                    h[(n + i) * dim + i] = e.dab;
                    h[(n + i) * dim + (n + i)] = e.dbb;
                    h
                }),
            );
            let b_floor = (gamma_th / gain).sqrt();
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
    };

    let dim = 2 * n;
    let feas = SmoothProgram {
        dim,
        objective: ScalarFn::new(move |_x: &[f64]| (0.0, vec![0.0; dim]))
            .with_hessian(move |_x: &[f64]| vec![0.0; dim * dim]),
        constraints: mk_constraints(dim),
        bounds: allocator::ab_bounds(n, 0),
    };
    let mut hint = Vec::with_capacity(dim);
    hint.extend(std::iter::repeat((1.0 / m_bar.max(1.5)).min(0.99)).take(n));
    hint.extend(std::iter::repeat((e_bar / m_bar).sqrt()).take(n));
    let x0 = solver::find_feasible(&feas, &hint)?;

    let weight = 1.0 / phi as f64;
    let live_ref = &live;
    let gains_ref = &gains;
    let program = SmoothProgram {
        dim,
        objective: ScalarFn::new(move |x: &[f64]| {
            let mut v = 0.0;
            let mut grad = vec![0.0; dim];
            for i in 0..n {
                if !live_ref[i] {
                    v += weight; // pinned at a full error, zero slope
                    continue;
                }
                let e = eps_ab(x[i], x[n + i], gains_ref[i], d_bits);
                v += weight * e.val;
                grad[i] = weight * e.da;
                grad[n + i] = weight * e.db;
            }
            (v, grad)
        })
        .with_hessian(move |x: &[f64]| {
            let mut h = vec![0.0; dim * dim];
            for i in 0..n {
                if !live_ref[i] {
                    continue;
                }
                let e = eps_ab(x[i], x[n + i], gains_ref[i], d_bits);
                h[i * dim + i] = weight * e.daa;
                h[i * dim + (n + i)] = weight * e.dab;
                h[(n + i) * dim + i] = weight * e.dab;
                h[(n + i) * dim + (n + i)] = weight * e.dbb;
            }
            h
        }),
        constraints: mk_constraints(dim),
        bounds: allocator::ab_bounds(n, 0),
    };
    let (x, _stats) = solver::minimize(&program, &x0)?;
    Ok(StatePolicy {
        m: (0..n).map(|i| 1.0 / x[i]).collect(),
        p: (0..n).map(|i| x[n + i] * x[n + i]).collect(),
    })
}

/// Expected error of one fixed `(m, p)` over the fading distribution,
/// integrated by the midpoint quantile rule with `quad_points` nodes.
/// No drop rule: the raw `eps(z)` applies for every gain.
pub fn expected_error_avg(
    model: &FadingModel,
    m: f64,
    p: f64,
    d_bits: f64,
    sigma2: f64,
    quad_points: usize,
) -> Result<f64> {
    if quad_points < 16 {
        return Err(Error::Usage(format!(
            "quadrature needs at least 16 nodes, got {quad_points}"
        )));
    }
    let k = quad_points;
    let mut sum = 0.0;
    for j in 1..=k {
        let z = model.quantile((j as f64 - 0.5) / k as f64)?;
        sum += error_probability(&LinkPoint { m, p, gain: z / sigma2, d_bits });
    }
    Ok(sum / k as f64)
}

const GOLDEN_INV: f64 = 0.618_033_988_749_894_9;

fn golden_min(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut x1 = hi - GOLDEN_INV * (hi - lo);
    let mut x2 = lo + GOLDEN_INV * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > 1e-9 * (1.0 + hi.abs()) {
        if f1 > f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN_INV * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN_INV * (hi - lo);
            f1 = f(x1);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Fixed-allocation design under average CSI: coordinate descent with
/// golden-section line minimizations, exploiting per-variable convexity of
/// the expected error. The search is confined to the box
/// `m_range x p_range` intersected with the energy budget `m p <= e_bar`.
pub fn solve_avg_csi(
    model: &FadingModel,
    d_bits: f64,
    sigma2: f64,
    m_range: (f64, f64),
    p_range: (f64, f64),
    e_bar: f64,
    quad_points: usize,
) -> Result<(f64, f64)> {
    let (m_lo, m_hi) = m_range;
    let (p_lo, p_hi) = p_range;
    if !(m_lo > 0.0 && m_hi > m_lo && p_lo > 0.0 && p_hi > p_lo) {
        return Err(Error::Usage("ranges must be positive and ordered".into()));
    }
    if m_lo * p_lo > e_bar {
        return Err(Error::Infeasible {
            residual: m_lo * p_lo - e_bar,
            detail: "energy budget excludes the whole search box".into(),
        });
    }
    let objective = |m: f64, p: f64| -> f64 {
        expected_error_avg(model, m, p, d_bits, sigma2, quad_points)
            .expect("quad_points validated above")
    };
    let mut m = m_lo.max((e_bar / p_hi).min(m_hi) * 0.9).max(m_lo);
    let mut p = (e_bar / m).min(p_hi).max(p_lo) * 0.9_f64.max(p_lo / p_hi);
    if m * p > e_bar {
        p = (e_bar / m) * 0.99;
    }
    let mut prev = objective(m, p);
    for _ in 0..100 {
        let m_cap = m_hi.min(e_bar / p);
        (m, _) = golden_min(m_lo, m_cap, |x| objective(x, p));
        let p_cap = p_hi.min(e_bar / m);
        let (p_new, val) = golden_min(p_lo, p_cap, |x| objective(m, x));
        p = p_new;
        if (prev - val).abs() < 1e-9 {
            prev = val;
            break;
        }
        prev = val;
    }
    let _ = prev;
    Ok((m, p))
}

/// Monte-Carlo estimate of the expected error under a fixed `(m, p)`.
///
/// Deterministic for a fixed seed and any thread count: samples split over
/// 64 fixed shards, shard seeds drawn in order from the master stream, and
/// partial sums recombined in shard order.
pub fn monte_carlo_error(
    model: &FadingModel,
    m: f64,
    p: f64,
    d_bits: f64,
    sigma2: f64,
    n_samples: usize,
    seed: u64,
) -> f64 {
    const SHARDS: usize = 64;
    let mut master = SeededUniform::new(seed);
    let shard_seeds: Vec<u64> = (0..SHARDS).map(|_| master.next_u64()).collect();
    let base = n_samples / SHARDS;
    let extra = n_samples % SHARDS;
    let partials = exec::map_range(SHARDS, |k| {
        let count = base + usize::from(k < extra);
        let mut rng = SeededUniform::new(shard_seeds[k]);
        let mut sum = 0.0;
        for _ in 0..count {
            let z = model
                .quantile(rng.next_f64())
                .expect("quantile of u in [0,1) cannot fail");
            sum += error_probability(&LinkPoint { m, p, gain: z / sigma2, d_bits });
        }
        sum
    });
    partials.iter().sum::<f64>() / n_samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const SIGMA2: f64 = 0.01;

    fn rayleigh() -> FadingModel {
        FadingModel::rayleigh_power(1.0).unwrap()
    }

    // reference value for the rayleigh benchmark E[eps] at m = 520,
    // p = 0.02 (mean SNR 2), D = 480, computed with 50-digit quadrature
    const BENCH_EXPECTATION: f64 = 0.36148964972878735;

    #[test]
    fn z_threshold_reference() {
        assert_relative_eq!(
            z_threshold(480.0, 800.0, 3.0, 0.01),
            0.0017190552217013269,
            max_relative = 1e-12
        );
        // D/M_max = 1 and P_max = sigma^2 gives exactly 1
        assert_relative_eq!(z_threshold(800.0, 800.0, 0.01, 0.01), 1.0, max_relative = 1e-14);
        // monotone in payload and blocklength
        let base = z_threshold(480.0, 800.0, 3.0, 0.01);
        assert!(z_threshold(528.0, 800.0, 3.0, 0.01) > base);
        assert!(z_threshold(480.0, 880.0, 3.0, 0.01) < base);
    }

    #[test]
    fn quantize_exponential_reference() {
        let single = quantize(&rayleigh(), 1).unwrap();
        assert_relative_eq!(single.states[0], std::f64::consts::LN_2, max_relative = 1e-14);
        let four = quantize(&rayleigh(), 4).unwrap();
        let expect = [
            0.13353139262452262,
            0.47000362924573555,
            0.98082925301172624,
            2.0794415416798359,
        ];
        for (s, e) in four.states.iter().zip(expect) {
            assert_relative_eq!(*s, e, max_relative = 1e-12);
        }
        assert_eq!(four.weight(), 0.25);
        // point mass quantizes to copies of itself
        let pm = quantize(&FadingModel::point_mass(0.7).unwrap(), 5).unwrap();
        assert!(pm.states.iter().all(|&z| z == 0.7));
        assert!(matches!(quantize(&rayleigh(), 0), Err(Error::Usage(_))));
    }

    #[test]
    fn tabulated_model_validation_and_quantiles() {
        // triangle density on [0, 2]
        let z: Vec<f64> = (0..=100).map(|k| 2.0 * k as f64 / 100.0).collect();
        let pdf: Vec<f64> = z.iter().map(|&x| 1.0 - (x - 1.0_f64).abs()).collect();
        let model = FadingModel::tabulated(z.clone(), pdf).unwrap();
        let med = model.quantile(0.5).unwrap();
        assert_relative_eq!(med, 1.0, max_relative = 1e-3);
        // quantiles are monotone
        let mut prev = 0.0;
        for k in 1..20 {
            let q = model.quantile(k as f64 / 20.0).unwrap();
            assert!(q >= prev);
            prev = q;
        }
        // badly normalized pdf is rejected
        let bad: Vec<f64> = z.iter().map(|_| 1.0).collect();
        assert!(matches!(
            FadingModel::tabulated(z, bad),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn expected_error_csi_drop_rule() {
        let chan = quantize(&rayleigh(), 16).unwrap().with_drop_threshold(f64::INFINITY);
        let policy = StatePolicy { m: vec![500.0; 16], p: vec![1.0; 16] };
        assert_eq!(expected_error_csi(&chan, &policy, 480.0, SIGMA2).unwrap(), 1.0);
    }

    #[test]
    fn expected_error_csi_point_mass_degenerates() {
        let chan = quantize(&FadingModel::point_mass(1.0).unwrap(), 1).unwrap();
        let policy = StatePolicy { m: vec![520.0], p: vec![0.01] };
        let direct = error_probability(&LinkPoint { m: 520.0, p: 0.01, gain: 100.0, d_bits: 480.0 });
        assert_eq!(expected_error_csi(&chan, &policy, 480.0, SIGMA2).unwrap(), direct);
        // length mismatch is a usage error
        let bad = StatePolicy { m: vec![520.0, 300.0], p: vec![0.01, 0.01] };
        assert!(matches!(
            expected_error_csi(&chan, &bad, 480.0, SIGMA2),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn quantized_expectation_matches_quadrature_and_monte_carlo() {
        let chan = quantize(&rayleigh(), 1000).unwrap();
        let policy = StatePolicy { m: vec![520.0; 1000], p: vec![0.02; 1000] };
        let quantized = expected_error_csi(&chan, &policy, 480.0, SIGMA2).unwrap();
        assert_relative_eq!(quantized, BENCH_EXPECTATION, max_relative = 1e-9);
        let mc = monte_carlo_error(&rayleigh(), 520.0, 0.02, 480.0, SIGMA2, 1_000_000, 42);
        assert!((mc - quantized).abs() / quantized < 0.01);
    }

    #[test]
    fn avg_expectation_self_convergence_and_point_mass() {
        let e512 = expected_error_avg(&rayleigh(), 520.0, 0.02, 480.0, SIGMA2, 512).unwrap();
        let e1024 = expected_error_avg(&rayleigh(), 520.0, 0.02, 480.0, SIGMA2, 1024).unwrap();
        assert!((e512 - e1024).abs() / e1024 < 1e-6);
        assert_relative_eq!(e1024, BENCH_EXPECTATION, max_relative = 1e-9);
        let pm = FadingModel::point_mass(1.0).unwrap();
        let fixed = expected_error_avg(&pm, 520.0, 0.01, 480.0, SIGMA2, 64).unwrap();
        let direct = error_probability(&LinkPoint { m: 520.0, p: 0.01, gain: 100.0, d_bits: 480.0 });
        assert_eq!(fixed, direct);
        assert!(matches!(
            expected_error_avg(&pm, 520.0, 0.01, 480.0, SIGMA2, 8),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn monte_carlo_deterministic_and_unbiased() {
        let a = monte_carlo_error(&rayleigh(), 520.0, 0.02, 480.0, SIGMA2, 100_000, 7);
        let b = monte_carlo_error(&rayleigh(), 520.0, 0.02, 480.0, SIGMA2, 100_000, 7);
        assert_eq!(a.to_bits(), b.to_bits());
        let pm = FadingModel::point_mass(1.0).unwrap();
        let direct = error_probability(&LinkPoint { m: 520.0, p: 0.01, gain: 100.0, d_bits: 480.0 });
        assert_eq!(monte_carlo_error(&pm, 520.0, 0.01, 480.0, SIGMA2, 17, 3), direct);
        // statistical agreement: |mc - quad| <= 3 * 0.5 / sqrt(n)
        let quad = expected_error_avg(&rayleigh(), 520.0, 0.02, 480.0, SIGMA2, 2000).unwrap();
        let n = 1_000_000.0_f64;
        assert!((a - quad).abs() <= 3.0 * 0.5 / 100_000.0_f64.sqrt());
        let mc_big = monte_carlo_error(&rayleigh(), 520.0, 0.02, 480.0, SIGMA2, 1_000_000, 11);
        assert!((mc_big - quad).abs() <= 3.0 * 0.5 / n.sqrt());
    }

    #[test]
    fn per_state_point_mass_reduces_to_single_user_optimum() {
        let chan = quantize(&FadingModel::point_mass(1.0).unwrap(), 1).unwrap();
        let policy = solve_per_state(&chan, 480.0, SIGMA2, 800.0, 24.0, 0.1, 1.0).unwrap();
        let expected = expected_error_csi(&chan, &policy, 480.0, SIGMA2).unwrap();
        // the N = 1 allocator optimum on the same budgets
        let problem = allocator::AllocationProblem::new(
            vec![480.0],
            vec![100.0],
            800.0,
            24.0,
            0.1,
            1.0,
        )
        .unwrap();
        let single = allocator::solve_joint(&problem).unwrap();
        assert_relative_eq!(expected, single.objective, max_relative = 1e-4);
    }

    #[test]
    fn per_state_starves_dropped_states() {
        // two states, the weak one below the drop threshold
        let chan = QuantizedChannel {
            states: vec![0.001, 1.0],
            z_th: 0.01,
        };
        let policy = solve_per_state(&chan, 480.0, SIGMA2, 400.0, 12.0, 0.1, 1.0).unwrap();
        // essentially all blocklength goes to the good state
        assert!(policy.m[1] > 50.0 * policy.m[0], "policy {policy:?}");
        assert!(policy.m[1] > 1.9 * 400.0 * 0.95);
        let expected = expected_error_csi(&chan, &policy, 480.0, SIGMA2).unwrap();
        // the dropped state contributes its full half weight
        assert!(expected >= 0.5 && expected < 0.5 + 0.05);
    }

    #[test]
    fn per_state_beats_uniform_policy_and_dual_bound() {
        let chan = quantize(&rayleigh(), 8).unwrap();
        let (m_bar, e_bar) = (400.0, 60.0);
        let policy = solve_per_state(&chan, 480.0, SIGMA2, m_bar, e_bar, 0.1, 1.0).unwrap();
        let objective = expected_error_csi(&chan, &policy, 480.0, SIGMA2).unwrap();
        // budgets respected
        let m_used: f64 = policy.m.iter().sum::<f64>() / 8.0;
        let e_used: f64 = policy.m.iter().zip(&policy.p).map(|(m, p)| m * p).sum::<f64>() / 8.0;
        assert!(m_used <= m_bar * (1.0 + 1e-9));
        assert!(e_used <= e_bar * (1.0 + 1e-9));
        // error caps inactive at this operating point (the dual oracle
        // below ignores them, so verify the assumption)
        for (k, (&m, &p)) in policy.m.iter().zip(&policy.p).enumerate() {
            let eps = error_probability(&LinkPoint {
                m,
                p,
                gain: chan.states[k] / SIGMA2,
                d_bits: 480.0,
            });
            assert!(eps < 0.09, "state {k} error {eps}");
        }

        // uniform policy with the same budgets is never better
        let uniform = StatePolicy { m: vec![m_bar; 8], p: vec![e_bar / m_bar; 8] };
        let uniform_obj = expected_error_csi(&chan, &uniform, 480.0, SIGMA2).unwrap();
        assert!(objective <= uniform_obj * (1.0 + 1e-9));

        // dual-decomposition lower bound: per-state Lagrangian minimization
        // with nested bisection on the two budget multipliers
        let gains: Vec<f64> = chan.states.iter().map(|&z| z / SIGMA2).collect();
        let state_min = |lambda: f64, mu: f64| -> (f64, f64, f64) {
            // returns (sum value, sum m, sum m p) over states
            let mut tot = (0.0, 0.0, 0.0);
            for &g in &gains {
                let inner = |m: f64| -> (f64, f64) {
                    let p_floor = 1.0 / g;
                    let (p, v) = golden_min(p_floor, 40.0 / g, |p| {
                        error_probability(&LinkPoint { m, p, gain: g, d_bits: 480.0 }) / 8.0
                            + lambda * m
                            + mu * m * p
                    });
                    (p, v)
                };
                let (m, _) = golden_min(200.0, 3200.0, |m| inner(m).1);
                let (p, _) = inner(m);
                let eps = error_probability(&LinkPoint { m, p, gain: g, d_bits: 480.0 });
                tot.0 += eps / 8.0 + lambda * m + mu * m * p;
                tot.1 += m;
                tot.2 += m * p;
            }
            tot
        };
        // outer bisection on mu (energy), inner on lambda (blocklength)
        let mut mu_bracket = (1e-9, 1e-2);
        let mut dual = f64::NEG_INFINITY;
        for _ in 0..30 {
            let mu = (mu_bracket.0 * mu_bracket.1).sqrt();
            let mut lam_bracket = (1e-12, 1e-3);
            let mut last = (0.0, 0.0, 0.0);
            for _ in 0..30 {
                let lam = (lam_bracket.0 * lam_bracket.1).sqrt();
                last = state_min(lam, mu);
                if last.1 > 8.0 * m_bar {
                    lam_bracket.0 = lam;
                } else {
                    lam_bracket.1 = lam;
                }
            }
            let lam = (lam_bracket.0 * lam_bracket.1).sqrt();
            let value = last.0 - lam * 8.0 * m_bar - mu * 8.0 * e_bar;
            dual = dual.max(value);
            if last.2 > 8.0 * e_bar {
                mu_bracket.0 = mu;
            } else {
                mu_bracket.1 = mu;
            }
        }
        assert!(objective >= dual - 1e-12, "primal below dual bound");
        assert!(
            (objective - dual) / objective <= 1e-3,
            "gap too wide: primal {objective:e}, dual {dual:e}"
        );
    }

    #[test]
    fn avg_csi_point_mass_matches_static_design() {
        let pm = FadingModel::point_mass(1.0).unwrap();
        let (m, p) =
            solve_avg_csi(&pm, 480.0, SIGMA2, (500.0, 800.0), (0.01, 1.0), 24.0, 256).unwrap();
        // same instance as the allocator's single-user test: m* = 800,
        // p* = E/m
        assert_relative_eq!(m, 800.0, max_relative = 1e-4);
        assert_relative_eq!(p, 0.03, max_relative = 1e-4);
        // budget binds at the optimum
        assert!((m * p - 24.0).abs() <= 1e-6 * 24.0);
    }

    #[test]
    fn avg_csi_matches_grid_oracle_on_rayleigh() {
        let model = rayleigh();
        let (m_range, p_range, e_bar) = ((300.0, 900.0), (0.05, 0.5), 90.0);
        let (m, p) = solve_avg_csi(&model, 480.0, SIGMA2, m_range, p_range, e_bar, 256).unwrap();
        let obj = expected_error_avg(&model, m, p, 480.0, SIGMA2, 256).unwrap();

        // 150x150 grid with two refinement passes
        let (mut lo, mut hi) = (m_range, p_range);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for _pass in 0..3 {
            for i in 0..=150 {
                for j in 0..=150 {
                    let mm = lo.0 + (lo.1 - lo.0) * i as f64 / 150.0;
                    let pp = hi.0 + (hi.1 - hi.0) * j as f64 / 150.0;
                    if mm * pp > e_bar || mm <= 0.0 || pp <= 0.0 {
                        continue;
                    }
                    let v = expected_error_avg(&model, mm, pp, 480.0, SIGMA2, 256).unwrap();
                    if v < best.0 {
                        best = (v, mm, pp);
                    }
                }
            }
            let dm = (lo.1 - lo.0) / 150.0;
            let dp = (hi.1 - hi.0) / 150.0;
            lo = (best.1 - 2.0 * dm, best.1 + 2.0 * dm);
            hi = (best.2 - 2.0 * dp, best.2 + 2.0 * dp);
        }
        assert_relative_eq!(obj, best.0, max_relative = 1e-3);
        // energy budget binds (the expectation is decreasing in both)
        assert!((m * p - e_bar).abs() <= 1e-6 * e_bar);
    }

    #[test]
    fn avg_csi_rejects_impossible_budget() {
        assert!(matches!(
            solve_avg_csi(&rayleigh(), 480.0, SIGMA2, (500.0, 800.0), (1.0, 2.0), 100.0, 64),
            Err(Error::Infeasible { .. })
        ));
    }
}
