//! Joint-convexity region tests for the error probability in (m, p).
//!
//! The error surface is jointly convex wherever the auxiliary `w` is jointly
//! concave. Concavity of `w` reduces to the non-negativity of a handful of
//! delta terms; the rate condition `r > delta6(gamma)` or the stricter SNR
//! floor `gamma >= max(1/(5 r ln2), 8/(45 r^2 ln^2 2))` certify it. This
//! module evaluates those certificates and provides a numeric PSD sweep that
//! validates them against the actual Hessian eigenvalues.

use crate::error::{Error, Result};
use crate::exec;
use crate::fbl::{
    capacity_dispersion_raw, channel_w, error_probability, normal_pdf, w_derivatives,
    FblCurvature, LinkPoint, LN_2,
};

/// Scaled eigenvalue tolerance of the PSD sweep. Relative to `1 + |trace|`
/// because Hessian entries span ~20 orders of magnitude across the grid.
pub const PSD_TOL: f64 = 1e-9;

/// Outcome of the region tests at one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityVerdict {
    /// Reliability preconditions: `eps <= eps_max`, `gamma >= gamma_th`, `C >= r`.
    pub preconditions_ok: bool,
    /// Rate condition: `r > delta6(gamma)` (requires `gamma >= 1`).
    pub cond_rate_ok: bool,
    /// Stricter SNR condition: `gamma >= max(1/(5 r ln2), 8/(45 r^2 ln^2 2))`.
    pub cond_snr_ok: bool,
    /// `preconditions_ok && (cond_rate_ok || cond_snr_ok)`.
    pub in_region: bool,
    pub eps: f64,
    pub snr: f64,
    pub rate: f64,
    /// `delta6(gamma)`; NaN when `gamma < 1`.
    pub rate_floor: f64,
    /// The SNR threshold of the strict condition.
    pub snr_floor: f64,
}

/// The delta terms of the `det(H)` decomposition, evaluated at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaTerms {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub d5: f64,
    pub d6: f64,
    /// `det(H)` reconstructed from the decomposition,
    /// `ln^2(2) / (m (gamma^2+2gamma)) * (d3 + d4 + d5)`.
    pub det_h: f64,
}

pub fn delta1(gamma: f64) -> f64 {
    gamma * gamma + 2.0 * gamma - (gamma + 1.0).ln()
}

pub fn delta2(gamma: f64) -> f64 {
    let gp1 = gamma + 1.0;
    -gp1 * gp1 * gp1 + 1.0 / gp1 + 3.0 * gp1 * gp1.ln()
}

pub fn delta3(gamma: f64) -> f64 {
    let (c, _) = capacity_dispersion_raw(gamma);
    let s = gamma * gamma + 2.0 * gamma;
    c / (s * LN_2) - 3.0 * c * c / (4.0 * s) + c / (4.0 * LN_2) - 1.0 / (4.0 * LN_2 * LN_2)
        - 3.0 * c * c / (5.0 * s * s)
}

pub fn delta4(gamma: f64, rate: f64) -> f64 {
    let (c, _) = capacity_dispersion_raw(gamma);
    let s = gamma * gamma + 2.0 * gamma;
    3.0 * rate / (4.0 * LN_2) - 3.0 * rate * c / (2.0 * s) - 2.0 * rate * c / (s * s)
}

pub fn delta5(gamma: f64, rate: f64) -> f64 {
    let (c, _) = capacity_dispersion_raw(gamma);
    let s = gamma * gamma + 2.0 * gamma;
    2.0 * rate / (s * LN_2) + 9.0 * rate * rate / (4.0 * s) + 2.0 * rate * rate / (s * s)
        - 2.0 * c * c / (5.0 * s * s)
}

/// `det(H)` from the delta decomposition. Exact identity with the product
/// form `w_mm * w_gg - w_mg^2` (the decomposition carries a `ln^2 2`
/// prefactor, not `ln 2`).
pub(crate) fn det_h_from_deltas(m: f64, gamma: f64, rate: f64) -> f64 {
    let s = gamma * gamma + 2.0 * gamma;
    LN_2 * LN_2 / (m * s) * (delta3(gamma) + delta4(gamma, rate) + delta5(gamma, rate))
}

/// Rate floor of the rate condition: the coding rate above which `delta5`
/// (and with it `det H`) is non-negative at SNR `gamma`.
pub fn delta6(gamma: f64) -> Result<f64> {
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(Error::Domain(format!("delta6 requires gamma >= 1, got {gamma}")));
    }
    Ok(delta6_raw(gamma))
}

fn delta6_raw(gamma: f64) -> f64 {
    let s = gamma * gamma + 2.0 * gamma;
    let t = 9.0 * (gamma + 1.0) * (gamma + 1.0) - 1.0;
    let lg = (gamma + 1.0).ln();
    let x = 0.4 * t * lg * lg;
    // sqrt(4 s^2 + x) - 2 s, written without cancellation
    let diff = x / ((4.0 * s * s + x).sqrt() + 2.0 * s);
    2.0 / (LN_2 * t) * diff
}

/// Maximizes `delta6` over gamma in [1, 1e4] by golden-section search,
/// resolving the peak location to 1e-6.
pub fn delta6_peak() -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut lo, mut hi) = (1.0_f64, 1e4_f64);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = delta6_raw(x1);
    let mut f2 = delta6_raw(x2);
    while hi - lo > 1e-6 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = delta6_raw(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = delta6_raw(x1);
        }
    }
    let g = 0.5 * (lo + hi);
    (g, delta6_raw(g))
}

/// SNR floor of the strict condition for coding rate `rate`.
pub fn snr_floor(rate: f64) -> f64 {
    let a = 1.0 / (5.0 * rate * LN_2);
    let b = 8.0 / (45.0 * rate * rate * LN_2 * LN_2);
    a.max(b)
}

/// Evaluates every region predicate at one point. Never fails: the verdict
/// carries the outcome of each test.
pub fn convexity_condition(point: &LinkPoint, eps_max: f64, gamma_th: f64) -> ConvexityVerdict {
    let snr = point.snr();
    let rate = point.rate();
    let (c, _) = capacity_dispersion_raw(snr);
    let eps = error_probability(point);
    let preconditions_ok = eps <= eps_max && snr >= gamma_th && c >= rate;
    let rate_floor = if snr >= 1.0 { delta6_raw(snr) } else { f64::NAN };
    let cond_rate_ok = snr >= 1.0 && rate > rate_floor;
    let floor = snr_floor(rate);
    let cond_snr_ok = snr >= 1.0 && snr >= floor;
    ConvexityVerdict {
        preconditions_ok,
        cond_rate_ok,
        cond_snr_ok,
        in_region: preconditions_ok && (cond_rate_ok || cond_snr_ok),
        eps,
        snr,
        rate,
        rate_floor,
        snr_floor: floor,
    }
}

/// Delta terms at one point (`gamma >= 1`).
pub fn det_h_terms(point: &LinkPoint) -> Result<DeltaTerms> {
    let gamma = point.snr();
    if gamma < 1.0 {
        return Err(Error::Domain(format!("det_h_terms requires snr >= 1, got {gamma}")));
    }
    let rate = point.rate();
    Ok(DeltaTerms {
        d1: delta1(gamma),
        d2: delta2(gamma),
        d3: delta3(gamma),
        d4: delta4(gamma, rate),
        d5: delta5(gamma, rate),
        d6: delta6_raw(gamma),
        det_h: det_h_from_deltas(point.m, gamma, rate),
    })
}

/// Hessian of the error probability over (m, p), assembled from the partials
/// of `w` by the chain rule `eps'' = phi(w) (w grad w grad w^T - Hess w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorHessian {
    pub h_mm: f64,
    pub h_mp: f64,
    pub h_pp: f64,
}

impl ErrorHessian {
    pub fn trace(&self) -> f64 {
        self.h_mm + self.h_pp
    }

    /// Eigenvalue bounds of the symmetric 2x2 matrix.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.h_mm + self.h_pp);
        let disc = (0.25 * (self.h_mm - self.h_pp) * (self.h_mm - self.h_pp)
            + self.h_mp * self.h_mp)
            .sqrt();
        (mean - disc, mean + disc)
    }
}

pub fn error_hessian(point: &LinkPoint) -> Result<ErrorHessian> {
    let curv = w_derivatives(point)?;
    Ok(error_hessian_from(point, &curv))
}

pub(crate) fn error_hessian_from(point: &LinkPoint, curv: &FblCurvature) -> ErrorHessian {
    let w = channel_w(point);
    let g = point.gain;
    let w_p = g * curv.dw_dgamma;
    let w_pp = g * g * curv.d2w_dgamma2;
    let w_mp = g * curv.d2w_dmdgamma;
    let pdf = normal_pdf(w);
    ErrorHessian {
        h_mm: pdf * (w * curv.dw_dm * curv.dw_dm - curv.d2w_dm2),
        h_mp: pdf * (w * curv.dw_dm * w_p - w_mp),
        h_pp: pdf * (w * w_p * w_p - w_pp),
    }
}

/// Verdict plus eigenvalue data for one grid point of the PSD sweep.
#[derive(Debug, Clone, Copy)]
pub struct PsdSample {
    pub point: LinkPoint,
    pub verdict: ConvexityVerdict,
    /// Present only when the point is in the proven region.
    pub eig_min: Option<f64>,
    pub eig_max: Option<f64>,
    pub trace: Option<f64>,
}

/// Evaluates one grid point of the sweep; the per-point kernel behind
/// [`numeric_psd_scan`].
pub fn psd_sample(point: &LinkPoint, eps_max: f64, gamma_th: f64) -> PsdSample {
    let verdict = convexity_condition(point, eps_max, gamma_th);
    if verdict.in_region {
        // in_region implies gamma >= 1, so the derivatives are available
        let hess = error_hessian(point).expect("in-region point has snr >= 1");
        let (lo, hi) = hess.eigenvalues();
        PsdSample {
            point: *point,
            verdict,
            eig_min: Some(lo),
            eig_max: Some(hi),
            trace: Some(hess.trace()),
        }
    } else {
        PsdSample {
            point: *point,
            verdict,
            eig_min: None,
            eig_max: None,
            trace: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PsdReport {
    pub samples: Vec<PsdSample>,
    pub n_in_region: usize,
    pub n_out_region: usize,
    /// Smallest `eig_min / (1 + |trace|)` over in-region points.
    pub min_scaled_eig: f64,
    /// Index of the point attaining `min_scaled_eig`.
    pub worst: Option<usize>,
}

impl PsdReport {
    /// True when every in-region Hessian passed the scaled PSD test.
    pub fn all_psd(&self) -> bool {
        self.worst.is_none() || self.min_scaled_eig >= -PSD_TOL
    }
}

/// Sweeps the grid, checking that the error Hessian is (numerically) PSD at
/// every point the region certificates accept.
pub fn numeric_psd_scan(
    grid: &[LinkPoint],
    eps_max: f64,
    gamma_th: f64,
) -> Result<PsdReport> {
    if grid.is_empty() {
        return Err(Error::Usage("numeric_psd_scan needs a non-empty grid".into()));
    }
    let samples = exec::map_slice(grid, |p| psd_sample(p, eps_max, gamma_th));
    let mut n_in = 0;
    let mut min_scaled = f64::INFINITY;
    let mut worst = None;
    for (i, s) in samples.iter().enumerate() {
        if let (Some(lo), Some(tr)) = (s.eig_min, s.trace) {
            n_in += 1;
            let scaled = lo / (1.0 + tr.abs());
            if scaled < min_scaled {
                min_scaled = scaled;
                worst = Some(i);
            }
        }
    }
    let n = samples.len();
    Ok(PsdReport {
        samples,
        n_in_region: n_in,
        n_out_region: n - n_in,
        min_scaled_eig: min_scaled,
        worst,
    })
}

/// Log-spaced grid over (gamma, m) at fixed payload, with `p = gamma / gain`.
pub fn log_grid(
    gamma_range: (f64, f64),
    m_range: (f64, f64),
    n_gamma: usize,
    n_m: usize,
    gain: f64,
    d_bits: f64,
) -> Vec<LinkPoint> {
    let mut out = Vec::with_capacity(n_gamma * n_m);
    for i in 0..n_gamma {
        let t = if n_gamma == 1 { 0.0 } else { i as f64 / (n_gamma - 1) as f64 };
        let gamma = gamma_range.0 * (gamma_range.1 / gamma_range.0).powf(t);
        for j in 0..n_m {
            let u = if n_m == 1 { 0.0 } else { j as f64 / (n_m - 1) as f64 };
            let m = m_range.0 * (m_range.1 / m_range.0).powf(u);
            out.push(LinkPoint {
                m,
                p: gamma / gain,
                gain,
                d_bits,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededUniform;
    use approx::assert_relative_eq;

    #[test]
    fn delta6_reference_values() {
        assert_relative_eq!(delta6(1.0).unwrap(), 0.04423212372426038, max_relative = 1e-12);
        assert_relative_eq!(delta6(1.2408).unwrap(), 0.04479983175821467, max_relative = 1e-12);
        assert!(delta6(0.99).is_err());
    }

    #[test]
    fn delta6_bounded_by_peak_over_wide_range() {
        let mut max = f64::NEG_INFINITY;
        for i in 0..=100_000 {
            let gamma = 1.0 * (100.0_f64 / 1.0).powf(i as f64 / 100_000.0);
            max = max.max(delta6(gamma).unwrap());
        }
        assert!(max <= 0.0448 + 5e-4, "sup over [1,100] was {max}");
    }

    #[test]
    fn delta6_finite_over_huge_range() {
        for i in 0..=10_000 {
            let gamma = 1.0 * (1e6_f64).powf(i as f64 / 10_000.0);
            let v = delta6(gamma).unwrap();
            assert!(v.is_finite(), "delta6({gamma}) = {v}");
        }
    }

    #[test]
    fn delta6_peak_location_and_value() {
        let (g, v) = delta6_peak();
        assert!((g - 1.2408).abs() < 1e-3, "peak location {g}");
        assert!((v - 0.0448).abs() < 5e-4, "peak value {v}");
        // deterministic
        assert_eq!(delta6_peak(), (g, v));
    }

    #[test]
    fn delta_terms_reference_values() {
        let point = LinkPoint::new(520.0, 1.0, 1.0, 480.0).unwrap();
        let d = det_h_terms(&point).unwrap();
        assert_relative_eq!(d.d3, 0.004563195267160038, max_relative = 1e-10);
        assert_relative_eq!(d.d2, 6.0 * LN_2 + 0.5 - 8.0, max_relative = 1e-12);
        assert_relative_eq!(d.d1, 3.0 - LN_2, max_relative = 1e-12);
        assert!(d.d4 >= 0.0);
        assert!(d.d2 < 0.0);
        let low = LinkPoint::new(520.0, 0.5, 1.0, 480.0).unwrap();
        assert!(det_h_terms(&low).is_err());
    }

    #[test]
    fn det_h_decomposition_matches_product_form() {
        let mut rng = SeededUniform::new(901);
        let mut checked = 0;
        while checked < 1000 {
            let gamma = rng.range(1.0, 30.0);
            let m = rng.range(100.0, 2000.0);
            let point = LinkPoint::new(m, gamma, 1.0, 480.0).unwrap();
            if !convexity_condition(&point, 0.1, 1.0).in_region {
                continue;
            }
            let prod = crate::fbl::w_derivatives(&point).unwrap().det_h;
            let dec = det_h_terms(&point).unwrap().det_h;
            assert_relative_eq!(prod, dec, max_relative = 1e-8);
            checked += 1;
        }
    }

    #[test]
    fn condition_examples() {
        // r = 0.6 at gamma = 1: rate condition holds, strict SNR one does not
        let p = LinkPoint::new(800.0, 1.0, 1.0, 480.0).unwrap();
        let v = convexity_condition(&p, 0.1, 1.0);
        assert!(v.cond_rate_ok);
        assert_relative_eq!(v.snr_floor, 1.0278365338299298, max_relative = 1e-12);
        assert!(!v.cond_snr_ok);
        assert!(v.in_region);
        // same rate just above the floor
        let p2 = LinkPoint::new(800.0, 1.05, 1.0, 480.0).unwrap();
        assert!(convexity_condition(&p2, 0.1, 1.0).cond_snr_ok);
        // r = 0.01: both conditions fail at gamma = 1
        let p3 = LinkPoint::new(1000.0, 1.0, 1.0, 10.0).unwrap();
        let v3 = convexity_condition(&p3, 0.1, 1.0);
        assert!(!v3.cond_rate_ok && !v3.in_region);
    }

    #[test]
    fn strict_condition_implies_rate_condition() {
        let mut rng = SeededUniform::new(77);
        let mut snr_ok = 0;
        let mut converse_violated = false;
        for _ in 0..10_000 {
            let gamma = rng.range(1.0, 50.0);
            let rate = rng.range(0.01, 3.0);
            let m = 480.0 / rate;
            let point = LinkPoint::new(m, gamma, 1.0, 480.0).unwrap();
            let v = convexity_condition(&point, 1.0, 1.0);
            if v.cond_snr_ok {
                snr_ok += 1;
                assert!(v.cond_rate_ok, "Eq-5 point must satisfy the rate condition");
            }
            if v.cond_rate_ok && !v.cond_snr_ok {
                converse_violated = true;
            }
        }
        assert!(snr_ok > 100, "sample must exercise the strict condition");
        assert!(converse_violated, "rate condition must be weaker somewhere");
    }

    #[test]
    fn psd_scan_small_grid() {
        let grid = log_grid((1.0, 30.0), (550.0, 2000.0), 20, 20, 1.0, 480.0);
        let report = numeric_psd_scan(&grid, 0.1, 1.0).unwrap();
        assert!(report.n_in_region > 0);
        assert!(report.all_psd(), "min scaled eig {}", report.min_scaled_eig);
        assert_eq!(report.n_in_region + report.n_out_region, 400);
    }

    #[test]
    fn psd_scan_excludes_over_capacity_points() {
        // C(1) = 1 < r = 480/400: precondition fails, counted out of region
        let grid = vec![LinkPoint::new(400.0, 1.0, 1.0, 480.0).unwrap()];
        let report = numeric_psd_scan(&grid, 0.1, 1.0).unwrap();
        assert_eq!(report.n_in_region, 0);
        assert_eq!(report.n_out_region, 1);
        assert!(report.worst.is_none());
    }

    #[test]
    fn psd_scan_rejects_empty_grid() {
        assert!(matches!(
            numeric_psd_scan(&[], 0.1, 1.0),
            Err(crate::error::Error::Usage(_))
        ));
    }
}
