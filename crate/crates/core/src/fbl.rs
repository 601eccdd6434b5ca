//! Short-packet error model for a fixed-gain channel.
//!
//! The achievable-rate / error-probability model is the normal approximation
//!
//! ```text
//! eps = Q( sqrt(m/V(g)) * (C(g) - D/m) * ln 2 ),   C = log2(1+g),  V = 1-(1+g)^-2
//! ```
//!
//! with `m` channel uses, payload `D` bits and SNR `g`. The argument of the
//! Q-function is the auxiliary quantity [`channel_w`]; every convexity result
//! in this crate reduces to curvature properties of `w`, so this module also
//! provides its analytic first and second partials ([`w_derivatives`]).

use crate::error::{Error, Result};

pub const LN_2: f64 = std::f64::consts::LN_2;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// One operating point of a link: blocklength, transmit power, effective
/// channel gain (gain / noise power) and payload size.
///
/// Blocklength is a positive real here; integer handling belongs to the
/// allocator (`round_solution` / `solve_integer`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPoint {
    /// Blocklength in channel uses (positive real).
    pub m: f64,
    /// Transmit power (normalized watts).
    pub p: f64,
    /// Effective channel gain z/sigma^2, so that snr = gain * p.
    pub gain: f64,
    /// Payload in bits.
    pub d_bits: f64,
}

impl LinkPoint {
    pub fn new(m: f64, p: f64, gain: f64, d_bits: f64) -> Result<Self> {
        for (name, v) in [("m", m), ("p", p), ("gain", gain), ("d_bits", d_bits)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Domain(format!(
                    "LinkPoint field {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self { m, p, gain, d_bits })
    }

    /// SNR `gamma = gain * p`.
    #[inline]
    pub fn snr(&self) -> f64 {
        self.gain * self.p
    }

    /// Coding rate `r = D/m` in bits per channel use.
    #[inline]
    pub fn rate(&self) -> f64 {
        self.d_bits / self.m
    }
}

/// Gaussian tail probability `Q(x) = P[N(0,1) > x]`.
///
/// Evaluated through the complementary error function so the deep tail stays
/// accurate down to the smallest normal doubles (Q(37) ~ 5e-300).
pub fn q_func(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("q_func argument must be finite, got {x}")));
    }
    Ok(q_raw(x))
}

#[inline]
pub(crate) fn q_raw(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// `ln Q(x)`, valid for arguments far beyond the point where `Q` itself
/// underflows. Past x = 25 the asymptotic tail expansion
/// `Q(x) = phi(x)/x * (1 - 1/x^2 + 3/x^4 - ...)` takes over.
pub fn ln_q(x: f64) -> f64 {
    if x <= 25.0 {
        q_raw(x).ln()
    } else {
        let inv2 = 1.0 / (x * x);
        // 1 - 1/x^2 + 3/x^4 - 15/x^6 + 105/x^8 - 945/x^10
        let series = 1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * (105.0 - inv2 * 945.0))));
        -0.5 * x * x - LN_SQRT_2PI - x.ln() + series.ln_1p_guarded()
    }
}

trait Ln1pGuarded {
    fn ln_1p_guarded(self) -> f64;
}
impl Ln1pGuarded for f64 {
    #[inline]
    fn ln_1p_guarded(self) -> f64 {
        (self - 1.0).ln_1p()
    }
}

/// Standard normal density.
#[inline]
pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Hazard rate `phi(x)/Q(x)`, computed in log space so it stays finite for
/// arguments deep in the tail (where both numerator and denominator underflow).
pub(crate) fn hazard(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI - ln_q(x)).exp()
}

/// Inverse of [`q_func`] on (0, 1): bisection bracket followed by Newton
/// polishing, accurate to |Q(x) - p| <= 1e-12.
pub fn q_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("q_inv argument must lie in (0,1), got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0); // Q(0) = 1/2 exactly
    }
    // Q is strictly decreasing; Q(+-38.5) straddles every representable p.
    let (mut lo, mut hi) = (-38.5_f64, 38.5_f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if q_raw(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..4 {
        let f = q_raw(x) - p;
        let d = -normal_pdf(x);
        if d == 0.0 {
            break;
        }
        let step = f / d;
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    Ok(x)
}

/// Shannon capacity `C = log2(1+gamma)` and channel dispersion
/// `V = 1 - (1+gamma)^-2` of a fixed-gain channel.
pub fn capacity_dispersion(gamma: f64) -> Result<(f64, f64)> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Domain(format!("SNR must be positive and finite, got {gamma}")));
    }
    Ok(capacity_dispersion_raw(gamma))
}

#[inline]
pub(crate) fn capacity_dispersion_raw(gamma: f64) -> (f64, f64) {
    let c = gamma.ln_1p() / LN_2;
    // 1 - (1+g)^-2 written without cancellation for small gamma
    let v = gamma * (gamma + 2.0) / ((1.0 + gamma) * (1.0 + gamma));
    (c, v)
}

/// The Q-function argument `w = sqrt(m/V) * (C - D/m) * ln 2`.
///
/// `w >= 0` exactly when the coding rate does not exceed capacity.
pub fn channel_w(point: &LinkPoint) -> f64 {
    w_raw(point.m, point.snr(), point.d_bits)
}

#[inline]
pub(crate) fn w_raw(m: f64, gamma: f64, d_bits: f64) -> f64 {
    let (c, v) = capacity_dispersion_raw(gamma);
    (m / v).sqrt() * (c - d_bits / m) * LN_2
}

/// Block error probability `eps = Q(w)` of the normal approximation.
pub fn error_probability(point: &LinkPoint) -> f64 {
    q_raw(channel_w(point))
}

/// Maximal coding rate at blocklength `m` and target error `eps0`,
/// i.e. the exact inverse of [`error_probability`] in the rate:
/// `r* = C - sqrt(V/m) * Qinv(eps0) / ln 2`.
pub fn achievable_rate(gamma: f64, m: f64, eps0: f64) -> Result<f64> {
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::Domain(format!("blocklength must be positive, got {m}")));
    }
    let (c, v) = capacity_dispersion(gamma)?;
    Ok(c - (v / m).sqrt() * q_inv(eps0)? / LN_2)
}

/// Three-segment linear approximation of the error probability.
///
/// The segment is the tangent of `Q(w)` at its 0.5-crossing, expressed with
/// the rate in nats: `alpha = e^{r ln2} - 1` and slope magnitude
/// `mu = sqrt(m / (2 pi (e^{2 r ln2} - 1)))`. Clamped to 1 below
/// `alpha - 1/(2 mu)` and to 0 at `alpha + 1/(2 mu)` and beyond.
pub fn error_linear(point: &LinkPoint) -> f64 {
    let r_nats = point.rate() * LN_2;
    let alpha = r_nats.exp_m1();
    let mu = (point.m / (2.0 * std::f64::consts::PI * (2.0 * r_nats).exp_m1())).sqrt();
    let gamma = point.snr();
    let half = 0.5 / mu;
    if gamma < alpha - half {
        1.0
    } else if gamma >= alpha + half {
        0.0
    } else {
        0.5 - mu * (gamma - alpha)
    }
}

/// Error probability under the constant-dispersion simplification `V ~ 1`:
/// `Q(sqrt(m) (C - r) ln 2)`. Accurate only at high SNR.
pub fn error_unit_dispersion(point: &LinkPoint) -> f64 {
    let (c, _) = capacity_dispersion_raw(point.snr());
    q_raw(point.m.sqrt() * (c - point.rate()) * LN_2)
}

/// First and second partials of `w` over blocklength and SNR, plus the
/// determinant of the 2x2 Hessian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FblCurvature {
    pub dw_dm: f64,
    pub dw_dgamma: f64,
    pub d2w_dm2: f64,
    pub d2w_dgamma2: f64,
    pub d2w_dmdgamma: f64,
    /// `d2w_dm2 * d2w_dgamma2 - d2w_dmdgamma^2`.
    pub det_h: f64,
}

/// Analytic partials of `w(m, gamma)` from the closed forms.
///
/// The sign analysis behind these expressions assumes `gamma >= 1`; below
/// that the closed forms are still algebra but the guarantees are void, so
/// the call is rejected.
pub fn w_derivatives(point: &LinkPoint) -> Result<FblCurvature> {
    let gamma = point.snr();
    if gamma < 1.0 {
        return Err(Error::Region(format!(
            "w_derivatives requires snr >= 1, got {gamma}"
        )));
    }
    Ok(w_derivatives_raw(point.m, gamma, point.d_bits))
}

pub(crate) fn w_derivatives_raw(m: f64, gamma: f64, d_bits: f64) -> FblCurvature {
    let (c, v) = capacity_dispersion_raw(gamma);
    let r = d_bits / m;
    let s = gamma * gamma + 2.0 * gamma;
    let gp1 = gamma + 1.0;
    let sqrt_m = m.sqrt();
    let inv_sqrt_v = 1.0 / v.sqrt();

    let dw_dm = 0.5 * inv_sqrt_v * LN_2 * (c / sqrt_m + d_bits / (m * sqrt_m));
    let d2w_dm2 = -0.25 * inv_sqrt_v * LN_2 * (c / (m * sqrt_m) + 3.0 * d_bits / (m * m * sqrt_m));

    let delta1 = s - gp1.ln();
    let dw_dgamma = sqrt_m * inv_sqrt_v * delta1 / (s * gp1)
        + inv_sqrt_v * inv_sqrt_v * inv_sqrt_v * d_bits * LN_2 / (sqrt_m * gp1 * gp1 * gp1);

    let delta2 = -gp1 * gp1 * gp1 + 1.0 / gp1 + 3.0 * gp1 * gp1.ln();
    let d2w_dgamma2 = sqrt_m / s.powf(2.5) * (delta2 - 3.0 * LN_2 * gp1 * r);

    let d2w_dmdgamma = inv_sqrt_v * LN_2 / (2.0 * sqrt_m * gp1) * (1.0 / LN_2 - (c + r) / s);

    let det_h = d2w_dm2 * d2w_dgamma2 - d2w_dmdgamma * d2w_dmdgamma;

    #[cfg(debug_assertions)]
    if gamma >= 1.0 {
        // det(H) decomposes exactly as ln^2(2)/(m s) * (D3 + D4 + D5).
        let rebuilt = crate::region::det_h_from_deltas(m, gamma, r);
        debug_assert!(
            (det_h - rebuilt).abs() <= 1e-9 * det_h.abs().max(rebuilt.abs()).max(f64::MIN_POSITIVE),
            "det(H) decomposition drifted: product {det_h:e} vs deltas {rebuilt:e}"
        );
    }

    FblCurvature {
        dw_dm,
        dw_dgamma,
        d2w_dm2,
        d2w_dgamma2,
        d2w_dmdgamma,
        det_h,
    }
}
