//! Heat kernel, its temporal antiderivatives and the per-block temporal
//! weights `V^d`, `K^d` and `D^{2,d}`.
//!
//! Notation: `rho = |r|`, `delta` a non-negative time gap and
//! `x = rho / (2 sqrt(alpha delta))` the argument of the error function.
//!
//! * `G^{dtau}(rho, delta)   = erf(x) / (4 pi alpha rho)`
//! * `G^{dt}                 = -G^{dtau}`
//! * `G^{dtau dt}(rho, delta) = [(rho/(2 alpha^2) + delta/(alpha rho)) erf(x)
//!                             + sqrt(delta/(pi alpha^3)) exp(-x^2)] / (4 pi)`
//!
//! Every function has explicit branches for `delta -> 0` and `rho -> 0`.
//! The normal derivatives additionally switch to a power series in `x` for
//! `x < SERIES_SWITCH`, where the closed forms lose digits to cancellation.

use crate::error::KernelError;
use crate::scalar::{dot, norm, Real, Vec3};

/// Relative threshold (w.r.t. `h_t`) below which a time gap counts as zero.
pub const DELTA_LIMIT_FACTOR: f64 = 1e-14;
/// Relative threshold (w.r.t. the geometry length scale) below which a
/// distance counts as zero.
pub const RHO_LIMIT_FACTOR: f64 = 1e-12;
const SERIES_SWITCH: f64 = 0.5;
const SERIES_TERMS: usize = 24;

/// Material and discretisation constants entering every kernel evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams<T: Real> {
    alpha: T,
    h_t: T,
    length_scale: T,
}

impl<T: Real> KernelParams<T> {
    pub fn new(alpha: T, h_t: T) -> Result<Self, KernelError> {
        if !(alpha > T::zero()) || !(h_t > T::zero()) {
            return Err(KernelError::InvalidParameter(format!(
                "alpha and h_t must be positive (alpha = {alpha}, h_t = {h_t})"
            )));
        }
        Ok(Self {
            alpha,
            h_t,
            length_scale: T::one(),
        })
    }

    /// Length used to decide when a distance is treated as zero; usually the
    /// mesh diameter.
    pub fn with_length_scale(mut self, length_scale: T) -> Self {
        if length_scale > T::zero() {
            self.length_scale = length_scale;
        }
        self
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn h_t(&self) -> T {
        self.h_t
    }

    pub fn length_scale(&self) -> T {
        self.length_scale
    }

    #[inline]
    pub(crate) fn delta_is_zero(&self, delta: T) -> bool {
        delta < T::lit(DELTA_LIMIT_FACTOR) * self.h_t
    }

    #[inline]
    pub(crate) fn rho_is_zero(&self, rho: T) -> bool {
        rho < T::lit(RHO_LIMIT_FACTOR) * self.length_scale
    }

    /// Precomputes the `delta`-dependent factors for repeated evaluation.
    pub fn level(&self, delta: T) -> TimeLevel<T> {
        TimeLevel::new(*self, delta)
    }
}

/// Which temporal weight `temporal_weight` returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalWeightKind {
    /// `V^d`
    SingleLayer,
    /// `K^d`, normal derivative w.r.t. the trial point
    DoubleLayer,
    /// `D^{2,d}`
    HypersingularD2,
}

/// Heat kernel `G_alpha(r, dt)`, zero for `dt <= 0`.
pub fn fundamental<T: Real>(r: &Vec3<T>, dt: T, alpha: T) -> T {
    if dt <= T::zero() {
        return T::zero();
    }
    let four_pi_alpha_dt = T::lit(4.0) * T::PI() * alpha * dt;
    (-dot(r, r) / (T::lit(4.0) * alpha * dt)).exp() / (four_pi_alpha_dt * four_pi_alpha_dt.sqrt())
}

/// `alpha dG/dn_x (r, dt)` with `r = x - y`, zero for `dt <= 0`.
pub fn grad_fundamental_normal<T: Real>(r: &Vec3<T>, n_x: &Vec3<T>, dt: T, alpha: T) -> T {
    if dt <= T::zero() {
        return T::zero();
    }
    let pa = T::PI() * alpha;
    let denom = T::lit(16.0) * pa * pa.sqrt() * dt * dt * dt.sqrt();
    -dot(r, n_x) / denom * (-dot(r, r) / (T::lit(4.0) * alpha * dt)).exp()
}

/// `G^{dtau}(rho, delta)`; the `rho -> 0` limit `1/(4 sqrt(pi^3 alpha^3 delta))`
/// is returned for vanishing distances.
pub fn antideriv_tau<T: Real>(rho: T, delta: T, params: &KernelParams<T>) -> Result<T, KernelError> {
    let level = params.level(delta);
    if level.is_zero_gap() && params.rho_is_zero(rho) {
        return Err(singular(rho, delta));
    }
    Ok(level.g_tau(rho, params.rho_is_zero(rho)))
}

/// `G^{dt}(rho, delta) = -G^{dtau}(rho, delta)`.
pub fn antideriv_t<T: Real>(rho: T, delta: T, params: &KernelParams<T>) -> Result<T, KernelError> {
    antideriv_tau(rho, delta, params).map(|v| -v)
}

/// `G^{dtau dt}(rho, delta)`, defined (and continuous) for all `rho, delta >= 0`.
pub fn antideriv_tau_t<T: Real>(rho: T, delta: T, params: &KernelParams<T>) -> T {
    params.level(delta).g_tau_t(rho, params.rho_is_zero(rho))
}

/// `alpha dG^{dtau dt}/dn_y (r, delta)` with `r = x - y`.
pub fn normal_deriv_antideriv_tau_t<T: Real>(
    r: &Vec3<T>,
    n_y: &Vec3<T>,
    delta: T,
    params: &KernelParams<T>,
) -> Result<T, KernelError> {
    let rho = norm(r);
    let level = params.level(delta);
    let rho_zero = params.rho_is_zero(rho);
    if rho_zero && level.is_zero_gap() {
        return Err(singular(rho, delta));
    }
    Ok(level.dn_g_tau_t(rho, dot(r, n_y), rho_zero))
}

/// `alpha dG^{dtau}/dn_y (r, delta)` with `r = x - y`; Laplace double-layer
/// kernel for `delta = 0`.
pub fn normal_deriv_antideriv_tau<T: Real>(
    r: &Vec3<T>,
    n_y: &Vec3<T>,
    delta: T,
    params: &KernelParams<T>,
) -> Result<T, KernelError> {
    let rho = norm(r);
    if params.rho_is_zero(rho) {
        return Err(singular(rho, delta));
    }
    Ok(params.level(delta).dn_g_tau(rho, dot(r, n_y)))
}

/// Temporal weight of block `d`:
///
/// * `V^0 = h G^{dtau}(0) - G^{dtau dt}(h) + G^{dtau dt}(0)`,
///   `V^d = 2 G^{dtau dt}(d h) - G^{dtau dt}((d+1) h) - G^{dtau dt}((d-1) h)`
/// * `K^d`: the same combinations of `alpha dG/dn_y`
/// * `D^{2,0} = -alpha [G^{dt}(0) - G^{dt}(h)]`,
///   `D^{2,d} = -alpha [2 G^{dt}(d h) - G^{dt}((d+1) h) - G^{dt}((d-1) h)]`
///
/// `n_y` is only read for [`TemporalWeightKind::DoubleLayer`].
pub fn temporal_weight<T: Real>(
    kind: TemporalWeightKind,
    r: &Vec3<T>,
    n_y: &Vec3<T>,
    d: usize,
    params: &KernelParams<T>,
) -> Result<T, KernelError> {
    let h = params.h_t();
    let at = |k: usize| T::from_usize_lossy(k) * h;
    let rho = norm(r);
    match kind {
        TemporalWeightKind::SingleLayer => {
            if d == 0 {
                Ok(h * antideriv_tau(rho, T::zero(), params)?
                    - antideriv_tau_t(rho, h, params)
                    + antideriv_tau_t(rho, T::zero(), params))
            } else {
                Ok(T::lit(2.0) * antideriv_tau_t(rho, at(d), params)
                    - antideriv_tau_t(rho, at(d + 1), params)
                    - antideriv_tau_t(rho, at(d - 1), params))
            }
        }
        TemporalWeightKind::DoubleLayer => {
            let dn = |k: usize| normal_deriv_antideriv_tau_t(r, n_y, at(k), params);
            if d == 0 {
                Ok(h * normal_deriv_antideriv_tau(r, n_y, T::zero(), params)? - dn(1)? + dn(0)?)
            } else {
                Ok(T::lit(2.0) * dn(d)? - dn(d + 1)? - dn(d - 1)?)
            }
        }
        TemporalWeightKind::HypersingularD2 => {
            let alpha = params.alpha();
            let gt = |k: usize| antideriv_t(rho, at(k), params);
            if d == 0 {
                Ok(-alpha * (gt(0)? - gt(1)?))
            } else {
                Ok(-alpha * (T::lit(2.0) * gt(d)? - gt(d + 1)? - gt(d - 1)?))
            }
        }
    }
}

fn singular<T: Real>(rho: T, delta: T) -> KernelError {
    KernelError::Singular {
        rho: rho.to_f64_lossy(),
        delta: delta.to_f64_lossy(),
    }
}

/// Kernel factors for one fixed time gap `delta`, shared by every spatial
/// quadrature point of a batch.
#[derive(Clone, Copy, Debug)]
pub struct TimeLevel<T: Real> {
    alpha: T,
    delta: T,
    zero_gap: bool,
    /// `1 / (2 sqrt(alpha delta))`
    inv_scale: T,
    sqrt_delta: T,
    inv_four_pi: T,
    inv_sqrt_pi: T,
}

impl<T: Real> TimeLevel<T> {
    pub fn new(params: KernelParams<T>, delta: T) -> Self {
        let alpha = params.alpha;
        let zero_gap = params.delta_is_zero(delta);
        let delta = if zero_gap { T::zero() } else { delta };
        let inv_scale = if zero_gap {
            T::infinity()
        } else {
            T::one() / (T::lit(2.0) * (alpha * delta).sqrt())
        };
        Self {
            alpha,
            delta,
            zero_gap,
            inv_scale,
            sqrt_delta: delta.sqrt(),
            inv_four_pi: T::one() / (T::lit(4.0) * T::PI()),
            inv_sqrt_pi: T::one() / T::PI().sqrt(),
        }
    }

    pub fn is_zero_gap(&self) -> bool {
        self.zero_gap
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    /// `G^{dtau}`. With `rho_zero` and a positive gap the finite limit is
    /// returned; with both zero the result is `+inf`.
    #[inline(always)]
    pub fn g_tau(&self, rho: T, rho_zero: bool) -> T {
        let a = self.alpha;
        if self.zero_gap {
            if rho_zero {
                return T::infinity();
            }
            return self.inv_four_pi / (a * rho);
        }
        if rho_zero {
            // 1 / (4 sqrt(pi^3 alpha^3 delta))
            let pa = T::PI() * a;
            return T::one() / (T::lit(4.0) * pa * pa.sqrt() * self.sqrt_delta);
        }
        (rho * self.inv_scale).erf() * self.inv_four_pi / (a * rho)
    }

    /// `G^{dtau dt}`.
    #[inline(always)]
    pub fn g_tau_t(&self, rho: T, rho_zero: bool) -> T {
        let a = self.alpha;
        if self.zero_gap {
            if rho_zero {
                return T::zero();
            }
            return rho * self.inv_four_pi / (T::lit(2.0) * a * a);
        }
        if rho_zero {
            // sqrt(delta) / (2 sqrt(pi^3 alpha^3))
            let pa = T::PI() * a;
            return self.sqrt_delta / (T::lit(2.0) * pa * pa.sqrt());
        }
        let x = rho * self.inv_scale;
        let first = (rho / (T::lit(2.0) * a * a) + self.delta / (a * rho)) * x.erf();
        let second = self.sqrt_delta * self.inv_sqrt_pi / (a * a.sqrt()) * (-x * x).exp();
        self.inv_four_pi * (first + second)
    }

    /// `alpha dG^{dtau dt}/dn_y` given `rho = |r|` and `rn = r . n_y`.
    #[inline(always)]
    pub fn dn_g_tau_t(&self, rho: T, rn: T, rho_zero: bool) -> T {
        let a = self.alpha;
        if self.zero_gap {
            if rho_zero {
                return T::zero();
            }
            return -rn * self.inv_four_pi / (T::lit(2.0) * a * rho);
        }
        if rho_zero {
            return T::zero();
        }
        let x = rho * self.inv_scale;
        let bracket = if x < T::lit(SERIES_SWITCH) {
            // sum_m (-1)^m 4 x^{2m+1} / (m! (2m+1)(2m+3)) / (2 alpha sqrt(pi))
            let x2 = x * x;
            let mut term = x; // x^{2m+1} / m!
            let mut sum = T::zero();
            for m in 0..SERIES_TERMS {
                let mf = T::from_usize_lossy(m);
                let c = T::lit(4.0)
                    / ((T::lit(2.0) * mf + T::one()) * (T::lit(2.0) * mf + T::lit(3.0)));
                sum += term * c;
                term = -term * x2 / (mf + T::one());
                if term.abs() < T::epsilon() * T::lit(1e-3) * sum.abs() {
                    break;
                }
            }
            sum * self.inv_sqrt_pi / (T::lit(2.0) * a)
        } else {
            (T::one() / (T::lit(2.0) * a) - self.delta / (rho * rho)) * x.erf()
                + self.sqrt_delta / (rho * (T::PI() * a).sqrt()) * (-x * x).exp()
        };
        -self.inv_four_pi * rn / rho * bracket
    }

    /// `alpha dG^{dtau}/dn_y` given `rho = |r| > 0` and `rn = r . n_y`.
    #[inline(always)]
    pub fn dn_g_tau(&self, rho: T, rn: T) -> T {
        let laplace = self.inv_four_pi * rn / (rho * rho * rho);
        if self.zero_gap {
            return laplace;
        }
        let x = rho * self.inv_scale;
        let e = if x < T::lit(SERIES_SWITCH) {
            // erf(x) - 2x e^{-x^2}/sqrt(pi) = 2/sqrt(pi) sum_{n>=1} (-1)^{n+1} 2 x^{2n+1} / ((n-1)! (2n+1))
            let x2 = x * x;
            let mut term = x * x2; // x^{2n+1} / (n-1)!
            let mut sum = T::zero();
            for n in 1..=SERIES_TERMS {
                let nf = T::from_usize_lossy(n);
                sum += term * T::lit(2.0) / (T::lit(2.0) * nf + T::one());
                term = -term * x2 / nf;
                if term.abs() < T::epsilon() * T::lit(1e-3) * sum.abs() {
                    break;
                }
            }
            T::lit(2.0) * self.inv_sqrt_pi * sum
        } else {
            x.erf() - T::lit(2.0) * x * self.inv_sqrt_pi * (-x * x).exp()
        };
        laplace * e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn params(alpha: f64, h: f64) -> KernelParams<f64> {
        KernelParams::new(alpha, h).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn fundamental_values() {
        assert_eq!(fundamental(&[1.0, 2.0, 0.0], -1.0, 1.0), 0.0);
        assert_eq!(fundamental(&[1.0, 2.0, 0.0], 0.0, 1.0), 0.0);
        assert!(close(fundamental(&[0.0; 3], 1.0, 1.0 / (4.0 * PI)), 1.0, 1e-15));
        let expected = (4.0 * PI).powf(-1.5) * (-0.25f64).exp();
        assert!(close(fundamental(&[0.0, 1.0, 0.0], 1.0, 1.0), expected, 1e-15));
    }

    #[test]
    fn antideriv_tau_values() {
        let p = params(1.0, 1.0);
        assert!(close(antideriv_tau(1.0, 0.0, &p).unwrap(), 1.0 / (4.0 * PI), 1e-15));
        assert!(close(
            antideriv_tau(2.0, 1.0, &p).unwrap(),
            libm::erf(1.0) / (8.0 * PI),
            1e-15
        ));
        let g_dt0 = antideriv_t(0.0, 1.0, &p).unwrap();
        assert!(close(g_dt0, -1.0 / (4.0 * PI.powf(1.5)), 1e-15));
        assert!(close(antideriv_t(1e-8, 1.0, &p).unwrap(), g_dt0, 1e-6));
        assert!(matches!(
            antideriv_tau(0.0, 0.0, &p),
            Err(KernelError::Singular { .. })
        ));
    }

    #[test]
    fn antideriv_tau_t_limits() {
        let p = params(1.0, 1.0);
        assert!(close(antideriv_tau_t(1.0, 0.0, &p), 1.0 / (8.0 * PI), 1e-15));
        assert!(close(antideriv_tau_t(0.0, 1.0, &p), 1.0 / (2.0 * PI.powf(1.5)), 1e-15));
        assert_eq!(antideriv_tau_t(0.0, 0.0, &p), 0.0);
    }

    #[test]
    fn normal_derivative_limits() {
        let p = params(1.0, 1.0);
        let n = [0.0, 0.0, 1.0];
        let v = normal_deriv_antideriv_tau_t(&[0.0, 0.0, 1.0], &n, 0.0, &p).unwrap();
        assert!(close(v, -1.0 / (8.0 * PI), 1e-15));
        assert_eq!(normal_deriv_antideriv_tau_t(&[0.0; 3], &n, 1.0, &p).unwrap(), 0.0);
        assert!(normal_deriv_antideriv_tau_t(&[0.0; 3], &n, 0.0, &p).is_err());
        assert_eq!(
            normal_deriv_antideriv_tau_t(&[1.0, 2.0, 0.0], &n, 0.3, &p).unwrap(),
            0.0
        );

        let v = normal_deriv_antideriv_tau(&[0.0, 0.0, 2.0], &n, 0.0, &p).unwrap();
        assert!(close(v, 1.0 / (16.0 * PI), 1e-15));
        assert_eq!(
            normal_deriv_antideriv_tau(&[1.0, 2.0, 0.0], &n, 0.3, &p).unwrap(),
            0.0
        );
        assert!(normal_deriv_antideriv_tau(&[0.0; 3], &n, 1.0, &p).is_err());
        let v = normal_deriv_antideriv_tau(&[0.0, 0.0, 1.0], &n, 1.0, &p).unwrap();
        let expected = libm::erf(0.5) / (4.0 * PI) - (-0.25f64).exp() / (4.0 * PI.powf(1.5));
        assert!(close(v, expected, 1e-14));
    }

    /// The series and closed-form branches agree where both are accurate.
    #[test]
    fn series_branches_match_closed_forms_at_switch() {
        let p = params(0.7, 0.1);
        let level = p.level(0.3);
        let scale = 2.0 * (0.7f64 * 0.3).sqrt();
        for &x in &[0.45, 0.499_999, 0.500_001, 0.55] {
            let rho = x * scale;
            let rn = 0.6 * rho;
            let xe = rho / scale;
            let closed_e = libm::erf(xe) - 2.0 * xe / PI.sqrt() * (-xe * xe).exp();
            let closed_dn = PI.recip() / 4.0 * rn / rho.powi(3) * closed_e;
            assert!(close(level.dn_g_tau(rho, rn), closed_dn, 1e-12), "x = {x}");
            let closed_b = (1.0 / (2.0 * 0.7) - 0.3 / (rho * rho)) * libm::erf(xe)
                + 0.3f64.sqrt() / (rho * (PI * 0.7).sqrt()) * (-xe * xe).exp();
            let closed = -rn / rho * closed_b / (4.0 * PI);
            assert!(close(level.dn_g_tau_t(rho, rn, false), closed, 1e-12), "x = {x}");
        }
    }

    #[test]
    fn grad_fundamental_normal_matches_finite_difference() {
        let alpha = 0.5;
        let dt: f64 = 0.5;
        let r = [0.6, 0.0, 0.8];
        let n = [0.0, 0.6, 0.8];
        let h = 1e-5;
        let plus = [r[0] + h * n[0], r[1] + h * n[1], r[2] + h * n[2]];
        let minus = [r[0] - h * n[0], r[1] - h * n[1], r[2] - h * n[2]];
        let fd = alpha * (fundamental(&plus, dt, alpha) - fundamental(&minus, dt, alpha)) / (2.0 * h);
        let exact = grad_fundamental_normal(&r, &n, dt, alpha);
        assert!((fd - exact).abs() < 1e-6 * exact.abs().max(1e-3));
        assert_eq!(grad_fundamental_normal(&r, &n, 0.0, alpha), 0.0);
        assert_eq!(grad_fundamental_normal(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], 0.3, alpha), 0.0);
    }

    #[test]
    fn second_antiderivative_differentiates_to_first() {
        let p = params(0.5, 0.125);
        for &rho in &[0.05, 0.2, 1.0, 3.0] {
            let mut delta = 0.0625;
            while delta <= 0.5 {
                let h = 1e-5;
                let fd = (antideriv_tau_t(rho, delta + h, &p) - antideriv_tau_t(rho, delta - h, &p))
                    / (2.0 * h);
                let g = antideriv_tau(rho, delta, &p).unwrap();
                assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "rho {rho} delta {delta}");
                delta += 0.0625;
            }
        }
    }

    #[test]
    fn branch_continuity() {
        let p = params(0.8, 1.0);
        let n = [0.0, 0.6, 0.8];
        let r = [0.3, -0.2, 0.5];
        let rho = norm(&r);
        let small = 1e-12;
        // delta -> 0: general branch at a tiny gap vs. the limit.
        let general = TimeLevel::new(params(0.8, 1e-20), small);
        let limit = p.level(0.0);
        assert!(close(general.g_tau(rho, false), limit.g_tau(rho, false), 1e-6));
        assert!(close(general.g_tau_t(rho, false), limit.g_tau_t(rho, false), 1e-6));
        let rn = dot(&r, &n);
        assert!(close(general.dn_g_tau_t(rho, rn, false), limit.dn_g_tau_t(rho, rn, false), 1e-6));
        assert!(close(general.dn_g_tau(rho, rn), limit.dn_g_tau(rho, rn), 1e-6));
        // rho -> 0 limits.
        let level = p.level(0.7);
        assert!(close(level.g_tau(1e-9, false), level.g_tau(0.0, true), 1e-6));
        assert!(close(level.g_tau_t(1e-9, false), level.g_tau_t(0.0, true), 1e-6));
        assert!(level.dn_g_tau_t(1e-9, 1e-9 * 0.3, false).abs() < 1e-6);
    }

    #[test]
    fn temporal_weights_symmetry_and_zero_cases() {
        let p = params(1.0, 0.25);
        let r = [0.3, -0.4, 1.1];
        let minus = [-0.3, 0.4, -1.1];
        let n = [0.0, 0.0, 1.0];
        for d in 0..6 {
            let a = temporal_weight(TemporalWeightKind::SingleLayer, &r, &n, d, &p).unwrap();
            let b = temporal_weight(TemporalWeightKind::SingleLayer, &minus, &n, d, &p).unwrap();
            assert_eq!(a, b);
            let perp = [0.5, 0.7, 0.0];
            assert_eq!(
                temporal_weight(TemporalWeightKind::DoubleLayer, &perp, &n, d, &p).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn d2_uses_negated_tau_antiderivative() {
        let p = params(0.5, 0.125);
        let r = [0.2, 0.1, -0.3];
        let rho = norm(&r);
        let h = p.h_t();
        let g = |k: usize| antideriv_tau(rho, k as f64 * h, &p).unwrap();
        for d in 0..5 {
            let w = temporal_weight(TemporalWeightKind::HypersingularD2, &r, &r, d, &p).unwrap();
            let expected = if d == 0 {
                0.5 * (g(0) - g(1))
            } else {
                0.5 * (2.0 * g(d) - g(d + 1) - g(d - 1))
            };
            assert!(close(w, expected, 1e-13));
        }
    }
}
