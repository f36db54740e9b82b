//! Brute-force reference values computed without the closed-form
//! antiderivatives: the time integrals are done by adaptive Gauss quadrature
//! of the heat kernel itself.
//!
//! With `s = t - tau` the double time integrals collapse to one-dimensional
//! integrals with a hat-shaped weight:
//!
//! * `V^0 = int_0^h G(s) (h - s) ds`,
//!   `V^d = int_{(d-1)h}^{(d+1)h} G(s) (h - |s - d h|) ds`
//! * `K^d`: the same with `alpha dG/dn_y`
//! * `D^{2,0} = alpha int_0^h G`,
//!   `D^{2,d} = alpha (int_{dh}^{(d+1)h} G - int_{(d-1)h}^{dh} G)`

use crate::error::OracleError;
use crate::kernels::{KernelParams, TemporalWeightKind};
use crate::mesh::SurfaceMesh;
use crate::quadrature::{gauss01, triangle_rule, Rule1D};
use crate::scalar::{dot, norm, sub, Vec3};

/// Accuracy controls of the adaptive time quadrature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    /// Relative tolerance; values below `1e-13` are raised to it.
    pub tolerance: f64,
    /// Absolute accuracy below which integrals count as resolved.
    pub abs_tolerance: f64,
    pub max_depth: usize,
    /// Gauss points per panel.
    pub gauss_order: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            abs_tolerance: 1e-30,
            max_depth: 40,
            gauss_order: 10,
        }
    }
}

/// Value and accumulated error estimate of an oracle integral.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub error_estimate: f64,
}

fn heat_kernel(rho: f64, s: f64, alpha: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let four_a_s = 4.0 * alpha * s;
    (std::f64::consts::PI * four_a_s).powf(-1.5) * (-rho * rho / four_a_s).exp()
}

/// `alpha dG/dn_y` for `rn = (x - y) . n_y`.
fn heat_kernel_dn(rho: f64, rn: f64, s: f64, alpha: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let pa = std::f64::consts::PI * alpha;
    rn / (16.0 * pa * pa.sqrt() * s.powf(2.5)) * (-rho * rho / (4.0 * alpha * s)).exp()
}

struct Adaptive<'a> {
    rule: Rule1D<f64>,
    f: &'a dyn Fn(f64) -> f64,
    max_depth: usize,
    failed: bool,
    error: f64,
}

impl Adaptive<'_> {
    fn panel(&self, a: f64, b: f64) -> f64 {
        let w = b - a;
        self.rule
            .nodes
            .iter()
            .zip(&self.rule.weights)
            .map(|(x, wt)| wt * (self.f)(a + w * x))
            .sum::<f64>()
            * w
    }

    fn refine(&mut self, a: f64, b: f64, whole: f64, tol: f64, depth: usize) -> f64 {
        let m = 0.5 * (a + b);
        let left = self.panel(a, m);
        let right = self.panel(m, b);
        let diff = (left + right - whole).abs();
        // Below the rounding level of the panel sum no further split helps.
        let floor = 8.0 * f64::EPSILON * (left.abs() + right.abs());
        if diff <= tol.max(floor) || m <= a || m >= b {
            self.error += diff;
            return left + right;
        }
        if depth >= self.max_depth {
            self.failed = true;
            self.error += diff;
            return left + right;
        }
        self.refine(a, m, left, 0.5 * tol, depth + 1) + self.refine(m, b, right, 0.5 * tol, depth + 1)
    }
}

/// Adaptive integral of `f` over `[a, b]`; panels are graded geometrically
/// toward `a` when `a = 0`, where the kernel varies fastest.
fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, config: &OracleConfig) -> Result<OracleValue, OracleError> {
    if b <= a {
        return Ok(OracleValue {
            value: 0.0,
            error_estimate: 0.0,
        });
    }
    let tol = config.tolerance.max(1e-13);
    let mut breaks = Vec::new();
    if a == 0.0 {
        breaks.push(0.0);
        for k in (0..60).rev() {
            breaks.push(b * 0.5f64.powi(k));
        }
    } else {
        for k in 0..=8 {
            breaks.push(a + (b - a) * k as f64 / 8.0);
        }
    }
    let mut ad = Adaptive {
        rule: gauss01(config.gauss_order.max(2)),
        f,
        max_depth: config.max_depth,
        failed: false,
        error: 0.0,
    };
    let coarse: Vec<f64> = breaks.windows(2).map(|w| ad.panel(w[0], w[1])).collect();
    let scale: f64 = coarse.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let budget = (tol * scale).max(config.abs_tolerance);
    let mut total = 0.0;
    let n = coarse.len() as f64;
    for (w, c) in breaks.windows(2).zip(&coarse) {
        total += ad.refine(w[0], w[1], *c, budget / n, 0);
    }
    if ad.failed {
        return Err(OracleError::NotConverged {
            tolerance: tol,
            estimate: ad.error,
        });
    }
    Ok(OracleValue {
        value: total,
        error_estimate: ad.error,
    })
}

/// Temporal weight of block `d` by direct quadrature of the heat kernel.
///
/// Requires `|r| > 0`.
pub fn oracle_temporal_weight(
    kind: TemporalWeightKind,
    r: &Vec3<f64>,
    n_y: &Vec3<f64>,
    d: usize,
    params: &KernelParams<f64>,
    config: &OracleConfig,
) -> Result<OracleValue, OracleError> {
    let rho = norm(r);
    if !(rho > 0.0) {
        return Err(OracleError::Precondition("a positive distance |r|".into()));
    }
    let alpha = params.alpha();
    let h = params.h_t();
    let dh = d as f64 * h;
    let hat = move |s: f64| h - (s - dh).abs();
    let combine = |a: OracleValue, b: OracleValue, sign: f64, scale: f64| OracleValue {
        value: scale * (a.value + sign * b.value),
        error_estimate: scale.abs() * (a.error_estimate + b.error_estimate),
    };
    match kind {
        TemporalWeightKind::SingleLayer | TemporalWeightKind::DoubleLayer => {
            let rn = dot(r, n_y);
            if kind == TemporalWeightKind::DoubleLayer && rn == 0.0 {
                return Ok(OracleValue {
                    value: 0.0,
                    error_estimate: 0.0,
                });
            }
            let g = move |s: f64| match kind {
                TemporalWeightKind::SingleLayer => heat_kernel(rho, s, alpha),
                _ => heat_kernel_dn(rho, rn, s, alpha),
            };
            let f = move |s: f64| g(s) * hat(s);
            if d == 0 {
                integrate(&f, 0.0, h, config)
            } else {
                let lo = integrate(&f, dh - h, dh, config)?;
                let hi = integrate(&f, dh, dh + h, config)?;
                Ok(combine(lo, hi, 1.0, 1.0))
            }
        }
        TemporalWeightKind::HypersingularD2 => {
            let f = move |s: f64| heat_kernel(rho, s, alpha);
            let hi = integrate(&f, dh, dh + h, config)?;
            if d == 0 {
                return Ok(combine(hi, OracleValue { value: 0.0, error_estimate: 0.0 }, 1.0, alpha));
            }
            let lo = integrate(&f, dh - h, dh, config)?;
            Ok(combine(hi, lo, -1.0, alpha))
        }
    }
}

/// Operator whose element-pair contribution [`oracle_galerkin_entry`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleOperator {
    /// p0 x p0 single layer, one value.
    SingleLayerP0,
    /// p1 x p1 single layer, 3 x 3 values.
    SingleLayerP1,
    /// p0 x p1 double layer, 1 x 3 values.
    DoubleLayer,
    /// p1 x p1 `D^{2,d}` including `alpha n_x . n_y`, 3 x 3 values.
    HypersingularD2,
}

/// Contribution of the separated pair `(i_test, i_trial)` to block `d`.
///
/// Local basis functions follow the vertex order of each triangle; the
/// result is row-major `[test][trial]`. The spatial integral uses the product
/// of two triangle rules of order `dense_order`, the time integral
/// [`oracle_temporal_weight`] at every point pair.
#[allow(clippy::too_many_arguments)]
pub fn oracle_galerkin_entry(
    operator: OracleOperator,
    mesh: &SurfaceMesh<f64>,
    i_test: usize,
    i_trial: usize,
    d: usize,
    params: &KernelParams<f64>,
    dense_order: usize,
    config: &OracleConfig,
) -> Result<Vec<f64>, OracleError> {
    let shared = mesh.triangles()[i_test]
        .iter()
        .any(|v| mesh.triangles()[i_trial].contains(v));
    if shared || i_test == i_trial {
        return Err(OracleError::Precondition("a separated element pair".into()));
    }
    let rule = triangle_rule::<f64>(dense_order)
        .map_err(|e| OracleError::Precondition(format!("a supported spatial order ({e})")))?;
    let nx = mesh.normal(i_test);
    let ny = mesh.normal(i_trial);
    let (nt, ns, kind) = match operator {
        OracleOperator::SingleLayerP0 => (1, 1, TemporalWeightKind::SingleLayer),
        OracleOperator::SingleLayerP1 => (3, 3, TemporalWeightKind::SingleLayer),
        OracleOperator::DoubleLayer => (1, 3, TemporalWeightKind::DoubleLayer),
        OracleOperator::HypersingularD2 => (3, 3, TemporalWeightKind::HypersingularD2),
    };
    let factor = match operator {
        OracleOperator::HypersingularD2 => dot(&nx, &ny),
        _ => 1.0,
    };
    let scale = 4.0 * mesh.area(i_test) * mesh.area(i_trial);
    let hat = |a: usize, p: [f64; 2]| match a {
        0 => 1.0 - p[0] - p[1],
        1 => p[0],
        _ => p[1],
    };
    let mut out = vec![0.0; nt * ns];
    for (p, wp) in rule.nodes.iter().zip(&rule.weights) {
        let x = mesh.map_reference(i_test, p[0], p[1]);
        for (q, wq) in rule.nodes.iter().zip(&rule.weights) {
            let y = mesh.map_reference(i_trial, q[0], q[1]);
            let r = sub(&x, &y);
            let k = oracle_temporal_weight(kind, &r, &ny, d, params, config)?.value;
            let w = scale * wp * wq * factor * k;
            for a in 0..nt {
                for b in 0..ns {
                    let fa = if nt == 1 { 1.0 } else { hat(a, *p) };
                    let fb = if ns == 1 { 1.0 } else { hat(b, *q) };
                    out[a * ns + b] += w * fa * fb;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::temporal_weight;

    fn params(alpha: f64, h: f64) -> KernelParams<f64> {
        KernelParams::new(alpha, h).unwrap()
    }

    #[test]
    fn single_layer_matches_closed_form() {
        let p = params(1.0, 0.25);
        let r = [1.0, 0.0, 0.0];
        let n = [0.0, 0.0, 1.0];
        for d in [0, 1, 3] {
            let o = oracle_temporal_weight(TemporalWeightKind::SingleLayer, &r, &n, d, &p, &OracleConfig::default())
                .unwrap();
            let c = temporal_weight(TemporalWeightKind::SingleLayer, &r, &n, d, &p).unwrap();
            assert!((o.value - c).abs() <= 1e-10 * c.abs().max(1e-12), "d {d}: {} vs {c}", o.value);
        }
    }

    #[test]
    fn large_gap_weight_follows_kernel_tail() {
        // Far from the diagonal the weight is h^2 G(rho, d h), which decays
        // like (d h)^{-3/2}, not exponentially.
        let p = params(1.0, 0.25);
        let r = [1.0, 0.0, 0.0];
        let o = oracle_temporal_weight(TemporalWeightKind::SingleLayer, &r, &r, 40, &p, &OracleConfig::default())
            .unwrap();
        let c = temporal_weight(TemporalWeightKind::SingleLayer, &r, &r, 40, &p).unwrap();
        assert!((o.value - c).abs() <= 1e-8 * c.abs());
        let tail = 0.25 * 0.25 * heat_kernel(1.0, 10.0, 1.0);
        assert!((c - tail).abs() < 1e-3 * tail);
    }

    #[test]
    fn double_layer_perpendicular_is_zero() {
        let p = params(0.5, 0.125);
        let o = oracle_temporal_weight(
            TemporalWeightKind::DoubleLayer,
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            2,
            &p,
            &OracleConfig::default(),
        )
        .unwrap();
        assert_eq!(o.value, 0.0);
    }

    #[test]
    fn zero_distance_is_rejected() {
        let p = params(0.5, 0.125);
        let r = [0.0; 3];
        assert!(matches!(
            oracle_temporal_weight(TemporalWeightKind::SingleLayer, &r, &r, 1, &p, &OracleConfig::default()),
            Err(OracleError::Precondition(_))
        ));
    }

    #[test]
    fn halving_tolerance_stays_within_estimate() {
        let p = params(0.5, 0.125);
        let r = [0.05, 0.02, 0.0];
        let n = [0.6, 0.8, 0.0];
        for kind in [
            TemporalWeightKind::SingleLayer,
            TemporalWeightKind::DoubleLayer,
            TemporalWeightKind::HypersingularD2,
        ] {
            let c1 = OracleConfig {
                tolerance: 1e-10,
                ..OracleConfig::default()
            };
            let c2 = OracleConfig {
                tolerance: 5e-11,
                ..OracleConfig::default()
            };
            let a = oracle_temporal_weight(kind, &r, &n, 0, &p, &c1).unwrap();
            let b = oracle_temporal_weight(kind, &r, &n, 0, &p, &c2).unwrap();
            assert!((a.value - b.value).abs() <= a.error_estimate + b.error_estimate + 1e-15 * a.value.abs());
        }
    }
}
