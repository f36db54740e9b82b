//! Boundary data projections, interior potentials and error measures.

use rayon::prelude::*;

use crate::assembly::{p1_mass_matrix, SpaceTimeVector};
use crate::error::FieldError;
use crate::kernels::{fundamental, grad_fundamental_normal, KernelParams};
use crate::mesh::{SurfaceMesh, TimeGrid};
use crate::quadrature::{gauss01, triangle_rule, QuadratureConfig};
use crate::scalar::{dot, norm, sub, Real, Vec3};
use crate::solver::DenseLu;

/// Discrete space-time boundary spaces (p0 or p1 in space, p0 in time).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundarySpace {
    /// Piecewise constant in space and time.
    X00,
    /// Piecewise linear continuous in space, constant in time.
    X10,
}

/// `u(x, t) = G_alpha(x - y*, t)` with `y*` outside the domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManufacturedSolution<T: Real> {
    pub source: Vec3<T>,
    pub alpha: T,
}

impl<T: Real> ManufacturedSolution<T> {
    pub fn new(source: Vec3<T>, alpha: T) -> Self {
        Self { source, alpha }
    }

    /// Dirichlet trace (and interior value).
    pub fn value(&self, x: &Vec3<T>, t: T) -> T {
        fundamental(&sub(x, &self.source), t, self.alpha)
    }

    /// Neumann datum `alpha du/dn` for the outward normal `n`.
    pub fn flux(&self, x: &Vec3<T>, n: &Vec3<T>, t: T) -> T {
        grad_fundamental_normal(&sub(x, &self.source), n, t, self.alpha)
    }
}

/// Interior evaluation point with `t = k h_t + eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint<T: Real> {
    pub x: Vec3<T>,
    pub t: T,
    pub k: usize,
    pub eps: T,
}

impl<T: Real> EvalPoint<T> {
    /// Splits `t` on the grid. Times within `1e-12` steps of a grid node snap
    /// to it, giving `eps = 0`.
    pub fn new(x: Vec3<T>, t: T, h_t: T) -> Self {
        let q = (t / h_t + T::lit(1e-12)).floor().max(T::zero());
        let k = q.to_usize().unwrap_or(0);
        let eps = (t - T::from_usize_lossy(k) * h_t).max(T::zero());
        Self { x, t, k, eps }
    }
}

/// Time quadrature order per step and triangle order used by projections and
/// error norms.
const TIME_POINTS: usize = 4;
const SPACE_ORDER: usize = 6;

struct SpaceTimeRule<T: Real> {
    tri_nodes: Vec<[T; 2]>,
    tri_weights: Vec<T>,
    time_nodes: Vec<T>,
    time_weights: Vec<T>,
}

impl<T: Real> SpaceTimeRule<T> {
    fn new() -> Self {
        let tri = triangle_rule::<T>(SPACE_ORDER).expect("supported order");
        let g = gauss01::<T>(TIME_POINTS);
        Self {
            tri_nodes: tri.nodes,
            tri_weights: tri.weights,
            time_nodes: g.nodes,
            time_weights: g.weights,
        }
    }
}

/// Scalar function of `(x, n_x, t)` on the space-time boundary.
pub trait BoundaryFn<T>: Fn(&Vec3<T>, &Vec3<T>, T) -> T + Sync {}
impl<T, F: Fn(&Vec3<T>, &Vec3<T>, T) -> T + Sync> BoundaryFn<T> for F {}

/// `L^2(Sigma_h)` projection of `f` onto `space`.
pub fn project_to_space<T: Real, F: BoundaryFn<T>>(
    f: &F,
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
    space: BoundarySpace,
) -> Result<SpaceTimeVector<T>, FieldError> {
    let rule = SpaceTimeRule::<T>::new();
    let h = grid.step();
    let ne = mesh.n_elements();
    match space {
        BoundarySpace::X00 => {
            let mut out = SpaceTimeVector::zeros(grid.n_steps(), ne);
            for i in 0..grid.n_steps() {
                let t0 = grid.node(i);
                let row: Vec<T> = (0..ne)
                    .into_par_iter()
                    .map(|e| {
                        let n = mesh.normal(e);
                        let mut s = T::zero();
                        for (p, wp) in rule.tri_nodes.iter().zip(&rule.tri_weights) {
                            let x = mesh.map_reference(e, p[0], p[1]);
                            for (tau, wt) in rule.time_nodes.iter().zip(&rule.time_weights) {
                                s += *wp * *wt * f(&x, &n, t0 + *tau * h);
                            }
                        }
                        // weights sum to 1/2 in space and 1 in time
                        T::lit(2.0) * s
                    })
                    .collect();
                out.step_mut(i).copy_from_slice(&row);
            }
            Ok(out)
        }
        BoundarySpace::X10 => {
            let nv = mesh.n_vertices();
            let lu = DenseLu::new(nv, &p1_mass_matrix(mesh))?;
            let mut out = SpaceTimeVector::zeros(grid.n_steps(), nv);
            for i in 0..grid.n_steps() {
                let t0 = grid.node(i);
                // Time-averaged load vector.
                let locals: Vec<[T; 3]> = (0..ne)
                    .into_par_iter()
                    .map(|e| {
                        let n = mesh.normal(e);
                        let scale = T::lit(2.0) * mesh.area(e);
                        let mut b = [T::zero(); 3];
                        for (p, wp) in rule.tri_nodes.iter().zip(&rule.tri_weights) {
                            let x = mesh.map_reference(e, p[0], p[1]);
                            let mut avg = T::zero();
                            for (tau, wt) in rule.time_nodes.iter().zip(&rule.time_weights) {
                                avg += *wt * f(&x, &n, t0 + *tau * h);
                            }
                            let phi = [T::one() - p[0] - p[1], p[0], p[1]];
                            for a in 0..3 {
                                b[a] += scale * *wp * avg * phi[a];
                            }
                        }
                        b
                    })
                    .collect();
                let mut load = vec![T::zero(); nv];
                for (e, b) in locals.iter().enumerate() {
                    for (a, &node) in mesh.triangles()[e].iter().enumerate() {
                        load[node] += b[a];
                    }
                }
                lu.solve_in_place(&mut load);
                out.step_mut(i).copy_from_slice(&load);
            }
            Ok(out)
        }
    }
}

/// Value of the discrete function `coeffs` in `space` at reference point
/// `(u, v)` of element `e` and time step `i`.
fn discrete_value<T: Real>(
    coeffs: &SpaceTimeVector<T>,
    space: BoundarySpace,
    mesh: &SurfaceMesh<T>,
    e: usize,
    i: usize,
    u: T,
    v: T,
) -> T {
    match space {
        BoundarySpace::X00 => coeffs.get(i, e),
        BoundarySpace::X10 => {
            let tri = mesh.triangles()[e];
            let step = coeffs.step(i);
            step[tri[0]] * (T::one() - u - v) + step[tri[1]] * u + step[tri[2]] * v
        }
    }
}

/// `||f - f_h|| / ||f||` in `L^2(Sigma_h)`.
pub fn relative_error_sigma<T: Real, F: BoundaryFn<T>>(
    coeffs: &SpaceTimeVector<T>,
    f: &F,
    space: BoundarySpace,
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
) -> Result<T, FieldError> {
    let expected = match space {
        BoundarySpace::X00 => mesh.n_elements(),
        BoundarySpace::X10 => mesh.n_vertices(),
    };
    if coeffs.n_dofs() != expected || coeffs.n_steps() != grid.n_steps() {
        return Err(FieldError::DimensionMismatch {
            expected: expected * grid.n_steps(),
            got: coeffs.len(),
        });
    }
    let rule = SpaceTimeRule::<T>::new();
    let h = grid.step();
    // Per-element sums are added in element order so the result does not
    // depend on the number of workers.
    let parts: Vec<(T, T)> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            let n = mesh.normal(e);
            let scale = T::lit(2.0) * mesh.area(e) * h;
            let mut err = T::zero();
            let mut nrm = T::zero();
            for i in 0..grid.n_steps() {
                let t0 = grid.node(i);
                for (p, wp) in rule.tri_nodes.iter().zip(&rule.tri_weights) {
                    let x = mesh.map_reference(e, p[0], p[1]);
                    let fh = discrete_value(coeffs, space, mesh, e, i, p[0], p[1]);
                    for (tau, wt) in rule.time_nodes.iter().zip(&rule.time_weights) {
                        let fv = f(&x, &n, t0 + *tau * h);
                        let w = scale * *wp * *wt;
                        err += w * (fv - fh) * (fv - fh);
                        nrm += w * fv * fv;
                    }
                }
            }
            (err, nrm)
        })
        .collect();
    let (err, nrm) = parts
        .iter()
        .fold((T::zero(), T::zero()), |a, b| (a.0 + b.0, a.1 + b.1));
    if nrm <= T::zero() {
        return Err(FieldError::ZeroNorm);
    }
    Ok((err / nrm).sqrt())
}

/// Estimated orders of convergence `log2(e_{k-1} / e_k)`.
pub fn eoc(errors: &[f64]) -> Result<Vec<f64>, FieldError> {
    if errors.iter().any(|&e| !(e > 0.0)) {
        return Err(FieldError::NonPositive);
    }
    Ok(errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
}

/// Potential values plus the indices of points that lie suspiciously close
/// to the boundary (distance below `1e-8` times the mesh diameter).
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialValues<T: Real> {
    pub values: Vec<T>,
    pub near_boundary: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Layer {
    Single,
    Double,
}

fn potential<T: Real>(
    layer: Layer,
    density: &SpaceTimeVector<T>,
    points: &[EvalPoint<T>],
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
    params: &KernelParams<T>,
    config: &QuadratureConfig,
) -> Result<PotentialValues<T>, FieldError> {
    let expected = match layer {
        Layer::Single => mesh.n_elements(),
        Layer::Double => mesh.n_vertices(),
    };
    if density.n_dofs() != expected || density.n_steps() != grid.n_steps() {
        return Err(FieldError::DimensionMismatch {
            expected: expected * grid.n_steps(),
            got: density.len(),
        });
    }
    let rule = triangle_rule::<T>(config.regular_order)
        .map_err(|e| FieldError::Kernel(crate::error::KernelError::InvalidParameter(e.to_string())))?;
    // Physical quadrature points per element.
    let nq = rule.len();
    let mut qpts = Vec::with_capacity(mesh.n_elements() * nq);
    for e in 0..mesh.n_elements() {
        for p in &rule.nodes {
            qpts.push(mesh.map_reference(e, p[0], p[1]));
        }
    }
    let h = grid.step();
    let n_steps = grid.n_steps();
    let close = T::lit(1e-8) * mesh.diameter();
    let results: Vec<(T, bool)> = points
        .par_iter()
        .map(|pt| {
            let k = pt.k.min(n_steps);
            // Levels m h + eps for m = 0..=k, plus the zero gap.
            let levels: Vec<_> = (0..=k)
                .map(|m| params.level(T::from_usize_lossy(m) * h + pt.eps))
                .collect();
            let zero = params.level(T::zero());
            let current = pt.eps > T::zero() && k < n_steps;
            let mut total = T::zero();
            let mut min_dist = T::infinity();
            let mut vals = vec![T::zero(); k + 1];
            for e in 0..mesh.n_elements() {
                let ny = mesh.normal(e);
                let scale = T::lit(2.0) * mesh.area(e);
                let tri = mesh.triangles()[e];
                for (q, (node, w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
                    let y = qpts[e * nq + q];
                    let r = sub(&pt.x, &y);
                    let rho = norm(&r);
                    min_dist = min_dist.min(rho);
                    let rn = dot(&r, &ny);
                    let kernel = |lev: &crate::kernels::TimeLevel<T>| match layer {
                        Layer::Single => lev.g_tau(rho, false),
                        Layer::Double => lev.dn_g_tau(rho, rn),
                    };
                    for (m, lev) in levels.iter().enumerate() {
                        vals[m] = kernel(lev);
                    }
                    let coeff = |step: usize| match layer {
                        Layer::Single => density.get(step, e),
                        Layer::Double => {
                            let s = density.step(step);
                            s[tri[0]] * (T::one() - node[0] - node[1]) + s[tri[1]] * node[0] + s[tri[2]] * node[1]
                        }
                    };
                    let mut acc = T::zero();
                    for d in 0..k {
                        acc += coeff(k - d - 1) * (vals[d] - vals[d + 1]);
                    }
                    if current {
                        acc += coeff(k) * (kernel(&zero) - vals[0]);
                    }
                    total += scale * *w * acc;
                }
            }
            (total, min_dist < close)
        })
        .collect();
    let near_boundary = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1)
        .map(|(i, _)| i)
        .collect();
    Ok(PotentialValues {
        values: results.into_iter().map(|r| r.0).collect(),
        near_boundary,
    })
}

/// Single-layer potential of the p0 density `w` at interior points.
pub fn eval_single_layer_potential<T: Real>(
    w: &SpaceTimeVector<T>,
    points: &[EvalPoint<T>],
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
    params: &KernelParams<T>,
    config: &QuadratureConfig,
) -> Result<PotentialValues<T>, FieldError> {
    potential(Layer::Single, w, points, mesh, grid, params, config)
}

/// Double-layer potential of the p1 density `u` at interior points.
pub fn eval_double_layer_potential<T: Real>(
    u: &SpaceTimeVector<T>,
    points: &[EvalPoint<T>],
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
    params: &KernelParams<T>,
    config: &QuadratureConfig,
) -> Result<PotentialValues<T>, FieldError> {
    potential(Layer::Double, u, points, mesh, grid, params, config)
}

/// Representation formula `V~w - Wu` at interior points.
pub fn represent<T: Real>(
    u: &SpaceTimeVector<T>,
    w: &SpaceTimeVector<T>,
    points: &[EvalPoint<T>],
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
    params: &KernelParams<T>,
    config: &QuadratureConfig,
) -> Result<PotentialValues<T>, FieldError> {
    let sl = eval_single_layer_potential(w, points, mesh, grid, params, config)?;
    let dl = eval_double_layer_potential(u, points, mesh, grid, params, config)?;
    let mut near = sl.near_boundary;
    near.extend(dl.near_boundary);
    near.sort_unstable();
    near.dedup();
    Ok(PotentialValues {
        values: sl.values.iter().zip(&dl.values).map(|(a, b)| *a - *b).collect(),
        near_boundary: near,
    })
}

/// Relative discrete `l^2` error of `approx` against `exact`.
pub fn relative_l2<T: Real>(approx: &[T], exact: &[T]) -> Result<T, FieldError> {
    if approx.len() != exact.len() {
        return Err(FieldError::DimensionMismatch {
            expected: exact.len(),
            got: approx.len(),
        });
    }
    let nrm: T = exact.iter().map(|&v| v * v).sum();
    if nrm <= T::zero() {
        return Err(FieldError::ZeroNorm);
    }
    let err: T = approx.iter().zip(exact).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((err / nrm).sqrt())
}

/// Deterministic interior sample of `[-0.5, 0.5]^3 x [0.25, 0.75]`.
///
/// Space: the cell centres of a `22^3` lattice in lexicographic order
/// (x slowest), truncated to `count` points. Time: cycles through the 11
/// values `0.25 + 0.05 j`.
pub fn interior_points<T: Real>(count: usize, h_t: T) -> Vec<EvalPoint<T>> {
    const N: usize = 22;
    let c = |i: usize| T::lit(-0.5 + (i as f64 + 0.5) / N as f64);
    let mut out = Vec::with_capacity(count.min(N * N * N));
    'outer: for i in 0..N {
        for j in 0..N {
            for k in 0..N {
                if out.len() >= count {
                    break 'outer;
                }
                let idx = out.len();
                let t = T::lit(0.25 + 0.05 * (idx % 11) as f64);
                out.push(EvalPoint::new([c(i), c(j), c(k)], t, h_t));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_cube_surface;

    #[test]
    fn eoc_examples() {
        assert_eq!(eoc(&[4.0, 2.0]).unwrap(), vec![1.0]);
        assert_eq!(eoc(&[1.0, 0.25]).unwrap(), vec![2.0]);
        let e = eoc(&[6.07e-1, 4.28e-1]).unwrap();
        assert!((e[0] - 0.50).abs() < 0.005);
        assert!(matches!(eoc(&[1.0, 0.0]), Err(FieldError::NonPositive)));
    }

    #[test]
    fn eval_point_split() {
        let p = EvalPoint::<f64>::new([0.0; 3], 0.3, 0.125);
        assert_eq!(p.k, 2);
        assert!((p.eps - 0.05).abs() < 1e-15);
        let q = EvalPoint::<f64>::new([0.0; 3], 0.25, 0.125);
        assert_eq!((q.k, q.eps), (2, 0.0));
    }

    #[test]
    fn constants_and_linears_are_reproduced() {
        let mesh = generate_cube_surface::<f64>(2, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let c = |_: &Vec3<f64>, _: &Vec3<f64>, _: f64| 2.5_f64;
        for space in [BoundarySpace::X00, BoundarySpace::X10] {
            let p = project_to_space(&c, &mesh, &grid, space).unwrap();
            assert!(p.as_slice().iter().all(|v| (v - 2.5).abs() < 1e-12));
            assert!(relative_error_sigma(&p, &c, space, &mesh, &grid).unwrap() < 1e-12);
        }
        let lin = |x: &Vec3<f64>, _: &Vec3<f64>, _: f64| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2];
        let p = project_to_space(&lin, &mesh, &grid, BoundarySpace::X10).unwrap();
        for (j, v) in mesh.vertices().iter().enumerate() {
            assert!((p.get(1, j) - lin(v, v, 0.0)).abs() < 1e-12);
        }
        let zero = |_: &Vec3<f64>, _: &Vec3<f64>, _: f64| 0.0;
        assert!(matches!(
            relative_error_sigma(&p, &zero, BoundarySpace::X10, &mesh, &grid),
            Err(FieldError::ZeroNorm)
        ));
    }

    #[test]
    fn zero_density_gives_zero_potential() {
        let mesh = generate_cube_surface::<f64>(1, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let params = KernelParams::new(0.5, grid.step()).unwrap();
        let pts = interior_points(20, grid.step());
        let w = SpaceTimeVector::zeros(4, mesh.n_elements());
        let u = SpaceTimeVector::zeros(4, mesh.n_vertices());
        let r = represent(&u, &w, &pts, &mesh, &grid, &params, &QuadratureConfig::default()).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert!(r.near_boundary.is_empty());
    }

    #[test]
    fn interior_points_layout() {
        let pts = interior_points::<f64>(10_000, 0.125);
        assert_eq!(pts.len(), 10_000);
        assert!(pts.iter().all(|p| p.x.iter().all(|c| c.abs() < 0.5)));
        assert!(pts.iter().all(|p| p.t >= 0.25 - 1e-15 && p.t <= 0.75 + 1e-15));
        assert!((pts[0].x[0] + 0.5 - 0.5 / 22.0).abs() < 1e-15);
        assert!((pts[12].t - 0.3).abs() < 1e-15);
    }
}
