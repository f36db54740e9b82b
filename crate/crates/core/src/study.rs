//! Manufactured-solution solves and convergence studies on the cube.

use std::fmt::Write as _;
use std::time::Instant;

use crate::assembly::{
    p1_mass_matrix, AssemblyOptions, Assembler, BlockToeplitzMatrix, Space, SpaceTimeVector,
};
use crate::error::{FieldError, StudyError};
use crate::field::{
    eoc, interior_points, project_to_space, relative_error_sigma, relative_l2, represent, BoundarySpace,
    ManufacturedSolution,
};
use crate::mesh::{generate_cube_surface, SurfaceMesh, TimeGrid};
use crate::quadrature::QuadratureConfig;
use crate::scalar::Vec3;
use crate::solver::{
    fgmres, forward_block_solve, Combination, FgmresOptions, ForwardBlockSolver, LinearOperator,
    MassSandwichPreconditioner, SolveReport, Transposed,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Problem {
    /// Dirichlet data given, Neumann data computed from `V w = (M/2 + K) g`.
    Dirichlet,
    /// Neumann data given, Dirichlet data computed from `D u = (M'/2 - K') h`.
    Neumann,
}

/// Right preconditioner used inside FGMRES.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preconditioner {
    None,
    /// Time marching with the system matrix itself and a loose inner tolerance.
    TimeMarching,
    /// `x -> V11^{-1} x` by time marching (hypersingular system only).
    SingleLayerInverse,
    /// `(h_t M)^{-1} V11 (h_t M)^{-1}` (hypersingular system only).
    MassSandwich,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub problem: Problem,
    pub alpha: f64,
    pub end_time: f64,
    /// Time steps at level 0.
    pub base_steps: usize,
    /// Cube subdivisions per edge at level 0.
    pub base_subdivisions: usize,
    pub half_width: f64,
    pub source: Vec3<f64>,
    pub quadrature: QuadratureConfig,
    pub workers: usize,
    pub deterministic: bool,
    pub interior_points: usize,
    pub fgmres: FgmresOptions,
    pub preconditioner: Preconditioner,
    /// Also solve by time marching and record the agreement with FGMRES.
    pub cross_check: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Dirichlet,
            alpha: 0.5,
            end_time: 1.0,
            base_steps: 8,
            base_subdivisions: 4,
            half_width: 1.0,
            source: [0.0, 0.0, 1.5],
            quadrature: QuadratureConfig::default(),
            workers: 0,
            deterministic: true,
            interior_points: 10_000,
            fgmres: FgmresOptions::default(),
            preconditioner: Preconditioner::TimeMarching,
            cross_check: true,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: &str| Err(StudyError::InvalidParameter(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.end_time > 0.0 && self.end_time.is_finite()) {
            return bad("end time must be positive");
        }
        if self.base_steps == 0 || self.base_subdivisions == 0 {
            return bad("time steps and cube subdivisions must be positive");
        }
        if !(self.half_width > 0.0) {
            return bad("half width must be positive");
        }
        let s = self.source;
        if s.iter().any(|c| !c.is_finite()) || s.iter().all(|c| c.abs() < self.half_width) {
            return bad("source point must lie outside the cube");
        }
        Ok(())
    }

    pub fn mesh(&self, level: usize) -> Result<SurfaceMesh<f64>, StudyError> {
        let mut mesh = generate_cube_surface(self.base_subdivisions, self.half_width)?;
        for _ in 0..level {
            mesh = mesh.refine()?;
        }
        Ok(mesh)
    }

    pub fn grid(&self, level: usize) -> Result<TimeGrid<f64>, StudyError> {
        Ok(TimeGrid::new(self.end_time, self.base_steps << level)?)
    }

    fn assembly_options(&self) -> AssemblyOptions {
        AssemblyOptions {
            workers: self.workers,
            deterministic: self.deterministic,
            quadrature: self.quadrature,
        }
    }
}

/// Everything produced by one solve.
#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub problem: Problem,
    pub n_steps: usize,
    pub n_elements: usize,
    pub n_vertices: usize,
    /// Computed Cauchy datum: `w_h` (p0) for Dirichlet, `u_h` (p1) for Neumann.
    pub solution: SpaceTimeVector<f64>,
    /// Projected given datum: `g_h` (p1) for Dirichlet, `h_h` (p0) for Neumann.
    pub data: SpaceTimeVector<f64>,
    /// Relative errors are NaN when the exact data vanish identically.
    pub err_computed: f64,
    pub err_projected: f64,
    /// `None` when no interior points were requested.
    pub err_repr: Option<f64>,
    pub near_boundary_points: usize,
    /// Representation-formula values at the interior sample points.
    pub interior_values: Vec<f64>,
    pub report: SolveReport,
    /// Relative difference between FGMRES and time-marching solutions.
    pub forward_agreement: Option<f64>,
    pub timings: Vec<(String, f64)>,
    pub kernel_passes: u64,
    pub element_pairs: u64,
}

fn timed<R>(timings: &mut Vec<(String, f64)>, name: &str, f: impl FnOnce() -> R) -> R {
    let start = Instant::now();
    let r = f();
    timings.push((name.to_string(), start.elapsed().as_secs_f64()));
    r
}

/// Relative errors against identically zero data are reported as NaN.
fn undefined_if_zero(r: Result<f64, FieldError>) -> Result<f64, StudyError> {
    match r {
        Err(FieldError::ZeroNorm) => Ok(f64::NAN),
        other => Ok(other?),
    }
}

fn solve_system(
    matrix: &BlockToeplitzMatrix<f64>,
    rhs: &SpaceTimeVector<f64>,
    config: &StudyConfig,
    precond: Option<&dyn LinearOperator<f64>>,
) -> Result<(SpaceTimeVector<f64>, SolveReport, Option<f64>), StudyError> {
    let (x, report) = fgmres(matrix, rhs, config.fgmres, precond)?;
    let agreement = if config.cross_check {
        let y = forward_block_solve(matrix, rhs, 1e-12)?;
        let mut diff = y.clone();
        diff.axpy(-1.0, &x);
        let n = y.norm();
        Some(if n > 0.0 { diff.norm() / n } else { diff.norm() })
    } else {
        None
    };
    Ok((x, report, agreement))
}

struct Prepared {
    problem: Problem,
    data: SpaceTimeVector<f64>,
    rhs: SpaceTimeVector<f64>,
}

struct Solved {
    problem: Problem,
    data: SpaceTimeVector<f64>,
    solution: SpaceTimeVector<f64>,
    report: SolveReport,
    agreement: Option<f64>,
}

/// Solves the configured manufactured problem on the given mesh and grid.
pub fn solve_manufactured(
    config: &StudyConfig,
    mesh: &SurfaceMesh<f64>,
    grid: &TimeGrid<f64>,
) -> Result<SolveOutcome, StudyError> {
    let mut out = solve_problems(config, mesh, grid, &[config.problem])?;
    Ok(out.remove(0))
}

/// Solves several manufactured problems on one mesh and grid, sharing the
/// assembled `K` and `V`. `config.problem` is ignored.
///
/// Peak memory is one dense block Toeplitz operator: `K` is released after
/// both right-hand sides are formed and `V` is turned into `D` in place.
pub fn solve_problems(
    config: &StudyConfig,
    mesh: &SurfaceMesh<f64>,
    grid: &TimeGrid<f64>,
    problems: &[Problem],
) -> Result<Vec<SolveOutcome>, StudyError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| StudyError::InvalidParameter(format!("worker pool: {e}")))?;
    pool.install(|| solve_problems_in_pool(config, mesh, grid, problems))
}

fn solve_problems_in_pool(
    config: &StudyConfig,
    mesh: &SurfaceMesh<f64>,
    grid: &TimeGrid<f64>,
    problems: &[Problem],
) -> Result<Vec<SolveOutcome>, StudyError> {
    let exact = ManufacturedSolution::new(config.source, config.alpha);
    let value = |x: &Vec3<f64>, _: &Vec3<f64>, t: f64| exact.value(x, t);
    let flux = |x: &Vec3<f64>, n: &Vec3<f64>, t: f64| exact.flux(x, n, t);
    let asm = Assembler::new(mesh, *grid, config.alpha, config.assembly_options())?;
    let mut timings = Vec::new();
    let mass = asm.mass();

    let mut prepared = Vec::new();
    {
        let k = timed(&mut timings, "assemble K", || asm.double_layer())?;
        for &problem in problems {
            let (data, rhs) = match problem {
                Problem::Dirichlet => {
                    let g = project_to_space(&value, mesh, grid, BoundarySpace::X10)?;
                    let op = Combination::new().term(0.5, &mass).term(1.0, &k);
                    let rhs = op.apply(&g)?;
                    (g, rhs)
                }
                Problem::Neumann => {
                    let h = project_to_space(&flux, mesh, grid, BoundarySpace::X00)?;
                    let op = Combination::new()
                        .term(0.5, Transposed(&mass))
                        .term(-1.0, Transposed(&k));
                    let rhs = op.apply(&h)?;
                    (h, rhs)
                }
            };
            prepared.push(Prepared { problem, data, rhs });
        }
    }

    let wants_neumann = problems.contains(&Problem::Neumann);
    let v11 = match config.preconditioner {
        Preconditioner::SingleLayerInverse | Preconditioner::MassSandwich if wants_neumann => Some(timed(
            &mut timings,
            "assemble V11",
            || asm.single_layer(Space::P1, Space::P1),
        )?),
        _ => None,
    };
    let v = timed(&mut timings, "assemble V", || asm.single_layer(Space::P0, Space::P0))?;

    let mut solved = Vec::new();
    for p in prepared.iter().filter(|p| p.problem == Problem::Dirichlet) {
        let marching;
        let precond: Option<&dyn LinearOperator<f64>> = match config.preconditioner {
            Preconditioner::TimeMarching => {
                marching = ForwardBlockSolver::new(&v, 1e-2)?;
                Some(&marching)
            }
            _ => None,
        };
        let (w, report, agreement) =
            timed(&mut timings, "solve Dirichlet", || solve_system(&v, &p.rhs, config, precond))?;
        solved.push(Solved {
            problem: p.problem,
            data: p.data.clone(),
            solution: w,
            report,
            agreement,
        });
    }
    if wants_neumann {
        let d = timed(&mut timings, "assemble D", || asm.hypersingular_from_single_layer(v))?;
        for p in prepared.iter().filter(|p| p.problem == Problem::Neumann) {
            let (marching, sandwich);
            let precond: Option<&dyn LinearOperator<f64>> = match config.preconditioner {
                Preconditioner::None => None,
                Preconditioner::TimeMarching => {
                    marching = ForwardBlockSolver::new(&d, 1e-2)?;
                    Some(&marching)
                }
                Preconditioner::SingleLayerInverse => {
                    marching = ForwardBlockSolver::new(v11.as_ref().expect("assembled above"), 1e-2)?;
                    Some(&marching)
                }
                Preconditioner::MassSandwich => {
                    sandwich = MassSandwichPreconditioner::new(
                        v11.as_ref().expect("assembled above"),
                        &p1_mass_matrix(mesh),
                        grid.step(),
                    )?;
                    Some(&sandwich)
                }
            };
            let (u, report, agreement) =
                timed(&mut timings, "solve Neumann", || solve_system(&d, &p.rhs, config, precond))?;
            solved.push(Solved {
                problem: p.problem,
                data: p.data.clone(),
                solution: u,
                report,
                agreement,
            });
        }
    } else {
        drop(v);
    }
    drop(v11);

    let points = interior_points(config.interior_points, grid.step());
    let mut outcomes = Vec::new();
    for &problem in problems {
        let s = solved.iter().find(|s| s.problem == problem).expect("solved above");
        let mut own_timings = timings.clone();
        let (err_computed, err_projected, u_h, w_h) = match problem {
            Problem::Dirichlet => {
                let proj = project_to_space(&flux, mesh, grid, BoundarySpace::X00)?;
                (
                    undefined_if_zero(relative_error_sigma(&s.solution, &flux, BoundarySpace::X00, mesh, grid))?,
                    undefined_if_zero(relative_error_sigma(&proj, &flux, BoundarySpace::X00, mesh, grid))?,
                    &s.data,
                    &s.solution,
                )
            }
            Problem::Neumann => {
                let proj = project_to_space(&value, mesh, grid, BoundarySpace::X10)?;
                (
                    undefined_if_zero(relative_error_sigma(&s.solution, &value, BoundarySpace::X10, mesh, grid))?,
                    undefined_if_zero(relative_error_sigma(&proj, &value, BoundarySpace::X10, mesh, grid))?,
                    &s.solution,
                    &s.data,
                )
            }
        };
        let (err_repr, near_boundary_points, interior_values) = if points.is_empty() {
            (None, 0, Vec::new())
        } else {
            let vals = timed(&mut own_timings, "representation", || {
                represent(u_h, w_h, &points, mesh, grid, asm.params(), &config.quadrature)
            })?;
            let reference: Vec<f64> = points.iter().map(|p| exact.value(&p.x, p.t)).collect();
            (
                Some(undefined_if_zero(relative_l2(&vals.values, &reference))?),
                vals.near_boundary.len(),
                vals.values,
            )
        };
        outcomes.push(SolveOutcome {
            problem,
            n_steps: grid.n_steps(),
            n_elements: mesh.n_elements(),
            n_vertices: mesh.n_vertices(),
            solution: s.solution.clone(),
            data: s.data.clone(),
            err_computed,
            err_projected,
            err_repr,
            near_boundary_points,
            interior_values,
            report: s.report.clone(),
            forward_agreement: s.agreement,
            timings: own_timings,
            kernel_passes: asm.counters().kernel_passes(),
            element_pairs: asm.counters().element_pairs(),
        });
    }
    Ok(outcomes)
}

/// Solves the configured problem on refinement level `level`.
pub fn run_level(config: &StudyConfig, level: usize) -> Result<SolveOutcome, StudyError> {
    let mesh = config.mesh(level)?;
    let grid = config.grid(level)?;
    solve_manufactured(config, &mesh, &grid)
}

/// Solves `problems` on refinement level `level`, sharing assembly.
pub fn run_level_problems(
    config: &StudyConfig,
    level: usize,
    problems: &[Problem],
) -> Result<Vec<SolveOutcome>, StudyError> {
    let mesh = config.mesh(level)?;
    let grid = config.grid(level)?;
    solve_problems(config, &mesh, &grid, problems)
}

/// One row per level of a convergence table.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub n_steps: usize,
    pub n_elements: usize,
    pub err_computed: f64,
    pub eoc_computed: Option<f64>,
    pub err_projected: f64,
    pub eoc_projected: Option<f64>,
    pub err_repr: f64,
    pub eoc_repr: Option<f64>,
}

/// Builds the table rows with orders of convergence from per-level outcomes.
pub fn convergence_rows(outcomes: &[&SolveOutcome]) -> Result<Vec<ConvergenceRow>, StudyError> {
    let col = |f: &dyn Fn(&SolveOutcome) -> f64| -> Result<(Vec<f64>, Vec<Option<f64>>), StudyError> {
        let e: Vec<f64> = outcomes.iter().map(|o| f(o)).collect();
        let mut o = vec![None];
        if e.len() > 1 {
            o.extend(eoc(&e)?.into_iter().map(Some));
        }
        Ok((e, o))
    };
    let (c, co) = col(&|o| o.err_computed)?;
    let (p, po) = col(&|o| o.err_projected)?;
    let (r, ro) = col(&|o| o.err_repr.unwrap_or(f64::NAN))?;
    Ok((0..outcomes.len())
        .map(|i| ConvergenceRow {
            n_steps: outcomes[i].n_steps,
            n_elements: outcomes[i].n_elements,
            err_computed: c[i],
            eoc_computed: co[i],
            err_projected: p[i],
            eoc_projected: po[i],
            err_repr: r[i],
            eoc_repr: ro[i],
        })
        .collect())
}

pub const CSV_HEADER: &str = "Et,Ex,err_computed,eoc_computed,err_projected,eoc_projected,err_repr,eoc_repr";

/// Renders rows as CSV; orders of convergence are blank on the first row.
pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6e},{},{:.6e},{},{:.6e},{}",
            r.n_steps,
            r.n_elements,
            r.err_computed,
            opt(r.eoc_computed),
            r.err_projected,
            opt(r.eoc_projected),
            r.err_repr,
            opt(r.eoc_repr)
        );
    }
    s
}

/// Runs levels `0..n_levels` for every problem in `problems`. The result is
/// indexed by level, then by problem in the given order.
pub fn run_convergence(
    config: &StudyConfig,
    n_levels: usize,
    problems: &[Problem],
    mut progress: impl FnMut(usize, &[SolveOutcome]),
) -> Result<Vec<Vec<SolveOutcome>>, StudyError> {
    let mut out = Vec::with_capacity(n_levels);
    for level in 0..n_levels {
        let o = run_level_problems(config, level, problems)?;
        progress(level, &o);
        out.push(o);
    }
    Ok(out)
}

/// Outcomes of one problem across levels.
pub fn select_problem(levels: &[Vec<SolveOutcome>], problem: Problem) -> Vec<&SolveOutcome> {
    levels
        .iter()
        .filter_map(|l| l.iter().find(|o| o.problem == problem))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = vec![
            ConvergenceRow {
                n_steps: 8,
                n_elements: 192,
                err_computed: 0.5,
                eoc_computed: None,
                err_projected: 0.4,
                eoc_projected: None,
                err_repr: 0.1,
                eoc_repr: None,
            },
            ConvergenceRow {
                n_steps: 16,
                n_elements: 768,
                err_computed: 0.25,
                eoc_computed: Some(1.0),
                err_projected: 0.2,
                eoc_projected: Some(1.0),
                err_repr: 0.025,
                eoc_repr: Some(2.0),
            },
        ];
        let csv = convergence_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("8,192,5.000000e-1,,"));
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first.len(), 8);
        assert!([3, 5, 7].iter().all(|&i| first[i].is_empty()));
        assert!(lines[2].contains(",1.0000,"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = StudyConfig {
            source: [0.0, 0.0, 0.5],
            ..StudyConfig::default()
        };
        assert!(c.validate().is_err());
        let c = StudyConfig {
            alpha: -1.0,
            ..StudyConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(StudyConfig::default().validate().is_ok());
    }
}
