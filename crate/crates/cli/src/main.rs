use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use heatbem::mesh::{generate_cube_surface, load_mesh, save_mesh, TimeGrid};
use heatbem::quadrature::QuadratureConfig;
use heatbem::solver::FgmresOptions;
use heatbem::study::{
    convergence_csv, convergence_rows, run_convergence, select_problem, solve_manufactured, Preconditioner, Problem,
    SolveOutcome, StudyConfig,
};
use heatbem::verify::{verify_galerkin_entries, verify_kernel_grid, EntryGrid, KernelGrid, Tolerance};
use heatbem::{Mesh, Vec3};

#[derive(Parser, Debug)]
#[command(name = "heatbem", version, about = "Space-time boundary elements for the 3D heat equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a refined cube surface mesh.
    MeshGen(MeshGenArgs),
    /// Solve one manufactured Dirichlet or Neumann problem.
    Solve(SolveArgs),
    /// Run a refinement study and write the error table as CSV.
    Convergence(ConvergenceArgs),
    /// Compare closed-form kernels and Galerkin entries against numerical oracles.
    VerifyKernels(VerifyArgs),
}

#[derive(Args, Debug)]
struct MeshGenArgs {
    /// Uniform refinements of the base cube.
    #[arg(long, default_value_t = 0)]
    refine: usize,
    /// Subdivisions per cube edge before refinement.
    #[arg(long, default_value_t = 4)]
    subdivisions: usize,
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    /// Output mesh file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProblemArg {
    Dirichlet,
    Neumann,
}

impl From<ProblemArg> for Problem {
    fn from(p: ProblemArg) -> Self {
        match p {
            ProblemArg::Dirichlet => Problem::Dirichlet,
            ProblemArg::Neumann => Problem::Neumann,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StudyProblemArg {
    Dirichlet,
    Neumann,
    Both,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Refinement level: the base cube is refined this many times and the
    /// number of time steps doubled as often.
    #[arg(long, default_value_t = 0)]
    refine: usize,
    /// Time steps at level 0.
    #[arg(long, default_value_t = 8)]
    timesteps: usize,
    /// Heat capacity constant.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    end_time: f64,
    /// Triangle rule order for separated element pairs.
    #[arg(long, default_value_t = 4)]
    quad_regular: usize,
    /// Gauss points per axis for touching element pairs.
    #[arg(long, default_value_t = 4)]
    quad_singular: usize,
    /// Worker threads (0 uses every core).
    #[arg(long, env = "HEATBEM_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Reduce assembled contributions in a fixed order.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Closed surface mesh file to use instead of the cube.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Source point of the manufactured solution, outside the domain.
    #[arg(long, default_value = "0,0,1.5", value_parser = parse_point)]
    source_point: Vec3<f64>,
    /// Cube subdivisions per edge at level 0.
    #[arg(long, default_value_t = 4)]
    subdivisions: usize,
    /// Interior points for the representation error (0 skips it).
    #[arg(long, default_value_t = 10_000)]
    interior_points: usize,
    /// Right preconditioner for FGMRES.
    #[arg(long, value_enum, default_value = "time-marching")]
    preconditioner: PreconditionerArg,
    /// FGMRES iteration cap.
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PreconditionerArg {
    None,
    TimeMarching,
    SingleLayerInverse,
    MassSandwich,
}

impl From<PreconditionerArg> for Preconditioner {
    fn from(p: PreconditionerArg) -> Self {
        match p {
            PreconditionerArg::None => Preconditioner::None,
            PreconditionerArg::TimeMarching => Preconditioner::TimeMarching,
            PreconditionerArg::SingleLayerInverse => Preconditioner::SingleLayerInverse,
            PreconditionerArg::MassSandwich => Preconditioner::MassSandwich,
        }
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long, value_enum)]
    problem: ProblemArg,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct ConvergenceArgs {
    #[arg(long, value_enum, default_value = "both")]
    problem: StudyProblemArg,
    /// Number of levels, starting at level 0.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Random separated element pairs in the Galerkin-entry suite.
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    /// Run the suites on an empty parameter grid.
    #[arg(long)]
    empty_grid: bool,
    /// Relative perturbation applied to the closed-form values (suite self-test).
    #[arg(long, default_value_t = 0.0, hide = true)]
    perturb: f64,
    /// Write the report to this file as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_point(s: &str) -> Result<Vec3<f64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z but got '{s}'"));
    }
    let mut p = [0.0; 3];
    for (c, part) in p.iter_mut().zip(&parts) {
        *c = part.parse().map_err(|e| format!("bad coordinate '{part}': {e}"))?;
    }
    Ok(p)
}

fn study_config(run: &RunArgs, problem: Problem) -> Result<StudyConfig> {
    let quadrature = QuadratureConfig::new(run.quad_regular, run.quad_singular)?;
    Ok(StudyConfig {
        problem,
        alpha: run.alpha,
        end_time: run.end_time,
        base_steps: run.timesteps,
        base_subdivisions: run.subdivisions,
        source: run.source_point,
        quadrature,
        workers: run.workers,
        deterministic: run.deterministic,
        interior_points: run.interior_points,
        preconditioner: run.preconditioner.into(),
        fgmres: FgmresOptions {
            max_iter: run.max_iterations,
            ..FgmresOptions::default()
        },
        ..StudyConfig::default()
    })
}

/// Loads `--mesh` or builds the cube, refined `--refine` times.
fn build_mesh(run: &RunArgs, config: &mut StudyConfig) -> Result<Mesh> {
    match &run.mesh {
        None => Ok(config.mesh(run.refine)?),
        Some(path) => {
            let loaded = load_mesh::<f64>(path).with_context(|| format!("reading {}", path.display()))?;
            if loaded.non_manifold {
                bail!("{} is not a closed 2-manifold surface", path.display());
            }
            let mut mesh = loaded.mesh;
            for _ in 0..run.refine {
                mesh = mesh.refine()?;
            }
            // The source has to lie outside the bounding box of the mesh.
            config.half_width = mesh
                .vertices()
                .iter()
                .flat_map(|v| v.iter().map(|c| c.abs()))
                .fold(0.0, f64::max);
            Ok(mesh)
        }
    }
}

fn fmt_err(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else {
        format!("{v:.6e}")
    }
}

fn describe(o: &SolveOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem: {:?}", o.problem);
    let _ = writeln!(s, "time steps: {}", o.n_steps);
    let _ = writeln!(s, "elements: {}", o.n_elements);
    let _ = writeln!(s, "vertices: {}", o.n_vertices);
    let _ = writeln!(s, "boundary error (computed): {}", fmt_err(o.err_computed));
    let _ = writeln!(s, "boundary error (projected): {}", fmt_err(o.err_projected));
    match o.err_repr {
        Some(e) => {
            let _ = writeln!(s, "interior error: {}", fmt_err(e));
        }
        None => {
            let _ = writeln!(s, "interior error: skipped");
        }
    }
    if o.near_boundary_points > 0 {
        let _ = writeln!(s, "warning: {} interior points lie within 1e-8 diam of the boundary", o.near_boundary_points);
    }
    let r = &o.report;
    let _ = writeln!(s, "fgmres converged: {}", r.converged);
    let _ = writeln!(s, "fgmres iterations: {}", r.iterations);
    let _ = writeln!(s, "fgmres relative residual: {:.3e}", r.relative_residual);
    let _ = writeln!(s, "fgmres seconds: {:.3}", r.wall_time_s);
    if let Some(a) = o.forward_agreement {
        let _ = writeln!(s, "time-marching agreement: {a:.3e}");
    }
    let _ = writeln!(s, "element pairs: {}", o.element_pairs);
    let _ = writeln!(s, "kernel batch passes: {}", o.kernel_passes);
    for (name, secs) in &o.timings {
        let _ = writeln!(s, "seconds {name}: {secs:.3}");
    }
    s
}

fn write_coefficients(path: &Path, v: &heatbem::Vector) -> Result<()> {
    let mut s = String::from("step,dof,value\n");
    for i in 0..v.n_steps() {
        for (j, x) in v.step(i).iter().enumerate() {
            let _ = writeln!(s, "{i},{j},{x:.17e}");
        }
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_mesh_gen(args: &MeshGenArgs) -> Result<ExitCode> {
    let mut mesh = generate_cube_surface::<f64>(args.subdivisions, args.half_width)?;
    for _ in 0..args.refine {
        mesh = mesh.refine()?;
    }
    save_mesh(&mesh, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} ({} vertices, {} triangles)",
        args.out.display(),
        mesh.n_vertices(),
        mesh.n_elements()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_solve(args: &SolveArgs) -> Result<ExitCode> {
    let run = &args.run;
    let mut config = study_config(run, args.problem.into())?;
    let mesh = build_mesh(run, &mut config)?;
    let grid = TimeGrid::new(run.end_time, run.timesteps << run.refine)?;
    let outcome = solve_manufactured(&config, &mesh, &grid)?;

    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    write_coefficients(&run.out.join("solution.csv"), &outcome.solution)?;
    write_coefficients(&run.out.join("data.csv"), &outcome.data)?;
    let errors = format!(
        "Et,Ex,err_computed,err_projected,err_repr\n{},{},{},{},{}\n",
        outcome.n_steps,
        outcome.n_elements,
        fmt_err(outcome.err_computed),
        fmt_err(outcome.err_projected),
        outcome.err_repr.map(fmt_err).unwrap_or_default()
    );
    fs::write(run.out.join("errors.csv"), &errors)?;
    let mut interior = String::from("index,value\n");
    for (i, v) in outcome.interior_values.iter().enumerate() {
        let _ = writeln!(interior, "{i},{v:.17e}");
    }
    fs::write(run.out.join("interior.csv"), interior)?;
    let report = describe(&outcome);
    fs::write(run.out.join("report.txt"), &report)?;
    print!("{report}");

    if !outcome.report.converged {
        eprintln!("error: FGMRES did not reach the requested tolerance");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_convergence(args: &ConvergenceArgs) -> Result<ExitCode> {
    let run = &args.run;
    if args.levels < 2 {
        bail!("a convergence study needs at least 2 levels");
    }
    if run.mesh.is_some() || run.refine != 0 {
        bail!("--mesh and --refine do not apply to convergence studies; use --subdivisions and --levels");
    }
    let problems: Vec<Problem> = match args.problem {
        StudyProblemArg::Dirichlet => vec![Problem::Dirichlet],
        StudyProblemArg::Neumann => vec![Problem::Neumann],
        StudyProblemArg::Both => vec![Problem::Dirichlet, Problem::Neumann],
    };
    let config = study_config(run, problems[0])?;
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    let mut report = String::new();
    let mut converged = true;
    let levels = run_convergence(&config, args.levels, &problems, |level, outcomes| {
        for o in outcomes {
            eprintln!(
                "level {level} {:?}: Et={} Ex={} computed={} projected={} repr={}",
                o.problem,
                o.n_steps,
                o.n_elements,
                fmt_err(o.err_computed),
                fmt_err(o.err_projected),
                o.err_repr.map(fmt_err).unwrap_or_default()
            );
            let _ = writeln!(report, "== level {level}\n{}", describe(o));
        }
    })?;
    for &p in &problems {
        let outcomes = select_problem(&levels, p);
        converged &= outcomes.iter().all(|o| o.report.converged);
        let csv = convergence_csv(&convergence_rows(&outcomes)?);
        let name = match p {
            Problem::Dirichlet => "convergence_dirichlet.csv",
            Problem::Neumann => "convergence_neumann.csv",
        };
        fs::write(run.out.join(name), &csv)?;
        println!("{name}\n{csv}");
    }
    fs::write(run.out.join("report.txt"), report)?;
    if !converged {
        eprintln!("error: FGMRES did not reach the requested tolerance on every level");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_kernels(args: &VerifyArgs) -> Result<ExitCode> {
    let (kernel_grid, entry_grid) = if args.empty_grid {
        (
            KernelGrid::empty(),
            EntryGrid {
                n_pairs: 0,
                ..EntryGrid::default()
            },
        )
    } else {
        (
            KernelGrid::default(),
            EntryGrid {
                n_pairs: args.pairs,
                ..EntryGrid::default()
            },
        )
    };
    // Distances are scaled by the diameter of the default cube.
    let length_scale = generate_cube_surface::<f64>(4, 1.0)?.diameter();
    let kernels = verify_kernel_grid(&kernel_grid, length_scale, Tolerance::default(), args.perturb)?;
    let entries = verify_galerkin_entries(&entry_grid, 1e-8, args.perturb)?;

    let mut s = String::new();
    for w in kernels.warnings.iter().chain(&entries.warnings) {
        let _ = writeln!(s, "warning: {w}");
    }
    let _ = writeln!(
        s,
        "kernel suite: {} checks, {} failures, max abs deviation {:.3e}, max rel deviation {:.3e}",
        kernels.checks.len(),
        kernels.failures(),
        kernels.max_abs_deviation(),
        kernels.max_rel_deviation()
    );
    if let Some(w) = kernels.worst() {
        let _ = writeln!(
            s,
            "  worst: {:?} rho={:.4} alpha={} h_t={} d={} value={:.12e} oracle={:.12e}",
            w.kind, w.rho, w.alpha, w.h_t, w.d, w.value, w.reference
        );
    }
    let _ = writeln!(
        s,
        "entry suite: {} checks on {} pairs, max rel deviation {:.3e} (tolerance {:.0e})",
        entries.checks.len(),
        entries.n_pairs(),
        entries.max_rel_deviation(),
        entries.rel_tolerance
    );
    let passed = kernels.passed() && entries.passed();
    let _ = writeln!(s, "{}", if passed { "all checks passed" } else { "verification FAILED" });
    print!("{s}");
    if let Some(path) = &args.out {
        fs::write(path, &s).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MeshGen(a) => cmd_mesh_gen(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Convergence(a) => cmd_convergence(a),
        Command::VerifyKernels(a) => cmd_verify_kernels(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
