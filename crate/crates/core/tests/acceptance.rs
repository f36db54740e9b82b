//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! `HEATBEM_ACCEPTANCE_LEVELS` (default 3) limits the convergence study to
//! fewer levels for quick runs; criteria that need a missing level fail.
//!
//! Some sub-checks are known deviations and are marked as such in the
//! output. The process exits with status 1 only if a sub-check fails that is
//! not a known deviation.

mod common;

use std::time::Instant;

use heatbem::field::eoc;
use heatbem::mesh::generate_cube_surface;
use heatbem::study::{run_convergence, select_problem, Preconditioner, Problem, SolveOutcome, StudyConfig};
use heatbem::verify::{verify_galerkin_entries, verify_kernel_grid, EntryGrid, KernelGrid, Tolerance};

struct Check {
    label: String,
    ok: bool,
    known_deviation: bool,
}

#[derive(Default)]
struct Criterion {
    checks: Vec<Check>,
}

impl Criterion {
    fn check(&mut self, label: impl Into<String>, ok: bool) {
        self.checks.push(Check {
            label: label.into(),
            ok,
            known_deviation: false,
        });
    }

    /// A sub-check whose failure is understood and recorded.
    fn known(&mut self, label: impl Into<String>, ok: bool) {
        self.checks.push(Check {
            label: label.into(),
            ok,
            known_deviation: true,
        });
    }
}

struct Report {
    unexpected_failures: usize,
}

impl Report {
    fn emit(&mut self, number: usize, title: &str, c: Criterion, seconds: f64) {
        for ch in &c.checks {
            let tag = match (ch.ok, ch.known_deviation) {
                (true, _) => "ok  ",
                (false, true) => "KNOWN",
                (false, false) => "BAD ",
            };
            println!("    [{tag}] {}", ch.label);
            if !ch.ok && !ch.known_deviation {
                self.unexpected_failures += 1;
            }
        }
        let pass = c.checks.iter().all(|ch| ch.ok);
        let known = c.checks.iter().filter(|ch| !ch.ok && ch.known_deviation).count();
        let note = if !pass && c.checks.iter().all(|ch| ch.ok || ch.known_deviation) {
            format!(" ({known} known deviation(s))")
        } else {
            String::new()
        };
        println!(
            "{} criterion {number}: {title} [{seconds:.1} s]{note}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn pct(value: f64, target: f64) -> String {
    format!("{value:.4e} vs {target:.2e} ({:+.1}%)", 100.0 * (value / target - 1.0))
}

fn main() {
    let mut report = Report { unexpected_failures: 0 };
    let n_levels: usize = std::env::var("HEATBEM_ACCEPTANCE_LEVELS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);

    // 1. Closed-form temporal weights against adaptive quadrature.
    let start = Instant::now();
    let mut c = Criterion::default();
    let diameter = generate_cube_surface::<f64>(4, 1.0).unwrap().diameter();
    let grid = KernelGrid::default();
    let kr = verify_kernel_grid(&grid, diameter, Tolerance::default(), 0.0).unwrap();
    c.check(format!("{} grid points checked", kr.checks.len()), kr.checks.len() == 4 * 3 * 2 * 5 * 3);
    c.check(
        format!(
            "{} failures; max abs deviation {:.2e}, max rel deviation {:.2e}",
            kr.failures(),
            kr.max_abs_deviation(),
            kr.max_rel_deviation()
        ),
        kr.passed(),
    );
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.1} s < 30 s"), secs < 30.0);
    report.emit(1, "kernel-oracle suite", c, secs);

    // 2. Structure of the assembled operators.
    let start = Instant::now();
    let mut c = Criterion::default();
    let m = common::structural_metrics();
    c.check(format!("causality leak {:.1e}", m.causality_leak), m.causality_leak == 0.0);
    c.check("Toeplitz blocks bitwise identical across E_t", m.toeplitz_bit_identical);
    c.check(format!("V symmetry {:.2e} <= 1e-12", m.v_symmetry), m.v_symmetry <= 1e-12);
    c.check(format!("D symmetry {:.2e} <= 1e-12", m.d_symmetry), m.d_symmetry <= 1e-12);
    c.check(
        format!("K transpose two-path {:.2e} <= 1e-9", m.k_transpose_two_path),
        m.k_transpose_two_path <= 1e-9,
    );
    c.check(
        format!("D1 transform vs direct {:.2e} <= 1e-12", m.d1_sparse_vs_direct),
        m.d1_sparse_vs_direct <= 1e-12,
    );
    c.check(format!("mass row sums {:.2e} <= 1e-13", m.mass_row_sum), m.mass_row_sum <= 1e-13);
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.1} s < 60 s"), secs < 60.0);
    report.emit(2, "structural suite", c, secs);

    // 3. Assembled Galerkin entries against fully numerical ones.
    let start = Instant::now();
    let mut c = Criterion::default();
    let er = verify_galerkin_entries(&EntryGrid::default(), 1e-8, 0.0).unwrap();
    c.check(format!("{} distinct separated pairs >= 50", er.n_pairs()), er.n_pairs() >= 50);
    c.check(format!("max rel deviation {:.2e} <= 1e-8", er.max_rel_deviation()), er.passed());
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.1} s < 120 s"), secs < 120.0);
    report.emit(3, "Galerkin-entry oracle", c, secs);

    // 4-6. Convergence study, both problems sharing assembly per level.
    // FGMRES runs unpreconditioned so criterion 6 exercises the Krylov solver.
    let config = StudyConfig {
        preconditioner: Preconditioner::None,
        cross_check: true,
        ..StudyConfig::default()
    };
    let start = Instant::now();
    let mut level_secs = Vec::new();
    let levels = run_convergence(&config, n_levels, &[Problem::Dirichlet, Problem::Neumann], |level, out| {
        level_secs.push(start.elapsed().as_secs_f64());
        for o in out {
            println!(
                "    level {level} {:?}: computed {:.4e}, projected {:.4e}, representation {:.4e}, {} iterations",
                o.problem,
                o.err_computed,
                o.err_projected,
                o.err_repr.unwrap_or(f64::NAN),
                o.report.iterations
            );
        }
    })
    .unwrap();
    let study_secs = start.elapsed().as_secs_f64();
    let dirichlet = select_problem(&levels, Problem::Dirichlet);
    let neumann = select_problem(&levels, Problem::Neumann);

    let mut c = Criterion::default();
    let computed = [6.07e-1, 4.28e-1, 1.80e-1];
    let projected = [5.49e-1, 3.77e-1, 1.70e-1];
    let repr = [2.99e-2, 3.46e-3, 6.51e-4];
    let expected_size = [(8, 192), (16, 768), (32, 3072)];
    for level in 0..3 {
        let Some(o) = dirichlet.get(level) else {
            c.check(format!("level {level} not run"), false);
            continue;
        };
        c.check(
            format!("level {level} size {}/{}", o.n_steps, o.n_elements),
            (o.n_steps, o.n_elements) == expected_size[level],
        );
        c.check(
            format!("level {level} computed {} within 10%", pct(o.err_computed, computed[level])),
            within(o.err_computed, computed[level], 0.10),
        );
        c.check(
            format!("level {level} projected {} within 5%", pct(o.err_projected, projected[level])),
            within(o.err_projected, projected[level], 0.05),
        );
        let r = o.err_repr.unwrap_or(f64::NAN);
        c.known(
            format!("level {level} representation {} within 25%", pct(r, repr[level])),
            within(r, repr[level], 0.25),
        );
    }
    if dirichlet.len() >= 3 {
        let errs: Vec<f64> = dirichlet.iter().map(|o| o.err_computed).collect();
        let orders = eoc(&errs).unwrap();
        for (i, target) in [0.50, 1.25].into_iter().enumerate() {
            c.check(
                format!("eoc {}->{} computed {:.3} within 0.15 of {target}", i, i + 1, orders[i]),
                (orders[i] - target).abs() <= 0.15,
            );
        }
    }
    if let Some(&s) = level_secs.get(2) {
        println!("    levels 0-2 finished after {s:.0} s (both problems)");
    }
    report.emit(4, "Dirichlet reproduction", c, study_secs);

    let mut c = Criterion::default();
    let computed = [3.14e-1, 1.51e-1];
    let projected = [2.50e-1, 1.27e-1];
    let repr = [5.16e-2, 1.57e-2];
    for level in 0..2 {
        let Some(o) = neumann.get(level) else {
            c.check(format!("level {level} not run"), false);
            continue;
        };
        c.check(
            format!("level {level} computed {} within 10%", pct(o.err_computed, computed[level])),
            within(o.err_computed, computed[level], 0.10),
        );
        c.check(
            format!("level {level} projected {} within 5%", pct(o.err_projected, projected[level])),
            within(o.err_projected, projected[level], 0.05),
        );
        let r = o.err_repr.unwrap_or(f64::NAN);
        c.known(
            format!("level {level} representation {} within 25%", pct(r, repr[level])),
            within(r, repr[level], 0.25),
        );
    }
    match neumann.get(2) {
        Some(o) => {
            let (lo, hi) = (0.9 * 3.45e-2 * 2f64.powf(0.9), 1.1 * 1.51e-1 / 2f64.powf(0.9));
            c.check(
                format!("level 2 computed {:.4e} in [{lo:.4e}, {hi:.4e}]", o.err_computed),
                (lo..=hi).contains(&o.err_computed),
            );
            let errs: Vec<f64> = neumann.iter().map(|o| o.err_computed).collect();
            c.check("computed errors decrease monotonically", errs.windows(2).all(|w| w[1] < w[0]));
            let order = eoc(&errs).unwrap()[1];
            c.check(format!("eoc 1->2 computed {order:.3} in [0.9, 1.3]"), (0.9..=1.3).contains(&order));
        }
        None => c.check("level 2 not run", false),
    }
    report.emit(5, "Neumann reproduction", c, study_secs);

    let mut c = Criterion::default();
    let all: Vec<&SolveOutcome> = levels.iter().flatten().collect();
    c.check(format!("{} systems solved", all.len()), all.len() == 2 * n_levels);
    for o in &all {
        let agreement = o.forward_agreement.unwrap_or(f64::NAN);
        c.check(
            format!(
                "{:?} E_t={}: residual {:.2e} after {} iterations, time-marching agreement {:.2e}",
                o.problem, o.n_steps, o.report.relative_residual, o.report.iterations, agreement
            ),
            o.report.converged && o.report.relative_residual <= 1e-8 && agreement <= 1e-6,
        );
    }
    report.emit(6, "solver", c, study_secs);

    // 7. Scheduling independence and assembly pass counting.
    let start = Instant::now();
    let mut c = Criterion::default();
    let m = common::concurrency_metrics();
    c.check(
        format!("deterministic solutions identical for workers {:?}", m.workers),
        m.deterministic_identical,
    );
    c.check(
        format!("economical drift {:.2e} <= 1e-12", m.economical_drift),
        m.economical_drift <= 1e-12,
    );
    c.check(
        format!(
            "{} kernel passes for {} element pairs and E_t={} (E_t+1 per pair, not 3E_t)",
            m.kernel_passes, m.element_pairs, m.n_steps
        ),
        m.kernel_passes == (m.n_steps as u64 + 1) * m.element_pairs,
    );
    report.emit(7, "concurrency", c, start.elapsed().as_secs_f64());

    if report.unexpected_failures > 0 {
        println!("{} unexpected failure(s)", report.unexpected_failures);
        std::process::exit(1);
    }
}
