//! Oracle comparison suites for the closed-form temporal weights and for
//! assembled Galerkin entries.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::assembly::{AssemblyOptions, Assembler, LocalOperator};
use crate::error::VerifyError;
use crate::kernels::{temporal_weight, KernelParams, TemporalWeightKind};
use crate::mesh::{generate_cube_surface, TimeGrid};
use crate::oracle::{oracle_galerkin_entry, oracle_temporal_weight, OracleConfig, OracleOperator};
use crate::quadrature::{MeshQuadrature, QuadratureConfig};

/// Accepts `|value - reference| <= max(abs, rel |reference|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { abs: 1e-9, rel: 1e-8 }
    }
}

impl Tolerance {
    pub fn allowed(&self, reference: f64) -> f64 {
        self.abs.max(self.rel * reference.abs())
    }
}

/// Parameter grid of the temporal-weight suite.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrid {
    /// Distances as multiples of the length scale.
    pub rho_factors: Vec<f64>,
    pub alphas: Vec<f64>,
    pub steps: Vec<f64>,
    pub gaps: Vec<usize>,
    pub kinds: Vec<TemporalWeightKind>,
}

impl Default for KernelGrid {
    fn default() -> Self {
        Self {
            rho_factors: vec![0.05, 0.2, 1.0, 3.0],
            alphas: vec![0.5, 1.0, 2.0],
            steps: vec![1.0 / 8.0, 1.0 / 32.0],
            gaps: vec![0, 1, 2, 5, 20],
            kinds: vec![
                TemporalWeightKind::SingleLayer,
                TemporalWeightKind::DoubleLayer,
                TemporalWeightKind::HypersingularD2,
            ],
        }
    }
}

impl KernelGrid {
    pub fn empty() -> Self {
        Self {
            rho_factors: vec![],
            alphas: vec![],
            steps: vec![],
            gaps: vec![],
            kinds: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.rho_factors.len() * self.alphas.len() * self.steps.len() * self.gaps.len() * self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelCheck {
    pub kind: TemporalWeightKind,
    pub rho: f64,
    pub alpha: f64,
    pub h_t: f64,
    pub d: usize,
    pub value: f64,
    pub reference: f64,
    pub deviation: f64,
    pub allowed: f64,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.deviation <= self.allowed
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KernelReport {
    pub checks: Vec<KernelCheck>,
    pub rel_tolerance: f64,
    pub warnings: Vec<String>,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(KernelCheck::passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed()).count()
    }

    /// Largest ratio of deviation to allowed deviation.
    pub fn worst(&self) -> Option<&KernelCheck> {
        self.checks
            .iter()
            .max_by(|a, b| (a.deviation / a.allowed).total_cmp(&(b.deviation / b.allowed)))
    }

    pub fn max_abs_deviation(&self) -> f64 {
        self.checks.iter().map(|c| c.deviation).fold(0.0, f64::max)
    }

    /// Largest relative deviation among checks governed by the relative
    /// tolerance, i.e. with references above the absolute floor.
    pub fn max_rel_deviation(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.allowed > 0.0 && c.allowed == self.rel_tolerance * c.reference.abs())
            .map(|c| c.deviation / c.reference.abs())
            .fold(0.0, f64::max)
    }
}

/// Compares `temporal_weight` against the quadrature oracle on every grid
/// point. Distances are `factor * length_scale` along a fixed oblique
/// direction; the trial normal is `e_z`.
///
/// `perturbation` scales the closed-form values by `1 + perturbation` and
/// exists to confirm that the suite detects small errors.
pub fn verify_kernel_grid(
    grid: &KernelGrid,
    length_scale: f64,
    tolerance: Tolerance,
    perturbation: f64,
) -> Result<KernelReport, VerifyError> {
    let mut report = KernelReport {
        rel_tolerance: tolerance.rel,
        ..KernelReport::default()
    };
    if grid.is_empty() {
        report.warnings.push("kernel grid is empty; nothing was checked".into());
        return Ok(report);
    }
    let mut cases = Vec::with_capacity(grid.len());
    for &kind in &grid.kinds {
        for &f in &grid.rho_factors {
            for &alpha in &grid.alphas {
                for &h_t in &grid.steps {
                    for &d in &grid.gaps {
                        cases.push((kind, f * length_scale, alpha, h_t, d));
                    }
                }
            }
        }
    }
    let oracle = OracleConfig::default();
    report.checks = cases
        .into_par_iter()
        .map(|(kind, rho, alpha, h_t, d)| {
            let params = KernelParams::new(alpha, h_t)?.with_length_scale(length_scale);
            let dir = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
            let r = [rho * dir[0], rho * dir[1], rho * dir[2]];
            let n_y = [0.0, 0.0, 1.0];
            let value = temporal_weight(kind, &r, &n_y, d, &params)? * (1.0 + perturbation);
            let reference = oracle_temporal_weight(kind, &r, &n_y, d, &params, &oracle)?.value;
            Ok(KernelCheck {
                kind,
                rho,
                alpha,
                h_t,
                d,
                value,
                reference,
                deviation: (value - reference).abs(),
                allowed: tolerance.allowed(reference),
            })
        })
        .collect::<Result<Vec<_>, VerifyError>>()?;
    Ok(report)
}

/// Setup of the Galerkin-entry suite.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryGrid {
    pub cube_subdivisions: usize,
    pub n_pairs: usize,
    pub gaps: Vec<usize>,
    pub operators: Vec<LocalOperator>,
    pub alpha: f64,
    pub end_time: f64,
    pub n_steps: usize,
    pub quadrature: QuadratureConfig,
    pub seed: u64,
}

impl Default for EntryGrid {
    fn default() -> Self {
        Self {
            cube_subdivisions: 2,
            n_pairs: 50,
            gaps: vec![1, 2, 3],
            operators: vec![
                LocalOperator::SingleLayerP0,
                LocalOperator::SingleLayerP1,
                LocalOperator::DoubleLayer,
                LocalOperator::HypersingularD2,
            ],
            alpha: 0.5,
            end_time: 1.0,
            n_steps: 4,
            quadrature: QuadratureConfig {
                regular_order: 6,
                singular_order: 4,
            },
            seed: 20_210_913,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntryCheck {
    pub operator: LocalOperator,
    pub test: usize,
    pub trial: usize,
    pub d: usize,
    /// Largest entry deviation divided by the largest oracle entry of the
    /// local block.
    pub rel_deviation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntryReport {
    pub checks: Vec<EntryCheck>,
    pub rel_tolerance: f64,
    pub warnings: Vec<String>,
}

impl EntryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_deviation <= self.rel_tolerance)
    }

    pub fn max_rel_deviation(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_deviation).fold(0.0, f64::max)
    }

    pub fn n_pairs(&self) -> usize {
        let mut pairs: Vec<_> = self.checks.iter().map(|c| (c.test, c.trial)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs.len()
    }
}

/// Compares assembled pair contributions with fully numerical Galerkin
/// entries on random separated element pairs of a cube.
///
/// The oracle uses the same spatial rule as the assembler for each pair, so
/// the comparison isolates the temporal integration.
pub fn verify_galerkin_entries(
    grid: &EntryGrid,
    rel_tolerance: f64,
    perturbation: f64,
) -> Result<EntryReport, VerifyError> {
    let mut report = EntryReport {
        rel_tolerance,
        ..EntryReport::default()
    };
    if grid.n_pairs == 0 || grid.gaps.is_empty() || grid.operators.is_empty() {
        report.warnings.push("entry grid is empty; nothing was checked".into());
        return Ok(report);
    }
    let mesh = generate_cube_surface::<f64>(grid.cube_subdivisions, 1.0)?;
    let time = TimeGrid::new(grid.end_time, grid.n_steps)?;
    let options = AssemblyOptions {
        workers: 1,
        deterministic: true,
        quadrature: grid.quadrature,
    };
    let asm = Assembler::new(&mesh, time, grid.alpha, options)?;
    let near = MeshQuadrature::new(&mesh, grid.quadrature)?;
    let params = *asm.params();

    let ne = mesh.n_elements();
    let mut rng = StdRng::seed_from_u64(grid.seed);
    let mut pairs = Vec::with_capacity(grid.n_pairs);
    while pairs.len() < grid.n_pairs {
        let (l, m) = (rng.gen_range(0..ne), rng.gen_range(0..ne));
        let touching = mesh.triangles()[l].iter().any(|v| mesh.triangles()[m].contains(v));
        if !touching && !pairs.contains(&(l, m)) {
            pairs.push((l, m));
        }
    }
    if let Some(&d) = grid.gaps.iter().find(|&&d| d >= grid.n_steps) {
        return Err(VerifyError::Oracle(crate::error::OracleError::Precondition(format!(
            "time gap {d} below the number of steps {}",
            grid.n_steps
        ))));
    }

    let oracle = OracleConfig::default();
    let mut jobs = Vec::new();
    for &(l, m) in &pairs {
        for &op in &grid.operators {
            jobs.push((l, m, op));
        }
    }
    let checks: Vec<Vec<EntryCheck>> = jobs
        .into_par_iter()
        .map(|(l, m, op)| {
            let oracle_op = match op {
                LocalOperator::SingleLayerP0 => OracleOperator::SingleLayerP0,
                LocalOperator::SingleLayerP1 => OracleOperator::SingleLayerP1,
                LocalOperator::DoubleLayer => OracleOperator::DoubleLayer,
                LocalOperator::HypersingularD2 => OracleOperator::HypersingularD2,
                LocalOperator::CurlSingleLayer => {
                    return Err(VerifyError::Oracle(crate::error::OracleError::Precondition(
                        "an operator with an oracle".into(),
                    )))
                }
            };
            let order = if near.is_near(l, m) {
                grid.quadrature.regular_order + 2
            } else {
                grid.quadrature.regular_order
            };
            let local = asm.pair_contribution(op, l, m)?;
            let (nr, nc) = (local.rows.len(), local.cols.len());
            // Oracle rows and columns follow each triangle's own vertex order.
            let position = |e: usize, dof: usize, n: usize| {
                if n == 1 {
                    0
                } else {
                    mesh.triangles()[e].iter().position(|&v| v == dof).expect("dof of element")
                }
            };
            let mut out = Vec::new();
            for &d in &grid.gaps {
                let reference = oracle_galerkin_entry(oracle_op, &mesh, l, m, d, &params, order, &oracle)?;
                let scale = reference.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let mut worst = 0.0f64;
                for a in 0..nr {
                    for b in 0..nc {
                        let value = local.get(d, a, b) * (1.0 + perturbation);
                        let o = reference[position(l, local.rows[a], nr) * nc + position(m, local.cols[b], nc)];
                        worst = worst.max((value - o).abs());
                    }
                }
                out.push(EntryCheck {
                    operator: op,
                    test: l,
                    trial: m,
                    d,
                    rel_deviation: if scale > 0.0 { worst / scale } else { worst },
                });
            }
            Ok(out)
        })
        .collect::<Result<_, VerifyError>>()?;
    report.checks = checks.into_iter().flatten().collect();
    Ok(report)
}
