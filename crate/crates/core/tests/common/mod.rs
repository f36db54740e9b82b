#![allow(dead_code)]

use heatbem::assembly::{AssemblyOptions, Assembler, BlockToeplitzMatrix, Space, SpaceTimeVector};
use heatbem::mesh::{generate_cube_surface, SurfaceMesh, TimeGrid};
use heatbem::solver::{apply_toeplitz, LinearOperator, Transposed};
use heatbem::study::{solve_problems, Preconditioner, Problem, StudyConfig};

pub fn cube(n: usize) -> SurfaceMesh<f64> {
    generate_cube_surface(n, 1.0).unwrap()
}

pub fn assembler(mesh: &SurfaceMesh<f64>, end_time: f64, steps: usize) -> Assembler<'_, f64> {
    let grid = TimeGrid::new(end_time, steps).unwrap();
    Assembler::new(mesh, grid, 0.5, AssemblyOptions::default()).unwrap()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Largest `|A_ij - A_ji|` over all blocks, relative to the largest entry.
pub fn symmetry_defect(m: &BlockToeplitzMatrix<f64>) -> f64 {
    let n = m.block_rows();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for b in m.blocks() {
        scale = scale.max(max_abs(b));
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((b[i * n + j] - b[j * n + i]).abs());
            }
        }
    }
    worst / scale
}

/// Deterministic pseudo-random vector with entries in `[-1, 1]`.
pub fn test_vector(n_steps: usize, n_dofs: usize, seed: u64) -> SpaceTimeVector<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    SpaceTimeVector::from_fn(n_steps, n_dofs, |_, _| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

pub fn rel_diff(a: &SpaceTimeVector<f64>, b: &SpaceTimeVector<f64>) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d.norm() / b.norm()
}

#[derive(Debug, Clone)]
pub struct StructuralMetrics {
    /// Largest output entry before the support of the input, over V, K, D.
    pub causality_leak: f64,
    /// Blocks shared by grids with equal step but different lengths agree bitwise.
    pub toeplitz_bit_identical: bool,
    pub v_symmetry: f64,
    pub d_symmetry: f64,
    /// `K^T x` through the transposed apply versus explicitly transposed blocks.
    pub k_transpose_two_path: f64,
    /// Curl-transform `D^1` versus the direct curl-weighted assembly.
    pub d1_sparse_vs_direct: f64,
    /// Largest `|sum_j M_lj - h_t area_l|`.
    pub mass_row_sum: f64,
}

pub fn structural_metrics() -> StructuralMetrics {
    let mesh = cube(2);
    let asm = assembler(&mesh, 1.0, 4);
    let v = asm.single_layer(Space::P0, Space::P0).unwrap();
    let k = asm.double_layer().unwrap();
    let d = asm.hypersingular().unwrap();
    let (ne, nv) = (mesh.n_elements(), mesh.n_vertices());

    // Inputs vanish on the first two steps.
    let mut leak = 0.0f64;
    for (op, n_in) in [(&v, ne), (&k, nv), (&d, nv)] {
        let mut x = test_vector(4, n_in, 7);
        for s in 0..2 {
            x.step_mut(s).fill(0.0);
        }
        let y = op.apply(&x).unwrap();
        for s in 0..2 {
            leak = leak.max(max_abs(y.step(s)));
        }
    }

    // Same step size, half the number of steps.
    let short = assembler(&mesh, 0.5, 2);
    let v_short = short.single_layer(Space::P0, Space::P0).unwrap();
    let k_short = short.double_layer().unwrap();
    let toeplitz_bit_identical = (0..2).all(|b| {
        v_short.block(b).unwrap().iter().zip(v.block(b).unwrap()).all(|(x, y)| x.to_bits() == y.to_bits())
            && k_short.block(b).unwrap().iter().zip(k.block(b).unwrap()).all(|(x, y)| x.to_bits() == y.to_bits())
    });

    let explicit = BlockToeplitzMatrix::from_blocks(
        nv,
        ne,
        k.blocks()
            .iter()
            .map(|b| {
                let mut t = vec![0.0; nv * ne];
                for i in 0..ne {
                    for j in 0..nv {
                        t[j * ne + i] = b[i * nv + j];
                    }
                }
                t
            })
            .collect(),
    )
    .unwrap();
    let x = test_vector(4, ne, 3);
    let y1 = Transposed(&k).apply(&x).unwrap();
    let y2 = apply_toeplitz(&explicit, &x, false).unwrap();

    let d1_sparse = asm.hypersingular_from_single_layer(v.clone()).unwrap();
    let d2 = asm.hypersingular_d2().unwrap();
    let d1_direct = asm.hypersingular_d1_direct().unwrap();
    let mut d1_diff = 0.0f64;
    let mut d1_scale = 0.0f64;
    for b in 0..4 {
        let (s, dd, c) = (d1_sparse.block(b).unwrap(), d2.block(b).unwrap(), d1_direct.block(b).unwrap());
        for i in 0..s.len() {
            d1_diff = d1_diff.max((s[i] - dd[i] - c[i]).abs());
            d1_scale = d1_scale.max(c[i].abs());
        }
    }

    let mass = asm.mass();
    let h = asm.grid().step();
    let block = mass.block(0).unwrap();
    let mass_row_sum = (0..ne)
        .map(|l| (block[l * nv..(l + 1) * nv].iter().sum::<f64>() - h * mesh.area(l)).abs())
        .fold(0.0, f64::max);

    StructuralMetrics {
        causality_leak: leak,
        toeplitz_bit_identical,
        v_symmetry: symmetry_defect(&v),
        d_symmetry: symmetry_defect(&d),
        k_transpose_two_path: rel_diff(&y1, &y2),
        d1_sparse_vs_direct: d1_diff / d1_scale,
        mass_row_sum,
    }
}

#[derive(Debug, Clone)]
pub struct ConcurrencyMetrics {
    pub workers: Vec<usize>,
    /// Deterministic solutions of both problems bitwise equal for all worker counts.
    pub deterministic_identical: bool,
    /// Largest per-entry relative difference between economical and
    /// deterministic solutions.
    pub economical_drift: f64,
    pub n_steps: usize,
    pub element_pairs: u64,
    pub kernel_passes: u64,
}

pub fn concurrency_metrics() -> ConcurrencyMetrics {
    let mesh = cube(2);
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let max = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut workers = vec![1, 2, max];
    workers.sort_unstable();
    workers.dedup();
    let problems = [Problem::Dirichlet, Problem::Neumann];
    let run = |w: usize, deterministic: bool| {
        let config = StudyConfig {
            workers: w,
            deterministic,
            interior_points: 200,
            preconditioner: Preconditioner::None,
            cross_check: false,
            ..StudyConfig::default()
        };
        solve_problems(&config, &mesh, &grid, &problems).unwrap()
    };
    let reference = run(1, true);
    let mut identical = true;
    for &w in &workers[1..] {
        let other = run(w, true);
        for (a, b) in reference.iter().zip(&other) {
            identical &= a.solution.as_slice().iter().zip(b.solution.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
            identical &= a.interior_values.iter().zip(&b.interior_values).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    let mut drift = 0.0f64;
    for &w in &workers {
        for (a, b) in reference.iter().zip(&run(w, false)) {
            for (x, y) in a.solution.as_slice().iter().zip(b.solution.as_slice()) {
                let scale = x.abs().max(y.abs());
                if scale > 0.0 {
                    drift = drift.max((x - y).abs() / scale);
                }
            }
        }
    }

    let asm = assembler(&mesh, 1.0, 4);
    asm.single_layer(Space::P0, Space::P0).unwrap();
    ConcurrencyMetrics {
        workers,
        deterministic_identical: identical,
        economical_drift: drift,
        n_steps: 4,
        element_pairs: asm.counters().element_pairs(),
        kernel_passes: asm.counters().kernel_passes(),
    }
}
