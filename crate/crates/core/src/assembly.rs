//! Block lower-triangular Toeplitz Galerkin matrices for the heat operators.
//!
//! Every element pair is visited once. Its quadrature batch is evaluated for
//! the `E_t + 1` time gaps `i_t h_t`, and each evaluation is scattered into at
//! most three blocks with the multipliers of [`AssemblyPlan`].

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::error::AssemblyError;
use crate::kernels::{KernelParams, TimeLevel};
use crate::mesh::{SurfaceMesh, TimeGrid};
use crate::quadrature::{MeshQuadrature, PairBatch, QuadratureConfig};
use crate::scalar::{dot, norm, sub, Real, Vec3};

/// Spatial discretisation of a test or trial space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Space {
    /// Piecewise constant on triangles, one dof per element.
    P0,
    /// Continuous piecewise linear, one dof per vertex.
    P1,
}

impl Space {
    pub fn dim<T: Real>(self, mesh: &SurfaceMesh<T>) -> usize {
        match self {
            Space::P0 => mesh.n_elements(),
            Space::P1 => mesh.n_vertices(),
        }
    }

    fn local_dofs(self) -> usize {
        match self {
            Space::P0 => 1,
            Space::P1 => 3,
        }
    }
}

/// Lower block-triangular Toeplitz matrix: block `(k, i)` is `A^{k-i}` for
/// `k >= i` and zero otherwise. Only `A^0 .. A^{E_t-1}` are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockToeplitzMatrix<T: Real> {
    n_steps: usize,
    rows: usize,
    cols: usize,
    blocks: Vec<Vec<T>>,
    transpose_blocks_on_apply: bool,
    diagonal_only: bool,
}

impl<T: Real> BlockToeplitzMatrix<T> {
    pub fn zeros(n_steps: usize, rows: usize, cols: usize) -> Self {
        Self {
            n_steps,
            rows,
            cols,
            blocks: (0..n_steps).map(|_| vec![T::zero(); rows * cols]).collect(),
            transpose_blocks_on_apply: false,
            diagonal_only: false,
        }
    }

    /// Block-diagonal operator repeating `block` on every time step.
    pub fn block_diagonal(n_steps: usize, rows: usize, cols: usize, block: Vec<T>) -> Self {
        assert_eq!(block.len(), rows * cols);
        Self {
            n_steps,
            rows,
            cols,
            blocks: vec![block],
            transpose_blocks_on_apply: false,
            diagonal_only: true,
        }
    }

    /// Builds a matrix from explicit blocks `A^0, A^1, ...`.
    pub fn from_blocks(rows: usize, cols: usize, blocks: Vec<Vec<T>>) -> Result<Self, AssemblyError> {
        if blocks.is_empty() || blocks.iter().any(|b| b.len() != rows * cols) {
            return Err(AssemblyError::InvalidParameter(format!(
                "every block must hold {rows} x {cols} entries"
            )));
        }
        Ok(Self {
            n_steps: blocks.len(),
            rows,
            cols,
            blocks,
            transpose_blocks_on_apply: false,
            diagonal_only: false,
        })
    }

    /// Number of time steps `E_t` of the operator.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of stored blocks (`E_t`, or 1 for a block-diagonal matrix).
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_rows(&self) -> usize {
        self.rows
    }

    pub fn block_cols(&self) -> usize {
        self.cols
    }

    pub fn is_diagonal_only(&self) -> bool {
        self.diagonal_only
    }

    pub fn transpose_blocks_on_apply(&self) -> bool {
        self.transpose_blocks_on_apply
    }

    /// Same blocks, applied transposed (or back again).
    pub fn with_transposed_apply(mut self, transposed: bool) -> Self {
        self.transpose_blocks_on_apply = transposed;
        self
    }

    pub fn set_transposed_apply(&mut self, transposed: bool) {
        self.transpose_blocks_on_apply = transposed;
    }

    /// Row-major block `A^d`; `None` if `d` lies outside the stored range.
    pub fn block(&self, d: usize) -> Option<&[T]> {
        self.blocks.get(d).map(|b| b.as_slice())
    }

    pub fn block_mut(&mut self, d: usize) -> Option<&mut [T]> {
        self.blocks.get_mut(d).map(|b| b.as_mut_slice())
    }

    pub fn blocks(&self) -> &[Vec<T>] {
        &self.blocks
    }

    pub fn entry(&self, d: usize, i: usize, j: usize) -> T {
        self.blocks[d][i * self.cols + j]
    }

    /// Block `d` of the full operator, honouring the diagonal-only layout.
    pub fn effective_block(&self, d: usize) -> Option<&[T]> {
        if self.diagonal_only {
            (d == 0).then(|| self.blocks[0].as_slice())
        } else {
            self.block(d)
        }
    }

    pub(crate) fn take_block(&mut self, d: usize) -> Vec<T> {
        std::mem::take(&mut self.blocks[d])
    }

    /// Writes the stored blocks as `HBTM1`, three little-endian `u64`
    /// (block count, rows, cols) and the entries as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<(), AssemblyError> {
        out.write_all(b"HBTM1")?;
        for v in [self.blocks.len(), self.rows, self.cols] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for block in &self.blocks {
            for &v in block {
                out.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self, AssemblyError> {
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != b"HBTM1" {
            return Err(AssemblyError::Format("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| AssemblyError::Format("header value too large".into()))?;
        }
        let [n, rows, cols] = header;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| AssemblyError::Format("block size overflows".into()))?;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let mut block = Vec::with_capacity(len);
            for _ in 0..len {
                input.read_exact(&mut word)?;
                block.push(T::lit(f64::from_le_bytes(word)));
            }
            blocks.push(block);
        }
        Self::from_blocks(rows, cols, blocks)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AssemblyError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AssemblyError> {
        let file = std::fs::File::open(path)?;
        Self::read_binary(std::io::BufReader::new(file))
    }
}

/// Coefficients indexed by (time step, spatial dof), time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeVector<T: Real> {
    n_steps: usize,
    n_dofs: usize,
    data: Vec<T>,
}

impl<T: Real> SpaceTimeVector<T> {
    pub fn zeros(n_steps: usize, n_dofs: usize) -> Self {
        Self {
            n_steps,
            n_dofs,
            data: vec![T::zero(); n_steps * n_dofs],
        }
    }

    pub fn from_vec(n_steps: usize, n_dofs: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n_steps * n_dofs, "space-time vector length");
        Self { n_steps, n_dofs, data }
    }

    pub fn from_fn(n_steps: usize, n_dofs: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n_steps * n_dofs);
        for i in 0..n_steps {
            for j in 0..n_dofs {
                data.push(f(i, j));
            }
        }
        Self { n_steps, n_dofs, data }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn step(&self, i: usize) -> &[T] {
        &self.data[i * self.n_dofs..(i + 1) * self.n_dofs]
    }

    pub fn step_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.n_dofs..(i + 1) * self.n_dofs]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n_dofs + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n_dofs + j] = v;
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: T, x: &Self) {
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
    }

    pub fn scale(&mut self, a: T) {
        for s in self.data.iter_mut() {
            *s *= a;
        }
    }
}

/// Which blocks a kernel evaluation at time gap `i_t h_t` feeds, and with
/// which multiplier.
///
/// `A^0` collects `+F_0` and `-F_1`; for `d >= 1`, `A^d` collects
/// `-F_{d-1} + 2 F_d - F_{d+1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssemblyPlan {
    n_steps: usize,
}

impl AssemblyPlan {
    pub fn new(n_steps: usize) -> Self {
        Self { n_steps }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of kernel evaluations per element pair.
    pub fn n_levels(&self) -> usize {
        self.n_steps + 1
    }

    /// `(d, multiplier)` pairs fed by level `i_t`, in increasing `d`.
    pub fn targets(&self, i_t: usize) -> Vec<(usize, i32)> {
        let mut out = Vec::with_capacity(3);
        self.for_each_target(i_t, |d, m| out.push((d, m)));
        out
    }

    /// `(i_t, multiplier)` pairs contributing to block `d`, in increasing `i_t`.
    pub fn sources(&self, d: usize) -> Vec<(usize, i32)> {
        if d >= self.n_steps {
            return Vec::new();
        }
        if d == 0 {
            return vec![(0, 1), (1, -1)];
        }
        vec![(d - 1, -1), (d, 2), (d + 1, -1)]
    }

    #[inline(always)]
    fn for_each_target(&self, i_t: usize, mut f: impl FnMut(usize, i32)) {
        let n = self.n_steps;
        if i_t > n {
            return;
        }
        if i_t == 0 {
            f(0, 1);
            if n > 1 {
                f(1, -1);
            }
            return;
        }
        f(i_t - 1, -1);
        if i_t < n {
            f(i_t, 2);
        }
        if i_t + 1 < n {
            f(i_t + 1, -1);
        }
    }
}

/// Surface curls of the p1 hat functions, constant on every triangle:
/// `T_o[m, j]` is component `o` of `n_m x grad phi_j` on triangle `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurlTransform<T: Real> {
    n_vertices: usize,
    nodes: Vec<[usize; 3]>,
    /// `curls[m][a]` is the curl of the hat of local vertex `a` on `m`.
    curls: Vec<[Vec3<T>; 3]>,
}

impl<T: Real> CurlTransform<T> {
    pub fn new(mesh: &SurfaceMesh<T>) -> Self {
        let mut curls = Vec::with_capacity(mesh.n_elements());
        for e in 0..mesh.n_elements() {
            let v = mesh.triangle_vertices(e);
            let inv = T::one() / (T::lit(2.0) * mesh.area(e));
            // n x grad phi_a = (v_{a+1} - v_{a+2}) / (2 area)
            let c = |a: usize| {
                let d = sub(&v[(a + 1) % 3], &v[(a + 2) % 3]);
                [d[0] * inv, d[1] * inv, d[2] * inv]
            };
            curls.push([c(0), c(1), c(2)]);
        }
        Self {
            n_vertices: mesh.n_vertices(),
            nodes: mesh.triangles().to_vec(),
            curls,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_vertices
    }

    /// Global nodes carrying the (at most three) nonzeros of row `m`.
    pub fn row_nodes(&self, m: usize) -> [usize; 3] {
        self.nodes[m]
    }

    /// Curl vectors of the three local hats of triangle `m`.
    pub fn row_curls(&self, m: usize) -> [Vec3<T>; 3] {
        self.curls[m]
    }

    /// Entry `T_o[m, j]`.
    pub fn get(&self, o: usize, m: usize, j: usize) -> T {
        self.nodes[m]
            .iter()
            .position(|&n| n == j)
            .map_or(T::zero(), |a| self.curls[m][a][o])
    }

    /// Dense row-major copy of `T_o`.
    pub fn to_dense(&self, o: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_rows() * self.n_vertices];
        for (m, nodes) in self.nodes.iter().enumerate() {
            for a in 0..3 {
                out[m * self.n_vertices + nodes[a]] += self.curls[m][a][o];
            }
        }
        out
    }

    /// `alpha^2 sum_o T_o^T V T_o` for one `E_x x E_x` block `V`, added into
    /// the `N_x x N_x` block `out`.
    pub fn add_congruence(&self, v: &[T], alpha_sq: T, out: &mut [T]) {
        let ne = self.n_rows();
        let nv = self.n_vertices;
        assert_eq!(v.len(), ne * ne);
        assert_eq!(out.len(), nv * nv);
        let mut w = vec![T::zero(); ne * nv];
        for o in 0..3 {
            w.iter_mut().for_each(|x| *x = T::zero());
            // W = V T_o
            for m in 0..ne {
                let row = &v[m * ne..(m + 1) * ne];
                let wrow = &mut w[m * nv..(m + 1) * nv];
                for (n, &vmn) in row.iter().enumerate() {
                    for b in 0..3 {
                        wrow[self.nodes[n][b]] += vmn * self.curls[n][b][o];
                    }
                }
            }
            // out += alpha^2 T_o^T W
            for m in 0..ne {
                let wrow = &w[m * nv..(m + 1) * nv];
                for a in 0..3 {
                    let c = alpha_sq * self.curls[m][a][o];
                    let orow = &mut out[self.nodes[m][a] * nv..(self.nodes[m][a] + 1) * nv];
                    for (x, &y) in orow.iter_mut().zip(wrow) {
                        *x += c * y;
                    }
                }
            }
        }
    }
}

/// Runtime options of the assembler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssemblyOptions {
    /// Worker threads; 0 picks the number of available cores.
    pub workers: usize,
    /// Stage per-element results and reduce them in a fixed order, making the
    /// output independent of the worker count. Otherwise workers add into the
    /// shared blocks directly under row locks.
    pub deterministic: bool,
    pub quadrature: QuadratureConfig,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            workers: 0,
            deterministic: true,
            quadrature: QuadratureConfig::default(),
        }
    }
}

/// Instrumentation totals accumulated across assembly calls.
#[derive(Debug, Default)]
pub struct AssemblyCounters {
    element_pairs: AtomicU64,
    kernel_passes: AtomicU64,
}

impl AssemblyCounters {
    /// Element pairs whose quadrature batch was evaluated.
    pub fn element_pairs(&self) -> u64 {
        self.element_pairs.load(Ordering::Relaxed)
    }

    /// Batched kernel evaluations (one per pair and time gap).
    pub fn kernel_passes(&self) -> u64 {
        self.kernel_passes.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.element_pairs.store(0, Ordering::Relaxed);
        self.kernel_passes.store(0, Ordering::Relaxed);
    }
}

/// Operators whose single-pair contributions [`Assembler::pair_contribution`]
/// exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LocalOperator {
    SingleLayerP0,
    SingleLayerP1,
    /// p0 test, p1 trial.
    DoubleLayer,
    /// `D^{2,d}` including the factor `alpha n_x . n_y`.
    HypersingularD2,
    /// `D^{1,d}` by curl-weighted single-layer kernels.
    CurlSingleLayer,
}

/// Local matrix of one element pair for all time gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct PairContribution<T: Real> {
    /// Global test dofs of the local rows.
    pub rows: Vec<usize>,
    /// Global trial dofs of the local columns.
    pub cols: Vec<usize>,
    /// Row-major `[d][row][col]`.
    pub values: Vec<T>,
}

impl<T: Real> PairContribution<T> {
    pub fn get(&self, d: usize, row: usize, col: usize) -> T {
        let (nr, nc) = (self.rows.len(), self.cols.len());
        self.values[d * nr * nc + row * nc + col]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Operator {
    SingleLayer(Space),
    DoubleLayer,
    HypersingularD2,
    CurlSingleLayer,
}

impl Operator {
    fn spaces(self) -> (Space, Space) {
        match self {
            Operator::SingleLayer(s) => (s, s),
            Operator::DoubleLayer => (Space::P0, Space::P1),
            Operator::HypersingularD2 | Operator::CurlSingleLayer => (Space::P1, Space::P1),
        }
    }

    fn symmetric(self) -> bool {
        !matches!(self, Operator::DoubleLayer)
    }

    /// Number of distinct quadrature sums per pair and level.
    fn n_sums(self) -> usize {
        match self {
            Operator::SingleLayer(Space::P0) | Operator::CurlSingleLayer => 1,
            Operator::SingleLayer(Space::P1) | Operator::HypersingularD2 => 9,
            Operator::DoubleLayer => 3,
        }
    }
}

struct Scratch<T: Real> {
    batch: PairBatch<T>,
    rho: Vec<T>,
    rn: Vec<T>,
    g: Vec<T>,
    cw: Vec<T>,
    sums: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(cap: usize) -> Self {
        Self {
            batch: PairBatch::with_capacity(cap),
            rho: Vec::with_capacity(cap),
            rn: Vec::with_capacity(cap),
            g: Vec::with_capacity(cap),
            cw: Vec::with_capacity(9 * cap),
            sums: Vec::new(),
        }
    }
}

/// Staged contributions of one test element.
struct Stage<T: Real> {
    /// (trial element, row dofs, col dofs)
    pairs: Vec<(usize, [usize; 3], [usize; 3])>,
    values: Vec<T>,
}

/// Row-locked view of the blocks used by the economical mode.
struct SharedBlocks<T> {
    ptrs: Vec<*mut T>,
    cols: usize,
    locks: Vec<Mutex<()>>,
}

// Writes go through `add_row`, which holds the lock of the row it touches,
// so no two threads write the same memory concurrently.
unsafe impl<T: Send> Sync for SharedBlocks<T> {}
unsafe impl<T: Send> Send for SharedBlocks<T> {}

impl<T: Real> SharedBlocks<T> {
    fn new(m: &mut BlockToeplitzMatrix<T>) -> Self {
        Self {
            cols: m.cols,
            locks: (0..m.rows).map(|_| Mutex::new(())).collect(),
            ptrs: m.blocks.iter_mut().map(|b| b.as_mut_ptr()).collect(),
        }
    }

    /// Adds `value(d, k)` to entries `(row, cols[k])` of every block `d`.
    fn add_row(&self, row: usize, cols: &[usize], value: impl Fn(usize, usize) -> T) {
        let _guard = self.locks[row].lock().unwrap_or_else(|e| e.into_inner());
        for (d, &p) in self.ptrs.iter().enumerate() {
            for (k, &c) in cols.iter().enumerate() {
                // SAFETY: row < rows and c < cols by construction; the row
                // lock is held for the whole update.
                unsafe {
                    *p.add(row * self.cols + c) += value(d, k);
                }
            }
        }
    }
}

/// Assembles the space-time operators on one mesh and time grid.
pub struct Assembler<'a, T: Real> {
    mesh: &'a SurfaceMesh<T>,
    grid: TimeGrid<T>,
    params: KernelParams<T>,
    options: AssemblyOptions,
    quadrature: MeshQuadrature<'a, T>,
    plan: AssemblyPlan,
    levels: Vec<TimeLevel<T>>,
    counters: AssemblyCounters,
    pool: rayon::ThreadPool,
}

impl<'a, T: Real> Assembler<'a, T> {
    pub fn new(
        mesh: &'a SurfaceMesh<T>,
        grid: TimeGrid<T>,
        alpha: T,
        options: AssemblyOptions,
    ) -> Result<Self, AssemblyError> {
        if !mesh.is_closed_manifold() {
            return Err(AssemblyError::NonManifold);
        }
        let params = KernelParams::new(alpha, grid.step())?.with_length_scale(mesh.diameter());
        let quadrature = MeshQuadrature::new(mesh, options.quadrature)?;
        let plan = AssemblyPlan::new(grid.n_steps());
        let levels = (0..plan.n_levels())
            .map(|i| params.level(T::from_usize_lossy(i) * params.h_t()))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| AssemblyError::Pool(e.to_string()))?;
        Ok(Self {
            mesh,
            grid,
            params,
            options,
            quadrature,
            plan,
            levels,
            counters: AssemblyCounters::default(),
            pool,
        })
    }

    pub fn mesh(&self) -> &'a SurfaceMesh<T> {
        self.mesh
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn params(&self) -> &KernelParams<T> {
        &self.params
    }

    pub fn options(&self) -> &AssemblyOptions {
        &self.options
    }

    pub fn counters(&self) -> &AssemblyCounters {
        &self.counters
    }

    pub fn plan(&self) -> &AssemblyPlan {
        &self.plan
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Single-layer blocks `V^d` for `p0 x p0` or `p1 x p1`.
    pub fn single_layer(&self, test: Space, trial: Space) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
        if test != trial {
            return Err(AssemblyError::UnsupportedSpaces(format!(
                "single layer needs equal test and trial spaces, got {test:?} x {trial:?}"
            )));
        }
        self.assemble(Operator::SingleLayer(test))
    }

    /// Double-layer blocks `K^d`, p0 test and p1 trial functions.
    pub fn double_layer(&self) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
        self.assemble(Operator::DoubleLayer)
    }

    /// The time-derivative part `D^{2,d}` of the hypersingular blocks.
    pub fn hypersingular_d2(&self) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
        self.assemble(Operator::HypersingularD2)
    }

    /// Curl part `D^{1,d}` assembled pair by pair with curl-weighted kernels,
    /// independent of the sparse transform.
    pub fn hypersingular_d1_direct(&self) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
        self.assemble(Operator::CurlSingleLayer)
    }

    /// Full hypersingular blocks `D^d = D^{1,d} + D^{2,d}`.
    pub fn hypersingular(&self) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
        let v = self.single_layer(Space::P0, Space::P0)?;
        self.hypersingular_from_single_layer(v)
    }

    /// Turns an assembled `p0 x p0` single layer into the hypersingular
    /// matrix, releasing each `V^d` as soon as `D^{1,d}` is formed.
    pub fn hypersingular_from_single_layer(
        &self,
        v: BlockToeplitzMatrix<T>,
    ) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
        let mut d = d1_from_single_layer(v, &CurlTransform::new(self.mesh), self.params.alpha())?;
        self.assemble_into(Operator::HypersingularD2, &mut d)?;
        Ok(d)
    }

    /// Mass matrix `h_t M_x` (p0 test, p1 trial) as a block-diagonal operator.
    pub fn mass(&self) -> BlockToeplitzMatrix<T> {
        assemble_mass(self.mesh, &self.grid)
    }

    /// Contribution of the single element pair `(test, trial)` to every
    /// block, without touching the counters of full assemblies.
    pub fn pair_contribution(
        &self,
        op: LocalOperator,
        test: usize,
        trial: usize,
    ) -> Result<PairContribution<T>, AssemblyError> {
        let ne = self.mesh.n_elements();
        if test >= ne || trial >= ne {
            return Err(AssemblyError::InvalidParameter(format!(
                "element pair ({test}, {trial}) out of range for {ne} elements"
            )));
        }
        let op = match op {
            LocalOperator::SingleLayerP0 => Operator::SingleLayer(Space::P0),
            LocalOperator::SingleLayerP1 => Operator::SingleLayer(Space::P1),
            LocalOperator::DoubleLayer => Operator::DoubleLayer,
            LocalOperator::HypersingularD2 => Operator::HypersingularD2,
            LocalOperator::CurlSingleLayer => Operator::CurlSingleLayer,
        };
        let (ts, ss) = op.spaces();
        let (nt, ns) = (ts.local_dofs(), ss.local_dofs());
        let mut values = vec![T::zero(); self.grid.n_steps() * nt * ns];
        let mut scratch = Scratch::new(self.quadrature.tables().max_batch());
        let (pairs, passes) = (self.counters.element_pairs(), self.counters.kernel_passes());
        let dofs = self.eval_pair(op, test, trial, &mut scratch, &mut values);
        self.counters.element_pairs.store(pairs, Ordering::Relaxed);
        self.counters.kernel_passes.store(passes, Ordering::Relaxed);
        let (rows, cols) = dofs.unwrap_or_else(|| {
            let nodes = |e: usize, s: Space| match s {
                Space::P0 => [e; 3],
                Space::P1 => self.mesh.triangles()[e],
            };
            (nodes(test, ts), nodes(trial, ss))
        });
        Ok(PairContribution {
            rows: rows[..nt].to_vec(),
            cols: cols[..ns].to_vec(),
            values,
        })
    }

    fn assemble(&self, op: Operator) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
        let (test, trial) = op.spaces();
        let mut m = BlockToeplitzMatrix::zeros(self.grid.n_steps(), test.dim(self.mesh), trial.dim(self.mesh));
        self.assemble_into(op, &mut m)?;
        Ok(m)
    }

    fn assemble_into(&self, op: Operator, target: &mut BlockToeplitzMatrix<T>) -> Result<(), AssemblyError> {
        let (test, trial) = op.spaces();
        if target.n_blocks() != self.grid.n_steps()
            || target.rows != test.dim(self.mesh)
            || target.cols != trial.dim(self.mesh)
        {
            return Err(AssemblyError::InvalidParameter("target matrix has the wrong shape".into()));
        }
        let ne = self.mesh.n_elements();
        let cap = self.quadrature.tables().max_batch();
        let local = self.grid.n_steps() * test.local_dofs() * trial.local_dofs();
        if self.options.deterministic {
            // Bound the staging memory to roughly 64 MB per chunk.
            let per_element = (ne * local * std::mem::size_of::<T>()).max(1);
            let chunk = ((64usize << 20) / per_element).clamp(1, ne.max(1));
            let mut start = 0;
            while start < ne {
                let end = (start + chunk).min(ne);
                let stages: Vec<Stage<T>> = self.pool.install(|| {
                    (start..end)
                        .into_par_iter()
                        .map_init(|| Scratch::new(cap), |s, l| self.stage_element(op, l, s))
                        .collect()
                });
                for (l, stage) in (start..end).zip(stages) {
                    self.scatter_stage(op, l, &stage, target);
                }
                start = end;
            }
        } else {
            let shared = SharedBlocks::new(target);
            self.pool.install(|| {
                (0..ne).into_par_iter().for_each_init(
                    || (Scratch::new(cap), vec![T::zero(); local]),
                    |(s, buf), l| {
                        for m in self.trial_range(op, l) {
                            buf.iter_mut().for_each(|x| *x = T::zero());
                            if let Some((rows, cols)) = self.eval_pair(op, l, m, s, buf) {
                                self.scatter_locked(op, l, m, &rows, &cols, buf, &shared);
                            }
                        }
                    },
                )
            });
        }
        Ok(())
    }

    fn trial_range(&self, op: Operator, l: usize) -> std::ops::Range<usize> {
        if op.symmetric() {
            l..self.mesh.n_elements()
        } else {
            0..self.mesh.n_elements()
        }
    }

    fn stage_element(&self, op: Operator, l: usize, s: &mut Scratch<T>) -> Stage<T> {
        let (test, trial) = op.spaces();
        let local = self.grid.n_steps() * test.local_dofs() * trial.local_dofs();
        let range = self.trial_range(op, l);
        let mut stage = Stage {
            pairs: Vec::with_capacity(range.len()),
            values: Vec::with_capacity(range.len() * local),
        };
        for m in range {
            let at = stage.values.len();
            stage.values.resize(at + local, T::zero());
            match self.eval_pair(op, l, m, s, &mut stage.values[at..]) {
                Some((rows, cols)) => stage.pairs.push((m, rows, cols)),
                None => stage.values.truncate(at),
            }
        }
        stage
    }

    fn scatter_stage(&self, op: Operator, l: usize, stage: &Stage<T>, target: &mut BlockToeplitzMatrix<T>) {
        let (test, trial) = op.spaces();
        let (nt, ns) = (test.local_dofs(), trial.local_dofs());
        let local = nt * ns;
        let cols_n = target.cols;
        let n_steps = self.grid.n_steps();
        let mirror_allowed = op.symmetric();
        for (p, (m, rows, cols)) in stage.pairs.iter().enumerate() {
            let vals = &stage.values[p * n_steps * local..(p + 1) * n_steps * local];
            let mirror = mirror_allowed && *m != l;
            for (d, block) in target.blocks.iter_mut().enumerate() {
                let v = &vals[d * local..(d + 1) * local];
                for a in 0..nt {
                    for b in 0..ns {
                        let x = v[a * ns + b];
                        block[rows[a] * cols_n + cols[b]] += x;
                        if mirror {
                            block[cols[b] * cols_n + rows[a]] += x;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scatter_locked(
        &self,
        op: Operator,
        l: usize,
        m: usize,
        rows: &[usize; 3],
        cols: &[usize; 3],
        vals: &[T],
        shared: &SharedBlocks<T>,
    ) {
        let (test, trial) = op.spaces();
        let (nt, ns) = (test.local_dofs(), trial.local_dofs());
        let local = nt * ns;
        for a in 0..nt {
            shared.add_row(rows[a], &cols[..ns], |d, b| vals[d * local + a * ns + b]);
        }
        if op.symmetric() && m != l {
            for b in 0..ns {
                shared.add_row(cols[b], &rows[..nt], |d, a| vals[d * local + a * ns + b]);
            }
        }
    }

    /// Evaluates all blocks of one element pair into `out` (layout
    /// `[d][a][b]`). Returns the row and column dofs, or `None` when the pair
    /// contributes exactly zero and was skipped.
    fn eval_pair(
        &self,
        op: Operator,
        l: usize,
        m: usize,
        s: &mut Scratch<T>,
        out: &mut [T],
    ) -> Option<([usize; 3], [usize; 3])> {
        let mesh = self.mesh;
        let nx = mesh.normal(l);
        let ny = mesh.normal(m);
        let alpha = self.params.alpha();
        // Pairs whose contribution vanishes identically.
        match op {
            Operator::HypersingularD2 if dot(&nx, &ny) == T::zero() => return None,
            Operator::DoubleLayer => {
                let y0 = mesh.triangle_vertices(m)[0];
                if mesh
                    .triangle_vertices(l)
                    .iter()
                    .all(|v| dot(&sub(v, &y0), &ny) == T::zero())
                {
                    return None;
                }
            }
            _ => {}
        }

        let (test, trial) = op.spaces();
        let (nt, ns) = (test.local_dofs(), trial.local_dofs());
        self.quadrature.fill(l, m, &mut s.batch);
        let batch = &s.batch;
        let n = batch.len();

        s.rho.clear();
        s.rn.clear();
        for k in 0..n {
            let r = [
                batch.x[0][k] - batch.y[0][k],
                batch.x[1][k] - batch.y[1][k],
                batch.x[2][k] - batch.y[2][k],
            ];
            s.rho.push(norm(&r));
            if op == Operator::DoubleLayer {
                s.rn.push(dot(&r, &ny));
            }
        }

        // Quadrature weights times basis values, one row per sum.
        let n_sums = op.n_sums();
        s.cw.clear();
        match n_sums {
            1 => s.cw.extend_from_slice(&batch.weights),
            3 => {
                for b in 0..3 {
                    for k in 0..n {
                        s.cw.push(batch.weights[k] * batch.trial_hat(b, k));
                    }
                }
            }
            _ => {
                for a in 0..3 {
                    for b in 0..3 {
                        for k in 0..n {
                            s.cw.push(batch.weights[k] * batch.test_hat(a, k) * batch.trial_hat(b, k));
                        }
                    }
                }
            }
        }

        s.sums.clear();
        s.sums.resize(self.grid.n_steps() * n_sums, T::zero());
        s.g.resize(n, T::zero());
        let h = self.params.h_t();
        let length = self.params.length_scale();
        let tiny = T::lit(crate::kernels::RHO_LIMIT_FACTOR) * length;
        for (i_t, level) in self.levels.iter().enumerate() {
            match op {
                Operator::SingleLayer(_) | Operator::CurlSingleLayer => {
                    for k in 0..n {
                        s.g[k] = level.g_tau_t(s.rho[k], s.rho[k] < tiny);
                    }
                }
                Operator::DoubleLayer => {
                    for k in 0..n {
                        s.g[k] = level.dn_g_tau_t(s.rho[k], s.rn[k], s.rho[k] < tiny);
                    }
                }
                Operator::HypersingularD2 => {
                    for k in 0..n {
                        s.g[k] = level.g_tau(s.rho[k], s.rho[k] < tiny);
                    }
                }
            }
            for e in 0..n_sums {
                let f = dot_slices(&s.cw[e * n..(e + 1) * n], &s.g[..n]);
                self.plan.for_each_target(i_t, |d, mult| {
                    s.sums[d * n_sums + e] += T::from_i32(mult).unwrap() * f;
                });
            }
            if i_t == 0 {
                // Extra h_t G^{dtau}(., 0) term of the d = 0 block.
                let extra = match op {
                    Operator::SingleLayer(_) | Operator::CurlSingleLayer => {
                        for k in 0..n {
                            s.g[k] = h * level.g_tau(s.rho[k], false);
                        }
                        true
                    }
                    Operator::DoubleLayer => {
                        for k in 0..n {
                            s.g[k] = h * level.dn_g_tau(s.rho[k], s.rn[k]);
                        }
                        true
                    }
                    Operator::HypersingularD2 => false,
                };
                if extra {
                    for e in 0..n_sums {
                        s.sums[e] += dot_slices(&s.cw[e * n..(e + 1) * n], &s.g[..n]);
                    }
                }
            }
        }
        self.counters.element_pairs.fetch_add(1, Ordering::Relaxed);
        self.counters
            .kernel_passes
            .fetch_add(self.plan.n_levels() as u64, Ordering::Relaxed);

        // Pair-constant factors and expansion to the local dof layout.
        let local = nt * ns;
        match op {
            Operator::CurlSingleLayer => {
                let cl = curls_of(mesh, l, batch.test_nodes);
                let cm = curls_of(mesh, m, batch.trial_nodes);
                let a2 = alpha * alpha;
                for d in 0..self.grid.n_steps() {
                    let v = s.sums[d];
                    for a in 0..3 {
                        for b in 0..3 {
                            out[d * local + a * 3 + b] = a2 * dot(&cl[a], &cm[b]) * v;
                        }
                    }
                }
            }
            _ => {
                let factor = match op {
                    Operator::HypersingularD2 => alpha * dot(&nx, &ny),
                    _ => T::one(),
                };
                for (o, &v) in out.iter_mut().zip(&s.sums) {
                    *o = factor * v;
                }
            }
        }
        let rows = match test {
            Space::P0 => [l; 3],
            Space::P1 => batch.test_nodes,
        };
        let cols = match trial {
            Space::P0 => [m; 3],
            Space::P1 => batch.trial_nodes,
        };
        Some((rows, cols))
    }
}

/// Curls of the hats attached to `nodes` (given in the permuted local order).
fn curls_of<T: Real>(mesh: &SurfaceMesh<T>, e: usize, nodes: [usize; 3]) -> [Vec3<T>; 3] {
    let tri = mesh.triangles()[e];
    let v = mesh.triangle_vertices(e);
    let inv = T::one() / (T::lit(2.0) * mesh.area(e));
    let curl = |node: usize| {
        let a = tri.iter().position(|&t| t == node).unwrap();
        let d = sub(&v[(a + 1) % 3], &v[(a + 2) % 3]);
        [d[0] * inv, d[1] * inv, d[2] * inv]
    };
    [curl(nodes[0]), curl(nodes[1]), curl(nodes[2])]
}

#[inline(always)]
fn dot_slices<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for i in 0..4 {
            acc[i] += a[4 * c + i] * b[4 * c + i];
        }
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// Converts `V` (p0 x p0) into `D^1` block by block.
pub fn d1_from_single_layer<T: Real>(
    mut v: BlockToeplitzMatrix<T>,
    curl: &CurlTransform<T>,
    alpha: T,
) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
    if v.rows != curl.n_rows() || v.cols != curl.n_rows() || v.diagonal_only {
        return Err(AssemblyError::UnsupportedSpaces("expected a p0 x p0 single layer".into()));
    }
    let nv = curl.n_cols();
    let mut out = Vec::with_capacity(v.n_blocks());
    for d in 0..v.n_blocks() {
        let block = v.take_block(d);
        let mut dblock = vec![T::zero(); nv * nv];
        curl.add_congruence(&block, alpha * alpha, &mut dblock);
        drop(block);
        out.push(dblock);
    }
    BlockToeplitzMatrix::from_blocks(nv, nv, out)
}

/// Single-layer matrix with default options.
pub fn assemble_single_layer<T: Real>(
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
    alpha: T,
    config: QuadratureConfig,
    test: Space,
    trial: Space,
) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
    Assembler::new(mesh, *grid, alpha, options_with(config))?.single_layer(test, trial)
}

pub fn assemble_double_layer<T: Real>(
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
    alpha: T,
    config: QuadratureConfig,
) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
    Assembler::new(mesh, *grid, alpha, options_with(config))?.double_layer()
}

pub fn assemble_hypersingular<T: Real>(
    mesh: &SurfaceMesh<T>,
    grid: &TimeGrid<T>,
    alpha: T,
    config: QuadratureConfig,
) -> Result<BlockToeplitzMatrix<T>, AssemblyError> {
    Assembler::new(mesh, *grid, alpha, options_with(config))?.hypersingular()
}

pub fn curl_transform<T: Real>(mesh: &SurfaceMesh<T>) -> CurlTransform<T> {
    CurlTransform::new(mesh)
}

fn options_with(quadrature: QuadratureConfig) -> AssemblyOptions {
    AssemblyOptions {
        quadrature,
        ..AssemblyOptions::default()
    }
}

/// Dense `p1 x p1` spatial mass matrix, entries `area/12 (1 + [a = b])`.
pub fn p1_mass_matrix<T: Real>(mesh: &SurfaceMesh<T>) -> Vec<T> {
    let n = mesh.n_vertices();
    let mut m = vec![T::zero(); n * n];
    for (l, tri) in mesh.triangles().iter().enumerate() {
        let w = mesh.area(l) / T::lit(12.0);
        for a in 0..3 {
            for b in 0..3 {
                m[tri[a] * n + tri[b]] += if a == b { w + w } else { w };
            }
        }
    }
    m
}

/// `h_t M_x` with `M_x[l, j] = area_l / 3` for each vertex `j` of triangle `l`.
pub fn assemble_mass<T: Real>(mesh: &SurfaceMesh<T>, grid: &TimeGrid<T>) -> BlockToeplitzMatrix<T> {
    let rows = mesh.n_elements();
    let cols = mesh.n_vertices();
    let mut block = vec![T::zero(); rows * cols];
    let third = T::one() / T::lit(3.0);
    for (l, tri) in mesh.triangles().iter().enumerate() {
        let v = grid.step() * mesh.area(l) * third;
        for &j in tri {
            block[l * cols + j] += v;
        }
    }
    BlockToeplitzMatrix::block_diagonal(grid.n_steps(), rows, cols, block)
}
