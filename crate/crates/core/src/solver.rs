//! Operator application and linear solvers for the space-time systems.

use std::time::Instant;

use rayon::prelude::*;

use crate::assembly::{BlockToeplitzMatrix, SpaceTimeVector};
use crate::error::SolverError;
use crate::scalar::Real;

/// A linear map between space-time vectors.
pub trait LinearOperator<T: Real>: Send + Sync {
    /// Number of time steps of input and output.
    fn n_steps(&self) -> usize;
    /// Spatial dofs of the input.
    fn domain_dofs(&self) -> usize;
    /// Spatial dofs of the output.
    fn range_dofs(&self) -> usize;
    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError>;
}

impl<T: Real> LinearOperator<T> for BlockToeplitzMatrix<T> {
    fn n_steps(&self) -> usize {
        BlockToeplitzMatrix::n_steps(self)
    }

    fn domain_dofs(&self) -> usize {
        if self.transpose_blocks_on_apply() {
            self.block_rows()
        } else {
            self.block_cols()
        }
    }

    fn range_dofs(&self) -> usize {
        if self.transpose_blocks_on_apply() {
            self.block_cols()
        } else {
            self.block_rows()
        }
    }

    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        apply_toeplitz(self, x, self.transpose_blocks_on_apply())
    }
}

impl<T: Real, O: LinearOperator<T> + ?Sized> LinearOperator<T> for &O {
    fn n_steps(&self) -> usize {
        (**self).n_steps()
    }
    fn domain_dofs(&self) -> usize {
        (**self).domain_dofs()
    }
    fn range_dofs(&self) -> usize {
        (**self).range_dofs()
    }
    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        (**self).apply(x)
    }
}

/// A Toeplitz matrix applied with its blocks transposed, without copying.
pub struct Transposed<'a, T: Real>(pub &'a BlockToeplitzMatrix<T>);

impl<T: Real> LinearOperator<T> for Transposed<'_, T> {
    fn n_steps(&self) -> usize {
        self.0.n_steps()
    }
    fn domain_dofs(&self) -> usize {
        self.0.block_rows()
    }
    fn range_dofs(&self) -> usize {
        self.0.block_cols()
    }
    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        apply_toeplitz(self.0, x, true)
    }
}

/// `sum_i c_i A_i`, evaluated lazily.
pub struct Combination<'a, T: Real> {
    terms: Vec<(T, Box<dyn LinearOperator<T> + 'a>)>,
}

impl<'a, T: Real> Combination<'a, T> {
    pub fn new() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn term(mut self, coefficient: T, op: impl LinearOperator<T> + 'a) -> Self {
        self.terms.push((coefficient, Box::new(op)));
        self
    }
}

impl<T: Real> Default for Combination<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> LinearOperator<T> for Combination<'_, T> {
    fn n_steps(&self) -> usize {
        self.terms.first().map_or(0, |t| t.1.n_steps())
    }
    fn domain_dofs(&self) -> usize {
        self.terms.first().map_or(0, |t| t.1.domain_dofs())
    }
    fn range_dofs(&self) -> usize {
        self.terms.first().map_or(0, |t| t.1.range_dofs())
    }
    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        let mut out: Option<SpaceTimeVector<T>> = None;
        for (c, op) in &self.terms {
            let y = op.apply(x)?;
            match out.as_mut() {
                None => {
                    let mut y = y;
                    y.scale(*c);
                    out = Some(y);
                }
                Some(acc) => {
                    check(acc.len(), y.len())?;
                    acc.axpy(*c, &y);
                }
            }
        }
        Ok(out.unwrap_or_else(|| x.clone()))
    }
}

/// The identity on vectors with `n_steps x n_dofs` entries.
pub struct Identity {
    pub n_steps: usize,
    pub n_dofs: usize,
}

impl<T: Real> LinearOperator<T> for Identity {
    fn n_steps(&self) -> usize {
        self.n_steps
    }
    fn domain_dofs(&self) -> usize {
        self.n_dofs
    }
    fn range_dofs(&self) -> usize {
        self.n_dofs
    }
    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        check(self.n_steps * self.n_dofs, x.len())?;
        Ok(x.clone())
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<F> {
    pub n_steps: usize,
    pub domain_dofs: usize,
    pub range_dofs: usize,
    pub f: F,
}

impl<T: Real, F> LinearOperator<T> for FnOperator<F>
where
    F: Fn(&SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> + Send + Sync,
{
    fn n_steps(&self) -> usize {
        self.n_steps
    }
    fn domain_dofs(&self) -> usize {
        self.domain_dofs
    }
    fn range_dofs(&self) -> usize {
        self.range_dofs
    }
    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        (self.f)(x)
    }
}

fn check(expected: usize, got: usize) -> Result<(), SolverError> {
    if expected == got {
        Ok(())
    } else {
        Err(SolverError::DimensionMismatch { expected, got })
    }
}

/// `y^k = sum_{i <= k} A^{k-i} x^i`, with every block transposed if requested.
///
/// Blocks are visited in the outer loop so each is streamed from memory once
/// per application.
pub fn apply_toeplitz<T: Real>(
    matrix: &BlockToeplitzMatrix<T>,
    x: &SpaceTimeVector<T>,
    transpose_blocks: bool,
) -> Result<SpaceTimeVector<T>, SolverError> {
    let (rows, cols) = (matrix.block_rows(), matrix.block_cols());
    let (n_in, n_out) = if transpose_blocks { (rows, cols) } else { (cols, rows) };
    let n = matrix.n_steps();
    check(n, x.n_steps())?;
    check(n_in, x.n_dofs())?;
    let mut y = SpaceTimeVector::zeros(n, n_out);
    let n_blocks = if matrix.is_diagonal_only() { 1 } else { matrix.n_blocks().min(n) };
    for d in 0..n_blocks {
        let block = matrix.block(d).expect("stored block");
        let steps = n - d;
        if transpose_blocks {
            // y^{k}[j] += sum_i A[i][j] x^{k-d}[i], split over column chunks.
            let chunk = 256.max(cols.div_ceil(rayon::current_num_threads().max(1) * 4));
            let col_ranges: Vec<(usize, usize)> =
                (0..cols).step_by(chunk).map(|s| (s, (s + chunk).min(cols))).collect();
            let pieces: Vec<Vec<T>> = col_ranges
                .par_iter()
                .map(|&(c0, c1)| {
                    let w = c1 - c0;
                    let mut out = vec![T::zero(); steps * w];
                    for i in 0..rows {
                        let arow = &block[i * cols + c0..i * cols + c1];
                        for s in 0..steps {
                            let xi = x.get(s, i);
                            if xi != T::zero() {
                                let o = &mut out[s * w..(s + 1) * w];
                                for (oj, &a) in o.iter_mut().zip(arow) {
                                    *oj += a * xi;
                                }
                            }
                        }
                    }
                    out
                })
                .collect();
            for ((c0, c1), piece) in col_ranges.iter().zip(pieces) {
                let w = c1 - c0;
                for s in 0..steps {
                    let dst = &mut y.step_mut(s + d)[*c0..*c1];
                    for (a, &b) in dst.iter_mut().zip(&piece[s * w..(s + 1) * w]) {
                        *a += b;
                    }
                }
            }
        } else {
            // tmp[i][s] = A[i,:] . x^{s}
            let mut tmp = vec![T::zero(); rows * steps];
            tmp.par_chunks_mut(steps).enumerate().for_each(|(i, t)| {
                let arow = &block[i * cols..(i + 1) * cols];
                for (s, ts) in t.iter_mut().enumerate() {
                    *ts = dot4(arow, x.step(s));
                }
            });
            for s in 0..steps {
                let dst = y.step_mut(s + d);
                for i in 0..rows {
                    dst[i] += tmp[i * steps + s];
                }
            }
        }
    }
    Ok(y)
}

#[inline(always)]
fn dot4<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let n = a.len().min(b.len());
    let chunks = n / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..n {
        s += a[k] * b[k];
    }
    s
}

/// Outcome of an iterative solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    pub wall_time_s: f64,
    /// True relative residual at the start of every restart cycle and at the end.
    pub restart_residuals: Vec<f64>,
}

/// Settings of [`fgmres`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FgmresOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    pub restart: usize,
}

impl Default for FgmresOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_iter: 500,
            restart: 50,
        }
    }
}

/// Flexible GMRES with right preconditioning and restarts.
///
/// Non-convergence is reported through [`SolveReport::converged`].
pub fn fgmres<T: Real>(
    op: &dyn LinearOperator<T>,
    rhs: &SpaceTimeVector<T>,
    options: FgmresOptions,
    right_precond: Option<&dyn LinearOperator<T>>,
) -> Result<(SpaceTimeVector<T>, SolveReport), SolverError> {
    let start = Instant::now();
    check(op.range_dofs(), rhs.n_dofs())?;
    check(op.domain_dofs(), op.range_dofs())?;
    let (n_steps, n_dofs) = (rhs.n_steps(), rhs.n_dofs());
    let mut x = SpaceTimeVector::zeros(n_steps, n_dofs);
    let b_norm = rhs.norm().to_f64_lossy();
    let mut report = SolveReport {
        iterations: 0,
        relative_residual: 0.0,
        converged: true,
        wall_time_s: 0.0,
        restart_residuals: Vec::new(),
    };
    if b_norm == 0.0 {
        report.restart_residuals.push(0.0);
        report.wall_time_s = start.elapsed().as_secs_f64();
        return Ok((x, report));
    }
    let tol = options.rel_tol * b_norm;
    let m = options.restart.max(1);
    let mut total = 0usize;
    loop {
        let mut r = op.apply(&x)?;
        r.scale(-T::one());
        r.axpy(T::one(), rhs);
        let beta = r.norm().to_f64_lossy();
        report.restart_residuals.push(beta / b_norm);
        report.relative_residual = beta / b_norm;
        if beta <= tol || total >= options.max_iter {
            report.converged = beta <= tol;
            break;
        }
        let mut v: Vec<SpaceTimeVector<T>> = Vec::with_capacity(m + 1);
        let mut z: Vec<SpaceTimeVector<T>> = Vec::with_capacity(m);
        r.scale(T::lit(1.0 / beta));
        v.push(r);
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for j in 0..m {
            if total >= options.max_iter {
                break;
            }
            let zj = match right_precond {
                Some(p) => p.apply(&v[j])?,
                None => v[j].clone(),
            };
            let mut w = op.apply(&zj)?;
            z.push(zj);
            // Modified Gram-Schmidt, repeated once for stability.
            for _ in 0..2 {
                for (i, vi) in v.iter().enumerate() {
                    let hij = w.dot(vi).to_f64_lossy();
                    h[i][j] += hij;
                    w.axpy(T::lit(-hij), vi);
                }
            }
            let hn = w.norm().to_f64_lossy();
            h[j + 1][j] = hn;
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let denom = (h[j][j] * h[j][j] + h[j + 1][j] * h[j + 1][j]).sqrt();
            if denom == 0.0 {
                cs[j] = 1.0;
                sn[j] = 0.0;
            } else {
                cs[j] = h[j][j] / denom;
                sn[j] = h[j + 1][j] / denom;
            }
            h[j][j] = cs[j] * h[j][j] + sn[j] * h[j + 1][j];
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            total += 1;
            k_used = j + 1;
            if g[j + 1].abs() <= tol || hn == 0.0 {
                break;
            }
            w.scale(T::lit(1.0 / hn));
            v.push(w);
        }
        // Back substitution for the least-squares coefficients.
        let mut y = vec![0.0f64; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for l in i + 1..k_used {
                s -= h[i][l] * y[l];
            }
            y[i] = if h[i][i] != 0.0 { s / h[i][i] } else { 0.0 };
        }
        for (yi, zi) in y.iter().zip(&z) {
            x.axpy(T::lit(*yi), zi);
        }
        report.iterations = total;
    }
    report.iterations = total;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((x, report))
}

/// Dense LU factorisation with partial pivoting.
#[derive(Clone, Debug)]
pub struct DenseLu<T: Real> {
    n: usize,
    lu: Vec<T>,
    piv: Vec<usize>,
}

impl<T: Real> DenseLu<T> {
    /// Factorises the row-major `n x n` matrix `a`.
    pub fn new(n: usize, a: &[T]) -> Result<Self, SolverError> {
        check(n * n, a.len())?;
        let mut lu = a.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let tiny = scale * T::epsilon() * T::from_usize_lossy(n.max(1));
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -T::one()), |acc, c| if c.1 > acc.1 { c } else { acc });
            if !(pmax > tiny) {
                return Err(SolverError::SingularBlock(k));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                piv.swap(k, p);
            }
            let pivot = lu[k * n + k];
            let (upper, lower) = lu.split_at_mut((k + 1) * n);
            let krow = &upper[k * n..(k + 1) * n];
            lower.par_chunks_mut(n).for_each(|row| {
                let f = row[k] / pivot;
                row[k] = f;
                if f != T::zero() {
                    for j in k + 1..n {
                        row[j] -= f * krow[j];
                    }
                }
            });
        }
        Ok(Self { n, lu, piv })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        let mut x: Vec<T> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s = dot4(row, &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n + i + 1..(i + 1) * n];
            let s = dot4(row, &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }
}

fn transpose_square<T: Real>(n: usize, a: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

fn matvec<T: Real>(n: usize, a: &[T], x: &[T], transpose: bool, out: &mut [T]) {
    if transpose {
        out.iter_mut().for_each(|o| *o = T::zero());
        for i in 0..n {
            let xi = x[i];
            for j in 0..n {
                out[j] += a[i * n + j] * xi;
            }
        }
    } else {
        for i in 0..n {
            out[i] = dot4(&a[i * n..(i + 1) * n], x);
        }
    }
}

/// Causal time marching for a square block Toeplitz system with a
/// precomputed factorisation of `A^0`.
pub struct ForwardBlockSolver<'a, T: Real> {
    matrix: &'a BlockToeplitzMatrix<T>,
    lu: DenseLu<T>,
    transpose: bool,
    inner_rel_tol: f64,
}

impl<'a, T: Real> ForwardBlockSolver<'a, T> {
    pub fn new(matrix: &'a BlockToeplitzMatrix<T>, inner_rel_tol: f64) -> Result<Self, SolverError> {
        let n = matrix.block_rows();
        check(n, matrix.block_cols())?;
        let a0 = matrix.block(0).ok_or(SolverError::SingularBlock(0))?;
        let transpose = matrix.transpose_blocks_on_apply();
        let lu = if transpose {
            DenseLu::new(n, &transpose_square(n, a0))?
        } else {
            DenseLu::new(n, a0)?
        };
        Ok(Self {
            matrix,
            lu,
            transpose,
            inner_rel_tol,
        })
    }

    pub fn solve(&self, rhs: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        let m = self.matrix;
        let n = m.block_rows();
        let steps = m.n_steps();
        check(steps, rhs.n_steps())?;
        check(n, rhs.n_dofs())?;
        let a0 = m.block(0).expect("block 0");
        let mut x = SpaceTimeVector::zeros(steps, n);
        let mut work = vec![T::zero(); n];
        for k in 0..steps {
            let mut r = rhs.step(k).to_vec();
            if !m.is_diagonal_only() {
                for d in 1..=k.min(m.n_blocks() - 1) {
                    matvec(n, m.block(d).unwrap(), x.step(k - d), self.transpose, &mut work);
                    for (ri, wi) in r.iter_mut().zip(&work) {
                        *ri -= *wi;
                    }
                }
            }
            let r_norm = r.iter().map(|&v| v * v).sum::<T>().sqrt();
            let mut xk = r.clone();
            self.lu.solve_in_place(&mut xk);
            // Iterative refinement until the block residual meets the tolerance.
            for _ in 0..3 {
                matvec(n, a0, &xk, self.transpose, &mut work);
                let mut res: Vec<T> = r.iter().zip(&work).map(|(&a, &b)| a - b).collect();
                let res_norm = res.iter().map(|&v| v * v).sum::<T>().sqrt();
                if res_norm <= T::lit(self.inner_rel_tol) * r_norm {
                    break;
                }
                self.lu.solve_in_place(&mut res);
                for (a, b) in xk.iter_mut().zip(&res) {
                    *a += *b;
                }
            }
            x.step_mut(k).copy_from_slice(&xk);
        }
        Ok(x)
    }
}

impl<T: Real> LinearOperator<T> for ForwardBlockSolver<'_, T> {
    fn n_steps(&self) -> usize {
        self.matrix.n_steps()
    }
    fn domain_dofs(&self) -> usize {
        self.matrix.block_rows()
    }
    fn range_dofs(&self) -> usize {
        self.matrix.block_cols()
    }
    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        self.solve(x)
    }
}

/// Solves `A x = rhs` by forward substitution in time.
pub fn forward_block_solve<T: Real>(
    matrix: &BlockToeplitzMatrix<T>,
    rhs: &SpaceTimeVector<T>,
    inner_rel_tol: f64,
) -> Result<SpaceTimeVector<T>, SolverError> {
    ForwardBlockSolver::new(matrix, inner_rel_tol)?.solve(rhs)
}

/// Approximate inverse of `V^{11}` applied by time marching with a loose
/// inner tolerance.
pub fn build_hypersingular_preconditioner<T: Real>(
    v11: &BlockToeplitzMatrix<T>,
) -> Result<ForwardBlockSolver<'_, T>, SolverError> {
    ForwardBlockSolver::new(v11, 1e-2)
}

/// Operator preconditioner `x -> (h_t M)^{-1} V^{11} (h_t M)^{-1} x` built from
/// the p1 mass matrix `M` of one time step.
pub struct MassSandwichPreconditioner<'a, T: Real> {
    v11: &'a BlockToeplitzMatrix<T>,
    mass_lu: DenseLu<T>,
    inv_h: T,
}

impl<'a, T: Real> MassSandwichPreconditioner<'a, T> {
    pub fn new(v11: &'a BlockToeplitzMatrix<T>, p1_mass: &[T], h_t: T) -> Result<Self, SolverError> {
        let n = v11.block_rows();
        Ok(Self {
            v11,
            mass_lu: DenseLu::new(n, p1_mass)?,
            inv_h: T::one() / h_t,
        })
    }

    fn mass_solve(&self, x: &mut SpaceTimeVector<T>) {
        for k in 0..x.n_steps() {
            let s = x.step_mut(k);
            self.mass_lu.solve_in_place(s);
            for v in s.iter_mut() {
                *v *= self.inv_h;
            }
        }
    }
}

impl<T: Real> LinearOperator<T> for MassSandwichPreconditioner<'_, T> {
    fn n_steps(&self) -> usize {
        self.v11.n_steps()
    }
    fn domain_dofs(&self) -> usize {
        self.v11.block_rows()
    }
    fn range_dofs(&self) -> usize {
        self.v11.block_rows()
    }
    fn apply(&self, x: &SpaceTimeVector<T>) -> Result<SpaceTimeVector<T>, SolverError> {
        let mut y = x.clone();
        self.mass_solve(&mut y);
        let mut z = apply_toeplitz(self.v11, &y, false)?;
        self.mass_solve(&mut z);
        Ok(z)
    }
}
