//! Sparse linear systems and their solvers.
//!
//! The direct path factors with a sparse LU (partial pivoting, fill-reducing
//! column ordering) from `faer`. The iterative path is BiCGSTAB
//! right-preconditioned with ILU(0). `dense_oracle_solve` is plain Gaussian
//! elimination with partial pivoting, kept independent of both for testing.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{factorize_symbolic_lu, LuSymbolicParams, NumericLu};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Par};
use serde::{Deserialize, Serialize};

use crate::error::{KsError, Result};

/// Square sparse matrix in compressed row layout with sorted, unique columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= n || c >= n {
                return Err(KsError::DimensionMismatch { expected: n, got: r.max(c) + 1 });
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self { n, row_ptr, col_idx, values })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(col, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .binary_search(&j)
            .ok()
            .map(|p| self.values[range.start + p])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i).unwrap_or(0.0)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, a)| a * x[j]).sum();
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, a) in self.row(i) {
                row[j] = a;
            }
        }
        d
    }

    /// Entry `(i, j)` stored iff `(j, i)` stored.
    pub fn is_structurally_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, _)| self.get(j, i).is_some()))
    }
}

/// A square sparse matrix with its right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn new(matrix: CsrMatrix, rhs: Vec<f64>) -> Result<Self> {
        if rhs.len() != matrix.n() {
            return Err(KsError::DimensionMismatch { expected: matrix.n(), got: rhs.len() });
        }
        Ok(Self { matrix, rhs })
    }

    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn residual_norm(&self, x: &[f64]) -> f64 {
        let ax = self.matrix.mul_vec(x);
        ax.iter().zip(&self.rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    DirectLu,
    IterativeKrylov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolveMethod,
    /// Relative residual tolerance for the iterative method.
    pub tol: f64,
    /// Iteration cap; `None` means `10 n`.
    pub max_iter: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: SolveMethod::DirectLu, tol: 1e-12, max_iter: None }
    }
}

impl SolverConfig {
    pub fn krylov() -> Self {
        Self { method: SolveMethod::IterativeKrylov, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol <= 1e-6) {
            return Err(KsError::InvalidParameter(format!(
                "solver tol must lie in (0, 1e-6], got {}",
                self.tol
            )));
        }
        if self.max_iter == Some(0) {
            return Err(KsError::InvalidParameter("solver max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn solve(system: &SparseSystem, config: &SolverConfig) -> Result<Vec<f64>> {
    config.validate()?;
    match config.method {
        SolveMethod::DirectLu => solve_direct(system),
        SolveMethod::IterativeKrylov => {
            let max_iter = config.max_iter.unwrap_or(10 * system.n().max(1));
            solve_bicgstab(system, config.tol, max_iter)
        }
    }
}

fn solve_direct(system: &SparseSystem) -> Result<Vec<f64>> {
    let n = system.n();
    if n == 0 {
        return Ok(Vec::new());
    }
    let a = &system.matrix;
    let mut triplets = Vec::with_capacity(a.nnz());
    for i in 0..n {
        for (j, v) in a.row(i) {
            triplets.push(Triplet::new(i, j, v));
        }
    }
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| KsError::SingularMatrix(format!("matrix construction failed: {e:?}")))?;
    // The automatic choice picks the simplicial kernel for 2D five-point
    // patterns, which is several times slower here than the supernodal one.
    let params = LuSymbolicParams {
        supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
        ..Default::default()
    };
    let symbolic = factorize_symbolic_lu(mat.symbolic(), params)
        .map_err(|e| KsError::SingularMatrix(format!("symbolic LU failed: {e:?}")))?;
    let par = Par::Seq;
    let req = symbolic
        .factorize_numeric_lu_scratch::<f64>(par, Default::default())
        .or(symbolic.solve_in_place_scratch::<f64>(1, par));
    let mut buf = MemBuffer::new(req);
    let mut numeric = NumericLu::<usize, f64>::new();
    let lu = symbolic
        .factorize_numeric_lu(&mut numeric, mat.as_ref(), par, MemStack::new(&mut buf), Default::default())
        .map_err(|e| KsError::SingularMatrix(format!("sparse LU failed: {e:?}")))?;
    let mut rhs = Mat::<f64>::from_fn(n, 1, |i, _| system.rhs[i]);
    lu.solve_in_place_with_conj(Conj::No, rhs.as_mut(), par, MemStack::new(&mut buf));
    let x: Vec<f64> = (0..n).map(|i| rhs[(i, 0)]).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KsError::SingularMatrix("sparse LU produced non-finite solution".into()));
    }
    Ok(x)
}

/// ILU(0) factors stored on the sparsity pattern of `A` (unit lower, upper with diagonal).
struct Ilu0 {
    lu: CsrMatrix,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    fn new(a: &CsrMatrix) -> Result<Self> {
        let n = a.n();
        let mut lu = a.clone();
        let mut diag_pos = vec![usize::MAX; n];
        for i in 0..n {
            for p in lu.row_ptr[i]..lu.row_ptr[i + 1] {
                if lu.col_idx[p] == i {
                    diag_pos[i] = p;
                }
            }
            if diag_pos[i] == usize::MAX {
                return Err(KsError::SingularMatrix(format!("ILU(0): missing diagonal in row {i}")));
            }
        }
        for i in 0..n {
            let start = lu.row_ptr[i];
            let end = lu.row_ptr[i + 1];
            for p in start..end {
                let k = lu.col_idx[p];
                if k >= i {
                    break;
                }
                let pivot = lu.values[diag_pos[k]];
                if pivot == 0.0 {
                    return Err(KsError::SingularMatrix(format!("ILU(0): zero pivot at row {k}")));
                }
                let lik = lu.values[p] / pivot;
                lu.values[p] = lik;
                // row_i[j] -= l_ik * row_k[j] for j > k on the shared pattern
                let mut q = p + 1;
                for r in diag_pos[k] + 1..lu.row_ptr[k + 1] {
                    let j = lu.col_idx[r];
                    while q < end && lu.col_idx[q] < j {
                        q += 1;
                    }
                    if q < end && lu.col_idx[q] == j {
                        lu.values[q] -= lik * lu.values[r];
                    }
                }
            }
            if lu.values[diag_pos[i]] == 0.0 {
                return Err(KsError::SingularMatrix(format!("ILU(0): zero pivot at row {i}")));
            }
        }
        Ok(Self { lu, diag_pos })
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.lu.n;
        for i in 0..n {
            let mut s = r[i];
            for p in self.lu.row_ptr[i]..self.diag_pos[i] {
                s -= self.lu.values[p] * z[self.lu.col_idx[p]];
            }
            z[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for p in self.diag_pos[i] + 1..self.lu.row_ptr[i + 1] {
                s -= self.lu.values[p] * z[self.lu.col_idx[p]];
            }
            z[i] = s / self.lu.values[self.diag_pos[i]];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn solve_bicgstab(system: &SparseSystem, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = system.n();
    let a = &system.matrix;
    let b = &system.rhs;
    let b_norm = norm2(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let precond = Ilu0::new(a)?;

    let mut r = b.clone();
    let r_hat = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut res = 1.0;

    for _ in 0..max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond.apply(&p, &mut p_hat);
        a.mul_vec_into(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            break;
        }
        alpha = rho / denom;
        // r becomes s in place
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        if norm2(&r) / b_norm <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return finish(system, x, tol);
        }
        precond.apply(&r, &mut s_hat);
        a.mul_vec_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &r) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] -= omega * t[i];
        }
        res = norm2(&r) / b_norm;
        if !res.is_finite() {
            return Err(KsError::NonFinite("BiCGSTAB iteration".into()));
        }
        if res <= tol {
            return finish(system, x, tol);
        }
    }
    Err(KsError::NoConvergence { iterations: max_iter, residual: res })
}

/// Confirms the true residual, since the recursive one can drift.
fn finish(system: &SparseSystem, x: Vec<f64>, tol: f64) -> Result<Vec<f64>> {
    let rel = system.residual_norm(&x) / norm2(&system.rhs);
    if rel <= tol * 10.0 {
        Ok(x)
    } else {
        Err(KsError::NoConvergence { iterations: 0, residual: rel })
    }
}

/// Dense Gaussian elimination with partial pivoting.
pub fn dense_oracle_solve(system: &SparseSystem) -> Result<Vec<f64>> {
    let n = system.n();
    if n > 2000 {
        return Err(KsError::Precondition(format!("dense oracle limited to n <= 2000, got {n}")));
    }
    let mut a = system.matrix.to_dense();
    let mut b = system.rhs.clone();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let (piv, piv_abs) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= f64::EPSILON * scale * n as f64 || piv_abs == 0.0 {
            return Err(KsError::SingularMatrix(format!("zero pivot in column {col}")));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let (top, bottom) = a.split_at_mut(col + 1);
        let pivot_row = &top[col];
        for (off, row) in bottom.iter_mut().enumerate() {
            let f = row[col] / pivot_row[col];
            if f != 0.0 {
                for j in col..n {
                    row[j] -= f * pivot_row[j];
                }
                b[col + 1 + off] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Ok(x)
}
