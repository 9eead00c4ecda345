//! Compressed sparse row storage and a Jacobi-preconditioned conjugate gradient.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix on a given square pattern. Columns within a row must be sorted.
    pub fn zeros_with_pattern(n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>) -> Self {
        debug_assert_eq!(row_ptr.len(), n + 1);
        debug_assert!(row_ptr.windows(2).all(|w| w[0] <= w[1]));
        let nnz = col_idx.len();
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    pub fn nrows(&self) -> usize {
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

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Position of entry (i, j) in the value array, if it is in the pattern.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (cols, _) = self.row(i);
        cols.binary_search(&j).ok().map(|p| self.row_ptr[i] + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.values[s])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &a)| a * x[j]).sum();
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// `x^T A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| {
                let (cols, vals) = self.row(i);
                x[i] * cols.iter().zip(vals).map(|(&j, &a)| a * y[j]).sum::<f64>()
            })
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| {
            let (cols, vals) = self.row(i);
            cols.iter()
                .zip(vals)
                .all(|(&j, &a)| (a - self.get(j, i)).abs() <= tol)
        })
    }

    /// `self += a * other`; both must share the pattern.
    pub fn add_scaled(&mut self, a: f64, other: &CsrMatrix) {
        assert_eq!(self.col_idx, other.col_idx, "pattern mismatch");
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (i, di) in d.iter().enumerate() {
            let s = self.slot(i, i).expect("diagonal missing from pattern");
            self.values[s] += di;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &a) in cols.iter().zip(vals) {
                row[j] = a;
            }
        }
        out
    }
}

/// Jacobi-preconditioned CG for a symmetric positive definite system.
/// Returns the solution and the iteration count.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = a.nrows();
    if b.len() != n || x0.len() != n {
        return Err(Error::Dimension(format!(
            "cg: matrix {n}, rhs {}, guess {}",
            b.len(),
            x0.len()
        )));
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let mut x = x0.to_vec();
    let mut r = a.matvec(&x);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if norm2(&r) <= rel_tol * bnorm {
            return Ok((x, it));
        }
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::SolverFailure(format!(
                "cg: non-positive curvature {pap:e} at iteration {it}"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if norm2(&r) <= rel_tol * bnorm {
        return Ok((x, max_iter));
    }
    Err(Error::SolverFailure(format!(
        "cg: no convergence in {max_iter} iterations (residual {:e})",
        norm2(&r) / bnorm
    )))
}

/// Sparse LU for a fixed CSR pattern, refactored numerically as values change.
///
/// The CSR arrays of `A` are handed to faer as the CSC arrays of `Aᵀ`, so
/// solves go through the transposed factorization.
pub struct SparseLu {
    n: usize,
    symbolic: faer::sparse::SymbolicSparseColMat<usize>,
    sym_lu: faer::sparse::linalg::solvers::SymbolicLu<usize>,
}

impl std::fmt::Debug for SparseLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseLu").field("n", &self.n).finish()
    }
}

pub struct SparseLuFactor {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl SparseLu {
    pub fn new(n: usize, row_ptr: &[usize], col_idx: &[usize]) -> Result<Self> {
        let symbolic = faer::sparse::SymbolicSparseColMat::new_checked(
            n,
            n,
            row_ptr.to_vec(),
            None,
            col_idx.to_vec(),
        );
        let sym_lu = faer::sparse::linalg::solvers::SymbolicLu::try_new(symbolic.as_ref())
            .map_err(|e| Error::SolverFailure(format!("symbolic LU: {e:?}")))?;
        Ok(SparseLu {
            n,
            symbolic,
            sym_lu,
        })
    }

    pub fn factor(&self, values: &[f64]) -> Result<SparseLuFactor> {
        let mat = faer::sparse::SparseColMatRef::new(self.symbolic.as_ref(), values);
        let lu = faer::sparse::linalg::solvers::Lu::try_new_with_symbolic(self.sym_lu.clone(), mat)
            .map_err(|e| Error::SolverFailure(format!("numeric LU: {e:?}")))?;
        Ok(SparseLuFactor { lu })
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

impl SparseLuFactor {
    /// Solves `A x = b` where `A` is the CSR matrix whose values were factored.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        use faer::linalg::solvers::SolveCore;
        let mut rhs = faer::Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.lu
            .solve_transpose_in_place_with_conj(faer::Conj::No, rhs.as_mut());
        let x: Vec<f64> = (0..b.len()).map(|i| rhs[(i, 0)]).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure("singular sparse system".into()));
        }
        Ok(x)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
