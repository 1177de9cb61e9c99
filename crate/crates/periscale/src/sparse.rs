//! Sparse symmetric matrices in CSR form and a Jacobi-preconditioned
//! conjugate gradient solver.
//!
//! All reductions run in a fixed order (rows in parallel, each row summed
//! sequentially; global dot products sequential), so repeated solves of the
//! same system produce bit-identical results regardless of thread count.

use rayon::prelude::*;

use crate::{Error, Result};

/// Symmetric sparse matrix, full (not triangular) storage, sorted column
/// indices within each row.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; n + 1];
        let mut indices: Vec<u32> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut cur_row = 0usize;
        for &(r, c, v) in &triplets {
            let r = r as usize;
            while cur_row < r {
                cur_row += 1;
                indptr[cur_row] = indices.len();
            }
            if indices.len() > indptr[cur_row] && *indices.last().unwrap() == c {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
            }
        }
        while cur_row < n {
            cur_row += 1;
            indptr[cur_row] = indices.len();
        }
        CsrMatrix {
            n,
            indptr,
            indices,
            values,
        }
    }

    /// Build a matrix with the given sparsity pattern and all values zero.
    /// `adjacency[row]` must be sorted and contain the diagonal.
    pub fn from_pattern(adjacency: &[Vec<u32>]) -> Self {
        let n = adjacency.len();
        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0usize);
        let mut indices = Vec::new();
        for row in adjacency {
            debug_assert!(row.windows(2).all(|w| w[0] < w[1]));
            indices.extend_from_slice(row);
            indptr.push(indices.len());
        }
        let values = vec![0.0; indices.len()];
        CsrMatrix {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Vec<f64>) {
        assert_eq!(values.len(), self.indices.len());
        self.values = values;
    }

    pub fn zero_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Flat index of entry (row, col), if present in the pattern.
    pub fn position(&self, row: usize, col: u32) -> Option<usize> {
        let lo = self.indptr[row];
        let hi = self.indptr[row + 1];
        self.indices[lo..hi]
            .binary_search(&col)
            .ok()
            .map(|k| lo + k)
    }

    pub fn row(&self, row: usize) -> (&[u32], &[f64]) {
        let lo = self.indptr[row];
        let hi = self.indptr[row + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// y = A x, deterministic row-parallel product.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        let indptr = &self.indptr;
        let indices = &self.indices;
        let values = &self.values;
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let mut acc = 0.0;
            for k in indptr[i]..indptr[i + 1] {
                acc += values[k] * x[indices[k] as usize];
            }
            *yi = acc;
        });
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.position(i, i as u32)
                    .map(|k| self.values[k])
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Impose `u[dof] = value` for each constraint, preserving symmetry:
    /// the column is moved to the right-hand side, row and column are
    /// zeroed and the diagonal set to 1.
    pub fn apply_dirichlet(&mut self, rhs: &mut [f64], constraints: &[(usize, f64)]) {
        let mut is_bc = vec![false; self.n];
        let mut bc_val = vec![0.0; self.n];
        for &(dof, val) in constraints {
            is_bc[dof] = true;
            bc_val[dof] = val;
        }
        // move known columns to the rhs
        for &(dof, val) in constraints {
            let (cols, vals) = self.row(dof);
            let updates: Vec<(usize, f64)> = cols
                .iter()
                .zip(vals)
                .filter(|(&c, _)| !is_bc[c as usize])
                .map(|(&c, &v)| (c as usize, v * val))
                .collect();
            for (c, dv) in updates {
                rhs[c] -= dv;
            }
        }
        // zero rows and columns, unit diagonal
        for dof in 0..self.n {
            let lo = self.indptr[dof];
            let hi = self.indptr[dof + 1];
            if is_bc[dof] {
                for k in lo..hi {
                    self.values[k] = if self.indices[k] as usize == dof {
                        1.0
                    } else {
                        0.0
                    };
                }
                rhs[dof] = bc_val[dof];
            } else {
                for k in lo..hi {
                    if is_bc[self.indices[k] as usize] {
                        self.values[k] = 0.0;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgSummary {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradient; `x` doubles as the initial
/// guess. Converges on `||b - Ax|| <= tol * ||b||`.
pub fn solve_cg(a: &CsrMatrix, b: &[f64], x: &mut [f64], opts: CgOptions) -> Result<CgSummary> {
    let n = a.n();
    let norm_b = dot(b, b).sqrt();
    if norm_b == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgSummary {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let diag = a.diagonal();
    if diag.iter().any(|&d| d <= 0.0 || !d.is_finite()) {
        return Err(Error::SingularSystem(
            "non-positive diagonal entry in CG".into(),
        ));
    }
    let inv_diag: Vec<f64> = diag.iter().map(|&d| 1.0 / d).collect();

    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    r.par_iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);

    let mut z: Vec<f64> = r
        .par_iter()
        .zip(&inv_diag)
        .map(|(ri, mi)| ri * mi)
        .collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    let target = opts.tol * norm_b;
    let mut res = dot(&r, &r).sqrt();
    let mut iterations = 0;
    while res > target && iterations < opts.max_iter {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::SingularSystem(format!(
                "CG breakdown (pAp = {pap:.3e}) after {iterations} iterations"
            )));
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut()
            .zip(&ap)
            .for_each(|(ri, api)| *ri -= alpha * api);
        z.par_iter_mut()
            .zip(r.par_iter().zip(&inv_diag))
            .for_each(|(zi, (ri, mi))| *zi = ri * mi);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut()
            .zip(&z)
            .for_each(|(pi, zi)| *pi = zi + beta * *pi);
        res = dot(&r, &r).sqrt();
        iterations += 1;
    }
    if res > target {
        return Err(Error::SingularSystem(format!(
            "CG stalled at relative residual {:.3e} after {iterations} iterations",
            res / norm_b
        )));
    }
    Ok(CgSummary {
        iterations,
        relative_residual: res / norm_b,
    })
}
