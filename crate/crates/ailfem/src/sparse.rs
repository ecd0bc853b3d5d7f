//! Minimal sparse SPD linear algebra: triplet assembly into compressed
//! sparse row storage, matrix-vector products, and a Jacobi-preconditioned
//! conjugate gradient solver.

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

/// Square sparse matrix in compressed sparse row format. Column indices are
/// sorted ascending within each row and duplicates are merged on assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Assemble from `(row, col, value)` triplets, summing duplicates.
    /// Entries that cancel to exactly zero are kept out of the pattern only
    /// if they never appeared; summed-to-zero duplicates stay structural.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(Error::input(format!(
                    "triplet index ({r}, {c}) out of range for dimension {n}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::input(format!(
                    "non-finite triplet value at ({r}, {c})"
                )));
            }
        }
        let mut counts = vec![0usize; n + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        // Bucket by row, then sort and merge each row by column.
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0f64; triplets.len()];
        let mut cursor = counts.clone();
        for &(r, c, v) in triplets {
            let k = cursor[r];
            cols[k] = c;
            vals[k] = v;
            cursor[r] += 1;
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..n {
            scratch.clear();
            scratch.extend(
                cols[counts[r]..counts[r + 1]]
                    .iter()
                    .copied()
                    .zip(vals[counts[r]..counts[r + 1]].iter().copied()),
            );
            scratch.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < scratch.len() {
                let c = scratch[i].0;
                let mut sum = 0.0;
                while i < scratch.len() && scratch[i].0 == c {
                    sum += scratch[i].1;
                    i += 1;
                }
                col_indices.push(c);
                values.push(sum);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(SparseMatrix {
            n,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        match self.col_indices[lo..hi].binary_search(&c) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.n {
            return Err(Error::input(format!(
                "dimension mismatch: matrix is {}x{}, vector has length {}",
                self.n,
                self.n,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        Ok(y)
    }

    fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let lo = self.row_offsets[r];
            let hi = self.row_offsets[r + 1];
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            *out = acc;
        }
    }

    /// x^T A x (used by the SPD sanity checks).
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.n {
            let lo = self.row_offsets[r];
            let hi = self.row_offsets[r + 1];
            let mut row = 0.0;
            for k in lo..hi {
                row += self.values[k] * x[self.col_indices[k]];
            }
            acc += x[r] * row;
        }
        acc
    }

    pub fn is_structurally_symmetric(&self) -> bool {
        for r in 0..self.n {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_indices[k];
                if self.get(c, r) == 0.0 && self.values[k] != 0.0 {
                    return false;
                }
            }
        }
        true
    }

    /// Largest |A_ij - A_ji| over the pattern.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_indices[k];
                worst = worst.max((self.values[k] - self.get(c, r)).abs());
            }
        }
        worst
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve A x = b for SPD A with preconditioned conjugate gradients
/// (Jacobi preconditioner), starting from the zero vector.
///
/// Returns x with `||A x - b|| <= rel_tol * ||b||`; the residual bound is
/// re-verified on the true residual before returning.
pub fn solve_spd(a: &SparseMatrix, b: &[f64], rel_tol: f64) -> Result<Vector> {
    let x0 = vec![0.0; a.dim()];
    solve_spd_with_guess(a, b, &x0, rel_tol)
}

/// Same as [`solve_spd`] but warm-started from `x0`.
pub fn solve_spd_with_guess(
    a: &SparseMatrix,
    b: &[f64],
    x0: &[f64],
    rel_tol: f64,
) -> Result<Vector> {
    let n = a.dim();
    if b.len() != n || x0.len() != n {
        return Err(Error::input(format!(
            "dimension mismatch: matrix {}x{}, b {}, x0 {}",
            n,
            n,
            b.len(),
            x0.len()
        )));
    }
    if !(rel_tol > 0.0) {
        return Err(Error::input("rel_tol must be positive".to_string()));
    }
    let norm_b = norm2(b);
    if norm_b == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let target = rel_tol * norm_b;

    let mut inv_diag = vec![0.0; n];
    for (i, slot) in inv_diag.iter_mut().enumerate() {
        let d = a.get(i, i);
        if !(d > 0.0) {
            return Err(Error::input(format!(
                "matrix is not positive definite: diagonal entry {i} is {d}"
            )));
        }
        *slot = 1.0 / d;
    }

    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    a.mul_vec_into(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    let max_iter = 10 * n.max(1);
    for _ in 0..max_iter {
        if norm2(&r) <= target {
            // Recompute the true residual: the recurrence can drift.
            a.mul_vec_into(&x, &mut ap);
            let mut true_res = 0.0;
            for i in 0..n {
                let d = b[i] - ap[i];
                true_res += d * d;
            }
            if true_res.sqrt() <= target {
                return Ok(x);
            }
            // Restart from the true residual.
            for i in 0..n {
                r[i] = b[i] - ap[i];
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::input(
                "matrix is not positive definite: p^T A p <= 0 encountered".to_string(),
            ));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // Verify the true residual once more before giving a verdict.
    a.mul_vec_into(&x, &mut ap);
    let mut true_res = 0.0;
    for i in 0..n {
        let d = b[i] - ap[i];
        true_res += d * d;
    }
    let true_res = true_res.sqrt();
    if true_res <= target {
        return Ok(x);
    }
    Err(Error::SolverDiverged {
        residual: true_res,
        target,
        iterations: max_iter,
    })
}
