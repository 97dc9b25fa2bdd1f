//! Sparse matrices and a restarted GMRES with Jacobi preconditioning.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Duplicate entries are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.row(r).find(|&(c, _)| c == r).map_or(0.0, |(_, v)| v))
            .collect()
    }

    /// `I − s·A`.
    pub fn shifted_identity(&self, s: f64) -> Self {
        let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz() + self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                t.push((r, c, -s * v));
            }
            t.push((r, r, 1.0));
        }
        Self::from_triplets(self.n, t)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GmresOptions {
    pub restart: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            restart: 60,
            max_iterations: 3000,
            tolerance: 1e-13,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` starting from `x`, right-preconditioned by diag(A)⁻¹.
pub fn gmres(a: &CsrMatrix, b: &[f64], x: &mut [f64], opts: &GmresOptions) -> Result<SolveStats> {
    let n = a.dim();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let m = opts.restart.min(n).max(1);
    let mut total = 0usize;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        a.matvec(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = norm(&r);
        let rel = beta / b_norm;
        if rel <= opts.tolerance {
            return Ok(SolveStats {
                iterations: total,
                relative_residual: rel,
            });
        }
        if total >= opts.max_iterations {
            return Err(Error::LinearSolver {
                iterations: total,
                residual: rel,
            });
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut hess = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            for i in 0..n {
                z[i] = inv_diag[i] * basis[k][i];
            }
            a.matvec(&z, &mut w);
            // Modified Gram–Schmidt, twice for stability.
            for _ in 0..2 {
                for (j, v) in basis.iter().enumerate() {
                    let hij = dot(&w, v);
                    hess[j][k] += hij;
                    for i in 0..n {
                        w[i] -= hij * v[i];
                    }
                }
            }
            let h_next = norm(&w);
            hess[k + 1][k] = h_next;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let denom = hess[k][k].hypot(hess[k + 1][k]);
            cs[k] = if denom == 0.0 { 1.0 } else { hess[k][k] / denom };
            sn[k] = if denom == 0.0 { 0.0 } else { hess[k + 1][k] / denom };
            hess[k][k] = denom;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            if g[k + 1].abs() / b_norm <= 0.1 * opts.tolerance
                || h_next == 0.0
                || total >= opts.max_iterations
            {
                break;
            }
            basis.push(w.iter().map(|v| v / h_next).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= hess[i][j] * y[j];
            }
            y[i] = acc / hess[i][i];
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (j, yj) in y.iter().enumerate() {
                acc += yj * basis[j][i];
            }
            x[i] += inv_diag[i] * acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_merge() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (1, 0, 2.0), (0, 0, 3.0), (1, 1, 5.0)]);
        assert_eq!(a.to_dense(), vec![vec![4.0, 0.0], vec![2.0, 5.0]]);
        assert_eq!(a.diagonal(), vec![4.0, 5.0]);
    }

    #[test]
    fn solves_nonsymmetric_system() {
        let n = 200;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0 + (i % 3) as f64));
            if i + 1 < n {
                t.push((i, i + 1, -1.3));
                t.push((i + 1, i, -0.7));
            }
            t.push((i, (i * 17) % n, 0.2));
        }
        let a = CsrMatrix::from_triplets(n, t);
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        let b = a.mul(&xs);
        let mut x = vec![0.0; n];
        let stats = gmres(&a, &b, &mut x, &GmresOptions::default()).unwrap();
        assert!(stats.relative_residual <= 1e-13);
        for (p, q) in x.iter().zip(&xs) {
            assert!((p - q).abs() < 1e-11);
        }
    }

    #[test]
    fn reports_stall() {
        let a = CsrMatrix::from_triplets(3, vec![(0, 0, 1.0), (1, 1, 1.0)]);
        let mut x = vec![0.0; 3];
        let opts = GmresOptions {
            max_iterations: 10,
            ..Default::default()
        };
        assert!(matches!(
            gmres(&a, &[1.0, 1.0, 1.0], &mut x, &opts),
            Err(Error::LinearSolver { .. })
        ));
    }
}
