//! Velocity difference operators on one block of a [`VelocityGrid`].
//!
//! `D_k` is the centered gradient along axis k with second-order one-sided
//! closure at both ends, so it is exact on quadratics. `Δ_h` is the compact
//! Laplacian with zero flux through the truncation boundary.

use crate::phase_grid::VelocityGrid;

/// Axis-local gradient weights `(offset, weight·h)` at axis index `j`.
pub fn gradient_weights(j: usize, m: usize) -> [(isize, f64); 3] {
    if j == 0 {
        [(0, -1.5), (1, 2.0), (2, -0.5)]
    } else if j == m - 1 {
        [(0, 1.5), (-1, -2.0), (-2, 0.5)]
    } else {
        [(-1, -0.5), (1, 0.5), (0, 0.0)]
    }
}

/// `(D_k u)_i` for every node, written into `out`.
pub fn gradient_axis(grid: &VelocityGrid, u: &[f64], k: usize, out: &mut [f64]) {
    let m = grid.points_per_axis();
    let stride = grid.stride(k) as isize;
    let inv_h = 1.0 / grid.spacing();
    for (i, o) in out.iter_mut().enumerate() {
        let j = grid.axis_index(i, k);
        let mut acc = 0.0;
        for (off, w) in gradient_weights(j, m) {
            if w != 0.0 {
                acc += w * u[(i as isize + off * stride) as usize];
            }
        }
        *o = acc * inv_h;
    }
}

/// Full gradient, N values per node.
pub fn gradient(grid: &VelocityGrid, u: &[f64]) -> Vec<f64> {
    let dim = grid.dim();
    let n = grid.len();
    let mut out = vec![0.0; n * dim];
    let mut tmp = vec![0.0; n];
    for k in 0..dim {
        gradient_axis(grid, u, k, &mut tmp);
        for i in 0..n {
            out[i * dim + k] = tmp[i];
        }
    }
    out
}

/// `Σ_k D_kᵀ w_k` for a vector field `w` (N values per node).
pub fn gradient_transpose(grid: &VelocityGrid, w: &[f64]) -> Vec<f64> {
    let dim = grid.dim();
    let m = grid.points_per_axis();
    let inv_h = 1.0 / grid.spacing();
    let n = grid.len();
    let mut out = vec![0.0; n];
    for k in 0..dim {
        let stride = grid.stride(k) as isize;
        for i in 0..n {
            let j = grid.axis_index(i, k);
            let wi = w[i * dim + k] * inv_h;
            for (off, c) in gradient_weights(j, m) {
                if c != 0.0 {
                    out[(i as isize + off * stride) as usize] += c * wi;
                }
            }
        }
    }
    out
}

/// Compact zero-flux Laplacian.
pub fn laplacian(grid: &VelocityGrid, u: &[f64]) -> Vec<f64> {
    let dim = grid.dim();
    let m = grid.points_per_axis();
    let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
    let mut out = vec![0.0; u.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..dim {
            let s = grid.stride(k);
            let j = grid.axis_index(i, k);
            if j > 0 {
                acc += u[i - s] - u[i];
            }
            if j + 1 < m {
                acc += u[i + s] - u[i];
            }
        }
        *o = acc * inv_h2;
    }
    out
}

/// Laplacian neighbours `(node, weight)` of node `i`, diagonal included.
pub fn laplacian_row(grid: &VelocityGrid, i: usize) -> Vec<(usize, f64)> {
    let dim = grid.dim();
    let m = grid.points_per_axis();
    let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
    let mut row = Vec::with_capacity(2 * dim + 1);
    let mut diag = 0.0;
    for k in 0..dim {
        let s = grid.stride(k);
        let j = grid.axis_index(i, k);
        if j > 0 {
            row.push((i - s, inv_h2));
            diag -= inv_h2;
        }
        if j + 1 < m {
            row.push((i + s, inv_h2));
            diag -= inv_h2;
        }
    }
    row.push((i, diag));
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_exact_on_quadratics() {
        let g = VelocityGrid::new(2, 2.0, 7).unwrap();
        let u: Vec<f64> = (0..g.len())
            .map(|i| {
                let v = g.node(i);
                1.0 + 2.0 * v[0] - v[1] + 3.0 * v[0] * v[0] - v[0] * v[1] + 0.5 * v[1] * v[1]
            })
            .collect();
        let du = gradient(&g, &u);
        for i in 0..g.len() {
            let v = g.node(i);
            assert!((du[2 * i] - (2.0 + 6.0 * v[0] - v[1])).abs() < 1e-12);
            assert!((du[2 * i + 1] - (-1.0 - v[0] + v[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let g = VelocityGrid::new(3, 1.0, 5).unwrap();
        let n = g.len();
        let u: Vec<f64> = (0..n).map(|i| ((i * 7 % 13) as f64).sin()).collect();
        let w: Vec<f64> = (0..3 * n).map(|i| ((i * 5 % 11) as f64).cos()).collect();
        let du = gradient(&g, &u);
        let dtw = gradient_transpose(&g, &w);
        let lhs: f64 = du.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&dtw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-11 * lhs.abs().max(1.0));
    }

    #[test]
    fn transpose_sums_to_zero() {
        let g = VelocityGrid::new(2, 1.0, 6).unwrap();
        let w: Vec<f64> = (0..2 * g.len()).map(|i| (i as f64).sqrt()).collect();
        let s: f64 = gradient_transpose(&g, &w).iter().sum();
        assert!(s.abs() < 1e-10);
    }

    #[test]
    fn laplacian_conserves_and_matches_rows() {
        let g = VelocityGrid::new(2, 1.0, 5).unwrap();
        let u: Vec<f64> = (0..g.len()).map(|i| ((i * 3) as f64).cos()).collect();
        let l = laplacian(&g, &u);
        assert!(l.iter().sum::<f64>().abs() < 1e-11);
        for i in 0..g.len() {
            let r: f64 = laplacian_row(&g, i).iter().map(|&(j, w)| w * u[j]).sum();
            assert!((r - l[i]).abs() < 1e-12);
        }
    }
}
