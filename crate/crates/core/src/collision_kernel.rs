//! Power-law collision kernels and their mollified, cut-off regularization.
//!
//! The regularized kernel is `aⁿ(z) = Γⁿ(|z|) ψⁿ(|z|) Pⁿ(z)` with
//! `Pⁿ(z) = (|z|² I − z⊗z) / (|z|² + 1/n)`. Writing `w(s) = Γⁿψⁿ/(s + 1/n)`,
//! `aⁿ = w(s)(sI − z⊗z)` and the divergence collapses to `−(N−1) w(s) z`.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase_grid::VelocityGrid;
use crate::quadrature::{low_discrepancy, GaussLegendre};

/// Γ(s) = s^{γ+2}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionSpec {
    gamma: f64,
    dim: usize,
}

impl CrossSectionSpec {
    pub fn new(gamma: f64, dim: usize) -> Result<Self> {
        if !(-3.0..0.0).contains(&gamma) {
            return Err(Error::param("kernel.gamma", format!("{gamma} is outside [-3, 0)")));
        }
        if dim != 2 && dim != 3 {
            return Err(Error::param("grid.dim", format!("{dim} is not 2 or 3")));
        }
        if gamma + 2.0 <= -(dim as f64) {
            return Err(Error::param(
                "kernel.gamma",
                format!("|z|^{} is not locally integrable in dimension {dim}", gamma + 2.0),
            ));
        }
        let spec = Self { gamma, dim };
        if spec.ellipticity_floor(1.0).is_some() {
            for &r in &[0.05, 0.25, 0.5, 1.0, 2.0] {
                let k = spec.ellipticity_floor(r).unwrap();
                for i in 1..=16 {
                    let s = r * i as f64 / 16.0;
                    assert!(k <= spec.eval(s), "ellipticity witness fails at R={r}, s={s}");
                }
            }
        }
        Ok(spec)
    }

    pub fn coulomb(dim: usize) -> Self {
        Self::new(-3.0, dim).expect("coulomb exponent is admissible")
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn exponent(&self) -> f64 {
        self.gamma + 2.0
    }

    pub(crate) fn eval(&self, s: f64) -> f64 {
        s.powf(self.exponent())
    }

    pub fn cross_section(&self, s: f64) -> Result<f64> {
        if s < 0.0 || s.is_nan() {
            return Err(Error::param("s", format!("{s} is not a length")));
        }
        if s == 0.0 && self.exponent() < 0.0 {
            return Err(Error::Singular(format!(
                "Γ(0) diverges for γ = {}; use the mollified form",
                self.gamma
            )));
        }
        Ok(self.eval(s))
    }

    /// Witness `K_R = Γ(2R)` for `inf_{|z| ≤ R} Γ`. Only a decreasing Γ has a
    /// positive witness, so soft potentials with γ > −2 return `None`.
    pub fn ellipticity_floor(&self, radius: f64) -> Option<f64> {
        (self.exponent() <= 0.0 && radius > 0.0).then(|| self.eval(2.0 * radius))
    }

    /// A split exponent `r` with `Γ ∈ L^r + L^∞` and `r > N/(N−1)`, if any.
    /// Coulomb in two dimensions sits exactly on the boundary and has none.
    pub fn integrability_exponent(&self) -> Option<f64> {
        let lower = self.dim as f64 / (self.dim as f64 - 1.0);
        let upper = if self.exponent() < 0.0 {
            self.dim as f64 / -self.exponent()
        } else {
            f64::INFINITY
        };
        if upper <= lower {
            None
        } else if upper.is_infinite() {
            Some(2.0 * lower)
        } else {
            Some(0.5 * (lower + upper))
        }
    }
}

/// Standard bump `c·exp(−1/(1−|z|²))` on the unit ball, unit integral in ℝᴺ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mollifier {
    dim: usize,
    norm: f64,
}

pub(crate) fn bump(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

pub(crate) fn sphere_area(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        4 => 2.0 * PI * PI,
        5 => 8.0 * PI * PI / 3.0,
        6 => PI * PI * PI,
        _ => {
            // |S^{d-1}| = 2π |S^{d-3}| / (d-2)
            2.0 * PI * sphere_area(dim - 2) / (dim as f64 - 2.0)
        }
    }
}

/// ∫_{unit ball in ℝᵈ} exp(−1/(1−|z|²)) dz.
pub(crate) fn bump_mass(dim: usize) -> f64 {
    let q = GaussLegendre::new(64);
    let radial = q.composite(0.0, 1.0, 16, |r| r.powi(dim as i32 - 1) * bump(r * r));
    sphere_area(dim) * radial
}

impl Mollifier {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            norm: 1.0 / bump_mass(dim),
        }
    }

    pub fn normalization(&self) -> f64 {
        self.norm
    }

    /// η(z) as a function of |z|².
    pub fn eval_sq(&self, r2: f64) -> f64 {
        self.norm * bump(r2)
    }

    /// η_n(z) = nᴺ η(nz), as a function of |z|².
    pub fn scaled_sq(&self, r2: f64, n: f64) -> f64 {
        n.powi(self.dim as i32) * self.eval_sq(r2 * n * n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub n: u32,
}

impl KernelConfig {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("kernel.n", "regularization index must be positive"));
        }
        Ok(Self { n })
    }

    pub fn mollifier_width(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn cutoff_scale(&self) -> f64 {
        self.n as f64
    }

    /// ψⁿ(z) = exp(−|z|²/(2n²)) as a function of |z|².
    pub fn cutoff_sq(&self, s: f64) -> f64 {
        let n = self.n as f64;
        (-s / (2.0 * n * n)).exp()
    }
}

/// P(z) = I − z⊗z/|z|².
pub fn projector(z: &[f64]) -> Result<DMatrix<f64>> {
    let s: f64 = z.iter().map(|c| c * c).sum();
    if s == 0.0 {
        return Err(Error::Singular("projector is undefined at z = 0".into()));
    }
    let n = z.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        (if i == j { 1.0 } else { 0.0 }) - z[i] * z[j] / s
    }))
}

/// Pⁿ(z) = (|z|² I − z⊗z)/(|z|² + 1/n); zero at the origin.
pub fn projector_regularized(z: &[f64], n: u32) -> DMatrix<f64> {
    let s: f64 = z.iter().map(|c| c * c).sum();
    let d = s + 1.0 / n as f64;
    let k = z.len();
    DMatrix::from_fn(k, k, |i, j| {
        ((if i == j { s } else { 0.0 }) - z[i] * z[j]) / d
    })
}

/// Evaluator for aⁿ, its divergence and its square root at arbitrary z.
#[derive(Debug, Clone)]
pub struct RegularizedKernel {
    spec: CrossSectionSpec,
    config: KernelConfig,
    mollifier: Mollifier,
    radial_rule: GaussLegendre,
    angular_rule: GaussLegendre,
}

const RADIAL_PANELS: usize = 4;
const ANGULAR_PANELS: usize = 4;

impl RegularizedKernel {
    pub fn new(spec: CrossSectionSpec, config: KernelConfig) -> Self {
        Self {
            spec,
            config,
            mollifier: Mollifier::new(spec.dim()),
            radial_rule: GaussLegendre::new(48),
            angular_rule: GaussLegendre::new(32),
        }
    }

    pub fn spec(&self) -> &CrossSectionSpec {
        &self.spec
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }

    /// Γⁿ(ρ) = ∫ Γ(|u|) η_n(z − u) du with |z| = ρ, in polar coordinates
    /// about the singularity of Γ.
    pub fn mollified_cross_section(&self, rho: f64) -> f64 {
        let dim = self.dim();
        let n = self.config.n as f64;
        let eps = 1.0 / n;
        let p = self.spec.exponent() + dim as f64 - 1.0;
        let r_lo = (rho - eps).max(0.0);
        let r_hi = rho + eps;
        let shell = |r: f64| -> f64 {
            if r <= 0.0 {
                return 0.0;
            }
            let ang = self.angular_mass(rho, r, eps, n);
            r.powf(p) * ang
        };
        if r_lo == 0.0 && p.fract() != 0.0 {
            // r = r_hi t² smooths the fractional power at the origin.
            self.radial_rule
                .composite(0.0, 1.0, RADIAL_PANELS, |t| 2.0 * r_hi * t * shell(r_hi * t * t))
        } else {
            self.radial_rule.composite(r_lo, r_hi, RADIAL_PANELS, shell)
        }
    }

    /// ∫_{S^{N−1}} η_n(z − rθ) dθ for |z| = ρ.
    fn angular_mass(&self, rho: f64, r: f64, eps: f64, n: f64) -> f64 {
        let dim = self.dim();
        let eta = |d2: f64| self.mollifier.scaled_sq(d2.max(0.0), n);
        if rho == 0.0 {
            return sphere_area(dim) * eta(r * r);
        }
        let c0 = ((rho * rho + r * r - eps * eps) / (2.0 * rho * r)).max(-1.0);
        if c0 >= 1.0 {
            return 0.0;
        }
        match dim {
            2 => {
                let phi_max = c0.acos();
                2.0 * self.angular_rule.composite(0.0, phi_max, ANGULAR_PANELS, |phi| {
                    eta(rho * rho + r * r - 2.0 * rho * r * phi.cos())
                })
            }
            3 => {
                2.0 * PI
                    * self.angular_rule.composite(c0, 1.0, ANGULAR_PANELS, |u| {
                        eta(rho * rho + r * r - 2.0 * rho * r * u)
                    })
            }
            _ => unreachable!("dimension checked at construction"),
        }
    }

    /// Γⁿψⁿ as a function of s = |z|².
    pub fn radial_weight(&self, s: f64) -> f64 {
        self.mollified_cross_section(s.sqrt()) * self.config.cutoff_sq(s)
    }

    pub fn kernel_matrix(&self, z: &[f64]) -> DMatrix<f64> {
        let s = norm_sq(z);
        let k = z.len();
        let mut out = vec![0.0; k * k];
        fill_matrix(&mut out, z, s, self.radial_weight(s), self.inv_n());
        DMatrix::from_row_slice(k, k, &out)
    }

    pub fn kernel_divergence(&self, z: &[f64]) -> DVector<f64> {
        let s = norm_sq(z);
        let mut out = vec![0.0; z.len()];
        fill_divergence(&mut out, z, s, self.radial_weight(s), self.inv_n());
        DVector::from_vec(out)
    }

    pub fn kernel_sqrt(&self, z: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let s = norm_sq(z);
        let k = z.len();
        let mut m = vec![0.0; k * k];
        let mut d = vec![0.0; k];
        fill_sqrt(&mut m, &mut d, z, s, self.radial_weight(s), self.inv_n());
        (DMatrix::from_row_slice(k, k, &m), DVector::from_vec(d))
    }

    fn inv_n(&self) -> f64 {
        1.0 / self.config.n as f64
    }

    /// Constant `C` with `Γⁿ(z) ≥ C` for `|z| ≤ R`. Γⁿ averages Γ over the
    /// ball of radius R + 1/n, so `K_{2R}` works once `R ≥ 1/(3n)`; below
    /// that the radius is widened to keep the bound true.
    pub fn mollified_floor(&self, radius: f64) -> Option<f64> {
        let widened = (2.0 * radius).max(0.5 * (radius + self.inv_n()));
        self.spec.ellipticity_floor(widened)
    }
}

fn norm_sq(z: &[f64]) -> f64 {
    z.iter().map(|c| c * c).sum()
}

fn fill_matrix(out: &mut [f64], z: &[f64], s: f64, weight: f64, inv_n: f64) {
    let k = z.len();
    let w = weight / (s + inv_n);
    for i in 0..k {
        for j in 0..k {
            let delta = if i == j { s } else { 0.0 };
            out[i * k + j] = w * (delta - z[i] * z[j]);
        }
    }
}

fn fill_divergence(out: &mut [f64], z: &[f64], s: f64, weight: f64, inv_n: f64) {
    let k = z.len();
    let w = weight / (s + inv_n);
    for i in 0..k {
        out[i] = -((k - 1) as f64) * w * z[i];
    }
}

fn fill_sqrt(m: &mut [f64], d: &mut [f64], z: &[f64], s: f64, weight: f64, inv_n: f64) {
    let k = z.len();
    if s == 0.0 {
        m.iter_mut().for_each(|x| *x = 0.0);
        d.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let phi = (weight * s / (s + inv_n)).sqrt();
    for i in 0..k {
        for j in 0..k {
            let delta = if i == j { 1.0 } else { 0.0 };
            m[i * k + j] = phi * (delta - z[i] * z[j] / s);
        }
        d[i] = -((k - 1) as f64) * phi * z[i] / s;
    }
}

/// Samples of aⁿ, ∇·aⁿ, √aⁿ and ∇·√aⁿ on the difference lattice
/// `{v − v*}`, indexed by offsets `d_k + M − 1 ∈ [0, 2M−2]`, last axis fastest.
#[derive(Debug, Clone)]
pub struct KernelTable {
    dim: usize,
    points: usize,
    spacing: f64,
    n: u32,
    gamma: f64,
    a: Vec<f64>,
    div: Vec<f64>,
    sqrt: Vec<f64>,
    sqrt_div: Vec<f64>,
}

impl KernelTable {
    pub fn build(grid: &VelocityGrid, spec: CrossSectionSpec, config: KernelConfig) -> Result<Self> {
        if grid.dim() != spec.dim() {
            return Err(Error::InvalidGrid(format!(
                "kernel dimension {} differs from grid dimension {}",
                spec.dim(),
                grid.dim()
            )));
        }
        let kernel = RegularizedKernel::new(spec, config);
        let dim = grid.dim();
        let m = grid.points_per_axis();
        let h = grid.spacing();
        let side = 2 * m - 1;
        let count = side.pow(dim as u32);

        // Γⁿψⁿ depends on the integer key |d|² only.
        let max_key = dim * (m - 1) * (m - 1);
        let mut seen = vec![false; max_key + 1];
        let mut keys = Vec::new();
        let axis_keys = (0..m).map(|i| i * i);
        let axis_keys: Vec<usize> = axis_keys.collect();
        let mut stack = vec![(0usize, 0usize)];
        while let Some((depth, acc)) = stack.pop() {
            if depth == dim {
                if !seen[acc] {
                    seen[acc] = true;
                    keys.push(acc);
                }
                continue;
            }
            for &k in &axis_keys {
                stack.push((depth + 1, acc + k));
            }
        }
        let values: Vec<(usize, f64)> = keys
            .par_iter()
            .map(|&key| (key, kernel.radial_weight(key as f64 * h * h)))
            .collect();
        let radial: HashMap<usize, f64> = values.into_iter().collect();

        let inv_n = 1.0 / config.n as f64;
        let mut a = vec![0.0; count * dim * dim];
        let mut div = vec![0.0; count * dim];
        let mut sqrt = vec![0.0; count * dim * dim];
        let mut sqrt_div = vec![0.0; count * dim];
        a.par_chunks_mut(dim * dim)
            .zip(div.par_chunks_mut(dim))
            .zip(sqrt.par_chunks_mut(dim * dim))
            .zip(sqrt_div.par_chunks_mut(dim))
            .enumerate()
            .for_each(|(idx, (((am, dv), sm), sd))| {
                let mut rem = idx;
                let mut z = [0.0; 3];
                let mut key = 0usize;
                for k in (0..dim).rev() {
                    let off = (rem % side) as isize - (m as isize - 1);
                    rem /= side;
                    z[k] = off as f64 * h;
                    key += (off * off) as usize;
                }
                let z = &z[..dim];
                let s = norm_sq(z);
                let w = radial[&key];
                fill_matrix(am, z, s, w, inv_n);
                fill_divergence(dv, z, s, w, inv_n);
                fill_sqrt(sm, sd, z, s, w, inv_n);
            });
        Ok(Self {
            dim,
            points: m,
            spacing: h,
            n: config.n,
            gamma: spec.gamma(),
            a,
            div,
            sqrt,
            sqrt_div,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn side(&self) -> usize {
        2 * self.points - 1
    }

    pub fn len(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Table index of the displacement with integer offsets `d`.
    pub fn index(&self, d: &[isize]) -> usize {
        let side = self.side();
        let shift = self.points as isize - 1;
        d.iter().fold(0, |acc, &o| acc * side + (o + shift) as usize)
    }

    /// Integer offsets of table entry `idx`.
    pub fn offsets(&self, idx: usize) -> [isize; 3] {
        let side = self.side();
        let mut rem = idx;
        let mut d = [0isize; 3];
        for k in (0..self.dim).rev() {
            d[k] = (rem % side) as isize - (self.points as isize - 1);
            rem /= side;
        }
        d
    }

    /// Entry index of the displacement `v_i − v_j` between two velocity nodes.
    pub fn pair_index(&self, grid: &VelocityGrid, i: usize, j: usize) -> usize {
        let side = self.side();
        let shift = self.points - 1;
        let mut idx = 0;
        for k in 0..self.dim {
            let d = grid.axis_index(i, k) + shift - grid.axis_index(j, k);
            idx = idx * side + d;
        }
        idx
    }

    pub fn a(&self, idx: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.a[idx * s..(idx + 1) * s]
    }

    pub fn div(&self, idx: usize) -> &[f64] {
        &self.div[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn sqrt(&self, idx: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.sqrt[idx * s..(idx + 1) * s]
    }

    pub fn sqrt_div(&self, idx: usize) -> &[f64] {
        &self.sqrt_div[idx * self.dim..(idx + 1) * self.dim]
    }

    pub(crate) fn a_raw(&self) -> &[f64] {
        &self.a
    }

    pub(crate) fn div_raw(&self) -> &[f64] {
        &self.div
    }

    pub fn displacement(&self, idx: usize) -> Vec<f64> {
        let d = self.offsets(idx);
        d[..self.dim].iter().map(|&o| o as f64 * self.spacing).collect()
    }

    pub fn check_invariants(&self) -> TableInvariants {
        let dim = self.dim;
        let mut psd_min_eigenvalue = f64::INFINITY;
        let mut max_az_residual = 0.0f64;
        let mut symmetry_residual = 0.0f64;
        let mut sqrt_residual = 0.0f64;
        for idx in 0..self.len() {
            let z = self.displacement(idx);
            let a = DMatrix::from_row_slice(dim, dim, self.a(idx));
            let eig = SymmetricEigen::new(a.clone()).eigenvalues.min();
            psd_min_eigenvalue = psd_min_eigenvalue.min(eig);
            let az = &a * DVector::from_column_slice(&z);
            max_az_residual = max_az_residual.max(az.amax());
            let mut neg = self.offsets(idx);
            for o in neg.iter_mut().take(dim) {
                *o = -*o;
            }
            let mirror = self.index(&neg[..dim]);
            for (x, y) in self.a(idx).iter().zip(self.a(mirror)) {
                symmetry_residual = symmetry_residual.max((x - y).abs());
            }
            for i in 0..dim {
                for j in 0..dim {
                    symmetry_residual =
                        symmetry_residual.max((a[(i, j)] - a[(j, i)]).abs());
                }
            }
            let r = DMatrix::from_row_slice(dim, dim, self.sqrt(idx));
            let norm = a.norm();
            if norm > 0.0 {
                sqrt_residual = sqrt_residual.max((&r * &r - &a).norm() / norm);
            }
        }
        TableInvariants {
            psd_min_eigenvalue,
            max_az_residual,
            symmetry_residual,
            sqrt_residual,
        }
    }
}

pub fn build_kernel_table(
    grid: &VelocityGrid,
    spec: CrossSectionSpec,
    config: KernelConfig,
) -> Result<KernelTable> {
    KernelTable::build(grid, spec, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableInvariants {
    pub psd_min_eigenvalue: f64,
    pub max_az_residual: f64,
    pub symmetry_residual: f64,
    pub sqrt_residual: f64,
}

/// Output of the `check-kernel` suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSuiteReport {
    pub dim: usize,
    pub gamma: f64,
    pub n: u32,
    pub table_points: usize,
    pub psd_min_eigenvalue: f64,
    pub max_az_residual: f64,
    pub symmetry_residual: f64,
    pub sqrt_residual: f64,
    /// Max |FD − analytic| of ∇·aⁿ at the finest step.
    pub divergence_fd_error: f64,
    pub divergence_fd_order: f64,
    pub sqrt_divergence_fd_error: f64,
    pub sqrt_divergence_fd_order: f64,
    /// min over samples of η·aⁿη − C·(s/(s+1/n))·(1 − (ẑ·η)²); ≥ 0 is a pass.
    pub ellipticity_floor_margin: f64,
    pub ellipticity_radius: f64,
    pub ellipticity_samples: usize,
    /// Samples breaking the uniform-in-|z| variant with factor R²/(R²+1/n).
    pub uniform_floor_violations: usize,
    /// Samples where η·Pⁿη < η·Pη, i.e. where `Pⁿ ≥ P` fails.
    pub projector_order_violations: usize,
    pub divergence_coefficient: f64,
    pub printed_divergence_coefficient: f64,
    /// FD error of the divergence rebuilt with the printed coefficient.
    pub printed_coefficient_fd_error: f64,
    pub printed_coefficient_discrepancy: bool,
    pub integrability_exponent: Option<f64>,
}

impl KernelSuiteReport {
    /// Thresholds of the kernel acceptance criterion.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.max_az_residual <= 1e-12) {
            out.push(format!("a(z)z residual {:e} > 1e-12", self.max_az_residual));
        }
        if !(self.psd_min_eigenvalue >= -1e-12) {
            out.push(format!("min eigenvalue {:e} < -1e-12", self.psd_min_eigenvalue));
        }
        if self.symmetry_residual != 0.0 {
            out.push(format!("symmetry residual {:e} != 0", self.symmetry_residual));
        }
        if !((self.divergence_fd_order - 2.0).abs() <= 0.1) {
            out.push(format!("divergence FD order {} outside 2 ± 0.1", self.divergence_fd_order));
        }
        if !((self.sqrt_divergence_fd_order - 2.0).abs() <= 0.1) {
            out.push(format!(
                "sqrt divergence FD order {} outside 2 ± 0.1",
                self.sqrt_divergence_fd_order
            ));
        }
        if !(self.sqrt_residual <= 1e-10) {
            out.push(format!("sqrt residual {:e} > 1e-10", self.sqrt_residual));
        }
        if !(self.ellipticity_floor_margin >= 0.0) {
            out.push(format!("ellipticity margin {:e} < 0", self.ellipticity_floor_margin));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSuiteConfig {
    pub fd_points: usize,
    pub fd_steps: [f64; 3],
    pub ellipticity_radius: f64,
    pub ellipticity_samples: usize,
}

impl Default for KernelSuiteConfig {
    fn default() -> Self {
        Self {
            fd_points: 20,
            fd_steps: [0.02, 0.01, 0.005],
            ellipticity_radius: 0.5,
            ellipticity_samples: 1000,
        }
    }
}

/// Least-squares slope of log e against log h.
pub(crate) fn loglog_slope(h: &[f64], e: &[f64]) -> f64 {
    let xs: Vec<f64> = h.iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = e.iter().map(|x| x.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Point in the unit ball and a unit vector from a point of the unit cube.
fn ball_and_direction(u: &[f64], dim: usize, radius: f64) -> (Vec<f64>, Vec<f64>) {
    match dim {
        2 => {
            let r = radius * u[0].sqrt();
            let t = 2.0 * PI * u[1];
            let e = 2.0 * PI * u[2];
            (vec![r * t.cos(), r * t.sin()], vec![e.cos(), e.sin()])
        }
        _ => {
            let r = radius * u[0].cbrt();
            let dir = |a: f64, b: f64| {
                let c = 2.0 * a - 1.0;
                let s = (1.0 - c * c).max(0.0).sqrt();
                let p = 2.0 * PI * b;
                vec![s * p.cos(), s * p.sin(), c]
            };
            let d = dir(u[1], u[2]);
            (d.iter().map(|x| r * x).collect(), dir(u[3], u[4]))
        }
    }
}

/// Finite-difference divergence of a matrix field at z.
fn fd_divergence<F: Fn(&[f64]) -> DMatrix<f64>>(field: F, z: &[f64], h: f64) -> DVector<f64> {
    let dim = z.len();
    let mut out = DVector::zeros(dim);
    for j in 0..dim {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += h;
        zm[j] -= h;
        let ap = field(&zp);
        let am = field(&zm);
        for i in 0..dim {
            out[i] += (ap[(i, j)] - am[(i, j)]) / (2.0 * h);
        }
    }
    out
}

pub fn run_kernel_suite(
    grid: &VelocityGrid,
    spec: CrossSectionSpec,
    config: KernelConfig,
    suite: &KernelSuiteConfig,
) -> Result<KernelSuiteReport> {
    let table = KernelTable::build(grid, spec, config)?;
    let inv = table.check_invariants();
    let kernel = RegularizedKernel::new(spec, config);
    let dim = spec.dim();
    let inv_n = 1.0 / config.n as f64;

    // Off-lattice points with |z| in [0.5, 2].
    let pts = low_discrepancy(suite.fd_points, 5);
    let zs: Vec<Vec<f64>> = pts
        .iter()
        .map(|u| {
            let (dir, _) = ball_and_direction(&[1.0, u[1], u[2], u[3], u[4]], dim, 1.0);
            let r = 0.5 + 1.5 * u[0];
            dir.iter().map(|x| r * x).collect()
        })
        .collect();

    let printed = -(dim as f64 - 3.0);
    let mut div_err = [0.0f64; 3];
    let mut sqrt_err = [0.0f64; 3];
    let mut printed_err = 0.0f64;
    for z in &zs {
        let exact = kernel.kernel_divergence(z);
        let (_, exact_sqrt) = kernel.kernel_sqrt(z);
        let s = norm_sq(z);
        let w = kernel.radial_weight(s) / (s + inv_n);
        let printed_div = DVector::from_iterator(dim, z.iter().map(|x| printed * w * x));
        for (k, &h) in suite.fd_steps.iter().enumerate() {
            let fd = fd_divergence(|p| kernel.kernel_matrix(p), z, h);
            div_err[k] = div_err[k].max((&fd - &exact).amax());
            let fd_s = fd_divergence(|p| kernel.kernel_sqrt(p).0, z, h);
            sqrt_err[k] = sqrt_err[k].max((&fd_s - &exact_sqrt).amax());
            if k == 2 {
                printed_err = printed_err.max((&fd - &printed_div).amax());
            }
        }
    }

    let radius = suite.ellipticity_radius;
    let floor = kernel.mollified_floor(radius);
    let samples = low_discrepancy(suite.ellipticity_samples, 5);
    let min_psi = config.cutoff_sq(radius * radius);
    let mut margin = f64::INFINITY;
    let mut uniform_violations = 0;
    let mut order_violations = 0;
    for u in &samples {
        let (z, eta) = ball_and_direction(u, dim, radius);
        let s = norm_sq(&z);
        if s == 0.0 {
            continue;
        }
        let a = kernel.kernel_matrix(&z);
        let e = DVector::from_column_slice(&eta);
        let quad = e.dot(&(&a * &e));
        let cos = z.iter().zip(&eta).map(|(a, b)| a * b).sum::<f64>() / s.sqrt();
        let transverse = 1.0 - cos * cos;
        if let Some(k) = floor {
            let bound = k * min_psi * (s / (s + inv_n)) * transverse;
            margin = margin.min(quad - bound);
            let uniform = k * min_psi * (radius * radius / (radius * radius + inv_n)) * transverse;
            if quad < uniform {
                uniform_violations += 1;
            }
        }
        let pn = projector_regularized(&z, config.n);
        let p = projector(&z)?;
        if e.dot(&(&pn * &e)) < e.dot(&(&p * &e)) - 1e-15 {
            order_violations += 1;
        }
    }
    if floor.is_none() {
        margin = f64::NAN;
    }

    Ok(KernelSuiteReport {
        dim,
        gamma: spec.gamma(),
        n: config.n,
        table_points: grid.points_per_axis(),
        psd_min_eigenvalue: inv.psd_min_eigenvalue,
        max_az_residual: inv.max_az_residual,
        symmetry_residual: inv.symmetry_residual,
        sqrt_residual: inv.sqrt_residual,
        divergence_fd_error: div_err[2],
        divergence_fd_order: loglog_slope(&suite.fd_steps, &div_err),
        sqrt_divergence_fd_error: sqrt_err[2],
        sqrt_divergence_fd_order: loglog_slope(&suite.fd_steps, &sqrt_err),
        ellipticity_floor_margin: margin,
        ellipticity_radius: radius,
        ellipticity_samples: samples.len(),
        uniform_floor_violations: uniform_violations,
        projector_order_violations: order_violations,
        divergence_coefficient: -(dim as f64 - 1.0),
        printed_divergence_coefficient: printed,
        printed_coefficient_fd_error: printed_err,
        printed_coefficient_discrepancy: printed_err > 1e3 * div_err[2],
        integrability_exponent: spec.integrability_exponent(),
    })
}
