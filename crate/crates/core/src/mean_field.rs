//! Nonlocal coefficients `ā = a ∗ f(1−f)`, `b̄ = (∇·a) ∗ f` and the
//! quasi-ellipticity probe.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision_kernel::{KernelConfig, KernelTable, RegularizedKernel, CrossSectionSpec};
use crate::convolution::{ConvolutionMethod, Convolver};
use crate::error::{Error, Result};
use crate::initial_data::DensityField;
use crate::phase_grid::PhaseGrid;
use crate::quadrature::low_discrepancy;
use crate::stencil;

/// Coefficients at every phase node; matrices row-major, x-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFields {
    pub dim: usize,
    pub nx: usize,
    pub nv: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub div_a_bar: Vec<f64>,
    pub div_b_bar: Vec<f64>,
}

impl CoefficientFields {
    pub fn a_bar_at(&self, node: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.a_bar[node * s..(node + 1) * s]
    }

    pub fn b_bar_at(&self, node: usize) -> &[f64] {
        &self.b_bar[node * self.dim..(node + 1) * self.dim]
    }

    pub fn div_a_bar_at(&self, node: usize) -> &[f64] {
        &self.div_a_bar[node * self.dim..(node + 1) * self.dim]
    }
}

/// Quantum weight `G = f(1 − f)`, floored at zero.
pub fn quantum_weight(f: &[f64]) -> Vec<f64> {
    f.iter().map(|&v| (v * (1.0 - v)).max(0.0)).collect()
}

pub struct MeanField {
    grid: Arc<PhaseGrid>,
    table: Arc<KernelTable>,
    conv: Convolver,
}

impl std::fmt::Debug for MeanField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeanField").field("conv", &self.conv).finish()
    }
}

impl MeanField {
    pub fn new(grid: Arc<PhaseGrid>, table: Arc<KernelTable>, method: ConvolutionMethod) -> Result<Self> {
        let vg = grid.velocity();
        if table.dim() != vg.dim()
            || table.points_per_axis() != vg.points_per_axis()
            || table.spacing() != vg.spacing()
        {
            return Err(Error::InvalidGrid(
                "kernel table was built for a different velocity grid".into(),
            ));
        }
        let conv = Convolver::new(vg, table.clone(), method);
        Ok(Self { grid, table, conv })
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn table(&self) -> &Arc<KernelTable> {
        &self.table
    }

    pub fn convolver(&self) -> &Convolver {
        &self.conv
    }

    fn check(&self, f: &DensityField) -> Result<()> {
        if f.grid() != self.grid.as_ref() {
            return Err(Error::InvalidGrid("density lives on a different grid".into()));
        }
        Ok(())
    }

    pub fn coefficient_fields(&self, f: &DensityField) -> Result<CoefficientFields> {
        self.check(f)?;
        let dim = self.grid.dim();
        let nv = self.grid.nv();
        let nx = self.grid.nx();
        let blocks: Vec<_> = (0..nx)
            .into_par_iter()
            .map(|ix| {
                let fb = f.block(ix);
                let g = quantum_weight(fb);
                let a = self.conv.matrix_scalar(&g);
                let b = self.conv.divergence_scalar(fb);
                let da = self.conv.divergence_scalar(&g);
                let mut db = vec![0.0; nv];
                let mut comp = vec![0.0; nv];
                let mut grad = vec![0.0; nv];
                for k in 0..dim {
                    for i in 0..nv {
                        comp[i] = b[i * dim + k];
                    }
                    stencil::gradient_axis(self.grid.velocity(), &comp, k, &mut grad);
                    for i in 0..nv {
                        db[i] += grad[i];
                    }
                }
                (a, b, da, db)
            })
            .collect();
        let mut out = CoefficientFields {
            dim,
            nx,
            nv,
            a_bar: Vec::with_capacity(nx * nv * dim * dim),
            b_bar: Vec::with_capacity(nx * nv * dim),
            div_a_bar: Vec::with_capacity(nx * nv * dim),
            div_b_bar: Vec::with_capacity(nx * nv),
        };
        for (a, b, da, db) in blocks {
            out.a_bar.extend(a);
            out.b_bar.extend(b);
            out.div_a_bar.extend(da);
            out.div_b_bar.extend(db);
        }
        Ok(out)
    }

    pub fn ellipticity_probe(&self, f: &DensityField, cfg: &ProbeConfig) -> Result<EllipticityProbe> {
        self.check(f)?;
        cfg.validate()?;
        let vg = self.grid.velocity();
        let dim = vg.dim();
        let h = vg.spacing();
        let w = vg.cell_volume();
        let radius_prime = 1.0 / (1.0 - cfg.mu);

        // Sample velocities: low-discrepancy points of the R-ball snapped
        // to the nearest node, paired with low-discrepancy directions.
        let pts = low_discrepancy(cfg.samples, 2 * dim);
        let mut samples = Vec::with_capacity(cfg.samples);
        for u in &pts {
            let (v, eta) = ball_point(u, dim, cfg.radius);
            let idx: Vec<usize> = v
                .iter()
                .map(|c| (((c + vg.half_width()) / h).round().max(0.0) as usize).min(vg.points_per_axis() - 1))
                .collect();
            let node = vg.flat_index(&idx);
            if vg.node(node).iter().map(|c| c * c).sum::<f64>() > cfg.radius * cfg.radius {
                continue;
            }
            samples.push((node, eta));
        }

        let kernel = RegularizedKernel::new(
            CrossSectionSpec::new(self.table.gamma(), dim)?,
            KernelConfig::new(self.table.n())?,
        );
        let reach = cfg.radius + radius_prime;
        let inv_n = 1.0 / self.table.n() as f64;
        let nu_hat = kernel.mollified_floor(reach).map(|k| {
            k * KernelConfig::new(self.table.n()).unwrap().cutoff_sq(reach * reach)
                * (h * h / (h * h + inv_n))
                * (1.0 - cfg.mu * cfg.mu)
        });

        let nx = self.grid.nx();
        let mut rho = Vec::with_capacity(nx);
        let mut rho_mu = Vec::with_capacity(nx * samples.len());
        let mut mask = Vec::with_capacity(nx);
        let mut nu_estimate = f64::INFINITY;
        let mut floor_violations = 0usize;
        let mut floor_margin = f64::INFINITY;
        for ix in 0..nx {
            let g = quantum_weight(f.block(ix));
            let r = g.iter().sum::<f64>() * w;
            rho.push(r);
            let in_k = r > cfg.alpha;
            mask.push(in_k);
            let a_bar = self.conv.matrix_scalar(&g);
            for (node, eta) in &samples {
                let (one_sided, two_sided) = truncated_density(self.grid.as_ref(), &g, *node, eta, cfg.mu);
                rho_mu.push(one_sided);
                let a = &a_bar[node * dim * dim..(node + 1) * dim * dim];
                let mut quad = 0.0;
                for i in 0..dim {
                    for j in 0..dim {
                        quad += eta[i] * a[i * dim + j] * eta[j];
                    }
                }
                if in_k && one_sided > 0.0 {
                    nu_estimate = nu_estimate.min(quad / one_sided);
                }
                if let Some(nu) = nu_hat {
                    let bound = nu * two_sided;
                    floor_margin = floor_margin.min(quad - bound);
                    if quad < bound * (1.0 - 1e-12) {
                        floor_violations += 1;
                    }
                }
            }
        }
        let k_alpha_fraction = mask.iter().filter(|&&m| m).count() as f64 / nx as f64;
        let mut sorted = rho.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
        Ok(EllipticityProbe {
            alpha: cfg.alpha,
            mu: cfg.mu,
            radius: cfg.radius,
            radius_prime,
            rho_quantiles: [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)],
            rho,
            rho_mu,
            sample_count: samples.len(),
            k_alpha_mask: mask,
            k_alpha_fraction,
            nu_estimate: nu_estimate.is_finite().then_some(nu_estimate),
            nu_floor: nu_hat,
            floor_violations,
            floor_margin,
        })
    }
}

pub fn coefficient_fields(f: &DensityField, table: Arc<KernelTable>) -> Result<CoefficientFields> {
    MeanField::new(f.grid_arc().clone(), table, ConvolutionMethod::Auto)?.coefficient_fields(f)
}

fn ball_point(u: &[f64], dim: usize, radius: f64) -> (Vec<f64>, Vec<f64>) {
    use std::f64::consts::PI;
    if dim == 2 {
        let r = radius * u[0].sqrt();
        let t = 2.0 * PI * u[1];
        let e = 2.0 * PI * u[2];
        (vec![r * t.cos(), r * t.sin()], vec![e.cos(), e.sin()])
    } else {
        let dir = |a: f64, b: f64| {
            let c = 2.0 * a - 1.0;
            let s = (1.0 - c * c).max(0.0).sqrt();
            vec![s * (2.0 * PI * b).cos(), s * (2.0 * PI * b).sin(), c]
        };
        let r = radius * u[0].cbrt();
        let d = dir(u[1], u[2]);
        (d.iter().map(|x| r * x).collect(), dir(u[3], u[4]))
    }
}

/// `V(v, μ, η)` membership of `v*`: `(v − v*)/|v − v*| · η ≤ μ` and
/// `|v*| ≤ 1/(1 − μ)`, with `v* = v` excluded.
pub fn in_truncated_set(v: &[f64], v_star: &[f64], mu: f64, eta: &[f64]) -> bool {
    let mut z2 = 0.0;
    let mut proj = 0.0;
    let mut s2 = 0.0;
    for k in 0..v.len() {
        let z = v[k] - v_star[k];
        z2 += z * z;
        proj += z * eta[k];
        s2 += v_star[k] * v_star[k];
    }
    if z2 == 0.0 {
        return false;
    }
    let bound = 1.0 / (1.0 - mu);
    proj <= mu * z2.sqrt() && s2 <= bound * bound
}

/// `(ρ_μ, ρ_μ^±)` at velocity node `node`; the second sum keeps only
/// `|ẑ·η| ≤ μ`, the subset on which the kernel floor is provable.
pub fn truncated_density(grid: &PhaseGrid, g: &[f64], node: usize, eta: &[f64], mu: f64) -> (f64, f64) {
    let vg = grid.velocity();
    let v = vg.node(node);
    let mut one = 0.0;
    let mut two = 0.0;
    for (j, &gj) in g.iter().enumerate() {
        let vs = vg.node(j);
        if in_truncated_set(v, vs, mu, eta) {
            one += gj;
            let z: Vec<f64> = v.iter().zip(vs).map(|(a, b)| a - b).collect();
            let zn = z.iter().map(|c| c * c).sum::<f64>().sqrt();
            let c = z.iter().zip(eta).map(|(a, b)| a * b).sum::<f64>() / zn;
            if c >= -mu {
                two += gj;
            }
        }
    }
    let w = vg.cell_volume();
    (one * w, two * w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub alpha: f64,
    pub mu: f64,
    pub radius: f64,
    pub samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            mu: 0.5,
            radius: 2.0,
            samples: 256,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::param("probe.mu", format!("{} is outside [0, 1)", self.mu)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::param("probe.alpha", "must be positive"));
        }
        if !(self.radius > 0.0) || self.samples == 0 {
            return Err(Error::param("probe.radius", "radius and sample count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityProbe {
    pub alpha: f64,
    pub mu: f64,
    pub radius: f64,
    pub radius_prime: f64,
    pub rho_quantiles: [f64; 5],
    /// ρ per spatial node.
    #[serde(skip)]
    pub rho: Vec<f64>,
    /// ρ_μ per (spatial node, sample).
    #[serde(skip)]
    pub rho_mu: Vec<f64>,
    pub sample_count: usize,
    #[serde(skip)]
    pub k_alpha_mask: Vec<bool>,
    pub k_alpha_fraction: f64,
    /// min over samples in K_α of η·āη / ρ_μ; `None` when K_α is empty.
    pub nu_estimate: Option<f64>,
    /// Kernel-derived constant ν̂ of the discrete lower bound.
    pub nu_floor: Option<f64>,
    pub floor_violations: usize,
    pub floor_margin: f64,
}

impl EllipticityProbe {
    pub fn k_alpha_empty(&self) -> bool {
        self.k_alpha_mask.iter().all(|m| !m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision_kernel::{CrossSectionSpec, KernelConfig};
    use crate::convolution::direct_matrix_scalar;
    use crate::phase_grid::VelocityGrid;

    fn setup(m: usize) -> (Arc<PhaseGrid>, Arc<KernelTable>) {
        let vg = VelocityGrid::new(2, 3.0, m).unwrap();
        let table = Arc::new(
            KernelTable::build(&vg, CrossSectionSpec::coulomb(2), KernelConfig::new(4).unwrap()).unwrap(),
        );
        (Arc::new(PhaseGrid::homogeneous(vg)), table)
    }

    #[test]
    fn zero_density_zero_fields() {
        let (g, t) = setup(8);
        let c = coefficient_fields(&DensityField::zeros(g), t).unwrap();
        assert!(c.a_bar.iter().chain(&c.b_bar).chain(&c.div_a_bar).chain(&c.div_b_bar).all(|&x| x == 0.0));
    }

    #[test]
    fn single_node() {
        let (g, t) = setup(8);
        let mut s = vec![0.0; g.len()];
        let v0 = 19;
        s[v0] = 0.5;
        let f = DensityField::new(g.clone(), s, 0.0).unwrap();
        let c = coefficient_fields(&f, t.clone()).unwrap();
        let vg = g.velocity();
        let w = vg.cell_volume();
        for i in 0..g.len() {
            let a = t.a(t.pair_index(vg, i, v0));
            for k in 0..4 {
                assert!((c.a_bar_at(i)[k] - 0.25 * w * a[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn radial_bump_has_no_drift_at_origin() {
        let (g, t) = setup(9);
        let f = DensityField::from_fn(g.clone(), 0.0, |_, v| 0.6 * (-(v[0] * v[0] + v[1] * v[1])).exp()).unwrap();
        let c = coefficient_fields(&f, t).unwrap();
        let centre = g.len() / 2;
        assert!(c.b_bar_at(centre).iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn truncated_density_half_space() {
        // μ = 0 at v = 0 keeps v*·η ≥ 0 (less the boundary line).
        let vg = VelocityGrid::new(2, 1.0, 41).unwrap();
        let g = PhaseGrid::homogeneous(vg.clone());
        let ball: Vec<f64> = (0..vg.len())
            .map(|i| if vg.node(i).iter().map(|c| c * c).sum::<f64>() <= 1.0 { 0.25 } else { 0.0 })
            .collect();
        let centre = vg.len() / 2;
        let eta = [0.6, 0.8];
        let (r0, _) = truncated_density(&g, &ball, centre, &eta, 0.0);
        let total: f64 = ball.iter().sum::<f64>() * vg.cell_volume();
        assert!((r0 / total - 0.5).abs() < 0.05);
        let mut prev = r0;
        for mu in [0.5, 0.9, 0.99] {
            let (r, s) = truncated_density(&g, &ball, centre, &eta, mu);
            assert!(r >= prev && r <= total && s <= r);
            prev = r;
        }
    }

    #[test]
    fn probe_on_vacuum() {
        let (g, t) = setup(8);
        let mf = MeanField::new(g.clone(), t, ConvolutionMethod::Direct).unwrap();
        let p = mf.ellipticity_probe(&DensityField::zeros(g), &ProbeConfig::default()).unwrap();
        assert_eq!(p.rho, vec![0.0]);
        assert!(p.k_alpha_empty());
        assert!(p.nu_estimate.is_none());
    }

    #[test]
    fn probe_floor_holds() {
        let (g, t) = setup(16);
        let f = DensityField::from_fn(g.clone(), 0.0, |_, v| 0.5 * (-(v[0] * v[0] + v[1] * v[1])).exp()).unwrap();
        let mf = MeanField::new(g, t, ConvolutionMethod::Direct).unwrap();
        let p = mf.ellipticity_probe(&f, &ProbeConfig { radius: 1.0, samples: 64, ..Default::default() }).unwrap();
        assert!(p.sample_count > 0);
        assert_eq!(p.floor_violations, 0);
        assert!(p.nu_estimate.unwrap() > 0.0);
        for (i, &r) in p.rho_mu.iter().enumerate() {
            assert!(r >= 0.0 && r <= p.rho[i / p.sample_count] + 1e-15);
        }
    }

    #[test]
    fn direct_engine_agrees_with_helper() {
        let (g, t) = setup(8);
        let f = DensityField::from_fn(g.clone(), 0.0, |_, v| 0.3 + 0.1 * v[0].sin()).unwrap();
        let c = coefficient_fields(&f, t.clone()).unwrap();
        let want = direct_matrix_scalar(g.velocity(), &t, &quantum_weight(f.samples()));
        assert_eq!(c.a_bar, want);
    }
}
