//! Time stepping: free transport in x, frozen-coefficient implicit collision
//! steps in v, and the Picard loop that refreezes the coefficients.
//!
//! The default `Entropic` operator writes the collision term as
//! `C(f) = −Dᵀ F`, `F(v) = h^N Σ a(v − v*) G G* (Dℓ(v) − Dℓ(v*))` with
//! `G = f(1 − f)` and `ℓ = logit f`. Frozen at `g` it is linear in `f`:
//! `L_g f = −Dᵀ[ā Df − (1 − g) b̂ f] + εΔ_h f` plus the constant
//! `c_g = −Dᵀ[ā (G Dℓ − Dg)]`, where `ā = a ∗ G` and `b̂ = a ∗ (G Dℓ)`.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::collision_kernel::{CrossSectionSpec, KernelConfig, KernelTable};
use crate::convolution::ConvolutionMethod;
use crate::error::{Error, Result};
use crate::initial_data::{regularize_initial_datum, DensityField};
use crate::linalg::{gmres, CsrMatrix, GmresOptions};
use crate::mean_field::{quantum_weight, MeanField};
use crate::phase_grid::{PhaseGrid, Topology};
use crate::stencil::{self, gradient_weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Splitting {
    #[default]
    Strang,
    Lie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorForm {
    /// Symmetric logit-gradient form; conserves mass, momentum and energy and
    /// keeps discrete Fermi–Dirac states stationary.
    #[default]
    Entropic,
    /// Face-averaged diffusion, upwinded drift and implicit reaction built
    /// from ā, b̄ and ∇·b̄.
    Upwind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TransportScheme {
    /// Linear-interpolation semi-Lagrangian shift: convex and mass exact.
    #[default]
    Linear,
    /// Exact Fourier phase shift on the periodic torus.
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderRung {
    pub epsilon: f64,
    pub n: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub dt: f64,
    pub t_end: f64,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    pub relaxation: f64,
    /// Mirrors the kernel section; filled in by the config layer.
    #[serde(skip)]
    pub kernel_index: u32,
    pub splitting: Splitting,
    pub operator: OperatorForm,
    pub transport: TransportScheme,
    pub convolution: ConvolutionMethod,
    pub linear_tol: f64,
    pub viscosity_ladder: Vec<LadderRung>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            dt: 1e-3,
            t_end: 0.5,
            picard_tol: 1e-10,
            picard_max_iters: 50,
            relaxation: 1.0,
            kernel_index: 8,
            splitting: Splitting::Strang,
            operator: OperatorForm::Entropic,
            transport: TransportScheme::Linear,
            convolution: ConvolutionMethod::Auto,
            linear_tol: 1e-13,
            viscosity_ladder: Vec::new(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::param("solver.dt", "must be positive"));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::param("solver.t_end", "must be positive"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::param("solver.epsilon", "must be non-negative"));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::param("solver.picard_tol", "must be positive"));
        }
        if self.picard_max_iters < 1 {
            return Err(Error::param("solver.picard_max_iters", "must be at least 1"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::param("solver.relaxation", "must lie in (0, 1]"));
        }
        if !(self.linear_tol > 0.0) {
            return Err(Error::param("solver.linear_tol", "must be positive"));
        }
        Ok(())
    }

    /// Number of steps and the length of the last one.
    pub fn schedule(&self) -> (usize, f64) {
        let ratio = self.t_end / self.dt;
        let whole = ratio.round();
        if (ratio - whole).abs() <= 1e-9 * ratio.max(1.0) {
            (whole as usize, self.dt)
        } else {
            let n = ratio.ceil() as usize;
            (n, self.t_end - (n - 1) as f64 * self.dt)
        }
    }
}

/// Frozen linear operator `f ↦ L_g f` plus the constant `c_g`, one sparse
/// block per spatial node.
#[derive(Debug, Clone)]
pub struct FrozenOperator {
    grid: Arc<PhaseGrid>,
    epsilon: f64,
    form: OperatorForm,
    blocks: Vec<CsrMatrix>,
    constant: Vec<f64>,
}

impl FrozenOperator {
    pub fn blocks(&self) -> &[CsrMatrix] {
        &self.blocks
    }

    pub fn constant(&self) -> &[f64] {
        &self.constant
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn form(&self) -> OperatorForm {
        self.form
    }

    /// `L_g f` without the constant part.
    pub fn apply_linear(&self, f: &[f64]) -> Vec<f64> {
        let nv = self.grid.nv();
        let mut out = vec![0.0; f.len()];
        for (ix, b) in self.blocks.iter().enumerate() {
            b.matvec(&f[ix * nv..(ix + 1) * nv], &mut out[ix * nv..(ix + 1) * nv]);
        }
        out
    }

    /// `L_g f + c_g`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.apply_linear(f);
        out.iter_mut().zip(&self.constant).for_each(|(o, c)| *o += c);
        out
    }
}

fn logit(g: f64) -> f64 {
    let c = g.clamp(1e-300, 1.0 - 1e-16);
    c.ln() - (1.0 - c).ln()
}

pub fn assemble_frozen(g: &DensityField, mean_field: &MeanField, epsilon: f64, form: OperatorForm) -> Result<FrozenOperator> {
    if g.grid() != mean_field.grid().as_ref() {
        return Err(Error::InvalidGrid("density lives on a different grid".into()));
    }
    if let Some((index, &value)) = g.samples().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::PauliViolation { index, value });
    }
    let grid = mean_field.grid().clone();
    let nx = grid.nx();
    let nv = grid.nv();
    let (blocks, constants): (Vec<CsrMatrix>, Vec<Vec<f64>>) = match form {
        OperatorForm::Entropic => (0..nx)
            .into_par_iter()
            .map(|ix| entropic_block(&grid, mean_field, g.block(ix), epsilon))
            .unzip(),
        OperatorForm::Upwind => {
            let coeffs = mean_field.coefficient_fields(g)?;
            (0..nx)
                .into_par_iter()
                .map(|ix| upwind_block(&grid, &coeffs, ix, g.block(ix), epsilon))
                .unzip()
        }
    };
    let mut constant = Vec::with_capacity(nx * nv);
    constants.into_iter().for_each(|c| constant.extend(c));
    Ok(FrozenOperator {
        grid,
        epsilon,
        form,
        blocks,
        constant,
    })
}

fn laplacian_triplets(grid: &PhaseGrid, epsilon: f64, t: &mut Vec<(usize, usize, f64)>) {
    if epsilon == 0.0 {
        return;
    }
    let vg = grid.velocity();
    for i in 0..vg.len() {
        for (j, w) in stencil::laplacian_row(vg, i) {
            t.push((i, j, epsilon * w));
        }
    }
}

fn entropic_block(grid: &PhaseGrid, mf: &MeanField, g: &[f64], epsilon: f64) -> (CsrMatrix, Vec<f64>) {
    let vg = grid.velocity();
    let dim = vg.dim();
    let nv = vg.len();
    let m = vg.points_per_axis();
    let inv_h = 1.0 / vg.spacing();
    let gw = quantum_weight(g);
    let ell: Vec<f64> = g.iter().map(|&v| logit(v)).collect();
    let dl = stencil::gradient(vg, &ell);
    let dg = stencil::gradient(vg, g);
    let q: Vec<f64> = (0..nv * dim).map(|p| gw[p / dim] * dl[p]).collect();
    let r: Vec<f64> = q.iter().zip(&dg).map(|(a, b)| a - b).collect();
    let conv = mf.convolver();
    let a_bar = conv.matrix_scalar(&gw);
    let b_hat = conv.matrix_vector(&q);

    let mut t = Vec::with_capacity(nv * dim * 3 * (dim * 3 + 1) + 5 * nv);
    for i in 0..nv {
        let a = &a_bar[i * dim * dim..(i + 1) * dim * dim];
        for k in 0..dim {
            let sk = vg.stride(k) as isize;
            let jk = vg.axis_index(i, k);
            for (off_a, w_a) in gradient_weights(jk, m) {
                if w_a == 0.0 {
                    continue;
                }
                let row = (i as isize + off_a * sk) as usize;
                let outer = -w_a * inv_h;
                for l in 0..dim {
                    let akl = a[k * dim + l];
                    if akl == 0.0 {
                        continue;
                    }
                    let sl = vg.stride(l) as isize;
                    let jl = vg.axis_index(i, l);
                    for (off_b, w_b) in gradient_weights(jl, m) {
                        if w_b != 0.0 {
                            let col = (i as isize + off_b * sl) as usize;
                            t.push((row, col, outer * akl * w_b * inv_h));
                        }
                    }
                }
                let drift = -(1.0 - g[i]) * b_hat[i * dim + k];
                if drift != 0.0 {
                    t.push((row, i, outer * drift));
                }
            }
        }
    }
    laplacian_triplets(grid, epsilon, &mut t);

    let mut ar = vec![0.0; nv * dim];
    for i in 0..nv {
        for k in 0..dim {
            let mut acc = 0.0;
            for l in 0..dim {
                acc += a_bar[i * dim * dim + k * dim + l] * r[i * dim + l];
            }
            ar[i * dim + k] = acc;
        }
    }
    let constant: Vec<f64> = stencil::gradient_transpose(vg, &ar).iter().map(|v| -v).collect();
    (CsrMatrix::from_triplets(nv, t), constant)
}

fn upwind_block(
    grid: &PhaseGrid,
    c: &crate::mean_field::CoefficientFields,
    ix: usize,
    g: &[f64],
    epsilon: f64,
) -> (CsrMatrix, Vec<f64>) {
    let vg = grid.velocity();
    let dim = vg.dim();
    let nv = vg.len();
    let m = vg.points_per_axis();
    let h = vg.spacing();
    let inv_h = 1.0 / h;
    let base = ix * nv;
    let mut t = Vec::new();
    let mut constant = vec![0.0; nv];
    for i in 0..nv {
        let node = base + i;
        let a = c.a_bar_at(node);
        for k in 0..dim {
            let sk = vg.stride(k);
            let jk = vg.axis_index(i, k);
            // Face (i, i + e_k) with averaged ā_kk + ε.
            if jk + 1 < m {
                let a_next = c.a_bar_at(node + sk)[k * dim + k];
                let coef = (0.5 * (a[k * dim + k] + a_next) + epsilon) * inv_h * inv_h;
                t.push((i, i + sk, coef));
                t.push((i, i, -coef));
                t.push((i + sk, i, coef));
                t.push((i + sk, i + sk, -coef));
            }
            // Off-diagonal diffusion −D_kᵀ(ā_kl D_l f).
            for (off_a, w_a) in gradient_weights(jk, m) {
                if w_a == 0.0 {
                    continue;
                }
                let row = (i as isize + off_a * sk as isize) as usize;
                for l in 0..dim {
                    if l == k {
                        continue;
                    }
                    let sl = vg.stride(l) as isize;
                    for (off_b, w_b) in gradient_weights(vg.axis_index(i, l), m) {
                        if w_b != 0.0 {
                            let col = (i as isize + off_b * sl) as usize;
                            t.push((row, col, -w_a * inv_h * a[k * dim + l] * w_b * inv_h));
                        }
                    }
                }
            }
            // Drift −b̄_k (1 − 2g) ∂_k f, upwinded.
            let speed = -c.b_bar_at(node)[k] * (1.0 - 2.0 * g[i]);
            let forward = if speed > 0.0 { jk + 1 < m } else { jk == 0 };
            if forward {
                t.push((i, i + sk, speed * inv_h));
                t.push((i, i, -speed * inv_h));
            } else {
                t.push((i, i, speed * inv_h));
                t.push((i, i - sk, -speed * inv_h));
            }
        }
        // Reaction −(∇·b̄) g (1 − f).
        let db = c.div_b_bar[node];
        t.push((i, i, db * g[i]));
        constant[i] = -db * g[i];
    }
    (CsrMatrix::from_triplets(nv, t), constant)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SubstepReport {
    pub pre_clamp_min: f64,
    pub pre_clamp_max: f64,
    pub clamped_mass: f64,
    pub linear_iterations: usize,
    pub linear_residual: f64,
}

/// Backward Euler `(I − dt L) f' = f + dt c`, clamped to [0, 1] afterwards.
pub fn parabolic_substep(
    f: &DensityField,
    op: &FrozenOperator,
    dt: f64,
    linear_tol: f64,
) -> Result<(DensityField, SubstepReport)> {
    if f.grid() != op.grid.as_ref() {
        return Err(Error::InvalidGrid("operator was assembled on a different grid".into()));
    }
    let nv = op.grid.nv();
    let opts = GmresOptions {
        tolerance: linear_tol,
        ..Default::default()
    };
    let solved: Vec<Result<(Vec<f64>, usize, f64)>> = op
        .blocks
        .par_iter()
        .enumerate()
        .map(|(ix, block)| {
            let fb = f.block(ix);
            if dt == 0.0 {
                return Ok((fb.to_vec(), 0, 0.0));
            }
            let c = &op.constant[ix * nv..(ix + 1) * nv];
            let rhs: Vec<f64> = fb.iter().zip(c).map(|(a, b)| a + dt * b).collect();
            let system = block.shifted_identity(dt);
            let mut x = fb.to_vec();
            let stats = gmres(&system, &rhs, &mut x, &opts)?;
            Ok((x, stats.iterations, stats.relative_residual))
        })
        .collect();
    let mut samples = Vec::with_capacity(f.samples().len());
    let mut report = SubstepReport {
        pre_clamp_min: f64::INFINITY,
        pre_clamp_max: f64::NEG_INFINITY,
        ..Default::default()
    };
    for r in solved {
        let (x, it, res) = r?;
        report.linear_iterations += it;
        report.linear_residual = report.linear_residual.max(res);
        samples.extend(x);
    }
    let w = op.grid.quadrature_weight();
    for v in samples.iter_mut() {
        report.pre_clamp_min = report.pre_clamp_min.min(*v);
        report.pre_clamp_max = report.pre_clamp_max.max(*v);
        let c = v.clamp(0.0, 1.0);
        report.clamped_mass += (c - *v).abs() * w;
        *v = c;
    }
    Ok((DensityField::new(op.grid.clone(), samples, f.time())?, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PicardReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub residuals: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub pre_clamp_min: f64,
    pub pre_clamp_max: f64,
    pub clamped_mass: f64,
    pub linear_iterations: usize,
}

/// Iterates `f^{k+1} = solve(frozen at f^k)` from `f^0 = f_prev` until the
/// relative L¹ change drops below `picard_tol`.
pub fn picard_fixed_point(
    f_prev: &DensityField,
    mean_field: &MeanField,
    cfg: &SolverConfig,
    dt: f64,
) -> Result<(DensityField, PicardReport)> {
    let norm = f_prev.mass().max(f64::MIN_POSITIVE);
    let mut g = f_prev.clone();
    let mut report = PicardReport {
        pre_clamp_min: f64::INFINITY,
        pre_clamp_max: f64::NEG_INFINITY,
        ..Default::default()
    };
    for _ in 0..cfg.picard_max_iters {
        let op = assemble_frozen(&g, mean_field, cfg.epsilon, cfg.operator)?;
        let (f_hat, sub) = parabolic_substep(f_prev, &op, dt, cfg.linear_tol)?;
        let theta = cfg.relaxation;
        let next: Vec<f64> = if theta == 1.0 {
            f_hat.into_samples()
        } else {
            f_hat
                .samples()
                .iter()
                .zip(g.samples())
                .map(|(a, b)| theta * a + (1.0 - theta) * b)
                .collect()
        };
        let next = DensityField::new(g.grid_arc().clone(), next, f_prev.time())?;
        let res = next.l1_distance(&g)? / norm;
        report.iterations += 1;
        if let Some(&last) = report.residuals.last() {
            report.contraction_ratios.push(if last > 0.0 { res / last } else { 0.0 });
        }
        report.residuals.push(res);
        report.final_residual = res;
        report.pre_clamp_min = report.pre_clamp_min.min(sub.pre_clamp_min);
        report.pre_clamp_max = report.pre_clamp_max.max(sub.pre_clamp_max);
        report.clamped_mass = sub.clamped_mass;
        report.linear_iterations += sub.linear_iterations;
        g = next;
        if res < cfg.picard_tol {
            return Ok((g, report));
        }
    }
    Err(Error::PicardNotConverged {
        residuals: report.residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportReport {
    /// Mass carried out of a truncated box.
    pub leaked_mass: f64,
    /// Mass removed or added by clamping spectral ringing into [0, 1].
    pub clamped_mass: f64,
    pub pre_clamp_min: f64,
    pub pre_clamp_max: f64,
}

impl Default for TransportReport {
    fn default() -> Self {
        Self {
            leaked_mass: 0.0,
            clamped_mass: 0.0,
            pre_clamp_min: f64::INFINITY,
            pre_clamp_max: f64::NEG_INFINITY,
        }
    }
}

impl TransportReport {
    pub fn merge(&self, other: &TransportReport) -> TransportReport {
        TransportReport {
            leaked_mass: self.leaked_mass + other.leaked_mass,
            clamped_mass: self.clamped_mass + other.clamped_mass,
            pre_clamp_min: self.pre_clamp_min.min(other.pre_clamp_min),
            pre_clamp_max: self.pre_clamp_max.max(other.pre_clamp_max),
        }
    }
}

fn lattice_shift(s: f64) -> (isize, f64) {
    let m = s.floor();
    let mut theta = s - m;
    let mut m = m as isize;
    if theta < 1e-12 {
        theta = 0.0;
    } else if theta > 1.0 - 1e-12 {
        theta = 0.0;
        m += 1;
    }
    (m, theta)
}

/// `f(x, v) ← f(x − v τ, v)`, one axis at a time.
pub fn transport_step(f: &DensityField, tau: f64, scheme: TransportScheme) -> Result<(DensityField, TransportReport)> {
    let grid = f.grid_arc().clone();
    let Some(sg) = grid.spatial() else {
        return Ok((f.clone(), TransportReport::default()));
    };
    if tau == 0.0 {
        return Ok((f.clone(), TransportReport::default()));
    }
    let periodic = sg.topology() == Topology::PeriodicTorus;
    if scheme == TransportScheme::Spectral && !periodic {
        return Err(Error::param("solver.transport", "spectral transport needs a periodic torus"));
    }
    let dim = grid.dim();
    let nv = grid.nv();
    let p = sg.points_per_axis();
    let dx = sg.spacing();
    let mut data = f.samples().to_vec();
    let mut leaked = 0.0;
    let vg = grid.velocity();
    let planner = (scheme == TransportScheme::Spectral).then(|| {
        let mut pl = FftPlanner::new();
        (pl.plan_fft_forward(p), pl.plan_fft_inverse(p))
    });
    for k in 0..dim {
        let stride = sg.stride(k);
        let lines: Vec<usize> = (0..sg.len()).filter(|&ix| sg.axis_index(ix, k) == 0).collect();
        let results: Vec<(usize, Vec<f64>, f64)> = (0..nv)
            .into_par_iter()
            .map(|iv| {
                let s = vg.node(iv)[k] * tau / dx;
                let mut out = vec![0.0; sg.len()];
                let mut lost = 0.0;
                let mut line = vec![0.0; p];
                let mut spec = vec![Complex64::new(0.0, 0.0); p];
                for &start in &lines {
                    for j in 0..p {
                        line[j] = data[(start + j * stride) * nv + iv];
                    }
                    let shifted = match &planner {
                        Some((fwd, inv)) => {
                            for j in 0..p {
                                spec[j] = Complex64::new(line[j], 0.0);
                            }
                            fwd.process(&mut spec);
                            for (j, c) in spec.iter_mut().enumerate() {
                                let wn = if 2 * j < p { j as f64 } else { j as f64 - p as f64 };
                                let phase = -2.0 * std::f64::consts::PI * wn * s / p as f64;
                                if p % 2 == 0 && 2 * j == p {
                                    *c *= phase.cos();
                                } else {
                                    *c *= Complex64::from_polar(1.0, phase);
                                }
                            }
                            inv.process(&mut spec);
                            spec.iter().map(|c| c.re / p as f64).collect::<Vec<f64>>()
                        }
                        None => {
                            let (m, theta) = lattice_shift(s);
                            let at = |j: isize| -> f64 {
                                if periodic {
                                    line[j.rem_euclid(p as isize) as usize]
                                } else if j < 0 || j >= p as isize {
                                    0.0
                                } else {
                                    line[j as usize]
                                }
                            };
                            let res: Vec<f64> = (0..p as isize)
                                .map(|j| (1.0 - theta) * at(j - m) + theta * at(j - m - 1))
                                .collect();
                            if !periodic {
                                lost += line.iter().sum::<f64>() - res.iter().sum::<f64>();
                            }
                            res
                        }
                    };
                    for j in 0..p {
                        out[start + j * stride] = shifted[j];
                    }
                }
                (iv, out, lost)
            })
            .collect();
        for (iv, out, lost) in results {
            for (ix, v) in out.into_iter().enumerate() {
                data[ix * nv + iv] = v;
            }
            leaked += lost;
        }
    }
    let w = grid.quadrature_weight();
    // Spectral shifts can ring slightly outside [0, 1].
    let mut report = TransportReport {
        leaked_mass: leaked * w,
        ..Default::default()
    };
    for v in data.iter_mut() {
        report.pre_clamp_min = report.pre_clamp_min.min(*v);
        report.pre_clamp_max = report.pre_clamp_max.max(*v);
        let c = v.clamp(0.0, 1.0);
        report.clamped_mass += (c - *v).abs() * w;
        *v = c;
    }
    let field = DensityField::new(grid, data, f.time())?;
    Ok((field, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub picard: PicardReport,
    /// Both transport substeps combined.
    pub transport: TransportReport,
}

/// Solver state shared across steps: the grid, kernel table and convolution
/// engine are built once.
#[derive(Debug)]
pub struct Solver {
    mean_field: MeanField,
    config: SolverConfig,
}

impl Solver {
    pub fn new(grid: Arc<PhaseGrid>, table: Arc<KernelTable>, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        if config.transport == TransportScheme::Spectral {
            if let Some(s) = grid.spatial() {
                if s.topology() != Topology::PeriodicTorus {
                    return Err(Error::param("solver.transport", "spectral transport needs a periodic torus"));
                }
            }
        }
        let mean_field = MeanField::new(grid, table, config.convolution)?;
        Ok(Self { mean_field, config })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn mean_field(&self) -> &MeanField {
        &self.mean_field
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        self.mean_field.grid()
    }

    pub fn table(&self) -> &Arc<KernelTable> {
        self.mean_field.table()
    }

    /// One split step of length `dt`.
    pub fn advance(&self, f: &DensityField, dt: f64, step: usize) -> Result<(DensityField, StepReport)> {
        let scheme = self.config.transport;
        let mut transport = TransportReport::default();
        let homogeneous = f.grid().is_homogeneous();
        let (pre, post) = match (homogeneous, self.config.splitting) {
            (true, _) => (0.0, 0.0),
            (false, Splitting::Strang) => (0.5 * dt, 0.5 * dt),
            (false, Splitting::Lie) => (dt, 0.0),
        };
        let mut cur = f.clone();
        if pre > 0.0 {
            let (n, r) = transport_step(&cur, pre, scheme)?;
            transport = transport.merge(&r);
            cur = n;
        }
        let (mut cur, picard) = picard_fixed_point(&cur, &self.mean_field, &self.config, dt)?;
        if post > 0.0 {
            let (n, r) = transport_step(&cur, post, scheme)?;
            transport = transport.merge(&r);
            cur = n;
        }
        let time = f.time() + dt;
        cur = cur.with_time(time);
        Ok((
            cur,
            StepReport {
                step,
                time,
                dt,
                picard,
                transport,
            },
        ))
    }

    /// Advances to `t_end`, calling `observer` on the initial state (with a
    /// default report) and after every step.
    pub fn run_trajectory<O>(&self, f0: DensityField, mut observer: O) -> Result<DensityField>
    where
        O: FnMut(&DensityField, &StepReport) -> Result<()>,
    {
        self.run_from(f0, 0, &mut observer)
    }

    /// Continues a run whose state after `first_step` steps is `f`.
    pub fn run_from<O>(&self, f: DensityField, first_step: usize, observer: &mut O) -> Result<DensityField>
    where
        O: FnMut(&DensityField, &StepReport) -> Result<()>,
    {
        let (steps, last_dt) = self.config.schedule();
        if first_step == 0 {
            observer(
                &f,
                &StepReport {
                    time: f.time(),
                    ..Default::default()
                },
            )?;
        }
        let mut cur = f;
        for step in first_step + 1..=steps {
            let dt = if step == steps { last_dt } else { self.config.dt };
            let (next, report) = self.advance(&cur, dt, step)?;
            observer(&next, &report)?;
            cur = next;
        }
        Ok(cur)
    }
}

pub fn run_trajectory<O>(
    grid: Arc<PhaseGrid>,
    table: Arc<KernelTable>,
    config: SolverConfig,
    f0: DensityField,
    observer: O,
) -> Result<DensityField>
where
    O: FnMut(&DensityField, &StepReport) -> Result<()>,
{
    Solver::new(grid, table, config)?.run_trajectory(f0, observer)
}

/// Matrix-free `L_g f + c_g` from direct convolutions, without the sparse
/// assembly. Reference for [`assemble_frozen`].
pub fn reference_action(
    g: &DensityField,
    f: &[f64],
    table: Arc<KernelTable>,
    epsilon: f64,
    form: OperatorForm,
) -> Result<Vec<f64>> {
    let grid = g.grid_arc().clone();
    grid.check_len(f.len())?;
    let mf = MeanField::new(grid.clone(), table, ConvolutionMethod::Direct)?;
    let vg = grid.velocity();
    let dim = vg.dim();
    let nv = vg.len();
    let m = vg.points_per_axis();
    let inv_h = 1.0 / vg.spacing();
    let coeffs = match form {
        OperatorForm::Upwind => Some(mf.coefficient_fields(g)?),
        OperatorForm::Entropic => None,
    };
    let mut out = Vec::with_capacity(f.len());
    for ix in 0..grid.nx() {
        let gb = g.block(ix);
        let fb = &f[ix * nv..(ix + 1) * nv];
        let mut res = vec![0.0; nv];
        match &coeffs {
            None => {
                for (r, l) in res.iter_mut().zip(stencil::laplacian(vg, fb)) {
                    *r += epsilon * l;
                }
                let gw = quantum_weight(gb);
                let ell: Vec<f64> = gb.iter().map(|&v| logit(v)).collect();
                let dl = stencil::gradient(vg, &ell);
                let dg = stencil::gradient(vg, gb);
                let df = stencil::gradient(vg, fb);
                let q: Vec<f64> = (0..nv * dim).map(|p| gw[p / dim] * dl[p]).collect();
                let a_bar = crate::convolution::direct_matrix_scalar(vg, mf.table(), &gw);
                let b_hat = crate::convolution::direct_matrix_vector(vg, mf.table(), &q);
                let mut flux = vec![0.0; nv * dim];
                for i in 0..nv {
                    for k in 0..dim {
                        let mut acc = 0.0;
                        for l in 0..dim {
                            let a = a_bar[i * dim * dim + k * dim + l];
                            acc += a * (df[i * dim + l] + q[i * dim + l] - dg[i * dim + l]);
                        }
                        flux[i * dim + k] = acc - (1.0 - gb[i]) * b_hat[i * dim + k] * fb[i];
                    }
                }
                for (r, d) in res.iter_mut().zip(stencil::gradient_transpose(vg, &flux)) {
                    *r -= d;
                }
            }
            Some(c) => {
                let df = stencil::gradient(vg, fb);
                let mut cross = vec![0.0; nv * dim];
                for i in 0..nv {
                    let node = ix * nv + i;
                    let a = c.a_bar_at(node);
                    for k in 0..dim {
                        let sk = vg.stride(k);
                        let jk = vg.axis_index(i, k);
                        if jk + 1 < m {
                            let a_next = c.a_bar_at(node + sk)[k * dim + k];
                            let coef = (0.5 * (a[k * dim + k] + a_next) + epsilon) * inv_h * inv_h;
                            let jump = fb[i + sk] - fb[i];
                            res[i] += coef * jump;
                            res[i + sk] -= coef * jump;
                        }
                        for l in 0..dim {
                            if l != k {
                                cross[i * dim + k] += a[k * dim + l] * df[i * dim + l];
                            }
                        }
                        let speed = -c.b_bar_at(node)[k] * (1.0 - 2.0 * gb[i]);
                        let forward = if speed > 0.0 { jk + 1 < m } else { jk == 0 };
                        res[i] += if forward {
                            speed * (fb[i + sk] - fb[i]) * inv_h
                        } else {
                            speed * (fb[i] - fb[i - sk]) * inv_h
                        };
                    }
                    let db = c.div_b_bar[node];
                    res[i] += db * gb[i] * fb[i] - db * gb[i];
                }
                for (r, d) in res.iter_mut().zip(stencil::gradient_transpose(vg, &cross)) {
                    *r -= d;
                }
            }
        }
        out.extend(res);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub rungs: Vec<LadderRung>,
    /// L¹ distance between the final states of rungs k and k + 1.
    pub successive_distances: Vec<f64>,
    pub monotone: bool,
}

/// Runs `base` once per rung of `base.viscosity_ladder`, each from the raw
/// datum regularized at that rung's `n`, and compares the final states.
pub fn run_viscosity_ladder(
    grid: Arc<PhaseGrid>,
    spec: CrossSectionSpec,
    raw_datum: &DensityField,
    base: &SolverConfig,
) -> Result<(LadderReport, Vec<DensityField>)> {
    if base.viscosity_ladder.len() < 2 {
        return Err(Error::param("solver.viscosity_ladder", "needs at least two rungs"));
    }
    let mut finals = Vec::with_capacity(base.viscosity_ladder.len());
    for rung in &base.viscosity_ladder {
        let kc = KernelConfig::new(rung.n)?;
        let table = Arc::new(KernelTable::build(grid.velocity(), spec, kc)?);
        let cfg = SolverConfig {
            epsilon: rung.epsilon,
            kernel_index: rung.n,
            viscosity_ladder: Vec::new(),
            ..base.clone()
        };
        let f0 = regularize_initial_datum(raw_datum, rung.n)?;
        let fin = Solver::new(grid.clone(), table, cfg)?.run_trajectory(f0, |_, _| Ok(()))?;
        finals.push(fin);
    }
    let successive_distances = finals
        .windows(2)
        .map(|w| w[0].l1_distance(&w[1]))
        .collect::<Result<Vec<_>>>()?;
    let monotone = successive_distances.windows(2).all(|w| w[1] < w[0]);
    Ok((
        LadderReport {
            rungs: base.viscosity_ladder.clone(),
            successive_distances,
            monotone,
        },
        finals,
    ))
}
