//! Moments, entropy, entropy dissipation, the weighted gradient norm and the
//! weak-form residual, plus the per-step recorder that feeds the CSV writer.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision_kernel::KernelTable;
use crate::convolution::{ConvolutionMethod, Convolver};
use crate::error::{Error, Result};
use crate::evolution::StepReport;
use crate::initial_data::{DensityField, EnvelopeSpec};
use crate::mean_field::{quantum_weight, MeanField};
use crate::phase_grid::{PhaseGrid, Topology};
use crate::stencil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub mass: f64,
    pub momentum: Vec<f64>,
    pub kinetic_energy: f64,
    pub inertia: f64,
    pub entropy: f64,
    pub dissipation_increment: f64,
    pub cumulative_dissipation: f64,
    pub pauli_min: f64,
    pub pauli_max: f64,
    pub weighted_grad_norm: f64,
    pub picard_iters: usize,
}

impl DiagnosticsRecord {
    pub fn csv_header(dim: usize) -> Vec<String> {
        let mut h = vec!["time".to_string(), "mass".to_string()];
        h.extend((0..dim).map(|k| format!("momentum_{k}")));
        h.extend(
            [
                "kinetic_energy",
                "inertia",
                "entropy",
                "dissipation_increment",
                "cumulative_dissipation",
                "pauli_min",
                "pauli_max",
                "weighted_grad_norm",
                "picard_iters",
            ]
            .map(String::from),
        );
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mass: f64,
    pub momentum: Vec<f64>,
    pub energy: f64,
    pub inertia: f64,
}

/// Mass, momentum, kinetic energy and the co-moving inertia `∬ f|x − tv|²`.
/// In homogeneous mode x is the origin, so inertia is `t²·energy`. On the
/// torus `x − tv` is taken as the nearest periodic image, which keeps the
/// inertia invariant under free streaming.
pub fn conserved_moments(f: &DensityField, t: f64) -> Moments {
    let grid = f.grid();
    let dim = grid.dim();
    let nv = grid.nv();
    let vg = grid.velocity();
    let w = grid.quadrature_weight();
    let period = grid
        .spatial()
        .filter(|s| s.topology() == Topology::PeriodicTorus)
        .map(|s| s.extent());
    let partial: Vec<(f64, Vec<f64>, f64, f64)> = (0..grid.nx())
        .into_par_iter()
        .map(|ix| {
            let x = grid.x_node(ix);
            let block = f.block(ix);
            let mut m = 0.0;
            let mut p = vec![0.0; dim];
            let mut e = 0.0;
            let mut inr = 0.0;
            for (iv, &val) in block.iter().enumerate().take(nv) {
                let v = vg.node(iv);
                m += val;
                let mut v2 = 0.0;
                let mut r2 = 0.0;
                for k in 0..dim {
                    p[k] += val * v[k];
                    v2 += v[k] * v[k];
                    let mut d = x[k] - t * v[k];
                    if let Some(l) = period {
                        d -= l * (d / l).round();
                    }
                    r2 += d * d;
                }
                e += val * v2;
                inr += val * r2;
            }
            (m, p, e, inr)
        })
        .collect();
    let mut out = Moments {
        mass: 0.0,
        momentum: vec![0.0; dim],
        energy: 0.0,
        inertia: 0.0,
    };
    for (m, p, e, inr) in partial {
        out.mass += m;
        for k in 0..dim {
            out.momentum[k] += p[k];
        }
        out.energy += e;
        out.inertia += inr;
    }
    out.mass *= w;
    out.momentum.iter_mut().for_each(|c| *c *= w);
    out.energy *= w;
    out.inertia *= w;
    out
}

/// `s(f) = f log f + (1 − f) log(1 − f)` with `0 log 0 = 0`; the argument is
/// clamped to [0, 1].
pub fn entropy_density(f: f64) -> f64 {
    let f = f.clamp(0.0, 1.0);
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    xlogx(f) + xlogx(1.0 - f)
}

pub fn quantum_entropy(f: &DensityField) -> f64 {
    let s: f64 = f.samples().iter().map(|&v| entropy_density(v)).sum();
    s * f.grid().quadrature_weight()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientRule {
    /// `∇ arcsin√f = ½ √(f(1−f)) D logit f`; vanishes identically on discrete
    /// Fermi–Dirac states and matches the entropic collision operator.
    #[default]
    Chain,
    /// `D arcsin√f` with the centered stencil.
    Centered,
}

const LOGIT_FLOOR: f64 = 1e-300;

fn logit(f: f64) -> f64 {
    let f = f.clamp(LOGIT_FLOOR, 1.0 - f64::EPSILON);
    f.ln() - (-f).ln_1p()
}

/// Discrete `∇ arcsin√f` over the whole phase grid, N values per node.
pub fn arcsin_gradient(f: &DensityField, rule: GradientRule) -> Vec<f64> {
    let grid = f.grid();
    let vg = grid.velocity();
    let dim = grid.dim();
    let blocks: Vec<Vec<f64>> = (0..grid.nx())
        .into_par_iter()
        .map(|ix| {
            let fb = f.block(ix);
            match rule {
                GradientRule::Chain => {
                    let l: Vec<f64> = fb.iter().map(|&v| logit(v)).collect();
                    let mut g = stencil::gradient(vg, &l);
                    for (i, &v) in fb.iter().enumerate() {
                        let half_root = 0.5 * (v * (1.0 - v)).max(0.0).sqrt();
                        for k in 0..dim {
                            g[i * dim + k] *= half_root;
                        }
                    }
                    g
                }
                GradientRule::Centered => {
                    let a: Vec<f64> = fb.iter().map(|&v| v.clamp(0.0, 1.0).sqrt().asin()).collect();
                    stencil::gradient(vg, &a)
                }
            }
        })
        .collect();
    blocks.concat()
}

/// Reusable evaluator for the dissipation sums; the double sum over
/// `(v, v*)` is reduced to two lattice convolutions.
pub struct DissipationEvaluator {
    grid: Arc<PhaseGrid>,
    conv: Convolver,
}

impl std::fmt::Debug for DissipationEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DissipationEvaluator").field("conv", &self.conv).finish()
    }
}

impl DissipationEvaluator {
    pub fn new(grid: Arc<PhaseGrid>, table: Arc<KernelTable>, method: ConvolutionMethod) -> Result<Self> {
        let vg = grid.velocity();
        if table.dim() != vg.dim() || table.points_per_axis() != vg.points_per_axis() || table.spacing() != vg.spacing() {
            return Err(Error::InvalidGrid("kernel table was built for a different velocity grid".into()));
        }
        let conv = Convolver::new(grid.velocity(), table, method);
        Ok(Self { grid, conv })
    }

    fn check(&self, f: &DensityField, grad: &[f64]) -> Result<()> {
        if f.grid() != self.grid.as_ref() {
            return Err(Error::InvalidGrid("density lives on a different grid".into()));
        }
        let expected = self.grid.len() * self.grid.dim();
        if grad.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                found: grad.len(),
            });
        }
        Ok(())
    }

    /// `∭ Σ_{v*} (p*q − pq*)ᵀ a(v − v*) (p*q − pq*)` for weights `p` with
    /// `p² = G` and vectors `q`, expanded as
    /// `2 Σ qᵀ(a ∗ G)q − 2 Σ (pq)ᵀ(a ∗ pq)`.
    fn pair_sum(&self, weights: &[f64], g: &[f64], q: &[f64]) -> f64 {
        let dim = self.grid.dim();
        let nv = self.grid.nv();
        let total: f64 = (0..self.grid.nx())
            .into_par_iter()
            .map(|ix| {
                let gb = &g[ix * nv..(ix + 1) * nv];
                let pb = &weights[ix * nv..(ix + 1) * nv];
                let qb = &q[ix * nv * dim..(ix + 1) * nv * dim];
                let a_bar = self.conv.matrix_scalar(gb);
                let pq: Vec<f64> = qb.iter().enumerate().map(|(j, &c)| c * pb[j / dim]).collect();
                let a_pq = self.conv.matrix_vector(&pq);
                let mut acc = 0.0;
                for i in 0..nv {
                    let qi = &qb[i * dim..(i + 1) * dim];
                    let ai = &a_bar[i * dim * dim..(i + 1) * dim * dim];
                    for r in 0..dim {
                        for c in 0..dim {
                            acc += qi[r] * ai[r * dim + c] * qi[c];
                        }
                        acc -= pq[i * dim + r] * a_pq[i * dim + r];
                    }
                }
                2.0 * acc
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        (total * self.grid.quadrature_weight()).max(0.0)
    }

    /// Arcsin form `4 ∭ |√a (√G* ∇A − √G ∇A*)|²` for given `∇A`.
    pub fn arcsin_form(&self, f: &DensityField, grad_arcsin: &[f64]) -> Result<f64> {
        self.check(f, grad_arcsin)?;
        let g = quantum_weight(f.samples());
        let p: Vec<f64> = g.iter().map(|v| v.sqrt()).collect();
        Ok(4.0 * self.pair_sum(&p, &g, grad_arcsin))
    }

    /// Direct form `∭ a G G* |∇f/G − ∇f*/G*|^{⊗2}` for given `∇f`; requires
    /// `0 < f < 1` wherever `∇f` is nonzero.
    pub fn direct_form(&self, f: &DensityField, grad_f: &[f64]) -> Result<f64> {
        self.check(f, grad_f)?;
        let dim = self.grid.dim();
        let g = quantum_weight(f.samples());
        let p: Vec<f64> = g.iter().map(|v| v.sqrt()).collect();
        // √(GG*)(∇f/G − ∇f*/G*) = √G* q − √G q* with q = ∇f/√G.
        let mut q = grad_f.to_vec();
        for (j, c) in q.iter_mut().enumerate() {
            let pi = p[j / dim];
            *c = if pi > 0.0 { *c / pi } else { 0.0 };
        }
        Ok(self.pair_sum(&p, &g, &q))
    }

    pub fn evaluate(&self, f: &DensityField, rule: GradientRule) -> Result<f64> {
        let grad = arcsin_gradient(f, rule);
        self.arcsin_form(f, &grad)
    }
}

/// Entropy dissipation `D(f)` in the arcsin form.
pub fn entropy_dissipation(f: &DensityField, table: Arc<KernelTable>, rule: GradientRule) -> Result<f64> {
    DissipationEvaluator::new(f.grid_arc().clone(), table, ConvolutionMethod::Auto)?.evaluate(f, rule)
}

/// `∬ e^{α(|x|² + |v|²)} |D f|²` with centered velocity gradients.
pub fn weighted_gradient_norm(f: &DensityField, env: &EnvelopeSpec) -> f64 {
    let grid = f.grid();
    let vg = grid.velocity();
    let dim = grid.dim();
    let homogeneous = grid.is_homogeneous();
    let alpha = env.alpha;
    let total: f64 = (0..grid.nx())
        .into_par_iter()
        .map(|ix| {
            let x = grid.x_node(ix);
            let x2: f64 = if homogeneous { 0.0 } else { x.iter().map(|c| c * c).sum() };
            let grad = stencil::gradient(vg, f.block(ix));
            (0..vg.len())
                .map(|iv| {
                    let v2: f64 = vg.node(iv).iter().map(|c| c * c).sum();
                    let g2: f64 = grad[iv * dim..(iv + 1) * dim].iter().map(|c| c * c).sum();
                    (alpha * (x2 + v2)).exp() * g2
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total * grid.quadrature_weight()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftLaw {
    /// Max over t > 0 of `|Δmeasured − Δpredicted| / |Δpredicted|`, or
    /// relative to the initial value when the prediction vanishes.
    pub max_deviation: f64,
    pub final_deviation: f64,
    pub final_measured: f64,
    pub final_predicted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub epsilon: f64,
    pub dim: usize,
    /// `ΔE = 2εt‖f₀‖`.
    pub energy: DriftLaw,
    /// `ΔE = 2Nεt‖f₀‖`, the exact viscous increment of `∫f|v|²`.
    pub energy_dimensional: DriftLaw,
    /// `ΔI = (2εt³/3)‖f₀‖`.
    pub inertia: DriftLaw,
    /// `ΔI = (2Nεt³/3)‖f₀‖`.
    pub inertia_dimensional: DriftLaw,
}

fn drift_law<M, P>(records: &[DiagnosticsRecord], measure: M, predict: P) -> DriftLaw
where
    M: Fn(&DiagnosticsRecord) -> f64,
    P: Fn(f64) -> f64,
{
    let first = &records[0];
    let base = measure(first);
    let mut law = DriftLaw {
        max_deviation: 0.0,
        final_deviation: 0.0,
        final_measured: 0.0,
        final_predicted: 0.0,
    };
    for r in records.iter().skip(1) {
        let t = r.time - first.time;
        let measured = measure(r) - base;
        let predicted = predict(t);
        let scale = if predicted != 0.0 { predicted.abs() } else { base.abs().max(f64::MIN_POSITIVE) };
        let dev = (measured - predicted).abs() / scale;
        law.max_deviation = law.max_deviation.max(dev);
        law.final_deviation = dev;
        law.final_measured = measured;
        law.final_predicted = predicted;
    }
    law
}

/// Compares the energy and inertia increments with the closed-form viscous
/// drift laws, using the first record's mass as `‖f₀‖`.
pub fn drift_check(records: &[DiagnosticsRecord], epsilon: f64) -> Result<DriftReport> {
    let first = records.first().ok_or_else(|| Error::Missing("no diagnostics records".into()))?;
    let dim = first.momentum.len();
    let m0 = first.mass;
    let nf = dim as f64;
    let energy = |r: &DiagnosticsRecord| r.kinetic_energy;
    let inertia = |r: &DiagnosticsRecord| r.inertia;
    Ok(DriftReport {
        epsilon,
        dim,
        energy: drift_law(records, energy, |t| 2.0 * epsilon * t * m0),
        energy_dimensional: drift_law(records, energy, |t| 2.0 * nf * epsilon * t * m0),
        inertia: drift_law(records, inertia, |t| 2.0 * epsilon * t.powi(3) / 3.0 * m0),
        inertia_dimensional: drift_law(records, inertia, |t| 2.0 * nf * epsilon * t.powi(3) / 3.0 * m0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub initial_entropy: f64,
    /// `max_t [S(t) + ∫₀ᵗ D − S(0)]`.
    pub max_slack: f64,
    pub max_slack_time: f64,
    pub max_entropy: f64,
    pub min_dissipation_increment: f64,
}

impl EntropyReport {
    pub fn relative_slack(&self) -> f64 {
        self.max_slack / self.initial_entropy.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn entropy_inequality_check(records: &[DiagnosticsRecord]) -> Result<EntropyReport> {
    let first = records.first().ok_or_else(|| Error::Missing("no diagnostics records".into()))?;
    let s0 = first.entropy;
    let mut out = EntropyReport {
        initial_entropy: s0,
        max_slack: f64::NEG_INFINITY,
        max_slack_time: first.time,
        max_entropy: f64::NEG_INFINITY,
        min_dissipation_increment: f64::INFINITY,
    };
    for r in records {
        let slack = r.entropy + r.cumulative_dissipation - s0;
        if slack > out.max_slack {
            out.max_slack = slack;
            out.max_slack_time = r.time;
        }
        out.max_entropy = out.max_entropy.max(r.entropy);
        out.min_dissipation_increment = out.min_dissipation_increment.min(r.dissipation_increment);
    }
    Ok(out)
}

/// Polynomial factors of the weak-form test pack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestPolynomial {
    One,
    V0,
    Speed2,
    V0V1,
    /// `v₀² − v₁ + x₀v₀`.
    Mixed,
}

impl TestPolynomial {
    pub const ALL: [TestPolynomial; 5] = [Self::One, Self::V0, Self::Speed2, Self::V0V1, Self::Mixed];

    /// Value, v-gradient, v-Hessian (row-major) and x-gradient.
    fn eval(self, x: &[f64], v: &[f64]) -> (f64, [f64; 3], [f64; 9], [f64; 3]) {
        let n = v.len();
        let mut gv = [0.0; 3];
        let mut hv = [0.0; 9];
        let mut gx = [0.0; 3];
        let val = match self {
            Self::One => 1.0,
            Self::V0 => {
                gv[0] = 1.0;
                v[0]
            }
            Self::Speed2 => {
                for k in 0..n {
                    gv[k] = 2.0 * v[k];
                    hv[k * n + k] = 2.0;
                }
                v.iter().map(|c| c * c).sum()
            }
            Self::V0V1 => {
                gv[0] = v[1];
                gv[1] = v[0];
                hv[1] = 1.0;
                hv[n] = 1.0;
                v[0] * v[1]
            }
            Self::Mixed => {
                gv[0] = 2.0 * v[0] + x[0];
                gv[1] = -1.0;
                hv[0] = 2.0;
                gx[0] = v[0];
                v[0] * v[0] - v[1] + x[0] * v[0]
            }
        };
        (val, gv, hv, gx)
    }
}

/// `ψ(x, v) = p(x, v) exp(−|v|²/2σ_v² − |x|²/2σ_x²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub polynomial: TestPolynomial,
    pub sigma_v: f64,
    pub sigma_x: f64,
}

/// Pointwise derivatives of a test function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestValues {
    pub value: f64,
    pub grad_v: [f64; 3],
    pub hess_v: [f64; 9],
    pub grad_x: [f64; 3],
}

impl TestFunction {
    pub fn eval(&self, x: &[f64], v: &[f64]) -> TestValues {
        let n = v.len();
        let sv2 = self.sigma_v * self.sigma_v;
        let sx2 = self.sigma_x * self.sigma_x;
        let v2: f64 = v.iter().map(|c| c * c).sum();
        let x2: f64 = x.iter().map(|c| c * c).sum();
        let g = (-0.5 * v2 / sv2 - 0.5 * x2 / sx2).exp();
        let (p, dp, hp, dpx) = self.polynomial.eval(x, v);
        let mut out = TestValues {
            value: p * g,
            grad_v: [0.0; 3],
            hess_v: [0.0; 9],
            grad_x: [0.0; 3],
        };
        for i in 0..n {
            out.grad_v[i] = (dp[i] - p * v[i] / sv2) * g;
            out.grad_x[i] = (dpx[i] - p * x[i] / sx2) * g;
            for j in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                out.hess_v[i * n + j] = (hp[i * n + j] - dp[i] * v[j] / sv2 - dp[j] * v[i] / sv2
                    + p * (v[i] * v[j] / (sv2 * sv2) - delta / sv2))
                    * g;
            }
        }
        out
    }
}

/// The fixed five-member pack used for residual comparisons across runs.
pub fn default_test_pack() -> Vec<TestFunction> {
    TestPolynomial::ALL
        .iter()
        .map(|&polynomial| TestFunction {
            polynomial,
            sigma_v: 1.5,
            sigma_x: 1.0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakTerms {
    /// `−∫∬ f ∂_tφ`.
    pub time: f64,
    /// `−∫∬ f v·∇ₓφ`.
    pub transport: f64,
    /// `∫∬ f [(ā_ij + εδ_ij) ∂²_ij φ + ∂_j ā_ij ∂_i φ]`.
    pub diffusion: f64,
    /// `∫∬ b̄_i f(1 − f) ∂_i φ`.
    pub drift: f64,
    /// The same integrals with every integrand replaced by its absolute
    /// value; normalizes the residual even when the signed terms cancel by
    /// symmetry.
    pub magnitude: f64,
}

impl WeakTerms {
    pub fn residual(&self) -> f64 {
        self.time + self.transport - self.diffusion - self.drift
    }

    pub fn relative(&self) -> f64 {
        let s = self.magnitude;
        if s > 0.0 {
            self.residual().abs() / s
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakResidualReport {
    pub terms: Vec<WeakTerms>,
    pub relative: Vec<f64>,
    pub max_relative: f64,
}

/// Weak-form residual of a stored trajectory for test functions
/// `φ(t, x, v) = sin²(πt/T) ψ(x, v)`, T the trajectory length. The time
/// integral uses the trapezoid rule over the stored states. `mean_field =
/// None` switches the collision coefficients off, leaving `εΔ`.
pub fn weak_residual(
    trajectory: &[DensityField],
    mean_field: Option<&MeanField>,
    epsilon: f64,
    pack: &[TestFunction],
) -> Result<WeakResidualReport> {
    if trajectory.len() < 2 {
        return Err(Error::Missing("weak residual needs at least two stored states".into()));
    }
    let grid = trajectory[0].grid_arc().clone();
    if trajectory.iter().any(|f| f.grid() != grid.as_ref()) {
        return Err(Error::InvalidGrid("trajectory mixes grids".into()));
    }
    let t0 = trajectory[0].time();
    let span = trajectory[trajectory.len() - 1].time() - t0;
    if !(span > 0.0) {
        return Err(Error::Missing("trajectory does not advance in time".into()));
    }
    let dim = grid.dim();
    let nv = grid.nv();
    let vg = grid.velocity();
    let w = grid.quadrature_weight();
    let homogeneous = grid.is_homogeneous();
    let omega = std::f64::consts::PI / span;

    // Test-function samples are time independent.
    let samples: Vec<Vec<TestValues>> = pack
        .iter()
        .map(|tf| {
            (0..grid.len())
                .map(|node| {
                    let x = grid.x_node(node / nv);
                    tf.eval(&x, vg.node(node % nv))
                })
                .collect()
        })
        .collect();

    let mut terms = vec![
        WeakTerms {
            time: 0.0,
            transport: 0.0,
            diffusion: 0.0,
            drift: 0.0,
            magnitude: 0.0,
        };
        pack.len()
    ];
    for (k, f) in trajectory.iter().enumerate() {
        let dt_weight = {
            let left = if k > 0 { f.time() - trajectory[k - 1].time() } else { 0.0 };
            let right = if k + 1 < trajectory.len() { trajectory[k + 1].time() - f.time() } else { 0.0 };
            0.5 * (left + right)
        };
        if dt_weight == 0.0 {
            continue;
        }
        let s = f.time() - t0;
        let tau = (omega * s).sin().powi(2);
        let tau_dot = omega * (2.0 * omega * s).sin();
        let coeffs = match mean_field {
            Some(mf) => Some(mf.coefficient_fields(f)?),
            None => None,
        };
        for (p, tv) in samples.iter().enumerate() {
            let mut time = 0.0;
            let mut transport = 0.0;
            let mut diffusion = 0.0;
            let mut drift = 0.0;
            let mut magnitude = 0.0;
            for (node, &val) in f.samples().iter().enumerate() {
                if val == 0.0 {
                    continue;
                }
                let t = &tv[node];
                let v = vg.node(node % nv);
                time -= val * t.value * tau_dot;
                magnitude += (val * t.value * tau_dot).abs();
                if !homogeneous {
                    let vx: f64 = (0..dim).map(|i| v[i] * t.grad_x[i]).sum();
                    transport -= val * vx * tau;
                    magnitude += (val * vx * tau).abs();
                }
                let lap: f64 = (0..dim).map(|i| t.hess_v[i * dim + i]).sum();
                let mut d = epsilon * lap;
                let mut b = 0.0;
                if let Some(c) = &coeffs {
                    let a = c.a_bar_at(node);
                    let da = c.div_a_bar_at(node);
                    let bb = c.b_bar_at(node);
                    for i in 0..dim {
                        for j in 0..dim {
                            d += a[i * dim + j] * t.hess_v[i * dim + j];
                        }
                        d += da[i] * t.grad_v[i];
                        b += bb[i] * t.grad_v[i];
                    }
                }
                diffusion += val * d * tau;
                drift += b * val * (1.0 - val) * tau;
                magnitude += (val * d * tau).abs() + (b * val * (1.0 - val) * tau).abs();
            }
            let scale = w * dt_weight;
            terms[p].time += time * scale;
            terms[p].transport += transport * scale;
            terms[p].diffusion += diffusion * scale;
            terms[p].drift += drift * scale;
            terms[p].magnitude += magnitude * scale;
        }
    }
    let relative: Vec<f64> = terms.iter().map(WeakTerms::relative).collect();
    let max_relative = relative.iter().cloned().fold(0.0, f64::max);
    Ok(WeakResidualReport {
        terms,
        relative,
        max_relative,
    })
}

/// Recorder settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecorderConfig {
    /// Dissipation is evaluated every `dissipation_stride` steps and linearly
    /// interpolated in between.
    pub dissipation_stride: usize,
    pub gradient_rule: GradientRule,
    pub gradient_weight: EnvelopeSpec,
    pub keep_states: bool,
}

/// Run-level totals that are not CSV columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StepTotals {
    pub steps: usize,
    pub clamped_mass: f64,
    pub max_clamped_mass: f64,
    pub leaked_mass: f64,
    pub max_picard_iters: usize,
    pub max_picard_residual: f64,
}

struct Anchor {
    time: f64,
    dissipation: f64,
}

/// Observer for [`crate::evolution::Solver::run_trajectory`] that turns
/// states into [`DiagnosticsRecord`]s.
pub struct Recorder {
    evaluator: DissipationEvaluator,
    config: RecorderConfig,
    records: Vec<DiagnosticsRecord>,
    pending: Vec<DiagnosticsRecord>,
    pending_step_dt: Vec<f64>,
    last_state: Option<DensityField>,
    anchor: Option<Anchor>,
    cumulative: f64,
    states: Vec<DensityField>,
    totals: StepTotals,
    flushed: usize,
}

impl std::fmt::Debug for Recorder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Recorder")
            .field("records", &self.records.len())
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl Recorder {
    pub fn new(grid: Arc<PhaseGrid>, table: Arc<KernelTable>, method: ConvolutionMethod, config: RecorderConfig) -> Result<Self> {
        if config.dissipation_stride == 0 {
            return Err(Error::param("output.dissipation_stride", "must be at least 1"));
        }
        Ok(Self {
            evaluator: DissipationEvaluator::new(grid, table, method)?,
            config,
            records: Vec::new(),
            pending: Vec::new(),
            pending_step_dt: Vec::new(),
            last_state: None,
            anchor: None,
            cumulative: 0.0,
            states: Vec::new(),
            totals: StepTotals::default(),
            flushed: 0,
        })
    }

    /// Continues after a stored state whose record is `last`; the dissipation
    /// at that state is recomputed as the interpolation anchor.
    pub fn resume(&mut self, state: &DensityField, last: &DiagnosticsRecord) -> Result<()> {
        let d = self.evaluator.evaluate(state, self.config.gradient_rule)?;
        self.anchor = Some(Anchor {
            time: state.time(),
            dissipation: d,
        });
        self.cumulative = last.cumulative_dissipation;
        if self.config.keep_states {
            self.states.push(state.clone());
        }
        Ok(())
    }

    pub fn evaluator(&self) -> &DissipationEvaluator {
        &self.evaluator
    }

    fn record(&self, f: &DensityField, report: &StepReport, first: bool) -> DiagnosticsRecord {
        let t = f.time();
        let m = conserved_moments(f, t);
        let (lo, hi) = f.pauli_range();
        let (pre_lo, pre_hi) = if first {
            (lo, hi)
        } else {
            (
                report.picard.pre_clamp_min.min(report.transport.pre_clamp_min).min(lo),
                report.picard.pre_clamp_max.max(report.transport.pre_clamp_max).max(hi),
            )
        };
        DiagnosticsRecord {
            time: t,
            mass: m.mass,
            momentum: m.momentum,
            kinetic_energy: m.energy,
            inertia: m.inertia,
            entropy: quantum_entropy(f),
            dissipation_increment: 0.0,
            cumulative_dissipation: 0.0,
            pauli_min: pre_lo,
            pauli_max: pre_hi,
            weighted_grad_norm: weighted_gradient_norm(f, &self.config.gradient_weight),
            picard_iters: report.picard.iterations,
        }
    }

    /// Settles pending records against the dissipation `d` at the last one.
    fn settle(&mut self, d: f64) {
        let end_time = match self.pending.last() {
            Some(r) => r.time,
            None => return,
        };
        let (t_a, d_a) = match &self.anchor {
            Some(a) => (a.time, a.dissipation),
            None => (end_time, d),
        };
        let interp = |t: f64| {
            if end_time > t_a {
                d_a + (d - d_a) * (t - t_a) / (end_time - t_a)
            } else {
                d
            }
        };
        let mut prev_t = t_a;
        let mut prev_d = d_a;
        for (r, &dt) in self.pending.iter_mut().zip(&self.pending_step_dt) {
            let dr = interp(r.time);
            self.cumulative += 0.5 * (prev_d + dr) * (r.time - prev_t);
            r.dissipation_increment = dr * dt;
            r.cumulative_dissipation = self.cumulative;
            prev_t = r.time;
            prev_d = dr;
        }
        self.records.append(&mut self.pending);
        self.pending_step_dt.clear();
        self.anchor = Some(Anchor {
            time: end_time,
            dissipation: d,
        });
    }

    pub fn observe(&mut self, f: &DensityField, report: &StepReport) -> Result<()> {
        let first = self.anchor.is_none() && self.records.is_empty() && self.pending.is_empty();
        let rec = self.record(f, report, first);
        if !first {
            self.totals.steps += 1;
            let clamped = report.picard.clamped_mass + report.transport.clamped_mass;
            self.totals.clamped_mass += clamped;
            self.totals.max_clamped_mass = self.totals.max_clamped_mass.max(clamped);
            self.totals.leaked_mass += report.transport.leaked_mass;
            self.totals.max_picard_iters = self.totals.max_picard_iters.max(report.picard.iterations);
            self.totals.max_picard_residual = self.totals.max_picard_residual.max(report.picard.final_residual);
        }
        self.pending.push(rec);
        self.pending_step_dt.push(if first { 0.0 } else { report.dt });
        if self.config.keep_states {
            self.states.push(f.clone());
        }
        if first || report.step.is_multiple_of(self.config.dissipation_stride) {
            let d = self.evaluator.evaluate(f, self.config.gradient_rule)?;
            self.settle(d);
            self.last_state = None;
        } else {
            self.last_state = Some(f.clone());
        }
        Ok(())
    }

    /// Records settled since the previous call.
    pub fn drain_new(&mut self) -> &[DiagnosticsRecord] {
        let from = self.flushed;
        self.flushed = self.records.len();
        &self.records[from..]
    }

    /// Settles the tail by evaluating the dissipation at the last state.
    pub fn finish(&mut self) -> Result<()> {
        if let Some(f) = self.last_state.take() {
            let d = self.evaluator.evaluate(&f, self.config.gradient_rule)?;
            self.settle(d);
        }
        Ok(())
    }

    pub fn records(&self) -> &[DiagnosticsRecord] {
        &self.records
    }

    pub fn states(&self) -> &[DensityField] {
        &self.states
    }

    pub fn totals(&self) -> &StepTotals {
        &self.totals
    }

    pub fn into_parts(self) -> (Vec<DiagnosticsRecord>, Vec<DensityField>, StepTotals) {
        (self.records, self.states, self.totals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision_kernel::{CrossSectionSpec, KernelConfig, RegularizedKernel};
    use crate::phase_grid::VelocityGrid;

    fn hom(m: usize, v: f64) -> Arc<PhaseGrid> {
        Arc::new(PhaseGrid::homogeneous(VelocityGrid::new(2, v, m).unwrap()))
    }

    fn table(grid: &PhaseGrid, n: u32) -> Arc<KernelTable> {
        Arc::new(KernelTable::build(grid.velocity(), CrossSectionSpec::coulomb(grid.dim()), KernelConfig::new(n).unwrap()).unwrap())
    }

    #[test]
    fn zero_field_moments() {
        let g = hom(9, 2.0);
        let m = conserved_moments(&DensityField::zeros(g), 0.3);
        assert_eq!(m.mass, 0.0);
        assert_eq!(m.energy, 0.0);
        assert_eq!(m.inertia, 0.0);
        assert!(m.momentum.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn gaussian_energy_matches_pi() {
        let g = hom(64, 6.0);
        let f = DensityField::from_fn(g, 0.0, |_, v| (-(v[0] * v[0] + v[1] * v[1])).exp()).unwrap();
        let m = conserved_moments(&f, 0.0);
        assert!((m.energy - std::f64::consts::PI).abs() < 1e-6);
        assert!(m.momentum.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn entropy_conventions() {
        assert_eq!(entropy_density(0.0), 0.0);
        assert_eq!(entropy_density(1.0), 0.0);
        assert!((entropy_density(0.5) + std::f64::consts::LN_2).abs() < 1e-15);
        // Unit phase volume: 2×2 nodes with h = 1.
        let g = Arc::new(PhaseGrid::homogeneous(VelocityGrid::new(2, 1.0, 3).unwrap()));
        let f = DensityField::from_fn(g.clone(), 0.0, |_, _| 0.5).unwrap();
        let vol = g.quadrature_weight() * g.len() as f64;
        assert!((quantum_entropy(&f) / vol + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dissipation_vanishes_on_constants_and_equilibria() {
        let g = hom(16, 4.0);
        let t = table(&g, 8);
        let c = DensityField::from_fn(g.clone(), 0.0, |_, _| 0.3).unwrap();
        for rule in [GradientRule::Chain, GradientRule::Centered] {
            assert!(entropy_dissipation(&c, t.clone(), rule).unwrap() < 1e-14);
        }
        let fd = DensityField::from_fn(g.clone(), 0.0, |_, v| 1.0 / (1.0 + (1.0 + v[0] * v[0] + v[1] * v[1]).exp())).unwrap();
        let d = entropy_dissipation(&fd, t.clone(), GradientRule::Chain).unwrap();
        assert!(d < 1e-12, "{d}");
        let gauss = DensityField::from_fn(g, 0.0, |_, v| 0.5 * (-(v[0] * v[0] + 2.0 * v[1] * v[1])).exp()).unwrap();
        assert!(entropy_dissipation(&gauss, t, GradientRule::Chain).unwrap() > 1e-3);
    }

    /// Brute-force `4 Σ_x Σ_{v,v*} |√a (√G* q − √G q*)|²` with matrices from the
    /// continuous kernel, independent of the table and the convolution path.
    fn brute_arcsin(f: &DensityField, q: &[f64], n: u32) -> f64 {
        let grid = f.grid();
        let vg = grid.velocity();
        let dim = grid.dim();
        let k = RegularizedKernel::new(CrossSectionSpec::coulomb(dim), KernelConfig::new(n).unwrap());
        let h = vg.cell_volume();
        let mut total = 0.0;
        for i in 0..vg.len() {
            for j in 0..vg.len() {
                let z: Vec<f64> = (0..dim).map(|c| vg.node(i)[c] - vg.node(j)[c]).collect();
                let (s, _) = k.kernel_sqrt(&z);
                let gi = (f.samples()[i] * (1.0 - f.samples()[i])).sqrt();
                let gj = (f.samples()[j] * (1.0 - f.samples()[j])).sqrt();
                let b: Vec<f64> = (0..dim).map(|c| gj * q[i * dim + c] - gi * q[j * dim + c]).collect();
                for r in 0..dim {
                    let y: f64 = (0..dim).map(|c| s[(r, c)] * b[c]).sum();
                    total += y * y;
                }
            }
        }
        4.0 * total * h * grid.quadrature_weight()
    }

    #[test]
    fn arcsin_form_matches_brute_force() {
        let g = hom(9, 3.0);
        let t = table(&g, 4);
        let f = DensityField::from_fn(g.clone(), 0.0, |_, v| 0.6 * (-(0.7 * v[0] * v[0] + v[1] * v[1] - 0.3 * v[0])).exp()).unwrap();
        for rule in [GradientRule::Chain, GradientRule::Centered] {
            let q = arcsin_gradient(&f, rule);
            let ev = DissipationEvaluator::new(g.clone(), t.clone(), ConvolutionMethod::Direct).unwrap();
            let fast = ev.arcsin_form(&f, &q).unwrap();
            let slow = brute_arcsin(&f, &q, 4);
            assert!((fast - slow).abs() <= 1e-9 * slow, "{fast} {slow}");
        }
    }

    #[test]
    fn arcsin_and_direct_forms_agree_with_exact_gradients() {
        let g = hom(20, 3.0);
        let t = table(&g, 8);
        // Strictly interior: 0.05 ≤ f ≤ 0.8.
        let val = |v: &[f64]| 0.05 + 0.75 * (-(0.5 * v[0] * v[0] + 0.8 * v[1] * v[1] - 0.2 * v[0] * v[1])).exp();
        let grad = |v: &[f64]| {
            let e = (-(0.5 * v[0] * v[0] + 0.8 * v[1] * v[1] - 0.2 * v[0] * v[1])).exp();
            [0.75 * e * (-v[0] + 0.2 * v[1]), 0.75 * e * (-1.6 * v[1] + 0.2 * v[0])]
        };
        let f = DensityField::from_fn(g.clone(), 0.0, |_, v| val(v)).unwrap();
        let vg = g.velocity();
        let mut grad_f = Vec::new();
        let mut grad_a = Vec::new();
        for i in 0..vg.len() {
            let v = vg.node(i);
            let fv = val(v);
            let d = grad(v);
            let c = 1.0 / (2.0 * (fv * (1.0 - fv)).sqrt());
            grad_f.extend(d);
            grad_a.extend([d[0] * c, d[1] * c]);
        }
        let ev = DissipationEvaluator::new(g, t, ConvolutionMethod::Auto).unwrap();
        let a = ev.arcsin_form(&f, &grad_a).unwrap();
        let d = ev.direct_form(&f, &grad_f).unwrap();
        assert!(a > 0.0);
        assert!((a - d).abs() <= 1e-8 * d, "{a} {d}");
    }

    #[test]
    fn weighted_gradient_norm_gaussian() {
        let env = EnvelopeSpec {
            alpha: 1.0,
            c_lower: 0.0,
            c_upper: 1.0,
        };
        // Discrete sums with the exact gradient: 4|v|²e^{−|v|²} → 4π.
        let mut errs = Vec::new();
        for m in [32usize, 64] {
            let g = hom(m, 6.0);
            let f = DensityField::from_fn(g.clone(), 0.0, |_, v| (-(v[0] * v[0] + v[1] * v[1])).exp()).unwrap();
            let exact = g
                .integrate_weighted(&vec![1.0; g.len()], 0.0, |_, v, _| {
                    let r2 = v[0] * v[0] + v[1] * v[1];
                    4.0 * r2 * (-r2).exp()
                })
                .unwrap();
            assert!((exact - 4.0 * std::f64::consts::PI).abs() < 1e-6);
            let w = weighted_gradient_norm(&f, &env);
            errs.push((w - exact).abs() / exact);
        }
        assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
        assert!(errs[1] < 2e-2);
    }

    #[test]
    fn weighted_gradient_norm_monotone_in_alpha() {
        let g = hom(12, 3.0);
        let f = DensityField::from_fn(g, 0.0, |_, v| 0.4 * (-(v[0] * v[0] + v[1] * v[1])).exp()).unwrap();
        let env = |a| EnvelopeSpec {
            alpha: a,
            c_lower: 0.0,
            c_upper: 1.0,
        };
        assert!(weighted_gradient_norm(&f, &env(1.0)) > weighted_gradient_norm(&f, &env(0.5)));
        let c = DensityField::from_fn(Arc::new(f.grid().clone()), 0.0, |_, _| 0.2).unwrap();
        assert!(weighted_gradient_norm(&c, &env(1.0)) < 1e-20);
    }

    fn record(t: f64, mass: f64, energy: f64, inertia: f64, entropy: f64, cum: f64) -> DiagnosticsRecord {
        DiagnosticsRecord {
            time: t,
            mass,
            momentum: vec![0.0, 0.0],
            kinetic_energy: energy,
            inertia,
            entropy,
            dissipation_increment: 0.0,
            cumulative_dissipation: cum,
            pauli_min: 0.0,
            pauli_max: 1.0,
            weighted_grad_norm: 0.0,
            picard_iters: 0,
        }
    }

    #[test]
    fn drift_laws() {
        let eps = 0.1;
        let m = 2.0;
        let recs: Vec<_> = (0..=4)
            .map(|k| {
                let t = 0.25 * k as f64;
                record(t, m, 1.0 + 2.0 * eps * t * m, 3.0 + 2.0 * eps * t.powi(3) / 3.0 * m, -1.0, 0.0)
            })
            .collect();
        let r = drift_check(&recs, eps).unwrap();
        assert!(r.energy.max_deviation < 1e-12);
        assert!(r.inertia.max_deviation < 1e-12);
        assert!((r.energy_dimensional.final_deviation - 0.5).abs() < 1e-14);
        // Cubic law: doubling t scales the increment by 8.
        let i1 = recs[2].inertia - recs[0].inertia;
        let i2 = recs[4].inertia - recs[0].inertia;
        assert!((i2 / i1 - 8.0).abs() < 1e-12);
        // ε = 0: deviations relative to the initial value.
        let flat: Vec<_> = (0..3).map(|k| record(k as f64, 1.0, 2.0, 0.0, -1.0, 0.0)).collect();
        assert_eq!(drift_check(&flat, 0.0).unwrap().energy.max_deviation, 0.0);
    }

    #[test]
    fn entropy_check_frozen() {
        let recs: Vec<_> = (0..3).map(|k| record(k as f64, 1.0, 1.0, 0.0, -0.7, 0.0)).collect();
        let r = entropy_inequality_check(&recs).unwrap();
        assert_eq!(r.max_slack, 0.0);
        assert!(drift_check(&[], 0.0).is_err());
    }

    #[test]
    fn test_pack_derivatives_match_differences() {
        let h = 1e-5;
        let x = [0.3, -0.2];
        let v = [0.4, 0.7];
        for tf in default_test_pack() {
            let c = tf.eval(&x, &v);
            for i in 0..2 {
                let mut vp = v;
                let mut vm = v;
                vp[i] += h;
                vm[i] -= h;
                let fd = (tf.eval(&x, &vp).value - tf.eval(&x, &vm).value) / (2.0 * h);
                assert!((fd - c.grad_v[i]).abs() < 1e-8);
                for j in 0..2 {
                    let fd2 = (tf.eval(&x, &vp).grad_v[j] - tf.eval(&x, &vm).grad_v[j]) / (2.0 * h);
                    assert!((fd2 - c.hess_v[i * 2 + j]).abs() < 1e-8);
                }
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fdx = (tf.eval(&xp, &v).value - tf.eval(&xm, &v).value) / (2.0 * h);
                assert!((fdx - c.grad_x[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_trajectory_residual() {
        let g = hom(8, 3.0);
        let traj: Vec<_> = (0..3).map(|k| DensityField::zeros(g.clone()).with_time(0.1 * k as f64)).collect();
        let r = weak_residual(&traj, None, 0.1, &default_test_pack()).unwrap();
        assert_eq!(r.max_relative, 0.0);
        assert!(weak_residual(&traj[..1], None, 0.1, &default_test_pack()).is_err());
    }

    #[test]
    fn heat_solution_residual_is_small() {
        // f = A/(1 + 4εt) exp(−|v|²/(1 + 4εt)) solves ∂_t f = εΔf in 2D.
        let eps = 0.2;
        let heat = |t: f64, v: &[f64]| {
            let s = 1.0 + 4.0 * eps * t;
            0.5 / s * (-(v[0] * v[0] + v[1] * v[1]) / s).exp()
        };
        let mut res = Vec::new();
        for steps in [20usize, 40] {
            let g = hom(48, 7.0);
            let traj: Vec<_> = (0..=steps)
                .map(|k| {
                    let t = 0.5 * k as f64 / steps as f64;
                    DensityField::from_fn(g.clone(), t, |_, v| heat(t, v)).unwrap()
                })
                .collect();
            let r = weak_residual(&traj, None, eps, &default_test_pack()).unwrap();
            res.push(r.max_relative);
        }
        assert!(res[0] < 5e-3, "{res:?}");
        assert!(res[1] < res[0], "{res:?}");
    }
}
