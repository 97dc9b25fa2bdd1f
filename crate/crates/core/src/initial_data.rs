//! Density fields, analytic initial data, regularization and Gaussian envelopes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collision_kernel::{bump, sphere_area};
use crate::error::{Error, Result};
use crate::phase_grid::{PhaseGrid, Topology};
use crate::quadrature::GaussLegendre;

/// Occupation numbers on a [`PhaseGrid`], stored x-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Arc<PhaseGrid>,
    samples: Vec<f64>,
    time: f64,
}

impl DensityField {
    /// Checks the sample count and the Pauli bound `0 ≤ f ≤ 1`.
    pub fn new(grid: Arc<PhaseGrid>, samples: Vec<f64>, time: f64) -> Result<Self> {
        grid.check_len(samples.len())?;
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::PauliViolation { index, value });
        }
        Ok(Self {
            grid,
            samples,
            time,
        })
    }

    pub fn from_fn<F>(grid: Arc<PhaseGrid>, time: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> f64,
    {
        let nv = grid.nv();
        let mut samples = Vec::with_capacity(grid.len());
        for ix in 0..grid.nx() {
            let x = grid.x_node(ix);
            for iv in 0..nv {
                samples.push(f(&x, grid.velocity().node(iv)));
            }
        }
        Self::new(grid, samples, time)
    }

    pub fn zeros(grid: Arc<PhaseGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            samples: vec![0.0; n],
            time: 0.0,
        }
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    /// Velocity block at spatial node `ix`.
    pub fn block(&self, ix: usize) -> &[f64] {
        let nv = self.grid.nv();
        &self.samples[ix * nv..(ix + 1) * nv]
    }

    pub fn mass(&self) -> f64 {
        self.samples.iter().sum::<f64>() * self.grid.quadrature_weight()
    }

    pub fn pauli_range(&self) -> (f64, f64) {
        self.samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Weighted L¹ distance `Σ |f − g| w(x, v) · quadrature_weight`.
    pub fn weighted_l1_distance<W>(&self, other: &DensityField, weight: W) -> Result<f64>
    where
        W: Fn(&[f64], &[f64]) -> f64 + Sync,
    {
        let diff: Vec<f64> = self
            .samples
            .iter()
            .zip(other.samples())
            .map(|(a, b)| (a - b).abs())
            .collect();
        if other.samples().len() != diff.len() || self.samples.len() != diff.len() {
            return Err(Error::ShapeMismatch {
                expected: self.samples.len(),
                found: other.samples().len(),
            });
        }
        self.grid.integrate_weighted(&diff, 0.0, |x, v, _| weight(x, v))
    }

    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        self.weighted_l1_distance(other, |_, _| 1.0)
    }
}

fn default_amplitude() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

/// `A · exp(−|v − u|²/T) · exp(−|x|²/σ²)`; the x factor is dropped in
/// homogeneous mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianParams {
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub drift: Vec<f64>,
    #[serde(default = "one")]
    pub x_width: f64,
}

impl Default for GaussianParams {
    fn default() -> Self {
        Self {
            amplitude: 0.5,
            temperature: 1.0,
            drift: Vec::new(),
            x_width: 1.0,
        }
    }
}

/// Sum of two Gaussians centred at `±separation·e₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleGaussianParams {
    #[serde(default = "quarter")]
    pub amplitude: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "one")]
    pub separation: f64,
    #[serde(default = "one")]
    pub x_width: f64,
}

fn quarter() -> f64 {
    0.25
}

/// `1/(1 + exp(a + b|v|² + c|x|²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FermiDiracParams {
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default)]
    pub c: f64,
}

/// `height / (1 + exp((|v| − radius)/edge))`, times the x Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauParams {
    #[serde(default = "point_nine")]
    pub height: f64,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "point_two")]
    pub edge: f64,
    #[serde(default = "one")]
    pub x_width: f64,
}

fn point_nine() -> f64 {
    0.9
}

fn point_two() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialFamily {
    Gaussian(GaussianParams),
    DoubleGaussian(DoubleGaussianParams),
    FermiDiracEquilibrium(FermiDiracParams),
    Plateau(PlateauParams),
}

fn x_factor(x: &[f64], width: f64, homogeneous: bool) -> f64 {
    if homogeneous {
        1.0
    } else {
        (-x.iter().map(|c| c * c).sum::<f64>() / (width * width)).exp()
    }
}

impl InitialFamily {
    pub fn name(&self) -> &'static str {
        match self {
            InitialFamily::Gaussian(_) => "gaussian",
            InitialFamily::DoubleGaussian(_) => "double-gaussian",
            InitialFamily::FermiDiracEquilibrium(_) => "fermi-dirac-equilibrium",
            InitialFamily::Plateau(_) => "plateau",
        }
    }

    /// Parses the parameter table of a named family.
    pub fn from_parts(name: &str, params: toml::Table) -> std::result::Result<Self, String> {
        let value = toml::Value::Table(params);
        let wrap = |e: toml::de::Error| e.message().to_string();
        match name {
            "gaussian" => value.try_into().map(InitialFamily::Gaussian).map_err(wrap),
            "double-gaussian" => value.try_into().map(InitialFamily::DoubleGaussian).map_err(wrap),
            "fermi-dirac-equilibrium" => value
                .try_into()
                .map(InitialFamily::FermiDiracEquilibrium)
                .map_err(wrap),
            "plateau" => value.try_into().map(InitialFamily::Plateau).map_err(wrap),
            other => Err(format!(
                "unknown family `{other}` (expected gaussian, double-gaussian, fermi-dirac-equilibrium or plateau)"
            )),
        }
    }

    /// Checks that the family stays inside [0, 1]. Returns the offending
    /// parameter name and reason.
    pub fn validate(&self, dim: usize) -> std::result::Result<(), (String, String)> {
        let bad = |f: &str, r: String| Err((f.to_string(), r));
        match self {
            InitialFamily::Gaussian(p) => {
                if !(0.0..=1.0).contains(&p.amplitude) {
                    return bad("amplitude", format!("{} is outside [0, 1]", p.amplitude));
                }
                if !(p.temperature > 0.0) {
                    return bad("temperature", "must be positive".into());
                }
                if !p.drift.is_empty() && p.drift.len() != dim {
                    return bad("drift", format!("needs {dim} components"));
                }
                if !(p.x_width > 0.0) {
                    return bad("x_width", "must be positive".into());
                }
            }
            InitialFamily::DoubleGaussian(p) => {
                if !(0.0..=0.5).contains(&p.amplitude) {
                    return bad("amplitude", format!("{} is outside [0, 0.5]", p.amplitude));
                }
                if !(p.temperature > 0.0) {
                    return bad("temperature", "must be positive".into());
                }
                if !(p.x_width > 0.0) {
                    return bad("x_width", "must be positive".into());
                }
            }
            InitialFamily::FermiDiracEquilibrium(p) => {
                if !(p.b > 0.0) {
                    return bad("b", "must be positive".into());
                }
                if p.c < 0.0 {
                    return bad("c", "must be non-negative".into());
                }
            }
            InitialFamily::Plateau(p) => {
                if !(0.0..=1.0).contains(&p.height) {
                    return bad("height", format!("{} is outside [0, 1]", p.height));
                }
                if !(p.radius > 0.0) || !(p.edge > 0.0) || !(p.x_width > 0.0) {
                    return bad("radius", "radius, edge and x_width must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64], v: &[f64], homogeneous: bool) -> f64 {
        let v2: f64 = v.iter().map(|c| c * c).sum();
        match self {
            InitialFamily::Gaussian(p) => {
                let d2: f64 = v
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (c - p.drift.get(k).copied().unwrap_or(0.0)).powi(2))
                    .sum();
                p.amplitude * (-d2 / p.temperature).exp() * x_factor(x, p.x_width, homogeneous)
            }
            InitialFamily::DoubleGaussian(p) => {
                let rest: f64 = v2 - v[0] * v[0];
                let g = |s: f64| (-((v[0] - s).powi(2) + rest) / p.temperature).exp();
                p.amplitude * (g(p.separation) + g(-p.separation)) * x_factor(x, p.x_width, homogeneous)
            }
            InitialFamily::FermiDiracEquilibrium(p) => {
                let x2: f64 = if homogeneous { 0.0 } else { x.iter().map(|c| c * c).sum() };
                1.0 / (1.0 + (p.a + p.b * v2 + p.c * x2).exp())
            }
            InitialFamily::Plateau(p) => {
                let r = v2.sqrt();
                p.height / (1.0 + ((r - p.radius) / p.edge).exp()) * x_factor(x, p.x_width, homogeneous)
            }
        }
    }

    pub fn sample(&self, grid: Arc<PhaseGrid>) -> Result<DensityField> {
        let homogeneous = grid.is_homogeneous();
        DensityField::from_fn(grid, 0.0, |x, v| self.evaluate(x, v, homogeneous))
    }
}

fn phase_radius_sq(x: &[f64], v: &[f64], homogeneous: bool) -> f64 {
    let v2: f64 = v.iter().map(|c| c * c).sum();
    if homogeneous {
        v2
    } else {
        v2 + x.iter().map(|c| c * c).sum::<f64>()
    }
}

/// Smooth plateau: 1 on radius n/2, 0 beyond n.
pub fn plateau_cutoff(radius: f64, n: f64) -> f64 {
    let t = (radius - 0.5 * n) / (0.5 * n);
    if t <= 0.0 {
        return 1.0;
    }
    if t >= 1.0 {
        return 0.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    1.0 - a / (a + b)
}

/// Discrete phase-space mollifier weights `(x offsets, v offsets, weight)`
/// with unit sum. In homogeneous mode the bump on ℝ^{2N} is marginalised
/// over x, which leaves a radial profile in v alone.
fn mollifier_stencil(grid: &PhaseGrid, n: u32) -> Vec<(Vec<isize>, Vec<isize>, f64)> {
    let dim = grid.dim();
    let radius = 1.0 / n as f64;
    let h = grid.velocity().spacing();
    let kv = (radius / h).floor() as isize;
    let v_offsets = offsets(dim, kv);
    let mut out = Vec::new();
    match grid.spatial() {
        None => {
            let q = GaussLegendre::new(32);
            for dv in v_offsets {
                let w2: f64 = dv.iter().map(|&o| (o as f64 * h).powi(2)).sum();
                if w2 >= radius * radius {
                    continue;
                }
                let reach = (radius * radius - w2).sqrt();
                let m = sphere_area(dim)
                    * q.integrate(0.0, reach, |r| {
                        r.powi(dim as i32 - 1) * bump((r * r + w2) / (radius * radius))
                    });
                out.push((vec![0; dim], dv, m));
            }
        }
        Some(s) => {
            let dx = s.spacing();
            let kx = (radius / dx).floor() as isize;
            for ox in offsets(dim, kx) {
                let x2: f64 = ox.iter().map(|&o| (o as f64 * dx).powi(2)).sum();
                for dv in &v_offsets {
                    let w2: f64 = dv.iter().map(|&o| (o as f64 * h).powi(2)).sum();
                    let b = bump((x2 + w2) / (radius * radius));
                    if b > 0.0 {
                        out.push((ox.clone(), dv.clone(), b));
                    }
                }
            }
        }
    }
    let total: f64 = out.iter().map(|e| e.2).sum();
    if total == 0.0 {
        return vec![(vec![0; dim], vec![0; dim], 1.0)];
    }
    out.iter_mut().for_each(|e| e.2 /= total);
    out
}

fn offsets(dim: usize, k: isize) -> Vec<Vec<isize>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::new();
        for o in &out {
            for d in -k..=k {
                let mut e = o.clone();
                e.push(d);
                next.push(e);
            }
        }
        out = next;
    }
    out
}

fn shifted(idx: &[usize], off: &[isize], m: usize, periodic: bool) -> Option<Vec<usize>> {
    idx.iter()
        .zip(off)
        .map(|(&i, &o)| {
            let j = i as isize + o;
            if periodic {
                Some(j.rem_euclid(m as isize) as usize)
            } else if j < 0 || j >= m as isize {
                None
            } else {
                Some(j as usize)
            }
        })
        .collect()
}

fn mollify(f0: &DensityField, n: u32) -> Vec<f64> {
    let grid = f0.grid();
    let stencil = mollifier_stencil(grid, n);
    if stencil.len() == 1 {
        return f0.samples().to_vec();
    }
    let vg = grid.velocity();
    let nv = grid.nv();
    let (px, periodic) = grid
        .spatial()
        .map_or((1, false), |s| (s.points_per_axis(), s.topology() == Topology::PeriodicTorus));
    let dim = grid.dim();
    let mut out = vec![0.0; grid.len()];
    for ix in 0..grid.nx() {
        let xi: Vec<usize> = match grid.spatial() {
            Some(s) => (0..dim).map(|k| s.axis_index(ix, k)).collect(),
            None => vec![0; dim],
        };
        for iv in 0..nv {
            let vi = vg.multi_index(iv);
            let mut acc = 0.0;
            for (ox, ov, w) in &stencil {
                let Some(xj) = shifted(&xi, ox, px, periodic) else { continue };
                let Some(vj) = shifted(&vi[..dim], ov, vg.points_per_axis(), false) else {
                    continue;
                };
                let jx = xj.iter().fold(0, |a, &j| a * px + j);
                acc += w * f0.samples()[jx * nv + vg.flat_index(&vj)];
            }
            out[ix * nv + iv] = acc;
        }
    }
    out
}

/// Regularized datum together with the measured constant
/// `Cₙ = max (f₀∗χⁿ)φⁿ / e^{−(|x|²+|v|²)}`.
#[derive(Debug, Clone)]
pub struct RegularizedDatum {
    pub field: DensityField,
    pub envelope_constant: f64,
}

pub fn regularize_with_constant(f0: &DensityField, n: u32) -> Result<RegularizedDatum> {
    if n == 0 {
        return Err(Error::param("kernel.n", "regularization index must be positive"));
    }
    if let Some((index, &value)) = f0
        .samples()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::PauliViolation { index, value });
    }
    let grid = f0.grid_arc().clone();
    let homogeneous = grid.is_homogeneous();
    let nf = n as f64;
    let smooth = mollify(f0, n);
    let nv = grid.nv();
    let mut out = Vec::with_capacity(grid.len());
    let mut c_n = 0.0f64;
    for ix in 0..grid.nx() {
        let x = grid.x_node(ix);
        for iv in 0..nv {
            let v = grid.velocity().node(iv);
            let r2 = phase_radius_sq(&x, v, homogeneous);
            let gauss = (-r2).exp();
            let u = smooth[ix * nv + iv] * plateau_cutoff(r2.sqrt(), nf);
            if gauss > 0.0 {
                c_n = c_n.max(u / gauss);
            }
            out.push((gauss / nf + u) / (1.0 + 2.0 / nf));
        }
    }
    let field = DensityField::new(grid, out, f0.time())?;
    Ok(RegularizedDatum {
        field,
        envelope_constant: c_n,
    })
}

pub fn regularize_initial_datum(f0: &DensityField, n: u32) -> Result<DensityField> {
    regularize_with_constant(f0, n).map(|r| r.field)
}

/// Two-sided Gaussian envelope `C₁e^{−αr²} ≤ f ≤ C₂e^{−αr²}/(1 + C₂e^{−αr²})`
/// with `r² = |x|² + |v|²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSpec {
    pub alpha: f64,
    pub c_lower: f64,
    pub c_upper: f64,
}

impl EnvelopeSpec {
    pub fn lower(&self, r2: f64) -> f64 {
        self.c_lower * (-self.alpha * r2).exp()
    }

    pub fn upper(&self, r2: f64) -> f64 {
        let e = self.c_upper * (-self.alpha * r2).exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub lower_violations: usize,
    pub upper_violations: usize,
    /// min over nodes of min(f − L, U − f); negative exactly when violated
    /// beyond the relative slack.
    pub worst_margin: f64,
}

impl EnvelopeReport {
    pub fn passes(&self) -> bool {
        self.lower_violations == 0 && self.upper_violations == 0
    }
}

const ENVELOPE_SLACK: f64 = 1e-12;

pub fn envelope_check(f: &DensityField, env: &EnvelopeSpec) -> EnvelopeReport {
    let grid = f.grid();
    let homogeneous = grid.is_homogeneous();
    let nv = grid.nv();
    let mut report = EnvelopeReport {
        lower_violations: 0,
        upper_violations: 0,
        worst_margin: f64::INFINITY,
    };
    for ix in 0..grid.nx() {
        let x = grid.x_node(ix);
        for iv in 0..nv {
            let r2 = phase_radius_sq(&x, grid.velocity().node(iv), homogeneous);
            let val = f.samples()[ix * nv + iv];
            let lo = env.lower(r2);
            let hi = env.upper(r2);
            if val < lo * (1.0 - ENVELOPE_SLACK) {
                report.lower_violations += 1;
            }
            if val > hi * (1.0 + ENVELOPE_SLACK) {
                report.upper_violations += 1;
            }
            report.worst_margin = report.worst_margin.min((val - lo).min(hi - val));
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub spec: EnvelopeSpec,
    /// Nodes with f = 0 or f = 1, left out of the regression.
    pub excluded: usize,
    pub lower_inflated: bool,
    pub upper_inflated: bool,
}

/// Least-squares envelope witnesses. Each side is widened by 1.05 around the
/// extreme node only when the regression constant alone fails on the input.
pub fn fit_envelope(f: &DensityField) -> Result<EnvelopeFit> {
    let grid = f.grid();
    let homogeneous = grid.is_homogeneous();
    let nv = grid.nv();
    let mut pts = Vec::new();
    let mut excluded = 0;
    for ix in 0..grid.nx() {
        let x = grid.x_node(ix);
        for iv in 0..nv {
            let val = f.samples()[ix * nv + iv];
            if val <= 0.0 || val >= 1.0 {
                excluded += 1;
                continue;
            }
            pts.push((phase_radius_sq(&x, grid.velocity().node(iv), homogeneous), val));
        }
    }
    if pts.len() < 2 {
        return Err(Error::DegenerateFit("fewer than two interior nodes".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1.ln() - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1.ln() - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateFit("zero-variance regression".into()));
    }
    let alpha = -sxy / sxx;
    if !(alpha > 0.0) {
        return Err(Error::DegenerateFit(format!("fitted decay rate {alpha} is not positive")));
    }
    let c_lower = (my + alpha * mx).exp();
    let logit_mean = pts
        .iter()
        .map(|&(r2, v)| (v / (1.0 - v)).ln() + alpha * r2)
        .sum::<f64>()
        / n;
    let mut spec = EnvelopeSpec {
        alpha,
        c_lower,
        c_upper: logit_mean.exp(),
    };
    let raw = envelope_check(f, &spec);
    let mut lower_inflated = false;
    let mut upper_inflated = false;
    if raw.lower_violations > 0 {
        let m = pts
            .iter()
            .map(|&(r2, v)| v * (alpha * r2).exp())
            .fold(f64::INFINITY, f64::min);
        let zero_nodes = f.samples().iter().any(|&v| v <= 0.0);
        if zero_nodes {
            return Err(Error::DegenerateFit("density vanishes at some node".into()));
        }
        spec.c_lower = m / 1.05;
        lower_inflated = true;
    }
    if raw.upper_violations > 0 {
        let m = pts
            .iter()
            .map(|&(r2, v)| v / (1.0 - v) * (alpha * r2).exp())
            .fold(0.0, f64::max);
        if f.samples().iter().any(|&v| v >= 1.0) {
            return Err(Error::DegenerateFit("density saturates at some node".into()));
        }
        spec.c_upper = m * 1.05;
        upper_inflated = true;
    }
    Ok(EnvelopeFit {
        spec,
        excluded,
        lower_inflated,
        upper_inflated,
    })
}
