//! TOML run configuration.
//!
//! ```toml
//! mode = "homogeneous"          # or "inhomogeneous"
//!
//! [grid]
//! dim = 2
//! v_max = 6.0
//! v_points = 48
//! # [grid.spatial] extent = 6.283185307179586, points = 16, topology = "periodic-torus"
//!
//! [kernel]
//! gamma = -3.0
//! n = 8
//!
//! [solver]
//! epsilon = 0.05
//! dt = 1e-3
//! t_end = 0.5
//!
//! [initial]
//! family = "gaussian"
//! params = { amplitude = 0.5 }
//!
//! [output]
//! directory = "lfd-out"
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collision_kernel::{CrossSectionSpec, KernelConfig, KernelTable};
use crate::diagnostics::GradientRule;
use crate::error::{Error, Result};
use crate::evolution::SolverConfig;
use crate::initial_data::InitialFamily;
use crate::phase_grid::{build_phase_grid, GridConfig, PhaseGrid, SpatialConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Homogeneous,
    Inhomogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConfig {
    pub family: InitialFamily,
    pub regularize: bool,
    /// Start from this snapshot instead of sampling the family.
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub snapshot_stride: usize,
    pub diagnostics_stride: usize,
    pub dissipation_stride: usize,
    pub gradient_rule: GradientRule,
    /// The weighted gradient norm uses `α = fraction · α_fit`, `α_fit` the
    /// envelope exponent fitted to the initial datum.
    pub gradient_alpha_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub grid: GridConfig,
    pub gamma: f64,
    pub n: u32,
    pub solver: SolverConfig,
    pub initial: InitialConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    mode: Mode,
    #[serde(default)]
    grid: RawGrid,
    #[serde(default)]
    kernel: RawKernel,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    initial: RawInitial,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawGrid {
    dim: usize,
    v_max: f64,
    v_points: usize,
    spatial: Option<RawSpatial>,
}

impl Default for RawGrid {
    fn default() -> Self {
        Self {
            dim: 2,
            v_max: 6.0,
            v_points: 48,
            spatial: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpatial {
    extent: f64,
    points: usize,
    #[serde(default = "default_topology")]
    topology: crate::phase_grid::Topology,
}

fn default_topology() -> crate::phase_grid::Topology {
    crate::phase_grid::Topology::PeriodicTorus
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawKernel {
    gamma: f64,
    n: u32,
}

impl Default for RawKernel {
    fn default() -> Self {
        Self { gamma: -3.0, n: 8 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawInitial {
    family: String,
    params: toml::Table,
    regularize: bool,
    snapshot: Option<PathBuf>,
}

impl Default for RawInitial {
    fn default() -> Self {
        Self {
            family: "gaussian".into(),
            params: toml::Table::new(),
            regularize: true,
            snapshot: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawOutput {
    directory: PathBuf,
    snapshot_stride: usize,
    diagnostics_stride: usize,
    dissipation_stride: usize,
    gradient_rule: GradientRule,
    gradient_alpha_fraction: f64,
}

impl Default for RawOutput {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("lfd-out"),
            snapshot_stride: 100,
            diagnostics_stride: 1,
            dissipation_stride: 5,
            gradient_rule: GradientRule::Chain,
            gradient_alpha_fraction: 0.5,
        }
    }
}

fn grid_error(e: Error) -> Error {
    match e {
        Error::InvalidGrid(reason) => Error::param("grid", reason),
        other => other,
    }
}

/// Parses and validates a configuration document. Syntax errors carry the
/// line and column; validation errors carry the field path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;

    let spatial = raw.grid.spatial.map(|s| SpatialConfig {
        extent: s.extent,
        points: s.points,
        topology: s.topology,
    });
    match (raw.mode, &spatial) {
        (Mode::Inhomogeneous, None) => {
            return Err(Error::param("grid.spatial", "required in inhomogeneous mode"));
        }
        (Mode::Homogeneous, Some(_)) => {
            return Err(Error::param("grid.spatial", "not allowed in homogeneous mode"));
        }
        _ => {}
    }
    let grid = GridConfig {
        dim: raw.grid.dim,
        v_max: raw.grid.v_max,
        v_points: raw.grid.v_points,
        spatial,
    };
    build_phase_grid(&grid).map_err(grid_error)?;
    CrossSectionSpec::new(raw.kernel.gamma, grid.dim)?;
    KernelConfig::new(raw.kernel.n)?;

    let mut solver = raw.solver;
    solver.kernel_index = raw.kernel.n;
    solver.validate()?;
    for (k, rung) in solver.viscosity_ladder.iter().enumerate() {
        if !(rung.epsilon >= 0.0) || rung.n == 0 {
            return Err(Error::param(
                format!("solver.viscosity_ladder[{k}]"),
                "epsilon must be non-negative and n positive",
            ));
        }
    }

    let family = InitialFamily::from_parts(&raw.initial.family, raw.initial.params)
        .map_err(|reason| Error::param("initial.params", reason))?;
    family
        .validate(grid.dim)
        .map_err(|(field, reason)| Error::param(format!("initial.params.{field}"), reason))?;

    let out = raw.output;
    for (name, v) in [
        ("output.snapshot_stride", out.snapshot_stride),
        ("output.diagnostics_stride", out.diagnostics_stride),
        ("output.dissipation_stride", out.dissipation_stride),
    ] {
        if v == 0 {
            return Err(Error::param(name, "must be at least 1"));
        }
    }
    // Resuming from a snapshot needs a settled dissipation anchor and a CSV
    // row at the snapshot step.
    if !out.snapshot_stride.is_multiple_of(out.dissipation_stride) || !out.snapshot_stride.is_multiple_of(out.diagnostics_stride) {
        return Err(Error::param(
            "output.snapshot_stride",
            "must be a multiple of dissipation_stride and diagnostics_stride",
        ));
    }
    if !(out.gradient_alpha_fraction > 0.0 && out.gradient_alpha_fraction <= 1.0) {
        return Err(Error::param("output.gradient_alpha_fraction", "must lie in (0, 1]"));
    }

    Ok(RunConfig {
        mode: raw.mode,
        grid,
        gamma: raw.kernel.gamma,
        n: raw.kernel.n,
        solver,
        initial: InitialConfig {
            family,
            regularize: raw.initial.regularize,
            snapshot: raw.initial.snapshot,
        },
        output: OutputConfig {
            directory: out.directory,
            snapshot_stride: out.snapshot_stride,
            diagnostics_stride: out.diagnostics_stride,
            dissipation_stride: out.dissipation_stride,
            gradient_rule: out.gradient_rule,
            gradient_alpha_fraction: out.gradient_alpha_fraction,
        },
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

impl RunConfig {
    pub fn cross_section(&self) -> Result<CrossSectionSpec> {
        CrossSectionSpec::new(self.gamma, self.grid.dim)
    }

    pub fn kernel_config(&self) -> Result<KernelConfig> {
        KernelConfig::new(self.n)
    }

    pub fn build_grid(&self) -> Result<Arc<PhaseGrid>> {
        build_phase_grid(&self.grid).map(Arc::new).map_err(grid_error)
    }

    pub fn build_table(&self, grid: &PhaseGrid) -> Result<Arc<KernelTable>> {
        KernelTable::build(grid.velocity(), self.cross_section()?, self.kernel_config()?).map(Arc::new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{OperatorForm, Splitting};
    use crate::phase_grid::Topology;

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.mode, Mode::Homogeneous);
        assert_eq!((c.grid.dim, c.grid.v_max, c.grid.v_points), (2, 6.0, 48));
        assert_eq!((c.gamma, c.n), (-3.0, 8));
        assert_eq!(c.solver.epsilon, 0.05);
        assert_eq!(c.solver.dt, 1e-3);
        assert_eq!(c.solver.t_end, 0.5);
        assert_eq!(c.solver.kernel_index, 8);
        assert_eq!(c.solver.splitting, Splitting::Strang);
        assert_eq!(c.solver.operator, OperatorForm::Entropic);
        assert_eq!(c.initial.family.name(), "gaussian");
        assert!(c.initial.regularize);
        assert_eq!(c.output.snapshot_stride, 100);
        assert_eq!(c.output.dissipation_stride, 5);
    }

    #[test]
    fn inhomogeneous_document() {
        let c = parse_config(
            r#"
mode = "inhomogeneous"
[grid]
v_points = 32
[grid.spatial]
extent = 6.0
points = 16
[kernel]
n = 4
[solver]
transport = "spectral"
epsilon = 0.1
"#,
        )
        .unwrap();
        let s = c.grid.spatial.as_ref().unwrap();
        assert_eq!(s.topology, Topology::PeriodicTorus);
        assert_eq!(s.points, 16);
        assert_eq!(c.solver.kernel_index, 4);
        assert_eq!(c.build_grid().unwrap().nx(), 256);
    }

    #[test]
    fn rejects_positive_gamma() {
        let e = parse_config("[kernel]\ngamma = 1.0\n").unwrap_err();
        assert!(matches!(e, Error::InvalidParameter { ref field, .. } if field == "kernel.gamma"), "{e}");
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config("[solver]\nepsilonn = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("epsilonn"), "{e}");
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn syntax_error_has_line() {
        let e = parse_config("[grid]\ndim = 2\nv_max = = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
    }

    #[test]
    fn field_paths() {
        let cases = [
            ("[grid]\nv_points = 3\n", "grid"),
            ("[solver]\ndt = -1.0\n", "solver.dt"),
            ("[initial]\nparams = { amplitude = 2.0 }\n", "initial.params.amplitude"),
            ("[initial]\nfamily = \"boltzmann\"\n", "initial.params"),
            ("[output]\nsnapshot_stride = 7\n", "output.snapshot_stride"),
            ("mode = \"inhomogeneous\"\n", "grid.spatial"),
        ];
        for (doc, path) in cases {
            match parse_config(doc) {
                Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, path, "{doc}"),
                other => panic!("{doc}: {other:?}"),
            }
        }
    }
}
