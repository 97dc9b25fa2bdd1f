//! Landau–Fermi–Dirac phase-space solver: regularized Coulomb kernels,
//! nonlocal mean-field coefficients, an implicit Picard time stepper with
//! free transport, and the diagnostics that track the conserved and
//! dissipated quantities.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod collision_kernel;
pub mod convolution;
pub mod diagnostics;
pub mod error;
pub mod evolution;
pub mod initial_data;
pub mod linalg;
pub mod mean_field;
pub mod phase_grid;
pub mod quadrature;
pub mod run_io;
pub mod stencil;

pub use collision_kernel::{CrossSectionSpec, KernelConfig, KernelTable, RegularizedKernel};
pub use convolution::ConvolutionMethod;
pub use diagnostics::{DiagnosticsRecord, GradientRule, Recorder, RecorderConfig};
pub use error::{Error, Result};
pub use evolution::{OperatorForm, Solver, SolverConfig, Splitting, StepReport, TransportScheme};
pub use initial_data::{DensityField, EnvelopeSpec, InitialFamily};
pub use mean_field::MeanField;
pub use phase_grid::{PhaseGrid, SpatialGrid, Topology, VelocityGrid};
pub use run_io::{parse_config, RunConfig};
