//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use lfd_core::run_io::criteria::oracle_field;
use lfd_core::{CrossSectionSpec, DensityField, KernelConfig, KernelTable, PhaseGrid, VelocityGrid};

pub struct Fixture {
    pub grid: Arc<PhaseGrid>,
    pub table: Arc<KernelTable>,
    pub field: DensityField,
}

/// Homogeneous 2-D Coulomb setup on an `points²` lattice with `n = 8`.
pub fn fixture(points: usize) -> Fixture {
    let vg = VelocityGrid::new(2, 6.0, points).expect("grid");
    let table = KernelTable::build(&vg, CrossSectionSpec::coulomb(2), KernelConfig::new(8).expect("n")).expect("table");
    let grid = Arc::new(PhaseGrid::homogeneous(vg));
    let field = oracle_field(grid.clone(), 0.3).expect("field");
    Fixture {
        grid,
        table: Arc::new(table),
        field,
    }
}
