//! Truncated uniform lattices in velocity and space.
//!
//! Velocity nodes are enumerated lexicographically with the last axis running
//! fastest: node `i` has axis indices `(i / M^{N-1}) % M, ..., i % M`. Phase
//! samples are stored x-major, `x_index * nv + v_index`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    PeriodicTorus,
    TruncatedBox,
}

impl Topology {
    pub(crate) fn code(self) -> u32 {
        match self {
            Topology::PeriodicTorus => 0,
            Topology::TruncatedBox => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Topology::PeriodicTorus),
            1 => Some(Topology::TruncatedBox),
            _ => None,
        }
    }
}

/// Uniform tensor lattice on `[-V, V]^N`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    dim: usize,
    half_width: f64,
    points: usize,
    spacing: f64,
    axis: Vec<f64>,
    nodes: Vec<f64>,
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::InvalidGrid(format!("dimension must be 2 or 3, got {dim}")))
    }
}

fn node_table(dim: usize, axis: &[f64]) -> Vec<f64> {
    let m = axis.len();
    let count = m.pow(dim as u32);
    let mut nodes = Vec::with_capacity(count * dim);
    for i in 0..count {
        let mut rem = i;
        let mut idx = [0usize; 3];
        for k in (0..dim).rev() {
            idx[k] = rem % m;
            rem /= m;
        }
        nodes.extend(idx[..dim].iter().map(|&j| axis[j]));
    }
    nodes
}

impl VelocityGrid {
    /// Accepts `M >= 3` so the smallest textbook lattices can be built directly;
    /// [`build_phase_grid`] enforces the solver minimum of four points.
    pub fn new(dim: usize, half_width: f64, points: usize) -> Result<Self> {
        check_dim(dim)?;
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "velocity half-width must be positive, got {half_width}"
            )));
        }
        if points < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 velocity points per axis, got {points}"
            )));
        }
        let spacing = 2.0 * half_width / (points - 1) as f64;
        // Mirror the upper half from the lower half so the lattice is exactly
        // symmetric in floating point.
        let mut axis = vec![0.0; points];
        for j in 0..points {
            let mirror = points - 1 - j;
            axis[j] = if j <= mirror {
                -half_width + j as f64 * spacing
            } else {
                -axis[mirror]
            };
        }
        if points % 2 == 1 {
            axis[points / 2] = 0.0;
        }
        let nodes = node_table(dim, &axis);
        Ok(Self {
            dim,
            half_width,
            points,
            spacing,
            axis,
            nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Stride of axis `k` in the flat enumeration.
    pub fn stride(&self, k: usize) -> usize {
        self.points.pow((self.dim - 1 - k) as u32)
    }

    pub fn axis_index(&self, i: usize, k: usize) -> usize {
        (i / self.stride(k)) % self.points
    }

    pub fn multi_index(&self, i: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for (k, slot) in idx.iter_mut().enumerate().take(self.dim) {
            *slot = self.axis_index(i, k);
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &j| acc * self.points + j)
    }

    /// Index of the node `-v`.
    pub fn mirror(&self, i: usize) -> usize {
        self.len() - 1 - i
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    dim: usize,
    extent: f64,
    points: usize,
    topology: Topology,
    spacing: f64,
    axis: Vec<f64>,
    nodes: Vec<f64>,
}

impl SpatialGrid {
    /// Periodic grids place `P` nodes at `-L/2 + i L/P`, so the right endpoint
    /// is the image of node 0. Truncated boxes include both endpoints.
    pub fn new(dim: usize, extent: f64, points: usize, topology: Topology) -> Result<Self> {
        check_dim(dim)?;
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "spatial extent must be positive, got {extent}"
            )));
        }
        let min_points = match topology {
            Topology::PeriodicTorus => 1,
            Topology::TruncatedBox => 2,
        };
        if points < min_points {
            return Err(Error::InvalidGrid(format!(
                "need at least {min_points} spatial points per axis, got {points}"
            )));
        }
        let spacing = match topology {
            Topology::PeriodicTorus => extent / points as f64,
            Topology::TruncatedBox => extent / (points - 1) as f64,
        };
        let axis: Vec<f64> = (0..points)
            .map(|i| -0.5 * extent + i as f64 * spacing)
            .collect();
        let nodes = node_table(dim, &axis);
        Ok(Self {
            dim,
            extent,
            points,
            topology,
            spacing,
            axis,
            nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn stride(&self, k: usize) -> usize {
        self.points.pow((self.dim - 1 - k) as u32)
    }

    pub fn axis_index(&self, i: usize, k: usize) -> usize {
        (i / self.stride(k)) % self.points
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }
}

/// Phase-space lattice. `spatial == None` is the homogeneous mode where fields
/// carry no x dependence and store exactly one velocity block.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    spatial: Option<SpatialGrid>,
    velocity: VelocityGrid,
    quadrature_weight: f64,
}

impl PhaseGrid {
    pub fn new(spatial: Option<SpatialGrid>, velocity: VelocityGrid) -> Result<Self> {
        if let Some(s) = &spatial {
            if s.dim() != velocity.dim() {
                return Err(Error::InvalidGrid(format!(
                    "spatial dimension {} differs from velocity dimension {}",
                    s.dim(),
                    velocity.dim()
                )));
            }
        }
        let quadrature_weight =
            velocity.cell_volume() * spatial.as_ref().map_or(1.0, |s| s.cell_volume());
        Ok(Self {
            spatial,
            velocity,
            quadrature_weight,
        })
    }

    pub fn homogeneous(velocity: VelocityGrid) -> Self {
        let quadrature_weight = velocity.cell_volume();
        Self {
            spatial: None,
            velocity,
            quadrature_weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.velocity.dim()
    }

    pub fn velocity(&self) -> &VelocityGrid {
        &self.velocity
    }

    pub fn spatial(&self) -> Option<&SpatialGrid> {
        self.spatial.as_ref()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.spatial.is_none()
    }

    pub fn quadrature_weight(&self) -> f64 {
        self.quadrature_weight
    }

    pub fn nx(&self) -> usize {
        self.spatial.as_ref().map_or(1, |s| s.len())
    }

    pub fn nv(&self) -> usize {
        self.velocity.len()
    }

    pub fn len(&self) -> usize {
        self.nx() * self.nv()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Spatial coordinates of block `ix`; the origin in homogeneous mode.
    pub fn x_node(&self, ix: usize) -> Vec<f64> {
        match &self.spatial {
            Some(s) => s.node(ix).to_vec(),
            None => vec![0.0; self.dim()],
        }
    }

    /// Σ field · w(x, v, t) · quadrature_weight.
    pub fn integrate_weighted<W>(&self, field: &[f64], t: f64, weight: W) -> Result<f64>
    where
        W: Fn(&[f64], &[f64], f64) -> f64 + Sync,
    {
        self.check_len(field.len())?;
        let nv = self.nv();
        let sum: f64 = (0..self.nx())
            .into_par_iter()
            .map(|ix| {
                let x = self.x_node(ix);
                let block = &field[ix * nv..(ix + 1) * nv];
                block
                    .iter()
                    .enumerate()
                    .map(|(iv, &f)| f * weight(&x, self.velocity.node(iv), t))
                    .sum::<f64>()
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        Ok(sum * self.quadrature_weight)
    }

    pub fn integrate(&self, field: &[f64]) -> Result<f64> {
        self.check_len(field.len())?;
        Ok(field.iter().sum::<f64>() * self.quadrature_weight)
    }

    pub(crate) fn check_len(&self, found: usize) -> Result<()> {
        if found == self.len() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.len(),
                found,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub extent: f64,
    pub points: usize,
    pub topology: Topology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dim: usize,
    pub v_max: f64,
    pub v_points: usize,
    pub spatial: Option<SpatialConfig>,
}

pub fn build_phase_grid(config: &GridConfig) -> Result<PhaseGrid> {
    if config.v_points < 4 {
        return Err(Error::InvalidGrid(format!(
            "need at least 4 velocity points per axis, got {}",
            config.v_points
        )));
    }
    let velocity = VelocityGrid::new(config.dim, config.v_max, config.v_points)?;
    let spatial = match &config.spatial {
        Some(s) => Some(SpatialGrid::new(config.dim, s.extent, s.points, s.topology)?),
        None => None,
    };
    PhaseGrid::new(spatial, velocity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_lattice() {
        let g = VelocityGrid::new(2, 1.0, 3).unwrap();
        assert_eq!(g.spacing(), 1.0);
        assert_eq!(g.axis(), &[-1.0, 0.0, 1.0]);
        assert_eq!(g.node(0), &[-1.0, -1.0]);
        assert_eq!(g.node(1), &[-1.0, 0.0]);
        assert_eq!(g.node(8), &[1.0, 1.0]);
        let pg = PhaseGrid::homogeneous(g);
        assert_eq!(pg.integrate(&[1.0; 9]).unwrap(), 9.0);
        assert_eq!(pg.integrate(&[0.0; 9]).unwrap(), 0.0);
    }

    #[test]
    fn spacing_quarter() {
        let g = VelocityGrid::new(2, 6.0, 49).unwrap();
        assert_eq!(g.spacing(), 0.25);
        assert_eq!(g.spacing() * 48.0, 12.0);
    }

    #[test]
    fn mirror_is_negation() {
        for &(dim, m) in &[(2, 4), (2, 7), (3, 5), (3, 6)] {
            let g = VelocityGrid::new(dim, 2.5, m).unwrap();
            for i in 0..g.len() {
                let j = g.mirror(i);
                for k in 0..dim {
                    assert_eq!(g.node(j)[k], -g.node(i)[k]);
                }
            }
        }
    }

    #[test]
    fn build_rejects_bad_config() {
        let mut cfg = GridConfig {
            dim: 2,
            v_max: 1.0,
            v_points: 3,
            spatial: None,
        };
        assert!(build_phase_grid(&cfg).is_err());
        cfg.v_points = 4;
        assert!(build_phase_grid(&cfg).is_ok());
        cfg.dim = 4;
        assert!(build_phase_grid(&cfg).is_err());
        cfg.dim = 2;
        cfg.v_max = 0.0;
        assert!(build_phase_grid(&cfg).is_err());
        cfg.v_max = 1.0;
        cfg.spatial = Some(SpatialConfig {
            extent: -1.0,
            points: 4,
            topology: Topology::PeriodicTorus,
        });
        assert!(build_phase_grid(&cfg).is_err());
    }

    #[test]
    fn torus_has_no_duplicate_endpoint() {
        let s = SpatialGrid::new(2, 8.0, 16, Topology::PeriodicTorus).unwrap();
        assert_eq!(s.spacing(), 0.5);
        assert_eq!(s.axis()[0], -4.0);
        assert_eq!(*s.axis().last().unwrap(), 3.5);
        let b = SpatialGrid::new(2, 8.0, 17, Topology::TruncatedBox).unwrap();
        assert_eq!(*b.axis().last().unwrap(), 4.0);
    }

    #[test]
    fn shape_mismatch() {
        let pg = PhaseGrid::homogeneous(VelocityGrid::new(2, 1.0, 4).unwrap());
        assert!(matches!(
            pg.integrate(&[1.0; 3]),
            Err(Error::ShapeMismatch { expected: 16, found: 3 })
        ));
    }
}
