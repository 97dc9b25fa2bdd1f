//! Binary snapshots.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `LFDSNAP\0` |
//! | 4×6   | version, dim, v_points, x_points (0 = homogeneous), topology, reserved |
//! | 8×4   | v_max, x_extent, t, ε |
//! | 8     | n (u64) |
//! | 8     | γ |
//! | 8     | step (u64) |
//! | 8     | payload length in samples (u64) |
//! | 32    | SHA-256 of every preceding byte and the payload |
//! | 8×len | samples in x-major, velocity-minor node order |

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::initial_data::DensityField;
use crate::phase_grid::{PhaseGrid, SpatialGrid, Topology, VelocityGrid};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"LFDSNAP\0";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 6 + 8 * 4 + 8 + 8 + 8 + 8;
const HOMOGENEOUS_TOPOLOGY: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub version: u32,
    pub dim: usize,
    pub v_points: usize,
    pub x_points: usize,
    pub topology: Option<Topology>,
    pub v_max: f64,
    pub x_extent: f64,
    pub time: f64,
    pub epsilon: f64,
    pub n: u32,
    pub gamma: f64,
    pub step: u64,
    pub samples: usize,
}

impl SnapshotHeader {
    /// Grid described by the header.
    pub fn grid(&self) -> Result<PhaseGrid> {
        let v = VelocityGrid::new(self.dim, self.v_max, self.v_points)?;
        match self.topology {
            None => Ok(PhaseGrid::homogeneous(v)),
            Some(t) => PhaseGrid::new(Some(SpatialGrid::new(self.dim, self.x_extent, self.x_points, t)?), v),
        }
    }

    fn matches(&self, grid: &PhaseGrid) -> bool {
        let v = grid.velocity();
        let spatial_ok = match (grid.spatial(), self.topology) {
            (None, None) => true,
            (Some(s), Some(t)) => s.topology() == t && s.points_per_axis() == self.x_points && s.extent() == self.x_extent,
            _ => false,
        };
        spatial_ok && v.dim() == self.dim && v.points_per_axis() == self.v_points && v.half_width() == self.v_max
    }
}

/// Run metadata stored next to the samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub epsilon: f64,
    pub n: u32,
    pub gamma: f64,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub header: SnapshotHeader,
    pub samples: Vec<f64>,
}

impl Snapshot {
    /// Density on `grid`, which must match the header.
    pub fn into_field(self, grid: Arc<PhaseGrid>) -> Result<DensityField> {
        if !self.header.matches(&grid) {
            return Err(Error::InvalidGrid(format!(
                "snapshot grid (dim {}, {} velocity points, {} spatial points) does not match the configured grid",
                self.header.dim, self.header.v_points, self.header.x_points
            )));
        }
        DensityField::new(grid, self.samples, self.header.time)
    }

    /// Density on the grid described by the header.
    pub fn field(self) -> Result<DensityField> {
        let grid = Arc::new(self.header.grid()?);
        self.into_field(grid)
    }
}

fn encode(f: &DensityField, meta: &SnapshotMeta) -> Vec<u8> {
    let grid = f.grid();
    let v = grid.velocity();
    let (x_points, topology, extent) = match grid.spatial() {
        Some(s) => (s.points_per_axis() as u32, s.topology().code(), s.extent()),
        None => (0, HOMOGENEOUS_TOPOLOGY, 0.0),
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 32 + 8 * f.samples().len());
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    for word in [SNAPSHOT_VERSION, v.dim() as u32, v.points_per_axis() as u32, x_points, topology, 0] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for x in [v.half_width(), extent, f.time(), meta.epsilon] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&(meta.n as u64).to_le_bytes());
    buf.extend_from_slice(&meta.gamma.to_le_bytes());
    buf.extend_from_slice(&meta.step.to_le_bytes());
    buf.extend_from_slice(&(f.samples().len() as u64).to_le_bytes());
    debug_assert_eq!(buf.len(), HEADER_LEN);
    let mut payload = Vec::with_capacity(8 * f.samples().len());
    for s in f.samples() {
        payload.extend_from_slice(&s.to_le_bytes());
    }
    let mut hasher = Sha256::new();
    hasher.update(&buf);
    hasher.update(&payload);
    buf.extend_from_slice(&hasher.finalize());
    buf.extend_from_slice(&payload);
    buf
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_snapshot(f: &DensityField, meta: &SnapshotMeta, path: &Path) -> Result<()> {
    let bytes = encode(f, meta);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const K: usize>(&mut self) -> Result<[u8; K]> {
        let end = self.pos + K;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::MalformedSnapshot("truncated header".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<8>()? != SNAPSHOT_MAGIC {
        return Err(Error::MalformedSnapshot("bad magic".into()));
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::SnapshotVersion(version));
    }
    let dim = r.u32()? as usize;
    let v_points = r.u32()? as usize;
    let x_points = r.u32()? as usize;
    let topo_code = r.u32()?;
    let _reserved = r.u32()?;
    let topology = if topo_code == HOMOGENEOUS_TOPOLOGY {
        None
    } else {
        Some(
            Topology::from_code(topo_code)
                .ok_or_else(|| Error::MalformedSnapshot(format!("unknown topology code {topo_code}")))?,
        )
    };
    let v_max = r.f64()?;
    let x_extent = r.f64()?;
    let time = r.f64()?;
    let epsilon = r.f64()?;
    let n = r.u64()? as u32;
    let gamma = r.f64()?;
    let step = r.u64()?;
    let len = r.u64()? as usize;
    let checksum = r.take::<32>()?;
    let payload = &bytes[r.pos..];
    if payload.len() != len.checked_mul(8).ok_or_else(|| Error::MalformedSnapshot("absurd length".into()))? {
        return Err(Error::MalformedSnapshot(format!(
            "payload holds {} bytes, header promises {} samples",
            payload.len(),
            len
        )));
    }
    let mut hasher = Sha256::new();
    hasher.update(&bytes[..HEADER_LEN]);
    hasher.update(payload);
    if hasher.finalize().as_slice() != checksum {
        return Err(Error::ChecksumMismatch);
    }
    let samples = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
        .collect();
    Ok(Snapshot {
        header: SnapshotHeader {
            version,
            dim,
            v_points,
            x_points,
            topology,
            v_max,
            x_extent,
            time,
            epsilon,
            n,
            gamma,
            step,
            samples: len,
        },
        samples,
    })
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    decode_snapshot(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: Arc<PhaseGrid>, seed: u64) -> DensityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..grid.len()).map(|_| rng.gen::<f64>()).collect();
        DensityField::new(grid, s, 0.125).unwrap()
    }

    fn meta() -> SnapshotMeta {
        SnapshotMeta {
            epsilon: 0.05,
            n: 8,
            gamma: -3.0,
            step: 125,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Arc::new(
            PhaseGrid::new(
                Some(SpatialGrid::new(2, 4.0, 4, Topology::TruncatedBox).unwrap()),
                VelocityGrid::new(2, 3.0, 6).unwrap(),
            )
            .unwrap(),
        );
        let f = random_field(grid.clone(), 1);
        let p = dir.path().join("a.lfd");
        write_snapshot(&f, &meta(), &p).unwrap();
        let s = read_snapshot(&p).unwrap();
        assert_eq!(s.header.step, 125);
        assert_eq!(s.header.topology, Some(Topology::TruncatedBox));
        let g = s.clone().field().unwrap();
        assert_eq!(g.grid(), grid.as_ref());
        let back = s.into_field(grid).unwrap();
        assert_eq!(back.time(), 0.125);
        assert!(back.samples().iter().zip(f.samples()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(!dir.path().join(".a.lfd.tmp").exists());
    }

    #[test]
    fn corruption_is_detected() {
        let grid = Arc::new(PhaseGrid::homogeneous(VelocityGrid::new(2, 3.0, 5).unwrap()));
        let bytes = encode(&random_field(grid, 2), &meta());
        let mut bad = bytes.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x10;
        assert!(matches!(decode_snapshot(&bad), Err(Error::ChecksumMismatch)));
        let mut bad_header = bytes.clone();
        bad_header[HEADER_LEN - 20] ^= 1;
        assert!(matches!(decode_snapshot(&bad_header), Err(Error::ChecksumMismatch)));
        assert!(matches!(decode_snapshot(&bytes[..bytes.len() - 8]), Err(Error::MalformedSnapshot(_))));
        assert!(matches!(decode_snapshot(&bytes[..20]), Err(Error::MalformedSnapshot(_))));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(decode_snapshot(&version), Err(Error::SnapshotVersion(9))));
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let grid = Arc::new(PhaseGrid::homogeneous(VelocityGrid::new(2, 3.0, 5).unwrap()));
        let s = decode_snapshot(&encode(&random_field(grid, 3), &meta())).unwrap();
        let other = Arc::new(PhaseGrid::homogeneous(VelocityGrid::new(2, 3.0, 6).unwrap()));
        assert!(matches!(s.into_field(other), Err(Error::InvalidGrid(_))));
    }
}
