//! CSV time series of [`DiagnosticsRecord`]s. Floats use the shortest
//! representation that parses back to the same bits.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::diagnostics::DiagnosticsRecord;
use crate::error::{Error, Result};

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedSeries(format!("{other:?}")),
    }
}

fn row(r: &DiagnosticsRecord) -> Vec<String> {
    let mut out = vec![r.time.to_string(), r.mass.to_string()];
    out.extend(r.momentum.iter().map(f64::to_string));
    out.extend(
        [
            r.kinetic_energy,
            r.inertia,
            r.entropy,
            r.dissipation_increment,
            r.cumulative_dissipation,
            r.pauli_min,
            r.pauli_max,
            r.weighted_grad_norm,
        ]
        .iter()
        .map(f64::to_string),
    );
    out.push(r.picard_iters.to_string());
    out
}

pub struct SeriesWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl std::fmt::Debug for SeriesWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SeriesWriter")
    }
}

impl SeriesWriter {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path, dim: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        inner.write_record(DiagnosticsRecord::csv_header(dim)).map_err(csv_error)?;
        Ok(Self { inner })
    }

    /// Rewrites `path` with `records` and keeps it open for appending.
    pub fn rewrite(path: &Path, dim: usize, records: &[DiagnosticsRecord]) -> Result<Self> {
        let mut w = Self::create(path, dim)?;
        for r in records {
            w.append(r)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, r: &DiagnosticsRecord) -> Result<()> {
        self.inner.write_record(row(r)).map_err(csv_error)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_series(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = rdr.headers().map_err(csv_error)?.clone();
    let dim = header.iter().filter(|h| h.starts_with("momentum_")).count();
    if header.iter().collect::<Vec<_>>() != DiagnosticsRecord::csv_header(dim) {
        return Err(Error::MalformedSeries(format!("unexpected header in {}", path.display())));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let bad = |what: &str| Error::MalformedSeries(format!("row {}: bad {what}", line + 2));
        let nums: Vec<f64> = rec
            .iter()
            .take(rec.len() - 1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("number"))?;
        let picard_iters = rec[rec.len() - 1].parse::<usize>().map_err(|_| bad("picard_iters"))?;
        let m = &nums[2..2 + dim];
        let rest = &nums[2 + dim..];
        out.push(DiagnosticsRecord {
            time: nums[0],
            mass: nums[1],
            momentum: m.to_vec(),
            kinetic_energy: rest[0],
            inertia: rest[1],
            entropy: rest[2],
            dissipation_increment: rest[3],
            cumulative_dissipation: rest[4],
            pauli_min: rest[5],
            pauli_max: rest[6],
            weighted_grad_norm: rest[7],
            picard_iters,
        });
    }
    Ok(out)
}
