//! Lattice convolutions with the kernel table: `h^N Σ_{v*} K(v − v*) s(v*)`.
//!
//! The direct double loop is the reference. The FFT path zero-pads each axis
//! to `P ≥ 2M − 1` so the cyclic product equals the linear sum.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::collision_kernel::KernelTable;
use crate::phase_grid::VelocityGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConvolutionMethod {
    Direct,
    Fft,
    #[default]
    Auto,
}

/// Above this many velocity nodes `Auto` switches to the FFT path.
const AUTO_FFT_THRESHOLD: usize = 256;

pub struct Convolver {
    grid: VelocityGrid,
    table: Arc<KernelTable>,
    fft: Option<FftEngine>,
}

impl std::fmt::Debug for Convolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Convolver")
            .field("nodes", &self.grid.len())
            .field("fft", &self.fft.as_ref().map(|e| e.p))
            .finish()
    }
}

impl Convolver {
    pub fn new(grid: &VelocityGrid, table: Arc<KernelTable>, method: ConvolutionMethod) -> Self {
        let use_fft = match method {
            ConvolutionMethod::Direct => false,
            ConvolutionMethod::Fft => true,
            ConvolutionMethod::Auto => grid.len() > AUTO_FFT_THRESHOLD,
        };
        let fft = use_fft.then(|| FftEngine::new(grid, &table));
        Self {
            grid: grid.clone(),
            table,
            fft,
        }
    }

    pub fn table(&self) -> &KernelTable {
        &self.table
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn uses_fft(&self) -> bool {
        self.fft.is_some()
    }

    /// `Σ a(v − v*) s*`, one row-major N×N matrix per node.
    pub fn matrix_scalar(&self, s: &[f64]) -> Vec<f64> {
        match &self.fft {
            Some(e) => e.matrix_scalar(s),
            None => direct_matrix_scalar(&self.grid, &self.table, s),
        }
    }

    /// `Σ a(v − v*) q*` for a vector field q (N values per node).
    pub fn matrix_vector(&self, q: &[f64]) -> Vec<f64> {
        match &self.fft {
            Some(e) => e.matrix_vector(q),
            None => direct_matrix_vector(&self.grid, &self.table, q),
        }
    }

    /// `Σ (∇·a)(v − v*) s*`, N values per node.
    pub fn divergence_scalar(&self, s: &[f64]) -> Vec<f64> {
        match &self.fft {
            Some(e) => e.divergence_scalar(s),
            None => direct_divergence_scalar(&self.grid, &self.table, s),
        }
    }
}

pub fn direct_matrix_scalar(grid: &VelocityGrid, table: &KernelTable, s: &[f64]) -> Vec<f64> {
    let dim = grid.dim();
    let nn = dim * dim;
    let w = grid.cell_volume();
    let mut out = vec![0.0; grid.len() * nn];
    out.par_chunks_mut(nn).enumerate().for_each(|(i, o)| {
        for (j, &sj) in s.iter().enumerate() {
            if sj == 0.0 {
                continue;
            }
            let a = table.a(table.pair_index(grid, i, j));
            for k in 0..nn {
                o[k] += a[k] * sj;
            }
        }
        o.iter_mut().for_each(|x| *x *= w);
    });
    out
}

pub fn direct_matrix_vector(grid: &VelocityGrid, table: &KernelTable, q: &[f64]) -> Vec<f64> {
    let dim = grid.dim();
    let w = grid.cell_volume();
    let mut out = vec![0.0; grid.len() * dim];
    out.par_chunks_mut(dim).enumerate().for_each(|(i, o)| {
        for j in 0..grid.len() {
            let qj = &q[j * dim..(j + 1) * dim];
            let a = table.a(table.pair_index(grid, i, j));
            for r in 0..dim {
                for c in 0..dim {
                    o[r] += a[r * dim + c] * qj[c];
                }
            }
        }
        o.iter_mut().for_each(|x| *x *= w);
    });
    out
}

pub fn direct_divergence_scalar(grid: &VelocityGrid, table: &KernelTable, s: &[f64]) -> Vec<f64> {
    let dim = grid.dim();
    let w = grid.cell_volume();
    let mut out = vec![0.0; grid.len() * dim];
    out.par_chunks_mut(dim).enumerate().for_each(|(i, o)| {
        for (j, &sj) in s.iter().enumerate() {
            if sj == 0.0 {
                continue;
            }
            let d = table.div(table.pair_index(grid, i, j));
            for k in 0..dim {
                o[k] += d[k] * sj;
            }
        }
        o.iter_mut().for_each(|x| *x *= w);
    });
    out
}

/// Smallest 2^a 3^b 5^c that is at least `n`.
fn smooth_size(n: usize) -> usize {
    let mut p = n;
    loop {
        let mut r = p;
        for f in [2, 3, 5] {
            while r.is_multiple_of(f) {
                r /= f;
            }
        }
        if r == 1 {
            return p;
        }
        p += 1;
    }
}

struct FftEngine {
    dim: usize,
    m: usize,
    p: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Spectra of a_ij (row-major) and of (∇·a)_i.
    a_hat: Vec<Vec<Complex64>>,
    div_hat: Vec<Vec<Complex64>>,
}

impl FftEngine {
    fn new(grid: &VelocityGrid, table: &KernelTable) -> Self {
        let dim = grid.dim();
        let m = grid.points_per_axis();
        let p = smooth_size(2 * m - 1);
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(p);
        let inverse = planner.plan_fft_inverse(p);
        let mut engine = Self {
            dim,
            m,
            p,
            forward,
            inverse,
            a_hat: Vec::new(),
            div_hat: Vec::new(),
        };
        let w = grid.cell_volume();
        let a = table.a_raw();
        let div = table.div_raw();
        let nn = dim * dim;
        engine.a_hat = (0..nn)
            .map(|c| engine.kernel_spectrum(table, |idx| w * a[idx * nn + c]))
            .collect();
        engine.div_hat = (0..dim)
            .map(|c| engine.kernel_spectrum(table, |idx| w * div[idx * dim + c]))
            .collect();
        engine
    }

    fn len(&self) -> usize {
        self.p.pow(self.dim as u32)
    }

    fn kernel_spectrum<F: Fn(usize) -> f64>(&self, table: &KernelTable, value: F) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.len()];
        let p = self.p as isize;
        for idx in 0..table.len() {
            let d = table.offsets(idx);
            let pos = d[..self.dim]
                .iter()
                .fold(0usize, |acc, &o| acc * self.p + o.rem_euclid(p) as usize);
            buf[pos] = Complex64::new(value(idx), 0.0);
        }
        self.transform(&mut buf, false);
        buf
    }

    fn embed(&self, s: &[f64], stride: usize, comp: usize) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.len()];
        let n = self.m.pow(self.dim as u32);
        for i in 0..n {
            buf[self.padded_index(i)] = Complex64::new(s[i * stride + comp], 0.0);
        }
        self.transform(&mut buf, false);
        buf
    }

    fn padded_index(&self, i: usize) -> usize {
        let mut rem = i;
        let mut pos = 0;
        let mut scale = 1;
        for _ in 0..self.dim {
            pos += (rem % self.m) * scale;
            rem /= self.m;
            scale *= self.p;
        }
        pos
    }

    fn extract(&self, mut buf: Vec<Complex64>, out: &mut [f64], stride: usize, comp: usize) {
        self.transform(&mut buf, true);
        let scale = 1.0 / self.len() as f64;
        let n = self.m.pow(self.dim as u32);
        for i in 0..n {
            out[i * stride + comp] = buf[self.padded_index(i)].re * scale;
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inverse } else { &self.forward };
        let p = self.p;
        // Last axis is contiguous.
        plan.process(buf);
        let mut line = vec![Complex64::new(0.0, 0.0); p];
        for axis in 0..self.dim - 1 {
            let stride = p.pow((self.dim - 1 - axis) as u32);
            let block = stride * p;
            for start in (0..buf.len()).step_by(block) {
                for offset in 0..stride {
                    let base = start + offset;
                    for k in 0..p {
                        line[k] = buf[base + k * stride];
                    }
                    plan.process(&mut line);
                    for k in 0..p {
                        buf[base + k * stride] = line[k];
                    }
                }
            }
        }
    }

    fn product_sum(&self, terms: &[(&[Complex64], &[Complex64])]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.len()];
        for (k, s) in terms {
            for ((o, a), b) in out.iter_mut().zip(k.iter()).zip(s.iter()) {
                *o += a * b;
            }
        }
        out
    }

    fn matrix_scalar(&self, s: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let nn = dim * dim;
        let n = self.m.pow(dim as u32);
        let s_hat = self.embed(s, 1, 0);
        let mut out = vec![0.0; n * nn];
        for r in 0..dim {
            for c in r..dim {
                let prod = self.product_sum(&[(&self.a_hat[r * dim + c], &s_hat)]);
                self.extract(prod, &mut out, nn, r * dim + c);
                if c != r {
                    for i in 0..n {
                        out[i * nn + c * dim + r] = out[i * nn + r * dim + c];
                    }
                }
            }
        }
        out
    }

    fn matrix_vector(&self, q: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let n = self.m.pow(dim as u32);
        let q_hat: Vec<Vec<Complex64>> = (0..dim).map(|c| self.embed(q, dim, c)).collect();
        let mut out = vec![0.0; n * dim];
        for r in 0..dim {
            let terms: Vec<(&[Complex64], &[Complex64])> = (0..dim)
                .map(|c| (self.a_hat[r * dim + c].as_slice(), q_hat[c].as_slice()))
                .collect();
            let prod = self.product_sum(&terms);
            self.extract(prod, &mut out, dim, r);
        }
        out
    }

    fn divergence_scalar(&self, s: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let n = self.m.pow(dim as u32);
        let s_hat = self.embed(s, 1, 0);
        let mut out = vec![0.0; n * dim];
        for r in 0..dim {
            let prod = self.product_sum(&[(&self.div_hat[r], &s_hat)]);
            self.extract(prod, &mut out, dim, r);
        }
        out
    }
}
