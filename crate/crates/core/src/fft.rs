//! Zero-padded planar convolution for uniform-lattice row sums.
//!
//! Interior cells that sit on the background grid interact through kernel
//! values that depend only on the index offset, so their row sums
//! `sum_j w_j k_ij` and `sum_j w_j u_j k_ij` are discrete convolutions over
//! the lattice bounding box. Evaluating them with padded FFTs turns the
//! quadratic hot loop of `apply` into one transform pair per call.
//!
//! Padding to at least `2n - 1` per axis makes the circular convolution
//! exact for all in-range offsets; the center table entry is zeroed so the
//! self pair never enters a row sum.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::{Arc, Mutex};

pub struct LatticeConv {
    nx: usize,
    ny: usize,
    px: usize,
    py: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    /// Transformed kernel table in column-major padded layout.
    khat: Vec<Complex<f64>>,
    scratch: Mutex<Buffers>,
}

struct Buffers {
    a: Vec<Complex<f64>>,
    b: Vec<Complex<f64>>,
    work: Vec<Complex<f64>>,
}

impl std::fmt::Debug for LatticeConv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatticeConv")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("px", &self.px)
            .field("py", &self.py)
            .finish()
    }
}

impl LatticeConv {
    /// Build the plan for an `nx` by `ny` lattice with kernel table
    /// `kval(di, dj)`; the zero offset is never evaluated.
    pub fn new(nx: usize, ny: usize, kval: impl Fn(i64, i64) -> f64) -> Self {
        let px = (2 * nx - 1).next_power_of_two();
        let py = (2 * ny - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd_x = planner.plan_fft_forward(px);
        let inv_x = planner.plan_fft_inverse(px);
        let fwd_y = planner.plan_fft_forward(py);
        let inv_y = planner.plan_fft_inverse(py);
        let mut a = vec![Complex::default(); px * py];
        let mut b = vec![Complex::default(); px * py];
        let ws = fwd_x
            .get_inplace_scratch_len()
            .max(inv_x.get_inplace_scratch_len())
            .max(fwd_y.get_inplace_scratch_len())
            .max(inv_y.get_inplace_scratch_len());
        let mut work = vec![Complex::default(); ws];
        // Kernel table with wrap-around indexing for negative offsets.
        for dj in -(ny as i64 - 1)..=(ny as i64 - 1) {
            for di in -(nx as i64 - 1)..=(nx as i64 - 1) {
                if di == 0 && dj == 0 {
                    continue;
                }
                let ix = di.rem_euclid(px as i64) as usize;
                let iy = dj.rem_euclid(py as i64) as usize;
                a[iy * px + ix] = Complex::new(kval(di, dj), 0.0);
            }
        }
        fwd_x.process_with_scratch(&mut a, &mut work);
        transpose(&a, &mut b, px, py);
        fwd_y.process_with_scratch(&mut b, &mut work);
        let khat = b.clone();
        a.fill(Complex::default());
        Self {
            nx,
            ny,
            px,
            py,
            fwd_x,
            inv_x,
            fwd_y,
            inv_y,
            khat,
            scratch: Mutex::new(Buffers { a, b, work }),
        }
    }

    /// Convolve lattice data (row-major `ix + nx * iy`) with the kernel
    /// table: `out[p] = sum_q kval(p - q) grid[q]`.
    pub fn convolve(&self, grid: &[f64], out: &mut [f64]) {
        assert_eq!(grid.len(), self.nx * self.ny);
        assert_eq!(out.len(), grid.len());
        let (px, py, nx, ny) = (self.px, self.py, self.nx, self.ny);
        let mut s = self.scratch.lock().unwrap();
        let Buffers { a, b, work } = &mut *s;
        a.fill(Complex::default());
        for iy in 0..ny {
            let src = &grid[iy * nx..(iy + 1) * nx];
            let dst = &mut a[iy * px..iy * px + nx];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = Complex::new(v, 0.0);
            }
        }
        self.fwd_x.process_with_scratch(a, work);
        transpose(a, b, px, py);
        self.fwd_y.process_with_scratch(b, work);
        for (v, &k) in b.iter_mut().zip(&self.khat) {
            *v *= k;
        }
        self.inv_y.process_with_scratch(b, work);
        transpose(b, a, py, px);
        self.inv_x.process_with_scratch(a, work);
        let norm = 1.0 / (px as f64 * py as f64);
        for iy in 0..ny {
            for ix in 0..nx {
                out[iy * nx + ix] = a[iy * px + ix].re * norm;
            }
        }
    }
}

/// Out-of-place transpose of a `cols` by `rows` row-major matrix (row
/// length `cols`) into row length `rows`.
fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], cols: usize, rows: usize) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}
