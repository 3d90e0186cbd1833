//! Assembled nonlocal form, exterior closure, and pointwise operators.
//!
//! The quadratic form over mesh data is
//!
//! G(u,v) = sum_{i != j in I} c_ij du dv
//!        + sum_{i in I} g_u(i)^T T_i g_v(i)
//!        + 2 sum_{i in I, e in E} c_ie du dv
//!        + 2 sum_{i in I} w_i T_i (u_i - far_u)(v_i - far_v)
//!
//! with I the interior cells, E the meshed exterior, and the last term the
//! analytic tail beyond the truncation ball where the field is modelled by
//! its constant `far` value. Baseline coefficients are plain midpoint
//! products; touching pairs are corrected to a two-point model with the
//! exact pair moment, node self-pairs use the stencil-gradient model, and
//! cross-region pairs whose boxes overlap a curved boundary get a kernel
//! floored at the cell scale. Hot loops run on the baseline only; all
//! model corrections are sparse fixups, so the loops stay branch-free.
//!
//! The scaled inner product is `kappa * G + mass` with
//! `kappa = c_norm * epsilon^(2s) / 2`.

use crate::error::{Error, Result};
use crate::fft::LatticeConv;
use crate::field::Field;
use crate::geometry::{grid_lines, Mesh};
use crate::kernel::{boxes_overlap, KernelEval, MomentCache, Params, CROSS_FLOOR, TOUCH_REL};
use crate::with_kernel;
use nalgebra::DMatrix;
use std::sync::Arc;

/// Hard cap on dense assembly size (about 1.2 GB of matrix).
const DENSE_MAX_DOFS: usize = 12_000;

/// Meshes with at least this many interior cells route the uniform-lattice
/// interior pair sums through padded FFTs; below it the direct loops win.
/// Kept under the solver's dense-factor limit so every iterative planar
/// solve has the convolution surrogate available.
const LATTICE_MIN_CELLS: usize = 2048;

/// One sparse pair fixup: the hot-loop baseline for (a, b) is replaced by
/// `model` through the additive `delta = model - baseline`.
#[derive(Debug, Clone, Copy)]
struct PairCorr {
    a: u32,
    b: u32,
    delta: f64,
}

#[derive(Debug)]
pub struct NonlocalForm {
    mesh: Arc<Mesh>,
    params: Params,
    kappa: f64,
    exts: Vec<f64>,
    /// Touching interior pairs, a < b.
    ii_corr: Vec<PairCorr>,
    /// Touching interior-exterior pairs (a interior, b exterior).
    ie_corr: Vec<PairCorr>,
    /// Per interior cell: ratio^2-scaled second moments [Txx, Tyy, Txy].
    diag_t: Vec<[f64; 3]>,
    /// Per interior cell: w_i * T_i, the analytic tail weight.
    tail_w: Vec<f64>,
    tail_sum: f64,
    /// Per exterior cell: closure denominator sum_i c_ie.
    cl_den: Vec<f64>,
    /// Approximate diagonal of the scaled inner product, for Jacobi use.
    gram_diag: Vec<f64>,
    /// Convolution fast path for interior cells on the background grid.
    lattice: Option<LatticeMap>,
}

/// Interior cells split into background-grid cells, whose pair sums are
/// convolutions, and boundary-cut cells handled by direct loops.
#[derive(Debug)]
struct LatticeMap {
    /// Flat lattice site per interior cell, usize::MAX off the grid.
    pos: Vec<usize>,
    lat: Vec<u32>,
    off: Vec<u32>,
    /// Interior weights with cut cells zeroed: scanning `wm` past a cut
    /// cell keeps the hot loop branch-free while contributing nothing.
    wm: Vec<f64>,
    conv: LatticeConv,
    /// Kernel-weighted measure sums at each site: (K * W)_p.
    s_grid: Vec<f64>,
}

impl LatticeMap {
    /// Row sums `sum_j w_j u_j k_ij` over lattice cells, written onto the
    /// occupied sites of a fresh grid.
    fn weighted_conv(&self, ws: &[f64], values: &[f64]) -> Vec<f64> {
        let mut grid = vec![0.0; self.s_grid.len()];
        for &i in &self.lat {
            let i = i as usize;
            grid[self.pos[i]] = ws[i] * values[i];
        }
        let mut out = vec![0.0; grid.len()];
        self.conv.convolve(&grid, &mut out);
        out
    }
}

/// Recognize interior cells sitting exactly on the background grid. The
/// kernel table is indexed by lattice offsets, so membership requires the
/// cell box to match the grid box to round-off.
fn detect_lattice(mesh: &Mesh, params: &Params, min_cells: usize) -> Option<LatticeMap> {
    if params.dim != 2 || mesh.n_interior() < min_cells {
        return None;
    }
    let n_i = mesh.n_interior();
    let cells = mesh.cells();
    let ws = mesh.weights();
    let (blo, bhi) = mesh.domain.bounding_box();
    // The builder rounds the cell count and divides the span, so the true
    // pitch differs from the nominal h and the two axes need not agree.
    let nx = ((bhi[0] - blo[0]) / mesh.h).round().max(1.0) as usize;
    let ny = ((bhi[1] - blo[1]) / mesh.h).round().max(1.0) as usize;
    let hx = (bhi[0] - blo[0]) / nx as f64;
    let hy = (bhi[1] - blo[1]) / ny as f64;
    let gx = grid_lines(blo[0], bhi[0], nx);
    let gy = grid_lines(blo[1], bhi[1], ny);
    let tol = 1e-9 * mesh.h;
    let mut pos = vec![usize::MAX; n_i];
    let mut lat = Vec::new();
    let mut off = Vec::new();
    for i in 0..n_i {
        let c = &cells[i];
        let ix = ((c.node[0] - blo[0]) / hx - 0.5).round();
        let iy = ((c.node[1] - blo[1]) / hy - 0.5).round();
        if ix >= 0.0 && iy >= 0.0 && (ix as usize) < nx && (iy as usize) < ny {
            let (ix, iy) = (ix as usize, iy as usize);
            let on_grid = (c.lo[0] - gx[ix]).abs() <= tol
                && (c.hi[0] - gx[ix + 1]).abs() <= tol
                && (c.lo[1] - gy[iy]).abs() <= tol
                && (c.hi[1] - gy[iy + 1]).abs() <= tol;
            if on_grid {
                pos[i] = iy * nx + ix;
                lat.push(i as u32);
            }
        }
        if pos[i] == usize::MAX {
            off.push(i as u32);
        }
    }
    let conv = LatticeConv::new(nx, ny, |di, dj| {
        let dx = di as f64 * hx;
        let dy = dj as f64 * hy;
        params.kernel_r2(dx * dx + dy * dy)
    });
    let mut wgrid = vec![0.0; nx * ny];
    for &i in &lat {
        wgrid[pos[i as usize]] = ws[i as usize];
    }
    let mut s_grid = vec![0.0; nx * ny];
    conv.convolve(&wgrid, &mut s_grid);
    let mut wm = ws[..n_i].to_vec();
    for &d in &off {
        wm[d as usize] = 0.0;
    }
    Some(LatticeMap { pos, lat, off, wm, conv, s_grid })
}

#[inline(always)]
fn floor_r2(r2: f64, ext_a: f64, ext_b: f64) -> f64 {
    let rf = CROSS_FLOOR * 0.5 * (ext_a + ext_b);
    r2.max(rf * rf)
}

impl NonlocalForm {
    pub fn new(mesh: &Arc<Mesh>, params: &Params) -> Result<Self> {
        Self::with_lattice_min(mesh, params, LATTICE_MIN_CELLS)
    }

    /// As `new` with an explicit lattice engagement threshold, so tests can
    /// force the convolution path on small meshes.
    pub(crate) fn with_lattice_min(
        mesh: &Arc<Mesh>,
        params: &Params,
        lattice_min: usize,
    ) -> Result<Self> {
        if mesh.domain.dim != params.dim {
            return Err(Error::params("parameter dimension does not match the mesh"));
        }
        let dim = params.dim;
        let n_i = mesh.n_interior();
        let n_t = mesh.n_total();
        let cells = mesh.cells();
        let ws = mesh.weights();
        let exts: Vec<f64> = cells.iter().map(|c| c.extent(dim)).collect();
        let mut cache = MomentCache::new();

        // Classify near pairs. Touching pairs get the two-point moment
        // model; overlapping cross-region boxes stay on the floored
        // baseline (their model is the baseline itself). Each unordered
        // pair is visited from its larger box (index breaking ties), whose
        // own extent bounds the node distance of any touching partner.
        let mut ii_corr = Vec::new();
        let mut ie_corr = Vec::new();
        for i in 0..n_t {
            let ci = &cells[i];
            let radius = 2.01 * exts[i];
            for j in mesh.neighbor_candidates(ci.node, radius) {
                if j == i || (exts[j], j) > (exts[i], i) {
                    continue;
                }
                if !mesh.is_interior(i) && !mesh.is_interior(j) {
                    continue; // exterior-exterior pairs never enter the form
                }
                let cj = &cells[j];
                let scale = exts[i].max(exts[j]);
                let tol = TOUCH_REL * scale;
                if boxes_overlap(ci, cj, dim, tol) || ci.gap(cj, dim) > tol {
                    continue;
                }
                let r2 = crate::kernel::dist2(ci.node, cj.node);
                let m2 = cache.pair_m2(ci, cj, params)?;
                let ratio = ci.weight / ci.box_measure(dim) * (cj.weight / cj.box_measure(dim));
                let model = ratio * m2 / r2;
                let cross = mesh.is_interior(i) != mesh.is_interior(j);
                let baseline = if cross {
                    ws[i] * ws[j] * params.kernel_r2(floor_r2(r2, exts[i], exts[j]))
                } else {
                    ws[i] * ws[j] * params.kernel_r2(r2)
                };
                // Store interior partner first, then by index.
                let (a, b) = if mesh.is_interior(i) && mesh.is_interior(j) {
                    (i.min(j) as u32, i.max(j) as u32)
                } else if mesh.is_interior(i) {
                    (i as u32, j as u32)
                } else {
                    (j as u32, i as u32)
                };
                let corr = PairCorr {
                    a,
                    b,
                    delta: model - baseline,
                };
                if cross {
                    ie_corr.push(corr);
                } else {
                    ii_corr.push(corr);
                }
            }
        }

        // Self-pair gradient moments, scaled by the clipped-measure ratio.
        let mut diag_t = Vec::with_capacity(n_i);
        for i in 0..n_i {
            let c = &cells[i];
            let t = cache.diag_t(c, params)?;
            let ratio = c.weight / c.box_measure(dim);
            diag_t.push([
                ratio * ratio * t[0],
                ratio * ratio * t[1],
                ratio * ratio * t[2],
            ]);
        }

        // Analytic tail beyond the truncation ball: T_i is the kernel mass
        // outside the ball of radius R_ext - |x_i - centroid| around x_i.
        let omega = if dim == 1 {
            2.0
        } else {
            2.0 * std::f64::consts::PI
        };
        let centroid = mesh.domain.centroid;
        let mut tail_w = Vec::with_capacity(n_i);
        for i in 0..n_i {
            let p = mesh.node(i);
            let r = mesh.truncation.r_ext - (p[0] - centroid[0]).hypot(p[1] - centroid[1]);
            let t_i = omega * r.powf(-2.0 * params.s) / (2.0 * params.s);
            tail_w.push(ws[i] * t_i);
        }
        let tail_sum: f64 = tail_w.iter().sum();

        // Closure denominators: one floored rectangular pass plus fixups.
        let xs = mesh.xs();
        let ys = mesh.ys();
        let mut cl_den = vec![0.0; n_t - n_i];
        with_kernel!(params, k, {
            for e in n_i..n_t {
                let (xe, ye, we, ee) = (xs[e], ys[e], ws[e], exts[e]);
                let mut den = 0.0;
                for i in 0..n_i {
                    let dx = xs[i] - xe;
                    let dy = ys[i] - ye;
                    let r2 = floor_r2(dx * dx + dy * dy, exts[i], ee);
                    den += ws[i] * k.k(r2);
                }
                cl_den[e - n_i] = we * den;
            }
        });
        for pc in &ie_corr {
            cl_den[pc.b as usize - n_i] += pc.delta;
        }
        if let Some(e) = cl_den.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::mesh(format!(
                "closure weight sum for exterior cell {} is not positive",
                e + n_i
            )));
        }

        let kappa = 0.5 * params.c_norm * params.epsilon_power();
        let lattice = detect_lattice(mesh, params, lattice_min);

        // Approximate scaled diagonal (baseline row sums; fixups skipped).
        // With a lattice the grid rows reuse the precomputed kernel-measure
        // sums and the exterior rows reuse the closure denominators.
        let mut gram_diag = vec![0.0; n_t];
        with_kernel!(params, k, {
            match &lattice {
                Some(lm) => {
                    for &i in &lm.lat {
                        let i = i as usize;
                        gram_diag[i] = lm.s_grid[lm.pos[i]];
                    }
                    // Cut-cell pairs enter both rows, same dual structure
                    // as the apply pass, so grid rows near the rim see
                    // their cut partners too.
                    for &d in &lm.off {
                        let d = d as usize;
                        let (xd, yd, wd) = (xs[d], ys[d], ws[d]);
                        let mut row = 0.0;
                        for j in 0..n_i {
                            if lm.pos[j] == usize::MAX && j >= d {
                                continue;
                            }
                            let dx = xs[j] - xd;
                            let dy = ys[j] - yd;
                            let kv = k.k(dx * dx + dy * dy);
                            row += ws[j] * kv;
                            gram_diag[j] += wd * kv;
                        }
                        gram_diag[d] += row;
                    }
                    let mut ext_row = vec![0.0; n_t - n_i];
                    for i in 0..n_i {
                        let (xi, yi, ei) = (xs[i], ys[i], exts[i]);
                        let mut row = 0.0;
                        for e in n_i..n_t {
                            let dx = xs[e] - xi;
                            let dy = ys[e] - yi;
                            let r2 = floor_r2(dx * dx + dy * dy, ei, exts[e]);
                            let kv = k.k(r2);
                            row += ws[e] * kv;
                            ext_row[e - n_i] += ws[i] * kv;
                        }
                        gram_diag[i] = 2.0 * kappa * ws[i] * (gram_diag[i] + row)
                            + ws[i]
                            + 2.0 * kappa * tail_w[i];
                    }
                    for e in n_i..n_t {
                        gram_diag[e] = 2.0 * kappa * ws[e] * ext_row[e - n_i];
                    }
                }
                None => {
                    for i in 0..n_t {
                        let (xi, yi, ei) = (xs[i], ys[i], exts[i]);
                        let interior_i = i < n_i;
                        let mut row = 0.0;
                        for j in 0..n_t {
                            if j == i || (!interior_i && j >= n_i) {
                                continue;
                            }
                            let dx = xs[j] - xi;
                            let dy = ys[j] - yi;
                            let mut r2 = dx * dx + dy * dy;
                            if interior_i != (j < n_i) {
                                r2 = floor_r2(r2, ei, exts[j]);
                            }
                            row += ws[j] * k.k(r2);
                        }
                        gram_diag[i] = 2.0 * kappa * ws[i] * row;
                        if interior_i {
                            gram_diag[i] += ws[i] + 2.0 * kappa * tail_w[i];
                        }
                    }
                }
            }
        });

        Ok(Self {
            mesh: mesh.clone(),
            params: *params,
            kappa,
            exts,
            ii_corr,
            ie_corr,
            diag_t,
            tail_w,
            tail_sum,
            cl_den,
            gram_diag,
            lattice,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Scaling of the raw form inside the inner product.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn gram_diagonal(&self) -> &[f64] {
        &self.gram_diag
    }

    /// Symmetric positive definite surrogate of the scaled inner product
    /// for direction solves: the grid-cell pair block by convolution, the
    /// row-sum diagonal for everything else. `x` and `y` may be interior
    /// length (reduced unknowns) or full length; semantics are diagonal on
    /// any trailing exterior rows.
    pub fn apply_gram_surrogate(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), y.len());
        let n_i = self.mesh.n_interior().min(x.len());
        let ws = self.mesh.weights();
        for k in 0..x.len() {
            y[k] = self.gram_diag[k] * x[k];
        }
        let lm = match &self.lattice {
            Some(lm) => lm,
            None => return,
        };
        // Replace the diagonal on grid rows by the actual pair block:
        // rows 2 kappa w_i (x_i S_i - T_i) plus the non-grid diagonal
        // remainder. Off-grid and exterior rows stay diagonal.
        let t_grid = lm.weighted_conv(ws, &x[..n_i]);
        let scale = 2.0 * self.kappa;
        for &i in &lm.lat {
            let i = i as usize;
            let p = lm.pos[i];
            let pair_diag = scale * ws[i] * lm.s_grid[p];
            y[i] += scale * ws[i] * (x[i] * lm.s_grid[p] - t_grid[p]) - pair_diag * x[i];
        }
    }

    /// Tail-weighted interior mean, the variationally consistent far value.
    /// Tail weights per interior cell: w_i times the kernel mass beyond
    /// the truncation ball as seen from that cell.
    pub fn tail_weights(&self) -> &[f64] {
        &self.tail_w
    }

    pub fn far_mean(&self, values: &[f64]) -> f64 {
        let num: f64 = self.tail_w.iter().zip(values).map(|(t, u)| t * u).sum();
        num / self.tail_sum
    }

    /// Raw form rows: y_k = d G(u, .)/d v_k, so G(u, v) = sum_k v_k y_k
    /// whenever far_v is the tail-weighted mean of v. `far` is the far
    /// value of u; it enters the tail rows only.
    pub fn apply_raw(&self, values: &[f64], far: f64, y: &mut [f64]) {
        let mesh = &self.mesh;
        let n_i = mesh.n_interior();
        let n_t = mesh.n_total();
        assert_eq!(values.len(), n_t);
        assert_eq!(y.len(), n_t);
        let xs = mesh.xs();
        let ys = mesh.ys();
        let ws = mesh.weights();
        y.fill(0.0);
        with_kernel!(&self.params, k, {
            match &self.lattice {
                Some(lm) => {
                    // Grid rows by convolution; cut cells by a direct dual
                    // pass against everything, each unordered pair once:
                    // all partners below the cut cell, only grid partners
                    // above it (the zeroed mask keeps that range
                    // branch-free at the cost of a few dead evaluations).
                    let t_grid = lm.weighted_conv(ws, values);
                    for &i in &lm.lat {
                        let i = i as usize;
                        let p = lm.pos[i];
                        y[i] += ws[i] * (values[i] * lm.s_grid[p] - t_grid[p]);
                    }
                    for &d in &lm.off {
                        let d = d as usize;
                        let (xd, yd, wd, ud) = (xs[d], ys[d], ws[d], values[d]);
                        let mut acc = 0.0;
                        for j in 0..d {
                            let dx = xs[j] - xd;
                            let dy = ys[j] - yd;
                            let c = wd * ws[j] * k.k(dx * dx + dy * dy);
                            let t = c * (ud - values[j]);
                            acc += t;
                            y[j] -= t;
                        }
                        for j in d + 1..n_i {
                            let dx = xs[j] - xd;
                            let dy = ys[j] - yd;
                            let c = wd * lm.wm[j] * k.k(dx * dx + dy * dy);
                            let t = c * (ud - values[j]);
                            acc += t;
                            y[j] -= t;
                        }
                        y[d] += acc;
                    }
                }
                None => {
                    // Interior-interior, strict triangle.
                    for i in 1..n_i {
                        let (xi, yi_, wi, ui) = (xs[i], ys[i], ws[i], values[i]);
                        let mut acc = 0.0;
                        for j in 0..i {
                            let dx = xs[j] - xi;
                            let dy = ys[j] - yi_;
                            let c = wi * ws[j] * k.k(dx * dx + dy * dy);
                            let t = c * (ui - values[j]);
                            acc += t;
                            y[j] -= t;
                        }
                        y[i] += acc;
                    }
                }
            }
            // Interior-exterior, floored kernel.
            for i in 0..n_i {
                let (xi, yi_, wi, ui, ei) = (xs[i], ys[i], ws[i], values[i], self.exts[i]);
                let mut acc = 0.0;
                for e in n_i..n_t {
                    let dx = xs[e] - xi;
                    let dy = ys[e] - yi_;
                    let r2 = floor_r2(dx * dx + dy * dy, ei, self.exts[e]);
                    let c = wi * ws[e] * k.k(r2);
                    let t = c * (ui - values[e]);
                    acc += t;
                    y[e] -= t;
                }
                y[i] += acc;
            }
        });
        for pc in self.ii_corr.iter().chain(&self.ie_corr) {
            let (a, b) = (pc.a as usize, pc.b as usize);
            let t = pc.delta * (values[a] - values[b]);
            y[a] += t;
            y[b] -= t;
        }
        for v in y.iter_mut() {
            *v *= 2.0;
        }
        // Self-pair gradient model.
        let stencils = mesh.gradient_stencils();
        for i in 0..n_i {
            let g = mesh.gradient_at(values, i);
            let t = &self.diag_t[i];
            let m = [t[0] * g[0] + t[2] * g[1], t[2] * g[0] + t[1] * g[1]];
            let st = &stencils[i];
            let mut csum = [0.0, 0.0];
            for (kk, &j) in st.neighbors.iter().enumerate() {
                let c = st.coeffs[kk];
                y[j as usize] += c[0] * m[0] + c[1] * m[1];
                csum[0] += c[0];
                csum[1] += c[1];
            }
            y[i] -= csum[0] * m[0] + csum[1] * m[1];
        }
        // Tail rows.
        for i in 0..n_i {
            y[i] += 2.0 * self.tail_w[i] * (values[i] - far);
        }
    }

    /// Scaled inner-product rows: kappa * G rows + interior mass rows.
    pub fn apply_scaled(&self, values: &[f64], far: f64, y: &mut [f64]) {
        self.apply_raw(values, far, y);
        let ws = self.mesh.weights();
        for v in y.iter_mut() {
            *v *= self.kappa;
        }
        for i in 0..self.mesh.n_interior() {
            y[i] += ws[i] * values[i];
        }
    }

    /// Exterior values that make every exterior row of the raw form vanish:
    /// u_e = sum_i c_ie u_i / sum_i c_ie. Also sets the far value to the
    /// tail-weighted interior mean.
    pub fn exterior_closure(&self, u: &Field) -> Result<Field> {
        self.check_mesh(u)?;
        let mut values = u.values().to_vec();
        self.close_values(&mut values);
        let far = self.far_mean(&values);
        Ok(Field::from_values(self.mesh(), values)?.with_far(far))
    }

    /// In-place closure of the exterior entries from the interior ones.
    pub fn close_values(&self, values: &mut [f64]) {
        let mesh = &self.mesh;
        let n_i = mesh.n_interior();
        let n_t = mesh.n_total();
        let xs = mesh.xs();
        let ys = mesh.ys();
        let ws = mesh.weights();
        let mut num = vec![0.0; n_t - n_i];
        with_kernel!(&self.params, k, {
            for e in n_i..n_t {
                let (xe, ye, we, ee) = (xs[e], ys[e], ws[e], self.exts[e]);
                let mut acc = 0.0;
                for i in 0..n_i {
                    let dx = xs[i] - xe;
                    let dy = ys[i] - ye;
                    let r2 = floor_r2(dx * dx + dy * dy, self.exts[i], ee);
                    acc += ws[i] * k.k(r2) * values[i];
                }
                num[e - n_i] = we * acc;
            }
        });
        for pc in &self.ie_corr {
            num[pc.b as usize - n_i] += pc.delta * values[pc.a as usize];
        }
        for e in n_i..n_t {
            values[e] = num[e - n_i] / self.cl_den[e - n_i];
        }
    }

    fn check_mesh(&self, u: &Field) -> Result<()> {
        if !Arc::ptr_eq(u.mesh(), &self.mesh) {
            return Err(Error::MeshMismatch);
        }
        Ok(())
    }

    /// Raw form pieces by region, through the same coefficients as
    /// `apply_raw` but summed directly (report path, not hot).
    pub fn form_parts(&self, u: &Field, v: &Field) -> Result<FormParts> {
        self.check_mesh(u)?;
        self.check_mesh(v)?;
        let mesh = &self.mesh;
        let n_i = mesh.n_interior();
        let n_t = mesh.n_total();
        let xs = mesh.xs();
        let ys = mesh.ys();
        let ws = mesh.weights();
        let uu = u.values();
        let vv = v.values();
        let mut interior = 0.0;
        let mut cross = 0.0;
        with_kernel!(&self.params, k, {
            match &self.lattice {
                Some(lm) => {
                    // Polarized grid part: the pair sum over grid cells is
                    // sum_i w_i (2 u_i v_i S_i - u_i T^v_i - v_i T^u_i).
                    let tv = lm.weighted_conv(ws, vv);
                    let tu = lm.weighted_conv(ws, uu);
                    for &i in &lm.lat {
                        let i = i as usize;
                        let p = lm.pos[i];
                        interior += ws[i]
                            * (2.0 * uu[i] * vv[i] * lm.s_grid[p] - uu[i] * tv[p] - vv[i] * tu[p]);
                    }
                    for &d in &lm.off {
                        let d = d as usize;
                        let (xd, yd) = (xs[d], ys[d]);
                        let mut acc = 0.0;
                        for j in 0..d {
                            let dx = xs[j] - xd;
                            let dy = ys[j] - yd;
                            acc +=
                                ws[j] * k.k(dx * dx + dy * dy) * (uu[d] - uu[j]) * (vv[d] - vv[j]);
                        }
                        for j in d + 1..n_i {
                            let dx = xs[j] - xd;
                            let dy = ys[j] - yd;
                            acc += lm.wm[j]
                                * k.k(dx * dx + dy * dy)
                                * (uu[d] - uu[j])
                                * (vv[d] - vv[j]);
                        }
                        interior += 2.0 * ws[d] * acc;
                    }
                }
                None => {
                    for i in 1..n_i {
                        let (xi, yi_) = (xs[i], ys[i]);
                        let mut acc = 0.0;
                        for j in 0..i {
                            let dx = xs[j] - xi;
                            let dy = ys[j] - yi_;
                            let c = ws[j] * k.k(dx * dx + dy * dy);
                            acc += c * (uu[i] - uu[j]) * (vv[i] - vv[j]);
                        }
                        interior += 2.0 * ws[i] * acc;
                    }
                }
            }
            for i in 0..n_i {
                let (xi, yi_, ei) = (xs[i], ys[i], self.exts[i]);
                let mut acc = 0.0;
                for e in n_i..n_t {
                    let dx = xs[e] - xi;
                    let dy = ys[e] - yi_;
                    let r2 = floor_r2(dx * dx + dy * dy, ei, self.exts[e]);
                    acc += ws[e] * k.k(r2) * (uu[i] - uu[e]) * (vv[i] - vv[e]);
                }
                cross += 2.0 * ws[i] * acc;
            }
        });
        for pc in &self.ii_corr {
            let (a, b) = (pc.a as usize, pc.b as usize);
            interior += 2.0 * pc.delta * (uu[a] - uu[b]) * (vv[a] - vv[b]);
        }
        for pc in &self.ie_corr {
            let (a, b) = (pc.a as usize, pc.b as usize);
            cross += 2.0 * pc.delta * (uu[a] - uu[b]) * (vv[a] - vv[b]);
        }
        for i in 0..n_i {
            let gu = mesh.gradient_at(uu, i);
            let gv = mesh.gradient_at(vv, i);
            let t = &self.diag_t[i];
            interior += t[0] * gu[0] * gv[0]
                + t[1] * gu[1] * gv[1]
                + t[2] * (gu[0] * gv[1] + gu[1] * gv[0]);
        }
        let tail = self.tail_over(0..n_i, u, v);
        Ok(FormParts {
            interior,
            cross,
            tail,
        })
    }

    /// Tail term restricted to a set of interior cells:
    /// 2 sum w_i T_i (u_i - far_u)(v_i - far_v).
    pub fn tail_over(&self, idx: impl IntoIterator<Item = usize>, u: &Field, v: &Field) -> f64 {
        let (fu, fv) = (u.far(), v.far());
        let uu = u.values();
        let vv = v.values();
        let mut t = 0.0;
        for i in idx {
            t += 2.0 * self.tail_w[i] * (uu[i] - fu) * (vv[i] - fv);
        }
        t
    }

    /// Full scaled inner product with its pieces.
    pub fn bilinear(&self, u: &Field, v: &Field) -> Result<BilinearReport> {
        let parts = self.form_parts(u, v)?;
        let ws = self.mesh.weights();
        let mass: f64 = (0..self.mesh.n_interior())
            .map(|i| ws[i] * u.values()[i] * v.values()[i])
            .sum();
        let gagliardo = parts.interior + parts.cross + parts.tail;
        Ok(BilinearReport {
            parts,
            gagliardo,
            scaled: self.kappa * gagliardo,
            mass,
            total: self.kappa * gagliardo + mass,
        })
    }

    /// Pointwise fractional Laplacian at interior node i: the principal
    /// value skips the node's own cell (a symmetric exclusion), sums the
    /// kernel against all other cells, and closes with the analytic tail.
    pub fn fractional_laplacian(&self, u: &Field, i: usize) -> Result<f64> {
        self.check_mesh(u)?;
        let mesh = &self.mesh;
        let n_i = mesh.n_interior();
        if i >= n_i {
            return Err(Error::field(format!("node {i} is not interior")));
        }
        let xs = mesh.xs();
        let ys = mesh.ys();
        let ws = mesh.weights();
        let uu = u.values();
        let (xi, yi_, ui, ei) = (xs[i], ys[i], uu[i], self.exts[i]);
        let mut acc = 0.0;
        with_kernel!(&self.params, k, {
            for j in 0..mesh.n_total() {
                if j == i {
                    continue;
                }
                let dx = xs[j] - xi;
                let dy = ys[j] - yi_;
                let mut r2 = dx * dx + dy * dy;
                if j >= n_i {
                    r2 = floor_r2(r2, ei, self.exts[j]);
                }
                acc += ws[j] * k.k(r2) * (ui - uu[j]);
            }
        });
        acc += self.tail_w[i] / ws[i] * (ui - u.far());
        Ok(self.params.c_norm * acc)
    }

    /// Pointwise nonlocal flux at exterior node e, using the same
    /// coefficients as the closure (so closed fields give exactly zero).
    pub fn neumann_value(&self, u: &Field, e: usize) -> Result<f64> {
        self.check_mesh(u)?;
        let mesh = &self.mesh;
        let n_i = mesh.n_interior();
        if e < n_i || e >= mesh.n_total() {
            return Err(Error::field(format!("node {e} is not exterior")));
        }
        let xs = mesh.xs();
        let ys = mesh.ys();
        let ws = mesh.weights();
        let uu = u.values();
        let (xe, ye, ue, ee) = (xs[e], ys[e], uu[e], self.exts[e]);
        let mut acc = 0.0;
        with_kernel!(&self.params, k, {
            for i in 0..n_i {
                let dx = xs[i] - xe;
                let dy = ys[i] - ye;
                let r2 = floor_r2(dx * dx + dy * dy, self.exts[i], ee);
                acc += ws[i] * k.k(r2) * (ue - uu[i]);
            }
        });
        acc *= ws[e];
        for pc in &self.ie_corr {
            if pc.b as usize == e {
                let i = pc.a as usize;
                acc += pc.delta * (ue - uu[i]);
            }
        }
        Ok(self.params.c_norm * acc / ws[e])
    }

    /// Discrete counterpart of the integration-by-parts identity: half the
    /// raw form equals the operator sums against the test data, including
    /// the block beyond the truncation ball where the test field is its
    /// far value. Exact up to floating-point reassociation.
    pub fn green_identity(&self, u: &Field, v: &Field) -> Result<GreenReport> {
        self.check_mesh(u)?;
        self.check_mesh(v)?;
        let parts = self.form_parts(u, v)?;
        let half_form = 0.5 * (parts.interior + parts.cross + parts.tail);
        let n_i = self.mesh.n_interior();
        let mut y = vec![0.0; self.mesh.n_total()];
        self.apply_raw(u.values(), u.far(), &mut y);
        let vv = v.values();
        let interior_sum: f64 = (0..n_i).map(|i| 0.5 * vv[i] * y[i]).sum();
        let exterior_sum: f64 = (n_i..self.mesh.n_total()).map(|e| 0.5 * vv[e] * y[e]).sum();
        let tail_flux: f64 = self
            .tail_w
            .iter()
            .zip(u.values())
            .map(|(t, ui)| t * (ui - u.far()))
            .sum();
        let beyond_sum = -v.far() * tail_flux;
        let residual = half_form - interior_sum - exterior_sum - beyond_sum;
        let scale = half_form
            .abs()
            .max(interior_sum.abs() + exterior_sum.abs() + beyond_sum.abs())
            .max(f64::MIN_POSITIVE);
        Ok(GreenReport {
            half_form,
            interior_sum,
            exterior_sum,
            beyond_sum,
            residual,
            scale,
        })
    }

    /// Dense scaled inner-product matrix over all mesh values. Closure is
    /// not applied; exterior degrees of freedom are free columns.
    pub fn assemble_dense(&self) -> Result<DMatrix<f64>> {
        let mesh = &self.mesh;
        let n_i = mesh.n_interior();
        let n_t = mesh.n_total();
        if n_t > DENSE_MAX_DOFS {
            return Err(Error::mesh(format!(
                "dense assembly over {n_t} cells exceeds the {DENSE_MAX_DOFS} cap"
            )));
        }
        let xs = mesh.xs();
        let ys = mesh.ys();
        let ws = mesh.weights();
        let kap2 = 2.0 * self.kappa;
        let mut a = DMatrix::<f64>::zeros(n_t, n_t);
        let mut add_pair = |i: usize, j: usize, c: f64| {
            a[(i, i)] += c;
            a[(j, j)] += c;
            a[(i, j)] -= c;
            a[(j, i)] -= c;
        };
        with_kernel!(&self.params, k, {
            for i in 1..n_i {
                for j in 0..i {
                    let dx = xs[j] - xs[i];
                    let dy = ys[j] - ys[i];
                    add_pair(i, j, kap2 * ws[i] * ws[j] * k.k(dx * dx + dy * dy));
                }
            }
            for i in 0..n_i {
                for e in n_i..n_t {
                    let dx = xs[e] - xs[i];
                    let dy = ys[e] - ys[i];
                    let r2 = floor_r2(dx * dx + dy * dy, self.exts[i], self.exts[e]);
                    add_pair(i, e, kap2 * ws[i] * ws[e] * k.k(r2));
                }
            }
        });
        for pc in self.ii_corr.iter().chain(&self.ie_corr) {
            add_pair(pc.a as usize, pc.b as usize, kap2 * pc.delta);
        }
        // Self-pair gradient model: kappa * (S_i)^T T_i (S_i) with S_i the
        // stencil map from nodal values to the gradient at node i.
        let stencils = mesh.gradient_stencils();
        for i in 0..n_i {
            let st = &stencils[i];
            let t = &self.diag_t[i];
            let mut cols: Vec<(usize, [f64; 2])> = st
                .neighbors
                .iter()
                .zip(&st.coeffs)
                .map(|(&j, &c)| (j as usize, c))
                .collect();
            let mut self_c = [0.0, 0.0];
            for (_, c) in &cols {
                self_c[0] -= c[0];
                self_c[1] -= c[1];
            }
            cols.push((i, self_c));
            for (ja, ca) in &cols {
                let ta = [t[0] * ca[0] + t[2] * ca[1], t[2] * ca[0] + t[1] * ca[1]];
                for (jb, cb) in &cols {
                    a[(*ja, *jb)] += self.kappa * (ta[0] * cb[0] + ta[1] * cb[1]);
                }
            }
        }
        // Tail block: 2 kappa (D - d d^T / sum d), d_i = w_i T_i.
        for i in 0..n_i {
            a[(i, i)] += kap2 * self.tail_w[i];
            for j in 0..n_i {
                a[(i, j)] -= kap2 * self.tail_w[i] * self.tail_w[j] / self.tail_sum;
            }
        }
        for i in 0..n_i {
            a[(i, i)] += ws[i];
        }
        Ok(a)
    }

    /// Dense closure matrix C (exterior rows by interior columns):
    /// closing a field is u_E = C u_I.
    pub fn closure_matrix(&self) -> Result<DMatrix<f64>> {
        let mesh = &self.mesh;
        let n_i = mesh.n_interior();
        let n_e = mesh.n_exterior();
        if mesh.n_total() > DENSE_MAX_DOFS {
            return Err(Error::mesh(format!(
                "dense closure over {} cells exceeds the {DENSE_MAX_DOFS} cap",
                mesh.n_total()
            )));
        }
        let xs = mesh.xs();
        let ys = mesh.ys();
        let ws = mesh.weights();
        let mut c = DMatrix::<f64>::zeros(n_e, n_i);
        with_kernel!(&self.params, k, {
            for e in 0..n_e {
                let ge = e + n_i;
                for i in 0..n_i {
                    let dx = xs[i] - xs[ge];
                    let dy = ys[i] - ys[ge];
                    let r2 = floor_r2(dx * dx + dy * dy, self.exts[i], self.exts[ge]);
                    c[(e, i)] = ws[ge] * ws[i] * k.k(r2);
                }
            }
        });
        for pc in &self.ie_corr {
            c[(pc.b as usize - n_i, pc.a as usize)] += pc.delta;
        }
        for e in 0..n_e {
            let den = self.cl_den[e];
            for i in 0..n_i {
                c[(e, i)] /= den;
            }
        }
        Ok(c)
    }
}

/// Raw form pieces: interior pairs (with self-pair models), cross pairs
/// into the meshed exterior, and the analytic tail. Their sum is G.
#[derive(Debug, Clone, Copy)]
pub struct FormParts {
    pub interior: f64,
    pub cross: f64,
    pub tail: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BilinearReport {
    pub parts: FormParts,
    /// Raw G(u, v).
    pub gagliardo: f64,
    /// kappa * G(u, v).
    pub scaled: f64,
    /// Interior mass term.
    pub mass: f64,
    /// Full inner product kappa G + mass.
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GreenReport {
    pub half_form: f64,
    pub interior_sum: f64,
    pub exterior_sum: f64,
    pub beyond_sum: f64,
    pub residual: f64,
    pub scale: f64,
}
