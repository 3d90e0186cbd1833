//! Kernel parameters and quadrature for the singular pair integrand.
//!
//! Everything here works with the raw kernel `|x - y|^(-(n + 2s))`; the
//! normalization constant and epsilon powers are applied by callers. Pair
//! integrals between touching or identical cells go through a subdivided
//! midpoint rule that excludes a diagonal band and extrapolates the band
//! content away; far pairs are plain midpoint products.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{Cell, Point};
use statrs::function::gamma::gamma;
use std::collections::HashMap;
use std::f64::consts::PI;

/// Subcells per axis inside the near-singular pair rule.
const RULE_SUBDIV_1D: usize = 32;
const RULE_SUBDIV_2D: usize = 12;
/// Band exclusion radii in units of the subcell diameter. The two levels
/// feed the extrapolation that removes the leading band-content term.
/// Neither radius squares to an integer, so no lattice point pair of an
/// equal-pitch cell pair can sit exactly on a band boundary; membership
/// is then stable against last-ulp coordinate noise.
const BAND_COARSE: f64 = 2.5;
const BAND_FINE: f64 = 1.25;
/// Boxes with a gap below this (relative to their extent) count as touching.
pub const TOUCH_REL: f64 = 1e-9;
/// Kernel distance floor, as a fraction of the mean cell extent, for node
/// pairs whose boxes genuinely overlap (cross-region pairs on curved
/// boundaries). Keeps those bounded without changing far pairs.
pub const CROSS_FLOOR: f64 = 0.5;

/// Dispatch a monomorphized kernel evaluator: `$k` is bound to a concrete
/// type implementing `KernelEval` and `$body` is compiled once per branch,
/// so hot loops vectorize without a per-pair exponent branch.
#[macro_export]
macro_rules! with_kernel {
    ($params:expr, $k:ident, $body:expr) => {{
        let __q2 = $params.q_half();
        if __q2 == 1.5 {
            let $k = $crate::kernel::InvPow32;
            $body
        } else if __q2 == 1.0 {
            let $k = $crate::kernel::InvPow1;
            $body
        } else if __q2 == 0.75 {
            let $k = $crate::kernel::InvPow34;
            $body
        } else {
            let $k = $crate::kernel::GenPow(-__q2);
            $body
        }
    }};
}

pub trait KernelEval: Copy {
    /// Kernel value as a function of the squared distance.
    fn k(self, r2: f64) -> f64;
}

/// r2^(-3/2), the planar case with s = 1/2.
#[derive(Clone, Copy)]
pub struct InvPow32;
impl KernelEval for InvPow32 {
    #[inline(always)]
    fn k(self, r2: f64) -> f64 {
        1.0 / (r2 * r2.sqrt())
    }
}

/// r2^(-3/4), the line case with s = 1/4.
#[derive(Clone, Copy)]
pub struct InvPow34;
impl KernelEval for InvPow34 {
    #[inline(always)]
    fn k(self, r2: f64) -> f64 {
        1.0 / (r2 * r2.sqrt()).sqrt()
    }
}

/// r2^(-1), the line case with s = 1/2.
#[derive(Clone, Copy)]
pub struct InvPow1;
impl KernelEval for InvPow1 {
    #[inline(always)]
    fn k(self, r2: f64) -> f64 {
        1.0 / r2
    }
}

/// General r2^e fallback; `e` is the (negative) exponent of r squared.
#[derive(Clone, Copy)]
pub struct GenPow(pub f64);
impl KernelEval for GenPow {
    #[inline(always)]
    fn k(self, r2: f64) -> f64 {
        r2.powf(self.0)
    }
}

#[inline(always)]
pub fn dist2(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Problem parameters: dimension, kernel order, nonlinearity power, and
/// the small length scale. Carries the kernel normalization constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Params {
    pub dim: usize,
    pub s: f64,
    pub p: f64,
    pub epsilon: f64,
    pub c_norm: f64,
}

impl Params {
    pub fn new(dim: usize, s: f64, p: f64, epsilon: f64) -> Result<Self> {
        let c_norm = normalization_constant(dim, s)?;
        if !p.is_finite() || p <= 1.0 {
            return Err(Error::params(format!("power p = {p} must exceed 1")));
        }
        if let Some(limit) = supercritical_limit(dim, s) {
            if p >= limit {
                return Err(Error::params(format!(
                    "power p = {p} must stay below the critical exponent {limit} for n = {dim}, s = {s}"
                )));
            }
        }
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::params(format!("length scale epsilon = {epsilon} must be positive")));
        }
        Ok(Self { dim, s, p, epsilon, c_norm })
    }

    /// Exponent of the squared distance: (n + 2s) / 2.
    #[inline(always)]
    pub fn q_half(&self) -> f64 {
        0.5 * (self.dim as f64 + 2.0 * self.s)
    }

    /// Raw kernel at squared distance r2 (no normalization constant).
    #[inline]
    pub fn kernel_r2(&self, r2: f64) -> f64 {
        with_kernel!(self, k, k.k(r2))
    }

    pub fn epsilon_power(&self) -> f64 {
        self.epsilon.powf(2.0 * self.s)
    }
}

/// Raw kernel between two points (no normalization constant).
pub fn kernel_value(x: Point, y: Point, params: &Params) -> f64 {
    params.kernel_r2(dist2(x, y))
}

/// Critical power (n + 2s) / (n - 2s), or None when every p > 1 is allowed.
fn supercritical_limit(dim: usize, s: f64) -> Option<f64> {
    let n = dim as f64;
    if n > 2.0 * s {
        Some((n + 2.0 * s) / (n - 2.0 * s))
    } else {
        None
    }
}

/// 4^s s Gamma(n/2 + s) / (pi^(n/2) Gamma(1 - s)).
pub fn normalization_constant(dim: usize, s: f64) -> Result<f64> {
    if dim != 1 && dim != 2 {
        return Err(Error::params(format!("dimension must be 1 or 2, got {dim}")));
    }
    if !s.is_finite() || s <= 0.0 || s >= 1.0 {
        return Err(Error::params(format!("order s = {s} must lie in (0, 1)")));
    }
    let n = dim as f64;
    Ok(4f64.powf(s) * s * gamma(n / 2.0 + s) / (PI.powf(n / 2.0) * gamma(1.0 - s)))
}

/// Midpoint lattice over the full box of a cell: points, subcell measure,
/// and subcell diameter.
fn lattice(c: &Cell, dim: usize) -> (Vec<Point>, f64, f64) {
    if dim == 1 {
        let m = RULE_SUBDIV_1D;
        let d = (c.hi[0] - c.lo[0]) / m as f64;
        let pts = (0..m).map(|i| [c.lo[0] + (i as f64 + 0.5) * d, 0.0]).collect();
        (pts, d, d)
    } else {
        let m = RULE_SUBDIV_2D;
        let dx = (c.hi[0] - c.lo[0]) / m as f64;
        let dy = (c.hi[1] - c.lo[1]) / m as f64;
        let mut pts = Vec::with_capacity(m * m);
        for j in 0..m {
            for i in 0..m {
                pts.push([c.lo[0] + (i as f64 + 0.5) * dx, c.lo[1] + (j as f64 + 0.5) * dy]);
            }
        }
        (pts, dx * dy, dx.hypot(dy))
    }
}

/// True when the boxes share measurably more than a face: per-axis overlap
/// beyond `tol` in every direction.
pub fn boxes_overlap(a: &Cell, b: &Cell, dim: usize, tol: f64) -> bool {
    let ox = (a.hi[0].min(b.hi[0]) - a.lo[0].max(b.lo[0])).max(0.0);
    if dim == 1 {
        return ox > tol;
    }
    let oy = (a.hi[1].min(b.hi[1]) - a.lo[1].max(b.lo[1])).max(0.0);
    ox > tol && oy > tol
}

/// Double integral of `(f(x) - f(y))^2 |x - y|^(-(n + 2s))` over the boxes
/// of two identical or touching cells.
///
/// Both boxes get a midpoint sublattice; pairs inside a diagonal band
/// `|x - y| <= delta` are dropped at two band widths, and the band content
/// is removed by extrapolation in its known leading order: delta^(2 - 2s)
/// for identical cells, delta^(3 - 2s) for touching ones.
pub fn singular_cell_rule(
    a: &Cell,
    b: &Cell,
    f: impl Fn(Point) -> f64,
    params: &Params,
) -> Result<f64> {
    let dim = params.dim;
    let identical = a.same_box(b);
    let scale = a.extent(dim).max(b.extent(dim));
    if !identical {
        if boxes_overlap(a, b, dim, TOUCH_REL * scale) {
            return Err(Error::params("cell boxes overlap but are not identical"));
        }
        if a.gap(b, dim) > TOUCH_REL * scale {
            return Err(Error::params("cells must be identical or touching"));
        }
    }
    let (pa, wa, da) = lattice(a, dim);
    let (pb, wb, db) = if identical {
        (pa.clone(), wa, da)
    } else {
        lattice(b, dim)
    };
    let dsub = da.max(db);
    let d1 = BAND_COARSE * dsub;
    let d2 = BAND_FINE * dsub;
    let (d1sq, d2sq) = (d1 * d1, d2 * d2);
    let fa: Vec<f64> = pa.iter().map(|&p| f(p)).collect();
    let fb: Vec<f64> = pb.iter().map(|&p| f(p)).collect();
    let mut fine = 0.0;
    let mut coarse = 0.0;
    with_kernel!(params, k, {
        for (x, fx) in pa.iter().zip(&fa) {
            for (y, fy) in pb.iter().zip(&fb) {
                let r2 = dist2(*x, *y);
                if r2 <= d2sq {
                    continue;
                }
                let df = fx - fy;
                let t = df * df * k.k(r2);
                fine += t;
                if r2 > d1sq {
                    coarse += t;
                }
            }
        }
    });
    let fine = fine * wa * wb;
    let coarse = coarse * wa * wb;
    let gamma_band = if identical { 2.0 - 2.0 * params.s } else { 3.0 - 2.0 * params.s };
    let rho = (BAND_FINE / BAND_COARSE).powf(gamma_band);
    Ok(fine + (fine - coarse) * rho / (1.0 - rho))
}

/// Memoized singular-pair moments, keyed by relative box geometry plus the
/// absolute scale, so translated copies of a pair share one quadrature
/// evaluation while similar pairs of different sizes stay apart.
#[derive(Debug, Default)]
pub struct MomentCache {
    m2: HashMap<[i64; 7], f64>,
    t: HashMap<[i64; 7], [f64; 3]>,
}

fn moment_key(a: &Cell, b: &Cell, dim: usize) -> [i64; 7] {
    let scale = a.extent(dim).max(b.extent(dim));
    let q = |x: f64| (x / scale * 1e9).round() as i64;
    [
        q(b.lo[0] - a.lo[0]),
        q(b.lo[1] - a.lo[1]),
        q(a.hi[0] - a.lo[0]),
        q(a.hi[1] - a.lo[1]),
        q(b.hi[0] - b.lo[0]),
        q(b.hi[1] - b.lo[1]),
        scale.to_bits() as i64,
    ]
}

/// Shift a cell pair so `a.lo` is the origin. Linear probe fields only see
/// point differences, so the moments are unchanged; evaluating every
/// congruent pair in one frame makes the cached value order-independent.
fn canonical_pair(a: &Cell, b: &Cell) -> (Cell, Cell) {
    let o = a.lo;
    let shift = |c: &Cell| {
        let mut d = *c;
        d.lo = [c.lo[0] - o[0], c.lo[1] - o[1]];
        d.hi = [c.hi[0] - o[0], c.hi[1] - o[1]];
        d.node = [c.node[0] - o[0], c.node[1] - o[1]];
        d
    };
    (shift(a), shift(b))
}

impl MomentCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// `int int ((x - y) . e)^2 K` over a touching pair, with `e` the unit
    /// vector from node of `a` to node of `b`.
    pub fn pair_m2(&mut self, a: &Cell, b: &Cell, params: &Params) -> Result<f64> {
        let key = moment_key(a, b, params.dim);
        if let Some(&v) = self.m2.get(&key) {
            return Ok(v);
        }
        let (ca, cb) = canonical_pair(a, b);
        let ex = cb.node[0] - ca.node[0];
        let ey = cb.node[1] - ca.node[1];
        let l = ex.hypot(ey);
        let (ex, ey) = (ex / l, ey / l);
        let v = singular_cell_rule(&ca, &cb, |p| p[0] * ex + p[1] * ey, params)?;
        self.m2.insert(key, v);
        Ok(v)
    }

    /// Second moments [Txx, Tyy, Txy] of one cell against itself, so the
    /// self contribution of nodal data with gradient g is `g^T T g`.
    pub fn diag_t(&mut self, c: &Cell, params: &Params) -> Result<[f64; 3]> {
        let key = moment_key(c, c, params.dim);
        if let Some(&v) = self.t.get(&key) {
            return Ok(v);
        }
        let (cc, _) = canonical_pair(c, c);
        let txx = singular_cell_rule(&cc, &cc, |p| p[0], params)?;
        let v = if params.dim == 1 {
            [txx, 0.0, 0.0]
        } else {
            let tyy = singular_cell_rule(&cc, &cc, |p| p[1], params)?;
            let tpp = singular_cell_rule(&cc, &cc, |p| p[0] + p[1], params)?;
            let tmm = singular_cell_rule(&cc, &cc, |p| p[0] - p[1], params)?;
            [txx, tyy, 0.25 * (tpp - tmm)]
        };
        self.t.insert(key, v);
        Ok(v)
    }
}

/// Raw pair integral of one field over two index sets, with an error
/// estimate from one level of cell refinement.
#[derive(Debug, Clone)]
pub struct PairEnergy {
    pub value: f64,
    pub error_estimate: f64,
    pub labels: (String, String),
}

impl PairEnergy {
    pub fn labeled(mut self, a: impl Into<String>, b: impl Into<String>) -> Self {
        self.labels = (a.into(), b.into());
        self
    }
}

#[derive(Clone, Copy)]
struct NodeData {
    cell: Cell,
    value: f64,
    grad: Point,
}

/// `int_A int_B (u(x) - u(y))^2 |x - y|^(-(n+2s))` over the cells listed in
/// `a` and `b` (an ordered product: common indices contribute both ways).
///
/// Identical pairs use the stencil-gradient model, touching pairs the
/// two-point difference along the node offset, far pairs plain midpoints.
/// Cells clipped by a boundary are scaled by their measure ratio.
pub fn pair_energy(u: &Field, a: &[usize], b: &[usize], params: &Params) -> Result<PairEnergy> {
    let mesh = u.mesh();
    if mesh.domain.dim != params.dim {
        return Err(Error::params("parameter dimension does not match the mesh"));
    }
    let n = mesh.n_total();
    if let Some(&bad) = a.iter().chain(b).find(|&&i| i >= n) {
        return Err(Error::field(format!("cell index {bad} out of range ({n} cells)")));
    }
    // Gather the involved cells once; positions index into `data`.
    let mut pos: HashMap<usize, usize> = HashMap::new();
    let mut data: Vec<NodeData> = Vec::new();
    let localize = |idx: &[usize], data: &mut Vec<NodeData>, pos: &mut HashMap<usize, usize>| {
        idx.iter()
            .map(|&i| {
                *pos.entry(i).or_insert_with(|| {
                    data.push(NodeData {
                        cell: mesh.cells()[i],
                        value: u.values()[i],
                        grad: mesh.gradient_at(u.values(), i),
                    });
                    data.len() - 1
                })
            })
            .collect::<Vec<usize>>()
    };
    let la = localize(a, &mut data, &mut pos);
    let lb = localize(b, &mut data, &mut pos);
    let mut cache = MomentCache::new();
    let value = pair_sum(&data, &la, &lb, &mut cache, params)?;
    // One refinement level: children carry the parent affine model.
    let children = refine(&data, params.dim);
    let kids = 1 << params.dim;
    let expand = |l: &[usize]| -> Vec<usize> {
        l.iter().flat_map(|&i| (0..kids).map(move |k| i * kids + k)).collect()
    };
    let refined = pair_sum(&children, &expand(&la), &expand(&lb), &mut cache, params)?;
    Ok(PairEnergy {
        value,
        error_estimate: (refined - value).abs(),
        labels: ("a".into(), "b".into()),
    })
}

fn pair_sum(
    data: &[NodeData],
    a: &[usize],
    b: &[usize],
    cache: &mut MomentCache,
    params: &Params,
) -> Result<f64> {
    let dim = params.dim;
    let mut total = 0.0;
    with_kernel!(params, k, {
        for &i in a {
            let di = &data[i];
            let ri = di.cell.weight / di.cell.box_measure(dim);
            for &j in b {
                if i == j {
                    let t = cache.diag_t(&di.cell, params)?;
                    let g = di.grad;
                    total +=
                        ri * ri * (g[0] * g[0] * t[0] + g[1] * g[1] * t[1] + 2.0 * g[0] * g[1] * t[2]);
                    continue;
                }
                let dj = &data[j];
                let r2 = dist2(di.cell.node, dj.cell.node);
                let scale = di.cell.extent(dim).max(dj.cell.extent(dim));
                let tol = TOUCH_REL * scale;
                let dv = di.value - dj.value;
                if boxes_overlap(&di.cell, &dj.cell, dim, tol) {
                    // Boxes from different grids can straddle a curved
                    // boundary; keep the kernel bounded at the cell scale.
                    let rf = CROSS_FLOOR * 0.5 * (di.cell.extent(dim) + dj.cell.extent(dim));
                    total += di.cell.weight * dj.cell.weight * dv * dv * k.k(r2.max(rf * rf));
                } else if di.cell.gap(&dj.cell, dim) <= tol {
                    let rj = dj.cell.weight / dj.cell.box_measure(dim);
                    let m2 = cache.pair_m2(&di.cell, &dj.cell, params)?;
                    total += ri * rj * dv * dv / r2 * m2;
                } else {
                    total += di.cell.weight * dj.cell.weight * dv * dv * k.k(r2);
                }
            }
        }
    });
    Ok(total)
}

/// Split each cell into 2^dim children; values follow the parent gradient.
fn refine(data: &[NodeData], dim: usize) -> Vec<NodeData> {
    let mut out = Vec::with_capacity(data.len() << dim);
    for d in data {
        let c = d.cell;
        let boxes: Vec<(Point, Point)> = if dim == 1 {
            let mx = 0.5 * (c.lo[0] + c.hi[0]);
            vec![(c.lo, [mx, c.hi[1]]), ([mx, c.lo[1]], c.hi)]
        } else {
            let mx = 0.5 * (c.lo[0] + c.hi[0]);
            let my = 0.5 * (c.lo[1] + c.hi[1]);
            vec![
                (c.lo, [mx, my]),
                ([mx, c.lo[1]], [c.hi[0], my]),
                ([c.lo[0], my], [mx, c.hi[1]]),
                ([mx, my], c.hi),
            ]
        };
        for (lo, hi) in boxes {
            let node = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
            let value = d.value
                + d.grad[0] * (node[0] - c.node[0])
                + d.grad[1] * (node[1] - c.node[1]);
            out.push(NodeData {
                cell: Cell {
                    lo,
                    hi,
                    node,
                    weight: c.weight / (1 << dim) as f64,
                    region: c.region,
                },
                value,
                grad: d.grad,
            });
        }
    }
    out
}
