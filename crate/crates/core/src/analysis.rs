//! Closed-form constants, the cone test field, and estimate audits.
//!
//! Everything here cross-examines the discrete machinery against exact
//! values: the cone profile's L2 mass and ray-crossing times, the Beta
//! constant behind its potential, the split of its energy seminorm into
//! region pieces, scaling fits over parameter sweeps, and the two
//! integrability functionals (a weighted L1 mass with an analytic far
//! tail and a boundary-collar L2 bound with structurally nonnegative
//! slack).

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{Collar, Domain, Mesh, Point};
use crate::kernel::{pair_energy, Params};
use crate::operators::NonlocalForm;
use statrs::function::gamma::gamma;
use std::sync::Arc;

/// Surface measure of the unit sphere bounding the unit ball in n
/// dimensions: 2, 2*pi, 4*pi.
pub fn unit_sphere_measure(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 4.0 * std::f64::consts::PI,
    }
}

/// Cone profile of height eps^(-n) supported on the ball of radius eps.
#[derive(Debug, Clone, Copy)]
pub struct TentSpec {
    pub center: Point,
    pub eps: f64,
}

impl TentSpec {
    /// The doubled support ball must sit strictly inside the domain.
    pub fn new(domain: &Domain, center: Point, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::params("cone width must be positive"));
        }
        if domain.interior_depth(center) <= 2.0 * eps {
            return Err(Error::params(format!(
                "ball of radius {} around the cone center must fit inside the domain",
                2.0 * eps
            )));
        }
        Ok(Self { center, eps })
    }
}

pub fn tent_field(spec: &TentSpec, mesh: &Arc<Mesh>) -> Result<Field> {
    // Revalidate against this mesh's domain.
    let spec = TentSpec::new(&mesh.domain, spec.center, spec.eps)?;
    let n = mesh.domain.dim as f64;
    let amp = spec.eps.powf(-n);
    let f = Field::from_fn(mesh, |p| {
        let r = (p[0] - spec.center[0]).hypot(p[1] - spec.center[1]);
        amp * (1.0 - r / spec.eps).max(0.0)
    })?;
    Ok(f.with_far(0.0))
}

/// Exact L2 mass of the cone profile:
/// 2 omega_{n-1} / (n (n+1) (n+2)) * eps^(-n).
pub fn phi_l2_exact(params: &Params) -> f64 {
    let n = params.dim as f64;
    2.0 * unit_sphere_measure(params.dim) / (n * (n + 1.0) * (n + 2.0))
        * params.epsilon.powf(-n)
}

/// Beta value int_0^1 (1 - r)^(p+1) r^(n-1) dr = Gamma(n) Gamma(p+2) /
/// Gamma(n+p+2), the radial factor of the cone profile's potential.
pub fn alpha_constant(n: usize, p: f64) -> Result<f64> {
    if n < 1 || !(p > 1.0) {
        return Err(Error::params("alpha needs n >= 1 and p > 1"));
    }
    Ok(gamma(n as f64) * gamma(p + 2.0) / gamma(n as f64 + p + 2.0))
}

/// Ray times from the measured quadratic coefficient: c0 is the
/// coefficient of t^2 in the ray energy scaled by eps^n. Returns the
/// maximizer t1 and the zero crossing t2 of the ray polynomial with the
/// cone profile's exact potential.
pub fn critical_times(c0_measured: f64, params: &Params) -> Result<(f64, f64)> {
    if !(c0_measured > 0.0) || !c0_measured.is_finite() {
        return Err(Error::params("measured quadratic coefficient must be positive"));
    }
    let p = params.p;
    let aw = alpha_constant(params.dim, p)? * unit_sphere_measure(params.dim);
    let epsn = params.epsilon.powi(params.dim as i32);
    let t1 = (2.0 * c0_measured / aw).powf(1.0 / (p - 1.0)) * epsn;
    let t2 = ((p + 1.0) * c0_measured / aw).powf(1.0 / (p - 1.0)) * epsn;
    Ok((t1, t2))
}

/// One row of the seminorm audit: the raw energy pieces of the cone
/// profile on one mesh, split by region.
#[derive(Debug, Clone, Copy)]
pub struct LedgerRow {
    pub eps: f64,
    /// Pairs with both nodes inside the support ball.
    pub support_pairs: f64,
    /// Both orders of support-ball against rest-of-domain pairs.
    pub mixed_pairs: f64,
    /// Rest against rest; only gradient models at the support rim
    /// contribute, since nodal values vanish there.
    pub rim_pairs: f64,
    /// Domain against exterior, meshed pairs plus the analytic tail.
    pub exterior_term: f64,
    /// Mesh quadrature of the squared profile.
    pub l2_mass: f64,
    /// Raw seminorm G, via the assembled form.
    pub seminorm: f64,
    /// Full squared norm kappa G + mass.
    pub norm_sq: f64,
    /// Relative defect of support + mixed + rim + exterior against the
    /// assembled seminorm.
    pub identity_gap: f64,
}

impl LedgerRow {
    /// Region pieces scaled by eps^(n+2s) and the squared norm by eps^n;
    /// all stay bounded across a dyadic sweep.
    pub fn normalized(&self, params: &Params) -> [f64; 5] {
        let e_pairs = self.eps.powf(params.dim as f64 + 2.0 * params.s);
        let e_norm = self.eps.powi(params.dim as i32);
        [
            self.support_pairs * e_pairs,
            self.mixed_pairs * e_pairs,
            self.rim_pairs * e_pairs,
            self.exterior_term * e_pairs,
            self.norm_sq * e_norm,
        ]
    }
}

#[derive(Debug)]
pub struct EstimateLedger {
    pub s: f64,
    pub p: f64,
    pub dim: usize,
    pub rows: Vec<LedgerRow>,
    /// Widths whose doubled support ball did not fit the domain.
    pub rejected: Vec<f64>,
}

/// Audit the cone profile's energy across widths: on each mesh, the
/// seminorm is recomputed from scratch as region-restricted pair sums and
/// reconciled against the assembled form.
pub fn phi_seminorm_ledger(
    base: &Params,
    eps_list: &[f64],
    mesh_for: impl Fn(f64) -> Result<Arc<Mesh>>,
) -> Result<EstimateLedger> {
    let mut ledger = EstimateLedger {
        s: base.s,
        p: base.p,
        dim: base.dim,
        rows: Vec::new(),
        rejected: Vec::new(),
    };
    for &eps in eps_list {
        let mesh = mesh_for(eps)?;
        let spec = match TentSpec::new(&mesh.domain, mesh.domain.centroid, eps) {
            Ok(s) => s,
            Err(_) => {
                ledger.rejected.push(eps);
                continue;
            }
        };
        let params = Params::new(base.dim, base.s, base.p, eps)?;
        let form = NonlocalForm::new(&mesh, &params)?;
        let phi = tent_field(&spec, &mesh)?;
        let (mut support, mut rest) = (Vec::new(), Vec::new());
        for i in 0..mesh.n_interior() {
            let q = mesh.node(i);
            let r = (q[0] - spec.center[0]).hypot(q[1] - spec.center[1]);
            if r < eps {
                support.push(i);
            } else {
                rest.push(i);
            }
        }
        let support_pairs = pair_energy(&phi, &support, &support, &params)?.value;
        let mixed_pairs = 2.0 * pair_energy(&phi, &support, &rest, &params)?.value;
        let rim_pairs = pair_energy(&phi, &rest, &rest, &params)?.value;
        let rep = form.bilinear(&phi, &phi)?;
        let exterior_term = rep.parts.cross + rep.parts.tail;
        let pieces = support_pairs + mixed_pairs + rim_pairs + exterior_term;
        let identity_gap = (pieces - rep.gagliardo).abs()
            / rep.gagliardo.abs().max(f64::MIN_POSITIVE);
        ledger.rows.push(LedgerRow {
            eps,
            support_pairs,
            mixed_pairs,
            rim_pairs,
            exterior_term,
            l2_mass: rep.mass,
            seminorm: rep.gagliardo,
            norm_sq: rep.total,
            identity_gap,
        });
    }
    Ok(ledger)
}

/// Least-squares slope and intercept of log y against log x.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(Error::params("scaling fit needs at least 3 points"));
    }
    if let Some((x, y)) = points.iter().find(|(x, y)| !(*x > 0.0) || !(*y > 0.0)) {
        return Err(Error::params(format!("scaling fit needs positive data, got ({x}, {y})")));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = logs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, Copy)]
pub struct WeightedL1 {
    /// Midpoint quadrature over all meshed cells.
    pub meshed: f64,
    /// Analytic radial tail of the far-field constant beyond truncation.
    pub tail: f64,
    pub total: f64,
}

/// int |u(x)| / (1 + |x|^(n+2s)) dx over the whole space: meshed part by
/// quadrature, far part in closed form for the constant far value. The
/// tail is taken over |x| > R with R the truncation radius shrunk by the
/// centroid offset, so it covers the unmeshed region.
pub fn weighted_l1(u: &Field, params: &Params) -> Result<WeightedL1> {
    let mesh = u.mesh();
    if mesh.domain.dim != params.dim {
        return Err(Error::params("parameter dimension does not match the mesh"));
    }
    let q = params.dim as f64 + 2.0 * params.s;
    let mut meshed = 0.0;
    for i in 0..mesh.n_total() {
        let p = mesh.node(i);
        let r = p[0].hypot(p[1]);
        meshed += mesh.weights()[i] * u.values()[i].abs() / (1.0 + r.powf(q));
    }
    let c = mesh.domain.centroid;
    let r_far = mesh.truncation.r_ext - c[0].hypot(c[1]);
    let tail = u.far().abs() * unit_sphere_measure(params.dim) * radial_tail(r_far, params)?;
    Ok(WeightedL1 { meshed, tail, total: meshed + tail })
}

/// int_R^inf r^(n-1) / (1 + r^(n+2s)) dr by the alternating series in
/// R^-(n+2s), which converges for R above one.
fn radial_tail(r: f64, params: &Params) -> Result<f64> {
    let q = params.dim as f64 + 2.0 * params.s;
    if !(r.powf(q) > 1.0) {
        return Err(Error::params(format!(
            "truncation radius {r} too small for the far-tail series"
        )));
    }
    let two_s = 2.0 * params.s;
    let base = r.powf(-q);
    let mut term = r.powf(-two_s);
    let mut acc = 0.0;
    for k in 0..500 {
        let contrib = term / (two_s + k as f64 * q);
        acc += if k % 2 == 0 { contrib } else { -contrib };
        term *= base;
        if term / (two_s + (k + 1) as f64 * q) < 1e-16 * acc.abs() {
            break;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy)]
pub struct CollarCheck {
    /// int u^2 over the collar band outside the domain.
    pub collar_l2: f64,
    pub collar_l1: f64,
    /// Single-order domain-against-meshed-exterior energy u[Omega, ext].
    pub interaction: f64,
    /// Constant floor from the witness ball's own mass.
    pub a: f64,
    /// Coefficient of the collar L2 term: kernel floor times ball mass.
    pub b: f64,
    /// Coefficient of the collar L1 term.
    pub c: f64,
    pub rhs: f64,
    /// interaction - rhs; nonnegative by construction, since every
    /// discrete pair coefficient dominates the kernel floor.
    pub slack: f64,
}

/// Collar integrability bound: the cross-region energy dominates
/// a + b int_collar u^2 - c int_collar |u|, with the constants built from
/// the witness ball of radius inradius/2 around the centroid and the
/// kernel floor at the maximal separation diameter + collar width.
pub fn l2_local_check(form: &NonlocalForm, u: &Field, collar: &Collar) -> Result<CollarCheck> {
    let mesh = form.mesh();
    if collar.cells.is_empty() {
        return Err(Error::mesh("collar holds no exterior cells"));
    }
    let ws = mesh.weights();
    let uu = u.values();
    let (mut collar_l2, mut collar_l1) = (0.0, 0.0);
    for &e in &collar.cells {
        collar_l2 += ws[e] * uu[e] * uu[e];
        collar_l1 += ws[e] * uu[e].abs();
    }
    let r0 = 0.5 * mesh.domain.inradius;
    let ctr = mesh.domain.centroid;
    let (mut ball_w, mut ball_l2, mut ball_l1) = (0.0, 0.0, 0.0);
    for i in 0..mesh.n_interior() {
        let p = mesh.node(i);
        if (p[0] - ctr[0]).hypot(p[1] - ctr[1]) < r0 {
            ball_w += ws[i];
            ball_l2 += ws[i] * uu[i] * uu[i];
            ball_l1 += ws[i] * uu[i].abs();
        }
    }
    if ball_w == 0.0 {
        return Err(Error::mesh("witness ball holds no interior cells"));
    }
    let sep = mesh.domain.diameter + collar.rho;
    let kmin = form.params().kernel_r2(sep * sep);
    let a = kmin * collar.weight_sum * ball_l2;
    let b = kmin * ball_w;
    let c = 2.0 * kmin * ball_l1;
    let rhs = a + b * collar_l2 - c * collar_l1;
    let interaction = 0.5 * form.form_parts(u, u)?.cross;
    Ok(CollarCheck {
        collar_l2,
        collar_l1,
        interaction,
        a,
        b,
        c,
        rhs,
        slack: interaction - rhs,
    })
}

/// Single-order interaction energy between two cell sets,
/// sum over A x B of c_ij (u_i - u_j)^2.
pub fn region_interaction(u: &Field, a: &[usize], b: &[usize], params: &Params) -> Result<f64> {
    Ok(pair_energy(u, a, b, params)?.value)
}
