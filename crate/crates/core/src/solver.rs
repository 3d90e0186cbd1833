//! Constrained descent to mountain-pass critical points.
//!
//! The iteration minimizes the ray-projected energy
//! Phi(v) = max_t I(t v) = I(t1(v) v) over nonnegative fields, with the
//! descent direction obtained from the energy-norm Gram matrix (dense
//! Cholesky on small meshes, preconditioned conjugate gradients above).
//! One application of the assembled form per iteration suffices: rays,
//! line-search trials, and accepted steps are all linear updates of the
//! applied rows, and the quadratic form along u - sigma d is the exact
//! polynomial in sigma built from three inner products.
//!
//! Two representations are available. `Reduced` keeps interior values as
//! the unknowns and closes the exterior after every move, which also
//! zeroes the exterior residual rows identically. `Full` lets every mesh
//! value move; exterior criticality then emerges at the solution, which
//! makes the pair a nontrivial cross-check of the closure.

use crate::energy::{self, nonlinear_rows, EnergyBreakdown, NehariData};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::operators::NonlocalForm;
use nalgebra::{Cholesky, DVector, Dyn};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const REFRESH_EVERY: usize = 64;
const MAX_RESTARTS: usize = 2;

#[derive(Debug, Clone)]
pub enum InitialGuess {
    /// Piecewise-linear cone of the given relative width around the
    /// centroid; width is min(epsilon, inradius) when not given.
    Tent,
    /// Smooth compactly supported bump of the same width.
    Bump,
    Constant(f64),
    /// Start from an existing field, resampled if its mesh differs.
    Warm(Field),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// Interior unknowns, exterior closed after every move.
    Reduced,
    /// Every mesh value is an unknown.
    Full,
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    pub init: InitialGuess,
    pub representation: Representation,
    /// Absolute tolerance on the weighted residual norm.
    pub tau_res: f64,
    pub max_iters: usize,
    /// Meshes with at most this many cells use the dense Gram factor.
    pub dense_limit: usize,
    /// Conjugate-gradient refinements of the preconditioned direction on
    /// large meshes; zero means the diagonally scaled residual itself.
    pub cg_iters: usize,
    /// Record per-iteration history.
    pub keep_history: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            init: InitialGuess::Tent,
            representation: Representation::Reduced,
            tau_res: 1e-8,
            max_iters: 5000,
            dense_limit: 3000,
            cg_iters: 6,
            keep_history: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IterRecord {
    pub iter: usize,
    pub energy: f64,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug)]
pub struct SolveReport {
    pub field: Field,
    pub energy: EnergyBreakdown,
    pub nehari: NehariData,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    /// Relative gap between the row-pairing norm and the direct bilinear
    /// evaluation of the squared norm, a consistency probe of the two
    /// evaluation paths.
    pub norm_cross_gap: f64,
    pub history: Vec<IterRecord>,
}

enum Gram {
    Dense { chol: Cholesky<f64, Dyn>, reduced: bool },
    Iterative { diag: Vec<f64>, cg_iters: usize },
}

/// Weighted residual norm sqrt(sum r_k^2 / w_k): the discrete L2 size of
/// the strong-form residual the rows represent.
pub fn weak_residual_norm(form: &NonlocalForm, u: &Field) -> Result<f64> {
    let rows = energy::residual_rows(form, u)?;
    let ws = form.mesh().weights();
    Ok(rows.iter().zip(ws).map(|(r, w)| r * r / w).sum::<f64>().sqrt())
}

pub fn solve(form: &NonlocalForm, cfg: &SolveConfig) -> Result<SolveReport> {
    let mut init = cfg.init.clone();
    let mut restarts = 0;
    loop {
        match descend(form, cfg, &init) {
            Ok(mut rep) => {
                rep.restarts = restarts;
                return Ok(rep);
            }
            Err(Error::Solver(_)) if restarts < MAX_RESTARTS => {
                restarts += 1;
                init = match restarts {
                    1 => InitialGuess::Constant(1.0),
                    _ => InitialGuess::Bump,
                };
            }
            Err(e) => return Err(e),
        }
    }
}

fn initial_field(form: &NonlocalForm, init: &InitialGuess) -> Result<Field> {
    let mesh = form.mesh();
    let params = form.params();
    let c = mesh.domain.centroid;
    let width = params.epsilon.min(mesh.domain.inradius);
    let raw = match init {
        InitialGuess::Tent => Field::from_fn(mesh, |p| {
            (1.0 - (p[0] - c[0]).hypot(p[1] - c[1]) / width).max(0.0)
        })?,
        InitialGuess::Bump => Field::from_fn(mesh, |p| {
            let t = (p[0] - c[0]).hypot(p[1] - c[1]) / width;
            if t < 1.0 {
                (1.0 - 1.0 / (1.0 - t * t)).exp()
            } else {
                0.0
            }
        })?,
        InitialGuess::Constant(v) => {
            if !(*v > 0.0) {
                return Err(Error::config("constant initial guess must be positive"));
            }
            Field::constant(mesh, *v)?
        }
        InitialGuess::Warm(f) => f.interpolate_to(mesh)?.abs(),
    };
    if !(energy::potential_integral(mesh, params.p, raw.values()) > 0.0) {
        return Err(Error::solver("initial guess has vanishing potential"));
    }
    form.exterior_closure(&raw)
}

fn build_gram(form: &NonlocalForm, cfg: &SolveConfig) -> Result<Gram> {
    let n_t = form.mesh().n_total();
    if n_t <= cfg.dense_limit {
        let a = form.assemble_dense()?;
        let reduced = cfg.representation == Representation::Reduced;
        let m = if reduced {
            let n_i = form.mesh().n_interior();
            let n_e = form.mesh().n_exterior();
            let c = form.closure_matrix()?;
            // P = [I; C]; Gram over interior unknowns is P^T A P.
            let ap_top = a.view((0, 0), (n_i, n_i)) + a.view((0, n_i), (n_i, n_e)) * &c;
            let ap_bot = a.view((n_i, 0), (n_e, n_i)) + a.view((n_i, n_i), (n_e, n_e)) * &c;
            ap_top + c.transpose() * ap_bot
        } else {
            a
        };
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::solver("energy Gram matrix is not positive definite"))?;
        Ok(Gram::Dense { chol, reduced })
    } else {
        Ok(Gram::Iterative { diag: form.gram_diagonal().to_vec(), cg_iters: cfg.cg_iters })
    }
}

struct State<'a> {
    form: &'a NonlocalForm,
    reduced: bool,
    /// Current field values (always closed in reduced mode) and far value.
    u: Vec<f64>,
    far: f64,
    /// Applied scaled rows of u, kept consistent by linear updates.
    y: Vec<f64>,
}

impl State<'_> {
    fn n_active(&self) -> usize {
        if self.reduced {
            self.form.mesh().n_interior()
        } else {
            self.form.mesh().n_total()
        }
    }

    fn refresh(&mut self) {
        self.form.apply_scaled(&self.u, self.far, &mut self.y);
    }

    fn norm_sq(&self) -> f64 {
        self.u.iter().zip(&self.y).map(|(a, b)| a * b).sum()
    }

    /// Rescale field and rows together; both are linear in the values.
    fn rescale(&mut self, t: f64) {
        for v in &mut self.u {
            *v *= t;
        }
        self.far *= t;
        for v in &mut self.y {
            *v *= t;
        }
    }
}

fn descend(form: &NonlocalForm, cfg: &SolveConfig, init: &InitialGuess) -> Result<SolveReport> {
    let mesh = form.mesh();
    let params = form.params();
    let p = params.p;
    let n_t = mesh.n_total();
    let n_i = mesh.n_interior();
    let ws = mesh.weights();
    let reduced = cfg.representation == Representation::Reduced;
    let gram = build_gram(form, cfg)?;

    let start = initial_field(form, init)?;
    let mut st = State {
        form,
        reduced,
        u: start.values().to_vec(),
        far: start.far(),
        y: vec![0.0; n_t],
    };
    st.refresh();

    let mut history = Vec::new();
    let mut d_prev: Option<Vec<f64>> = None;
    let mut sigma_last = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut residual = f64::INFINITY;

    for iter in 0..=cfg.max_iters {
        iterations = iter;
        // Project onto the vanishing-ray-derivative set.
        let lam = st.norm_sq();
        let xi = energy::potential_integral(mesh, p, &st.u);
        let nd = energy::nehari_from_ray(lam, xi, p)?;
        if !nd.t1.is_finite() || nd.t1 <= 0.0 {
            return Err(Error::solver("ray scaling collapsed"));
        }
        st.rescale(nd.t1);
        let lam = lam * nd.t1 * nd.t1;
        let xi = xi * nd.t1.powf(p + 1.0);
        let phi = 0.5 * lam - xi / (p + 1.0);

        // Residual rows at the projected field.
        let nl = nonlinear_rows(mesh, p, &st.u);
        let n_act = st.n_active();
        let mut r = vec![0.0; n_t];
        for k in 0..n_act {
            r[k] = st.y[k] - nl[k];
        }
        residual = r[..n_act].iter().zip(ws).map(|(r, w)| r * r / w).sum::<f64>().sqrt();
        if cfg.keep_history {
            history.push(IterRecord { iter, energy: phi, residual, step: sigma_last });
        }
        if residual <= cfg.tau_res {
            converged = true;
            break;
        }
        if iter == cfg.max_iters {
            break;
        }

        // Energy-norm descent direction on the active unknowns.
        let mut d = gram_solve(form, &gram, &r, n_act, d_prev.as_deref())?;
        let mut m: f64 = r[..n_act].iter().zip(&d[..n_act]).map(|(a, b)| a * b).sum();
        if !(m > 0.0) {
            // Fall back to the plain weighted residual.
            for k in 0..n_act {
                d[k] = r[k] / ws[k];
            }
            m = r[..n_act].iter().zip(&d[..n_act]).map(|(a, b)| a * b).sum();
        }
        d_prev = Some(d.clone());
        let mut dfull = d;
        dfull.resize(n_t, 0.0);
        let far_d;
        if reduced {
            form.close_values(&mut dfull);
            far_d = form.far_mean(&dfull);
        } else {
            far_d = form.far_mean(&dfull);
        }
        let mut yd = vec![0.0; n_t];
        form.apply_scaled(&dfull, far_d, &mut yd);
        let ud: f64 = dfull.iter().zip(&st.y).map(|(a, b)| a * b).sum();
        let dd: f64 = dfull.iter().zip(&yd).map(|(a, b)| a * b).sum();

        // Backtracking on the ray-projected energy, in closed form for the
        // quadratic pieces.
        let mut sigma = (1.5 * sigma_last).min(1.0);
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let lam_s = lam - 2.0 * sigma * ud + sigma * sigma * dd;
            if lam_s > 0.0 {
                let mut xi_s = 0.0;
                for i in 0..n_i {
                    let v = st.u[i] - sigma * dfull[i];
                    xi_s += ws[i] * v.abs().powf(p + 1.0);
                }
                if xi_s > 0.0 {
                    let t1 = (lam_s / xi_s).powf(1.0 / (p - 1.0));
                    let phi_s = t1 * t1 * lam_s * (0.5 - 1.0 / (p + 1.0));
                    // The slack keeps the test meaningful once the true
                    // decrease drops below the rounding floor of phi.
                    let noise = 1e-14 * phi.abs();
                    if phi_s <= phi - ARMIJO_C1 * sigma * m + noise {
                        accepted = true;
                        break;
                    }
                }
            }
            sigma *= 0.5;
        }
        if !accepted {
            // No admissible decrease along this direction; stop here and
            // report the best point reached.
            break;
        }
        sigma_last = sigma;
        for k in 0..n_t {
            st.u[k] -= sigma * dfull[k];
            st.y[k] -= sigma * yd[k];
        }
        st.far -= sigma * far_d;

        // Nonnegativity never raises the projected energy; dropping signs
        // invalidates the linear row updates, so refresh afterwards.
        let negative = st.u[..n_i].iter().any(|&v| v < 0.0);
        if negative {
            for v in &mut st.u {
                *v = v.abs();
            }
            if reduced {
                form.close_values(&mut st.u);
            }
            st.far = form.far_mean(&st.u);
            st.refresh();
        } else if iter % REFRESH_EVERY == REFRESH_EVERY - 1 {
            st.refresh();
        }
    }

    let field = Field::from_values(mesh, st.u)?.with_far(st.far);
    let bd = energy::energy(form, &field)?;
    let nd = energy::nehari_from_ray(bd.norm_sq, bd.potential, p)?;
    let norm_cross_gap = {
        let paired = st.y.iter().zip(field.values()).map(|(a, b)| a * b).sum::<f64>();
        (paired - bd.norm_sq).abs() / bd.norm_sq.abs().max(f64::MIN_POSITIVE)
    };
    Ok(SolveReport {
        field,
        energy: bd,
        nehari: nd,
        residual,
        iterations,
        converged,
        restarts: 0,
        norm_cross_gap,
        history,
    })
}

fn gram_solve(
    form: &NonlocalForm,
    gram: &Gram,
    r: &[f64],
    n_act: usize,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>> {
    match gram {
        Gram::Dense { chol, reduced } => {
            let n = if *reduced { form.mesh().n_interior() } else { form.mesh().n_total() };
            debug_assert_eq!(n, n_act);
            let rhs = DVector::from_column_slice(&r[..n_act]);
            let d = chol.solve(&rhs);
            Ok(d.as_slice().to_vec())
        }
        Gram::Iterative { diag, cg_iters } => {
            Ok(gram_cg(form, diag, &r[..n_act], warm, *cg_iters))
        }
    }
}

/// Jacobi-preconditioned conjugate gradients on a symmetric positive
/// definite surrogate of the active Gram operator. The surrogate solve
/// shapes the descent direction only; step acceptance and row updates run
/// on the true operator, so it trades direction quality for cheap inner
/// iterations. With zero iterations this returns the diagonally scaled
/// residual.
fn gram_cg(
    form: &NonlocalForm,
    diag: &[f64],
    r: &[f64],
    warm: Option<&[f64]>,
    iters: usize,
) -> Vec<f64> {
    let n = r.len();
    let apply = |x: &[f64], out: &mut Vec<f64>| {
        out.resize(n, 0.0);
        form.apply_gram_surrogate(x, out);
    };
    let mut x: Vec<f64> = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => r.iter().zip(diag).map(|(r, d)| r / d).collect(),
    };
    if iters == 0 {
        return r.iter().zip(diag).map(|(r, d)| r / d).collect();
    }
    let mut ax = Vec::new();
    apply(&x, &mut ax);
    let mut res: Vec<f64> = r.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = res.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut pvec = z.clone();
    let mut rz: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
    let r0: f64 = res.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _ in 0..iters {
        if rz.abs() <= 1e-300 {
            break;
        }
        let mut ap = Vec::new();
        apply(&pvec, &mut ap);
        let pap: f64 = pvec.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * pvec[k];
            res[k] -= alpha * ap[k];
        }
        let rn: f64 = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn <= 1e-2 * r0 {
            break;
        }
        for k in 0..n {
            z[k] = res[k] / diag[k];
        }
        let rz_new: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            pvec[k] = z[k] + beta * pvec[k];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, build_mesh, ExteriorTruncation, Shape};
    use crate::kernel::Params;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn setup_1d(eps: f64, h: f64) -> (Arc<crate::geometry::Mesh>, NonlocalForm) {
        let d = build_domain(Shape::Interval { a: -1.0, b: 1.0 }).unwrap();
        let t = ExteriorTruncation::new(&d, 8.0, h).unwrap();
        let m = Arc::new(build_mesh(&d, h, t).unwrap());
        let params = Params::new(1, 0.25, 2.0, eps).unwrap();
        let form = NonlocalForm::new(&m, &params).unwrap();
        (m, form)
    }

    #[test]
    fn converges_on_a_coarse_interval() {
        let (_m, form) = setup_1d(0.4, 0.05);
        let rep = solve(&form, &SolveConfig::default()).unwrap();
        assert!(rep.converged, "residual {}", rep.residual);
        assert!(rep.residual <= 1e-8);
        assert!(rep.energy.value > 0.0);
        // The computed state is nonnegative and nontrivial.
        assert!(rep.field.min_value() >= 0.0);
        assert!(rep.field.max_value() > 0.1);
        // Critical-point identity on the reported state.
        assert!(energy::energy_identity_gap(&rep.energy, 2.0) <= 1e-12);
        // Energy decreased monotonically.
        for w in rep.history.windows(2) {
            assert!(w[1].energy <= w[0].energy + 1e-13 * w[0].energy.abs());
        }
        // Verify the residual through the standalone evaluator.
        let res = weak_residual_norm(&form, &rep.field).unwrap();
        assert!(res <= 2e-8, "standalone residual {res}");
    }

    #[test]
    fn full_and_reduced_agree() {
        let (_m, form) = setup_1d(0.4, 0.1);
        let red = solve(&form, &SolveConfig::default()).unwrap();
        let full = solve(
            &form,
            &SolveConfig { representation: Representation::Full, ..SolveConfig::default() },
        )
        .unwrap();
        assert!(red.converged && full.converged);
        assert_relative_eq!(red.energy.value, full.energy.value, max_relative = 5e-8);
        let du: f64 = red
            .field
            .interior()
            .iter()
            .zip(full.field.interior())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = red.field.interior().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(du <= 1e-5 * scale, "interior gap {du} vs {scale}");
    }

    #[test]
    fn iterative_path_matches_dense_path() {
        let (_m, form) = setup_1d(0.4, 0.1);
        let dense = solve(&form, &SolveConfig::default()).unwrap();
        let iterative = solve(
            &form,
            &SolveConfig { dense_limit: 0, cg_iters: 8, ..SolveConfig::default() },
        )
        .unwrap();
        assert!(iterative.converged, "residual {}", iterative.residual);
        assert_relative_eq!(dense.energy.value, iterative.energy.value, max_relative = 1e-7);
    }

    #[test]
    fn warm_start_cuts_iterations() {
        let (_m, form) = setup_1d(0.4, 0.05);
        let cold = solve(&form, &SolveConfig::default()).unwrap();
        let warm = solve(
            &form,
            &SolveConfig {
                init: InitialGuess::Warm(cold.field.clone()),
                ..SolveConfig::default()
            },
        )
        .unwrap();
        assert!(warm.converged);
        assert!(warm.iterations <= 3, "warm start took {}", warm.iterations);
        assert_relative_eq!(warm.energy.value, cold.energy.value, max_relative = 1e-9);
    }

    #[test]
    fn sign_mixed_start_recovers_nonnegative_state() {
        let (m, form) = setup_1d(0.4, 0.05);
        let wavy = Field::from_fn(&m, |p| 0.5 + (6.0 * p[0]).sin()).unwrap().abs();
        let rep = solve(
            &form,
            &SolveConfig { init: InitialGuess::Warm(wavy), ..SolveConfig::default() },
        )
        .unwrap();
        assert!(rep.converged);
        assert!(rep.field.min_value() >= 0.0);
        // The wavy start flows to an edge spike. Compare against a start
        // already shaped like one; the two may sit at mirrored edges and
        // slightly translated along the near-flat position mode, so only
        // the level is compared.
        let edge = Field::from_fn(&m, |p| {
            let r = (p[0] - 0.95).hypot(p[1]);
            (1.0 - r / 0.2).max(0.0)
        })
        .unwrap();
        let base = solve(
            &form,
            &SolveConfig { init: InitialGuess::Warm(edge), ..SolveConfig::default() },
        )
        .unwrap();
        let flat = energy::energy(&form, &Field::constant(&m, 1.0).unwrap()).unwrap();
        assert!(rep.energy.value < 0.99 * flat.value);
        assert_relative_eq!(rep.energy.value, base.energy.value, max_relative = 1e-4);
    }
}
