//! Variational energy over mesh fields and its constraint geometry.
//!
//! The functional is
//!
//! I(u) = 1/2 * (kappa G(u,u) + int u^2) - 1/(p+1) * int |u|^(p+1),
//!
//! all integrals over the interior. Along a ray t -> t*u the value is the
//! exact polynomial g(t) = t^2/2 * |u|^2 - t^(p+1)/(p+1) * Xi, whose
//! maximizer t1 rescales any field with positive potential onto the set
//! where the derivative along the ray vanishes.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::Mesh;
use crate::operators::NonlocalForm;

#[derive(Debug, Clone, Copy)]
pub struct EnergyBreakdown {
    /// kappa * G(u, u).
    pub seminorm_scaled: f64,
    /// Interior mass, int u^2.
    pub mass: f64,
    /// Interior potential, int |u|^(p+1).
    pub potential: f64,
    /// Squared energy norm, seminorm_scaled + mass.
    pub norm_sq: f64,
    /// Functional value.
    pub value: f64,
}

/// int |u|^(p+1) over the interior.
pub fn potential_integral(mesh: &Mesh, p: f64, values: &[f64]) -> f64 {
    let ws = mesh.weights();
    let mut acc = 0.0;
    for i in 0..mesh.n_interior() {
        acc += ws[i] * values[i].abs().powf(p + 1.0);
    }
    acc
}

/// Rows of the potential derivative: w_k |u_k|^(p-1) u_k on the interior,
/// zero on the meshed exterior.
pub fn nonlinear_rows(mesh: &Mesh, p: f64, values: &[f64]) -> Vec<f64> {
    let ws = mesh.weights();
    let mut rows = vec![0.0; mesh.n_total()];
    for i in 0..mesh.n_interior() {
        rows[i] = ws[i] * values[i].abs().powf(p - 1.0) * values[i];
    }
    rows
}

pub fn energy(form: &NonlocalForm, u: &Field) -> Result<EnergyBreakdown> {
    let rep = form.bilinear(u, u)?;
    let p = form.params().p;
    let potential = potential_integral(form.mesh(), p, u.values());
    Ok(breakdown(rep.scaled, rep.mass, potential, p))
}

/// Assemble the breakdown from already-known quadratic pieces.
pub fn breakdown(seminorm_scaled: f64, mass: f64, potential: f64, p: f64) -> EnergyBreakdown {
    let norm_sq = seminorm_scaled + mass;
    EnergyBreakdown {
        seminorm_scaled,
        mass,
        potential,
        norm_sq,
        value: 0.5 * norm_sq - potential / (p + 1.0),
    }
}

/// Directional derivative I'(u)v = <u, v> - int |u|^(p-1) u v.
pub fn derivative(form: &NonlocalForm, u: &Field, v: &Field) -> Result<f64> {
    let rep = form.bilinear(u, v)?;
    let mesh = form.mesh();
    let ws = mesh.weights();
    let p = form.params().p;
    let mut nl = 0.0;
    for i in 0..mesh.n_interior() {
        nl += ws[i] * u.values()[i].abs().powf(p - 1.0) * u.values()[i] * v.values()[i];
    }
    Ok(rep.total - nl)
}

/// Weak residual rows r_k = d I(u) / d u_k over all mesh values. A critical
/// point of the functional has vanishing rows; on closed fields the
/// exterior rows vanish by construction of the closure.
pub fn residual_rows(form: &NonlocalForm, u: &Field) -> Result<Vec<f64>> {
    if !std::sync::Arc::ptr_eq(u.mesh(), form.mesh()) {
        return Err(Error::MeshMismatch);
    }
    let mut y = vec![0.0; form.mesh().n_total()];
    form.apply_scaled(u.values(), u.far(), &mut y);
    let nl = nonlinear_rows(form.mesh(), form.params().p, u.values());
    for (r, n) in y.iter_mut().zip(&nl) {
        *r -= n;
    }
    Ok(y)
}

/// Ray data at a field: squared norm, potential, the maximizing time of
/// the ray polynomial, and the value there.
#[derive(Debug, Clone, Copy)]
pub struct NehariData {
    pub lambda_bar: f64,
    pub xi: f64,
    pub t1: f64,
    pub energy_at_t1: f64,
}

pub fn nehari(form: &NonlocalForm, u: &Field) -> Result<NehariData> {
    let rep = form.bilinear(u, u)?;
    let p = form.params().p;
    let lambda_bar = rep.total;
    let xi = potential_integral(form.mesh(), p, u.values());
    nehari_from_ray(lambda_bar, xi, p)
}

pub fn nehari_from_ray(lambda_bar: f64, xi: f64, p: f64) -> Result<NehariData> {
    if !(xi > 0.0) || !(lambda_bar > 0.0) {
        return Err(Error::solver(format!(
            "ray scaling undefined: |u|^2 = {lambda_bar}, potential = {xi}"
        )));
    }
    let t1 = (lambda_bar / xi).powf(1.0 / (p - 1.0));
    let energy_at_t1 = lambda_bar * t1 * t1 * (0.5 - 1.0 / (p + 1.0));
    Ok(NehariData { lambda_bar, xi, t1, energy_at_t1 })
}

/// Ray polynomial g(t) = t^2/2 * lambda - t^(p+1)/(p+1) * xi.
pub fn ray_energy(lambda_bar: f64, xi: f64, p: f64, t: f64) -> f64 {
    0.5 * lambda_bar * t * t - xi * t.powf(p + 1.0) / (p + 1.0)
}

/// Ratio of the positive zero crossing of the ray polynomial to its
/// maximizer: ((p + 1) / 2)^(1 / (p - 1)).
pub fn second_crossing_ratio(p: f64) -> f64 {
    (0.5 * (p + 1.0)).powf(1.0 / (p - 1.0))
}

/// Relative defect of the critical-point identity
/// |u|^2 = 2(p+1)/(p-1) * I(u), which is exact on the ray-scaled set.
pub fn energy_identity_gap(bd: &EnergyBreakdown, p: f64) -> f64 {
    let expected = 2.0 * (p + 1.0) / (p - 1.0) * bd.value;
    (bd.norm_sq - expected).abs() / bd.norm_sq.abs().max(f64::MIN_POSITIVE)
}

/// Energy drop from replacing a field by its absolute value. The potential
/// and mass are invariant, so the gap is nonnegative.
pub fn kato_gap(form: &NonlocalForm, u: &Field) -> Result<f64> {
    let here = energy(form, u)?.value;
    let there = energy(form, &u.abs())?.value;
    Ok(here - there)
}
