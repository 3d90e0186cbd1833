//! Experiment runner: a configuration file drives one run mode and leaves
//! machine-readable results on disk.
//!
//! Every mode writes `report.json` (configuration echo, crate version,
//! seed, results, checks) next to CSV tables and two-column plot data.
//! Nothing time- or pointer-dependent is ever emitted, so reruns with the
//! same configuration and seed are byte-identical.
//!
//! Output root precedence: `--out` flag, then the `NEUFRAC_OUT`
//! environment variable, then the config `out_dir` key, then `./out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{l2_local_check, phi_seminorm_ledger, weighted_l1, TentSpec};
use crate::energy;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{
    build_domain, build_mesh, collar_region, Domain, ExteriorTruncation, Mesh, Shape,
};
use crate::kernel::Params;
use crate::operators::NonlocalForm;
use crate::solver::{solve, InitialGuess, SolveConfig};

/// Environment variable that overrides the config's output directory.
pub const OUT_ENV: &str = "NEUFRAC_OUT";

/// Flat key-value configuration. Every field is optional at parse time;
/// each mode requires its own subset and reports the missing key by name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Option<String>,
    /// One of `interval`, `disk`, `rectangle`.
    pub shape: Option<String>,
    /// Interval endpoints.
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// Disk center (defaults to the origin) and radius.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub radius: Option<f64>,
    /// Rectangle corners.
    pub x0: Option<f64>,
    pub y0: Option<f64>,
    pub x1: Option<f64>,
    pub y1: Option<f64>,
    pub s: Option<f64>,
    pub p: Option<f64>,
    pub epsilon: Option<f64>,
    /// Length scales for sweep and ledger modes.
    pub eps_list: Option<Vec<f64>>,
    /// Interior mesh pitch for single-scale modes.
    pub h: Option<f64>,
    /// Pitch per unit epsilon for sweep and ledger modes; h = h_factor * eps.
    pub h_factor: Option<f64>,
    pub r_ext: Option<f64>,
    pub h_ext: Option<f64>,
    pub tau_res: Option<f64>,
    pub max_iters: Option<usize>,
    /// One of `tent`, `bump`, `constant`.
    pub init: Option<String>,
    pub init_value: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    /// Sweep test hook: skip the solves and take c = eps^k, so the fitted
    /// slope must reproduce k.
    pub synthetic_exponent: Option<f64>,
    /// Random field pairs for the audit modes.
    pub n_pairs: Option<usize>,
    /// Exterior collar width for the integrability audit.
    pub collar_rho: Option<f64>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Solve,
    Sweep,
    AuditPhi,
    AuditGreen,
    AuditIntegrability,
    Validate,
}

impl Mode {
    pub fn parse(name: &str) -> Result<Mode> {
        Ok(match name {
            "solve" => Mode::Solve,
            "sweep" => Mode::Sweep,
            "audit-phi" => Mode::AuditPhi,
            "audit-green" => Mode::AuditGreen,
            "audit-integrability" => Mode::AuditIntegrability,
            "validate" => Mode::Validate,
            other => return Err(Error::config(format!("unknown mode `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Solve => "solve",
            Mode::Sweep => "sweep",
            Mode::AuditPhi => "audit-phi",
            Mode::AuditGreen => "audit-green",
            Mode::AuditIntegrability => "audit-integrability",
            Mode::Validate => "validate",
        }
    }
}

/// Command-line values that take precedence over config file keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub h: Option<f64>,
}

/// One named pass/fail diagnostic with its evidence.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

fn check(name: &str, ok: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), ok, detail: detail.into() }
}

#[derive(Debug)]
pub struct RunReport {
    pub out: PathBuf,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Fully defaulted configuration for one non-validate run.
#[derive(Debug, Clone)]
struct Resolved {
    mode: Mode,
    domain: Domain,
    s: f64,
    p: f64,
    epsilon: Option<f64>,
    eps_list: Vec<f64>,
    h: Option<f64>,
    h_factor: f64,
    r_ext: f64,
    h_ext: f64,
    tau_res: f64,
    max_iters: usize,
    init: InitialGuess,
    init_name: String,
    seed: u64,
    n_pairs: usize,
    collar_rho: Option<f64>,
    synthetic_exponent: Option<f64>,
    out: PathBuf,
}

fn req<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::config(format!("missing field `{key}`")))
}

fn resolve_domain(raw: &RunConfig) -> Result<Domain> {
    let shape = req(&raw.shape, "shape")?;
    let shape = match shape.as_str() {
        "interval" => Shape::Interval { a: req(&raw.a, "a")?, b: req(&raw.b, "b")? },
        "disk" => Shape::Disk {
            center: [raw.cx.unwrap_or(0.0), raw.cy.unwrap_or(0.0)],
            r: req(&raw.radius, "radius")?,
        },
        "rectangle" => Shape::Rectangle {
            lo: [req(&raw.x0, "x0")?, req(&raw.y0, "y0")?],
            hi: [req(&raw.x1, "x1")?, req(&raw.y1, "y1")?],
        },
        other => return Err(Error::config(format!("unknown shape `{other}`"))),
    };
    build_domain(shape).map_err(|e| Error::config(e.to_string()))
}

fn out_root(raw: &RunConfig, ov: &Overrides) -> PathBuf {
    if let Some(o) = &ov.out {
        return o.clone();
    }
    if let Ok(v) = std::env::var(OUT_ENV) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from(raw.out_dir.clone().unwrap_or_else(|| "out".into()))
}

fn resolve(raw: &RunConfig, ov: &Overrides, mode: Mode) -> Result<Resolved> {
    let domain = resolve_domain(raw)?;
    let s = req(&raw.s, "s")?;
    let p = req(&raw.p, "p")?;
    let epsilon = ov.epsilon.or(raw.epsilon);
    let eps_list = raw.eps_list.clone().unwrap_or_default();
    let needs_eps = matches!(mode, Mode::Solve | Mode::AuditGreen | Mode::AuditIntegrability);
    let needs_list = matches!(mode, Mode::Sweep | Mode::AuditPhi);
    if needs_eps && epsilon.is_none() {
        return Err(Error::config("missing field `epsilon`"));
    }
    if needs_list {
        if eps_list.is_empty() {
            return Err(Error::config("missing field `eps_list`"));
        }
        if mode == Mode::Sweep && eps_list.len() < 2 {
            return Err(Error::config("sweep needs at least 2 entries in `eps_list`"));
        }
    }
    // Early parameter validation so bad physics is a config error, not a
    // mid-run failure.
    let probe_eps = epsilon.or(eps_list.first().copied()).unwrap_or(1.0);
    Params::new(domain.dim, s, p, probe_eps).map_err(|e| Error::config(e.to_string()))?;
    for &e in &eps_list {
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::config(format!("eps_list entry {e} must be positive")));
        }
    }
    let h = ov.h.or(raw.h);
    if needs_eps && h.is_none() {
        return Err(Error::config("missing field `h`"));
    }
    if let Some(h) = h {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::config(format!("mesh pitch h = {h} must be positive")));
        }
    }
    let h_factor = raw.h_factor.unwrap_or(0.125);
    if !(h_factor > 0.0) || !h_factor.is_finite() {
        return Err(Error::config(format!("h_factor = {h_factor} must be positive")));
    }
    let r_ext = req(&raw.r_ext, "r_ext")?;
    let h_ext = req(&raw.h_ext, "h_ext")?;
    ExteriorTruncation::new(&domain, r_ext, h_ext).map_err(|e| Error::config(e.to_string()))?;
    let tau_res = raw.tau_res.unwrap_or(1e-8);
    if !(tau_res > 0.0) {
        return Err(Error::config(format!("tau_res = {tau_res} must be positive")));
    }
    let init_name = raw.init.clone().unwrap_or_else(|| "tent".into());
    let init = match init_name.as_str() {
        "tent" => InitialGuess::Tent,
        "bump" => InitialGuess::Bump,
        "constant" => InitialGuess::Constant(raw.init_value.unwrap_or(1.0)),
        other => return Err(Error::config(format!("unknown init `{other}`"))),
    };
    Ok(Resolved {
        mode,
        domain,
        s,
        p,
        epsilon,
        eps_list,
        h,
        h_factor,
        r_ext,
        h_ext,
        tau_res,
        max_iters: raw.max_iters.unwrap_or(5000),
        init,
        init_name,
        seed: ov.seed.or(raw.seed).unwrap_or(0),
        n_pairs: raw.n_pairs.unwrap_or(20),
        collar_rho: raw.collar_rho,
        synthetic_exponent: raw.synthetic_exponent,
        out: out_root(raw, ov),
    })
}

/// Run the configured mode and leave its artifacts under the output root.
pub fn execute(raw: &RunConfig, ov: &Overrides) -> Result<RunReport> {
    let mode = match ov.mode {
        Some(m) => m,
        None => Mode::parse(&req(&raw.mode, "mode")?)?,
    };
    if mode == Mode::Validate {
        return run_validate(raw, ov);
    }
    let rz = resolve(raw, ov, mode)?;
    fs::create_dir_all(&rz.out)
        .map_err(|e| Error::config(format!("output dir {}: {e}", rz.out.display())))?;
    let (results, checks) = match rz.mode {
        Mode::Solve => run_solve(&rz)?,
        Mode::Sweep => run_sweep(&rz)?,
        Mode::AuditPhi => run_audit_phi(&rz)?,
        Mode::AuditGreen => run_audit_green(&rz)?,
        Mode::AuditIntegrability => run_audit_integrability(&rz)?,
        Mode::Validate => unreachable!(),
    };
    let passed = checks.iter().all(|c| c.ok);
    write_report(&rz.out, rz.mode, rz.seed, echo(&rz), results, &checks, passed)?;
    Ok(RunReport { out: rz.out, checks, passed })
}

/// Effective configuration after defaulting, echoed into the report.
fn echo(rz: &Resolved) -> Value {
    json!({
        "mode": rz.mode.name(),
        "shape": format!("{:?}", rz.domain.shape),
        "dim": rz.domain.dim,
        "s": rz.s,
        "p": rz.p,
        "epsilon": rz.epsilon,
        "eps_list": rz.eps_list,
        "h": rz.h,
        "h_factor": rz.h_factor,
        "r_ext": rz.r_ext,
        "h_ext": rz.h_ext,
        "tau_res": rz.tau_res,
        "max_iters": rz.max_iters,
        "init": rz.init_name,
        "seed": rz.seed,
        "n_pairs": rz.n_pairs,
        "collar_rho": rz.collar_rho,
        "synthetic_exponent": rz.synthetic_exponent,
    })
}

fn write_report(
    out: &Path,
    mode: Mode,
    seed: u64,
    config: Value,
    results: Value,
    checks: &[Check],
    passed: bool,
) -> Result<()> {
    let report = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "mode": mode.name(),
        "seed": seed,
        "config": config,
        "results": results,
        "checks": checks.iter().map(|c| json!({
            "name": c.name, "ok": c.ok, "detail": c.detail,
        })).collect::<Vec<_>>(),
        "passed": passed,
    });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column plot data: `#` comment lines, then `x y` per line.
fn write_dat(path: &Path, comments: &str, rows: &[[f64; 2]]) -> Result<()> {
    let mut text = String::new();
    for line in comments.lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&fmt(r[0]));
        text.push(' ');
        text.push_str(&fmt(r[1]));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Scalar results destined for both the JSON report and `summary.csv`,
/// so every summary number exists in both files with the same value.
struct Summary {
    map: serde_json::Map<String, Value>,
    rows: Vec<Vec<String>>,
}

impl Summary {
    fn new() -> Self {
        Summary { map: serde_json::Map::new(), rows: Vec::new() }
    }

    fn f(&mut self, key: &str, v: f64) -> &mut Self {
        self.map.insert(key.into(), json!(v));
        self.rows.push(vec![key.into(), fmt(v)]);
        self
    }

    fn i(&mut self, key: &str, v: u64) -> &mut Self {
        self.map.insert(key.into(), json!(v));
        self.rows.push(vec![key.into(), format!("{v}")]);
        self
    }

    fn b(&mut self, key: &str, v: bool) -> &mut Self {
        self.map.insert(key.into(), json!(v));
        self.rows.push(vec![key.into(), format!("{v}")]);
        self
    }

    fn write(&self, out: &Path) -> Result<()> {
        write_csv(&out.join("summary.csv"), &["key", "value"], &self.rows)
    }
}

fn build_form(rz: &Resolved, epsilon: f64, h: f64, r_ext: f64) -> Result<(Arc<Mesh>, NonlocalForm)> {
    let trunc = ExteriorTruncation::new(&rz.domain, r_ext, rz.h_ext)?;
    let mesh = Arc::new(build_mesh(&rz.domain, h, trunc)?);
    let params = Params::new(rz.domain.dim, rz.s, rz.p, epsilon)?;
    let form = NonlocalForm::new(&mesh, &params)?;
    Ok((mesh, form))
}

fn solve_cfg(rz: &Resolved, keep_history: bool) -> SolveConfig {
    SolveConfig {
        init: rz.init.clone(),
        tau_res: rz.tau_res,
        max_iters: rz.max_iters,
        keep_history,
        ..SolveConfig::default()
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Least-squares slope and intercept of log y on log x; None until two
/// positive finite points exist.
fn loglog_slope(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    if pts.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return None;
    }
    let logs: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = logs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn run_solve(rz: &Resolved) -> Result<(Value, Vec<Check>)> {
    let epsilon = rz.epsilon.unwrap();
    let (mesh, form) = build_form(rz, epsilon, rz.h.unwrap(), rz.r_ext)?;
    let rep = solve(&form, &solve_cfg(rz, true))?;
    let vals = rep.field.values();
    let (min_u, max_u) = min_max(vals);
    let norm = rep.energy.norm_sq.max(0.0).sqrt();
    let identity_abs = energy::energy_identity_gap(&rep.energy, rz.p) * rep.energy.norm_sq;
    let constant_energy = (0.5 - 1.0 / (rz.p + 1.0)) * rz.domain.volume;

    let mut checks = vec![
        check(
            "converged",
            rep.converged,
            format!("residual {} against tau_res {}", fmt(rep.residual), fmt(rz.tau_res)),
        ),
        check("level_positive", rep.energy.value > 0.0, format!("c = {}", fmt(rep.energy.value))),
        check(
            "nonnegative",
            min_u >= -1e-12 * max_u.abs().max(1.0),
            format!("min u = {}", fmt(min_u)),
        ),
        check(
            "energy_identity",
            identity_abs <= 10.0 * rz.tau_res * norm,
            format!(
                "|norm_sq - 2(p+1)/(p-1) c| = {} against {}",
                fmt(identity_abs),
                fmt(10.0 * rz.tau_res * norm)
            ),
        ),
    ];

    // Bulk exports: every meshed value, the iteration history, and a
    // radial profile for plotting.
    let n_i = mesh.n_interior();
    let sol_rows: Vec<Vec<String>> = (0..mesh.n_total())
        .map(|i| {
            let p = mesh.node(i);
            vec![
                format!("{i}"),
                (if i < n_i { "interior" } else { "exterior" }).into(),
                fmt(p[0]),
                fmt(p[1]),
                fmt(mesh.weights()[i]),
                fmt(vals[i]),
            ]
        })
        .collect();
    write_csv(
        &rz.out.join("solution.csv"),
        &["index", "region", "x", "y", "weight", "value"],
        &sol_rows,
    )?;
    let hist_rows: Vec<Vec<String>> = rep
        .history
        .iter()
        .map(|r| vec![format!("{}", r.iter), fmt(r.energy), fmt(r.residual), fmt(r.step)])
        .collect();
    write_csv(&rz.out.join("history.csv"), &["iter", "energy", "residual", "step"], &hist_rows)?;
    let ctr = rz.domain.centroid;
    let mut prof: Vec<(f64, usize)> = (0..mesh.n_total())
        .map(|i| {
            let p = mesh.node(i);
            ((p[0] - ctr[0]).hypot(p[1] - ctr[1]), i)
        })
        .collect();
    prof.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let prof_rows: Vec<[f64; 2]> = prof.iter().map(|&(r, i)| [r, vals[i]]).collect();
    write_dat(
        &rz.out.join("profile.dat"),
        "solution profile: distance from centroid, value",
        &prof_rows,
    )?;

    let mut sm = Summary::new();
    sm.f("c_eps", rep.energy.value)
        .f("norm_sq", rep.energy.norm_sq)
        .f("seminorm_scaled", rep.energy.seminorm_scaled)
        .f("mass", rep.energy.mass)
        .f("potential", rep.energy.potential)
        .f("residual", rep.residual)
        .i("iterations", rep.iterations as u64)
        .i("restarts", rep.restarts as u64)
        .b("converged", rep.converged)
        .f("min_u", min_u)
        .f("max_u", max_u)
        .f("far_value", rep.field.far())
        .f("nehari_t1", rep.nehari.t1)
        .f("energy_identity_abs", identity_abs)
        .f("constant_field_energy", constant_energy)
        .i("n_interior", n_i as u64)
        .i("n_exterior", mesh.n_exterior() as u64);
    sm.write(&rz.out)?;

    let finite = sm.map.values().all(|v| !v.is_null());
    checks.push(check("cells_finite", finite, "all summary values finite"));
    Ok((Value::Object(sm.map), checks))
}

fn run_sweep(rz: &Resolved) -> Result<(Value, Vec<Check>)> {
    let n = rz.domain.dim as f64;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut json_rows: Vec<Value> = Vec::new();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut all_converged = true;
    let mut all_positive = true;
    for &eps in &rz.eps_list {
        let (h, n_i, c, norm_sq, residual, iterations, min_u, converged);
        if let Some(k) = rz.synthetic_exponent {
            h = 0.0;
            n_i = 0;
            c = eps.powf(k);
            norm_sq = 2.0 * (rz.p + 1.0) / (rz.p - 1.0) * c;
            residual = 0.0;
            iterations = 0;
            min_u = 0.0;
            converged = true;
        } else {
            h = rz.h_factor * eps;
            let (mesh, form) = build_form(rz, eps, h, rz.r_ext)?;
            let rep = solve(&form, &solve_cfg(rz, false))?;
            n_i = mesh.n_interior();
            c = rep.energy.value;
            norm_sq = rep.energy.norm_sq;
            residual = rep.residual;
            iterations = rep.iterations;
            min_u = min_max(rep.field.values()).0;
            converged = rep.converged;
        }
        all_converged &= converged;
        all_positive &= c > 0.0;
        pts.push((eps, c));
        let slope_so_far = loglog_slope(&pts).map(|(s, _)| s).unwrap_or(0.0);
        let c_scaled = c * eps.powf(-n);
        rows.push(vec![
            fmt(eps),
            fmt(h),
            format!("{n_i}"),
            fmt(c),
            fmt(c_scaled),
            fmt(norm_sq),
            fmt(residual),
            format!("{iterations}"),
            fmt(min_u),
            fmt(slope_so_far),
        ]);
        json_rows.push(json!({
            "eps": eps, "h": h, "n_interior": n_i, "c_eps": c, "c_scaled": c_scaled,
            "norm_sq": norm_sq, "residual": residual, "iterations": iterations,
            "min_u": min_u, "slope_so_far": slope_so_far,
        }));
    }
    write_csv(
        &rz.out.join("sweep.csv"),
        &[
            "eps",
            "h",
            "n_interior",
            "c_eps",
            "c_scaled",
            "norm_sq",
            "residual",
            "iterations",
            "min_u",
            "slope_so_far",
        ],
        &rows,
    )?;
    let dat: Vec<[f64; 2]> = pts.iter().map(|&(e, c)| [e, c]).collect();
    write_dat(&rz.out.join("sweep.dat"), "level per length scale: eps, c_eps", &dat)?;

    let fit = loglog_slope(&pts);
    let (slope, intercept) = fit.unwrap_or((f64::NAN, f64::NAN));
    let scaled: Vec<f64> = pts.iter().map(|&(e, c)| c * e.powf(-n)).collect();
    let (lo, hi) = min_max(&scaled);
    let scaled_ratio = if lo > 0.0 { hi / lo } else { f64::INFINITY };

    let mut sm = Summary::new();
    sm.f("slope", slope)
        .f("intercept", intercept)
        .f("c_scaled_ratio", scaled_ratio)
        .i("n_points", pts.len() as u64)
        .b("synthetic", rz.synthetic_exponent.is_some());
    sm.write(&rz.out)?;

    let checks = vec![
        check("converged", all_converged, "every sweep point converged"),
        check("levels_positive", all_positive, "every level exceeds zero"),
        check(
            "slope_fit",
            fit.is_some(),
            format!("slope {} intercept {}", fmt(slope), fmt(intercept)),
        ),
    ];
    let mut results = sm.map;
    results.insert("rows".into(), Value::Array(json_rows));
    Ok((Value::Object(results), checks))
}

fn run_audit_phi(rz: &Resolved) -> Result<(Value, Vec<Check>)> {
    let base = Params::new(rz.domain.dim, rz.s, rz.p, rz.eps_list[0])?;
    let ledger = phi_seminorm_ledger(&base, &rz.eps_list, |eps| {
        let trunc = ExteriorTruncation::new(&rz.domain, rz.r_ext, rz.h_ext)?;
        Ok(Arc::new(build_mesh(&rz.domain, rz.h_factor * eps, trunc)?))
    })?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut json_rows: Vec<Value> = Vec::new();
    let mut dat: Vec<[f64; 2]> = Vec::new();
    let mut max_gap = 0.0f64;
    // Per-column spread of the normalized pieces across the width list.
    let mut col_lo = [f64::INFINITY; 5];
    let mut col_hi = [f64::NEG_INFINITY; 5];
    for row in &ledger.rows {
        let nz = row.normalized(&base);
        for k in 0..5 {
            col_lo[k] = col_lo[k].min(nz[k]);
            col_hi[k] = col_hi[k].max(nz[k]);
        }
        max_gap = max_gap.max(row.identity_gap);
        dat.push([row.eps, nz[4]]);
        rows.push(vec![
            fmt(row.eps),
            fmt(row.support_pairs),
            fmt(row.mixed_pairs),
            fmt(row.rim_pairs),
            fmt(row.exterior_term),
            fmt(row.l2_mass),
            fmt(row.seminorm),
            fmt(row.norm_sq),
            fmt(row.identity_gap),
            fmt(nz[0]),
            fmt(nz[1]),
            fmt(nz[2]),
            fmt(nz[3]),
            fmt(nz[4]),
        ]);
        json_rows.push(json!({
            "eps": row.eps, "support_pairs": row.support_pairs,
            "mixed_pairs": row.mixed_pairs, "rim_pairs": row.rim_pairs,
            "exterior_term": row.exterior_term, "l2_mass": row.l2_mass,
            "seminorm": row.seminorm, "norm_sq": row.norm_sq,
            "identity_gap": row.identity_gap,
            "norm_support": nz[0], "norm_mixed": nz[1], "norm_rim": nz[2],
            "norm_exterior": nz[3], "norm_normsq": nz[4],
        }));
    }
    write_csv(
        &rz.out.join("ledger.csv"),
        &[
            "eps",
            "support_pairs",
            "mixed_pairs",
            "rim_pairs",
            "exterior_term",
            "l2_mass",
            "seminorm",
            "norm_sq",
            "identity_gap",
            "norm_support",
            "norm_mixed",
            "norm_rim",
            "norm_exterior",
            "norm_normsq",
        ],
        &rows,
    )?;
    write_dat(
        &rz.out.join("ledger.dat"),
        "cone profile: eps, norm_sq scaled by eps^n",
        &dat,
    )?;

    let ratios: Vec<f64> = (0..5)
        .map(|k| if col_lo[k] > 0.0 { col_hi[k] / col_lo[k] } else { f64::INFINITY })
        .collect();
    let mut sm = Summary::new();
    sm.f("max_identity_gap", max_gap)
        .f("ratio_support", ratios[0])
        .f("ratio_mixed", ratios[1])
        .f("ratio_rim", ratios[2])
        .f("ratio_exterior", ratios[3])
        .f("ratio_normsq", ratios[4])
        .i("rows", ledger.rows.len() as u64)
        .i("rejected", ledger.rejected.len() as u64);
    sm.write(&rz.out)?;

    let mut checks = vec![
        check(
            "rows_present",
            !ledger.rows.is_empty(),
            format!("{} rows, {} widths rejected", ledger.rows.len(), ledger.rejected.len()),
        ),
        check(
            "identity_reconciled",
            max_gap <= 1e-6,
            format!("max relative defect {}", fmt(max_gap)),
        ),
    ];
    if ledger.rows.len() >= 3 {
        let bounded = ratios.iter().all(|&r| r <= 4.0);
        checks.push(check(
            "normalized_bounded",
            bounded,
            format!("column spreads {:?}", ratios.iter().map(|r| fmt(*r)).collect::<Vec<_>>()),
        ));
    }
    let mut results = sm.map;
    results.insert("rows".into(), Value::Array(json_rows));
    results.insert("rejected_widths".into(), json!(ledger.rejected));
    Ok((Value::Object(results), checks))
}

/// Random low-frequency trigonometric field over the meshed ball, with the
/// constant term as its far value.
fn random_smooth(mesh: &Arc<Mesh>, rng: &mut ChaCha8Rng) -> Result<Field> {
    let base = std::f64::consts::PI / mesh.truncation.r_ext;
    let c0: f64 = rng.random_range(-0.5..0.5);
    let mut terms = [(0.0f64, 0.0f64, 0.0f64, 0.0f64); 3];
    for t in &mut terms {
        let amp = rng.random_range(-1.0..1.0f64);
        let kx = rng.random_range(1..=2u32) as f64 * base;
        let ky = if mesh.domain.dim == 2 { rng.random_range(0..=2u32) as f64 * base } else { 0.0 };
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        *t = (amp, kx, ky, phase);
    }
    let f = Field::from_fn(mesh, |p| {
        let mut v = c0;
        for &(a, kx, ky, ph) in &terms {
            v += a * (kx * p[0] + ky * p[1] + ph).cos();
        }
        v
    })?;
    Ok(f.with_far(c0))
}

/// Integration-by-parts defect between the assembled bilinear form and the
/// pointwise operators: both discretize the same continuum identity, but
/// the form carries near-diagonal corrections the pointwise sums lack, so
/// the gap is a genuine resolution-dependent error.
fn green_pointwise(form: &NonlocalForm, u: &Field, v: &Field) -> Result<[f64; 2]> {
    let parts = form.form_parts(u, v)?;
    let c_norm = form.params().c_norm;
    let lhs = 0.5 * c_norm * (parts.interior + parts.cross + parts.tail);
    let mesh = form.mesh();
    let ws = mesh.weights();
    let vv = v.values();
    let n_i = mesh.n_interior();
    let mut rhs = 0.0;
    for i in 0..n_i {
        rhs += ws[i] * vv[i] * form.fractional_laplacian(u, i)?;
    }
    for e in n_i..mesh.n_total() {
        rhs += ws[e] * vv[e] * form.neumann_value(u, e)?;
    }
    let tails = form.tail_weights();
    let flux: f64 = (0..n_i).map(|i| tails[i] * (u.values()[i] - u.far())).sum();
    rhs -= c_norm * v.far() * flux;
    let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
    Ok([lhs - rhs, rel])
}

fn run_audit_green(rz: &Resolved) -> Result<(Value, Vec<Check>)> {
    let epsilon = rz.epsilon.unwrap();
    let h = rz.h.unwrap();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut json_rows: Vec<Value> = Vec::new();
    let mut means = [0.0f64; 2];
    let mut maxes = [0.0f64; 2];
    for (level, hh) in [(0usize, h), (1, 0.5 * h)] {
        let (mesh, form) = build_form(rz, epsilon, hh, rz.r_ext)?;
        // Fresh stream per level: the same coefficient draws produce the
        // same smooth pair on both meshes, so the defect comparison is a
        // true refinement study.
        let mut rng = ChaCha8Rng::seed_from_u64(rz.seed);
        for pair in 0..rz.n_pairs {
            let u = random_smooth(&mesh, &mut rng)?;
            let v = random_smooth(&mesh, &mut rng)?;
            let [resid, rel] = green_pointwise(&form, &u, &v)?;
            means[level] += rel / rz.n_pairs as f64;
            maxes[level] = maxes[level].max(rel);
            rows.push(vec![format!("{pair}"), fmt(hh), fmt(resid), fmt(rel)]);
            json_rows.push(json!({
                "pair": pair, "h": hh, "residual": resid, "rel": rel,
            }));
        }
    }
    write_csv(&rz.out.join("green.csv"), &["pair", "h", "residual", "rel"], &rows)?;
    write_dat(
        &rz.out.join("green.dat"),
        "identity defect under refinement: h, mean relative residual",
        &[[h, means[0]], [0.5 * h, means[1]]],
    )?;

    let mut sm = Summary::new();
    sm.f("mean_rel_coarse", means[0])
        .f("mean_rel_fine", means[1])
        .f("max_rel_coarse", maxes[0])
        .f("max_rel_fine", maxes[1])
        .i("n_pairs", rz.n_pairs as u64);
    sm.write(&rz.out)?;

    let checks = vec![
        check(
            "defect_small",
            maxes[0] <= 0.05,
            format!("max relative residual {} at h = {}", fmt(maxes[0]), fmt(h)),
        ),
        check(
            "defect_decreases",
            means[1] < means[0],
            format!("mean {} at h, {} at h/2", fmt(means[0]), fmt(means[1])),
        ),
    ];
    let mut results = sm.map;
    results.insert("rows".into(), Value::Array(json_rows));
    Ok((Value::Object(results), checks))
}

fn run_audit_integrability(rz: &Resolved) -> Result<(Value, Vec<Check>)> {
    let epsilon = rz.epsilon.unwrap();
    let h = rz.h.unwrap();
    let cfg = solve_cfg(rz, false);

    // Weighted L1 stability under a doubled truncation ball: re-solve on
    // the wider mesh, so the quantity reflects the full pipeline.
    let mut l1 = [0.0f64; 2];
    let mut rows_l1: Vec<Vec<String>> = Vec::new();
    let mut json_l1: Vec<Value> = Vec::new();
    let mut both_converged = true;
    let mut first: Option<(Arc<Mesh>, NonlocalForm, Field)> = None;
    for (k, r_ext) in [(0usize, rz.r_ext), (1, 2.0 * rz.r_ext)] {
        let (mesh, form) = build_form(rz, epsilon, h, r_ext)?;
        let rep = solve(&form, &cfg)?;
        both_converged &= rep.converged;
        let w = weighted_l1(&rep.field, form.params())?;
        l1[k] = w.total;
        rows_l1.push(vec![fmt(r_ext), fmt(w.meshed), fmt(w.tail), fmt(w.total)]);
        json_l1.push(json!({
            "r_ext": r_ext, "meshed": w.meshed, "tail": w.tail, "total": w.total,
        }));
        if k == 0 {
            first = Some((mesh, form, rep.field));
        }
    }
    let rel_change = (l1[1] - l1[0]).abs() / l1[0].abs().max(f64::MIN_POSITIVE);
    write_csv(&rz.out.join("weighted_l1.csv"), &["r_ext", "meshed", "tail", "total"], &rows_l1)?;

    // Collar inequality for the converged solution and random closed fields.
    let (mesh, form, solution) = first.unwrap();
    let rho = rz.collar_rho.unwrap_or(0.5 * rz.domain.inradius);
    let collar = collar_region(&mesh, rho)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rz.seed);
    let mut rows_col: Vec<Vec<String>> = Vec::new();
    let mut json_col: Vec<Value> = Vec::new();
    let mut dat: Vec<[f64; 2]> = Vec::new();
    let mut min_slack_rel = f64::INFINITY;
    for k in 0..=rz.n_pairs {
        let (label, field) = if k == 0 {
            ("solution".to_string(), solution.clone())
        } else {
            let vals: Vec<f64> =
                (0..mesh.n_interior()).map(|_| rng.random_range(-1.0..2.0)).collect();
            let f = Field::from_interior_values(&mesh, &vals)?;
            (format!("random_{k}"), form.exterior_closure(&f)?)
        };
        let cc = l2_local_check(&form, &field, &collar)?;
        let scale = cc.interaction.abs().max(cc.rhs.abs()).max(f64::MIN_POSITIVE);
        min_slack_rel = min_slack_rel.min(cc.slack / scale);
        dat.push([k as f64, cc.slack]);
        rows_col.push(vec![label.clone(), fmt(cc.interaction), fmt(cc.rhs), fmt(cc.slack)]);
        json_col.push(json!({
            "field": label, "interaction": cc.interaction, "rhs": cc.rhs, "slack": cc.slack,
        }));
    }
    write_csv(&rz.out.join("collar.csv"), &["field", "interaction", "rhs", "slack"], &rows_col)?;
    write_dat(&rz.out.join("collar.dat"), "collar inequality: field index, slack", &dat)?;

    let mut sm = Summary::new();
    sm.f("l1_at_r", l1[0])
        .f("l1_at_2r", l1[1])
        .f("l1_rel_change", rel_change)
        .f("min_slack_rel", min_slack_rel)
        .f("collar_rho", rho)
        .b("both_converged", both_converged);
    sm.write(&rz.out)?;

    let checks = vec![
        check("converged", both_converged, "solves at both truncations converged"),
        check(
            "l1_stable",
            rel_change <= 0.02,
            format!("relative change {} when the truncation doubles", fmt(rel_change)),
        ),
        check(
            "collar_nonnegative",
            min_slack_rel >= -1e-12,
            format!("min relative slack {}", fmt(min_slack_rel)),
        ),
    ];
    let mut results = sm.map;
    results.insert("weighted_l1".into(), Value::Array(json_l1));
    results.insert("collar".into(), Value::Array(json_col));
    Ok((Value::Object(results), checks))
}

/// Diagnostics over the raw configuration: every check is attempted
/// independently and failures are collected, never thrown.
fn run_validate(raw: &RunConfig, ov: &Overrides) -> Result<RunReport> {
    let out = out_root(raw, ov);
    fs::create_dir_all(&out)
        .map_err(|e| Error::config(format!("output dir {}: {e}", out.display())))?;
    let mut checks: Vec<Check> = Vec::new();

    let intended = raw.mode.as_deref().unwrap_or("solve");
    match Mode::parse(intended) {
        Ok(_) => checks.push(check("mode_known", true, format!("mode `{intended}`"))),
        Err(e) => checks.push(check("mode_known", false, e.to_string())),
    }

    let domain = match resolve_domain(raw) {
        Ok(d) => {
            checks.push(check(
                "domain",
                true,
                format!("{:?}, volume {}", d.shape, fmt(d.volume)),
            ));
            Some(d)
        }
        Err(e) => {
            checks.push(check("domain", false, e.to_string()));
            None
        }
    };

    // Widths the run would use: the single epsilon, or each sweep entry.
    let eps_all: Vec<f64> = match (ov.epsilon.or(raw.epsilon), &raw.eps_list) {
        (Some(e), _) => vec![e],
        (None, Some(list)) => list.clone(),
        (None, None) => vec![],
    };

    if let Some(d) = &domain {
        match (raw.s, raw.p) {
            (Some(s), Some(p)) => {
                if eps_all.is_empty() {
                    checks.push(check("params", false, "missing field `epsilon` or `eps_list`"));
                } else {
                    let mut ok = true;
                    let mut detail = String::new();
                    for &e in &eps_all {
                        if let Err(err) = Params::new(d.dim, s, p, e) {
                            ok = false;
                            detail = err.to_string();
                            break;
                        }
                    }
                    if ok {
                        detail = format!("n = {}, s = {s}, p = {p}", d.dim);
                    }
                    checks.push(check("params", ok, detail));
                }
                let n = d.dim as f64;
                if n > 2.0 * s {
                    let limit = (n + 2.0 * s) / (n - 2.0 * s);
                    checks.push(check(
                        "subcritical",
                        p < limit,
                        format!("p = {p} against the critical exponent {}", fmt(limit)),
                    ));
                } else {
                    checks.push(check(
                        "subcritical",
                        true,
                        format!("n = {} <= 2s = {}: every p > 1 admissible", d.dim, fmt(2.0 * s)),
                    ));
                }
            }
            _ => {
                let missing = if raw.s.is_none() { "s" } else { "p" };
                checks.push(check("params", false, format!("missing field `{missing}`")));
            }
        }

        let init = raw.init.as_deref().unwrap_or("tent");
        if init != "constant" {
            for &e in &eps_all {
                let ok = TentSpec::new(d, d.centroid, e).is_ok();
                checks.push(check(
                    "tent_fits",
                    ok,
                    format!(
                        "doubled support ball radius {} against centroid depth {}",
                        fmt(2.0 * e),
                        fmt(d.interior_depth(d.centroid))
                    ),
                ));
            }
        }

        match (raw.r_ext, raw.h_ext) {
            (Some(r), Some(he)) => match ExteriorTruncation::new(d, r, he) {
                Ok(_) => checks.push(check(
                    "truncation",
                    true,
                    format!("r_ext = {}, h_ext = {}", fmt(r), fmt(he)),
                )),
                Err(e) => checks.push(check("truncation", false, e.to_string())),
            },
            _ => {
                let missing = if raw.r_ext.is_none() { "r_ext" } else { "h_ext" };
                checks.push(check("truncation", false, format!("missing field `{missing}`")));
            }
        }
    }

    // Mesh resolution against the length scale: h <= eps / 5.
    let h = ov.h.or(raw.h);
    if let (Some(h), Some(&e)) = (h, eps_all.first()) {
        let emin = eps_all.iter().copied().fold(e, f64::min);
        checks.push(check(
            "resolution",
            h <= emin / 5.0,
            format!("h = {} against eps/5 = {}", fmt(h), fmt(emin / 5.0)),
        ));
    } else if let Some(hf) = raw.h_factor {
        checks.push(check(
            "resolution",
            hf <= 0.2,
            format!("h_factor = {} against 1/5", fmt(hf)),
        ));
    }

    // Mode-specific required fields.
    if let Ok(mode) = Mode::parse(intended) {
        let mut missing: Vec<&str> = Vec::new();
        let has_eps = ov.epsilon.or(raw.epsilon).is_some();
        let has_list = raw.eps_list.as_ref().is_some_and(|l| !l.is_empty());
        match mode {
            Mode::Solve | Mode::AuditGreen | Mode::AuditIntegrability => {
                if !has_eps {
                    missing.push("epsilon");
                }
                if ov.h.or(raw.h).is_none() {
                    missing.push("h");
                }
            }
            Mode::Sweep | Mode::AuditPhi => {
                if !has_list {
                    missing.push("eps_list");
                }
            }
            Mode::Validate => {}
        }
        for key in ["shape", "s", "p", "r_ext", "h_ext"] {
            let present = match key {
                "shape" => raw.shape.is_some(),
                "s" => raw.s.is_some(),
                "p" => raw.p.is_some(),
                "r_ext" => raw.r_ext.is_some(),
                "h_ext" => raw.h_ext.is_some(),
                _ => unreachable!(),
            };
            if !present {
                missing.push(key);
            }
        }
        checks.push(check(
            "mode_fields",
            missing.is_empty(),
            if missing.is_empty() {
                format!("all fields for mode `{intended}` present")
            } else {
                format!("missing fields for mode `{intended}`: {}", missing.join(", "))
            },
        ));
    }

    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.name.clone(), format!("{}", c.ok), c.detail.clone()])
        .collect();
    write_csv(&out.join("validate.csv"), &["check", "ok", "detail"], &rows)?;

    let passed = checks.iter().all(|c| c.ok);
    let seed = ov.seed.or(raw.seed).unwrap_or(0);
    let config = serde_json::to_value(raw)?;
    let results = json!({ "checks_evaluated": checks.len() });
    write_report(&out, Mode::Validate, seed, config, results, &checks, passed)?;
    Ok(RunReport { out, checks, passed })
}
