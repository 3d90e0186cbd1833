use neufrac::analysis::{tent_field, TentSpec};
use neufrac::geometry::{build_domain, build_mesh, ExteriorTruncation, Mesh, Shape};
use neufrac::kernel::{
    boxes_overlap, dist2, pair_energy, MomentCache, Params, CROSS_FLOOR, TOUCH_REL,
};
use std::sync::Arc;

fn classify_sum(
    mesh: &Mesh,
    uu: &[f64],
    a: &[usize],
    b: &[usize],
    cache: &mut MomentCache,
    params: &Params,
) -> Vec<(usize, usize, f64)> {
    let dim = params.dim;
    let cells = mesh.cells();
    let mut out = Vec::new();
    for &i in a {
        let ci = &cells[i];
        let ri = ci.weight / ci.box_measure(dim);
        for &j in b {
            if i == j {
                let t = cache.diag_t(ci, params).unwrap();
                let g = mesh.gradient_at(uu, i);
                out.push((
                    i,
                    j,
                    ri * ri * (g[0] * g[0] * t[0] + g[1] * g[1] * t[1] + 2.0 * g[0] * g[1] * t[2]),
                ));
                continue;
            }
            let cj = &cells[j];
            let r2 = dist2(ci.node, cj.node);
            let scale = ci.extent(dim).max(cj.extent(dim));
            let tol = TOUCH_REL * scale;
            let dv = uu[i] - uu[j];
            let v = if boxes_overlap(ci, cj, dim, tol) {
                let rf = CROSS_FLOOR * 0.5 * (ci.extent(dim) + cj.extent(dim));
                ci.weight * cj.weight * dv * dv * params.kernel_r2(r2.max(rf * rf))
            } else if ci.gap(cj, dim) <= tol {
                let rj = cj.weight / cj.box_measure(dim);
                let m2 = cache.pair_m2(ci, cj, params).unwrap();
                ri * rj * dv * dv / r2 * m2
            } else {
                ci.weight * cj.weight * dv * dv * params.kernel_r2(r2)
            };
            out.push((i, j, v));
        }
    }
    out
}

#[test]
fn bisect_interior_identity() {
    let d = build_domain(Shape::Interval { a: -1.0, b: 1.0 }).unwrap();
    let t = ExteriorTruncation::new(&d, 8.0, 0.25).unwrap();
    let m = Arc::new(build_mesh(&d, 0.02, t).unwrap());
    let eps = 0.2;
    let params = Params::new(1, 0.25, 2.0, eps).unwrap();
    let spec = TentSpec::new(&m.domain, m.domain.centroid, eps).unwrap();
    let phi = tent_field(&spec, &m).unwrap();
    let all: Vec<usize> = (0..m.n_interior()).collect();
    let (mut sup, mut rest) = (Vec::new(), Vec::new());
    for i in 0..m.n_interior() {
        let q = m.node(i);
        if q[0].hypot(q[1]) < eps {
            sup.push(i);
        } else {
            rest.push(i);
        }
    }

    // Whole product with one cache.
    let mut cw = MomentCache::new();
    let whole = classify_sum(&m, phi.values(), &all, &all, &mut cw, &params);
    // Blocks with per-call caches, mirroring separate pair_energy calls.
    let mut c1 = MomentCache::new();
    let ss = classify_sum(&m, phi.values(), &sup, &sup, &mut c1, &params);
    let mut c2 = MomentCache::new();
    let sr = classify_sum(&m, phi.values(), &sup, &rest, &mut c2, &params);
    let mut c3 = MomentCache::new();
    let rs = classify_sum(&m, phi.values(), &rest, &sup, &mut c3, &params);
    let mut c4 = MomentCache::new();
    let rr = classify_sum(&m, phi.values(), &rest, &rest, &mut c4, &params);

    use std::collections::HashMap;
    let mut wv: HashMap<(usize, usize), f64> = HashMap::new();
    for (i, j, v) in &whole {
        wv.insert((*i, *j), *v);
    }
    let mut mismatches = 0;
    for block in [&ss, &sr, &rs, &rr] {
        for (i, j, v) in block.iter() {
            let w = wv[&(*i, *j)];
            if (v - w).abs() > 1e-12 * w.abs().max(1e-300) {
                if mismatches < 10 {
                    let (ci, cj) = (&m.cells()[*i], &m.cells()[*j]);
                    println!(
                        "pair ({i},{j}): block {v:.12e} whole {w:.12e}  exts ({:.4},{:.4}) gap {:.3e}",
                        ci.extent(1),
                        cj.extent(1),
                        ci.gap(cj, 1)
                    );
                }
                mismatches += 1;
            }
        }
    }
    println!("total mismatched pairs: {mismatches}");

    let sum = |v: &[(usize, usize, f64)]| v.iter().map(|(_, _, x)| x).sum::<f64>();
    println!("whole {:.15e}", sum(&whole));
    println!(
        "pieces {:.15e}",
        sum(&ss) + sum(&sr) + sum(&rs) + sum(&rr)
    );

    // Compare with the library's own values.
    let lib_whole = pair_energy(&phi, &all, &all, &params).unwrap().value;
    println!("lib whole {lib_whole:.15e}");
}

#[test]
fn rule_translation_on_grid() {
    let d = build_domain(Shape::Interval { a: -1.0, b: 1.0 }).unwrap();
    let t = ExteriorTruncation::new(&d, 8.0, 0.25).unwrap();
    let m = Arc::new(build_mesh(&d, 0.02, t).unwrap());
    let params = Params::new(1, 0.25, 2.0, 0.2).unwrap();
    let cells = m.cells();
    for i in [0usize, 1, 40, 41, 42] {
        println!(
            "cell {i}: lo {:?} hi {:?} node {:?} w {:.17e}",
            cells[i].lo, cells[i].hi, cells[i].node, cells[i].weight
        );
    }
    for (a, b) in [(0usize, 1usize), (40, 41), (60, 61)] {
        let mut c = MomentCache::new();
        let m2 = c.pair_m2(&cells[a], &cells[b], &params).unwrap();
        let mut c2 = MomentCache::new();
        let td = c2.diag_t(&cells[a], &params).unwrap();
        println!("pair ({a},{b}): m2 {m2:.15e}  diagT[{a}] {:.15e}", td[0]);
    }
}

#[test]
fn probe_default_solve() {
    use neufrac::operators::NonlocalForm;
    use neufrac::solver::{solve, SolveConfig};
    let d = build_domain(Shape::Interval { a: -1.0, b: 1.0 }).unwrap();
    let t = ExteriorTruncation::new(&d, 8.0, 0.25).unwrap();
    let m = Arc::new(build_mesh(&d, 0.05, t).unwrap());
    let params = Params::new(1, 0.25, 2.0, 0.4).unwrap();
    let form = NonlocalForm::new(&m, &params).unwrap();
    let rep = solve(&form, &SolveConfig::default()).unwrap();
    println!(
        "energy {:.12} residual {:.3e} iters {} restarts {} converged {}",
        rep.energy.value, rep.residual, rep.iterations, rep.restarts, rep.converged
    );
    for r in rep.history.iter().take(8) {
        println!("  it {} energy {:.9} res {:.3e} step {:.3e}", r.iter, r.energy, r.residual, r.step);
    }
    for r in rep.history.iter().rev().take(4) {
        println!("  late it {} energy {:.9} res {:.3e} step {:.3e}", r.iter, r.energy, r.residual, r.step);
    }
}

#[test]
fn probe_init_basins() {
    use neufrac::field::Field;
    use neufrac::operators::NonlocalForm;
    use neufrac::solver::{solve, InitialGuess, SolveConfig};
    let d = build_domain(Shape::Interval { a: -1.0, b: 1.0 }).unwrap();
    let t = ExteriorTruncation::new(&d, 8.0, 0.25).unwrap();
    let m = Arc::new(build_mesh(&d, 0.05, t).unwrap());
    let params = Params::new(1, 0.25, 2.0, 0.4).unwrap();
    let form = NonlocalForm::new(&m, &params).unwrap();
    for (label, width) in [("tent w=eps", 0.4f64), ("tent w=eps/2", 0.2), ("tent w=eps/4", 0.1)] {
        let init = Field::from_fn(&m, |p| {
            let r = p[0].hypot(p[1]);
            (1.0 - r / width).max(0.0)
        })
        .unwrap();
        let rep = solve(
            &form,
            &SolveConfig { init: InitialGuess::Warm(init), ..SolveConfig::default() },
        )
        .unwrap();
        println!("{label}: energy {:.9} iters {} restarts {}", rep.energy.value, rep.iterations, rep.restarts);
    }
    let rep = solve(&form, &SolveConfig { init: InitialGuess::Bump, ..SolveConfig::default() }).unwrap();
    println!("bump: energy {:.9} iters {} restarts {}", rep.energy.value, rep.iterations, rep.restarts);
}

#[test]
fn probe_wavy_shape_and_sweep() {
    use neufrac::field::Field;
    use neufrac::operators::NonlocalForm;
    use neufrac::solver::{solve, InitialGuess, SolveConfig};
    let d = build_domain(Shape::Interval { a: -1.0, b: 1.0 }).unwrap();
    let t = ExteriorTruncation::new(&d, 8.0, 0.25).unwrap();
    let m = Arc::new(build_mesh(&d, 0.05, t).unwrap());
    let params = Params::new(1, 0.25, 2.0, 0.4).unwrap();
    let form = NonlocalForm::new(&m, &params).unwrap();
    let wavy = Field::from_fn(&m, |p| 0.5 + (6.0 * p[0]).sin()).unwrap().abs();
    let rep = solve(
        &form,
        &SolveConfig { init: InitialGuess::Warm(wavy), ..SolveConfig::default() },
    )
    .unwrap();
    let vals = rep.field.values();
    let imax = (0..m.n_interior())
        .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
        .unwrap();
    println!(
        "wavy solution: energy {:.9} max {:.4} at x {:.4}",
        rep.energy.value, vals[imax], m.node(imax)[0]
    );
    // Default tent across the dyadic sweep.
    for eps in [0.4f64, 0.2, 0.1, 0.05] {
        let h = (eps / 8.0).min(0.05);
        let mm = Arc::new(build_mesh(&d, h, ExteriorTruncation::new(&d, 8.0, 0.25).unwrap()).unwrap());
        let pr = Params::new(1, 0.25, 2.0, eps).unwrap();
        let fm = NonlocalForm::new(&mm, &pr).unwrap();
        let rep = solve(&fm, &SolveConfig::default()).unwrap();
        let vals = rep.field.values();
        let imax = (0..mm.n_interior())
            .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
            .unwrap();
        println!(
            "eps {eps}: energy {:.9} iters {} max {:.4} at x {:.4} amp ratio {:.3}",
            rep.energy.value,
            rep.iterations,
            vals[imax],
            mm.node(imax)[0],
            vals[imax] / rep.field.interior_mean().max(1e-300)
        );
    }
}

#[test]
fn probe_boundary_branch() {
    use neufrac::field::Field;
    use neufrac::operators::NonlocalForm;
    use neufrac::solver::{solve, InitialGuess, SolveConfig};
    let d = build_domain(Shape::Interval { a: -1.0, b: 1.0 }).unwrap();
    for eps in [0.4f64, 0.2, 0.1, 0.05] {
        let h = (eps / 8.0).min(0.05);
        let mm = Arc::new(build_mesh(&d, h, ExteriorTruncation::new(&d, 8.0, 0.25).unwrap()).unwrap());
        let pr = Params::new(1, 0.25, 2.0, eps).unwrap();
        let fm = NonlocalForm::new(&mm, &pr).unwrap();
        let w = 0.5 * eps.min(mm.domain.inradius);
        let x0 = 1.0 - 0.05 * mm.domain.inradius;
        let init = Field::from_fn(&mm, |p| {
            let r = (p[0] - x0).hypot(p[1]);
            (1.0 - r / w).max(0.0)
        })
        .unwrap();
        let rep = solve(
            &fm,
            &SolveConfig { init: InitialGuess::Warm(init), ..SolveConfig::default() },
        )
        .unwrap();
        let vals = rep.field.values();
        let imax = (0..mm.n_interior())
            .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
            .unwrap();
        println!(
            "bdry eps {eps}: energy {:.9} iters {} conv {} max {:.4} at x {:.4}",
            rep.energy.value, rep.iterations, rep.converged, vals[imax], mm.node(imax)[0]
        );
    }
}

#[test]
fn probe_2d_cost() {
    use neufrac::field::Field;
    use neufrac::operators::NonlocalForm;
    use std::time::Instant;
    let d = build_domain(Shape::Disk { center: [0.0, 0.0], r: 1.0 }).unwrap();
    for eps in [0.1f64, 0.05] {
        let h = eps / 8.0;
        let t0 = Instant::now();
        let t = ExteriorTruncation::new(&d, 8.0, 0.2).unwrap();
        let m = Arc::new(build_mesh(&d, h, t).unwrap());
        let tm = t0.elapsed();
        println!(
            "eps {eps}: n_i {} n_e {} mesh {:.2}s",
            m.n_interior(),
            m.n_exterior(),
            tm.as_secs_f64()
        );
        let params = Params::new(2, 0.5, 2.0, eps).unwrap();
        let t0 = Instant::now();
        let form = NonlocalForm::new(&m, &params).unwrap();
        println!("  assembly {:.2}s", t0.elapsed().as_secs_f64());
        let u = Field::from_fn(&m, |p| 1.0 + p[0] + (3.0 * p[1]).cos()).unwrap();
        let t0 = Instant::now();
        let c = form.exterior_closure(&u).unwrap();
        println!("  closure {:.2}s", t0.elapsed().as_secs_f64());
        let mut y = vec![0.0; m.n_total()];
        let t0 = Instant::now();
        form.apply_scaled(c.values(), c.far(), &mut y);
        println!("  apply {:.2}s", t0.elapsed().as_secs_f64());
    }
}

#[test]
fn probe_2d_solve() {
    use neufrac::operators::NonlocalForm;
    use neufrac::solver::{solve, SolveConfig};
    use std::io::Write;
    use std::time::Instant;
    let eps: f64 = std::env::var("PROBE_EPS").ok().and_then(|v| v.parse().ok()).unwrap_or(0.2);
    let d = build_domain(Shape::Disk { center: [0.0, 0.0], r: 1.0 }).unwrap();
    let h = eps / 8.0;
    let t0 = Instant::now();
    let t = ExteriorTruncation::new(&d, 8.0, 0.2).unwrap();
    let m = Arc::new(build_mesh(&d, h, t).unwrap());
    let params = Params::new(2, 0.5, 2.0, eps).unwrap();
    let form = NonlocalForm::new(&m, &params).unwrap();
    let setup = t0.elapsed().as_secs_f64();
    println!("eps {eps}: n_i {} n_e {} setup {setup:.1}s", m.n_interior(), m.n_exterior());
    std::io::stdout().flush().unwrap();
    let dense_limit: usize =
        std::env::var("PROBE_DENSE").ok().and_then(|v| v.parse().ok()).unwrap_or(3000);
    let cg_iters: usize =
        std::env::var("PROBE_CG").ok().and_then(|v| v.parse().ok()).unwrap_or(6);
    let t1 = Instant::now();
    let rep = solve(
        &form,
        &SolveConfig { dense_limit, cg_iters, ..SolveConfig::default() },
    )
    .unwrap();
    let tsolve = t1.elapsed().as_secs_f64();
    let vals = rep.field.values();
    let imax = (0..m.n_interior())
        .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
        .unwrap();
    let p = m.node(imax);
    println!(
        "eps {eps}: solve {tsolve:.1}s iters {} conv {} energy {:.9} max {:.4} at ({:.3},{:.3})",
        rep.iterations,
        rep.converged,
        rep.energy.value,
        vals[imax],
        p[0],
        p[1]
    );
    for r in rep.history.iter().take(6) {
        println!("  it {} energy {:.9} res {:.3e} step {:.3e}", r.iter, r.energy, r.residual, r.step);
    }
    for r in rep.history.iter().rev().take(10).collect::<Vec<_>>().iter().rev() {
        println!("  late it {} energy {:.9} res {:.3e} step {:.3e}", r.iter, r.energy, r.residual, r.step);
    }
}

#[test]
#[ignore]
fn probe_2d_chain() {
    use neufrac::field::Field;
    use neufrac::operators::NonlocalForm;
    use neufrac::solver::{solve, InitialGuess, SolveConfig};
    use std::time::Instant;
    let eps: f64 = std::env::var("PROBE_EPS").ok().and_then(|v| v.parse().ok()).unwrap_or(0.2);
    let h_ext: f64 = std::env::var("PROBE_HEXT").ok().and_then(|v| v.parse().ok()).unwrap_or(0.2);
    let d = build_domain(Shape::Disk { center: [0.0, 0.0], r: 1.0 }).unwrap();
    let t_all = Instant::now();
    let mut warm: Option<Field> = None;
    for div in [2.0f64, 4.0, 8.0] {
        let h = eps / div;
        let t0 = Instant::now();
        let t = ExteriorTruncation::new(&d, 8.0, h_ext).unwrap();
        let m = Arc::new(build_mesh(&d, h, t).unwrap());
        let params = Params::new(2, 0.5, 2.0, eps).unwrap();
        let form = NonlocalForm::new(&m, &params).unwrap();
        let setup = t0.elapsed().as_secs_f64();
        let init = match warm.take() {
            Some(f) => InitialGuess::Warm(f),
            None => InitialGuess::Tent,
        };
        let t1 = Instant::now();
        let rep = solve(
            &form,
            &SolveConfig { init, keep_history: false, ..SolveConfig::default() },
        )
        .unwrap();
        println!(
            "  h=eps/{div}: n_i {} setup {setup:.1}s solve {:.1}s iters {} conv {} energy {:.9}",
            m.n_interior(),
            t1.elapsed().as_secs_f64(),
            rep.iterations,
            rep.converged,
            rep.energy.value
        );
        warm = Some(rep.field);
    }
    println!("chain total {:.1}s", t_all.elapsed().as_secs_f64());
}

#[test]
fn probe_fft_cost() {
    use neufrac::fft::LatticeConv;
    use std::time::Instant;
    let t0 = Instant::now();
    let conv = LatticeConv::new(320, 320, |di, dj| {
        let r2 = ((di * di + dj * dj) as f64) * 0.00625 * 0.00625;
        if r2 == 0.0 { 0.0 } else { r2.powf(-1.5) }
    });
    println!("plan+table {:.3}s", t0.elapsed().as_secs_f64());
    let grid: Vec<f64> = (0..320 * 320).map(|i| (i as f64 * 0.1).sin()).collect();
    let mut out = vec![0.0; grid.len()];
    let t1 = Instant::now();
    for _ in 0..5 {
        conv.convolve(&grid, &mut out);
    }
    println!("convolve avg {:.3}s", t1.elapsed().as_secs_f64() / 5.0);
}
