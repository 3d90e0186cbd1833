//! Shared numerical oracles for integration tests.
//!
//! Everything here is computed from definitions (adaptive quadrature,
//! series + tail splits, finite differences) rather than through the
//! library's own rules, so tests compare two independent routes.

#![allow(dead_code)]

/// Adaptive Simpson on [a, b] with absolute tolerance `tol`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Nested adaptive Simpson over the rectangle [ax,bx] x [ay,by].
pub fn simpson2(f: &dyn Fn(f64, f64) -> f64, ax: f64, bx: f64, ay: f64, by: f64, tol: f64) -> f64 {
    simpson(&|x| simpson(&|y| f(x, y), ay, by, 0.1 * tol), ax, bx, tol)
}

/// Fixed-order Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss16() -> (&'static [f64; 16], &'static [f64; 16]) {
    const X: [f64; 16] = [
        -0.9894009349916499,
        -0.9445750230732326,
        -0.8656312023878318,
        -0.7554044083550030,
        -0.6178762444026438,
        -0.4580167776572274,
        -0.2816035507792589,
        -0.0950125098376374,
        0.0950125098376374,
        0.2816035507792589,
        0.4580167776572274,
        0.6178762444026438,
        0.7554044083550030,
        0.8656312023878318,
        0.9445750230732326,
        0.9894009349916499,
    ];
    const W: [f64; 16] = [
        0.0271524594117541,
        0.0622535239386479,
        0.0951585116824928,
        0.1246289712555339,
        0.1495959888165767,
        0.1691565193950025,
        0.1826034150449236,
        0.1894506104550685,
        0.1894506104550685,
        0.1826034150449236,
        0.1691565193950025,
        0.1495959888165767,
        0.1246289712555339,
        0.0951585116824928,
        0.0622535239386479,
        0.0271524594117541,
    ];
    (&X, &W)
}

/// 4D tensor Gauss-Legendre integral of f over box_a x box_b (2D cells).
pub fn gauss4d(
    f: &dyn Fn(f64, f64, f64, f64) -> f64,
    a_lo: [f64; 2],
    a_hi: [f64; 2],
    b_lo: [f64; 2],
    b_hi: [f64; 2],
) -> f64 {
    let (xs, ws) = gauss16();
    let map = |lo: f64, hi: f64, t: f64| 0.5 * (hi + lo) + 0.5 * (hi - lo) * t;
    let jac = 0.0625
        * (a_hi[0] - a_lo[0])
        * (a_hi[1] - a_lo[1])
        * (b_hi[0] - b_lo[0])
        * (b_hi[1] - b_lo[1]);
    let mut total = 0.0;
    for (i, &ti) in xs.iter().enumerate() {
        let x0 = map(a_lo[0], a_hi[0], ti);
        for (j, &tj) in xs.iter().enumerate() {
            let x1 = map(a_lo[1], a_hi[1], tj);
            let wij = ws[i] * ws[j];
            for (k, &tk) in xs.iter().enumerate() {
                let y0 = map(b_lo[0], b_hi[0], tk);
                for (l, &tl) in xs.iter().enumerate() {
                    let y1 = map(b_lo[1], b_hi[1], tl);
                    total += wij * ws[k] * ws[l] * f(x0, x1, y0, y1);
                }
            }
        }
    }
    jac * total
}

/// Bessel J0 via its integral definition, one 16-point Gauss panel per
/// few oscillation wavelengths so it stays accurate for large arguments.
pub fn bessel_j0(rho: f64) -> f64 {
    let (xs, ws) = gauss16();
    let panels = 1 + (rho.abs() * 0.25) as usize;
    let w = std::f64::consts::PI / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let lo = p as f64 * w;
        for (&t, &wt) in xs.iter().zip(ws) {
            let theta = lo + 0.5 * w * (t + 1.0);
            acc += wt * (rho * theta.sin()).cos();
        }
    }
    acc * 0.5 * w / std::f64::consts::PI
}

/// Kernel normalization from its defining Fourier integral,
/// 1/C = ∫_{R^n} (1 - cos z_1) |z|^{-n-2s} dz, via series near zero,
/// adaptive quadrature in the middle, and an integrated tail with the
/// oscillatory remainder bounded by parts.
pub fn norm_constant_oracle(n: usize, s: f64) -> f64 {
    let q = 2.0 * s;
    let delta = 0.1f64;
    let inv = match n {
        1 => {
            let cut = 2.0e4;
            // 1 - cos z ~ z^2/2 - z^4/24 + z^6/720 near zero.
            let head = delta.powf(2.0 - q) / (2.0 * (2.0 - q))
                - delta.powf(4.0 - q) / (24.0 * (4.0 - q))
                + delta.powf(6.0 - q) / (720.0 * (6.0 - q));
            let mid = simpson(
                &|z: f64| (1.0 - z.cos()) * z.powf(-(1.0 + q)),
                delta,
                cut,
                1e-12,
            );
            // Tail: plain power part exactly, cosine part by two
            // integrations by parts (sin/cos boundary terms).
            let qq = 1.0 + q;
            let osc = cut.sin() * cut.powf(-qq) - qq * cut.cos() * cut.powf(-qq - 1.0);
            let tail = cut.powf(-q) / q + osc;
            2.0 * (head + mid + tail)
        }
        2 => {
            let cut = 300.0;
            // Angular average of cos(rho cos t) is J0(rho).
            let head = delta.powf(2.0 - q) / (4.0 * (2.0 - q))
                - delta.powf(4.0 - q) / (64.0 * (4.0 - q))
                + delta.powf(6.0 - q) / (2304.0 * (6.0 - q));
            let mid = simpson(
                &|r: f64| (1.0 - bessel_j0(r)) * r.powf(-(1.0 + q)),
                delta,
                cut,
                1e-11,
            );
            let tail = cut.powf(-q) / q;
            2.0 * std::f64::consts::PI * (head + mid + tail)
        }
        _ => panic!("oracle only covers n = 1, 2"),
    };
    1.0 / inv
}

/// Beta-function integral B(n, p+2) = ∫_0^1 t^{n-1} (1-t)^{p+1} dt,
/// evaluated by quadrature rather than through gamma functions.
pub fn beta_integral_oracle(n: usize, p: f64) -> f64 {
    simpson(
        &|t: f64| t.powi(n as i32 - 1) * (1.0 - t).powf(p + 1.0),
        0.0,
        1.0,
        1e-14,
    )
}

/// Richardson-extrapolated central difference of g at 0.
pub fn central_derivative(g: &dyn Fn(f64) -> f64, h: f64) -> f64 {
    let d = |h: f64| (g(h) - g(-h)) / (2.0 * h);
    (4.0 * d(0.5 * h) - d(h)) / 3.0
}

/// Relative gap between two scalars, guarded against zero.
pub fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
