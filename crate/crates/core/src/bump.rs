//! Smooth compactly supported bump profiles used throughout the engine.
//!
//! Every smooth cutoff, packet envelope, mollifier and radial transition is
//! built from the single profile `exp(1 - 1/(1 - s^2))` on (-1, 1), so that
//! all "C0-infinity" objects in the engine share one explicit construction.

/// The base bump: `exp(1 - 1/(1 - s^2))` for |s| < 1, zero otherwise.
/// Normalized so `bump(0) = 1`.
pub fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

/// Radial bump in `dim` dimensions: `bump(|z|/radius)`.
pub fn bump_radial(z: &[f64], radius: f64) -> f64 {
    let r2: f64 = z.iter().map(|c| c * c).sum();
    bump(r2.sqrt() / radius)
}

// 32-node Gauss-Legendre on [-1, 1].
const GL_NODES: [f64; 16] = [
    0.048307665687738316,
    0.144471961582796493,
    0.239287362252137075,
    0.331868602282127650,
    0.421351276130635345,
    0.506899908932229390,
    0.587715757240762329,
    0.663044266930215201,
    0.732182118740289680,
    0.794483795967942407,
    0.849367613732569970,
    0.896321155766052124,
    0.934906075937739689,
    0.964762255587506431,
    0.985611511545268335,
    0.997263861849481564,
];
const GL_WEIGHTS: [f64; 16] = [
    0.096540088514727801,
    0.095638720079274859,
    0.093844399080804566,
    0.091173878695763885,
    0.087652093004403811,
    0.083311924226946755,
    0.078193895787070306,
    0.072345794108848506,
    0.065822222776361847,
    0.058684093478535547,
    0.050998059262376176,
    0.042835898022226681,
    0.034273862913021433,
    0.025392065309262059,
    0.016274394730905671,
    0.007018610009470097,
];

/// 32-node Gauss-Legendre quadrature of `f` over [a, b].
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..16 {
        let x = half * GL_NODES[i];
        acc += GL_WEIGHTS[i] * (f(mid + x) + f(mid - x));
    }
    acc * half
}

/// Composite Gauss-Legendre with `panels` subintervals.
pub fn gauss_legendre_composite<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let step = (b - a) / panels as f64;
    (0..panels)
        .map(|i| gauss_legendre(&f, a + i as f64 * step, a + (i + 1) as f64 * step))
        .sum()
}

/// Total mass of the 1-d bump over [-1, 1], computed once.
fn bump_mass_1d() -> f64 {
    use std::sync::OnceLock;
    static CACHE: OnceLock<f64> = OnceLock::new();
    *CACHE.get_or_init(|| gauss_legendre_composite(bump, -1.0, 1.0, 8))
}

/// Normalized integral of the bump: S(u) = (1/Z) * int_{-1}^{u} bump(s) ds.
///
/// Smooth monotone step with S(-1) = 0, S(1) = 1 and all derivatives
/// vanishing at the endpoints.
pub fn bump_step(u: f64) -> f64 {
    if u <= -1.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    gauss_legendre_composite(bump, -1.0, u, 8) / bump_mass_1d()
}

/// Smooth transition from 1 to 0 as `r` runs over [a, b]; 1 below a, 0 above b.
pub fn transition_down(r: f64, a: f64, b: f64) -> f64 {
    debug_assert!(b > a);
    if r <= a {
        1.0
    } else if r >= b {
        0.0
    } else {
        1.0 - bump_step(2.0 * (r - a) / (b - a) - 1.0)
    }
}

/// Smooth transition from 0 to 1 as `r` runs over [a, b].
pub fn transition_up(r: f64, a: f64, b: f64) -> f64 {
    1.0 - transition_down(r, a, b)
}

/// Plateau profile on an interval: 0 below `lo - delta`, 1 on [lo, hi],
/// 0 above `hi + delta`, smooth in the two transition bands.
pub fn plateau(v: f64, lo: f64, hi: f64, delta: f64) -> f64 {
    debug_assert!(hi >= lo && delta > 0.0);
    transition_up(v, lo - delta, lo) * transition_down(v, hi, hi + delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_support_and_peak() {
        assert_eq!(bump(1.0), 0.0);
        assert_eq!(bump(-1.2), 0.0);
        assert!((bump(0.0) - 1.0).abs() < 1e-15);
        assert!(bump(0.9) > 0.0);
    }

    #[test]
    fn step_endpoints_and_monotone() {
        assert_eq!(bump_step(-1.0), 0.0);
        assert_eq!(bump_step(1.0), 1.0);
        assert!((bump_step(0.0) - 0.5).abs() < 1e-12); // even profile
        let mut prev = 0.0;
        for i in 0..=100 {
            let u = -1.0 + 2.0 * i as f64 / 100.0;
            let s = bump_step(u);
            assert!(s >= prev - 1e-15);
            prev = s;
        }
    }

    #[test]
    fn quadrature_exact_on_cubic() {
        let v = gauss_legendre(|x| 3.0 * x * x * x - x + 2.0, -1.0, 3.0);
        // antiderivative: 3/4 x^4 - x^2/2 + 2x
        let exact = (0.75 * 81.0 - 4.5 + 6.0) - (0.75 - 0.5 - 2.0);
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn plateau_shape() {
        assert_eq!(plateau(0.5, 0.2, 0.8, 0.1), 1.0);
        assert_eq!(plateau(0.05, 0.2, 0.8, 0.1), 0.0);
        assert_eq!(plateau(0.95, 0.2, 0.8, 0.1), 0.0);
        let t = plateau(0.15, 0.2, 0.8, 0.1);
        assert!(t > 0.0 && t < 1.0);
    }
}
