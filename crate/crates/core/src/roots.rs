//! Bracketed scalar root finding and one-dimensional quadrature.

use crate::error::{Error, Result};

/// Illinois variant of regula falsi on a sign-changing bracket `[a, b]`.
///
/// Stops when the bracket is narrower than `xtol` or `|f| <= ftol`.
pub fn illinois<F>(mut f: F, mut a: f64, mut b: f64, xtol: f64, ftol: f64, max_iter: usize) -> Option<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    let mut side = 0i8;
    for _ in 0..max_iter {
        let c = (a * fb - b * fa) / (fb - fa);
        let c = if c.is_finite() && c > a.min(b) && c < a.max(b) { c } else { 0.5 * (a + b) };
        let fc = f(c);
        if fc.abs() <= ftol || (b - a).abs() <= xtol {
            return Some(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Some(if fa.abs() < fb.abs() { a } else { b })
}

/// Plain bisection for an increasing function, `f(lo) <= 0 <= f(hi)`.
pub fn bisect_increasing<F>(mut f: F, mut lo: f64, mut hi: f64, xtol: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    for _ in 0..200 {
        if hi - lo <= xtol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Root of `g(x) = level` on the ray `x = origin + direction * s, s > 0`,
/// where `g` increases away from `origin`. Brackets by doubling, then bisects.
pub fn ray_root<G>(g: G, origin: f64, direction: f64, level: f64, reach: f64) -> Result<f64>
where
    G: Fn(f64) -> f64,
{
    let mut inner = 0.0;
    let mut g_inner = g(origin);
    if level <= g_inner {
        return Ok(origin);
    }
    let mut step = 1e-3 * origin.abs().max(1.0);
    loop {
        let outer = inner + step;
        let g_outer = g(origin + direction * outer);
        if !(g_outer >= g_inner) {
            return Err(Error::InvalidField(format!(
                "W is not increasing away from the critical point near x = {}",
                origin + direction * outer
            )));
        }
        if g_outer >= level {
            let s = bisect_increasing(|s| g(origin + direction * s) - level, inner, outer, 0.0);
            return Ok(origin + direction * s);
        }
        if outer > reach {
            return Err(Error::InvalidField(format!("W stays below {level} within distance {reach}")));
        }
        inner = outer;
        g_inner = g_outer;
        step *= 2.0;
    }
}

/// Adaptive double-exponential quadrature of a smooth integrand on `[a, b]`.
pub fn integrate<F>(f: F, a: f64, b: f64, abs_tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return 0.0;
    }
    quadrature::integrate(f, a, b, abs_tol).integral
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn illinois_finds_cubic_root() {
        let r = illinois(|x| x * x * x - 2.0, 0.0, 2.0, 1e-15, 0.0, 200).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-13);
    }

    #[test]
    fn illinois_rejects_same_sign_bracket() {
        assert!(illinois(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 0.0, 50).is_none());
    }

    #[test]
    fn ray_root_both_sides() {
        let g = |x: f64| 0.5 * x * x;
        assert!((ray_root(g, 0.0, 1.0, 0.5, 1e6).unwrap() - 1.0).abs() < 1e-14);
        assert!((ray_root(g, 0.0, -1.0, 2.0, 1e6).unwrap() + 2.0).abs() < 1e-14);
    }

    #[test]
    fn ray_root_detects_non_monotone_potential() {
        // x^2/2 + x^3/10 has a local maximum at -10/3.
        let g = |x: f64| 0.5 * x * x + 0.1 * x * x * x;
        assert!(ray_root(g, 0.0, -1.0, 1.9, 1e6).is_err());
    }

    #[test]
    fn quadrature_smooth_integrand() {
        let v = integrate(|x| x.exp(), 0.0, 1.0, 1e-13);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-12);
    }
}
