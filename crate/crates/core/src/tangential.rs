//! Minimal tangential velocity on a level curve.
//!
//! On a closed curve the tangential part of the continuity equation is the
//! weighted Laplace-Beltrami problem
//!
//! ```text
//! -(1/tau theta')' = f,   integral theta dS/|grad pi| = 0,
//! ```
//!
//! whose weak form, with `a = 1/(tau |grad pi|)`, reads
//! `integral a theta' xi' ds = integral (f/|grad pi|) xi ds`. It is discretized
//! with periodic piecewise-linear elements on the arclength of the polyline and
//! a lumped load. The kernel of the stiffness matrix is the constants; the
//! system is made regular by pinning `theta_0 = 0`, which leaves a plain
//! tridiagonal solve, and the zero-mean constraint is restored afterwards by
//! projection. The tangential velocity is `v_par = -d theta / ds`.

use crate::error::{Error, Result};
use crate::levelset::LevelCurve;

/// Highest Fourier mode used as a test function in [`CurveEllipticSystem::weak_residual`].
pub const WEAK_TEST_MODES: usize = 8;

/// Assembled periodic P1 system on one curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveEllipticSystem {
    /// Segment lengths `h_i` (segment `i` joins vertices `i` and `i + 1`).
    pub h: Vec<f64>,
    /// Per-segment coefficient `a`, averaged from the vertices.
    pub coefficient: Vec<f64>,
    /// Lumped mass `m_i = (h_{i-1} + h_i) / (2 |grad pi|_i)`.
    pub mass: Vec<f64>,
    /// Lumped load `b_i = f_i m_i`, as given.
    pub load: Vec<f64>,
    /// Arclength of each vertex and total length, for the Fourier tests.
    s: Vec<f64>,
    length: f64,
}

impl CurveEllipticSystem {
    pub fn assemble(curve: &LevelCurve, f: &[f64]) -> Result<Self> {
        let n = curve.len();
        if f.len() != n {
            return Err(Error::InvalidField(format!("{} source samples for {} vertices", f.len(), n)));
        }
        if n < 3 {
            return Err(Error::Resolution { p: curve.p, vertices: n, required: 3 });
        }
        let h = curve.segment_lengths();
        let a_vertex: Vec<f64> = (0..n).map(|i| curve.tau_inv[i] / curve.grad_pi_norm[i]).collect();
        let mut coefficient = Vec::with_capacity(n);
        for i in 0..n {
            let a = 0.5 * (a_vertex[i] + a_vertex[(i + 1) % n]);
            if !(a > 0.0 && a.is_finite()) || !(h[i] > 0.0) {
                return Err(Error::InvalidCoefficient { segment: i, value: if h[i] > 0.0 { a } else { h[i] } });
            }
            coefficient.push(a);
        }
        let mass: Vec<f64> = (0..n).map(|i| 0.5 * (h[(i + n - 1) % n] + h[i]) / curve.grad_pi_norm[i]).collect();
        let load = (0..n).map(|i| f[i] * mass[i]).collect();
        Ok(CurveEllipticSystem { h, coefficient, mass, load, s: curve.arclength.clone(), length: curve.length })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    fn stiffness(&self, i: usize) -> f64 {
        self.coefficient[i] / self.h[i]
    }

    /// `K theta`.
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let prev = (i + n - 1) % n;
                let next = (i + 1) % n;
                self.stiffness(prev) * (theta[i] - theta[prev]) + self.stiffness(i) * (theta[i] - theta[next])
            })
            .collect()
    }

    /// `x^T M y` with the lumped mass.
    pub fn mass_inner(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).zip(&self.mass).map(|((a, b), m)| a * b * m).sum()
    }

    pub fn weighted_mean(&self, x: &[f64]) -> f64 {
        self.mass_inner(x, &vec![1.0; x.len()]) / self.mass.iter().sum::<f64>()
    }

    /// Removes the weighted mean in place.
    pub fn project(&self, x: &mut [f64]) {
        let mean = self.weighted_mean(x);
        x.iter_mut().for_each(|v| *v -= mean);
    }

    /// Discrete solvability defect `sum b_i`, the weighted integral of `f`.
    pub fn load_defect(&self) -> f64 {
        self.load.iter().sum()
    }

    /// Load with its constant-mode component removed, `b - M 1 (sum b / sum m)`.
    pub fn orthogonalized_load(&self) -> Vec<f64> {
        let shift = self.load_defect() / self.mass.iter().sum::<f64>();
        self.load.iter().zip(&self.mass).map(|(b, m)| b - shift * m).collect()
    }

    /// Solves `K theta = rhs` with `theta_0 = 0`. `rhs` must sum to zero for
    /// the dropped first equation to hold.
    pub fn solve_pinned(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.len();
        let m = n - 1;
        let mut lower = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut upper = vec![0.0; m];
        for r in 0..m {
            let i = r + 1;
            diag[r] = self.stiffness(i - 1) + self.stiffness(i);
            if r > 0 {
                lower[r] = -self.stiffness(i - 1);
            }
            if r + 1 < m {
                upper[r] = -self.stiffness(i);
            }
        }
        let interior = thomas(&lower, &diag, &upper, &rhs[1..]);
        let mut theta = Vec::with_capacity(n);
        theta.push(0.0);
        theta.extend(interior);
        theta
    }

    /// `max_k |xi_k^T (K theta - b)|` over `cos`/`sin(2 pi k s / L)`, `k <= 8`,
    /// with `b` the orthogonalized load.
    pub fn weak_residual(&self, theta: &[f64]) -> f64 {
        let kt = self.apply(theta);
        let b = self.orthogonalized_load();
        let r: Vec<f64> = kt.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mut worst = r.iter().sum::<f64>().abs();
        for k in 1..=WEAK_TEST_MODES {
            let w = 2.0 * std::f64::consts::PI * k as f64 / self.length;
            let (mut c, mut s) = (0.0, 0.0);
            for (i, ri) in r.iter().enumerate() {
                c += (w * self.s[i]).cos() * ri;
                s += (w * self.s[i]).sin() * ri;
            }
            worst = worst.max(c.abs()).max(s.abs());
        }
        worst
    }

    /// Weighted `L^2` norm of the source, `sqrt(sum m_i f_i^2)`.
    pub fn source_norm(&self) -> f64 {
        self.load.iter().zip(&self.mass).map(|(b, m)| b * b / m).sum::<f64>().sqrt()
    }

    /// Smallest eigenvalue of `K x = lambda M x` on zero-mean vectors, by
    /// inverse iteration with the pinned solver.
    pub fn coercivity(&self) -> f64 {
        let n = self.len();
        let w = 2.0 * std::f64::consts::PI / self.length;
        let mut x: Vec<f64> = (0..n).map(|i| (w * self.s[i]).cos() + 0.5 * (w * self.s[i]).sin() + 0.1 * (2.0 * w * self.s[i]).cos()).collect();
        self.project(&mut x);
        let mut lambda = f64::NAN;
        for _ in 0..60 {
            let mx: Vec<f64> = x.iter().zip(&self.mass).map(|(a, m)| a * m).collect();
            let mut y = self.solve_pinned(&mx);
            self.project(&mut y);
            let scale = self.mass_inner(&y, &y).sqrt();
            if !(scale > 0.0) {
                break;
            }
            y.iter_mut().for_each(|v| *v /= scale);
            let next: f64 = self.apply(&y).iter().zip(&y).map(|(a, b)| a * b).sum();
            x = y;
            let settled = (next - lambda).abs() <= 1e-12 * next.abs();
            lambda = next;
            if settled {
                break;
            }
        }
        lambda
    }
}

/// Tridiagonal solve (Thomas algorithm); `lower[0]` and `upper[n-1]` are unused.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut beta = diag[0];
    c[0] = if n > 1 { upper[0] / beta } else { 0.0 };
    d[0] = rhs[0] / beta;
    for i in 1..n {
        beta = diag[i] - lower[i] * c[i - 1];
        if i + 1 < n {
            c[i] = upper[i] / beta;
        }
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

/// Result of one curve solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSolution {
    pub theta: Vec<f64>,
    /// `|integral f dS/|grad pi||` before orthogonalization.
    pub load_defect: f64,
    /// Set when the defect exceeded the tolerance but was small enough to
    /// orthogonalize away.
    pub warning: Option<String>,
    pub system: CurveEllipticSystem,
}

/// Solves for the zero-mean velocity potential on `curve`.
///
/// The load is always orthogonalized against the constants. A defect above
/// `tol_avg` attaches a warning; above `10 tol_avg` the source is rejected.
pub fn solve_theta_on_curve(curve: &LevelCurve, f: &[f64], tol_avg: f64) -> Result<ThetaSolution> {
    let system = CurveEllipticSystem::assemble(curve, f)?;
    let defect = system.load_defect().abs();
    if defect > 10.0 * tol_avg {
        return Err(Error::InconsistentSource { residual: defect, limit: 10.0 * tol_avg });
    }
    let warning = (defect > tol_avg)
        .then(|| format!("source average {defect:.3e} exceeds {tol_avg:.3e} on p = {}; orthogonalized", curve.p));
    let mut theta = system.solve_pinned(&system.orthogonalized_load());
    system.project(&mut theta);
    Ok(ThetaSolution { theta, load_defect: defect, warning, system })
}

/// `v_par = -d theta / ds` by centered differences on the arclength.
pub fn tangential_velocity(curve: &LevelCurve, theta: &[f64]) -> Vec<f64> {
    let n = curve.len();
    let h = curve.segment_lengths();
    (0..n)
        .map(|i| {
            let prev = (i + n - 1) % n;
            -(theta[(i + 1) % n] - theta[prev]) / (h[prev] + h[i])
        })
        .collect()
}

/// `K[v_par] = integral v_par^2 dS/|grad pi|`.
pub fn parallel_kinetic_energy(curve: &LevelCurve, v_par: &[f64]) -> f64 {
    let sq: Vec<f64> = v_par.iter().map(|v| v * v).collect();
    curve.weighted_integral(&sq)
}

/// `K[v_par + c |grad pi|] - K[v_par]`, the energy change along the
/// homogeneous perturbation direction.
pub fn minimality_gap(curve: &LevelCurve, v_par: &[f64], c: f64) -> f64 {
    let perturbed: Vec<f64> = v_par.iter().zip(&curve.grad_pi_norm).map(|(v, g)| v + c * g).collect();
    parallel_kinetic_energy(curve, &perturbed) - parallel_kinetic_energy(curve, v_par)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::dot;
    use std::f64::consts::PI;

    /// Unit circle of the harmonic equilibrium with `tau0 = 0.5`, sampled
    /// uniformly: `1/tau = 2`, `|grad pi| = 4 pi`.
    fn circle(n: usize) -> LevelCurve {
        let vertices: Vec<[f64; 2]> = (0..n).map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            [a.cos(), a.sin()]
        }).collect();
        let normal = vertices.clone();
        LevelCurve::from_parts(2.0 * PI, 0.0, 1.0, vertices, vec![2.0; n], vec![4.0 * PI; n], normal, [0.0, 0.0])
    }

    #[test]
    fn zero_source_gives_zero_theta() {
        let c = circle(64);
        let sol = solve_theta_on_curve(&c, &vec![0.0; 64], 1e-6).unwrap();
        assert!(sol.theta.iter().all(|&t| t == 0.0));
        assert!(sol.warning.is_none());
    }

    #[test]
    fn manufactured_solution_is_recovered() {
        let n = 512;
        let c = circle(n);
        for k in [1usize, 3, 7] {
            let exact: Vec<f64> = (0..n).map(|i| (2.0 * PI * k as f64 * c.arclength[i] / c.length).cos()).collect();
            let zero = vec![0.0; n];
            let probe = CurveEllipticSystem::assemble(&c, &zero).unwrap();
            let b = probe.apply(&exact);
            let f: Vec<f64> = b.iter().zip(&probe.mass).map(|(b, m)| b / m).collect();
            let sol = solve_theta_on_curve(&c, &f, 1e-8).unwrap();
            let err = probe.mass_inner(&sol.theta.iter().zip(&exact).map(|(a, b)| a - b).collect::<Vec<_>>(), &sol.theta.iter().zip(&exact).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt();
            let scale = probe.mass_inner(&exact, &exact).sqrt();
            assert!(err / scale < 1e-10, "k = {k}: {}", err / scale);
            assert!(sol.system.weak_residual(&sol.theta) <= 1e-8 * sol.system.source_norm());
        }
    }

    #[test]
    fn tangential_velocity_examples() {
        let n = 512;
        let c = circle(n);
        assert!(tangential_velocity(&c, &vec![3.0; n]).iter().all(|&v| v == 0.0));
        let w = 2.0 * PI / c.length;
        let theta: Vec<f64> = c.arclength.iter().map(|s| (w * s).cos()).collect();
        let v = tangential_velocity(&c, &theta);
        for i in 0..n {
            assert!((v[i] - w * (w * c.arclength[i]).sin()).abs() < 1e-4);
            let vec = [v[i] * c.tangent(i)[0], v[i] * c.tangent(i)[1]];
            assert!(dot(vec, c.normal[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn kinetic_energy_examples() {
        let n = 512;
        let c = circle(n);
        assert_eq!(parallel_kinetic_energy(&c, &vec![0.0; n]), 0.0);
        let v: Vec<f64> = c.arclength.iter().map(|s| (2.0 * PI * s / c.length).sin()).collect();
        assert!((parallel_kinetic_energy(&c, &v) - 0.25).abs() < 1e-4);
    }

    #[test]
    fn minimality_over_homogeneous_perturbations() {
        let n = 200;
        let c = circle(n);
        let f: Vec<f64> = c.arclength.iter().map(|s| (2.0 * PI * 3.0 * s / c.length).sin()).collect();
        let sol = solve_theta_on_curve(&c, &f, 1e-6).unwrap();
        let v = tangential_velocity(&c, &sol.theta);
        let line: f64 = c.length * 4.0 * PI;
        for cc in [-1.0, -0.1, 0.1, 1.0] {
            let gap = minimality_gap(&c, &v, cc);
            assert!(gap >= 0.0);
            assert!((gap - cc * cc * line).abs() < 1e-9 * line, "{gap}");
        }
    }

    #[test]
    fn inconsistent_source_policy() {
        let c = circle(64);
        // Constant source: weighted integral = f * integral dS/|grad pi| = 0.5 f.
        let ok = solve_theta_on_curve(&c, &vec![4e-4; 64], 1e-4).unwrap();
        assert!(ok.warning.is_some());
        assert!(ok.theta.iter().all(|t| t.abs() < 1e-12));
        assert!(matches!(solve_theta_on_curve(&c, &vec![1e-2; 64], 1e-4), Err(Error::InconsistentSource { .. })));
    }

    #[test]
    fn invalid_coefficient_rejected() {
        let mut c = circle(32);
        c.tau_inv[5] = -1.0;
        c.tau_inv[6] = -1.0;
        assert!(matches!(CurveEllipticSystem::assemble(&c, &vec![0.0; 32]), Err(Error::InvalidCoefficient { .. })));
    }

    #[test]
    fn coercivity_of_uniform_circle() {
        // K x = lambda M x with a = 2 / (4 pi), M weight 1 / (4 pi): the
        // continuous first eigenvalue is 2 (2 pi / L)^2 = 2.
        let c = circle(256);
        let sys = CurveEllipticSystem::assemble(&c, &vec![0.0; 256]).unwrap();
        let lambda = sys.coercivity();
        assert!((lambda - 2.0).abs() < 1e-3, "{lambda}");
    }

    #[test]
    fn theta_has_zero_weighted_mean() {
        let c = circle(100);
        let f: Vec<f64> = c.arclength.iter().map(|s| (s * 2.0).cos() + 0.3 * (s * 5.0).sin()).collect();
        let mut f = f;
        let mean = c.weighted_mean(&f);
        f.iter_mut().for_each(|v| *v -= mean);
        let sol = solve_theta_on_curve(&c, &f, 1e-8).unwrap();
        assert!(c.weighted_integral(&sol.theta).abs() < 1e-10);
    }

    #[test]
    fn thomas_small_system() {
        let x = thomas(&[0.0, 1.0, 1.0], &[4.0, 4.0, 4.0], &[1.0, 1.0, 0.0], &[5.0, 6.0, 5.0]);
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }
}
