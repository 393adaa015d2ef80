//! The one-dimensional medium: an interval `[a(t), b(t)]` around the
//! minimum of `W`, its endpoint speeds and the closed-form velocity.
//!
//! No grid is involved. Endpoints come from root finding on `W`, masses and
//! time derivatives of the mass from adaptive quadrature of `1/tau` and its
//! analytic time derivative.

use std::cell::RefCell;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::FieldSpec;
use crate::roots::{bisect_increasing, illinois, integrate, ray_root};

const QUAD_TOL: f64 = 1e-10;
const REACH: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval1D {
    pub a: f64,
    pub b: f64,
    pub t: f64,
    pub n_total: f64,
    /// Common value `W(a) = W(b)`, the Fermi level.
    pub level: f64,
}

impl Interval1D {
    pub fn contains(&self, x: f64) -> bool {
        self.a <= x && x <= self.b
    }
}

fn center(spec: &FieldSpec, t: f64) -> Result<f64> {
    if spec.dimension != 1 {
        return Err(Error::InvalidField("one-dimensional routine called on a planar field".into()));
    }
    spec.critical_point(t)
        .map(|c| c[0])
        .ok_or_else(|| Error::InvalidField("one-dimensional potentials need a critical point".into()))
}

fn n_at(spec: &FieldSpec, x: f64, t: f64) -> Result<f64> {
    spec.inverse_volume([x, 0.0], t)
}

fn dn_dt(spec: &FieldSpec, x: f64, t: f64) -> Result<f64> {
    spec.inverse_volume_time_derivative([x, 0.0], t)
}

/// `int_lo^hi g`, propagating the first evaluation error.
fn quad<G>(g: G, lo: f64, hi: f64) -> Result<f64>
where
    G: Fn(f64) -> Result<f64>,
{
    let failure = RefCell::new(None);
    let v = integrate(
        |x| {
            g(x).unwrap_or_else(|e| {
                failure.borrow_mut().get_or_insert(e);
                0.0
            })
        },
        lo,
        hi,
        QUAD_TOL,
    );
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Where `W` stops increasing on the ray from `c` in direction `dir`, if it
/// does so within reach.
fn monotone_extent(spec: &FieldSpec, c: f64, dir: f64, t: f64) -> Option<f64> {
    let slope = |s: f64| dir * spec.grad_w([c + dir * s, 0.0], t)[0];
    let mut inner = 0.0;
    let mut step = 1e-3;
    while inner < REACH {
        let outer = inner + step;
        if slope(outer) <= 0.0 {
            let s = bisect_increasing(|s| -slope(s), inner, outer, 0.0);
            return Some(c + dir * s);
        }
        inner = outer;
        step *= 2.0;
    }
    None
}

/// The open interval of levels whose sublevel set is a bounded interval
/// around the minimum, and the two rays it lives on.
struct Well<'a> {
    spec: &'a FieldSpec,
    t: f64,
    c: f64,
    left: Option<f64>,
    right: Option<f64>,
    cap: f64,
}

impl<'a> Well<'a> {
    fn new(spec: &'a FieldSpec, t: f64) -> Result<Self> {
        let c = center(spec, t)?;
        let left = monotone_extent(spec, c, -1.0, t);
        let right = monotone_extent(spec, c, 1.0, t);
        let cap = [left, right].iter().flatten().map(|&x| spec.w([x, 0.0], t)).fold(f64::INFINITY, f64::min);
        Ok(Well { spec, t, c, left, right, cap })
    }

    fn root(&self, u: f64, dir: f64, extent: Option<f64>) -> Result<f64> {
        let g = |x: f64| self.spec.w([x, 0.0], self.t);
        match extent {
            Some(end) => {
                let s = bisect_increasing(|s| g(self.c + dir * s) - u, 0.0, (end - self.c).abs(), 0.0);
                Ok(self.c + dir * s)
            }
            None => ray_root(g, self.c, dir, u, REACH),
        }
    }

    fn endpoints(&self, u: f64) -> Result<(f64, f64)> {
        if u >= self.cap {
            return Err(Error::InsufficientCapacity { requested: f64::NAN, available: f64::NAN });
        }
        Ok((self.root(u, -1.0, self.left)?, self.root(u, 1.0, self.right)?))
    }

    fn mass_below(&self, u: f64) -> Result<f64> {
        let (a, b) = self.endpoints(u)?;
        quad(|x| n_at(self.spec, x, self.t), a, b)
    }

    /// Mass below the last level whose sublevel set is still an interval.
    fn capacity(&self) -> Result<f64> {
        let a = self.root(self.cap, -1.0, self.left)?;
        let b = self.root(self.cap, 1.0, self.right)?;
        quad(|x| n_at(self.spec, x, self.t), a, b)
    }
}

/// Solves `W(a) = W(b)`, `int_a^b 1/tau = N` by nested root finding: the
/// outer search is over the level `u`, `a` and `b` are the roots of `W = u`
/// on either side of the minimum, and the inner quantity is the mass.
pub fn solve_domain_1d(spec: &FieldSpec, n_total: f64, t: f64) -> Result<Interval1D> {
    if !(n_total > 0.0 && n_total.is_finite()) {
        return Err(Error::InvalidField(format!("total mass must be positive, got {n_total}")));
    }
    let well = Well::new(spec, t)?;
    let w0 = spec.w([well.c, 0.0], t);
    if well.cap.is_finite() {
        let available = well.capacity()?;
        if n_total >= available {
            return Err(Error::InsufficientCapacity { requested: n_total, available });
        }
    }
    let mut lo = w0;
    let mut hi = (w0 + 1e-3).min(0.5 * (w0 + well.cap));
    while well.mass_below(hi)? < n_total {
        lo = hi;
        hi = (w0 + 2.0 * (hi - w0)).min(0.5 * (hi + well.cap));
    }
    let failure = RefCell::new(None);
    let u = illinois(
        |u| {
            well.mass_below(u).unwrap_or_else(|e| {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }) - n_total
        },
        lo,
        hi,
        1e-15 * hi.abs().max(1e-300),
        1e-13 * n_total,
        200,
    )
    .ok_or_else(|| Error::InvalidField("mass is not monotone in the level".into()))?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let (a, b) = well.endpoints(u)?;
    Ok(Interval1D { a, b, t, n_total, level: u })
}

/// `(a', b')` from differentiating both interval conditions in time.
pub fn endpoint_speed_1d(spec: &FieldSpec, n_total: f64, t: f64) -> Result<(f64, f64)> {
    let iv = solve_domain_1d(spec, n_total, t)?;
    endpoint_speed_on(spec, &iv)
}

pub(crate) fn endpoint_speed_on(spec: &FieldSpec, iv: &Interval1D) -> Result<(f64, f64)> {
    let (a, b, t) = (iv.a, iv.b, iv.t);
    let (na, nb) = (n_at(spec, a, t)?, n_at(spec, b, t)?);
    let wxa = spec.grad_w([a, 0.0], t)[0];
    let wxb = spec.grad_w([b, 0.0], t)[0];
    let dwt = spec.potential_time_derivative([b, 0.0], t) - spec.potential_time_derivative([a, 0.0], t);
    let growth = quad(|x| dn_dt(spec, x, t), a, b)?;
    let denominator = nb * wxa - na * wxb;
    let scale = (nb * wxa.abs()).max(na * wxb.abs());
    if !(denominator.abs() > 1e-12 * scale.max(1e-300)) {
        return Err(Error::DegenerateEndpoint { denominator });
    }
    let a_prime = (nb * dwt - wxb * growth) / denominator;
    let b_prime = (na * dwt - wxa * growth) / denominator;
    Ok((a_prime, b_prime))
}

/// `v(x) = (n(a) a' - int_a^x d_t n) / n(x)`.
pub fn velocity_1d(spec: &FieldSpec, n_total: f64, x: f64, t: f64) -> Result<f64> {
    let iv = solve_domain_1d(spec, n_total, t)?;
    let (a_prime, _) = endpoint_speed_on(spec, &iv)?;
    velocity_on(spec, &iv, a_prime, x)
}

pub(crate) fn velocity_on(spec: &FieldSpec, iv: &Interval1D, a_prime: f64, x: f64) -> Result<f64> {
    if !iv.contains(x) {
        return Err(Error::OutOfDomain { x, a: iv.a, b: iv.b });
    }
    let flux = n_at(spec, iv.a, iv.t)? * a_prime - quad(|y| dn_dt(spec, y, iv.t), iv.a, x)?;
    Ok(flux / n_at(spec, x, iv.t)?)
}

/// Everything the pipeline knows about one time of a 1-D run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneDProfile {
    pub interval: Interval1D,
    pub a_prime: f64,
    pub b_prime: f64,
    /// `(x, v(x))` at equally spaced points from `a` to `b`.
    pub samples: Vec<(f64, f64)>,
}

impl OneDProfile {
    pub fn compute(spec: &FieldSpec, n_total: f64, t: f64, samples: usize) -> Result<Self> {
        let interval = solve_domain_1d(spec, n_total, t)?;
        let (a_prime, b_prime) = endpoint_speed_on(spec, &interval)?;
        let m = samples.max(2);
        let samples = (0..m)
            .map(|k| {
                let x = if k + 1 == m {
                    interval.b
                } else {
                    interval.a + (interval.b - interval.a) * k as f64 / (m - 1) as f64
                };
                velocity_on(spec, &interval, a_prime, x).map(|v| (x, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OneDProfile { interval, a_prime, b_prime, samples })
    }

    /// `|v(a) - a'|` and `|v(b) - b'|`.
    pub fn endpoint_mismatch(&self) -> (f64, f64) {
        let first = self.samples.first().map_or(f64::NAN, |s| s.1);
        let last = self.samples.last().map_or(f64::NAN, |s| s.1);
        ((first - self.a_prime).abs(), (last - self.b_prime).abs())
    }

    /// `b' n(b) - a' n(a) + int_a^b d_t n`, zero when the mass is conserved.
    pub fn mass_rate(&self, spec: &FieldSpec) -> Result<f64> {
        let iv = &self.interval;
        Ok(self.b_prime * n_at(spec, iv.b, iv.t)? - self.a_prime * n_at(spec, iv.a, iv.t)?
            + quad(|x| dn_dt(spec, x, iv.t), iv.a, iv.b)?)
    }

    /// Pointwise `d_t n + d_x(n v)` at `points` interior abscissae, with the
    /// flux differentiated by a fourth-order stencil.
    pub fn continuity_residuals(&self, spec: &FieldSpec, points: usize) -> Result<Vec<(f64, f64)>> {
        let iv = &self.interval;
        let len = iv.b - iv.a;
        let h = 1e-2 * len;
        let flux = |x: f64| -> Result<f64> { Ok(n_at(spec, x, iv.t)? * velocity_on(spec, iv, self.a_prime, x)?) };
        (0..points)
            .map(|k| {
                let x = iv.a + 2.0 * h + (len - 4.0 * h) * (k as f64 + 0.5) / points as f64;
                let d = (-flux(x + 2.0 * h)? + 8.0 * flux(x + h)? - 8.0 * flux(x - h)? + flux(x - 2.0 * h)?) / (12.0 * h);
                Ok((x, dn_dt(spec, x, iv.t)? + d))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Potential, Volume};

    fn quadratic(volume: Volume) -> FieldSpec {
        FieldSpec::line(Potential::Harmonic, volume).unwrap()
    }

    fn cubic(volume: Volume) -> FieldSpec {
        FieldSpec::line(Potential::Polynomial(vec![0.0, 0.0, 0.5, 0.1]), volume).unwrap()
    }

    #[test]
    fn symmetric_interval() {
        let iv = solve_domain_1d(&quadratic(Volume::Constant(1.0)), 2.0, 0.0).unwrap();
        assert!((iv.a + 1.0).abs() < 1e-10 && (iv.b - 1.0).abs() < 1e-10, "{iv:?}");
        assert!((iv.level - 0.5).abs() < 1e-10);
    }

    #[test]
    fn vanishing_mass_shrinks_interval() {
        let iv = solve_domain_1d(&quadratic(Volume::Constant(1.0)), 1e-8, 0.0).unwrap();
        assert!(iv.a.abs() < 1e-7 && iv.b.abs() < 1e-7);
    }

    #[test]
    fn asymmetric_conditions_hold() {
        let spec = cubic(Volume::Constant(1.0));
        let iv = solve_domain_1d(&spec, 1.0, 0.0).unwrap();
        let w = |x: f64| 0.5 * x * x + 0.1 * x * x * x;
        assert!((w(iv.a) - w(iv.b)).abs() < 1e-8);
        assert!((iv.b - iv.a - 1.0).abs() < 1e-8);
        assert!(iv.b < -iv.a);
    }

    #[test]
    fn cubic_capacity_is_finite() {
        let err = solve_domain_1d(&cubic(Volume::Constant(1.0)), 50.0, 0.0).unwrap_err();
        match err {
            Error::InsufficientCapacity { available, .. } => {
                // W = 50/27 touches the local maximum at -10/3 and crosses at 5/3.
                assert!((available - 5.0).abs() < 1e-8, "{available}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn planar_field_rejected() {
        let spec = FieldSpec::planar(Potential::Harmonic, Volume::Constant(1.0)).unwrap();
        assert!(solve_domain_1d(&spec, 1.0, 0.0).is_err());
    }

    #[test]
    fn linear_growth_speeds() {
        let spec = quadratic(Volume::LinearTime(1.0));
        let (ap, bp) = endpoint_speed_1d(&spec, 2.0, 0.0).unwrap();
        assert!((ap + 1.0).abs() < 1e-9 && (bp - 1.0).abs() < 1e-9, "{ap} {bp}");
        assert!((velocity_1d(&spec, 2.0, 0.5, 0.0).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn static_field_is_at_rest() {
        let spec = cubic(Volume::Constant(0.7));
        let profile = OneDProfile::compute(&spec, 1.0, 0.3, 21).unwrap();
        assert!(profile.a_prime.abs() < 1e-12 && profile.b_prime.abs() < 1e-12);
        assert!(profile.samples.iter().all(|s| s.1.abs() < 1e-12));
    }

    #[test]
    fn drifting_well_translates() {
        let spec = FieldSpec::line(Potential::DriftingHarmonic { speed: 0.3 }, Volume::Constant(1.0)).unwrap();
        let profile = OneDProfile::compute(&spec, 1.5, 2.0, 11).unwrap();
        assert!((profile.interval.a - (0.6 - 0.75)).abs() < 1e-9);
        for &(_, v) in &profile.samples {
            assert!((v - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn speeds_match_differenced_endpoints() {
        let spec = cubic(Volume::LinearTime(0.8));
        let (t, dt) = (0.4, 1e-4);
        let (ap, bp) = endpoint_speed_1d(&spec, 1.0, t).unwrap();
        let before = solve_domain_1d(&spec, 1.0, t - dt).unwrap();
        let after = solve_domain_1d(&spec, 1.0, t + dt).unwrap();
        assert!((ap - (after.a - before.a) / (2.0 * dt)).abs() < 1e-6);
        assert!((bp - (after.b - before.b) / (2.0 * dt)).abs() < 1e-6);
    }

    #[test]
    fn asymmetric_profile_identities() {
        let spec = cubic(Volume::LinearTime(0.8));
        let profile = OneDProfile::compute(&spec, 1.0, 0.4, 101).unwrap();
        let (ea, eb) = profile.endpoint_mismatch();
        assert!(ea < 1e-8 && eb < 1e-8, "{ea} {eb}");
        assert!(profile.mass_rate(&spec).unwrap().abs() < 1e-8);
        let worst = profile.continuity_residuals(&spec, 100).unwrap().iter().fold(0.0f64, |m, r| m.max(r.1.abs()));
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn outside_point_rejected() {
        let spec = quadratic(Volume::LinearTime(1.0));
        assert!(matches!(velocity_1d(&spec, 2.0, 1.5, 0.0), Err(Error::OutOfDomain { .. })));
    }
}
