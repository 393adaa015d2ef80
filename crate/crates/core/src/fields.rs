//! Model inputs: the confining potential `V`, the average particle volume
//! `tau`, and the effective potential `W(x, t) = V(x, t, tau(x, t))`.
//!
//! Every family is closed-form with hand-coded space and time derivatives.
//! None of the shipped potentials couples to `tau`, so `W = V` pointwise and
//! `W` stays well defined where `tau` degenerates (the origin of the
//! `radial_time` volume law, for instance).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{norm, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    FullPlane,
    /// Periodic in `x1` on `(-1, 1]`, unbounded in `x2`.
    TorusStrip,
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full-plane" => Ok(Topology::FullPlane),
            "torus-strip" => Ok(Topology::TorusStrip),
            other => Err(Error::Config(format!("invalid topology: {other}"))),
        }
    }
}

/// Confining potential families.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    /// `|x|^2 / 2`
    Harmonic,
    /// `(a x1^2 + b x2^2) / 2`
    AnisoQuadratic { a: f64, b: f64 },
    /// `x2^2 / 2`
    SeparableX2,
    /// `sum_k c_k x1^k + x2^2 / 2`, with `c_1 = 0` and `c_2 > 0` so that the
    /// origin is a local minimum.
    Polynomial(Vec<f64>),
    /// `((x1 - c t)^2 + x2^2) / 2`, a well translating at constant speed.
    DriftingHarmonic { speed: f64 },
}

impl Potential {
    fn value(&self, x: Point, t: f64) -> f64 {
        match self {
            Potential::Harmonic => 0.5 * (x[0] * x[0] + x[1] * x[1]),
            Potential::AnisoQuadratic { a, b } => 0.5 * (a * x[0] * x[0] + b * x[1] * x[1]),
            Potential::SeparableX2 => 0.5 * x[1] * x[1],
            Potential::Polynomial(c) => horner(c, x[0]) + 0.5 * x[1] * x[1],
            Potential::DriftingHarmonic { speed } => {
                let y = x[0] - speed * t;
                0.5 * (y * y + x[1] * x[1])
            }
        }
    }

    fn gradient(&self, x: Point, t: f64) -> Point {
        match self {
            Potential::Harmonic => x,
            Potential::AnisoQuadratic { a, b } => [a * x[0], b * x[1]],
            Potential::SeparableX2 => [0.0, x[1]],
            Potential::Polynomial(c) => [horner_derivative(c, x[0]), x[1]],
            Potential::DriftingHarmonic { speed } => [x[0] - speed * t, x[1]],
        }
    }

    fn time_derivative(&self, x: Point, t: f64) -> f64 {
        match self {
            Potential::DriftingHarmonic { speed } => -speed * (x[0] - speed * t),
            _ => 0.0,
        }
    }

    fn critical_point(&self, t: f64) -> Option<Point> {
        match self {
            Potential::SeparableX2 => None,
            Potential::DriftingHarmonic { speed } => Some([speed * t, 0.0]),
            _ => Some([0.0, 0.0]),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Potential::AnisoQuadratic { a, b } if !(*a > 0.0 && *b > 0.0) => {
                Err(Error::InvalidField(format!("aniso_quadratic needs positive coefficients, got ({a}, {b})")))
            }
            Potential::Polynomial(c) => {
                let c1 = c.get(1).copied().unwrap_or(0.0);
                let c2 = c.get(2).copied().unwrap_or(0.0);
                let c0 = c.first().copied().unwrap_or(0.0);
                if c1 != 0.0 || c2 <= 0.0 || c0 < 0.0 {
                    Err(Error::InvalidField(
                        "polynomial needs c0 >= 0, c1 = 0 and c2 > 0 (minimum at the origin)".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            Potential::DriftingHarmonic { speed } if !speed.is_finite() => {
                Err(Error::InvalidField("drifting_harmonic speed must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck)
}

fn horner_derivative(c: &[f64], x: f64) -> f64 {
    c.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, &ck)| acc * x + k as f64 * ck)
}

/// Average particle volume families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Volume {
    Constant(f64),
    /// `tau0 (1 + t)`
    LinearTime(f64),
    /// `|x| t`
    RadialTime,
    /// `tau0 (1 + eps x1 / |x|)`
    Angular { tau0: f64, eps: f64 },
}

impl Volume {
    fn value(&self, x: Point, t: f64) -> Result<f64> {
        let tau = match *self {
            Volume::Constant(tau0) => tau0,
            Volume::LinearTime(tau0) => tau0 * (1.0 + t),
            Volume::RadialTime => {
                let r = norm(x);
                if r == 0.0 {
                    return Err(Error::SingularVolume { x1: x[0], x2: x[1] });
                }
                r * t
            }
            Volume::Angular { tau0, eps } => {
                let r = norm(x);
                if r == 0.0 {
                    return Err(Error::SingularVolume { x1: x[0], x2: x[1] });
                }
                tau0 * (1.0 + eps * x[0] / r)
            }
        };
        if tau > 0.0 && tau.is_finite() {
            Ok(tau)
        } else {
            Err(Error::InvalidField(format!("tau = {tau} at ({}, {}), t = {t}", x[0], x[1])))
        }
    }

    fn gradient(&self, x: Point, t: f64) -> Point {
        match *self {
            Volume::Constant(_) | Volume::LinearTime(_) => [0.0, 0.0],
            Volume::RadialTime => {
                let r = norm(x);
                [t * x[0] / r, t * x[1] / r]
            }
            Volume::Angular { tau0, eps } => {
                let r = norm(x);
                let r3 = r * r * r;
                [tau0 * eps * x[1] * x[1] / r3, -tau0 * eps * x[0] * x[1] / r3]
            }
        }
    }

    fn time_derivative(&self, x: Point, _t: f64) -> f64 {
        match *self {
            Volume::Constant(_) | Volume::Angular { .. } => 0.0,
            Volume::LinearTime(tau0) => tau0,
            Volume::RadialTime => norm(x),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Volume::Constant(tau0) | Volume::LinearTime(tau0) if !(tau0 > 0.0 && tau0.is_finite()) => {
                Err(Error::InvalidField(format!("tau0 must be positive, got {tau0}")))
            }
            Volume::Angular { tau0, eps } if !(tau0 > 0.0 && eps.abs() < 1.0) => {
                Err(Error::InvalidField(format!("angular volume needs tau0 > 0 and |eps| < 1, got ({tau0}, {eps})")))
            }
            _ => Ok(()),
        }
    }

    fn is_radial(&self) -> bool {
        matches!(self, Volume::Constant(_) | Volume::LinearTime(_) | Volume::RadialTime)
    }

    fn is_static(&self) -> bool {
        matches!(self, Volume::Constant(_) | Volume::Angular { .. })
    }
}

/// Value of `grad W` together with a flag raised at the declared critical point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSample {
    pub value: Point,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub potential: Potential,
    pub volume: Volume,
    pub dimension: usize,
    pub topology: Topology,
}

impl FieldSpec {
    pub fn new(potential: Potential, volume: Volume, dimension: usize, topology: Topology) -> Result<Self> {
        potential.validate()?;
        volume.validate()?;
        if !(dimension == 1 || dimension == 2) {
            return Err(Error::InvalidField(format!("dimension must be 1 or 2, got {dimension}")));
        }
        if dimension == 1 {
            if topology != Topology::FullPlane {
                return Err(Error::InvalidField("the torus strip needs dimension 2".into()));
            }
            if matches!(potential, Potential::SeparableX2) {
                return Err(Error::InvalidField("separable_x2 needs dimension 2".into()));
            }
            if !matches!(volume, Volume::Constant(_) | Volume::LinearTime(_)) {
                // 1/|x| is not integrable on a line and x1/|x| is a sign jump.
                return Err(Error::InvalidField("one-dimensional runs support constant and linear_time volumes".into()));
            }
        }
        Ok(FieldSpec { potential, volume, dimension, topology })
    }

    /// Convenience constructor for the full plane.
    pub fn planar(potential: Potential, volume: Volume) -> Result<Self> {
        Self::new(potential, volume, 2, Topology::FullPlane)
    }

    pub fn line(potential: Potential, volume: Volume) -> Result<Self> {
        Self::new(potential, volume, 1, Topology::FullPlane)
    }

    /// Canonical representative of `x`: `x1` wrapped into `(-1, 1]` on the
    /// torus strip, `x2` zeroed in one dimension.
    pub fn wrap(&self, x: Point) -> Point {
        let mut y = x;
        if self.dimension == 1 {
            y[1] = 0.0;
        }
        if self.topology == Topology::TorusStrip {
            y[0] = x[0] - 2.0 * ((x[0] - 1.0) / 2.0).ceil();
        }
        y
    }

    /// `W(x, t)`. Fails when `x` is not finite or `W` would be negative.
    pub fn effective_potential(&self, x: Point, t: f64) -> Result<f64> {
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(Error::InvalidField(format!("non-finite point ({}, {})", x[0], x[1])));
        }
        let w = self.w(x, t);
        if w >= 0.0 && w.is_finite() {
            Ok(w)
        } else {
            Err(Error::InvalidField(format!("W = {w} at ({}, {})", x[0], x[1])))
        }
    }

    #[inline]
    pub(crate) fn w(&self, x: Point, t: f64) -> f64 {
        self.potential.value(self.wrap(x), t)
    }

    #[inline]
    pub(crate) fn grad_w(&self, x: Point, t: f64) -> Point {
        let g = self.potential.gradient(self.wrap(x), t);
        if self.dimension == 1 {
            [g[0], 0.0]
        } else {
            g
        }
    }

    /// `dW/dt` at fixed `x`.
    pub fn potential_time_derivative(&self, x: Point, t: f64) -> f64 {
        self.potential.time_derivative(self.wrap(x), t)
    }

    pub fn grad_effective_potential(&self, x: Point, t: f64) -> GradientSample {
        let at_critical = self
            .critical_point(t)
            .map(|c| norm([self.wrap(x)[0] - c[0], self.wrap(x)[1] - c[1]]) <= 1e-14)
            .unwrap_or(false);
        let g = self.grad_w(x, t);
        if at_critical || (g[0] == 0.0 && g[1] == 0.0) {
            GradientSample { value: [0.0, 0.0], degenerate: true }
        } else {
            GradientSample { value: g, degenerate: false }
        }
    }

    pub fn volume_at(&self, x: Point, t: f64) -> Result<f64> {
        self.volume.value(self.wrap(x), t)
    }

    /// `1 / tau(x, t)`.
    pub fn inverse_volume(&self, x: Point, t: f64) -> Result<f64> {
        Ok(1.0 / self.volume_at(x, t)?)
    }

    /// `d(1/tau)/dt = -tau_t / tau^2`.
    pub fn inverse_volume_time_derivative(&self, x: Point, t: f64) -> Result<f64> {
        let y = self.wrap(x);
        let tau = self.volume.value(y, t)?;
        Ok(-self.volume.time_derivative(y, t) / (tau * tau))
    }

    /// `grad(1/tau) = -grad(tau) / tau^2`.
    pub fn inverse_volume_gradient(&self, x: Point, t: f64) -> Result<Point> {
        let y = self.wrap(x);
        let tau = self.volume.value(y, t)?;
        let g = self.volume.gradient(y, t);
        let c = -1.0 / (tau * tau);
        Ok(if self.dimension == 1 { [c * g[0], 0.0] } else { [c * g[0], c * g[1]] })
    }

    /// The declared unique minimiser of `W(., t)`. `None` for the separable
    /// potential, whose minimum is the line `x2 = 0`.
    pub fn critical_point(&self, t: f64) -> Option<Point> {
        self.potential.critical_point(t)
    }

    /// Rotational symmetry about the origin for both `V` and `tau`.
    pub fn is_radially_symmetric(&self) -> bool {
        self.topology == Topology::FullPlane && matches!(self.potential, Potential::Harmonic) && self.volume.is_radial()
    }

    /// True when neither `V` nor `tau` depends on time.
    pub fn is_static(&self) -> bool {
        self.volume.is_static() && !matches!(self.potential, Potential::DriftingHarmonic { .. })
    }

    /// Sampled check of the standing assumptions on the box `[lo, hi]`.
    pub fn sample_invariants(&self, t: f64, lo: Point, hi: Point, samples: usize, seed: u64) -> FieldInvariantReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = FieldInvariantReport::default();
        let crit = self.critical_point(t);
        let two_d = self.dimension == 2;
        for _ in 0..samples {
            let x = [rng.gen_range(lo[0]..hi[0]), if two_d { rng.gen_range(lo[1]..hi[1]) } else { 0.0 }];
            let w = self.w(x, t);
            report.min_potential = report.min_potential.min(w);
            if w < 0.0 {
                report.negative_potential += 1;
            }
            match self.volume_at(x, t) {
                Ok(_) => {}
                Err(Error::SingularVolume { .. }) => {}
                Err(_) => report.invalid_volume += 1,
            }
            if let Some(c) = crit {
                let y = self.wrap(x);
                let d = norm([y[0] - c[0], y[1] - c[1]]);
                if d > 1e-3 * (hi[0] - lo[0]) && norm(self.grad_w(x, t)) == 0.0 {
                    report.spurious_critical_points += 1;
                }
            }
        }
        if self.topology == Topology::FullPlane {
            let centre = crit.unwrap_or([0.0, 0.0]);
            let rays = if two_d { 16 } else { 2 };
            for k in 0..rays {
                let angle = if two_d { std::f64::consts::TAU * k as f64 / rays as f64 } else { std::f64::consts::PI * k as f64 };
                let dir = [angle.cos(), if two_d { angle.sin() } else { 0.0 }];
                let at = |r: f64| self.w([centre[0] + r * dir[0], centre[1] + r * dir[1]], t);
                let grows = at(10.0) > at(1.0) && at(100.0) > at(10.0);
                if !grows {
                    report.non_coercive_rays += 1;
                }
            }
        }
        report
    }
}

/// Outcome of [`FieldSpec::sample_invariants`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldInvariantReport {
    pub min_potential: f64,
    pub negative_potential: usize,
    pub invalid_volume: usize,
    pub spurious_critical_points: usize,
    pub non_coercive_rays: usize,
}

impl Default for FieldInvariantReport {
    fn default() -> Self {
        FieldInvariantReport {
            min_potential: f64::INFINITY,
            negative_potential: 0,
            invalid_volume: 0,
            spurious_critical_points: 0,
            non_coercive_rays: 0,
        }
    }
}

impl FieldInvariantReport {
    pub fn passed(&self) -> bool {
        self.negative_potential == 0
            && self.invalid_volume == 0
            && self.spurious_critical_points == 0
            && self.non_coercive_rays == 0
    }
}

/// Splits `name(a, b, ...)` into the name and its numeric arguments.
fn parse_family(s: &str) -> Result<(String, Vec<f64>)> {
    let s = s.trim();
    let Some(open) = s.find('(') else {
        return Ok((s.to_string(), Vec::new()));
    };
    if !s.ends_with(')') {
        return Err(Error::Config(format!("invalid family id: {s}")));
    }
    let name = s[..open].trim().to_string();
    let inner = &s[open + 1..s.len() - 1];
    let args = inner
        .split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| a.parse::<f64>().map_err(|_| Error::Config(format!("invalid family id: {s}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((name, args))
}

impl FromStr for Potential {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = parse_family(s)?;
        let bad = || Error::Config(format!("invalid family id: {s}"));
        let p = match (name.as_str(), args.as_slice()) {
            ("harmonic", []) => Potential::Harmonic,
            ("aniso_quadratic", [a, b]) => Potential::AnisoQuadratic { a: *a, b: *b },
            ("separable_x2", []) => Potential::SeparableX2,
            ("polynomial", c) if !c.is_empty() => Potential::Polynomial(c.to_vec()),
            ("drifting_harmonic", [c]) => Potential::DriftingHarmonic { speed: *c },
            _ => return Err(bad()),
        };
        p.validate().map_err(|e| Error::Config(format!("invalid family id: {s} ({e})")))?;
        Ok(p)
    }
}

impl FromStr for Volume {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = parse_family(s)?;
        let v = match (name.as_str(), args.as_slice()) {
            ("constant", [tau0]) => Volume::Constant(*tau0),
            ("linear_time", [tau0]) => Volume::LinearTime(*tau0),
            ("radial_time", []) => Volume::RadialTime,
            ("angular", [tau0, eps]) => Volume::Angular { tau0: *tau0, eps: *eps },
            _ => return Err(Error::Config(format!("invalid family id: {s}"))),
        };
        v.validate().map_err(|e| Error::Config(format!("invalid family id: {s} ({e})")))?;
        Ok(v)
    }
}

impl fmt::Display for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Harmonic => write!(f, "harmonic"),
            Potential::AnisoQuadratic { a, b } => write!(f, "aniso_quadratic({a},{b})"),
            Potential::SeparableX2 => write!(f, "separable_x2"),
            Potential::Polynomial(c) => {
                let parts: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                write!(f, "polynomial({})", parts.join(","))
            }
            Potential::DriftingHarmonic { speed } => write!(f, "drifting_harmonic({speed})"),
        }
    }
}

impl fmt::Display for Volume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Volume::Constant(t) => write!(f, "constant({t})"),
            Volume::LinearTime(t) => write!(f, "linear_time({t})"),
            Volume::RadialTime => write!(f, "radial_time"),
            Volume::Angular { tau0, eps } => write!(f, "angular({tau0},{eps})"),
        }
    }
}
