//! Level-set kinematics: the normal speed of the level curves, the source of
//! the tangential problem, and particle transport.
//!
//! The medium passes through frozen-time equilibria, so `pi(x, t)` is a
//! family of solved states. Its level sets move with the normal speed
//! `w_perp = -d_t pi / |grad pi|`, computed by centered differencing between
//! equilibria solved at `t +- dt_probe`. The remaining part of continuity,
//! `div(v_par / tau) = f` with `f = -d_t(1/tau) - div(w_perp nu / tau)`, is
//! handed to the tangential solver curve by curve.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::equilibrium::{EquilibriumOptions, EquilibriumState, GridSpec};
use crate::error::{Error, Result};
use crate::fields::FieldSpec;
use crate::geom::{add, norm, perp, scale, Point};
use crate::levelset::{extract_level_curves, unit_normal, LevelCurve};
use crate::tangential::{solve_theta_on_curve, tangential_velocity};

/// Solved equilibria of one field, cached by time, plus the probe step.
pub struct KinematicsContext {
    spec: FieldSpec,
    n_total: f64,
    grid: GridSpec,
    options: EquilibriumOptions,
    dt_probe: f64,
    cache: Mutex<BTreeMap<u64, Arc<EquilibriumState>>>,
}

impl KinematicsContext {
    pub fn new(spec: FieldSpec, n_total: f64, grid: GridSpec, options: EquilibriumOptions, dt_probe: f64) -> Self {
        KinematicsContext { spec, n_total, grid, options, dt_probe, cache: Mutex::new(BTreeMap::new()) }
    }

    /// Context sharing the field, mass, grid and options of `state`.
    pub fn from_state(state: &EquilibriumState, dt_probe: f64) -> Self {
        let ctx = Self::new(state.spec().clone(), state.total_mass(), *state.grid(), *state.options(), dt_probe);
        ctx.cache.lock().unwrap().insert(state.time().to_bits(), Arc::new(state.clone()));
        ctx
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn total_mass(&self) -> f64 {
        self.n_total
    }

    pub fn dt_probe(&self) -> f64 {
        self.dt_probe
    }

    /// Equilibrium at time `t`, solved once and shared.
    pub fn state(&self, t: f64) -> Result<Arc<EquilibriumState>> {
        let key = t.to_bits();
        if let Some(s) = self.cache.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let solved = Arc::new(EquilibriumState::solve(&self.spec, self.n_total, t, &self.grid, &self.options)?);
        Ok(self.cache.lock().unwrap().entry(key).or_insert(solved).clone())
    }

    /// Drops cached states older than `t`.
    pub fn forget_before(&self, t: f64) {
        self.cache.lock().unwrap().retain(|_, s| s.time() >= t);
    }

    fn probes(&self, t: f64) -> Result<[Arc<EquilibriumState>; 3]> {
        Ok([self.state(t - self.dt_probe)?, self.state(t)?, self.state(t + self.dt_probe)?])
    }

    /// `d_t pi` at `x` by centered differences of the probe equilibria.
    pub fn pi_time_derivative(&self, x: Point, t: f64) -> Result<f64> {
        let [before, _, after] = self.probes(t)?;
        Ok((after.compute_pi(x)? - before.compute_pi(x)?) / (2.0 * self.dt_probe))
    }

    /// `w_perp = -d_t pi / |grad pi|`.
    pub fn normal_speed(&self, x: Point, t: f64) -> Result<f64> {
        let [before, now, after] = self.probes(t)?;
        normal_speed_from(&before, &now, &after, x, self.dt_probe)
    }

    /// `f = -d_t(1/tau) - div(w_perp nu / tau)` at each vertex of `curve`.
    pub fn tangential_source(&self, curve: &LevelCurve) -> Result<SourceSamples> {
        let probes = self.probes(curve.t)?;
        let results: Vec<Result<(f64, bool)>> =
            curve.vertices.par_iter().map(|&x| source_at(&probes, x, self.dt_probe)).collect();
        let mut f = Vec::with_capacity(curve.len());
        let mut one_sided = Vec::with_capacity(curve.len());
        for r in results {
            let (v, flag) = r?;
            f.push(v);
            one_sided.push(flag);
        }
        Ok(SourceSamples { f, one_sided })
    }

    /// `d_t n + div(n w_perp nu)` at `x`: the continuity residual of the
    /// purely normal velocity, flagged when its stencil went one-sided.
    pub fn normal_flow_residual(&self, x: Point, t: f64) -> Result<(f64, bool)> {
        let probes = self.probes(t)?;
        source_at(&probes, x, self.dt_probe).map(|(f, flag)| (-f, flag))
    }

    /// Absolute averaged-continuity tolerance on `curve`: `tol_avg N / L`.
    pub fn averaged_tolerance(&self, curve: &LevelCurve, tol_avg: f64) -> f64 {
        tol_avg * self.n_total / curve.length
    }

    /// Full decomposition on one curve: normal speed, source, potential and
    /// tangential velocity.
    pub fn decompose(&self, curve: &LevelCurve, tol_avg: f64) -> Result<VelocityDecomposition> {
        let probes = self.probes(curve.t)?;
        let w_perp = curve
            .vertices
            .iter()
            .map(|&x| normal_speed_from(&probes[0], &probes[1], &probes[2], x, self.dt_probe))
            .collect::<Result<Vec<f64>>>()?;
        let source = self.tangential_source(curve)?;
        let limit = self.averaged_tolerance(curve, tol_avg);
        let avg_residual = check_averaged_continuity(curve, &source.f);
        let solution = solve_theta_on_curve(curve, &source.f, limit)?;
        let v_par = tangential_velocity(curve, &solution.theta);
        let weak_residual = solution.system.weak_residual(&solution.theta);
        let weak_limit = 1e-8 * solution.system.source_norm();
        let coercivity = solution.system.coercivity();
        Ok(VelocityDecomposition {
            curve: curve.clone(),
            w_perp,
            f: source.f,
            one_sided: source.one_sided,
            theta: solution.theta,
            v_par,
            avg_residual,
            avg_limit: limit,
            warning: solution.warning,
            weak_residual,
            weak_limit,
            coercivity,
        })
    }
}

fn normal_speed_from(before: &EquilibriumState, now: &EquilibriumState, after: &EquilibriumState, x: Point, dt: f64) -> Result<f64> {
    let g = norm(now.grad_pi(x)?);
    if !(g >= 1e-12) {
        return Err(Error::DegenerateNormal { x1: x[0], x2: x[1], norm: g });
    }
    let dpi = (after.compute_pi(x)? - before.compute_pi(x)?) / (2.0 * dt);
    Ok(-dpi / g)
}

/// Normal velocity `w_perp nu` at `x`.
fn normal_velocity(probes: &[Arc<EquilibriumState>; 3], x: Point, dt: f64) -> Result<Point> {
    let now = &probes[1];
    let w = normal_speed_from(&probes[0], now, &probes[2], x, dt)?;
    Ok(scale(unit_normal(now, x)?, w))
}

/// `f` at `x`, expanded as `-d_t(1/tau) - grad(1/tau).u - div(u) / tau` with
/// `u = w_perp nu`. Only the smooth `u` is differenced, so singular volume
/// laws keep their analytic derivatives.
fn source_at(probes: &[Arc<EquilibriumState>; 3], x: Point, dt: f64) -> Result<(f64, bool)> {
    let now = &probes[1];
    let n_total = now.total_mass();
    let h = now.grid().spacing();
    let center = normal_velocity(probes, x, dt)?;
    let mut div = 0.0;
    let mut one_sided = false;
    for k in 0..2 {
        let e = if k == 0 { [h[0], 0.0] } else { [0.0, h[1]] };
        let plus = add(x, e);
        let minus = add(x, scale(e, -1.0));
        let inside = |y: Point| now.compute_pi(y).map_or(false, |p| p <= n_total);
        div += if inside(plus) && inside(minus) {
            (normal_velocity(probes, plus, dt)?[k] - normal_velocity(probes, minus, dt)?[k]) / (2.0 * h[k])
        } else if inside(minus) {
            one_sided = true;
            let minus2 = add(x, scale(e, -2.0));
            (3.0 * center[k] - 4.0 * normal_velocity(probes, minus, dt)?[k] + normal_velocity(probes, minus2, dt)?[k])
                / (2.0 * h[k])
        } else {
            one_sided = true;
            let plus2 = add(x, scale(e, 2.0));
            (-3.0 * center[k] + 4.0 * normal_velocity(probes, plus, dt)?[k] - normal_velocity(probes, plus2, dt)?[k])
                / (2.0 * h[k])
        };
    }
    let spec = now.spec();
    let tau_inv = spec.inverse_volume(x, now.time())?;
    let grad = spec.inverse_volume_gradient(x, now.time())?;
    let dtau = spec.inverse_volume_time_derivative(x, now.time())?;
    Ok((-dtau - (grad[0] * center[0] + grad[1] * center[1]) - tau_inv * div, one_sided))
}

/// Source samples with the vertices whose stencil left the medium.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSamples {
    pub f: Vec<f64>,
    pub one_sided: Vec<bool>,
}

impl SourceSamples {
    pub fn one_sided_count(&self) -> usize {
        self.one_sided.iter().filter(|&&b| b).count()
    }
}

/// `|integral f dS / |grad pi||`, the averaged continuity residual of the
/// purely normal velocity.
pub fn check_averaged_continuity(curve: &LevelCurve, f: &[f64]) -> f64 {
    curve.weighted_integral(f).abs()
}

/// Velocity on one level curve split into normal and tangential parts.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityDecomposition {
    pub curve: LevelCurve,
    pub w_perp: Vec<f64>,
    pub f: Vec<f64>,
    pub one_sided: Vec<bool>,
    pub theta: Vec<f64>,
    pub v_par: Vec<f64>,
    pub avg_residual: f64,
    pub avg_limit: f64,
    pub warning: Option<String>,
    pub weak_residual: f64,
    pub weak_limit: f64,
    pub coercivity: f64,
}

impl VelocityDecomposition {
    /// Full velocity `w_perp nu + v_par t` at vertex `i`.
    pub fn velocity(&self, i: usize) -> Point {
        add(scale(self.curve.normal[i], self.w_perp[i]), scale(self.curve.tangent(i), self.v_par[i]))
    }

    pub fn theta_max(&self) -> f64 {
        self.theta.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn v_par_max(&self) -> f64 {
        self.v_par.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Tangential velocity at one time, solved on a fixed set of levels.
#[derive(Debug, Clone)]
pub struct TangentialField {
    pub t: f64,
    layers: Vec<(f64, Vec<(LevelCurve, Vec<f64>)>)>,
}

impl TangentialField {
    pub fn solve(ctx: &KinematicsContext, t: f64, levels: &[f64], tol_avg: f64) -> Result<Self> {
        let state = ctx.state(t)?;
        let mut layers = Vec::with_capacity(levels.len());
        for &p in levels {
            let curves = extract_level_curves(&state, p)?;
            let mut solved = Vec::with_capacity(curves.len());
            for curve in curves {
                let d = ctx.decompose(&curve, tol_avg)?;
                solved.push((d.curve, d.v_par));
            }
            layers.push((p, solved));
        }
        layers.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(TangentialField { t, layers })
    }

    /// A field with no tangential part.
    pub fn zero(t: f64) -> Self {
        TangentialField { t, layers: Vec::new() }
    }

    fn layer_value(layer: &[(LevelCurve, Vec<f64>)], x: Point) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (curve, v) in layer {
            let (seg, s, dist) = curve.nearest(x);
            if dist < best.0 {
                best = (dist, curve.interpolate(v, seg, s));
            }
        }
        best.1
    }

    /// `v_par` at `x` on level `p`: linear in `p` between the bracketing
    /// solved levels, tapering to zero at `p = 0`, constant above the top.
    pub fn v_par(&self, x: Point, p: f64) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        let k = self.layers.partition_point(|(q, _)| *q <= p);
        if k == 0 {
            let (p0, ref layer) = self.layers[0];
            return (p / p0).max(0.0) * Self::layer_value(layer, x);
        }
        if k == self.layers.len() {
            return Self::layer_value(&self.layers[k - 1].1, x);
        }
        let (p0, ref lo) = self.layers[k - 1];
        let (p1, ref hi) = self.layers[k];
        let s = (p - p0) / (p1 - p0);
        (1.0 - s) * Self::layer_value(lo, x) + s * Self::layer_value(hi, x)
    }
}

/// One traced particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Samples `(t, x, pi(x, t))`.
    pub samples: Vec<(f64, Point, f64)>,
    /// Set when the particle reached the medium boundary and was stopped.
    pub clamped: bool,
}

/// Velocity field `v = w_perp nu + v_par t` of a context, with tangential
/// fields solved lazily per time.
pub struct Flow<'a> {
    ctx: &'a KinematicsContext,
    levels: Vec<f64>,
    tol_avg: f64,
    /// Relative overshoot of `pi` above `N` tolerated before aborting.
    pub escape_band: f64,
    fields: Mutex<BTreeMap<u64, Arc<TangentialField>>>,
}

impl<'a> Flow<'a> {
    /// `levels` are the curves carrying the tangential solve; an empty list
    /// gives the purely normal flow.
    pub fn new(ctx: &'a KinematicsContext, levels: Vec<f64>, tol_avg: f64) -> Self {
        Flow { ctx, levels, tol_avg, escape_band: 1e-2, fields: Mutex::new(BTreeMap::new()) }
    }

    fn field(&self, t: f64) -> Result<Arc<TangentialField>> {
        let key = t.to_bits();
        if let Some(f) = self.fields.lock().unwrap().get(&key) {
            return Ok(f.clone());
        }
        let field = if self.levels.is_empty() {
            TangentialField::zero(t)
        } else {
            TangentialField::solve(self.ctx, t, &self.levels, self.tol_avg)?
        };
        Ok(self.fields.lock().unwrap().entry(key).or_insert(Arc::new(field)).clone())
    }

    /// Drops tangential fields older than `t`.
    pub fn forget_before(&self, t: f64) {
        self.fields.lock().unwrap().retain(|_, f| f.t >= t);
    }

    fn check_inside(&self, pi: f64, t: f64) -> Result<()> {
        let n = self.ctx.total_mass();
        if pi > n * (1.0 + self.escape_band) {
            return Err(Error::Escape { t, pi, n_total: n });
        }
        Ok(())
    }

    /// `v(x, t)`.
    pub fn velocity(&self, x: Point, t: f64) -> Result<Point> {
        let state = self.ctx.state(t)?;
        let pi = state.compute_pi(x)?;
        self.check_inside(pi, t)?;
        let nu = unit_normal(&state, x)?;
        let w = self.ctx.normal_speed(x, t)?;
        let v_par = self.field(t)?.v_par(x, pi);
        Ok(add(scale(nu, w), scale(perp(nu), v_par)))
    }

    /// Classical four-stage Runge-Kutta from `(x0, t0)` to `t1` with step `dt`.
    pub fn advect_particle(&self, x0: Point, t0: f64, t1: f64, dt: f64) -> Result<Trajectory> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let n_total = self.ctx.total_mass();
        let pi0 = self.ctx.state(t0)?.compute_pi(x0)?;
        if pi0 > n_total {
            return Err(Error::Escape { t: t0, pi: pi0, n_total });
        }
        let mut samples = vec![(t0, x0, pi0)];
        let mut x = x0;
        let steps = ((t1 - t0) / dt).ceil().max(0.0) as usize;
        for k in 0..steps {
            let t = t0 + k as f64 * dt;
            let h = (t1 - t).min(dt);
            let k1 = self.velocity(x, t)?;
            let k2 = self.velocity(add(x, scale(k1, 0.5 * h)), t + 0.5 * h)?;
            let k3 = self.velocity(add(x, scale(k2, 0.5 * h)), t + 0.5 * h)?;
            let k4 = self.velocity(add(x, scale(k3, h)), t + h)?;
            let incr = add(add(k1, scale(k2, 2.0)), add(scale(k3, 2.0), k4));
            x = add(x, scale(incr, h / 6.0));
            let t_next = if k + 1 == steps { t1 } else { t0 + (k + 1) as f64 * dt };
            let pi = self.ctx.state(t_next)?.compute_pi(x)?;
            self.check_inside(pi, t_next)?;
            samples.push((t_next, x, pi));
            if pi > n_total {
                return Ok(Trajectory { samples, clamped: true });
            }
        }
        Ok(Trajectory { samples, clamped: false })
    }
}

/// Traces a particle under the purely normal flow of `spec` (no tangential
/// levels); see [`Flow`] for the general case.
pub fn advect_particle(
    spec: &FieldSpec,
    n_total: f64,
    grid: &GridSpec,
    x0: Point,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory> {
    let ctx = KinematicsContext::new(spec.clone(), n_total, *grid, EquilibriumOptions::default(), 1e-3);
    Flow::new(&ctx, Vec::new(), 1e-3).advect_particle(x0, t0, t1, dt)
}
