//! Frozen-time packed equilibrium.
//!
//! Particles fill the sublevel sets of `W(., t)` at the packing density
//! `1/tau` until the mass `N` is exhausted. The filled mass below level `u`,
//!
//! ```text
//! P(u, t) = integral over {W(., t) <= u} of 1/tau dx,
//! ```
//!
//! is tabulated on `[0, u_max]` at levels crowded towards the minimum of `W`
//! (uniform in `sqrt(u)`); the Fermi level `U_N` solves `P(U_N, t) = N`
//! and the particle-count coordinate is `pi(x, t) = P(W(x, t), t)`.
//!
//! In two dimensions `P` is computed on a uniform grid whose cells are split
//! into four triangles around the cell centre. `W` is interpolated linearly
//! on each triangle, so the sublevel part of a boundary triangle is an exact
//! polygon; `1/tau` is sampled at the polygon centroid. The result is a
//! continuous, piecewise smooth function of `u` and `t`, which keeps the
//! differenced quantities (`dP/du`, `d pi/dt`) free of staircase noise.
//! In one dimension the sublevel set is an interval found by root finding and
//! integrated adaptively.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{FieldSpec, Topology};
use crate::geom::{lerp, polygon_area_centroid, Point};
use crate::roots::{bisect_increasing, illinois, integrate, ray_root};

/// Uniform grid over a rectangular box. On the torus strip the `x1` extent
/// must be the period `(-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub lower: Point,
    pub upper: Point,
    pub resolution: [usize; 2],
}

impl GridSpec {
    pub fn square(half_width: f64, resolution: usize) -> Self {
        GridSpec {
            lower: [-half_width, -half_width],
            upper: [half_width, half_width],
            resolution: [resolution, resolution],
        }
    }

    pub fn spacing(&self) -> [f64; 2] {
        [
            (self.upper[0] - self.lower[0]) / self.resolution[0] as f64,
            (self.upper[1] - self.lower[1]) / self.resolution[1].max(1) as f64,
        ]
    }

    pub fn node(&self, i: usize, j: usize) -> Point {
        let h = self.spacing();
        [self.lower[0] + i as f64 * h[0], self.lower[1] + j as f64 * h[1]]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point {
        let h = self.spacing();
        [self.lower[0] + (i as f64 + 0.5) * h[0], self.lower[1] + (j as f64 + 0.5) * h[1]]
    }

    pub fn validate(&self, spec: &FieldSpec) -> Result<()> {
        let [nx, ny] = self.resolution;
        if nx < 4 || (spec.dimension == 2 && ny < 4) {
            return Err(Error::Config(format!("grid resolution {nx}x{ny} is too coarse")));
        }
        if !(self.upper[0] > self.lower[0]) || (spec.dimension == 2 && !(self.upper[1] > self.lower[1])) {
            return Err(Error::Config("grid box must have positive extent".into()));
        }
        if spec.topology == Topology::TorusStrip
            && ((self.lower[0] + 1.0).abs() > 1e-12 || (self.upper[0] - 1.0).abs() > 1e-12)
        {
            return Err(Error::Config("torus-strip grids must span x1 in (-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquilibriumOptions {
    /// Number of `u` samples in the `P` table.
    pub table_size: usize,
    /// Relative tolerance of the table bisection on `u` (scaled by `u_max`).
    pub bisection_tol: f64,
    /// Absolute mass tolerance; `None` means `1e-4 N`.
    pub mass_tol: Option<f64>,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions { table_size: 512, bisection_tol: 1e-6, mass_tol: None }
    }
}

/// Monotone tabulation of `u -> P(u, t)` on `[0, u_max]`.
///
/// Samples are uniform in `sigma = sqrt(u / u_max)`, so they crowd towards
/// the minimum of `W` where `P` behaves like a power of `u`. A nondegenerate
/// planar minimum makes `P` quadratic in `sigma`, which the interpolant
/// reproduces exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PTable {
    u_max: f64,
    /// Spacing in `sigma`.
    ds: f64,
    values: Vec<f64>,
    /// Centered differences of `values` in `sigma` (one-sided at the ends).
    slopes: Vec<f64>,
}

/// The `size` table levels: `u_max (k / (size - 1))^2`, ending exactly at `u_max`.
pub fn table_levels(u_max: f64, size: usize) -> Vec<f64> {
    let ds = 1.0 / (size - 1) as f64;
    (0..size).map(|k| if k + 1 == size { u_max } else { u_max * (k as f64 * ds).powi(2) }).collect()
}

impl PTable {
    /// Table from `P` sampled at [`table_levels`].
    pub fn new(u_max: f64, values: Vec<f64>) -> Self {
        let n = values.len();
        assert!(n >= 3, "P table needs at least three samples");
        let ds = 1.0 / (n - 1) as f64;
        let mut slopes = vec![0.0; n];
        for k in 1..n - 1 {
            slopes[k] = (values[k + 1] - values[k - 1]) / (2.0 * ds);
        }
        slopes[0] = ((-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * ds)).max(0.0);
        slopes[n - 1] = ((3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * ds)).max(0.0);
        PTable { u_max, ds, values, slopes }
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn u_at(&self, k: usize) -> f64 {
        if k + 1 == self.values.len() {
            self.u_max
        } else {
            self.u_max * (k as f64 * self.ds).powi(2)
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `dP/dsigma` at the samples.
    pub fn node_slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn max_value(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] > w[0])
    }

    fn sigma(&self, u: f64) -> f64 {
        (u.max(0.0) / self.u_max).sqrt()
    }

    fn locate(&self, sigma: f64) -> (usize, f64) {
        let n = self.values.len();
        let pos = (sigma / self.ds).clamp(0.0, (n - 1) as f64);
        let k = (pos.floor() as usize).min(n - 2);
        (k, pos - k as f64)
    }

    /// Shape-preserving cubic Hermite interpolation in `sigma`: node slopes
    /// are the centered differences, limited per interval so the interpolant
    /// stays monotone between samples.
    pub fn value(&self, u: f64) -> f64 {
        let (k, s) = self.locate(self.sigma(u));
        let (p0, p1) = (self.values[k], self.values[k + 1]);
        let secant = (p1 - p0) / self.ds;
        let (mut m0, mut m1) = (self.slopes[k], self.slopes[k + 1]);
        if secant <= 0.0 {
            m0 = 0.0;
            m1 = 0.0;
        } else {
            let alpha = (m0 / secant).max(0.0);
            let beta = (m1 / secant).max(0.0);
            let r2 = alpha * alpha + beta * beta;
            let limit = if r2 > 9.0 { 3.0 / r2.sqrt() } else { 1.0 };
            m0 = alpha * limit * secant;
            m1 = beta * limit * secant;
        }
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * p0 + h10 * self.ds * m0 + h01 * p1 + h11 * self.ds * m1
    }

    /// `dP/du` at `u`: centered table differences in `sigma`, linearly
    /// interpolated and divided by `du/dsigma = 2 u_max sigma`.
    pub fn derivative(&self, u: f64) -> f64 {
        let sigma = self.sigma(u).max(1e-12 * self.ds);
        let (k, s) = self.locate(sigma);
        let dq = (1.0 - s) * self.slopes[k] + s * self.slopes[k + 1];
        dq / (2.0 * self.u_max * sigma)
    }

    /// Level `u` with `P(u) = p` on the interpolant.
    pub fn inverse(&self, p: f64, xtol: f64) -> f64 {
        if p <= self.values[0] {
            return 0.0;
        }
        if p >= self.max_value() {
            return self.u_max;
        }
        // Start from the bracketing table interval.
        let k = self.values.partition_point(|&v| v <= p).saturating_sub(1);
        let lo = self.u_at(k);
        let hi = self.u_at((k + 1).min(self.values.len() - 1));
        bisect_increasing(|u| self.value(u) - p, lo, hi, xtol)
    }
}

/// One of the four triangles of a grid cell, with `W` at its vertices.
#[derive(Debug, Clone, Copy)]
struct Triangle {
    cell: (u32, u32),
    corner: u8,
    w: [f64; 3],
    /// `W` at the midpoints of the edges `01`, `12`, `20`.
    mid: [f64; 3],
    /// Integral of `1/tau` over the whole triangle.
    full: f64,
}

impl Triangle {
    fn w_min(&self) -> f64 {
        self.w[0].min(self.w[1]).min(self.w[2])
    }

    fn w_max(&self) -> f64 {
        self.w[0].max(self.w[1]).max(self.w[2])
    }
}

/// Triangle-fan mesh of the grid, used for all planar sublevel integrals.
struct TriangleMesh<'a> {
    spec: &'a FieldSpec,
    t: f64,
    grid: GridSpec,
    triangles: Vec<Triangle>,
    /// Levels at or above this value reach the non-periodic box boundary.
    cap: f64,
}

impl<'a> TriangleMesh<'a> {
    fn build(spec: &'a FieldSpec, t: f64, grid: &GridSpec, node_w: &[f64], center_w: &[f64]) -> Result<Self> {
        let [nx, ny] = grid.resolution;
        let node = |i: usize, j: usize| node_w[j * (nx + 1) + i];
        let rows: Vec<Result<Vec<Triangle>>> = (0..ny)
            .into_par_iter()
            .map(|j| {
                let mut row = Vec::with_capacity(4 * nx);
                for i in 0..nx {
                    let corners = [node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)];
                    let wc = center_w[j * nx + i];
                    for k in 0..4u8 {
                        let pts = triangle_points(grid, i, j, k);
                        let full = integrate_triangle(&|x| spec.inverse_volume(x, t), pts)?;
                        let mid = [0, 1, 2].map(|a| spec.w(lerp(pts[a], pts[(a + 1) % 3], 0.5), t));
                        row.push(Triangle {
                            cell: (i as u32, j as u32),
                            corner: k,
                            w: [corners[k as usize], corners[(k as usize + 1) % 4], wc],
                            mid,
                            full,
                        });
                    }
                }
                Ok(row)
            })
            .collect();
        let mut triangles = Vec::with_capacity(4 * nx * ny);
        for row in rows {
            triangles.extend(row?);
        }
        Ok(TriangleMesh { spec, t, grid: *grid, triangles, cap: boundary_cap(spec, grid, node_w) })
    }

    /// Integral of `g` over the part of `tri` below level `u`, by the centroid
    /// rule. The level line is cut between exact crossings on the edges, found
    /// from the quadratic through the edge ends and midpoint.
    fn partial<G>(&self, tri: &Triangle, u: f64, g: &G) -> Result<f64>
    where
        G: Fn(Point) -> Result<f64>,
    {
        let pts = triangle_points(&self.grid, tri.cell.0 as usize, tri.cell.1 as usize, tri.corner);
        let mut poly: Vec<Point> = Vec::with_capacity(4);
        let mut cut: Vec<Point> = Vec::with_capacity(2);
        for a in 0..3 {
            let b = (a + 1) % 3;
            let (wa, wb) = (tri.w[a], tri.w[b]);
            if wa <= u {
                poly.push(pts[a]);
            }
            if (wa <= u) != (wb <= u) {
                let c = lerp(pts[a], pts[b], edge_crossing(wa, tri.mid[a], wb, u));
                poly.push(c);
                cut.push(c);
            }
        }
        let (area, centroid) = polygon_area_centroid(&poly);
        let mut total = if area == 0.0 { 0.0 } else { area * g(centroid)? };
        if let [c0, c1] = cut[..] {
            // The level line bows away from the chord between the two cuts;
            // add the parabolic segment, signed by which side it bulges to.
            let mid = lerp(c0, c1, 0.5);
            let grad = self.spec.grad_w(mid, self.t);
            let slope = grad[0].hypot(grad[1]);
            if slope > 0.0 {
                let bulge = (u - self.spec.w(mid, self.t)) / slope;
                let chord = (c1[0] - c0[0]).hypot(c1[1] - c0[1]);
                total += 2.0 / 3.0 * chord * bulge * g(mid)?;
            }
        }
        Ok(total)
    }

    fn inverse_volume_at(&self) -> impl Fn(Point) -> Result<f64> + '_ {
        move |x| self.spec.inverse_volume(x, self.t)
    }

    fn check_level(&self, u: f64) -> Result<()> {
        if u >= self.cap {
            Err(Error::DomainTruncated { level: u, cap: self.cap })
        } else {
            Ok(())
        }
    }

    fn mass_below(&self, u: f64) -> Result<f64> {
        self.check_level(u)?;
        let g = self.inverse_volume_at();
        let mut total = 0.0;
        for tri in &self.triangles {
            if tri.w_max() <= u {
                total += tri.full;
            } else if tri.w_min() < u {
                total += self.partial(tri, u, &g)?;
            }
        }
        Ok(total)
    }

    /// Integral of `W / tau` over the sublevel set, the confinement energy.
    fn energy_below(&self, u: f64) -> Result<f64> {
        self.check_level(u)?;
        let g = |x: Point| Ok(self.spec.w(x, self.t) * self.spec.inverse_volume(x, self.t)?);
        let mut total = 0.0;
        for tri in &self.triangles {
            if tri.w_min() < u {
                if tri.w_max() <= u {
                    // Centroid rule over the full triangle.
                    let pts = triangle_points(&self.grid, tri.cell.0 as usize, tri.cell.1 as usize, tri.corner);
                    total += integrate_triangle(&g, pts)?;
                } else {
                    total += self.partial(tri, u, &g)?;
                }
            }
        }
        Ok(total)
    }

    /// `P` at every level of [`table_levels`] in one sweep: each triangle
    /// adds its full weight from the first level above its maximum and a
    /// clipped weight to the few levels it straddles.
    fn table(&self, u_max: f64, size: usize) -> Result<Vec<f64>> {
        self.check_level(u_max)?;
        let levels = table_levels(u_max, size);
        let level = |k: usize| levels[k];
        let first_at_or_above = |w: f64| {
            let mut k = (((w.max(0.0) / u_max).sqrt() * (size - 1) as f64).ceil() as usize).min(size);
            while k > 0 && level(k - 1) >= w {
                k -= 1;
            }
            while k < size && level(k) < w {
                k += 1;
            }
            k
        };
        let g = self.inverse_volume_at();
        let mut steps = vec![0.0; size + 1];
        let mut clipped = vec![0.0; size];
        for tri in &self.triangles {
            let k_full = first_at_or_above(tri.w_max());
            steps[k_full] += tri.full;
            let mut k = first_at_or_above(tri.w_min());
            if k < size && level(k) == tri.w_min() {
                k += 1;
            }
            while k < k_full {
                clipped[k] += self.partial(tri, level(k), &g)?;
                k += 1;
            }
        }
        let mut out = Vec::with_capacity(size);
        let mut running = 0.0;
        for k in 0..size {
            running += steps[k];
            out.push(running + clipped[k]);
        }
        Ok(out)
    }
}

/// Parameter `s` in `[0, 1]` where the quadratic through `(0, wa)`,
/// `(1/2, wm)`, `(1, wb)` reaches `u`; `wa` and `wb` lie on opposite sides.
fn edge_crossing(wa: f64, wm: f64, wb: f64, u: f64) -> f64 {
    let linear = ((u - wa) / (wb - wa)).clamp(0.0, 1.0);
    let a = 2.0 * wa - 4.0 * wm + 2.0 * wb;
    let b = -3.0 * wa + 4.0 * wm - wb;
    let c = wa - u;
    if a.abs() <= 1e-12 * (b.abs() + c.abs()) {
        return linear;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return linear;
    }
    // Numerically stable pair of roots.
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let roots = [q / a, if q != 0.0 { c / q } else { f64::NAN }];
    roots
        .into_iter()
        .filter(|r| (0.0..=1.0).contains(r))
        .min_by(|x, y| (x - linear).abs().total_cmp(&(y - linear).abs()))
        .unwrap_or(linear)
}

/// Integral of `g` over a triangle by the centroid rule, subdivided at edge
/// midpoints where the rule has not settled (integrable singularities).
fn integrate_triangle<G>(g: &G, pts: [Point; 3]) -> Result<f64>
where
    G: Fn(Point) -> Result<f64>,
{
    fn children(p: [Point; 3]) -> [[Point; 3]; 4] {
        let m01 = lerp(p[0], p[1], 0.5);
        let m12 = lerp(p[1], p[2], 0.5);
        let m20 = lerp(p[2], p[0], 0.5);
        [[p[0], m01, m20], [m01, p[1], m12], [m20, m12, p[2]], [m01, m12, m20]]
    }
    fn centroid_rule<G: Fn(Point) -> Result<f64>>(g: &G, p: [Point; 3]) -> Result<f64> {
        let (area, c) = polygon_area_centroid(&p);
        Ok(area * g(c)?)
    }
    fn refine<G: Fn(Point) -> Result<f64>>(g: &G, p: [Point; 3], coarse: f64, depth: u32) -> Result<f64> {
        let kids = children(p);
        let mut parts = [0.0; 4];
        for (k, kid) in kids.iter().enumerate() {
            parts[k] = centroid_rule(g, *kid)?;
        }
        let fine: f64 = parts.iter().sum();
        if depth == 0 || (fine - coarse).abs() <= 1e-4 * fine.abs() {
            return Ok(fine);
        }
        let mut total = 0.0;
        for (k, kid) in kids.iter().enumerate() {
            total += refine(g, *kid, parts[k], depth - 1)?;
        }
        Ok(total)
    }
    let coarse = centroid_rule(g, pts)?;
    refine(g, pts, coarse, 10)
}

fn triangle_points(grid: &GridSpec, i: usize, j: usize, corner: u8) -> [Point; 3] {
    let c = [grid.node(i, j), grid.node(i + 1, j), grid.node(i + 1, j + 1), grid.node(i, j + 1)];
    let k = corner as usize;
    [c[k], c[(k + 1) % 4], grid.cell_center(i, j)]
}

/// Smallest `W` on the non-periodic part of the grid boundary.
fn boundary_cap(spec: &FieldSpec, grid: &GridSpec, node_w: &[f64]) -> f64 {
    let [nx, ny] = grid.resolution;
    let node = |i: usize, j: usize| node_w[j * (nx + 1) + i];
    let mut cap = f64::INFINITY;
    for i in 0..=nx {
        cap = cap.min(node(i, 0)).min(node(i, ny));
    }
    if spec.topology == Topology::FullPlane {
        for j in 0..=ny {
            cap = cap.min(node(0, j)).min(node(nx, j));
        }
    }
    cap
}

/// Sublevel sets of a one-dimensional `W`: intervals around the critical point.
struct IntervalQuadrature<'a> {
    spec: &'a FieldSpec,
    t: f64,
    center: f64,
    lower: f64,
    upper: f64,
    cap: f64,
}

impl<'a> IntervalQuadrature<'a> {
    fn new(spec: &'a FieldSpec, t: f64, grid: &GridSpec) -> Result<Self> {
        let center = spec
            .critical_point(t)
            .ok_or_else(|| Error::InvalidField("one-dimensional potentials need a critical point".into()))?[0];
        let (lower, upper) = (grid.lower[0], grid.upper[0]);
        if !(lower < center && center < upper) {
            return Err(Error::DomainTruncated { level: 0.0, cap: 0.0 });
        }
        let cap = spec.w([lower, 0.0], t).min(spec.w([upper, 0.0], t));
        Ok(IntervalQuadrature { spec, t, center, lower, upper, cap })
    }

    fn endpoints(&self, u: f64) -> Result<(f64, f64)> {
        if u >= self.cap {
            return Err(Error::DomainTruncated { level: u, cap: self.cap });
        }
        let g = |x: f64| self.spec.w([x, 0.0], self.t);
        let reach = (self.upper - self.lower).abs();
        let a = ray_root(g, self.center, -1.0, u, reach)?;
        let b = ray_root(g, self.center, 1.0, u, reach)?;
        Ok((a, b))
    }

    fn integrate_below<G>(&self, u: f64, g: G) -> Result<f64>
    where
        G: Fn(f64) -> Result<f64>,
    {
        let (a, b) = self.endpoints(u)?;
        let scale = g(self.center)?.abs().max(1e-300) * (b - a).max(1e-300);
        let failure = std::cell::RefCell::new(None);
        let v = integrate(
            |x| match g(x) {
                Ok(v) => v,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    0.0
                }
            },
            a,
            b,
            1e-14 * scale,
        );
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        Ok(v)
    }

    fn mass_below(&self, u: f64) -> Result<f64> {
        self.integrate_below(u, |x| self.spec.inverse_volume([x, 0.0], self.t))
    }

    fn energy_below(&self, u: f64) -> Result<f64> {
        self.integrate_below(u, |x| Ok(self.spec.w([x, 0.0], self.t) * self.spec.inverse_volume([x, 0.0], self.t)?))
    }
}

/// Either quadrature, chosen by dimension.
enum Sublevel<'a> {
    Planar(TriangleMesh<'a>),
    Interval(IntervalQuadrature<'a>),
}

impl<'a> Sublevel<'a> {
    fn cap(&self) -> f64 {
        match self {
            Sublevel::Planar(m) => m.cap,
            Sublevel::Interval(q) => q.cap,
        }
    }

    fn mass_below(&self, u: f64) -> Result<f64> {
        if u <= 0.0 {
            return Ok(0.0);
        }
        match self {
            Sublevel::Planar(m) => m.mass_below(u),
            Sublevel::Interval(q) => q.mass_below(u),
        }
    }

    fn energy_below(&self, u: f64) -> Result<f64> {
        if u <= 0.0 {
            return Ok(0.0);
        }
        match self {
            Sublevel::Planar(m) => m.energy_below(u),
            Sublevel::Interval(q) => q.energy_below(u),
        }
    }

    fn table(&self, u_max: f64, size: usize) -> Result<Vec<f64>> {
        match self {
            Sublevel::Planar(m) => m.table(u_max, size),
            Sublevel::Interval(q) => table_levels(u_max, size)
                .into_iter()
                .map(|u| {
                    if u == 0.0 {
                        Ok(0.0)
                    } else {
                        q.mass_below(u)
                    }
                })
                .collect(),
        }
    }

    /// Smallest doubling bracket `u_hi` with `P(u_hi) > n_total`.
    fn bracket(&self, n_total: f64, start: f64) -> Result<f64> {
        let cap = self.cap();
        let ceiling = cap * (1.0 - 1e-9);
        let mut u = start.min(ceiling);
        loop {
            let m = self.mass_below(u)?;
            if m > n_total {
                return Ok(u);
            }
            if u >= ceiling {
                return Err(Error::InsufficientCapacity { requested: n_total, available: m });
            }
            u = (2.0 * u).min(ceiling);
        }
    }

    /// Solves `P(u) = n_total` on the direct quadrature inside `[lo, hi]`.
    fn refine(&self, n_total: f64, lo: f64, hi: f64, mass_tol: f64) -> Result<f64> {
        let mut failure = None;
        let root = illinois(
            |u| match self.mass_below(u) {
                Ok(m) => m - n_total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            lo,
            hi,
            1e-15 * hi.max(1e-300),
            1e-6 * mass_tol,
            200,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        root.ok_or(Error::InsufficientCapacity { requested: n_total, available: f64::NAN })
    }
}

fn sample_nodes(spec: &FieldSpec, t: f64, grid: &GridSpec) -> (Vec<f64>, Vec<f64>) {
    let [nx, ny] = grid.resolution;
    if spec.dimension == 1 {
        let nodes = (0..=nx).map(|i| spec.w(grid.node(i, 0), t)).collect();
        let centers = (0..nx).map(|i| spec.w([grid.cell_center(i, 0)[0], 0.0], t)).collect();
        return (nodes, centers);
    }
    let nodes: Vec<f64> = (0..(nx + 1) * (ny + 1))
        .into_par_iter()
        .map(|idx| spec.w(grid.node(idx % (nx + 1), idx / (nx + 1)), t))
        .collect();
    let centers: Vec<f64> = (0..nx * ny)
        .into_par_iter()
        .map(|idx| spec.w(grid.cell_center(idx % nx, idx / nx), t))
        .collect();
    (nodes, centers)
}

/// Solved equilibrium at one time.
#[derive(Debug, Clone)]
pub struct EquilibriumState {
    spec: FieldSpec,
    t: f64,
    n_total: f64,
    fermi_level: f64,
    mass_tol: f64,
    options: EquilibriumOptions,
    table: PTable,
    grid: GridSpec,
    node_w: Vec<f64>,
    center_w: Vec<f64>,
}

impl EquilibriumState {
    pub fn solve(spec: &FieldSpec, n_total: f64, t: f64, grid: &GridSpec, options: &EquilibriumOptions) -> Result<Self> {
        if !(n_total > 0.0 && n_total.is_finite()) {
            return Err(Error::InvalidField(format!("total mass must be positive, got {n_total}")));
        }
        grid.validate(spec)?;
        let mut grid = *grid;
        if spec.dimension == 1 {
            grid.resolution[1] = 1;
            grid.lower[1] = 0.0;
            grid.upper[1] = 0.0;
        }
        let mass_tol = options.mass_tol.unwrap_or(1e-4 * n_total);
        let (node_w, center_w) = sample_nodes(spec, t, &grid);
        let sub = sublevel(spec, t, &grid, &node_w, &center_w)?;

        let cap = sub.cap();
        let u_hi = sub.bracket(n_total, cap / 1024.0)?;
        let u_max = (1.5 * u_hi).min(cap * (1.0 - 1e-9));
        let table = PTable::new(u_max, sub.table(u_max, options.table_size.max(3))?);

        let xtol = options.bisection_tol * u_max;
        let guess = table.inverse(n_total, xtol);
        let (lo, hi) = widen_bracket(&sub, n_total, guess, (2.0 * xtol).max(u_max / options.table_size as f64), u_max)?;
        let fermi_level = sub.refine(n_total, lo, hi, mass_tol)?;
        drop(sub);

        Ok(EquilibriumState { spec: spec.clone(), t, n_total, fermi_level, mass_tol, options: *options, table, grid, node_w, center_w })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn total_mass(&self) -> f64 {
        self.n_total
    }

    /// `U_N(t)`.
    pub fn fermi_level(&self) -> f64 {
        self.fermi_level
    }

    pub fn mass_tolerance(&self) -> f64 {
        self.mass_tol
    }

    pub fn options(&self) -> &EquilibriumOptions {
        &self.options
    }

    pub fn table(&self) -> &PTable {
        &self.table
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub(crate) fn node_potential(&self) -> &[f64] {
        &self.node_w
    }

    /// `P(u, t)` by direct quadrature (no table).
    pub fn compute_p(&self, u: f64) -> Result<f64> {
        let sub = sublevel(&self.spec, self.t, &self.grid, &self.node_w, &self.center_w)?;
        sub.mass_below(u)
    }

    /// Mass of the packed density, integrated on the grid.
    pub fn integrated_mass(&self) -> Result<f64> {
        self.compute_p(self.fermi_level)
    }

    /// Confinement energy `F = integral of W n`.
    pub fn energy(&self) -> Result<f64> {
        let sub = sublevel(&self.spec, self.t, &self.grid, &self.node_w, &self.center_w)?;
        sub.energy_below(self.fermi_level)
    }

    /// Re-solves `P(U) = N` from a different bracketing start; agreement with
    /// [`Self::fermi_level`] is the numerical face of uniqueness.
    pub fn resolve_fermi_level(&self, start: f64) -> Result<f64> {
        let sub = sublevel(&self.spec, self.t, &self.grid, &self.node_w, &self.center_w)?;
        let u_hi = sub.bracket(self.n_total, start)?;
        sub.refine(self.n_total, 0.0, u_hi, self.mass_tol)
    }

    /// Packed density: `1/tau` on the closed sublevel set `{W <= U_N}`, zero
    /// outside. Infinite where `tau` vanishes inside the medium.
    pub fn equilibrium_density(&self, x: Point) -> f64 {
        if self.spec.w(x, self.t) <= self.fermi_level {
            match self.spec.inverse_volume(x, self.t) {
                Ok(v) => v,
                Err(Error::SingularVolume { .. }) => f64::INFINITY,
                Err(_) => f64::NAN,
            }
        } else {
            0.0
        }
    }

    /// `pi(x, t) = P(W(x, t), t)` from the table.
    pub fn compute_pi(&self, x: Point) -> Result<f64> {
        self.pi_of_level(self.spec.w(x, self.t))
    }

    pub(crate) fn pi_of_level(&self, w: f64) -> Result<f64> {
        if w > self.table.u_max() || w.is_nan() {
            return Err(Error::OutOfTable { value: w, u_max: self.table.u_max() });
        }
        Ok(self.table.value(w))
    }

    /// `dP/du` at the potential level of `x`.
    pub fn density_of_states_at(&self, u: f64) -> Result<f64> {
        if !(0.0..=self.table.u_max()).contains(&u) {
            return Err(Error::OutOfTable { value: u, u_max: self.table.u_max() });
        }
        Ok(self.table.derivative(u))
    }

    /// `(u, dP/du)` pairs.
    pub fn density_of_states(&self, u_samples: &[f64]) -> Result<Vec<(f64, f64)>> {
        u_samples.iter().map(|&u| Ok((u, self.density_of_states_at(u)?))).collect()
    }

    /// Potential level `u` with `P(u) = p`.
    pub fn level_of(&self, p: f64) -> f64 {
        self.table.inverse(p, 1e-15 * self.table.u_max())
    }

    /// `grad pi = dP/du (W) grad W`.
    pub fn grad_pi(&self, x: Point) -> Result<Point> {
        let w = self.spec.w(x, self.t);
        let dp = self.density_of_states_at(w)?;
        let g = self.spec.grad_w(x, self.t);
        Ok([dp * g[0], dp * g[1]])
    }

    /// Node samples `(x, W, 1/tau, n, pi)`, row by row.
    pub fn node_samples(&self) -> Vec<NodeSample> {
        let [nx, ny] = self.grid.resolution;
        let rows = if self.spec.dimension == 1 { 1 } else { ny + 1 };
        (0..(nx + 1) * rows)
            .map(|idx| {
                let (i, j) = (idx % (nx + 1), idx / (nx + 1));
                let x = self.grid.node(i, j);
                self.sample(x, self.node_w[idx])
            })
            .collect()
    }

    fn sample(&self, x: Point, w: f64) -> NodeSample {
        let tau_inv = match self.spec.inverse_volume(x, self.t) {
            Ok(v) => v,
            Err(Error::SingularVolume { .. }) => f64::INFINITY,
            Err(_) => f64::NAN,
        };
        let n = if w <= self.fermi_level { tau_inv } else { 0.0 };
        let pi = self.pi_of_level(w).unwrap_or(f64::NAN);
        NodeSample { x, w, tau_inv, n, pi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSample {
    pub x: Point,
    pub w: f64,
    pub tau_inv: f64,
    pub n: f64,
    pub pi: f64,
}

fn sublevel<'a>(spec: &'a FieldSpec, t: f64, grid: &GridSpec, node_w: &[f64], center_w: &[f64]) -> Result<Sublevel<'a>> {
    Ok(if spec.dimension == 1 {
        Sublevel::Interval(IntervalQuadrature::new(spec, t, grid)?)
    } else {
        Sublevel::Planar(TriangleMesh::build(spec, t, grid, node_w, center_w)?)
    })
}

fn widen_bracket(sub: &Sublevel<'_>, n_total: f64, guess: f64, width: f64, u_max: f64) -> Result<(f64, f64)> {
    let mut w = width;
    for _ in 0..60 {
        let lo = (guess - w).max(0.0);
        let hi = (guess + w).min(u_max);
        if sub.mass_below(lo)? <= n_total && sub.mass_below(hi)? >= n_total {
            return Ok((lo, hi));
        }
        w *= 2.0;
    }
    Ok((0.0, u_max))
}

/// `P(u, t)` for a one-off level, building the quadrature from scratch.
pub fn compute_p(spec: &FieldSpec, u: f64, t: f64, grid: &GridSpec) -> Result<f64> {
    if u < 0.0 {
        return Err(Error::InvalidField(format!("level must be non-negative, got {u}")));
    }
    grid.validate(spec)?;
    let mut grid = *grid;
    if spec.dimension == 1 {
        grid.resolution[1] = 1;
    }
    let (node_w, center_w) = sample_nodes(spec, t, &grid);
    sublevel(spec, t, &grid, &node_w, &center_w)?.mass_below(u)
}

/// `U_N(t)` solving `P(U_N, t) = N`.
pub fn solve_fermi_level(spec: &FieldSpec, n_total: f64, t: f64, grid: &GridSpec) -> Result<f64> {
    Ok(EquilibriumState::solve(spec, n_total, t, grid, &EquilibriumOptions::default())?.fermi_level())
}
