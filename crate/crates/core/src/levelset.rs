//! Level curves `Sigma_p = {pi = p}` in the plane and coarea-weighted
//! integrals over them.
//!
//! Since `pi = P(W)` with `P` strictly increasing, `Sigma_p` is the level set
//! `{W = u_p}` with `u_p = P^{-1}(p)`. Curves are traced by marching squares on
//! the node values of `W`; each edge crossing is then moved onto the exact
//! level set by a root solve along the edge. Curves run counter-clockwise
//! around the sublevel set with the outward normal on their right.
//!
//! On the torus strip a level set may wrap around the periodic direction.
//! Such a component is returned unwrapped, with the period it spans stored
//! in [`LevelCurve::closure_shift`].

use std::collections::BTreeMap;

use crate::equilibrium::EquilibriumState;
use crate::error::{Error, Result};
use crate::fields::Topology;
use crate::geom::{add, dot, lerp, norm, perp, scale, segments_intersect, sub, Point};
use crate::roots::illinois;

/// Minimum number of vertices for a curve to be usable downstream.
pub const MIN_VERTICES: usize = 16;

/// A closed level curve with per-vertex geometric data. The closing segment
/// runs from the last vertex to `vertices[0] + closure_shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCurve {
    pub p: f64,
    pub t: f64,
    /// Potential level `u_p` of the curve.
    pub level: f64,
    pub vertices: Vec<Point>,
    /// Cumulative arclength, `arclength[0] = 0`.
    pub arclength: Vec<f64>,
    pub length: f64,
    pub tau_inv: Vec<f64>,
    pub grad_pi_norm: Vec<f64>,
    pub normal: Vec<Point>,
    pub closure_shift: Point,
}

impl LevelCurve {
    /// Assembles a curve from vertices and per-vertex data, computing the
    /// arclength. Used for synthetic curves as well as extracted ones.
    pub fn from_parts(
        p: f64,
        t: f64,
        level: f64,
        vertices: Vec<Point>,
        tau_inv: Vec<f64>,
        grad_pi_norm: Vec<f64>,
        normal: Vec<Point>,
        closure_shift: Point,
    ) -> Self {
        let n = vertices.len();
        assert!(tau_inv.len() == n && grad_pi_norm.len() == n && normal.len() == n);
        let mut arclength = Vec::with_capacity(n);
        let mut s = 0.0;
        for i in 0..n {
            arclength.push(s);
            let next = if i + 1 == n { add(vertices[0], closure_shift) } else { vertices[i + 1] };
            s += norm(sub(next, vertices[i]));
        }
        LevelCurve { p, t, level, vertices, arclength, length: s, tau_inv, grad_pi_norm, normal, closure_shift }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Length of the segment leaving vertex `i`.
    pub fn segment_length(&self, i: usize) -> f64 {
        let n = self.len();
        if i + 1 == n {
            self.length - self.arclength[i]
        } else {
            self.arclength[i + 1] - self.arclength[i]
        }
    }

    pub fn segment_lengths(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.segment_length(i)).collect()
    }

    /// Unit tangent, a quarter turn from the outward normal.
    pub fn tangent(&self, i: usize) -> Point {
        perp(self.normal[i])
    }

    /// Endpoint of the segment leaving vertex `i`, unwrapped.
    fn segment_end(&self, i: usize) -> Point {
        if i + 1 == self.len() {
            add(self.vertices[0], self.closure_shift)
        } else {
            self.vertices[i + 1]
        }
    }

    /// Discrete `integral of g dS / |grad pi|`: trapezoid rule per segment,
    /// closing segment included.
    pub fn weighted_integral(&self, g: &[f64]) -> f64 {
        assert_eq!(g.len(), self.len(), "samples must align with vertices");
        let n = self.len();
        let mut total = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            total += 0.5 * self.segment_length(i) * (g[i] / self.grad_pi_norm[i] + g[j] / self.grad_pi_norm[j]);
        }
        total
    }

    /// Weighted mean `integral g dS/|grad pi| / integral dS/|grad pi|`.
    pub fn weighted_mean(&self, g: &[f64]) -> f64 {
        self.weighted_integral(g) / self.weighted_integral(&vec![1.0; self.len()])
    }

    /// No two non-adjacent segments intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.len();
        let boxes: Vec<[f64; 4]> = (0..n)
            .map(|i| {
                let (a, b) = (self.vertices[i], self.segment_end(i));
                [a[0].min(b[0]), a[0].max(b[0]), a[1].min(b[1]), a[1].max(b[1])]
            })
            .collect();
        for i in 0..n {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (bi, bj) = (boxes[i], boxes[j]);
                if bi[1] < bj[0] || bj[1] < bi[0] || bi[3] < bj[2] || bj[3] < bi[2] {
                    continue;
                }
                if segments_intersect(self.vertices[i], self.segment_end(i), self.vertices[j], self.segment_end(j)) {
                    return false;
                }
            }
        }
        true
    }

    /// Closest point of the curve to `x`: segment index, fraction along it,
    /// and distance. Periodic images in the closure direction are considered.
    pub fn nearest(&self, x: Point) -> (usize, f64, f64) {
        let shifts: &[f64] = if self.closure_shift == [0.0, 0.0] { &[0.0] } else { &[-1.0, 0.0, 1.0] };
        let mut best = (0, 0.0, f64::INFINITY);
        for &k in shifts {
            let y = sub(x, scale(self.closure_shift, k));
            for i in 0..self.len() {
                let a = self.vertices[i];
                let d = sub(self.segment_end(i), a);
                let dd = dot(d, d);
                let s = if dd > 0.0 { (dot(sub(y, a), d) / dd).clamp(0.0, 1.0) } else { 0.0 };
                let dist = norm(sub(y, lerp(a, self.segment_end(i), s)));
                if dist < best.2 {
                    best = (i, s, dist);
                }
            }
        }
        best
    }

    /// Linear interpolation of vertex samples at a point of segment `i`.
    pub fn interpolate(&self, g: &[f64], segment: usize, s: f64) -> f64 {
        let j = (segment + 1) % self.len();
        (1.0 - s) * g[segment] + s * g[j]
    }
}

/// `integral of g dS / |grad pi|` over `curve`.
pub fn weighted_level_integral(curve: &LevelCurve, integrand: &[f64]) -> f64 {
    curve.weighted_integral(integrand)
}

/// Outward unit normal `grad pi / |grad pi|`.
pub fn unit_normal(state: &EquilibriumState, x: Point) -> Result<Point> {
    let g = state.grad_pi(x)?;
    let n = norm(g);
    if !(n >= 1e-12) {
        return Err(Error::DegenerateNormal { x1: x[0], x2: x[1], norm: n });
    }
    Ok(scale(g, 1.0 / n))
}

/// Edge crossing of the contour, on an edge in canonical node order.
#[derive(Debug, Clone, Copy)]
struct Crossing {
    point: Point,
}

/// Marching-squares bookkeeping for one level.
struct Tracer<'a> {
    state: &'a EquilibriumState,
    level: f64,
    nx: usize,
    ny: usize,
    periodic: bool,
    period: f64,
    vertical_cols: usize,
}

/// A contour piece inside one cell: from the crossing on `start` to the
/// crossing on `end`, with the period offset accumulated across it.
#[derive(Debug, Clone, Copy)]
struct Piece {
    end: usize,
    offset: f64,
}

impl<'a> Tracer<'a> {
    fn new(state: &'a EquilibriumState, level: f64) -> Self {
        let grid = state.grid();
        let periodic = state.spec().topology == Topology::TorusStrip;
        let [nx, ny] = grid.resolution;
        Tracer {
            state,
            level,
            nx,
            ny,
            periodic,
            period: grid.upper[0] - grid.lower[0],
            vertical_cols: if periodic { nx } else { nx + 1 },
        }
    }

    fn node_w(&self, i: usize, j: usize) -> f64 {
        self.state.node_potential()[j * (self.nx + 1) + i]
    }

    fn inside(&self, i: usize, j: usize) -> bool {
        self.node_w(i, j) < self.level
    }

    fn horizontal(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Vertical edge id and the period offset of its canonical column.
    fn vertical(&self, i: usize, j: usize) -> (usize, f64) {
        let base = (self.ny + 1) * self.nx;
        if self.periodic && i == self.nx {
            (base + j * self.vertical_cols, self.period)
        } else {
            (base + j * self.vertical_cols + i, 0.0)
        }
    }

    fn edge_count(&self) -> usize {
        (self.ny + 1) * self.nx + self.ny * self.vertical_cols
    }

    fn is_boundary_edge(&self, id: usize) -> bool {
        let base = (self.ny + 1) * self.nx;
        if id < base {
            let j = id / self.nx;
            j == 0 || j == self.ny
        } else {
            let i = (id - base) % self.vertical_cols;
            !self.periodic && (i == 0 || i == self.nx)
        }
    }

    /// Exact crossing on the segment between nodes `a` and `b`.
    fn refine(&self, a: (usize, usize), b: (usize, usize)) -> Crossing {
        let grid = self.state.grid();
        let (pa, pb) = (grid.node(a.0, a.1), grid.node(b.0, b.1));
        let (wa, wb) = (self.node_w(a.0, a.1), self.node_w(b.0, b.1));
        let spec = self.state.spec();
        let t = self.state.time();
        let f = |s: f64| {
            if s == 0.0 {
                wa - self.level
            } else if s == 1.0 {
                wb - self.level
            } else {
                spec.w(lerp(pa, pb, s), t) - self.level
            }
        };
        let s = illinois(f, 0.0, 1.0, 1e-15, 0.0, 200).unwrap_or((self.level - wa) / (wb - wa));
        Crossing { point: lerp(pa, pb, s) }
    }

    fn crossings(&self) -> BTreeMap<usize, Crossing> {
        let mut out = BTreeMap::new();
        for j in 0..=self.ny {
            for i in 0..self.nx {
                if self.inside(i, j) != self.inside(i + 1, j) {
                    out.insert(self.horizontal(i, j), self.refine((i, j), (i + 1, j)));
                }
            }
        }
        for j in 0..self.ny {
            for i in 0..self.vertical_cols {
                if self.inside(i, j) != self.inside(i, j + 1) {
                    out.insert(self.vertical(i, j).0, self.refine((i, j), (i, j + 1)));
                }
            }
        }
        out
    }

    /// Contour pieces of all cells keyed by their starting edge.
    fn pieces(&self) -> BTreeMap<usize, Piece> {
        let mut out = BTreeMap::new();
        for j in 0..self.ny {
            for i in 0..self.nx {
                let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
                let inside = corners.map(|(a, b)| self.inside(a, b));
                if inside.iter().all(|&x| x) || inside.iter().all(|&x| !x) {
                    continue;
                }
                let (right, right_offset) = self.vertical(i + 1, j);
                let (left, left_offset) = self.vertical(i, j);
                let edges = [
                    (self.horizontal(i, j), 0.0),
                    (right, right_offset),
                    (self.horizontal(i, j + 1), 0.0),
                    (left, left_offset),
                ];
                // Leaving edges go from an inside corner to an outside one
                // in counter-clockwise order around the cell.
                let leaving: Vec<usize> = (0..4).filter(|&k| inside[k] && !inside[(k + 1) % 4]).collect();
                let entering: Vec<usize> = (0..4).filter(|&k| !inside[k] && inside[(k + 1) % 4]).collect();
                let connected = if leaving.len() == 2 {
                    let mean = corners.iter().map(|&(a, b)| self.node_w(a, b)).sum::<f64>() / 4.0;
                    mean < self.level
                } else {
                    true
                };
                for &k in &leaving {
                    let m = if leaving.len() == 1 {
                        entering[0]
                    } else if connected {
                        (k + 1) % 4
                    } else {
                        (k + 3) % 4
                    };
                    out.insert(edges[k].0, Piece { end: edges[m].0, offset: edges[m].1 - edges[k].1 });
                }
            }
        }
        out
    }
}

/// All components of `Sigma_p`, each decorated and checked.
pub fn extract_level_curves(state: &EquilibriumState, p: f64) -> Result<Vec<LevelCurve>> {
    if state.spec().dimension != 2 {
        return Err(Error::InvalidField("level curves require a planar field".into()));
    }
    let p_max = state.table().max_value();
    if !(p > 0.0 && p < p_max) || p <= 1e-12 * p_max {
        return Err(Error::NoCurve { p });
    }
    let level = state.level_of(p);
    let tracer = Tracer::new(state, level);
    let crossings = tracer.crossings();
    if crossings.is_empty() {
        return Err(Error::NoCurve { p });
    }
    if let Some(&id) = crossings.keys().find(|&&id| tracer.is_boundary_edge(id)) {
        let _ = id;
        return Err(Error::DomainTruncated { level, cap: level });
    }
    let pieces = tracer.pieces();
    debug_assert!(tracer.edge_count() >= crossings.len());

    let mut visited = std::collections::BTreeSet::new();
    let mut curves = Vec::new();
    for &start in crossings.keys() {
        if visited.contains(&start) {
            continue;
        }
        let mut points = Vec::new();
        let mut edge = start;
        let mut offset = 0.0;
        loop {
            visited.insert(edge);
            let c = crossings[&edge].point;
            points.push([c[0] + offset, c[1]]);
            let piece = pieces.get(&edge).ok_or(Error::DomainTruncated { level, cap: level })?;
            offset += piece.offset;
            edge = piece.end;
            if edge == start {
                break;
            }
            if visited.contains(&edge) {
                return Err(Error::DomainTruncated { level, cap: level });
            }
        }
        curves.push(decorate(state, p, level, points, [offset, 0.0])?);
    }
    Ok(curves)
}

/// The level curve at `p`; on a torus with several components, the first in
/// grid order.
pub fn extract_level_curve(state: &EquilibriumState, p: f64) -> Result<LevelCurve> {
    extract_level_curves(state, p)?.into_iter().next().ok_or(Error::NoCurve { p })
}

fn decorate(state: &EquilibriumState, p: f64, level: f64, points: Vec<Point>, closure_shift: Point) -> Result<LevelCurve> {
    let h = state.grid().spacing();
    let merge = 1e-8 * h[0].min(h[1]);
    let mut vertices: Vec<Point> = Vec::with_capacity(points.len());
    for x in points {
        if vertices.last().map_or(true, |&v| norm(sub(x, v)) > merge) {
            vertices.push(x);
        }
    }
    while vertices.len() > 1 && norm(sub(add(vertices[0], closure_shift), *vertices.last().unwrap())) <= merge {
        vertices.pop();
    }
    if vertices.len() < MIN_VERTICES {
        return Err(Error::Resolution { p, vertices: vertices.len(), required: MIN_VERTICES });
    }
    let spec = state.spec();
    let t = state.time();
    let dpdu = state.density_of_states_at(level)?;
    let mut tau_inv = Vec::with_capacity(vertices.len());
    let mut grad_pi_norm = Vec::with_capacity(vertices.len());
    let mut normal = Vec::with_capacity(vertices.len());
    for &x in &vertices {
        let g = spec.grad_w(x, t);
        let gn = norm(g);
        let gp = dpdu * gn;
        if !(gp >= 1e-12) {
            return Err(Error::DegenerateNormal { x1: x[0], x2: x[1], norm: gp });
        }
        tau_inv.push(spec.inverse_volume(x, t)?);
        grad_pi_norm.push(gp);
        normal.push(scale(g, 1.0 / gn));
    }
    Ok(LevelCurve::from_parts(p, t, level, vertices, tau_inv, grad_pi_norm, normal, closure_shift))
}
