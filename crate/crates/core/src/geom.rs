//! Small fixed-size vector helpers. One-dimensional problems use the first
//! coordinate and keep the second at zero.

pub type Point = [f64; 2];

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Point, c: f64) -> Point {
    [a[0] * c, a[1] * c]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Quarter turn counter-clockwise. Maps an outward normal to the tangent of
/// a counter-clockwise traversal.
#[inline]
pub fn perp(a: Point) -> Point {
    [-a[1], a[0]]
}

pub fn lerp(a: Point, b: Point, s: f64) -> Point {
    [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
}

/// Proper intersection test for the closed segments `p1p2` and `q1q2`.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(sub(q2, q1), sub(p1, q1));
    let d2 = cross(sub(q2, q1), sub(p2, q1));
    let d3 = cross(sub(p2, p1), sub(q1, p1));
    let d4 = cross(sub(p2, p1), sub(q2, p1));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on_segment = |a: Point, b: Point, c: Point| {
        c[0] >= a[0].min(b[0]) && c[0] <= a[0].max(b[0]) && c[1] >= a[1].min(b[1]) && c[1] <= a[1].max(b[1])
    };
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Area and centroid of a simple polygon (shoelace formula).
pub fn polygon_area_centroid(poly: &[Point]) -> (f64, Point) {
    let n = poly.len();
    if n < 3 {
        return (0.0, poly.first().copied().unwrap_or([0.0, 0.0]));
    }
    // Shift to the first vertex to limit cancellation on small polygons.
    let o = poly[0];
    let mut area2 = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let a = sub(poly[i], o);
        let b = sub(poly[(i + 1) % n], o);
        let c = cross(a, b);
        area2 += c;
        cx += (a[0] + b[0]) * c;
        cy += (a[1] + b[1]) * c;
    }
    if area2 == 0.0 {
        return (0.0, o);
    }
    let area = 0.5 * area2;
    (area.abs(), [o[0] + cx / (3.0 * area2), o[1] + cy / (3.0 * area2)])
}
