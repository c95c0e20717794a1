//! Small planar geometry kit shared by the mesh, level-set and quadrature code:
//! 2D vectors, affine scalar functions on triangles, convex polygon clipping
//! against half-planes, and point/segment distances.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// A point or vector in the plane. All geometry in the crate is binary64.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the cross product, twice the signed area of (0, self, other).
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        Vec2::new(self.x / n, self.y / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, s: f64) -> Vec2 {
        Vec2::new(self.x / s, self.y / s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Signed area of the triangle (a, b, c); positive when counter-clockwise.
pub fn triangle_area(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    0.5 * (b - a).cross(c - a)
}

/// Area of a simple polygon given by its vertices in order (shoelace formula).
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        twice += a.cross(b);
    }
    0.5 * twice
}

/// Euclidean distance from `p` to the closed segment [a, b].
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Affine scalar function f(x) = grad . x + offset. Used for P1 fields
/// restricted to a single element.
#[derive(Clone, Copy, Debug)]
pub struct AffineFunc {
    pub grad: Vec2,
    pub offset: f64,
}

impl AffineFunc {
    /// Reconstructs the affine function taking `vals[k]` at `verts[k]`.
    pub fn from_triangle(verts: [Vec2; 3], vals: [f64; 3]) -> AffineFunc {
        let e1 = verts[1] - verts[0];
        let e2 = verts[2] - verts[0];
        let det = e1.cross(e2);
        let d1 = vals[1] - vals[0];
        let d2 = vals[2] - vals[0];
        let grad = Vec2::new((d1 * e2.y - d2 * e1.y) / det, (d2 * e1.x - d1 * e2.x) / det);
        let offset = vals[0] - grad.dot(verts[0]);
        AffineFunc { grad, offset }
    }

    pub fn eval(&self, p: Vec2) -> f64 {
        self.grad.dot(p) + self.offset
    }
}

/// Clips a convex polygon to the half-plane { x : f(x) <= 0 }
/// (Sutherland-Hodgman with crossings by linear interpolation).
pub fn clip_polygon_negative(poly: &[Vec2], f: &AffineFunc) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    if poly.is_empty() {
        return out;
    }
    let vals: Vec<f64> = poly.iter().map(|&p| f.eval(p)).collect();
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        let (pi, pj) = (poly[i], poly[j]);
        let (vi, vj) = (vals[i], vals[j]);
        if vi <= 0.0 {
            out.push(pi);
        }
        if (vi < 0.0 && vj > 0.0) || (vi > 0.0 && vj <= 0.0) {
            let t = vi / (vi - vj);
            out.push(pi + (pj - pi) * t);
        }
    }
    out
}

/// Clips the segment [a, b] to { x : f(x) <= 0 }. Returns None when the whole
/// segment lies strictly on the positive side.
pub fn clip_segment_negative(a: Vec2, b: Vec2, f: &AffineFunc) -> Option<(Vec2, Vec2)> {
    let va = f.eval(a);
    let vb = f.eval(b);
    if va <= 0.0 && vb <= 0.0 {
        return Some((a, b));
    }
    if va > 0.0 && vb > 0.0 {
        return None;
    }
    let t = va / (va - vb);
    let cross = a + (b - a) * t;
    if va <= 0.0 {
        Some((a, cross))
    } else {
        Some((cross, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_reconstruction() {
        let verts = [Vec2::new(0.2, 0.1), Vec2::new(0.9, 0.3), Vec2::new(0.4, 0.8)];
        // f(x, y) = 3x - 2y + 0.5
        let f = |p: Vec2| 3.0 * p.x - 2.0 * p.y + 0.5;
        let vals = [f(verts[0]), f(verts[1]), f(verts[2])];
        let aff = AffineFunc::from_triangle(verts, vals);
        assert!((aff.grad.x - 3.0).abs() < 1e-12);
        assert!((aff.grad.y + 2.0).abs() < 1e-12);
        assert!((aff.eval(Vec2::new(0.33, 0.77)) - f(Vec2::new(0.33, 0.77))).abs() < 1e-12);
    }

    #[test]
    fn clip_triangle_half() {
        // unit right triangle cut by x <= 0.5: kept part is a trapezoid of area 0.375
        let tri = [Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
        let f = AffineFunc { grad: Vec2::new(1.0, 0.0), offset: -0.5 };
        let clipped = clip_polygon_negative(&tri, &f);
        assert_eq!(clipped.len(), 4);
        assert!((polygon_area(&clipped) - 0.375).abs() < 1e-14);
    }

    #[test]
    fn clip_keeps_all_or_nothing() {
        let tri = [Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
        let keep = AffineFunc { grad: Vec2::ZERO, offset: -1.0 };
        assert_eq!(clip_polygon_negative(&tri, &keep).len(), 3);
        let drop = AffineFunc { grad: Vec2::ZERO, offset: 1.0 };
        assert!(clip_polygon_negative(&tri, &drop).is_empty());
    }

    #[test]
    fn segment_distance_cases() {
        let a = Vec2::new(0.0, 0.0);
        let b = Vec2::new(1.0, 0.0);
        assert!((point_segment_distance(Vec2::new(0.5, 0.3), a, b) - 0.3).abs() < 1e-15);
        assert!((point_segment_distance(Vec2::new(-0.4, 0.3), a, b) - 0.5).abs() < 1e-15);
        assert!((point_segment_distance(Vec2::new(1.3, -0.4), a, b) - 0.5).abs() < 1e-15);
    }
}
