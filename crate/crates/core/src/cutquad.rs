//! Quadrature over cut volumes, interface chords and fitted boundary facets.
//!
//! Volume rules use the 3-point edge-midpoint rule (exact for quadratics);
//! cut polygons are fan-split into sub-triangles first. Line rules are 2-point
//! Gauss (exact for cubics). These degrees cover every integrand assembled by
//! the solver; smooth data terms are integrated with the same rules.

use crate::geom::{clip_polygon_negative, polygon_area, AffineFunc, Vec2};
use crate::levelset::{InterfaceSegment, LevelSet};
use crate::mesh::BackgroundMesh;
use crate::Error;

/// Points and positive weights realizing an area or length measure.
#[derive(Clone, Debug, Default)]
pub struct QuadratureRule {
    pub points: Vec<Vec2>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, mut f: impl FnMut(Vec2) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(&p, &w)| w * f(p)).sum()
    }

    fn push_triangle(&mut self, a: Vec2, b: Vec2, c: Vec2) {
        let area = crate::geom::triangle_area(a, b, c);
        if area <= 0.0 {
            return;
        }
        let w = area / 3.0;
        self.points.push((a + b) * 0.5);
        self.points.push((b + c) * 0.5);
        self.points.push((c + a) * 0.5);
        self.weights.push(w);
        self.weights.push(w);
        self.weights.push(w);
    }
}

/// Midpoint-edge rule on a single triangle.
pub fn triangle_rule(a: Vec2, b: Vec2, c: Vec2) -> QuadratureRule {
    let mut rule = QuadratureRule::default();
    rule.push_triangle(a, b, c);
    rule
}

/// Rule on a convex polygon, fan-split from vertex `anchor`.
pub fn polygon_rule_from(poly: &[Vec2], anchor: usize) -> QuadratureRule {
    let mut rule = QuadratureRule::default();
    if poly.len() < 3 {
        return rule;
    }
    let n = poly.len();
    let a = poly[anchor % n];
    for k in 1..n - 1 {
        let b = poly[(anchor + k) % n];
        let c = poly[(anchor + k + 1) % n];
        rule.push_triangle(a, b, c);
    }
    rule
}

/// Rule on a convex polygon, fan-split from its first vertex.
pub fn polygon_rule(poly: &[Vec2]) -> QuadratureRule {
    polygon_rule_from(poly, 0)
}

/// Volume rule over T cap {phi < 0} for an inside or cut element.
pub fn cut_volume_rule(
    mesh: &BackgroundMesh,
    phi: &LevelSet,
    element: usize,
) -> Result<QuadratureRule, Error> {
    let tri = mesh.triangle(element);
    let verts = mesh.triangle_vertices(element);
    let h = mesh.h();
    let eps = 1e-10 * h;
    let snap = |v: f64| if v.abs() < eps { -eps } else { v };
    let vals =
        [snap(phi.values[tri[0]]), snap(phi.values[tri[1]]), snap(phi.values[tri[2]])];
    if vals.iter().all(|&v| v > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "element {element} lies outside the domain"
        )));
    }
    if vals.iter().all(|&v| v < 0.0) {
        return Ok(triangle_rule(verts[0], verts[1], verts[2]));
    }
    let aff = AffineFunc::from_triangle(verts, vals);
    let poly = clip_polygon_negative(&verts, &aff);
    if polygon_area(&poly) <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "element {element} lies outside the domain"
        )));
    }
    Ok(polygon_rule(&poly))
}

/// Quadrature over T cap Omega for an active element of a cut geometry.
pub fn element_volume_rule(
    mesh: &BackgroundMesh,
    geom: &crate::levelset::CutGeometry,
    element: usize,
) -> QuadratureRule {
    match geom.volume_polygon(element) {
        Some(poly) => polygon_rule(poly),
        None => {
            let [a, b, c] = mesh.triangle_vertices(element);
            triangle_rule(a, b, c)
        }
    }
}

/// 2-point Gauss rule on the segment [a, b].
pub fn segment_gauss2(a: Vec2, b: Vec2) -> QuadratureRule {
    let mid = (a + b) * 0.5;
    let half = (b - a) * 0.5;
    let s = 1.0 / 3.0f64.sqrt();
    let w = a.dist(b) * 0.5;
    QuadratureRule { points: vec![mid - half * s, mid + half * s], weights: vec![w, w] }
}

/// Rule on an interface chord.
pub fn interface_rule(segment: &InterfaceSegment) -> Result<QuadratureRule, Error> {
    if segment.length <= 0.0 {
        return Err(Error::InvalidArgument("zero-length interface segment".into()));
    }
    Ok(segment_gauss2(segment.a, segment.b))
}

/// Rule on a boundary facet of the box.
pub fn fitted_facet_rule(mesh: &BackgroundMesh, face: usize) -> Result<QuadratureRule, Error> {
    let f = mesh
        .faces()
        .get(face)
        .ok_or_else(|| Error::InvalidArgument(format!("no face {face}")))?;
    if !f.is_boundary() {
        return Err(Error::InvalidArgument(format!("face {face} is interior")));
    }
    Ok(segment_gauss2(mesh.vertex(f.vertices[0]), mesh.vertex(f.vertices[1])))
}
