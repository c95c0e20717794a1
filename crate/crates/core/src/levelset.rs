//! Level-set representation of the free boundary: P1 signed-distance fields,
//! element classification into inside/cut/outside, extraction of the zero
//! isocontour as a per-element chord polyline, CSG combination of analytic
//! fields, and reinitialization of the distance property by sweeping.
//!
//! Sign convention: phi < 0 inside the physical domain, phi > 0 outside.

use crate::geom::{
    clip_polygon_negative, clip_segment_negative, point_segment_distance, polygon_area,
    AffineFunc, Vec2,
};
use crate::mesh::BackgroundMesh;
use crate::Error;

/// Nodal P1 scalar field on the background mesh whose zero set is the boundary.
#[derive(Clone, Debug)]
pub struct LevelSet {
    pub values: Vec<f64>,
    pub h: f64,
}

/// Analytic scalar field used to seed level sets.
pub struct AnalyticField(Box<dyn Fn(Vec2) -> f64 + Send + Sync>);

impl AnalyticField {
    pub fn new(f: impl Fn(Vec2) -> f64 + Send + Sync + 'static) -> Self {
        AnalyticField(Box::new(f))
    }

    pub fn eval(&self, p: Vec2) -> f64 {
        (self.0)(p)
    }
}

/// Which side of a circle is the physical (phi < 0) side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    InteriorNegative,
    ExteriorNegative,
}

/// Signed distance to a circle, oriented so the requested side is negative.
pub fn signed_distance_circle(
    center: Vec2,
    radius: f64,
    orientation: Orientation,
) -> Result<AnalyticField, Error> {
    if radius <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "circle radius must be positive, got {radius}"
        )));
    }
    Ok(AnalyticField::new(move |p| {
        let d = p.dist(center) - radius;
        match orientation {
            Orientation::InteriorNegative => d,
            Orientation::ExteriorNegative => -d,
        }
    }))
}

/// Pointwise combination of fields: MIN unions the negative regions,
/// MAX intersects them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsgOp {
    Min,
    Max,
}

pub fn csg_union_intersect(fields: Vec<AnalyticField>, op: CsgOp) -> Result<AnalyticField, Error> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument("csg combination of zero fields".into()));
    }
    Ok(AnalyticField::new(move |p| {
        let mut acc = fields[0].eval(p);
        for f in &fields[1..] {
            let v = f.eval(p);
            acc = match op {
                CsgOp::Min => acc.min(v),
                CsgOp::Max => acc.max(v),
            };
        }
        acc
    }))
}

/// Nodal interpolation of an analytic field.
pub fn sample_to_nodes(field: &AnalyticField, mesh: &BackgroundMesh) -> Result<LevelSet, Error> {
    let mut values = Vec::with_capacity(mesh.num_vertices());
    for &v in mesh.vertices() {
        let val = field.eval(v);
        if !val.is_finite() {
            return Err(Error::Numeric(format!(
                "level set sample is not finite at ({}, {})",
                v.x, v.y
            )));
        }
        values.push(val);
    }
    Ok(LevelSet { values, h: mesh.h() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementClass {
    Inside,
    Cut,
    Outside,
}

/// Whether an interface segment belongs to the evolving free boundary or to a
/// static fixed boundary carried by a second level set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    Free,
    Fixed,
}

/// One straight chord of the zero isocontour inside a cut element.
#[derive(Clone, Copy, Debug)]
pub struct InterfaceSegment {
    pub a: Vec2,
    pub b: Vec2,
    pub element: usize,
    /// Unit normal pointing from phi < 0 to phi > 0.
    pub normal: Vec2,
    pub length: f64,
    pub kind: BoundaryKind,
}

/// Part of a boundary facet of the box covered by the physical domain.
#[derive(Clone, Copy, Debug)]
pub struct FittedFacet {
    pub a: Vec2,
    pub b: Vec2,
    pub face: usize,
    pub element: usize,
    /// Outward unit normal of the box.
    pub normal: Vec2,
    pub length: f64,
}

/// Element classification, active set, ghost faces and interface chords for a
/// level-set domain, optionally intersected with a static fixed boundary field.
#[derive(Clone, Debug)]
pub struct CutGeometry {
    pub classes: Vec<ElementClass>,
    /// Elements whose closure meets the physical domain (inside or cut), sorted.
    pub active: Vec<usize>,
    /// Interior faces of the active mesh with at least one cut neighbor, sorted.
    pub ghost_faces: Vec<usize>,
    pub segments: Vec<InterfaceSegment>,
    /// Portions of the box boundary belonging to the domain closure.
    pub fitted_facets: Vec<FittedFacet>,
    polygon_index: Vec<u32>,
    polygons: Vec<Vec<Vec2>>,
}

impl CutGeometry {
    /// The polygon T cap {phi < 0} for a cut element; `None` means the full
    /// triangle (inside elements).
    pub fn volume_polygon(&self, element: usize) -> Option<&[Vec2]> {
        let idx = self.polygon_index[element];
        if idx == u32::MAX {
            None
        } else {
            Some(&self.polygons[idx as usize])
        }
    }

    pub fn is_active(&self, element: usize) -> bool {
        self.classes[element] != ElementClass::Outside
    }

    /// Mask of vertices incident to at least one active element.
    pub fn active_vertices(&self, mesh: &BackgroundMesh) -> Vec<bool> {
        let mut mask = vec![false; mesh.num_vertices()];
        for &e in &self.active {
            for v in mesh.triangle(e) {
                mask[v] = true;
            }
        }
        mask
    }

    pub fn interface_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn free_segments(&self) -> impl Iterator<Item = &InterfaceSegment> {
        self.segments.iter().filter(|s| s.kind == BoundaryKind::Free)
    }

    pub fn fixed_segments(&self) -> impl Iterator<Item = &InterfaceSegment> {
        self.segments.iter().filter(|s| s.kind == BoundaryKind::Fixed)
    }
}

/// Snapped nodal values on one element: ties at zero count as inside so no
/// element carries a zero-measure cut.
fn snapped(values: &[f64], tri: [usize; 3], h: f64) -> [f64; 3] {
    let eps = 1e-10 * h;
    let snap = |v: f64| if v.abs() < eps { -eps } else { v };
    [snap(values[tri[0]]), snap(values[tri[1]]), snap(values[tri[2]])]
}

fn chord_of(verts: [Vec2; 3], vals: [f64; 3]) -> Option<(Vec2, Vec2)> {
    let mut crossings: Vec<Vec2> = Vec::with_capacity(2);
    for k in 0..3 {
        let l = (k + 1) % 3;
        let (va, vb) = (vals[k], vals[l]);
        if (va < 0.0) != (vb < 0.0) {
            let t = va / (va - vb);
            crossings.push(verts[k] + (verts[l] - verts[k]) * t);
        }
    }
    if crossings.len() == 2 {
        Some((crossings[0], crossings[1]))
    } else {
        None
    }
}

/// Classifies elements against the free level set `phi` alone.
pub fn classify(mesh: &BackgroundMesh, phi: &LevelSet) -> Result<CutGeometry, Error> {
    build_cut_geometry(mesh, phi, None)
}

/// Classifies against `phi` intersected with a static `fixed` boundary field.
/// The physical domain is { phi < 0 } cap { fixed < 0 }.
pub fn build_cut_geometry(
    mesh: &BackgroundMesh,
    phi: &LevelSet,
    fixed: Option<&LevelSet>,
) -> Result<CutGeometry, Error> {
    if phi.values.len() != mesh.num_vertices() {
        return Err(Error::InvalidArgument("level set length does not match mesh".into()));
    }
    let h = mesh.h();
    let area_eps = 1e-14 * h * h;
    let num_elems = mesh.num_triangles();
    let mut classes = vec![ElementClass::Outside; num_elems];
    let mut segments = Vec::new();
    let mut polygon_index = vec![u32::MAX; num_elems];
    let mut polygons = Vec::new();

    for e in 0..num_elems {
        let tri = mesh.triangle(e);
        let verts = mesh.triangle_vertices(e);
        let vals = snapped(&phi.values, tri, h);
        let fixed_vals = fixed.map(|psi| snapped(&psi.values, tri, h));

        if vals.iter().all(|&v| v > 0.0) {
            continue; // outside regardless of the fixed field
        }
        if fixed_vals.is_some_and(|fv| fv.iter().all(|&v| v > 0.0)) {
            continue;
        }
        let phi_cut = vals.iter().any(|&v| v > 0.0);
        let fixed_cut = fixed_vals.is_some_and(|fv| fv.iter().any(|&v| v > 0.0));

        if !phi_cut && !fixed_cut {
            classes[e] = ElementClass::Inside;
            continue;
        }

        // clip the triangle by the negative side of every cutting field
        let phi_aff = AffineFunc::from_triangle(verts, vals);
        let mut poly: Vec<Vec2> = verts.to_vec();
        if phi_cut {
            poly = clip_polygon_negative(&poly, &phi_aff);
        }
        let fixed_aff = fixed_vals.map(|fv| AffineFunc::from_triangle(verts, fv));
        if fixed_cut {
            if let Some(aff) = fixed_aff.as_ref() {
                poly = clip_polygon_negative(&poly, aff);
            }
        }
        if polygon_area(&poly) <= area_eps {
            continue; // nothing physical left in this element
        }
        classes[e] = ElementClass::Cut;
        polygon_index[e] = polygons.len() as u32;
        polygons.push(poly);

        if phi_cut {
            if let Some((a, b)) = chord_of(verts, vals) {
                let kept = match (fixed_cut, fixed_aff.as_ref()) {
                    (true, Some(aff)) => clip_segment_negative(a, b, aff),
                    _ => Some((a, b)),
                };
                if let Some((a, b)) = kept {
                    push_segment(&mut segments, a, b, e, phi_aff.grad, BoundaryKind::Free, h);
                }
            }
        }
        if fixed_cut {
            if let Some(fv) = fixed_vals {
                if let Some((a, b)) = chord_of(verts, fv) {
                    let kept =
                        if phi_cut { clip_segment_negative(a, b, &phi_aff) } else { Some((a, b)) };
                    if let Some((a, b)) = kept {
                        let grad = fixed_aff.as_ref().unwrap().grad;
                        push_segment(&mut segments, a, b, e, grad, BoundaryKind::Fixed, h);
                    }
                }
            }
        }
    }

    let active: Vec<usize> =
        (0..num_elems).filter(|&e| classes[e] != ElementClass::Outside).collect();
    if active.is_empty() {
        return Err(Error::EmptyDomain);
    }

    let mut ghost_faces = Vec::new();
    let mut fitted_facets = Vec::new();
    for (fi, face) in mesh.faces().iter().enumerate() {
        let left = face.left;
        match face.right {
            Some(right) => {
                let both_active =
                    classes[left] != ElementClass::Outside && classes[right] != ElementClass::Outside;
                let any_cut =
                    classes[left] == ElementClass::Cut || classes[right] == ElementClass::Cut;
                if both_active && any_cut {
                    ghost_faces.push(fi);
                }
            }
            None => {
                if classes[left] == ElementClass::Outside {
                    continue;
                }
                // clip the facet to the domain via the nodal values at its endpoints
                let [va, vb] = face.vertices;
                let (mut a, mut b) = (mesh.vertex(va), mesh.vertex(vb));
                let eps = 1e-10 * h;
                let snap = |v: f64| if v.abs() < eps { -eps } else { v };
                fn clip_1d(a: &mut Vec2, b: &mut Vec2, fa: f64, fb: f64) -> bool {
                    if fa > 0.0 && fb > 0.0 {
                        return false;
                    }
                    if fa > 0.0 || fb > 0.0 {
                        let t = fa / (fa - fb);
                        let cross = *a + (*b - *a) * t;
                        if fa > 0.0 {
                            *a = cross;
                        } else {
                            *b = cross;
                        }
                    }
                    true
                }
                let mut kept = clip_1d(&mut a, &mut b, snap(phi.values[va]), snap(phi.values[vb]));
                if let (Some(psi), true) = (fixed, kept) {
                    kept = clip_1d(&mut a, &mut b, snap(psi.values[va]), snap(psi.values[vb]));
                }
                let length = a.dist(b);
                if !kept || length <= 1e-12 * h {
                    continue;
                }
                let mid = (a + b) * 0.5;
                let normal = if mid.y <= 0.0 {
                    Vec2::new(0.0, -1.0)
                } else if mid.y >= 1.0 {
                    Vec2::new(0.0, 1.0)
                } else if mid.x <= 0.0 {
                    Vec2::new(-1.0, 0.0)
                } else {
                    Vec2::new(1.0, 0.0)
                };
                fitted_facets.push(FittedFacet { a, b, face: fi, element: left, normal, length });
            }
        }
    }

    Ok(CutGeometry { classes, active, ghost_faces, segments, fitted_facets, polygon_index, polygons })
}

fn push_segment(
    segments: &mut Vec<InterfaceSegment>,
    a: Vec2,
    b: Vec2,
    element: usize,
    grad: Vec2,
    kind: BoundaryKind,
    h: f64,
) {
    let length = a.dist(b);
    if length <= 1e-12 * h {
        return; // degenerate leftovers of clipping
    }
    segments.push(InterfaceSegment { a, b, element, normal: grad.normalized(), length, kind });
}

/// Restores the signed-distance property of `phi`.
///
/// Interface-adjacent vertices are frozen at their geometric distance to the
/// extracted zero polyline; the remaining vertices are filled by Gauss-Seidel
/// sweeps over the four diagonal orderings of the vertex lattice. Each sweep
/// propagates nearest-segment candidates along mesh edges and keeps the exact
/// point-to-chord distance, so the output carries the distance to the polyline
/// instead of a first-order Eikonal approximation (whose cut-locus error would
/// exceed the tolerances the rest of the crate relies on). `sweeps` counts
/// rounds of the four orderings; the driver default is 4.
pub fn fast_sweep_reinit(
    phi: &LevelSet,
    mesh: &BackgroundMesh,
    sweeps: usize,
) -> Result<LevelSet, Error> {
    let geometry = classify(mesh, phi)?;
    let free: Vec<&InterfaceSegment> = geometry.free_segments().collect();
    if free.is_empty() {
        return Err(Error::EmptyDomain);
    }
    let h = mesh.h();
    let eps = 1e-10 * h;
    let nv = mesh.num_vertices();

    // seed the interface band with the exact polyline distance: vertices of
    // cut elements plus one ring, so near-tangency vertices never inherit a
    // second-best chord from the propagation
    let adjacency = mesh.vertex_adjacency();
    let mut dist = vec![f64::INFINITY; nv];
    let mut generator: Vec<u32> = vec![u32::MAX; nv];
    let mut seed = vec![false; nv];
    for e in 0..mesh.num_triangles() {
        if geometry.classes[e] == ElementClass::Cut {
            for v in mesh.triangle(e) {
                seed[v] = true;
            }
        }
    }
    let band: Vec<usize> = (0..nv).filter(|&v| seed[v]).collect();
    for v in band {
        for &u in &adjacency[v] {
            seed[u] = true;
        }
    }
    for v in 0..nv {
        if !seed[v] {
            continue;
        }
        let p = mesh.vertex(v);
        for (si, seg) in free.iter().enumerate() {
            let d = point_segment_distance(p, seg.a, seg.b);
            if d < dist[v] {
                dist[v] = d;
                generator[v] = si as u32;
            }
        }
    }

    // polyline adjacency: chords of face-adjacent cut elements share an endpoint
    let mut seg_of_element = vec![u32::MAX; mesh.num_triangles()];
    for (si, seg) in free.iter().enumerate() {
        seg_of_element[seg.element] = si as u32;
    }
    let seg_neighbors: Vec<Vec<u32>> = free
        .iter()
        .map(|seg| {
            mesh.element_faces(seg.element)
                .iter()
                .filter_map(|&fi| {
                    let f = mesh.faces()[fi];
                    let other = if f.left == seg.element { f.right? } else { f.left };
                    let s = seg_of_element[other];
                    (s != u32::MAX).then_some(s)
                })
                .collect()
        })
        .collect();

    // descend along the polyline from a candidate chord while the distance improves
    let refine = |p: Vec2, start: u32| -> (f64, u32) {
        let mut best_g = start;
        let mut best_d = point_segment_distance(p, free[start as usize].a, free[start as usize].b);
        let mut guard = 0;
        loop {
            let mut improved = false;
            for &nb in &seg_neighbors[best_g as usize] {
                let seg = free[nb as usize];
                let d = point_segment_distance(p, seg.a, seg.b);
                if d < best_d {
                    best_d = d;
                    best_g = nb;
                    improved = true;
                }
            }
            guard += 1;
            if !improved || guard > free.len() {
                break;
            }
        }
        (best_d, best_g)
    };

    // four diagonal sweep orderings over the vertex lattice
    let keys: Vec<(f64, f64)> = mesh.vertices().iter().map(|p| (p.x + p.y, p.x - p.y)).collect();
    let mut order_main: Vec<usize> = (0..nv).collect();
    order_main
        .sort_by(|&a, &b| keys[a].0.total_cmp(&keys[b].0).then(keys[a].1.total_cmp(&keys[b].1)));
    let mut order_anti: Vec<usize> = (0..nv).collect();
    order_anti
        .sort_by(|&a, &b| keys[a].1.total_cmp(&keys[b].1).then(keys[a].0.total_cmp(&keys[b].0)));

    for _ in 0..sweeps.max(1) {
        for pass in 0..4 {
            let seq: Box<dyn Iterator<Item = usize>> = match pass {
                0 => Box::new(order_main.iter().copied()) as Box<dyn Iterator<Item = usize>>,
                1 => Box::new(order_anti.iter().copied()),
                2 => Box::new(order_main.iter().rev().copied()),
                _ => Box::new(order_anti.iter().rev().copied()),
            };
            for v in seq {
                if seed[v] {
                    continue;
                }
                let p = mesh.vertex(v);
                for &u in &adjacency[v] {
                    let g = generator[u];
                    if g == u32::MAX || g == generator[v] {
                        continue;
                    }
                    let (d, refined) = refine(p, g);
                    if d < dist[v] {
                        dist[v] = d;
                        generator[v] = refined;
                    }
                }
            }
        }
    }

    let mut values = Vec::with_capacity(nv);
    for (&d, &input) in dist.iter().zip(&phi.values) {
        if !d.is_finite() {
            return Err(Error::Numeric("sweeping left an unreachable vertex".into()));
        }
        let sign = if input.abs() < eps || input < 0.0 { -1.0 } else { 1.0 };
        values.push(sign * d);
    }
    Ok(LevelSet { values, h: phi.h })
}
