//! Fixed quasi-uniform background triangulation of the unit square.
//!
//! The generator splits an n x n grid of cells criss-cross style, four
//! triangles per cell joined at the cell center, which keeps interface cuts
//! free of mesh-direction bias. Vertex numbering is deterministic: row-major
//! grid nodes first, then row-major cell centers.

use crate::geom::{triangle_area, Vec2};
use crate::Error;

/// A mesh edge with its incident elements. `right` is `None` on the boundary
/// of the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub vertices: [usize; 2],
    pub left: usize,
    pub right: Option<usize>,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.right.is_none()
    }
}

/// Background triangulation of [0,1]^2. Immutable after construction.
#[derive(Clone, Debug)]
pub struct BackgroundMesh {
    vertices: Vec<Vec2>,
    triangles: Vec<[usize; 3]>,
    faces: Vec<Face>,
    element_faces: Vec<[usize; 3]>,
    cells_per_side: usize,
    h: f64,
}

impl BackgroundMesh {
    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> Vec2 {
        self.vertices[i]
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, e: usize) -> [usize; 3] {
        self.triangles[e]
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Face indices of element `e`, in local edge order (01, 12, 20).
    pub fn element_faces(&self, e: usize) -> [usize; 3] {
        self.element_faces[e]
    }

    /// Representative mesh size: the longest edge (the cell side 1/n).
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn triangle_vertices(&self, e: usize) -> [Vec2; 3] {
        let t = self.triangles[e];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn triangle_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(e);
        triangle_area(a, b, c)
    }

    /// Gradients of the three P1 hat functions on element `e` (constant there).
    pub fn hat_gradients(&self, e: usize) -> [Vec2; 3] {
        let [a, b, c] = self.triangle_vertices(e);
        let inv_twice_area = 1.0 / (2.0 * triangle_area(a, b, c));
        // grad of hat_k is the inward normal of the opposite edge scaled by 1/(2A)
        [
            Vec2::new(b.y - c.y, c.x - b.x) * inv_twice_area,
            Vec2::new(c.y - a.y, a.x - c.x) * inv_twice_area,
            Vec2::new(a.y - b.y, b.x - a.x) * inv_twice_area,
        ]
    }

    /// Barycentric coordinates of `p` with respect to element `e`.
    pub fn barycentric(&self, e: usize, p: Vec2) -> [f64; 3] {
        let [a, b, c] = self.triangle_vertices(e);
        let total = triangle_area(a, b, c);
        [
            triangle_area(p, b, c) / total,
            triangle_area(a, p, c) / total,
            triangle_area(a, b, p) / total,
        ]
    }

    /// Evaluates the P1 interpolant of nodal `values` at `p` inside element `e`.
    pub fn eval_p1(&self, e: usize, values: &[f64], p: Vec2) -> f64 {
        let t = self.triangles[e];
        let lambda = self.barycentric(e, p);
        lambda[0] * values[t[0]] + lambda[1] * values[t[1]] + lambda[2] * values[t[2]]
    }

    /// Gradient of the P1 interpolant of nodal `values` on element `e`.
    pub fn grad_p1(&self, e: usize, values: &[f64]) -> Vec2 {
        let t = self.triangles[e];
        let g = self.hat_gradients(e);
        g[0] * values[t[0]] + g[1] * values[t[1]] + g[2] * values[t[2]]
    }

    /// Locates the element containing `x` and its barycentric coordinates.
    pub fn locate_point(&self, x: Vec2) -> Result<(usize, [f64; 3]), Error> {
        let tol = 1e-12;
        if !(x.x >= -tol && x.x <= 1.0 + tol && x.y >= -tol && x.y <= 1.0 + tol) {
            return Err(Error::OutOfDomain { x: x.x, y: x.y });
        }
        let n = self.cells_per_side;
        let ci = ((x.x * n as f64).floor() as isize).clamp(0, n as isize - 1) as usize;
        let cj = ((x.y * n as f64).floor() as isize).clamp(0, n as isize - 1) as usize;
        let base = 4 * (cj * n + ci);
        let mut best = (base, [-1.0; 3], f64::NEG_INFINITY);
        for e in base..base + 4 {
            let lambda = self.barycentric(e, x);
            let min_l = lambda[0].min(lambda[1]).min(lambda[2]);
            if min_l > best.2 {
                best = (e, lambda, min_l);
            }
        }
        if best.2 < -1e-9 {
            return Err(Error::OutOfDomain { x: x.x, y: x.y });
        }
        // clamp away the roundoff and renormalize so the coordinates are a partition
        let mut lambda = best.1;
        for l in lambda.iter_mut() {
            if *l < 0.0 {
                *l = 0.0;
            }
        }
        let sum: f64 = lambda.iter().sum();
        for l in lambda.iter_mut() {
            *l /= sum;
        }
        Ok((best.0, lambda))
    }

    /// Undirected vertex adjacency along mesh edges.
    pub fn vertex_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for face in &self.faces {
            let [a, b] = face.vertices;
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }
}

/// Builds the criss-cross background mesh with `n` cells per side.
pub fn build_background_mesh(n: usize) -> Result<BackgroundMesh, Error> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "background mesh needs at least 2 cells per side, got {n}"
        )));
    }
    let np = n + 1;
    let mut vertices = Vec::with_capacity(np * np + n * n);
    for j in 0..np {
        for i in 0..np {
            vertices.push(Vec2::new(i as f64 / n as f64, j as f64 / n as f64));
        }
    }
    for j in 0..n {
        for i in 0..n {
            vertices.push(Vec2::new((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64));
        }
    }

    let mut triangles = Vec::with_capacity(4 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * np + i;
            let v10 = j * np + i + 1;
            let v01 = (j + 1) * np + i;
            let v11 = (j + 1) * np + i + 1;
            let c = np * np + j * n + i;
            triangles.push([v00, v10, c]); // south
            triangles.push([v10, v11, c]); // east
            triangles.push([v11, v01, c]); // north
            triangles.push([v01, v00, c]); // west
        }
    }

    // face table keyed by sorted vertex pair
    let mut face_of: std::collections::HashMap<(usize, usize), usize> =
        std::collections::HashMap::with_capacity(triangles.len() * 2);
    let mut faces: Vec<Face> = Vec::with_capacity(triangles.len() * 2);
    let mut element_faces = vec![[usize::MAX; 3]; triangles.len()];
    for (e, tri) in triangles.iter().enumerate() {
        for (k, (a, b)) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
            .into_iter()
            .enumerate()
        {
            let key = (a.min(b), a.max(b));
            match face_of.get(&key) {
                Some(&fi) => {
                    debug_assert!(faces[fi].right.is_none());
                    faces[fi].right = Some(e);
                    element_faces[e][k] = fi;
                }
                None => {
                    let fi = faces.len();
                    faces.push(Face { vertices: [key.0, key.1], left: e, right: None });
                    face_of.insert(key, fi);
                    element_faces[e][k] = fi;
                }
            }
        }
    }

    Ok(BackgroundMesh {
        vertices,
        triangles,
        faces,
        element_faces,
        cells_per_side: n,
        h: 1.0 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_degenerate_resolution() {
        assert!(matches!(build_background_mesh(1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn counts_for_n2() {
        let mesh = build_background_mesh(2).unwrap();
        assert_eq!(mesh.num_triangles(), 16);
        assert_eq!(mesh.num_vertices(), 13);
        let total: f64 = (0..mesh.num_triangles()).map(|e| mesh.triangle_area(e)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_triangle_has_positive_area() {
        for n in [2, 3, 5, 8] {
            let mesh = build_background_mesh(n).unwrap();
            for e in 0..mesh.num_triangles() {
                assert!(mesh.triangle_area(e) > 0.0);
            }
            let total: f64 = (0..mesh.num_triangles()).map(|e| mesh.triangle_area(e)).sum();
            assert!((total - 1.0).abs() < 1e-12, "area defect at n={n}");
        }
    }

    #[test]
    fn face_counts_for_n4() {
        let mesh = build_background_mesh(4).unwrap();
        let boundary = mesh.faces().iter().filter(|f| f.is_boundary()).count();
        let interior = mesh.faces().iter().filter(|f| !f.is_boundary()).count();
        assert_eq!(boundary, 16);
        // brute-force enumeration: every triangle contributes 3 face slots
        assert_eq!(interior, (3 * mesh.num_triangles() - boundary) / 2);
    }

    #[test]
    fn interior_faces_have_two_distinct_neighbors() {
        let mesh = build_background_mesh(2).unwrap();
        for face in mesh.faces() {
            if let Some(right) = face.right {
                assert_ne!(face.left, right);
            }
        }
    }

    #[test]
    fn neighbor_lookup_is_symmetric() {
        let mesh = build_background_mesh(3).unwrap();
        for (e, _) in mesh.triangles().iter().enumerate() {
            for fi in mesh.element_faces(e) {
                let face = mesh.faces()[fi];
                assert!(face.left == e || face.right == Some(e));
            }
        }
    }

    #[test]
    fn h_halves_when_n_doubles() {
        let h4 = build_background_mesh(4).unwrap().h();
        let h8 = build_background_mesh(8).unwrap().h();
        assert_eq!(h4, 2.0 * h8);
    }

    #[test]
    fn quasi_uniformity_bound() {
        let mesh = build_background_mesh(5).unwrap();
        let mut min_edge = f64::INFINITY;
        let mut max_edge: f64 = 0.0;
        for face in mesh.faces() {
            let len = mesh.vertex(face.vertices[0]).dist(mesh.vertex(face.vertices[1]));
            min_edge = min_edge.min(len);
            max_edge = max_edge.max(len);
        }
        assert!(max_edge / min_edge <= 4.0);
        assert!((max_edge - mesh.h()).abs() < 1e-15);
    }

    #[test]
    fn locates_corner() {
        let mesh = build_background_mesh(2).unwrap();
        let (e, lambda) = mesh.locate_point(Vec2::ZERO).unwrap();
        let tri = mesh.triangle(e);
        let k = (0..3).find(|&k| lambda[k] > 0.999_999).expect("one coordinate = 1");
        assert_eq!(mesh.vertex(tri[k]), Vec2::ZERO);
    }

    #[test]
    fn locates_cell_center() {
        let mesh = build_background_mesh(2).unwrap();
        let p = Vec2::new(0.25, 0.25);
        let (e, lambda) = mesh.locate_point(p).unwrap();
        assert!(e < 4); // one of cell (0,0)'s triangles
        assert!((lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_outside_point() {
        let mesh = build_background_mesh(2).unwrap();
        assert!(matches!(mesh.locate_point(Vec2::new(1.5, 0.2)), Err(Error::OutOfDomain { .. })));
    }

    proptest! {
        #[test]
        fn locate_reconstructs_point(xr in 0.0f64..=1.0, yr in 0.0f64..=1.0) {
            let mesh = build_background_mesh(7).unwrap();
            let p = Vec2::new(xr, yr);
            let (e, lambda) = mesh.locate_point(p).unwrap();
            let verts = mesh.triangle_vertices(e);
            let rec = verts[0] * lambda[0] + verts[1] * lambda[1] + verts[2] * lambda[2];
            prop_assert!(rec.dist(p) < 1e-12);
            prop_assert!((lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(lambda.iter().all(|&l| (0.0..=1.0).contains(&l)));
        }
    }
}
