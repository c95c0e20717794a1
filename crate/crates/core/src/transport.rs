//! Level-set advection along a frozen velocity: Crank-Nicolson steps of the
//! linear transport equation on the whole box, stabilized by an interior
//! penalty on gradient jumps over all interior faces, plus the horizon
//! estimate derived from the predicted Lagrangian decrease.

use crate::levelset::LevelSet;
use crate::linsolve::{solve_bicgstab, CooMatrix, CsrMatrix};
use crate::mesh::BackgroundMesh;
use crate::shapegrad::VelocityField;
use crate::Error;

/// Parameters of one transport horizon.
#[derive(Clone, Copy, Debug)]
pub struct TransportParams {
    /// Damping of the predicted decrease, in [0, 1).
    pub alpha: f64,
    /// Crank-Nicolson steps per horizon.
    pub steps: usize,
    /// Interior-penalty weight.
    pub gamma_2: f64,
    /// Horizon cap as a multiple of h / |beta|_inf.
    pub cfl_factor: f64,
    pub solver_tol: f64,
}

impl Default for TransportParams {
    fn default() -> Self {
        TransportParams { alpha: 0.5, steps: 3, gamma_2: 1.0, cfl_factor: 2.0, solver_tol: 1e-10 }
    }
}

impl TransportParams {
    pub fn validate(&self) -> Result<(), Error> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must be in [0,1), got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("at least one time step is required".into()));
        }
        if self.gamma_2 <= 0.0 {
            return Err(Error::InvalidArgument(format!("gamma_2 must be positive, got {}", self.gamma_2)));
        }
        Ok(())
    }
}

/// Horizon T = (alpha - 1) L / dL from the first-order decrease model,
/// capped at `t_cap`.
pub fn estimate_horizon(l_val: f64, dl: f64, alpha: f64, t_cap: f64) -> Result<f64, Error> {
    if dl >= 0.0 {
        return Err(Error::NonDescent(dl));
    }
    if l_val <= 0.0 {
        return Err(Error::DegenerateObjective(l_val));
    }
    Ok(((alpha - 1.0) * l_val / dl).min(t_cap))
}

/// Mass matrix over the whole box.
fn mass_matrix(mesh: &BackgroundMesh) -> CooMatrix {
    let mut coo = CooMatrix::new(mesh.num_vertices());
    for e in 0..mesh.num_triangles() {
        let tri = mesh.triangle(e);
        let [a, b, c] = mesh.triangle_vertices(e);
        let rule = crate::cutquad::triangle_rule(a, b, c);
        for (&qp, &w) in rule.points.iter().zip(&rule.weights) {
            let lambda = mesh.barycentric(e, qp);
            for i in 0..3 {
                for j in 0..3 {
                    coo.push(tri[i], tri[j], w * lambda[i] * lambda[j]);
                }
            }
        }
    }
    coo
}

/// Convection (beta . grad phi_j, phi_i) plus the gradient-jump penalty
/// gamma_2 h^2 over all interior faces of the background mesh.
fn transport_operator(mesh: &BackgroundMesh, beta: &VelocityField, gamma_2: f64) -> CooMatrix {
    let mut coo = CooMatrix::new(mesh.num_vertices());
    for e in 0..mesh.num_triangles() {
        let tri = mesh.triangle(e);
        let grads = mesh.hat_gradients(e);
        let [a, b, c] = mesh.triangle_vertices(e);
        let rule = crate::cutquad::triangle_rule(a, b, c);
        for (&qp, &w) in rule.points.iter().zip(&rule.weights) {
            let lambda = mesh.barycentric(e, qp);
            let beta_qp = beta.values[tri[0]] * lambda[0]
                + beta.values[tri[1]] * lambda[1]
                + beta.values[tri[2]] * lambda[2];
            for i in 0..3 {
                for j in 0..3 {
                    coo.push(tri[i], tri[j], w * lambda[i] * beta_qp.dot(grads[j]));
                }
            }
        }
    }

    let h = mesh.h();
    let scale_h2 = gamma_2 * h * h;
    for face in mesh.faces() {
        let Some(right) = face.right else { continue };
        let a = mesh.vertex(face.vertices[0]);
        let b = mesh.vertex(face.vertices[1]);
        let len = a.dist(b);
        let n = crate::geom::Vec2::new(b.y - a.y, a.x - b.x) / len;
        let mut dofs: Vec<usize> = Vec::with_capacity(4);
        let mut jumps: Vec<f64> = Vec::with_capacity(4);
        for (e, sign) in [(face.left, 1.0), (right, -1.0)] {
            let tri = mesh.triangle(e);
            let grads = mesh.hat_gradients(e);
            for (v, g) in tri.into_iter().zip(grads) {
                match dofs.iter().position(|&d| d == v) {
                    Some(k) => jumps[k] += sign * n.dot(g),
                    None => {
                        dofs.push(v);
                        jumps.push(sign * n.dot(g));
                    }
                }
            }
        }
        let scale = scale_h2 * len;
        for (i, &di) in dofs.iter().enumerate() {
            for (j, &dj) in dofs.iter().enumerate() {
                coo.push(di, dj, scale * jumps[i] * jumps[j]);
            }
        }
    }
    coo
}

/// The two Crank-Nicolson step matrices M +- (k/2)(C + r_h).
pub(crate) fn step_matrices(
    mesh: &BackgroundMesh,
    beta: &VelocityField,
    k: f64,
    gamma_2: f64,
) -> (CsrMatrix, CsrMatrix) {
    let mass = mass_matrix(mesh).finalize();
    let op = transport_operator(mesh, beta, gamma_2).finalize();
    let plus = mass.add_scaled(&op, 0.5 * k);
    let minus = mass.add_scaled(&op, -0.5 * k);
    (plus, minus)
}

/// Advects `phi` along the frozen `beta` for time `T` with N Crank-Nicolson
/// steps. No boundary condition is imposed: the velocity vanishes on the box
/// boundary, so there is no inflow.
pub fn advect(
    mesh: &BackgroundMesh,
    phi: &LevelSet,
    beta: &VelocityField,
    t_horizon: f64,
    params: &TransportParams,
) -> Result<LevelSet, Error> {
    params.validate()?;
    if t_horizon.is_nan() || t_horizon <= 0.0 {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_horizon}")));
    }
    if beta.max_norm() == 0.0 {
        return Ok(phi.clone());
    }
    let k = t_horizon / params.steps as f64;
    let (plus, minus) = step_matrices(mesh, beta, k, params.gamma_2);
    let n = mesh.num_vertices();
    let mut current = phi.values.clone();
    let mut rhs = vec![0.0; n];
    let max_iter = 40 * n.max(100);
    for _ in 0..params.steps {
        minus.matvec(&current, &mut rhs);
        let (next, _) = solve_bicgstab(&plus, &rhs, &current, params.solver_tol, max_iter)?;
        current = next;
    }
    Ok(LevelSet { values: current, h: phi.h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use crate::levelset::{classify, sample_to_nodes, AnalyticField};
    use crate::mesh::build_background_mesh;

    fn constant_velocity(mesh: &BackgroundMesh, v: Vec2) -> VelocityField {
        VelocityField { values: vec![v; mesh.num_vertices()], b_norm: f64::NAN }
    }

    #[test]
    fn horizon_formula() {
        assert!((estimate_horizon(2.0, -4.0, 0.5, 10.0).unwrap() - 0.25).abs() < 1e-15);
        // alpha = 0: full predicted-decrease step
        assert!((estimate_horizon(2.0, -4.0, 0.0, 10.0).unwrap() - 0.5).abs() < 1e-15);
        // tiny slope: capped
        assert_eq!(estimate_horizon(1.0, -1e-9, 0.5, 0.125).unwrap(), 0.125);
        assert!(matches!(estimate_horizon(1.0, 0.5, 0.5, 1.0), Err(Error::NonDescent(_))));
        assert!(matches!(estimate_horizon(-1.0, -0.5, 0.5, 1.0), Err(Error::DegenerateObjective(_))));
    }

    #[test]
    fn zero_velocity_is_identity() {
        let mesh = build_background_mesh(8).unwrap();
        let phi = LevelSet {
            values: mesh.vertices().iter().map(|p| p.x - 0.4).collect(),
            h: mesh.h(),
        };
        let beta = constant_velocity(&mesh, Vec2::ZERO);
        let out = advect(&mesh, &phi, &beta, 0.5, &TransportParams::default()).unwrap();
        assert_eq!(out.values, phi.values);
    }

    #[test]
    fn constant_advection_translates_the_zero_crossing() {
        let mesh = build_background_mesh(64).unwrap();
        let x0 = 0.4;
        let phi = LevelSet {
            values: mesh.vertices().iter().map(|p| p.x - x0).collect(),
            h: mesh.h(),
        };
        let c = 0.3;
        let t = 0.5;
        let beta = constant_velocity(&mesh, Vec2::new(c, 0.0));
        let out = advect(&mesh, &phi, &beta, t, &TransportParams::default()).unwrap();
        let h = mesh.h();
        let k = t / 3.0;
        let tol = 10.0 * (k * k + h * h);
        // affine data stays affine: check the nodal shift directly
        for (p, (&before, &after)) in
            mesh.vertices().iter().zip(phi.values.iter().zip(&out.values))
        {
            assert!(
                (after - (before - c * t)).abs() <= tol,
                "drift at ({}, {}): {} vs {}",
                p.x,
                p.y,
                after,
                before - c * t
            );
        }
        // and the zero crossing lands at x0 + cT
        let geom = classify(&mesh, &out).unwrap();
        for seg in &geom.segments {
            for q in [seg.a, seg.b] {
                assert!((q.x - (x0 + c * t)).abs() <= tol);
            }
        }
    }

    #[test]
    fn linear_invariant_is_conserved() {
        // with w = 1 admissible and r_h(., 1) = 0, each step conserves
        // int phi up to the convection flux of the midpoint state
        let mesh = build_background_mesh(32).unwrap();
        let field = AnalyticField::new(|p| (p - Vec2::new(0.5, 0.5)).norm() - 0.3);
        let phi = sample_to_nodes(&field, &mesh).unwrap();
        let beta = constant_velocity(&mesh, Vec2::new(0.2, -0.1));
        let params = TransportParams { steps: 1, ..TransportParams::default() };
        let t = 0.05;
        let out = advect(&mesh, &phi, &beta, t, &params).unwrap();

        let integral = |values: &[f64]| -> f64 {
            let mut acc = 0.0;
            for e in 0..mesh.num_triangles() {
                let [a, b, c] = mesh.triangle_vertices(e);
                let rule = crate::cutquad::triangle_rule(a, b, c);
                acc += rule.integrate(|qp| mesh.eval_p1(e, values, qp));
            }
            acc
        };
        let mid: Vec<f64> =
            phi.values.iter().zip(&out.values).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut flux = 0.0;
        for e in 0..mesh.num_triangles() {
            let [a, b, c] = mesh.triangle_vertices(e);
            let rule = crate::cutquad::triangle_rule(a, b, c);
            let grad = mesh.grad_p1(e, &mid);
            flux += rule.total_weight() * Vec2::new(0.2, -0.1).dot(grad);
        }
        let lhs = integral(&out.values);
        let rhs = integral(&phi.values) - t * flux;
        assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
    }

    #[test]
    fn stabilizer_ignores_global_linears() {
        let mesh = build_background_mesh(16).unwrap();
        let beta = constant_velocity(&mesh, Vec2::ZERO);
        let r = transport_operator(&mesh, &beta, 1.0).finalize();
        let v: Vec<f64> = mesh.vertices().iter().map(|p| 3.0 * p.x - 2.0 * p.y + 0.7).collect();
        let mut rv = vec![0.0; v.len()];
        r.matvec(&v, &mut rv);
        let energy: f64 = v.iter().zip(&rv).map(|(a, b)| a * b).sum();
        assert!(energy.abs() <= 1e-12 * r.max_abs().max(1.0));
    }

    #[test]
    fn step_matrix_tends_to_mass_matrix() {
        let mesh = build_background_mesh(8).unwrap();
        let beta = constant_velocity(&mesh, Vec2::new(1.0, 0.5));
        let k = 1e-6;
        let (plus, _) = step_matrices(&mesh, &beta, k, 1.0);
        let mass = mass_matrix(&mesh).finalize();
        let mut worst: f64 = 0.0;
        for r in 0..plus.dim() {
            for (c, v) in plus.row(r) {
                worst = worst.max((v - mass.get(r, c)).abs());
            }
        }
        assert!(worst <= 10.0 * k, "operator distance {worst} vs k = {k}");
    }

    #[test]
    fn advection_is_approximately_reversible() {
        let mesh = build_background_mesh(48).unwrap();
        let field = AnalyticField::new(|p| (p - Vec2::new(0.5, 0.5)).norm() - 0.25);
        let phi = sample_to_nodes(&field, &mesh).unwrap();
        let pi = std::f64::consts::PI;
        let beta = VelocityField {
            values: mesh
                .vertices()
                .iter()
                .map(|p| {
                    Vec2::new((pi * p.x).sin() * (pi * p.y).sin(), (pi * p.x).sin() * (pi * p.y).cos())
                        * 0.5
                })
                .collect(),
            b_norm: f64::NAN,
        };
        let minus = VelocityField {
            values: beta.values.iter().map(|&v| -v).collect(),
            b_norm: f64::NAN,
        };
        let params = TransportParams::default();
        let t = 0.05;
        let forward = advect(&mesh, &phi, &beta, t, &params).unwrap();
        let back = advect(&mesh, &forward, &minus, t, &params).unwrap();
        let h = mesh.h();
        let k = t / 3.0;
        let tol = 10.0 * (k * k + h * h);
        // compare near the zero set
        for (v, (&a, &b)) in mesh.vertices().iter().zip(phi.values.iter().zip(&back.values)) {
            if a.abs() < 2.0 * h {
                assert!((a - b).abs() <= tol, "reversibility at ({}, {}): {a} vs {b}", v.x, v.y);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mesh = build_background_mesh(4).unwrap();
        let phi = LevelSet { values: vec![-1.0; mesh.num_vertices()], h: mesh.h() };
        let beta = constant_velocity(&mesh, Vec2::new(1.0, 0.0));
        let bad = TransportParams { alpha: 1.5, ..TransportParams::default() };
        assert!(advect(&mesh, &phi, &beta, 1.0, &bad).is_err());
        assert!(advect(&mesh, &phi, &beta, 0.0, &TransportParams::default()).is_err());
    }
}
