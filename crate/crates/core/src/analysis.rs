//! Verification instrumentation: mesh-dependent energy norms, convergence
//! studies for the primal, dual and velocity fields, and the boundary-position
//! conditioning sweep.

use crate::cutquad::element_volume_rule;
use crate::fem::{FemField, FemParams, ProblemDefinition};
use crate::geom::{point_segment_distance, Vec2};
use crate::levelset::{classify, sample_to_nodes, signed_distance_circle, CutGeometry, LevelSet, Orientation};
use crate::linsolve::{condition_estimate, ConditionEstimate};
use crate::mesh::{build_background_mesh, BackgroundMesh};
use crate::shapegrad::{assemble_h1_product, assemble_shape_gradient, normalize_velocity, solve_velocity, VelocityField};
use crate::Error;

/// Closed-form or mesh-backed field with a gradient, used as the reference in
/// error computations.
pub struct ExactField<'a> {
    pub value: Box<dyn Fn(Vec2) -> f64 + 'a>,
    pub gradient: Box<dyn Fn(Vec2) -> Vec2 + 'a>,
}

impl<'a> ExactField<'a> {
    /// Wraps a P1 field on a (finer) mesh; evaluation locates the containing
    /// element.
    pub fn from_mesh_field(mesh: &'a BackgroundMesh, values: &'a [f64]) -> ExactField<'a> {
        ExactField {
            value: Box::new(move |p| {
                let (e, _) = mesh.locate_point(p).expect("reference evaluation inside the box");
                mesh.eval_p1(e, values, p)
            }),
            gradient: Box::new(move |p| {
                let (e, _) = mesh.locate_point(p).expect("reference evaluation inside the box");
                mesh.grad_p1(e, values)
            }),
        }
    }
}

/// L^p error, W^1_p seminorm error, and the mesh-dependent energy norm of
/// u_h - exact.
#[derive(Clone, Copy, Debug)]
pub struct NormTriple {
    pub lp: f64,
    pub w1p_semi: f64,
    pub energy: f64,
}

/// Errors of a discrete field against a reference. The energy norm combines
/// the volume gradient, scaled fixed-boundary traces, and ghost-face jumps:
/// |grad v|^p + h |dn v|^p_{Gfix} + h^(1-p) |v|^p_{Gfix} + h sum_F |[dn v]|^p.
pub fn field_errors(
    mesh: &BackgroundMesh,
    geom: &CutGeometry,
    u: &FemField,
    exact: &ExactField,
    p_exp: u32,
) -> Result<NormTriple, Error> {
    if p_exp != 2 && p_exp != 4 {
        return Err(Error::InvalidArgument(format!("unsupported norm exponent {p_exp}")));
    }
    let pe = p_exp as i32;
    let h = mesh.h();

    let mut vol_val = 0.0;
    let mut vol_grad = 0.0;
    for &e in &geom.active {
        let rule = element_volume_rule(mesh, geom, e);
        let gu = u.grad(mesh, e);
        for (&qp, &w) in rule.points.iter().zip(&rule.weights) {
            let dv = u.eval(mesh, e, qp) - (exact.value)(qp);
            let dg = gu - (exact.gradient)(qp);
            vol_val += w * dv.abs().powi(pe);
            vol_grad += w * dg.norm().powi(pe);
        }
    }

    let mut trace_dn = 0.0;
    let mut trace_val = 0.0;
    let mut fixed_sides: Vec<(usize, Vec2, Vec2, Vec2)> = Vec::new();
    for facet in &geom.fitted_facets {
        fixed_sides.push((facet.element, facet.a, facet.b, facet.normal));
    }
    for seg in geom.fixed_segments() {
        fixed_sides.push((seg.element, seg.a, seg.b, seg.normal));
    }
    for (e, a, b, n) in fixed_sides {
        let gu = u.grad(mesh, e);
        let rule = crate::cutquad::segment_gauss2(a, b);
        for (&qp, &w) in rule.points.iter().zip(&rule.weights) {
            let dv = u.eval(mesh, e, qp) - (exact.value)(qp);
            let dn = n.dot(gu - (exact.gradient)(qp));
            trace_dn += w * dn.abs().powi(pe);
            trace_val += w * dv.abs().powi(pe);
        }
    }

    let mut jump = 0.0;
    let nudge = 1e-7 * h;
    for &fi in &geom.ghost_faces {
        let face = mesh.faces()[fi];
        let right = face.right.expect("ghost faces are interior");
        let a = mesh.vertex(face.vertices[0]);
        let b = mesh.vertex(face.vertices[1]);
        let len = a.dist(b);
        let n = Vec2::new(b.y - a.y, a.x - b.x) / len;
        let gl = u.grad(mesh, face.left);
        let gr = u.grad(mesh, right);
        let rule = crate::cutquad::segment_gauss2(a, b);
        for (&qp, &w) in rule.points.iter().zip(&rule.weights) {
            // evaluate the reference gradient strictly inside each element
            let el = (exact.gradient)(qp - n * nudge);
            let er = (exact.gradient)(qp + n * nudge);
            let dj = n.dot(gl - el) - n.dot(gr - er);
            jump += w * dj.abs().powi(pe);
        }
    }

    let inv_p = 1.0 / p_exp as f64;
    let energy =
        (vol_grad + h * trace_dn + h.powi(1 - pe) * trace_val + h * jump).powf(inv_p);
    Ok(NormTriple {
        lp: vol_val.powf(inv_p),
        w1p_semi: vol_grad.powf(inv_p),
        energy,
    })
}

/// H1(box) and L2(box) errors of a coarse nodal vector field against a field
/// on a nested finer mesh, integrated on the fine mesh.
pub fn velocity_errors(
    coarse_mesh: &BackgroundMesh,
    coarse: &VelocityField,
    fine_mesh: &BackgroundMesh,
    fine: &VelocityField,
) -> Result<(f64, f64), Error> {
    if !fine_mesh.cells_per_side().is_multiple_of(coarse_mesh.cells_per_side()) {
        return Err(Error::InvalidArgument(format!(
            "meshes are not nested: {} does not refine {}",
            fine_mesh.cells_per_side(),
            coarse_mesh.cells_per_side()
        )));
    }
    let cx: Vec<f64> = coarse.values.iter().map(|v| v.x).collect();
    let cy: Vec<f64> = coarse.values.iter().map(|v| v.y).collect();
    let fx: Vec<f64> = fine.values.iter().map(|v| v.x).collect();
    let fy: Vec<f64> = fine.values.iter().map(|v| v.y).collect();

    let mut l2_sq = 0.0;
    let mut semi_sq = 0.0;
    for e in 0..fine_mesh.num_triangles() {
        let [a, b, c] = fine_mesh.triangle_vertices(e);
        let centroid = (a + b + c) / 3.0;
        let rule = crate::cutquad::triangle_rule(a, b, c);
        let gfx = fine_mesh.grad_p1(e, &fx);
        let gfy = fine_mesh.grad_p1(e, &fy);
        for (&qp, &w) in rule.points.iter().zip(&rule.weights) {
            // quadrature points sit on fine edges; bias the coarse lookup into
            // the fine element so shared-line gradients resolve consistently
            let lookup = qp + (centroid - qp) * 1e-9;
            let (ce, _) = coarse_mesh.locate_point(lookup)?;
            let vx = coarse_mesh.eval_p1(ce, &cx, qp) - fine_mesh.eval_p1(e, &fx, qp);
            let vy = coarse_mesh.eval_p1(ce, &cy, qp) - fine_mesh.eval_p1(e, &fy, qp);
            l2_sq += w * (vx * vx + vy * vy);
            let dgx = coarse_mesh.grad_p1(ce, &cx) - gfx;
            let dgy = coarse_mesh.grad_p1(ce, &cy) - gfy;
            semi_sq += w * (dgx.norm_sq() + dgy.norm_sq());
        }
    }
    Ok(((l2_sq + semi_sq).sqrt(), l2_sq.sqrt()))
}

/// One resolution row of a convergence study.
#[derive(Clone, Debug)]
pub struct TableRow {
    pub n: usize,
    pub h: f64,
    pub errors: Vec<f64>,
}

/// Errors by norm over a mesh sweep, with observed rates between rows.
#[derive(Clone, Debug)]
pub struct ConvergenceTable {
    pub error_names: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl ConvergenceTable {
    /// rate[i][k] = log2(e_{i-1,k} / e_{i,k}); the first row has none.
    pub fn rates(&self) -> Vec<Vec<Option<f64>>> {
        let mut out = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            if i == 0 {
                out.push(vec![None; row.errors.len()]);
                continue;
            }
            let prev = &self.rows[i - 1];
            out.push(
                row.errors
                    .iter()
                    .zip(&prev.errors)
                    .map(|(e, ep)| Some((ep / e).log2()))
                    .collect(),
            );
        }
        out
    }

    /// Observed rate of column `k` over the final refinement.
    pub fn last_rate(&self, k: usize) -> Option<f64> {
        self.rates().last()?.get(k).copied().flatten()
    }

    pub fn to_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        write!(out, "n,h")?;
        for name in &self.error_names {
            write!(out, ",{name},{name}_rate")?;
        }
        writeln!(out)?;
        let rates = self.rates();
        for (row, rate_row) in self.rows.iter().zip(&rates) {
            write!(out, "{},{}", row.n, row.h)?;
            for (e, r) in row.errors.iter().zip(rate_row) {
                match r {
                    Some(r) => write!(out, ",{e},{r}")?,
                    None => write!(out, ",{e},")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// The reference interface of the first model problem.
pub fn mp1_interface(mesh: &BackgroundMesh) -> Result<LevelSet, Error> {
    let field =
        signed_distance_circle(Vec2::new(0.5, 0.5), 0.25, Orientation::ExteriorNegative)?;
    sample_to_nodes(&field, mesh)
}

/// Primal errors against the known solution on the reference interface,
/// n-sweep with L2, H1-seminorm and energy columns (p = 2).
pub fn primal_convergence(ns: &[usize], params: &FemParams) -> Result<ConvergenceTable, Error> {
    let problem = ProblemDefinition::mp1();
    let mut rows = Vec::new();
    for &n in ns {
        let mesh = build_background_mesh(n)?;
        let phi = mp1_interface(&mesh)?;
        let geom = classify(&mesh, &phi)?;
        let (u, _, _) = crate::fem::solve_primal(&mesh, &geom, &problem, params)?;
        let exact = ExactField {
            value: Box::new(|p| 4.0 * p.dist(Vec2::new(0.5, 0.5)) - 1.0),
            gradient: Box::new(|p| {
                let d = p - Vec2::new(0.5, 0.5);
                d * (4.0 / d.norm())
            }),
        };
        let norms = field_errors(&mesh, &geom, &u, &exact, 2)?;
        rows.push(TableRow { n, h: mesh.h(), errors: vec![norms.lp, norms.w1p_semi, norms.energy] });
    }
    Ok(ConvergenceTable {
        error_names: vec!["l2".into(), "h1_semi".into(), "energy".into()],
        rows,
    })
}

/// Dual errors against a fine-mesh dual reference (both solved on the
/// reference interface).
pub fn dual_convergence(
    ns: &[usize],
    ref_n: usize,
    params: &FemParams,
) -> Result<ConvergenceTable, Error> {
    let problem = ProblemDefinition::mp1();
    let solve_pair = |n: usize| -> Result<(BackgroundMesh, CutGeometry, FemField), Error> {
        let mesh = build_background_mesh(n)?;
        let phi = mp1_interface(&mesh)?;
        let geom = classify(&mesh, &phi)?;
        let (u, matrix, _) = crate::fem::solve_primal(&mesh, &geom, &problem, params)?;
        let (p, _) = crate::fem::solve_dual(&mesh, &geom, &matrix, &u, params)?;
        Ok((mesh, geom, p))
    };
    let (ref_mesh, _, p_ref) = solve_pair(ref_n)?;
    let mut rows = Vec::new();
    for &n in ns {
        let (mesh, geom, p) = solve_pair(n)?;
        let exact = ExactField::from_mesh_field(&ref_mesh, &p_ref.values);
        let norms = field_errors(&mesh, &geom, &p, &exact, 2)?;
        rows.push(TableRow { n, h: mesh.h(), errors: vec![norms.lp, norms.energy] });
    }
    Ok(ConvergenceTable { error_names: vec!["l2".into(), "energy".into()], rows })
}

/// Full-pipeline velocity field on the reference interface.
pub fn mp1_velocity(
    n: usize,
    params: &FemParams,
) -> Result<(BackgroundMesh, VelocityField), Error> {
    let problem = ProblemDefinition::mp1();
    let mesh = build_background_mesh(n)?;
    let phi = mp1_interface(&mesh)?;
    let geom = classify(&mesh, &phi)?;
    let (u, matrix, _) = crate::fem::solve_primal(&mesh, &geom, &problem, params)?;
    let (p, _) = crate::fem::solve_dual(&mesh, &geom, &matrix, &u, params)?;
    let g = assemble_shape_gradient(&mesh, &geom, &problem, &u, &p, Default::default())?;
    let h1 = assemble_h1_product(&mesh);
    let max_iter = params.solver_max_iter_factor * mesh.num_vertices().max(50);
    let (beta_prime, _) = solve_velocity(&h1, &g, params.solver_tol, max_iter)?;
    let beta = normalize_velocity(&beta_prime, 1e-14)?;
    Ok((mesh, beta))
}

/// Discrete-velocity errors against a reference on a finer nested mesh.
pub fn velocity_convergence(
    ns: &[usize],
    ref_n: usize,
    params: &FemParams,
) -> Result<ConvergenceTable, Error> {
    let (ref_mesh, beta_ref) = mp1_velocity(ref_n, params)?;
    let mut rows = Vec::new();
    for &n in ns {
        let (mesh, beta) = mp1_velocity(n, params)?;
        let (h1, l2) = velocity_errors(&mesh, &beta, &ref_mesh, &beta_ref)?;
        rows.push(TableRow { n, h: mesh.h(), errors: vec![h1, l2] });
    }
    Ok(ConvergenceTable { error_names: vec!["h1".into(), "l2".into()], rows })
}

/// Condition numbers of the stiffness block on active vertices as the
/// interface shifts across the background cells.
pub fn conditioning_sweep(
    n: usize,
    offsets: &[f64],
    gamma_d: f64,
    gamma_1: f64,
) -> Result<Vec<(f64, ConditionEstimate)>, Error> {
    let mesh = build_background_mesh(n)?;
    let mut out = Vec::with_capacity(offsets.len());
    for &delta in offsets {
        let field = signed_distance_circle(
            Vec2::new(0.5 + delta, 0.5),
            0.25,
            Orientation::ExteriorNegative,
        )?;
        let phi = sample_to_nodes(&field, &mesh)?;
        let geom = classify(&mesh, &phi)?;
        let matrix = crate::fem::assemble_bilinear(&mesh, &geom, gamma_d, gamma_1)?;
        let active = geom.active_vertices(&mesh);
        let sub = matrix.submatrix(&active);
        out.push((delta, condition_estimate(&sub)?));
    }
    Ok(out)
}

/// Two-sided Hausdorff-type deviation between the free boundary and a circle.
pub fn interface_circle_deviation(geom: &CutGeometry, center: Vec2, radius: f64) -> f64 {
    let mut worst: f64 = 0.0;
    // polyline to circle
    for seg in geom.free_segments() {
        for k in 0..=4 {
            let p = seg.a + (seg.b - seg.a) * (k as f64 / 4.0);
            worst = worst.max((p.dist(center) - radius).abs());
        }
    }
    // circle to polyline
    let segs: Vec<_> = geom.free_segments().collect();
    for k in 0..720 {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / 720.0;
        let p = center + Vec2::new(angle.cos(), angle.sin()) * radius;
        let d = segs
            .iter()
            .map(|s| point_segment_distance(p, s.a, s.b))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(d);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FemParams;

    #[test]
    fn zero_error_for_exact_field() {
        let mesh = build_background_mesh(16).unwrap();
        let phi = mp1_interface(&mesh).unwrap();
        let geom = classify(&mesh, &phi).unwrap();
        // discrete field sampled from an affine function, compared to itself
        let vals: Vec<f64> = mesh.vertices().iter().map(|p| 2.0 * p.x - p.y).collect();
        let u = FemField { values: vals };
        let exact = ExactField {
            value: Box::new(|p| 2.0 * p.x - p.y),
            gradient: Box::new(|_| Vec2::new(2.0, -1.0)),
        };
        let norms = field_errors(&mesh, &geom, &u, &exact, 2).unwrap();
        assert!(norms.lp < 1e-13);
        assert!(norms.w1p_semi < 1e-13);
        assert!(norms.energy < 1e-12);
    }

    #[test]
    fn constant_offset_hits_only_the_trace_penalty() {
        // v - exact = c on a fully fitted square: energy^2 = h^-1 * 4 c^2
        let mesh = build_background_mesh(8).unwrap();
        let phi = LevelSet { values: vec![-1.0; mesh.num_vertices()], h: mesh.h() };
        let geom = classify(&mesh, &phi).unwrap();
        let c = 0.37;
        let u = FemField { values: vec![c; mesh.num_vertices()] };
        let exact = ExactField { value: Box::new(|_| 0.0), gradient: Box::new(|_| Vec2::ZERO) };
        let norms = field_errors(&mesh, &geom, &u, &exact, 2).unwrap();
        let expect = (4.0 * c * c / mesh.h()).sqrt();
        assert!((norms.energy - expect).abs() < 1e-12, "{} vs {expect}", norms.energy);
        assert!(norms.w1p_semi == 0.0);
    }

    #[test]
    fn constant_offset_sees_unfitted_fixed_traces() {
        // with interior fixed circles the trace penalty integrates over the
        // extracted fixed segments instead of box facets
        let mesh = build_background_mesh(48).unwrap();
        let problem = ProblemDefinition::mp2();
        let free =
            signed_distance_circle(Vec2::new(0.5, 0.5), 0.42, Orientation::InteriorNegative)
                .unwrap();
        let phi = sample_to_nodes(&free, &mesh).unwrap();
        let geom = problem.cut_geometry(&mesh, &phi).unwrap();
        assert!(geom.fitted_facets.is_empty());
        let c = 0.4;
        let u = FemField { values: vec![c; mesh.num_vertices()] };
        let exact = ExactField { value: Box::new(|_| 0.0), gradient: Box::new(|_| Vec2::ZERO) };
        let norms = field_errors(&mesh, &geom, &u, &exact, 2).unwrap();
        let fixed_len: f64 = geom.fixed_segments().map(|s| s.length).sum();
        let h = mesh.h();
        let expect = (fixed_len * c * c / h).sqrt();
        assert!((norms.energy - expect).abs() < 1e-12, "{} vs {expect}", norms.energy);
    }

    #[test]
    fn p4_constant_offset_matches_hand_value() {
        // at p = 4 the trace penalty carries h^(1-p) = h^-3
        let mesh = build_background_mesh(8).unwrap();
        let phi = LevelSet { values: vec![-1.0; mesh.num_vertices()], h: mesh.h() };
        let geom = classify(&mesh, &phi).unwrap();
        let c = 0.5;
        let u = FemField { values: vec![c; mesh.num_vertices()] };
        let exact = ExactField { value: Box::new(|_| 0.0), gradient: Box::new(|_| Vec2::ZERO) };
        let norms = field_errors(&mesh, &geom, &u, &exact, 4).unwrap();
        let h = mesh.h();
        let expect = (4.0 * c.powi(4) / (h * h * h)).powf(0.25);
        assert!((norms.energy - expect).abs() < 1e-12, "{} vs {expect}", norms.energy);
        assert!((norms.lp - c).abs() < 1e-12); // |Omega| = 1
    }

    #[test]
    fn rejects_unsupported_exponent() {
        let mesh = build_background_mesh(8).unwrap();
        let phi = mp1_interface(&mesh).unwrap();
        let geom = classify(&mesh, &phi).unwrap();
        let u = FemField::zeros(mesh.num_vertices());
        let exact = ExactField { value: Box::new(|_| 0.0), gradient: Box::new(|_| Vec2::ZERO) };
        assert!(field_errors(&mesh, &geom, &u, &exact, 3).is_err());
    }

    #[test]
    fn energy_dominates_h1_seminorm() {
        let mesh = build_background_mesh(16).unwrap();
        let phi = mp1_interface(&mesh).unwrap();
        let geom = classify(&mesh, &phi).unwrap();
        let problem = ProblemDefinition::mp1();
        let (u, _, _) = crate::fem::solve_primal(&mesh, &geom, &problem, &FemParams::default()).unwrap();
        let exact = ExactField {
            value: Box::new(|p| 4.0 * p.dist(Vec2::new(0.5, 0.5)) - 1.0),
            gradient: Box::new(|p| {
                let d = p - Vec2::new(0.5, 0.5);
                d * (4.0 / d.norm())
            }),
        };
        let norms = field_errors(&mesh, &geom, &u, &exact, 2).unwrap();
        assert!(norms.energy >= norms.w1p_semi);
    }

    #[test]
    fn velocity_error_vanishes_against_itself() {
        let params = FemParams::default();
        let (mesh, beta) = mp1_velocity(16, &params).unwrap();
        let (h1, l2) = velocity_errors(&mesh, &beta, &mesh, &beta).unwrap();
        assert!(h1 < 1e-12 && l2 < 1e-12);
    }

    #[test]
    fn velocity_error_rejects_non_nested() {
        let params = FemParams::default();
        let (m16, b16) = mp1_velocity(16, &params).unwrap();
        let (m24, b24) = mp1_velocity(24, &params).unwrap();
        assert!(velocity_errors(&m16, &b16, &m24, &b24).is_err());
    }

    #[test]
    fn table_rates_and_csv() {
        let table = ConvergenceTable {
            error_names: vec!["e".into()],
            rows: vec![
                TableRow { n: 16, h: 1.0 / 16.0, errors: vec![0.4] },
                TableRow { n: 32, h: 1.0 / 32.0, errors: vec![0.1] },
            ],
        };
        assert!((table.last_rate(0).unwrap() - 2.0).abs() < 1e-12);
        let mut buf = Vec::new();
        table.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "n,h,e,e_rate\n16,0.0625,0.4,\n32,0.03125,0.1,2\n");
    }

    #[test]
    fn rates_recompute_bit_identically_from_csv() {
        let params = FemParams::default();
        let table = primal_convergence(&[16, 32], &params).unwrap();
        let mut buf = Vec::new();
        table.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // parse the error columns back and recompute the rate
        let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
        for k in 0..table.error_names.len() {
            let col = 2 + 2 * k;
            let e0: f64 = rows[0][col].parse().unwrap();
            let e1: f64 = rows[1][col].parse().unwrap();
            let recomputed = (e0 / e1).log2();
            let stored: f64 = rows[1][col + 1].parse().unwrap();
            assert_eq!(recomputed.to_bits(), stored.to_bits());
            assert_eq!(
                recomputed.to_bits(),
                table.rates()[1][k].unwrap().to_bits(),
                "rate of column {k} not reproducible"
            );
        }
    }

    #[test]
    fn circle_deviation_of_sampled_circle_is_second_order() {
        let mesh = build_background_mesh(64).unwrap();
        let phi = mp1_interface(&mesh).unwrap();
        let geom = classify(&mesh, &phi).unwrap();
        let dev = interface_circle_deviation(&geom, Vec2::new(0.5, 0.5), 0.25);
        let h = mesh.h();
        assert!(dev <= 2.0 * h * h, "deviation {dev} vs 2h^2 {}", 2.0 * h * h);
    }
}
