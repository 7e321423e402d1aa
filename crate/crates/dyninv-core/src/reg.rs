//! Spatial regularisation building blocks: discrete gradients, isotropic
//! total variation, the pointwise dual ball, box constraints, and the
//! dual-dynamics view of the spatiotemporal penalty.

use crate::error::{Error, Result};

enum GradKind {
    /// Forward differences on an `nx x ny` pixel grid. Only full stencils
    /// count: sites live on the (nx-1) x (ny-1) subgrid so both components
    /// exist at every site.
    Grid { nx: usize, ny: usize },
    /// Per-triangle P1 gradients, rows pre-multiplied by triangle area.
    Mesh { rows: Vec<TriRow> },
}

struct TriRow {
    v: [usize; 3],
    cx: [f64; 3],
    cy: [f64; 3],
}

/// Per-frame discrete gradient operator K.
///
/// `grad_apply` returns the field as interleaved pairs `[gx_0, gy_0, gx_1, ...]`,
/// one pair per site (grid stencil or triangle). Stateless; concurrent use safe.
pub struct DiscreteGradient {
    kind: GradKind,
    input_dim: usize,
    n_sites: usize,
}

impl DiscreteGradient {
    pub fn grid(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidInput("gradient grid must be at least 2x2".into()));
        }
        Ok(Self { kind: GradKind::Grid { nx, ny }, input_dim: nx * ny, n_sites: (nx - 1) * (ny - 1) })
    }

    /// P1 gradient on a triangulation; rows are scaled by triangle area so
    /// that `tv_value` integrates the gradient norm over the domain.
    pub fn mesh_p1(coords: &[[f64; 2]], triangles: &[[usize; 3]]) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::InvalidInput("mesh has no triangles".into()));
        }
        let mut rows = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= coords.len()) {
                return Err(Error::InvalidInput(format!("triangle {t} references a missing vertex")));
            }
            let a = coords[tri[0]];
            let b = coords[tri[1]];
            let c = coords[tri[2]];
            let e1 = [b[0] - a[0], b[1] - a[1]];
            let e2 = [c[0] - a[0], c[1] - a[1]];
            let det = e1[0] * e2[1] - e1[1] * e2[0];
            if det.abs() < 1e-14 {
                return Err(Error::InvalidInput(format!("triangle {t} is degenerate")));
            }
            let area = det.abs() / 2.0;
            // Barycentric gradients: g_b . e1 = 1, g_b . e2 = 0 and vice versa.
            let gb = [e2[1] / det, -e2[0] / det];
            let gc = [-e1[1] / det, e1[0] / det];
            let ga = [-gb[0] - gc[0], -gb[1] - gc[1]];
            rows.push(TriRow {
                v: *tri,
                cx: [area * ga[0], area * gb[0], area * gc[0]],
                cy: [area * ga[1], area * gb[1], area * gc[1]],
            });
        }
        Ok(Self { kind: GradKind::Mesh { rows }, input_dim: coords.len(), n_sites: triangles.len() })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of gradient sites; the field has `2 * n_sites` components.
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn grad_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "grad_apply: expected dim {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let mut out = vec![0.0; 2 * self.n_sites];
        match &self.kind {
            GradKind::Grid { nx, ny } => {
                let mut s = 0;
                for r in 0..ny - 1 {
                    for c in 0..nx - 1 {
                        let p = r * nx + c;
                        out[2 * s] = x[p + 1] - x[p];
                        out[2 * s + 1] = x[p + nx] - x[p];
                        s += 1;
                    }
                }
            }
            GradKind::Mesh { rows } => {
                for (s, row) in rows.iter().enumerate() {
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for i in 0..3 {
                        gx += row.cx[i] * x[row.v[i]];
                        gy += row.cy[i] * x[row.v[i]];
                    }
                    out[2 * s] = gx;
                    out[2 * s + 1] = gy;
                }
            }
        }
        Ok(out)
    }

    /// Exact transpose of `grad_apply` (the negative discrete divergence).
    pub fn div_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != 2 * self.n_sites {
            return Err(Error::Shape(format!(
                "div_apply: expected field dim {}, got {}",
                2 * self.n_sites,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.input_dim];
        match &self.kind {
            GradKind::Grid { nx, ny } => {
                let mut s = 0;
                for r in 0..ny - 1 {
                    for c in 0..nx - 1 {
                        let p = r * nx + c;
                        let gx = y[2 * s];
                        let gy = y[2 * s + 1];
                        out[p] -= gx + gy;
                        out[p + 1] += gx;
                        out[p + nx] += gy;
                        s += 1;
                    }
                }
            }
            GradKind::Mesh { rows } => {
                for (s, row) in rows.iter().enumerate() {
                    let gx = y[2 * s];
                    let gy = y[2 * s + 1];
                    for i in 0..3 {
                        out[row.v[i]] += row.cx[i] * gx + row.cy[i] * gy;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Largest singular value of K by power iteration (deterministic start).
    pub fn operator_norm(&self) -> Result<f64> {
        let n = self.input_dim;
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
        let norm = |z: &[f64]| z.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = norm(&v);
        for a in &mut v {
            *a /= nv;
        }
        let mut prev = f64::INFINITY;
        for _ in 0..50_000 {
            let z = self.div_apply(&self.grad_apply(&v)?)?;
            let ray: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum();
            let est = ray.max(0.0).sqrt();
            let nz = norm(&z);
            if nz == 0.0 {
                return Ok(0.0);
            }
            for (a, b) in v.iter_mut().zip(&z) {
                *a = b / nz;
            }
            if (est - prev).abs() <= 1e-11 * est.max(1e-300) {
                return Ok(est);
            }
            prev = est;
        }
        Err(Error::Numerical("gradient norm power iteration did not converge".into()))
    }
}

/// Isotropic total variation: sum over sites of the pointwise 2-norm of Kx.
/// Mesh gradients carry their triangle-area weight inside K, so this is the
/// integral of the gradient norm in both geometries.
pub fn tv_value(k: &DiscreteGradient, x: &[f64]) -> Result<f64> {
    let g = k.grad_apply(x)?;
    Ok(field_norm_sum(&g, |_| 1.0))
}

fn field_norm_sum(field: &[f64], weight: impl Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    for s in 0..field.len() / 2 {
        let gx = field[2 * s];
        let gy = field[2 * s + 1];
        total += weight(s) * (gx * gx + gy * gy).sqrt();
    }
    total
}

/// Pointwise 2-ball of a fixed radius on gradient fields (the 2,infinity ball).
#[derive(Clone, Copy, Debug)]
pub struct DualBall {
    radius: f64,
}

impl DualBall {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidInput(format!("dual ball radius must be positive, got {radius}")));
        }
        Ok(Self { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Radial projection of each site vector onto the ball. Nonexpansive and
/// idempotent; interior sites are returned unchanged.
pub fn project_dual_ball(ball: &DualBall, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() % 2 != 0 {
        return Err(Error::Shape("dual field must have an even number of components".into()));
    }
    let mut out = y.to_vec();
    for s in 0..y.len() / 2 {
        let gx = y[2 * s];
        let gy = y[2 * s + 1];
        let n = (gx * gx + gy * gy).sqrt();
        if n > ball.radius {
            let f = ball.radius / n;
            out[2 * s] = gx * f;
            out[2 * s + 1] = gy * f;
        }
    }
    Ok(out)
}

/// Componentwise box constraint `[lo, hi]`.
#[derive(Clone, Copy, Debug)]
pub struct BoxConstraint {
    lo: f64,
    hi: f64,
}

impl BoxConstraint {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidInput(format!("box needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|&v| self.lo <= v && v <= self.hi)
    }
}

/// Prox of the box indicator: a componentwise clamp. The indicator takes no
/// step-size dependence, so `step` is accepted only for interface uniformity.
pub fn prox_box(b: &BoxConstraint, x: &[f64], _step: f64) -> Vec<f64> {
    x.iter().map(|&v| v.clamp(b.lo, b.hi)).collect()
}

/// Restricted description of the closed convex hull of a dual dynamic
/// constraint set: a product of pointwise balls.
pub enum DualHull {
    /// Hull contains the whole unit dual ball; no extra restriction.
    Unrestricted,
    /// Every site of every frame restricted to a ball of this radius.
    UniformRadius(f64),
    /// `radii[k][s]` restricts site `s` of frame `k`.
    PerSiteRadii(Vec<Vec<f64>>),
}

/// Value of the spatiotemporal penalty when the dual temporal dynamics
/// restrict each dual site to a ball: the supremum of `<y, Kx>` over the
/// intersection of the unit-ball product with the hull. Site by site this is
/// `min(1, r) * |site of Kx|`; an unrestricted hull recovers the plain
/// framewise total variation sum.
pub fn rn_value_under_dual_dynamics(
    k: &DiscreteGradient,
    frames: &[Vec<f64>],
    hull: &DualHull,
) -> Result<f64> {
    match hull {
        DualHull::Unrestricted => {}
        DualHull::UniformRadius(r) => {
            if !(*r >= 0.0) {
                return Err(Error::InvalidInput(format!("hull radius {r} describes an empty constraint")));
            }
        }
        DualHull::PerSiteRadii(radii) => {
            if radii.len() != frames.len() {
                return Err(Error::Shape(format!(
                    "hull has {} frames of radii, trajectory has {}",
                    radii.len(),
                    frames.len()
                )));
            }
            for (f, rs) in radii.iter().enumerate() {
                if rs.len() != k.n_sites() {
                    return Err(Error::Shape(format!(
                        "frame {f}: {} radii for {} sites",
                        rs.len(),
                        k.n_sites()
                    )));
                }
                if rs.iter().any(|r| !(*r >= 0.0)) {
                    return Err(Error::InvalidInput(format!(
                        "frame {f} has a negative radius: empty constraint"
                    )));
                }
            }
        }
    }
    let mut total = 0.0;
    for (f, x) in frames.iter().enumerate() {
        let g = k.grad_apply(x)?;
        total += match hull {
            DualHull::Unrestricted => field_norm_sum(&g, |_| 1.0),
            DualHull::UniformRadius(r) => field_norm_sum(&g, |_| r.min(1.0)),
            DualHull::PerSiteRadii(radii) => field_norm_sum(&g, |s| radii[f][s].min(1.0)),
        };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn unit_square_mesh() -> DiscreteGradient {
        let coords = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let tris = [[0, 1, 2], [1, 3, 2]];
        DiscreteGradient::mesh_p1(&coords, &tris).unwrap()
    }

    #[test]
    fn constant_frame_has_zero_gradient() {
        let k = DiscreteGradient::grid(6, 5).unwrap();
        let g = k.grad_apply(&vec![3.7; 30]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let m = unit_square_mesh();
        let g = m.grad_apply(&vec![-1.25; 4]).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn linear_ramp_gives_constant_gradient_field() {
        let (nx, ny) = (7, 6);
        let k = DiscreteGradient::grid(nx, ny).unwrap();
        // Coefficients are powers of two so the stencil differences are exact.
        let x: Vec<f64> = (0..nx * ny)
            .map(|p| 0.5 * (p % nx) as f64 + 0.25 * (p / nx) as f64)
            .collect();
        let g = k.grad_apply(&x).unwrap();
        for s in 0..k.n_sites() {
            assert_eq!(g[2 * s], 0.5);
            assert_eq!(g[2 * s + 1], 0.25);
        }
    }

    #[test]
    fn mesh_gradient_of_linear_function_is_area_scaled() {
        let m = unit_square_mesh();
        // u = 2x + 3y has gradient (2, 3); each triangle has area 1/2.
        let u = [0.0, 2.0, 3.0, 5.0];
        let g = m.grad_apply(&u).unwrap();
        for s in 0..2 {
            assert!((g[2 * s] - 1.0).abs() < 1e-14);
            assert!((g[2 * s + 1] - 1.5).abs() < 1e-14);
        }
        // Integrated gradient norm over the unit square.
        let tv = tv_value(&m, &u).unwrap();
        assert!((tv - 13.0_f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn adjoint_identity_on_random_pairs() {
        let ops = [DiscreteGradient::grid(9, 7).unwrap(), unit_square_mesh()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in &ops {
            for _ in 0..100 {
                let x: Vec<f64> = (0..k.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..2 * k.n_sites()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let lhs = dot(&k.grad_apply(&x).unwrap(), &y);
                let rhs = dot(&x, &k.div_apply(&y).unwrap());
                let scale = lhs.abs().max(rhs.abs()).max(1e-30);
                assert!((lhs - rhs).abs() / scale < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_dimension_checks() {
        let k = DiscreteGradient::grid(4, 4).unwrap();
        assert!(k.grad_apply(&[0.0; 15]).is_err());
        assert!(k.div_apply(&[0.0; 19]).is_err());
        assert!(DiscreteGradient::grid(1, 5).is_err());
        let bad = DiscreteGradient::mesh_p1(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], &[[0, 1, 2]]);
        assert!(bad.is_err(), "collinear triangle must be rejected");
    }

    #[test]
    fn grid_norm_matches_dense_svd_and_stencil_bound() {
        let k = DiscreteGradient::grid(6, 6).unwrap();
        let (n, m) = (k.input_dim(), 2 * k.n_sites());
        let mut dense = vec![0.0; m * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            for (i, v) in k.grad_apply(&e).unwrap().into_iter().enumerate() {
                dense[i * n + j] = v;
            }
            e[j] = 0.0;
        }
        let top = nalgebra::DMatrix::from_row_slice(m, n, &dense).svd(false, false).singular_values[0];
        let est = k.operator_norm().unwrap();
        assert!((est - top).abs() / top < 0.01, "est {est} vs svd {top}");
        assert!(est <= 8.0_f64.sqrt() + 1e-9);
    }

    #[test]
    fn tv_of_constant_is_zero_and_tv_is_homogeneous() {
        let k = DiscreteGradient::grid(8, 8).unwrap();
        assert_eq!(tv_value(&k, &vec![2.0; 64]).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tv_value(&k, &x2).unwrap(), 2.0 * tv_value(&k, &x).unwrap());
    }

    #[test]
    fn half_grid_step_costs_one_jump_per_full_stencil_row() {
        let n = 6;
        for h in [1.0, 2.5] {
            let k = DiscreteGradient::grid(n, n).unwrap();
            let x: Vec<f64> = (0..n * n).map(|p| if p % n < n / 2 { h } else { 0.0 }).collect();
            // The jump column meets n-1 full stencils (the last row has none).
            let tv = tv_value(&k, &x).unwrap();
            assert!((tv - (n - 1) as f64 * h).abs() < 1e-12, "h={h}: tv={tv}");
        }
    }

    #[test]
    fn dual_ball_projection_basics() {
        let ball = DualBall::new(0.75).unwrap();
        let interior = vec![0.3, 0.2, -0.1, 0.0];
        assert_eq!(project_dual_ball(&ball, &interior).unwrap(), interior);
        // A site of norm 2r projects to norm r, same direction.
        let y = vec![1.5, 0.0, 0.9, 1.2];
        let p = project_dual_ball(&ball, &y).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && p[1] == 0.0);
        let n1 = (p[2] * p[2] + p[3] * p[3]).sqrt();
        assert!((n1 - 0.75).abs() < 1e-12);
        assert!((p[2] / p[3] - 0.9 / 1.2).abs() < 1e-12);
        assert!(DualBall::new(0.0).is_err());
        assert!(project_dual_ball(&ball, &[1.0; 3]).is_err());
    }

    #[test]
    fn dual_ball_projection_is_idempotent_and_nonexpansive() {
        let ball = DualBall::new(1.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let y: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let py = project_dual_ball(&ball, &y).unwrap();
            let pz = project_dual_ball(&ball, &z).unwrap();
            let ppy = project_dual_ball(&ball, &py).unwrap();
            for (a, b) in py.iter().zip(&ppy) {
                assert!((a - b).abs() < 1e-15);
            }
            let d_before: f64 = y.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            let d_after: f64 = py.iter().zip(&pz).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!(d_after <= d_before + 1e-12);
        }
    }

    #[test]
    fn box_prox_clamps_and_ignores_step() {
        let b = BoxConstraint::new(-1.0, 2.0).unwrap();
        let x = vec![0.5, -3.0, 7.0, 2.0];
        for step in [0.1, 1.0, 50.0] {
            assert_eq!(prox_box(&b, &x, step), vec![0.5, -1.0, 2.0, 2.0]);
        }
        assert!(BoxConstraint::new(1.0, 1.0).is_err());
        assert!(b.contains(&[0.0, 2.0]));
        assert!(!b.contains(&[2.1]));
    }

    #[test]
    fn box_prox_is_nonexpansive() {
        let b = BoxConstraint::new(-0.5, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dx: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            let dc: f64 = prox_box(&b, &x, 1.0)
                .iter()
                .zip(&prox_box(&b, &y, 1.0))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(dc <= dx + 1e-15);
        }
    }

    #[test]
    fn tv_equals_projected_ascent_over_the_unit_dual_ball() {
        let k = DiscreteGradient::grid(6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = k.grad_apply(&x).unwrap();
        let ball = DualBall::new(1.0).unwrap();
        let mut y = vec![0.0; g.len()];
        let mut step = 1.0;
        for _ in 0..60 {
            for (a, b) in y.iter_mut().zip(&g) {
                *a += step * b;
            }
            y = project_dual_ball(&ball, &y).unwrap();
            step *= 2.0;
        }
        let ascent = dot(&y, &g);
        let tv = tv_value(&k, &x).unwrap();
        assert!(ascent <= tv + 1e-12);
        assert!(tv - ascent <= 1e-8, "duality gap {}", tv - ascent);
    }

    #[test]
    fn rn_unrestricted_hull_is_the_framewise_tv_sum() {
        let k = DiscreteGradient::grid(5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let frames: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rn = rn_value_under_dual_dynamics(&k, &frames, &DualHull::Unrestricted).unwrap();
        let tv_sum: f64 = frames.iter().map(|f| tv_value(&k, f).unwrap()).sum();
        assert!((rn - tv_sum).abs() < 1e-12);
        // Radii at or above the unit ball change nothing.
        let big = rn_value_under_dual_dynamics(&k, &frames, &DualHull::UniformRadius(3.0)).unwrap();
        assert!((big - tv_sum).abs() < 1e-12);
    }

    #[test]
    fn rn_zero_hull_vanishes_and_radii_scale_exactly() {
        let k = DiscreteGradient::grid(5, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let frames: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let zero = rn_value_under_dual_dynamics(&k, &frames, &DualHull::UniformRadius(0.0)).unwrap();
        assert_eq!(zero, 0.0);
        let radii: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..k.n_sites()).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let halved: Vec<Vec<f64>> =
            radii.iter().map(|rs| rs.iter().map(|r| r / 2.0).collect()).collect();
        let v1 = rn_value_under_dual_dynamics(&k, &frames, &DualHull::PerSiteRadii(radii)).unwrap();
        let v2 = rn_value_under_dual_dynamics(&k, &frames, &DualHull::PerSiteRadii(halved)).unwrap();
        // Halving every radius below the unit cap halves each site term
        // exactly in binary floating point.
        assert_eq!(v2, v1 / 2.0);
    }

    #[test]
    fn rn_rejects_empty_constraints_and_bad_shapes() {
        let k = DiscreteGradient::grid(4, 4).unwrap();
        let frames = vec![vec![0.0; 16]];
        assert!(rn_value_under_dual_dynamics(&k, &frames, &DualHull::UniformRadius(-1.0)).is_err());
        let bad = DualHull::PerSiteRadii(vec![vec![-0.5; k.n_sites()]]);
        assert!(rn_value_under_dual_dynamics(&k, &frames, &bad).is_err());
        let short = DualHull::PerSiteRadii(vec![vec![0.5; 2]]);
        assert!(rn_value_under_dual_dynamics(&k, &frames, &short).is_err());
        let wrong_frames = DualHull::PerSiteRadii(vec![]);
        assert!(rn_value_under_dual_dynamics(&k, &frames, &wrong_frames).is_err());
    }

    #[test]
    fn mesh_tv_weights_are_triangle_areas() {
        // Two triangles of different area; a function linear on each with
        // equal raw gradient norms must be weighted by area.
        let coords = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-2.0, 0.0], [0.0, -2.0]];
        let tris = [[0, 1, 2], [0, 3, 4]];
        let m = DiscreteGradient::mesh_p1(&coords, &tris).unwrap();
        // u = x on both triangles: gradient (1, 0); areas 1/2 and 2.
        let u = [0.0, 1.0, 0.0, -2.0, 0.0];
        let tv = tv_value(&m, &u).unwrap();
        assert!((tv - 2.5).abs() < 1e-14);
    }
}
