//! History-free online prediction-correction solver.
//!
//! Per frame: predict the primal and dual iterates, then take exactly one
//! primal-dual proximal splitting step against the new measurement frame.
//! Past iterates are never revisited.

use crate::eit::{CemSystem, Mesh};
use crate::error::{Error, Result};
use crate::linop::LinearFrameOperator;
use crate::model::{MeasurementStream, Trajectory};
use crate::reg::{prox_box, project_dual_ball, tv_value, BoxConstraint, DiscreteGradient, DualBall};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrimalPredictor {
    /// Carry the previous iterate over unchanged.
    ZeroMotion,
    /// Warp the previous iterate by the scenario's exact displacement field.
    KnownFlowTranslation,
    /// Estimate the displacement from the last two iterates (Horn-Schunck,
    /// single level), then warp. Grid geometry only.
    OpticalFlow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DualPredictor {
    Identity,
    Zero,
    /// Warp the dual field with the primal displacement, then rescale each
    /// site into the radius-alpha ball. This reconstruction of the cited
    /// predictor (warp + pointwise radial rescale) is a documented surrogate;
    /// on meshes the warp step is the identity because dual sites are
    /// cell-based.
    AffineScaling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub primal: PrimalPredictor,
    pub dual: DualPredictor,
}

/// Spatial layout of a frame vector, for warping predictors.
pub enum FrameGeometry<'a> {
    Grid { nx: usize, ny: usize },
    Mesh(&'a Mesh),
}

/// Primal and dual step sizes with the guard `tau * s * |K|^2 < 1` checked
/// at configuration time.
#[derive(Clone, Copy, Debug)]
pub struct StepSizes {
    pub tau: f64,
    pub s: f64,
    pub k_norm: f64,
    /// True when `tau` had to be shrunk to satisfy the guard.
    pub rescaled: bool,
}

const GUARD_MARGIN: f64 = 0.99;

/// Validates the step-size guard, shrinking `tau` (the dual step is kept)
/// when the requested pair violates it.
pub fn configure_steps(tau: f64, s: f64, k_norm: f64) -> Result<StepSizes> {
    if !(tau > 0.0) || !(s > 0.0) || !tau.is_finite() || !s.is_finite() {
        return Err(Error::InvalidInput(format!("step sizes must be positive, got tau={tau}, s={s}")));
    }
    if !(k_norm >= 0.0) || !k_norm.is_finite() {
        return Err(Error::InvalidInput(format!("bad operator norm {k_norm}")));
    }
    if tau * s * k_norm * k_norm < 1.0 {
        Ok(StepSizes { tau, s, k_norm, rescaled: false })
    } else {
        let tau = GUARD_MARGIN / (s * k_norm * k_norm);
        Ok(StepSizes { tau, s, k_norm, rescaled: true })
    }
}

/// Solver state after frame `frame - 1` (or the initial state at 0).
#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Iterate one frame earlier, for flow estimation.
    pub prev_x: Option<Vec<f64>>,
    pub frame: usize,
    pub steps: StepSizes,
    pub alpha: f64,
}

impl SolverState {
    pub fn initial(x0: Vec<f64>, n_sites: usize, steps: StepSizes, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { y: vec![0.0; 2 * n_sites], x: x0, prev_x: None, frame: 0, steps, alpha })
    }
}

/// Bilinear sample of a grid image at (row, col), clamped at the boundary.
fn grid_sample(x: &[f64], nx: usize, ny: usize, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (ny - 1) as f64);
    let c = c.clamp(0.0, (nx - 1) as f64);
    let r0 = (r.floor() as usize).min(ny - 1);
    let c0 = (c.floor() as usize).min(nx - 1);
    let r1 = (r0 + 1).min(ny - 1);
    let c1 = (c0 + 1).min(nx - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let v00 = x[r0 * nx + c0];
    let v01 = x[r0 * nx + c1];
    let v10 = x[r1 * nx + c0];
    let v11 = x[r1 * nx + c1];
    (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01) + fr * ((1.0 - fc) * v10 + fc * v11)
}

/// P1 interpolation of nodal values at a point; nearest node if the point
/// falls outside every triangle.
fn mesh_sample(mesh: &Mesh, vals: &[f64], p: [f64; 2]) -> f64 {
    for tri in mesh.triangles() {
        let a = mesh.coords()[tri[0]];
        let b = mesh.coords()[tri[1]];
        let c = mesh.coords()[tri[2]];
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (p[1] - a[1]) * (c[0] - a[0])) / det;
        let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])) / det;
        let l0 = 1.0 - l1 - l2;
        if l0 >= -1e-10 && l1 >= -1e-10 && l2 >= -1e-10 {
            return l0 * vals[tri[0]] + l1 * vals[tri[1]] + l2 * vals[tri[2]];
        }
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in mesh.coords().iter().enumerate() {
        let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    vals[best]
}

/// Backward-warp a frame by a forward displacement field given at its sample
/// points: `out(p) = x(p - flow(p))`.
pub fn warp_frame(geom: &FrameGeometry, x: &[f64], flow: &[[f64; 2]]) -> Result<Vec<f64>> {
    if flow.len() != x.len() {
        return Err(Error::Shape(format!(
            "flow has {} sites for {} samples",
            flow.len(),
            x.len()
        )));
    }
    match geom {
        FrameGeometry::Grid { nx, ny } => {
            if x.len() != nx * ny {
                return Err(Error::Shape(format!("frame of {} pixels on {nx}x{ny} grid", x.len())));
            }
            let mut out = vec![0.0; x.len()];
            for r in 0..*ny {
                for c in 0..*nx {
                    let p = r * nx + c;
                    // flow = (dx, dy) in column/row units.
                    out[p] = grid_sample(x, *nx, *ny, r as f64 - flow[p][1], c as f64 - flow[p][0]);
                }
            }
            Ok(out)
        }
        FrameGeometry::Mesh(mesh) => {
            if x.len() != mesh.n_nodes() {
                return Err(Error::Shape(format!(
                    "frame of {} values on a {}-node mesh",
                    x.len(),
                    mesh.n_nodes()
                )));
            }
            let out = mesh
                .coords()
                .iter()
                .enumerate()
                .map(|(i, c)| mesh_sample(mesh, x, [c[0] - flow[i][0], c[1] - flow[i][1]]))
                .collect();
            Ok(out)
        }
    }
}

/// Single-level Horn-Schunck flow from `prev` to `cur` on a grid.
fn horn_schunck(prev: &[f64], cur: &[f64], nx: usize, ny: usize) -> Vec<[f64; 2]> {
    const SWEEPS: usize = 20;
    const SMOOTHNESS: f64 = 0.1;
    let n = nx * ny;
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    let mut it = vec![0.0; n];
    let at = |r: usize, c: usize| r * nx + c;
    for r in 0..ny {
        for c in 0..nx {
            let avg = |p: usize| 0.5 * (prev[p] + cur[p]);
            let cm = c.saturating_sub(1);
            let cp = (c + 1).min(nx - 1);
            let rm = r.saturating_sub(1);
            let rp = (r + 1).min(ny - 1);
            ix[at(r, c)] = (avg(at(r, cp)) - avg(at(r, cm))) / (cp - cm).max(1) as f64;
            iy[at(r, c)] = (avg(at(rp, c)) - avg(at(rm, c))) / (rp - rm).max(1) as f64;
            it[at(r, c)] = cur[at(r, c)] - prev[at(r, c)];
        }
    }
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for _ in 0..SWEEPS {
        let mut un = vec![0.0; n];
        let mut vn = vec![0.0; n];
        for r in 0..ny {
            for c in 0..nx {
                let p = at(r, c);
                let mut ubar = 0.0;
                let mut vbar = 0.0;
                let mut count = 0.0;
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && rr < ny as i64 && cc >= 0 && cc < nx as i64 {
                        ubar += u[at(rr as usize, cc as usize)];
                        vbar += v[at(rr as usize, cc as usize)];
                        count += 1.0;
                    }
                }
                ubar /= count;
                vbar /= count;
                let denom = SMOOTHNESS + ix[p] * ix[p] + iy[p] * iy[p];
                let t = (ix[p] * ubar + iy[p] * vbar + it[p]) / denom;
                un[p] = ubar - ix[p] * t;
                vn[p] = vbar - iy[p] * t;
            }
        }
        u = un;
        v = vn;
    }
    (0..n).map(|p| [u[p], v[p]]).collect()
}

pub fn predict_primal(
    spec: &PredictorSpec,
    state: &SolverState,
    geom: &FrameGeometry,
    motion_hint: Option<&[[f64; 2]]>,
) -> Result<Vec<f64>> {
    match spec.primal {
        PrimalPredictor::ZeroMotion => Ok(state.x.clone()),
        PrimalPredictor::KnownFlowTranslation => {
            let flow = motion_hint.ok_or_else(|| {
                Error::InvalidInput("known-flow predictor needs scenario motion metadata".into())
            })?;
            warp_frame(geom, &state.x, flow)
        }
        PrimalPredictor::OpticalFlow => {
            let FrameGeometry::Grid { nx, ny } = geom else {
                return Err(Error::Unsupported("optical flow runs on grid geometry only".into()));
            };
            match &state.prev_x {
                None => Ok(state.x.clone()),
                Some(prev) => {
                    let flow = horn_schunck(prev, &state.x, *nx, *ny);
                    warp_frame(geom, &state.x, &flow)
                }
            }
        }
    }
}

pub fn predict_dual(
    spec: &PredictorSpec,
    state: &SolverState,
    geom: &FrameGeometry,
    motion_hint: Option<&[[f64; 2]]>,
) -> Result<Vec<f64>> {
    match spec.dual {
        DualPredictor::Identity => Ok(state.y.clone()),
        DualPredictor::Zero => Ok(vec![0.0; state.y.len()]),
        DualPredictor::AffineScaling => {
            let warped = match (geom, motion_hint) {
                (FrameGeometry::Grid { nx, ny }, Some(flow)) if *nx > 1 && *ny > 1 => {
                    // Transport each dual component over the site subgrid,
                    // reading the pixel flow at the site's anchor pixel.
                    let (sx, sy) = (nx - 1, ny - 1);
                    let n_sites = sx * sy;
                    if state.y.len() != 2 * n_sites {
                        return Err(Error::Shape(format!(
                            "dual field has {} components for {n_sites} sites",
                            state.y.len()
                        )));
                    }
                    let mut comp0 = vec![0.0; n_sites];
                    let mut comp1 = vec![0.0; n_sites];
                    for s in 0..n_sites {
                        comp0[s] = state.y[2 * s];
                        comp1[s] = state.y[2 * s + 1];
                    }
                    let mut out = vec![0.0; 2 * n_sites];
                    for r in 0..sy {
                        for c in 0..sx {
                            let s = r * sx + c;
                            let f = flow[r * nx + c];
                            let rr = r as f64 - f[1];
                            let cc = c as f64 - f[0];
                            out[2 * s] = grid_sample(&comp0, sx, sy, rr, cc);
                            out[2 * s + 1] = grid_sample(&comp1, sx, sy, rr, cc);
                        }
                    }
                    out
                }
                _ => state.y.clone(),
            };
            let ball = DualBall::new(state.alpha)?;
            project_dual_ball(&ball, &warped)
        }
    }
}

/// True when every dual site lies in the radius-`alpha` ball, allowing the
/// ulp-level overshoot of the radial projection's scaling.
pub fn dual_feasible(y: &[f64], alpha: f64) -> bool {
    y.chunks_exact(2)
        .all(|s| (s[0] * s[0] + s[1] * s[1]).sqrt() <= alpha * (1.0 + 1e-12))
}

/// Per-frame forward model.
pub enum FrameModel<'a> {
    Linear(&'a LinearFrameOperator),
    Eit(&'a CemSystem),
}

impl FrameModel<'_> {
    pub fn input_dim(&self) -> usize {
        match self {
            FrameModel::Linear(op) => op.input_dim(),
            FrameModel::Eit(sys) => sys.mesh().n_nodes(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FrameModel::Linear(op) => op.output_dim(),
            FrameModel::Eit(sys) => sys.n_measurements(),
        }
    }

    /// Forward measurement A(x). Counts one PDE solve in EIT mode.
    pub fn apply_measure(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FrameModel::Linear(op) => op.apply(x),
            FrameModel::Eit(sys) => {
                let sol = sys.solve_forward(x)?;
                sys.measurement_vector(&sol.currents)
            }
        }
    }

    /// Data-term gradient `A'(x)* Sigma^{-1} (A(x) - b)` together with the
    /// weighted data fit at `x`. Exactly one PDE solve plus one adjoint solve
    /// in EIT mode.
    pub fn data_gradient(&self, x: &[f64], b: &[f64], precision: &[f64]) -> Result<(Vec<f64>, f64)> {
        let weighted = |m: &[f64]| -> (Vec<f64>, f64) {
            let mut w = vec![0.0; m.len()];
            let mut fit = 0.0;
            for i in 0..m.len() {
                let r = m[i] - b[i];
                let p2 = precision[i] * precision[i];
                w[i] = p2 * r;
                fit += 0.5 * p2 * r * r;
            }
            (w, fit)
        };
        match self {
            FrameModel::Linear(op) => {
                let m = op.apply(x)?;
                let (w, fit) = weighted(&m);
                Ok((op.adjoint_apply(&w)?, fit))
            }
            FrameModel::Eit(sys) => {
                let sol = sys.solve_forward(x)?;
                let m = sys.measurement_vector(&sol.currents)?;
                let (w, fit) = weighted(&m);
                Ok((sys.jacobian_adjoint_apply(&sol, &w)?, fit))
            }
        }
    }
}

/// One primal-dual proximal splitting step from the predicted pair: primal
/// gradient-prox step, then over-relaxed dual ascent with ball projection.
pub fn corrector_step(
    state: &SolverState,
    model: &FrameModel,
    k_op: &DiscreteGradient,
    box_c: &BoxConstraint,
    b: &[f64],
    precision: &[f64],
    x_pred: &[f64],
    y_pred: &[f64],
) -> Result<(SolverState, f64)> {
    let steps = state.steps;
    if steps.tau * steps.s * steps.k_norm * steps.k_norm >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "step-size condition violated: tau*s*|K|^2 = {}",
            steps.tau * steps.s * steps.k_norm * steps.k_norm
        )));
    }
    if b.len() != model.output_dim() || precision.len() != b.len() {
        return Err(Error::Shape("measurement frame does not match the model".into()));
    }
    if x_pred.len() != model.input_dim() || y_pred.len() != 2 * k_op.n_sites() {
        return Err(Error::Shape("prediction does not match the model".into()));
    }
    let (g, fit) = model.data_gradient(x_pred, b, precision)?;
    let kty = k_op.div_apply(y_pred)?;
    let step_arg: Vec<f64> = x_pred
        .iter()
        .zip(g.iter().zip(&kty))
        .map(|(&x, (&gi, &ki))| x - steps.tau * (gi + ki))
        .collect();
    let x_new = prox_box(box_c, &step_arg, steps.tau);
    let over_relaxed: Vec<f64> = x_new.iter().zip(x_pred).map(|(&a, &p)| 2.0 * a - p).collect();
    let kx = k_op.grad_apply(&over_relaxed)?;
    let y_arg: Vec<f64> = y_pred.iter().zip(&kx).map(|(&y, &k)| y + steps.s * k).collect();
    let ball = DualBall::new(state.alpha)?;
    let y_new = project_dual_ball(&ball, &y_arg)?;
    let next = SolverState {
        prev_x: Some(state.x.clone()),
        x: x_new,
        y: y_new,
        frame: state.frame + 1,
        steps,
        alpha: state.alpha,
    };
    Ok((next, fit))
}

/// Online run configuration. The same forward model serves every frame.
pub struct OnlineConfig<'a> {
    pub model: FrameModel<'a>,
    pub grad: &'a DiscreteGradient,
    pub geometry: FrameGeometry<'a>,
    pub box_c: BoxConstraint,
    pub alpha: f64,
    pub tau: f64,
    pub s: f64,
    pub predictor: PredictorSpec,
    pub x0: Vec<f64>,
    /// `hints[k]` carries frame `k-1` into frame `k`; entry 0 is unused by
    /// the initial prediction unless the scenario moves before frame 0.
    pub motion_hints: Option<&'a [Vec<[f64; 2]>]>,
}

/// Per-frame record emitted by the online loop.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub frame: usize,
    /// Weighted data fit 0.5 |Sigma^{-1/2}(A(x_pred) - b)|^2 at the
    /// prediction point (no extra solve is spent on the corrected iterate).
    pub data_fit_pred: f64,
    /// Total variation of the corrected iterate.
    pub reg_value: f64,
    pub dual_feasible: bool,
    pub box_feasible: bool,
    /// PDE and adjoint solves spent on this frame (EIT mode; zero for
    /// linear models).
    pub pde_solves: u64,
    pub adjoint_solves: u64,
}

pub struct OnlineRun {
    pub trajectory: Trajectory,
    pub duals: Vec<Vec<f64>>,
    pub predictions: Vec<Vec<f64>>,
    pub records: Vec<FrameRecord>,
    pub steps: StepSizes,
}

/// Run the online solver over every frame of the stream. Emitted frames are
/// final: frame `k` of the trajectory is produced at step `k` and never
/// modified afterwards. Deterministic; the loop itself draws no randomness.
pub fn run_online(cfg: &OnlineConfig, stream: &MeasurementStream) -> Result<OnlineRun> {
    let n_frames = stream.n_frames();
    if n_frames == 0 {
        return Err(Error::InvalidInput("measurement stream is empty".into()));
    }
    if stream.dim() != cfg.model.output_dim() {
        return Err(Error::Shape(format!(
            "stream frames have dim {}, model produces {}",
            stream.dim(),
            cfg.model.output_dim()
        )));
    }
    if cfg.x0.len() != cfg.model.input_dim() {
        return Err(Error::Shape("initial frame does not match the model".into()));
    }
    if let Some(hints) = cfg.motion_hints {
        if hints.len() != n_frames {
            return Err(Error::Shape(format!(
                "{} motion hints for {} frames",
                hints.len(),
                n_frames
            )));
        }
    }
    let steps = configure_steps(cfg.tau, cfg.s, cfg.grad.operator_norm()?)?;
    let mut state = SolverState::initial(cfg.x0.clone(), cfg.grad.n_sites(), steps, cfg.alpha)?;

    let mut frames = Vec::with_capacity(n_frames);
    let mut duals = Vec::with_capacity(n_frames);
    let mut predictions = Vec::with_capacity(n_frames);
    let mut records = Vec::with_capacity(n_frames);

    let counters = |model: &FrameModel| match model {
        FrameModel::Eit(sys) => (sys.pde_solve_count(), sys.adjoint_solve_count()),
        FrameModel::Linear(_) => (0, 0),
    };

    for k in 0..n_frames {
        let hint = cfg.motion_hints.map(|h| h[k].as_slice());
        let x_pred = predict_primal(&cfg.predictor, &state, &cfg.geometry, hint)?;
        let y_pred = predict_dual(&cfg.predictor, &state, &cfg.geometry, hint)?;
        let (c0, a0) = counters(&cfg.model);
        let (next, fit) = corrector_step(
            &state,
            &cfg.model,
            cfg.grad,
            &cfg.box_c,
            &stream.corrupted[k],
            &stream.precision,
            &x_pred,
            &y_pred,
        )?;
        let (c1, a1) = counters(&cfg.model);
        state = next;
        records.push(FrameRecord {
            frame: k,
            data_fit_pred: fit,
            reg_value: tv_value(cfg.grad, &state.x)?,
            dual_feasible: dual_feasible(&state.y, cfg.alpha),
            box_feasible: cfg.box_c.contains(&state.x),
            pde_solves: c1 - c0,
            adjoint_solves: a1 - a0,
        });
        predictions.push(x_pred);
        duals.push(state.y.clone());
        frames.push(state.x.clone());
    }

    Ok(OnlineRun {
        trajectory: Trajectory::new(frames)?,
        duals,
        predictions,
        records,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseSpec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(nx: usize, ny: usize, cx: f64, cy: f64, sigma: f64) -> Vec<f64> {
        (0..nx * ny)
            .map(|p| {
                let r = (p / nx) as f64;
                let c = (p % nx) as f64;
                (-((c - cx).powi(2) + (r - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
            })
            .collect()
    }

    fn steps_for(grad: &DiscreteGradient) -> StepSizes {
        configure_steps(0.1, 1.0, grad.operator_norm().unwrap()).unwrap()
    }

    #[test]
    fn zero_displacement_returns_the_iterate_unchanged() {
        let geom = FrameGeometry::Grid { nx: 8, ny: 8 };
        let grad = DiscreteGradient::grid(8, 8).unwrap();
        let x = blob(8, 8, 3.0, 4.0, 2.0);
        let state =
            SolverState::initial(x.clone(), grad.n_sites(), steps_for(&grad), 0.5).unwrap();
        let spec = PredictorSpec {
            primal: PrimalPredictor::KnownFlowTranslation,
            dual: DualPredictor::Identity,
        };
        let flow = vec![[0.0, 0.0]; 64];
        let pred = predict_primal(&spec, &state, &geom, Some(&flow)).unwrap();
        assert_eq!(pred, x);
        // Missing hint is an error for the known-flow predictor.
        assert!(predict_primal(&spec, &state, &geom, None).is_err());
        let zero = PredictorSpec { primal: PrimalPredictor::ZeroMotion, dual: DualPredictor::Zero };
        assert_eq!(predict_primal(&zero, &state, &geom, None).unwrap(), x);
    }

    #[test]
    fn exact_flow_warp_reproduces_the_next_frame_within_interpolation_error() {
        let (nx, ny) = (24, 24);
        let geom = FrameGeometry::Grid { nx, ny };
        let sigma = 3.0;
        let cur = blob(nx, ny, 10.0, 12.0, sigma);
        let d = [0.5, 0.25];
        let next = blob(nx, ny, 10.0 + d[0], 12.0 + d[1], sigma);
        let warped = warp_frame(&geom, &cur, &vec![d; nx * ny]).unwrap();
        // Bilinear error bound for a unit-amplitude Gaussian: second
        // derivatives are at most 1/sigma^2, so the interpolant is within
        // (M_xx + M_yy)/8 of the shifted truth away from the clamped border.
        let bound = 2.0 / (sigma * sigma) / 8.0 + 1e-12;
        for r in 2..ny - 2 {
            for c in 2..nx - 2 {
                let p = r * nx + c;
                assert!(
                    (warped[p] - next[p]).abs() <= bound,
                    "pixel ({r},{c}): {} vs {}",
                    warped[p],
                    next[p]
                );
            }
        }
    }

    #[test]
    fn constant_frame_is_a_fixed_point_of_every_predictor() {
        let (nx, ny) = (10, 10);
        let geom = FrameGeometry::Grid { nx, ny };
        let grad = DiscreteGradient::grid(nx, ny).unwrap();
        let steps = steps_for(&grad);
        let x = vec![1.5; nx * ny];
        let mut state = SolverState::initial(x.clone(), grad.n_sites(), steps, 0.5).unwrap();
        state.prev_x = Some(x.clone());
        let flow = vec![[0.7, -0.3]; nx * ny];
        for primal in [
            PrimalPredictor::ZeroMotion,
            PrimalPredictor::KnownFlowTranslation,
            PrimalPredictor::OpticalFlow,
        ] {
            let spec = PredictorSpec { primal, dual: DualPredictor::Identity };
            let pred = predict_primal(&spec, &state, &geom, Some(&flow)).unwrap();
            for (a, b) in pred.iter().zip(&x) {
                assert!((a - b).abs() < 1e-12, "{primal:?}");
            }
        }
    }

    #[test]
    fn mesh_warp_interpolates_nodal_values() {
        let mesh = crate::eit::disk_mesh(161, 16).unwrap();
        let geom = FrameGeometry::Mesh(&mesh);
        // Linear field u = x + 2y is reproduced exactly by P1 interpolation,
        // so a rigid shift warps it exactly (up to boundary clamping).
        let u: Vec<f64> = mesh.coords().iter().map(|c| c[0] + 2.0 * c[1]).collect();
        let d = [0.05, -0.03];
        let warped = warp_frame(&geom, &u, &vec![d; mesh.n_nodes()]).unwrap();
        for (i, c) in mesh.coords().iter().enumerate() {
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            if r < 0.9 {
                let want = (c[0] - d[0]) + 2.0 * (c[1] - d[1]);
                assert!((warped[i] - want).abs() < 1e-10, "node {i}");
            }
        }
    }

    #[test]
    fn dual_predictors_respect_feasibility() {
        let (nx, ny) = (9, 9);
        let geom = FrameGeometry::Grid { nx, ny };
        let grad = DiscreteGradient::grid(nx, ny).unwrap();
        let steps = steps_for(&grad);
        let alpha = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..25 {
            let mut state =
                SolverState::initial(vec![0.0; 81], grad.n_sites(), steps, alpha).unwrap();
            state.y = (0..2 * grad.n_sites()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let flow = vec![[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]; nx * ny];
            let spec =
                PredictorSpec { primal: PrimalPredictor::ZeroMotion, dual: DualPredictor::AffineScaling };
            let pred = predict_dual(&spec, &state, &geom, Some(&flow)).unwrap();
            for s in 0..grad.n_sites() {
                let n = (pred[2 * s].powi(2) + pred[2 * s + 1].powi(2)).sqrt();
                assert!(n <= alpha + 1e-12);
            }
            // Zero dual stays zero under every variant.
            state.y = vec![0.0; 2 * grad.n_sites()];
            for dual in [DualPredictor::Identity, DualPredictor::Zero, DualPredictor::AffineScaling] {
                let spec = PredictorSpec { primal: PrimalPredictor::ZeroMotion, dual };
                let pred = predict_dual(&spec, &state, &geom, Some(&flow)).unwrap();
                assert!(pred.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn step_guard_rescales_and_rejects() {
        let ok = configure_steps(0.01, 1.0, 2.0).unwrap();
        assert!(!ok.rescaled);
        assert_eq!(ok.tau, 0.01);
        let fixed = configure_steps(0.55, 10.0, 8.0_f64.sqrt()).unwrap();
        assert!(fixed.rescaled);
        assert!(fixed.tau * fixed.s * fixed.k_norm * fixed.k_norm < 1.0);
        assert_eq!(fixed.s, 10.0);
        assert!(configure_steps(-1.0, 1.0, 1.0).is_err());
        assert!(configure_steps(0.1, 0.0, 1.0).is_err());
    }

    #[test]
    fn corrector_fixes_a_saddle_point() {
        let (nx, ny) = (8, 8);
        let grad = DiscreteGradient::grid(nx, ny).unwrap();
        let op = LinearFrameOperator::identity(nx * ny);
        let model = FrameModel::Linear(&op);
        let box_c = BoxConstraint::new(-10.0, 10.0).unwrap();
        let alpha = 0.4;
        let steps = steps_for(&grad);
        // Constant primal with any feasible dual: choosing b = x* + K^T y*
        // makes (x*, y*) a saddle point of the per-frame Lagrangian.
        let x_star = vec![1.0; nx * ny];
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let raw: Vec<f64> = (0..2 * grad.n_sites()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ball = DualBall::new(alpha / 2.0).unwrap();
        let y_star = project_dual_ball(&ball, &raw).unwrap();
        let b: Vec<f64> = x_star
            .iter()
            .zip(grad.div_apply(&y_star).unwrap())
            .map(|(&x, k)| x + k)
            .collect();
        let precision = vec![1.0; b.len()];
        let mut state = SolverState::initial(x_star.clone(), grad.n_sites(), steps, alpha).unwrap();
        state.y = y_star.clone();
        let (next, _) =
            corrector_step(&state, &model, &grad, &box_c, &b, &precision, &x_star, &y_star)
                .unwrap();
        assert_eq!(next.x, x_star);
        assert_eq!(next.y, y_star);
    }

    #[test]
    fn corrector_validates_inputs() {
        let grad = DiscreteGradient::grid(4, 4).unwrap();
        let op = LinearFrameOperator::identity(16);
        let model = FrameModel::Linear(&op);
        let box_c = BoxConstraint::new(0.0, 1.0).unwrap();
        let mut steps = steps_for(&grad);
        let state = SolverState::initial(vec![0.5; 16], grad.n_sites(), steps, 1.0).unwrap();
        let b = vec![0.5; 16];
        let p = vec![1.0; 16];
        let y = vec![0.0; 2 * grad.n_sites()];
        assert!(corrector_step(&state, &model, &grad, &box_c, &b[..4], &p[..4], &state.x, &y)
            .is_err());
        steps.tau = 100.0;
        let bad = SolverState { steps, ..state.clone() };
        let err =
            corrector_step(&bad, &model, &grad, &box_c, &b, &p, &state.x, &y).unwrap_err();
        assert!(err.to_string().contains("step-size"));
    }

    fn linear_run_config<'a>(
        op: &'a LinearFrameOperator,
        grad: &'a DiscreteGradient,
        x0: Vec<f64>,
    ) -> OnlineConfig<'a> {
        OnlineConfig {
            model: FrameModel::Linear(op),
            grad,
            geometry: FrameGeometry::Grid { nx: 8, ny: 8 },
            box_c: BoxConstraint::new(-4.0, 4.0).unwrap(),
            alpha: 0.2,
            tau: 0.5,
            s: 0.2,
            predictor: PredictorSpec {
                primal: PrimalPredictor::ZeroMotion,
                dual: DualPredictor::Identity,
            },
            x0,
            motion_hints: None,
        }
    }

    fn moving_stream(op: &LinearFrameOperator, n_frames: usize, delta: f64) -> MeasurementStream {
        let exact: Vec<Vec<f64>> = (0..n_frames)
            .map(|k| {
                let truth = blob(8, 8, 2.0 + 0.2 * k as f64, 4.0, 1.5);
                op.apply(&truth).unwrap()
            })
            .collect();
        let stream = MeasurementStream::unit_precision(exact).unwrap();
        let spec = NoiseSpec::with_defaults(delta, 99).unwrap();
        crate::model::generate_noise(&stream, &spec).unwrap()
    }

    #[test]
    fn online_run_emits_feasible_iterates_and_handles_a_single_frame() {
        let op = LinearFrameOperator::gaussian_blur(8, 8).unwrap();
        let grad = DiscreteGradient::grid(8, 8).unwrap();
        let cfg = linear_run_config(&op, &grad, vec![0.0; 64]);
        let stream = moving_stream(&op, 1, 0.01);
        let run = run_online(&cfg, &stream).unwrap();
        assert_eq!(run.trajectory.n_frames(), 1);
        assert!(run.records[0].dual_feasible && run.records[0].box_feasible);

        let stream = moving_stream(&op, 12, 0.01);
        let run = run_online(&cfg, &stream).unwrap();
        assert!(run.records.iter().all(|r| r.dual_feasible && r.box_feasible));
        assert_eq!(run.trajectory.n_frames(), 12);
    }

    #[test]
    fn longer_runs_share_a_bitwise_identical_prefix() {
        let op = LinearFrameOperator::gaussian_blur(8, 8).unwrap();
        let grad = DiscreteGradient::grid(8, 8).unwrap();
        let cfg = linear_run_config(&op, &grad, vec![0.0; 64]);
        let short = run_online(&cfg, &moving_stream(&op, 6, 0.05)).unwrap();
        let long = run_online(&cfg, &moving_stream(&op, 10, 0.05)).unwrap();
        for k in 0..6 {
            assert_eq!(short.trajectory.frames[k], long.trajectory.frames[k], "frame {k}");
            assert_eq!(short.duals[k], long.duals[k], "dual {k}");
        }
    }

    #[test]
    fn optical_flow_prediction_beats_zero_motion_on_a_moving_blob() {
        let (nx, ny) = (16, 16);
        let geom = FrameGeometry::Grid { nx, ny };
        let grad = DiscreteGradient::grid(nx, ny).unwrap();
        let steps = steps_for(&grad);
        let prev = blob(nx, ny, 6.0, 8.0, 2.0);
        let cur = blob(nx, ny, 6.8, 8.0, 2.0);
        let next = blob(nx, ny, 7.6, 8.0, 2.0);
        let mut state = SolverState::initial(cur.clone(), grad.n_sites(), steps, 0.5).unwrap();
        state.prev_x = Some(prev);
        let spec =
            PredictorSpec { primal: PrimalPredictor::OpticalFlow, dual: DualPredictor::Identity };
        let pred = predict_primal(&spec, &state, &geom, None).unwrap();
        let err = |a: &[f64]| -> f64 {
            a.iter().zip(&next).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        assert!(
            err(&pred) < 0.8 * err(&cur),
            "flow prediction {} vs zero-motion {}",
            err(&pred),
            err(&cur)
        );
        // Mesh geometry is not supported for flow estimation.
        let mesh = crate::eit::disk_mesh(49, 16).unwrap();
        let mesh_geom = FrameGeometry::Mesh(&mesh);
        let mut mstate =
            SolverState::initial(vec![1.0; 49], 1, steps, 0.5).unwrap();
        mstate.prev_x = Some(vec![1.0; 49]);
        assert!(predict_primal(&spec, &mstate, &mesh_geom, None).is_err());
    }

    #[test]
    fn eit_frames_cost_one_pde_and_one_adjoint_solve() {
        let mesh = crate::eit::disk_mesh(161, 16).unwrap();
        let sys = crate::eit::CemSystem::with_uniform_impedance(mesh.clone(), 0.01).unwrap();
        let grad = {
            let coords = mesh.coords().to_vec();
            let tris = mesh.triangles().to_vec();
            DiscreteGradient::mesh_p1(&coords, &tris).unwrap()
        };
        let n = mesh.n_nodes();
        let sigma_true: Vec<f64> = mesh
            .coords()
            .iter()
            .map(|c| 1.0 + if (c[0] - 0.3).powi(2) + c[1].powi(2) < 0.09 { 1.0 } else { 0.0 })
            .collect();
        let b = {
            let sol = sys.solve_forward(&sigma_true).unwrap();
            sys.measurement_vector(&sol.currents).unwrap()
        };
        sys.reset_counters();
        let exact = vec![b.clone(), b.clone(), b];
        let stream = MeasurementStream::unit_precision(exact).unwrap();
        let stream =
            crate::model::generate_noise(&stream, &NoiseSpec::with_defaults(1e-4, 7).unwrap())
                .unwrap();
        let cfg = OnlineConfig {
            model: FrameModel::Eit(&sys),
            grad: &grad,
            geometry: FrameGeometry::Mesh(&mesh),
            box_c: BoxConstraint::new(0.1, 10.0).unwrap(),
            alpha: 0.9,
            tau: 0.0053,
            s: 10.0,
            predictor: PredictorSpec {
                primal: PrimalPredictor::ZeroMotion,
                dual: DualPredictor::AffineScaling,
            },
            x0: vec![1.0; n],
            motion_hints: None,
        };
        let run = run_online(&cfg, &stream).unwrap();
        for r in &run.records {
            assert_eq!(r.pde_solves, 1, "frame {}", r.frame);
            assert_eq!(r.adjoint_solves, 1, "frame {}", r.frame);
            assert!(r.dual_feasible && r.box_feasible);
        }
        assert_eq!(sys.pde_solve_count(), 3);
        assert_eq!(sys.adjoint_solve_count(), 3);
    }
}
