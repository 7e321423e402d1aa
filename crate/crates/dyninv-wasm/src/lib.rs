//! Browser bindings for the demo page: the moving-scene tracker, the motion
//! profile, and the 1-D conjugate/inf-convolution playground.
//!
//! The computation lives in plain structs (`Tracking`, `Transforms`) so the
//! crate tests on the host; the `#[wasm_bindgen]` wrappers only translate
//! errors into JS strings and hand arrays across the boundary.

use dyninv_core::convex::{conjugate, infconv, GridFunction, Lattice};
use dyninv_core::error::{Error, Result};
use dyninv_core::harness::{build_scenario, default_inclusions};
use dyninv_core::linop::LinearFrameOperator;
use dyninv_core::model::{
    alpha_schedule, generate_noise, rescaled_time, MeasurementStream, NoiseSpec, ScenarioMode,
    ScenarioSpec,
};
use dyninv_core::online::{
    run_online, DualPredictor, FrameGeometry, FrameModel, OnlineConfig, PredictorSpec,
    PrimalPredictor,
};
use dyninv_core::reg::{BoxConstraint, DiscreteGradient};
use wasm_bindgen::prelude::*;

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

// ---------------------------------------------------------------------------
// Tracking demo
// ---------------------------------------------------------------------------

/// One full online reconstruction of the stock two-inclusion scene on an
/// `nx` by `ny` grid, precomputed so the page can scrub through frames.
struct Tracking {
    nx: usize,
    ny: usize,
    alpha: f64,
    truth: Vec<Vec<f64>>,
    recon: Vec<Vec<f64>>,
    curve: Vec<f64>,
}

fn build_tracking(
    nx: usize,
    ny: usize,
    frames: usize,
    delta: f64,
    seed: u64,
    known_flow: bool,
) -> Result<Tracking> {
    if nx * ny > 64 * 64 || frames > 400 {
        return Err(Error::InvalidInput(
            "demo is capped at a 64x64 grid and 400 frames".into(),
        ));
    }
    let spec = ScenarioSpec {
        mode: ScenarioMode::Grid { nx, ny },
        total_frames: frames,
        ramp_frames: (frames * 7) / 10,
        background: 1.0,
        inclusions: default_inclusions(),
        box_lo: 0.0,
        box_hi: 2.0,
    };
    spec.validate()?;
    let scenario = build_scenario(&spec)?;
    let op = LinearFrameOperator::gaussian_blur(nx, ny)?;
    let exact: Vec<Vec<f64>> =
        scenario.truth.frames.iter().map(|f| op.apply(f)).collect::<Result<_>>()?;
    let stream = MeasurementStream::unit_precision(exact)?;
    let noisy = generate_noise(&stream, &NoiseSpec::with_defaults(delta, seed)?)?;
    let grad = DiscreteGradient::grid(nx, ny)?;
    let cfg = OnlineConfig {
        model: FrameModel::Linear(&op),
        grad: &grad,
        geometry: FrameGeometry::Grid { nx, ny },
        box_c: BoxConstraint::new(0.0, 2.0)?,
        alpha: alpha_schedule(delta)?,
        tau: 0.25,
        s: 0.45,
        predictor: PredictorSpec {
            primal: if known_flow {
                PrimalPredictor::KnownFlowTranslation
            } else {
                PrimalPredictor::ZeroMotion
            },
            dual: DualPredictor::Identity,
        },
        x0: vec![1.0; nx * ny],
        motion_hints: Some(&scenario.motion),
    };
    let run = run_online(&cfg, &noisy)?;
    let curve = dyninv_core::diag::averaged_sq_error(&run.trajectory, &scenario.truth)?;
    Ok(Tracking {
        nx,
        ny,
        alpha: cfg.alpha,
        truth: scenario.truth.frames,
        recon: run.trajectory.frames,
        curve,
    })
}

impl Tracking {
    fn frame(source: &[Vec<f64>], k: usize) -> Vec<f64> {
        source.get(k).cloned().unwrap_or_default()
    }
}

#[wasm_bindgen]
pub struct TrackingDemo(Tracking);

#[wasm_bindgen]
impl TrackingDemo {
    /// Runs the whole reconstruction up front; `known_flow` switches the
    /// predictor between carry-over and exact-displacement warping.
    #[wasm_bindgen(constructor)]
    pub fn new(
        nx: u32,
        ny: u32,
        frames: u32,
        delta: f64,
        seed: u32,
        known_flow: bool,
    ) -> std::result::Result<TrackingDemo, JsValue> {
        build_tracking(
            nx as usize,
            ny as usize,
            frames as usize,
            delta,
            seed as u64,
            known_flow,
        )
        .map(TrackingDemo)
        .map_err(js_err)
    }

    pub fn width(&self) -> u32 {
        self.0.nx as u32
    }

    pub fn height(&self) -> u32 {
        self.0.ny as u32
    }

    pub fn frames(&self) -> u32 {
        self.0.truth.len() as u32
    }

    pub fn alpha(&self) -> f64 {
        self.0.alpha
    }

    /// Ground-truth pixels of frame `k`, row-major, empty when out of range.
    pub fn truth_frame(&self, k: u32) -> Vec<f64> {
        Tracking::frame(&self.0.truth, k as usize)
    }

    /// Reconstructed pixels of frame `k`, row-major.
    pub fn recon_frame(&self, k: u32) -> Vec<f64> {
        Tracking::frame(&self.0.recon, k as usize)
    }

    /// Cumulative averaged squared error up to each frame.
    pub fn error_curve(&self) -> Vec<f64> {
        self.0.curve.clone()
    }
}

// ---------------------------------------------------------------------------
// Motion profile
// ---------------------------------------------------------------------------

/// Samples of the rescaled motion parameter over `frames` frames with the
/// ramp at 70%: the curve the scene's speed actually follows.
#[wasm_bindgen]
pub fn motion_profile(frames: u32) -> Vec<f64> {
    let frames = (frames as usize).max(2);
    let ramp = ((frames * 7) / 10).max(1);
    (0..frames)
        .map(|k| rescaled_time(k, ramp).unwrap_or(f64::NAN))
        .collect()
}

/// Centres and visibility of the stock inclusions along the motion
/// parameter. Row stride is `1 + 4 * n`: `s`, then `cx, cy, radius, present`
/// per inclusion, in domain coordinates on the unit square.
#[wasm_bindgen]
pub fn inclusion_track(samples: u32) -> Vec<f64> {
    let samples = (samples as usize).max(2);
    let inclusions = default_inclusions();
    let mut rows = Vec::with_capacity(samples * (1 + 4 * inclusions.len()));
    for i in 0..samples {
        let s = i as f64 / (samples - 1) as f64;
        rows.push(s);
        for inc in &inclusions {
            let theta = inc.phase + inc.sweep * s;
            let present = match inc.vanish {
                Some((a, b)) => !(s >= a && s < b),
                None => true,
            };
            rows.push(0.5 + 0.5 * inc.path_radius * theta.cos());
            rows.push(0.5 + 0.5 * inc.path_radius * theta.sin());
            rows.push(0.5 * inc.radius);
            rows.push(if present { 1.0 } else { 0.0 });
        }
    }
    rows
}

#[wasm_bindgen]
pub fn n_inclusions() -> u32 {
    default_inclusions().len() as u32
}

/// Regularisation weight picked by the noise schedule; NaN outside the
/// schedule's domain.
#[wasm_bindgen]
pub fn alpha_for(delta: f64) -> f64 {
    alpha_schedule(delta).unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// Convex transforms
// ---------------------------------------------------------------------------

/// 1-D playground: `g` and `h` are quadratic-plus-kink functions on a
/// symmetric lattice, and the demo tabulates `g`, `h`, their infimal
/// convolution, and both sides of the dual identity
/// `(g [] h)* = g* + h*` on a dual window.
struct Transforms {
    xs: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
    infconv: Vec<f64>,
    dual_xs: Vec<f64>,
    conj_of_infconv: Vec<f64>,
    conj_sum: Vec<f64>,
}

fn build_transforms(
    curv_g: f64,
    shift_g: f64,
    kink_g: f64,
    curv_h: f64,
    shift_h: f64,
    kink_h: f64,
    radius: f64,
    n: usize,
) -> Result<Transforms> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidInput(format!("lattice radius must be positive, got {radius}")));
    }
    if n < 9 || n > 2001 {
        return Err(Error::InvalidInput("lattice size must be between 9 and 2001 points".into()));
    }
    for (label, c) in [("g", curv_g), ("h", curv_h)] {
        if !(c > 0.0) {
            return Err(Error::InvalidInput(format!(
                "curvature of {label} must be positive, got {c}"
            )));
        }
    }
    for (label, k) in [("g", kink_g), ("h", kink_h)] {
        if k < 0.0 {
            return Err(Error::InvalidInput(format!(
                "kink weight of {label} must be nonnegative, got {k}"
            )));
        }
    }
    let lat = Lattice::symmetric(radius, n, 1)?;
    let quad_kink = |c: f64, b: f64, w: f64| {
        move |x: &[f64]| 0.5 * c * (x[0] - b) * (x[0] - b) + w * x[0].abs()
    };
    let g = GridFunction::from_fn(lat.clone(), quad_kink(curv_g, shift_g, kink_g))?;
    let h = GridFunction::from_fn(lat.clone(), quad_kink(curv_h, shift_h, kink_h))?;
    let conv = infconv(&g, &h)?;

    // The infimal convolution has harmonic-mean curvature, so its conjugate
    // maximiser sits near (shift_g + shift_h) + u / c_conv; the dual window
    // must keep that inside the primal lattice or the tabulated conjugate
    // undershoots. Kinks only pull maximisers inward, so they are ignored.
    let c_conv = 1.0 / (1.0 / curv_g + 1.0 / curv_h);
    let span = 0.75 * radius - (shift_g.abs() + shift_h.abs());
    if !(span > 0.0) {
        return Err(Error::InvalidInput(
            "shifts are too large for the lattice; increase the radius".into(),
        ));
    }
    let dual_radius = c_conv * span;
    let dual = Lattice::symmetric(dual_radius, n.min(401), 1)?;
    let conj_conv = conjugate(&conv, &dual)?;
    let conj_g = conjugate(&g, &dual)?;
    let conj_h = conjugate(&h, &dual)?;
    let conj_sum: Vec<f64> =
        conj_g.values.iter().zip(&conj_h.values).map(|(a, b)| a + b).collect();

    let xs = (0..lat.len()).map(|i| lat.point(i)[0]).collect();
    let dual_xs = (0..dual.len()).map(|i| dual.point(i)[0]).collect();
    Ok(Transforms {
        xs,
        g: g.values,
        h: h.values,
        infconv: conv.values,
        dual_xs,
        conj_of_infconv: conj_conv.values,
        conj_sum,
    })
}

#[wasm_bindgen]
pub struct ConvexDemo(Transforms);

#[wasm_bindgen]
impl ConvexDemo {
    /// `g(x) = curv_g/2 (x - shift_g)^2 + kink_g |x|`, same shape for `h`.
    #[wasm_bindgen(constructor)]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        curv_g: f64,
        shift_g: f64,
        kink_g: f64,
        curv_h: f64,
        shift_h: f64,
        kink_h: f64,
        radius: f64,
        n: u32,
    ) -> std::result::Result<ConvexDemo, JsValue> {
        build_transforms(curv_g, shift_g, kink_g, curv_h, shift_h, kink_h, radius, n as usize)
            .map(ConvexDemo)
            .map_err(js_err)
    }

    pub fn xs(&self) -> Vec<f64> {
        self.0.xs.clone()
    }

    pub fn g(&self) -> Vec<f64> {
        self.0.g.clone()
    }

    pub fn h(&self) -> Vec<f64> {
        self.0.h.clone()
    }

    pub fn infconv(&self) -> Vec<f64> {
        self.0.infconv.clone()
    }

    pub fn dual_xs(&self) -> Vec<f64> {
        self.0.dual_xs.clone()
    }

    /// Left side of the identity: conjugate of the infimal convolution.
    pub fn conj_of_infconv(&self) -> Vec<f64> {
        self.0.conj_of_infconv.clone()
    }

    /// Right side: sum of the individual conjugates.
    pub fn conj_sum(&self) -> Vec<f64> {
        self.0.conj_sum.clone()
    }

    /// Largest pointwise gap between the two sides over the dual window.
    pub fn identity_gap(&self) -> f64 {
        self.0
            .conj_of_infconv
            .iter()
            .zip(&self.0.conj_sum)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
