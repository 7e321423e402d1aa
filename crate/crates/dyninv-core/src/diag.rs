//! Diagnostics: measured evaluation of the noise conditions, the residual
//! bounds, and both sides of the convergence estimates on finished runs.
//!
//! Nothing in this module solves anything. Every function takes computed
//! trajectories, duals and accuracy reports, evaluates the two sides of an
//! inequality, and reports values and margins. The loss convention matches
//! the solvers: `l(y) = 0.5 |P y|^2` with `P = diag(precision)`, so
//! `l'(y) = P^2 y`, and all plain norms are Euclidean.

use crate::convex::{certify_subdiff, CertMode, GridFunction, SubdiffCertificate};
use crate::error::{Error, Result};
use crate::linop::LinearFrameOperator;
use crate::model::{MeasurementStream, NoiseSpec, Trajectory};
use crate::online::FrameModel;
use crate::reg::DiscreteGradient;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Largest constant the quadratic residual bound is expected to need for a
/// quadratic loss: 1 exactly for noiseless data, up to 1.5 for adversarial
/// noise, and about 1 for uncorrelated noise. Verdicts flag anything above.
pub const QUADRATIC_C_CAP: f64 = 1.05;

/// Ridge added to the witness normal equations when they are not factorable.
const WITNESS_RIDGE: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `l(y) = 0.5 |P y|^2`.
pub fn weighted_loss(y: &[f64], precision: &[f64]) -> f64 {
    0.5 * y
        .iter()
        .zip(precision)
        .map(|(v, p)| (p * v) * (p * v))
        .sum::<f64>()
}

/// `|l'(y)|^2 = |P^2 y|^2`.
pub fn weighted_grad_energy(y: &[f64], precision: &[f64]) -> f64 {
    y.iter()
        .zip(precision)
        .map(|(v, p)| {
            let g = p * p * v;
            g * g
        })
        .sum()
}

fn check_pair(x: &Trajectory, other: &Trajectory, what: &str) -> Result<()> {
    if x.n_frames() != other.n_frames() || x.frame_dim != other.frame_dim {
        return Err(Error::Shape(format!(
            "{what}: {} frames of dim {} against {} frames of dim {}",
            x.n_frames(),
            x.frame_dim,
            other.n_frames(),
            other.frame_dim
        )));
    }
    Ok(())
}

/// Cumulative averaged squared error `(1/(k+1)) sum_{t<=k} |x_t - truth_t|^2`
/// at every horizon `k`. Entries are nonnegative by construction.
pub fn averaged_sq_error(x: &Trajectory, truth: &Trajectory) -> Result<Vec<f64>> {
    check_pair(x, truth, "averaged_sq_error")?;
    let mut out = Vec::with_capacity(x.n_frames());
    let mut running = 0.0;
    for (k, (a, b)) in x.frames.iter().zip(&truth.frames).enumerate() {
        running += a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        out.push(running / (k + 1) as f64);
    }
    Ok(out)
}

/// Rescales a converged dual field from the radius-`alpha` ball back to the
/// unit ball and applies `K^T`, yielding a candidate regulariser subgradient
/// `K^T y / alpha` at the primal solution the dual certifies.
pub fn subgradient_from_dual(k_op: &DiscreteGradient, y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!(
            "dual rescaling needs alpha > 0, got {alpha}"
        )));
    }
    let mut v = k_op.div_apply(y)?;
    for c in &mut v {
        *c /= alpha;
    }
    Ok(v)
}

/// Frame-wise Bregman increments `R(x_k) - R(x̂_k) + <v_k, x_k - x̂_k>`.
///
/// Each increment is nonnegative whenever `-v_k` is an `R`-subgradient at
/// `x̂_k`; the sum over frames is the trajectory-level divergence.
pub fn bregman_increments<R>(
    r: R,
    x: &Trajectory,
    x_hat: &Trajectory,
    v: &[Vec<f64>],
) -> Result<Vec<f64>>
where
    R: Fn(&[f64]) -> Result<f64>,
{
    check_pair(x, x_hat, "bregman_increments")?;
    if v.len() != x.n_frames() {
        return Err(Error::Shape(format!(
            "bregman_increments: {} witness fields for {} frames",
            v.len(),
            x.n_frames()
        )));
    }
    let mut out = Vec::with_capacity(x.n_frames());
    for k in 0..x.n_frames() {
        if v[k].len() != x.frame_dim {
            return Err(Error::Shape(format!(
                "bregman_increments: witness dim {} at frame {k}, expected {}",
                v[k].len(),
                x.frame_dim
            )));
        }
        let gap: f64 = x.frames[k]
            .iter()
            .zip(&x_hat.frames[k])
            .zip(&v[k])
            .map(|((a, b), w)| w * (a - b))
            .sum();
        out.push(r(&x.frames[k])? - r(&x_hat.frames[k])? + gap);
    }
    Ok(out)
}

/// Trajectory-level Bregman divergence; see [`bregman_increments`].
pub fn bregman_r<R>(r: R, x: &Trajectory, x_hat: &Trajectory, v: &[Vec<f64>]) -> Result<f64>
where
    R: Fn(&[f64]) -> Result<f64>,
{
    Ok(bregman_increments(r, x, x_hat, v)?.iter().sum())
}

/// Least-squares source element fitted against a regulariser subgradient.
#[derive(Clone, Debug)]
pub struct SourceWitness {
    /// Measurement-space witness, one vector per frame.
    pub w: Vec<Vec<f64>>,
    /// `|w_k|^2` per frame; prefix sums feed the horizon-indexed estimates.
    pub w_sq: Vec<f64>,
    /// `sqrt(sum_k |A^T w_k + v̂_k|^2)` over the whole horizon.
    pub residual: f64,
    /// `sum_k |w_k|^2 / (N+1)`.
    pub w_sq_mean: f64,
    /// Set when the normal equations needed the ridge fallback.
    pub ridge_fallback: bool,
}

/// Fits `ŵ` frame by frame as the minimiser of `|A^T w + v̂_k|`, so that
/// `-A^T ŵ_k` matches the supplied subgradient as closely as the range of
/// `A^T` allows. Singular normal equations fall back to a small ridge and
/// set [`SourceWitness::ridge_fallback`].
pub fn fit_source_witness(
    op: &LinearFrameOperator,
    v_hat: &[Vec<f64>],
) -> Result<SourceWitness> {
    if v_hat.is_empty() {
        return Err(Error::InvalidInput("witness fit needs at least one frame".into()));
    }
    let (m, n) = (op.output_dim(), op.input_dim());
    for (k, v) in v_hat.iter().enumerate() {
        if v.len() != n {
            return Err(Error::Shape(format!(
                "witness fit: subgradient dim {} at frame {k}, expected {n}",
                v.len()
            )));
        }
    }
    // Gram = A A^T, assembled column by column through the operator.
    let mut gram = DMatrix::zeros(m, m);
    let mut e = vec![0.0; m];
    for j in 0..m {
        e[j] = 1.0;
        let col = op.apply(&op.adjoint_apply(&e)?)?;
        for i in 0..m {
            gram[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let mut ridge_fallback = false;
    let chol = match Cholesky::new(gram.clone()) {
        Some(c) => c,
        None => {
            ridge_fallback = true;
            Cholesky::new(gram + DMatrix::identity(m, m) * WITNESS_RIDGE).ok_or_else(|| {
                Error::Numerical("witness normal matrix is not factorable even with ridge".into())
            })?
        }
    };
    let mut w = Vec::with_capacity(v_hat.len());
    let mut w_sq = Vec::with_capacity(v_hat.len());
    let mut res_sq = 0.0;
    for v in v_hat {
        let rhs = op.apply(v)?;
        let mut b = DVector::from_vec(rhs);
        b.neg_mut();
        let wk: Vec<f64> = chol.solve(&b).iter().copied().collect();
        let fit = op.adjoint_apply(&wk)?;
        res_sq += fit.iter().zip(v).map(|(a, b)| (a + b) * (a + b)).sum::<f64>();
        w_sq.push(dot(&wk, &wk));
        w.push(wk);
    }
    let w_sq_mean = w_sq.iter().sum::<f64>() / v_hat.len() as f64;
    Ok(SourceWitness { w, w_sq, residual: res_sq.sqrt(), w_sq_mean, ridge_fallback })
}

/// Measured noise levels against the two standing noise inequalities.
#[derive(Clone, Copy, Debug)]
pub struct NoiseCheck {
    pub pass: bool,
    /// `(1/(N+1)) sum_k |l'(n_k)|^2`, required `<= delta`.
    pub grad_level: f64,
    /// `(1/(N+1)) sum_k l(n_k)`, required `<= c' delta^q`.
    pub loss_level: f64,
}

/// Evaluates both noise-level inequalities on a corrupted stream.
pub fn check_noise_levels(stream: &MeasurementStream, spec: &NoiseSpec) -> Result<NoiseCheck> {
    let n = stream.n_frames();
    if n == 0 {
        return Err(Error::InvalidInput("noise check needs at least one frame".into()));
    }
    let mut ge = 0.0;
    let mut le = 0.0;
    for k in 0..n {
        let nk = stream.noise_frame(k);
        ge += weighted_grad_energy(&nk, &stream.precision);
        le += weighted_loss(&nk, &stream.precision);
    }
    let grad_level = ge / n as f64;
    let loss_level = le / n as f64;
    let slack = 1.0 + 1e-12;
    let pass = grad_level <= spec.delta * slack
        && loss_level <= spec.c_prime * spec.delta.powf(spec.q) * slack;
    Ok(NoiseCheck { pass, grad_level, loss_level })
}

/// Smallest constant closing the quadratic residual bound.
#[derive(Clone, Debug)]
pub struct QuadraticBound {
    /// Smallest valid constant over every horizon.
    pub c: f64,
    /// Smallest valid constant at each horizon.
    pub per_horizon: Vec<f64>,
}

/// Computes, per horizon `N`, the smallest `C` with
/// `sum_{k<=N} l(A x_k - A x̂_k) <= C sum_{k<=N} (l(A x_k - b_k) + |l'(n_k)|^2)`,
/// and the largest such constant over the run. A horizon with zero left-hand
/// side needs no constant and reports 0.
pub fn check_quadratic_bound(
    gap_loss: &[f64],
    fit_loss: &[f64],
    noise_grad: &[f64],
) -> Result<QuadraticBound> {
    let n = gap_loss.len();
    if n == 0 || fit_loss.len() != n || noise_grad.len() != n {
        return Err(Error::Shape(format!(
            "quadratic bound: got series of lengths {}, {}, {}",
            n,
            fit_loss.len(),
            noise_grad.len()
        )));
    }
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut per_horizon = Vec::with_capacity(n);
    for k in 0..n {
        lhs += gap_loss[k];
        rhs += fit_loss[k] + noise_grad[k];
        per_horizon.push(if lhs == 0.0 {
            0.0
        } else if rhs == 0.0 {
            f64::INFINITY
        } else {
            lhs / rhs
        });
    }
    let c = per_horizon.iter().copied().fold(0.0, f64::max);
    Ok(QuadraticBound { c, per_horizon })
}

/// Frame-wise margins of the linearised data-fidelity condition.
#[derive(Clone, Debug)]
pub struct LinearisationCheck {
    /// `LHS - eta RHS` per frame; nonnegative means the condition holds.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub negatives: usize,
    /// Hard verdict in linear mode, `None` for nonlinear models where the
    /// margins are surfaced as empirical evidence only.
    pub pass: Option<bool>,
}

/// Evaluates, per frame,
/// `<l'(b̂-b), A(x)-A(x̂)-A'(x̂)d> + B_l(A(x)-b, A(x̂)-b) - eta |A'(x̂)d|^2`
/// with `d = x - x̂`. For a linear model and the quadratic loss the first
/// term vanishes and the margin is nonnegative exactly when `eta <= 1/2`
/// holds in the unit-precision case.
pub fn check_linearisation(
    model: &FrameModel,
    x: &Trajectory,
    x_hat: &Trajectory,
    stream: &MeasurementStream,
    eta: f64,
) -> Result<LinearisationCheck> {
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("linearisation check needs eta > 0, got {eta}")));
    }
    check_pair(x, x_hat, "check_linearisation")?;
    if stream.n_frames() != x.n_frames() {
        return Err(Error::Shape(format!(
            "check_linearisation: {} data frames for {} iterates",
            stream.n_frames(),
            x.n_frames()
        )));
    }
    if x.frame_dim != model.input_dim() {
        return Err(Error::Shape(format!(
            "check_linearisation: frame dim {} against model input {}",
            x.frame_dim,
            model.input_dim()
        )));
    }
    let p = &stream.precision;
    let mut margins = Vec::with_capacity(x.n_frames());
    let mut negatives = 0;
    for k in 0..x.n_frames() {
        let xk = &x.frames[k];
        let xh = &x_hat.frames[k];
        let d: Vec<f64> = xk.iter().zip(xh).map(|(a, b)| a - b).collect();
        let (ax, axh, ad) = match model {
            FrameModel::Linear(op) => (op.apply(xk)?, op.apply(xh)?, op.apply(&d)?),
            FrameModel::Eit(sys) => {
                let sol = sys.solve_forward(xh)?;
                let axh = sys.measurement_vector(&sol.currents)?;
                (model.apply_measure(xk)?, axh, sys.jacobian_apply(&sol, &d)?)
            }
        };
        // n̂ = b̂ - b_delta is minus the recorded noise.
        let mut term1 = 0.0;
        let mut term2 = 0.0;
        let mut rhs = 0.0;
        let nk = stream.noise_frame(k);
        for j in 0..ax.len() {
            let defect = ax[j] - axh[j] - ad[j];
            term1 += p[j] * p[j] * (-nk[j]) * defect;
            let g = p[j] * (ax[j] - axh[j]);
            term2 += 0.5 * g * g;
            rhs += ad[j] * ad[j];
        }
        let margin = term1 + term2 - eta * rhs;
        if margin < -1e-9 * (1.0 + rhs) {
            negatives += 1;
        }
        margins.push(margin);
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = match model {
        FrameModel::Linear(_) => Some(negatives == 0),
        FrameModel::Eit(_) => None,
    };
    Ok(LinearisationCheck { margins, min_margin, negatives, pass })
}

/// Horizon-indexed evaluation of a two-sided estimate.
#[derive(Clone, Debug)]
pub struct TheoremSeries {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub holds: Vec<bool>,
    pub violations: usize,
    /// Smallest slack `rhs - lhs` over all horizons.
    pub worst_margin: f64,
}

fn series_from(lhs: Vec<f64>, rhs: Vec<f64>) -> TheoremSeries {
    let mut holds = Vec::with_capacity(lhs.len());
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for (l, r) in lhs.iter().zip(&rhs) {
        let ok = *l <= r + 1e-12 * (1.0 + r.abs());
        if !ok {
            violations += 1;
        }
        worst = worst.min(r - l);
        holds.push(ok);
    }
    TheoremSeries { lhs, rhs, holds, violations, worst_margin: worst }
}

/// Checks the averaged Bregman estimate at every horizon `N`:
/// `(1/(N+1)) B <= delta/(2 eta alpha) + e^N/(alpha (N+1))
///  + alpha |ŵ^N|^2/(2 eta (N+1))`,
/// with `B` accumulated from `breg_inc`, `|ŵ^N|^2` from `w_sq`, and `e^N`
/// the clipped prefix accuracy.
pub fn theorem_bregman_check(
    breg_inc: &[f64],
    w_sq: &[f64],
    prefix_e: &[f64],
    delta: f64,
    alpha: f64,
    eta: f64,
) -> Result<TheoremSeries> {
    let n = breg_inc.len();
    if n == 0 || w_sq.len() != n || prefix_e.len() != n {
        return Err(Error::Shape(format!(
            "bregman theorem: got series of lengths {}, {}, {}",
            n,
            w_sq.len(),
            prefix_e.len()
        )));
    }
    if !(alpha > 0.0) || !(eta > 0.0) || !(delta >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "bregman theorem needs alpha, eta > 0 and delta >= 0, got {alpha}, {eta}, {delta}"
        )));
    }
    let mut bsum = 0.0;
    let mut wsum = 0.0;
    let mut lhs = Vec::with_capacity(n);
    let mut rhs = Vec::with_capacity(n);
    for k in 0..n {
        bsum += breg_inc[k];
        wsum += w_sq[k];
        let m = (k + 1) as f64;
        lhs.push(bsum / m);
        rhs.push(delta / (2.0 * eta * alpha) + prefix_e[k] / (alpha * m) + alpha * wsum / (2.0 * eta * m));
    }
    Ok(series_from(lhs, rhs))
}

/// The bound constant `D^N` together with the margins of its two
/// consequences.
#[derive(Clone, Debug)]
pub struct BoundConstD {
    /// `D^N = (c' delta^q + delta)/alpha + e^N/(alpha (N+1)) + R(x̂^N)/(N+1)`.
    pub d: Vec<f64>,
    /// `alpha C D^N - (1/(N+1)) sum l(A x_k - A x̂_k)`, nonnegative when the
    /// consequence holds.
    pub fit_margin: Vec<f64>,
    /// `D^N - (1/(N+1)) sum R(x_k)`.
    pub reg_margin: Vec<f64>,
    pub fit_violations: usize,
    pub reg_violations: usize,
    pub worst_margin: f64,
}

/// Evaluates `D^N` at every horizon and asserts both of its consequences on
/// the measured run, using the supplied quadratic-bound constant `c`.
pub fn boundconst_d(
    gap_loss: &[f64],
    reg_vals: &[f64],
    reg_hat: &[f64],
    prefix_e: &[f64],
    spec: &NoiseSpec,
    alpha: f64,
    c: f64,
) -> Result<BoundConstD> {
    let n = gap_loss.len();
    if n == 0 || reg_vals.len() != n || reg_hat.len() != n || prefix_e.len() != n {
        return Err(Error::Shape(format!(
            "bound constant: got series of lengths {}, {}, {}, {}",
            n,
            reg_vals.len(),
            reg_hat.len(),
            prefix_e.len()
        )));
    }
    if !(alpha > 0.0) || !(c >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "bound constant needs alpha > 0 and c >= 0, got {alpha}, {c}"
        )));
    }
    let head = (spec.c_prime * spec.delta.powf(spec.q) + spec.delta) / alpha;
    let mut cum_gap = 0.0;
    let mut cum_reg = 0.0;
    let mut cum_hat = 0.0;
    let mut d = Vec::with_capacity(n);
    let mut fit_margin = Vec::with_capacity(n);
    let mut reg_margin = Vec::with_capacity(n);
    let mut fit_violations = 0;
    let mut reg_violations = 0;
    let mut worst = f64::INFINITY;
    for k in 0..n {
        cum_gap += gap_loss[k];
        cum_reg += reg_vals[k];
        cum_hat += reg_hat[k];
        let m = (k + 1) as f64;
        let dk = head + prefix_e[k] / (alpha * m) + cum_hat / m;
        let fm = alpha * c * dk - cum_gap / m;
        let rm = dk - cum_reg / m;
        if fm < -1e-12 * (1.0 + (alpha * c * dk).abs()) {
            fit_violations += 1;
        }
        if rm < -1e-12 * (1.0 + dk.abs()) {
            reg_violations += 1;
        }
        worst = worst.min(fm).min(rm);
        d.push(dk);
        fit_margin.push(fm);
        reg_margin.push(rm);
    }
    Ok(BoundConstD { d, fit_margin, reg_margin, fit_violations, reg_violations, worst_margin: worst })
}

/// Per-noise-level inputs for the limit-quantity table.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub delta: f64,
    pub alpha: f64,
    pub eta: f64,
    /// Subdifferentiability factor; held fixed per scenario so the limits
    /// are comparable across noise levels.
    pub gamma: f64,
    pub prefix_e: Vec<f64>,
    pub w_sq: Vec<f64>,
}

/// Tail-averaged estimates of the three limit quantities at one noise level.
#[derive(Clone, Copy, Debug)]
pub struct LimitRow {
    pub delta: f64,
    /// `(e^N + eps^N)/((N+1) gamma)` with `eps^N = delta (N+1)/eta`.
    pub e1: f64,
    /// `delta / gamma^2`.
    pub e2: f64,
    /// `alpha^2 |ŵ^N|^2 / ((N+1) gamma^2)`.
    pub e3: f64,
}

/// Limit-quantity trend table over a noise grid.
#[derive(Clone, Debug)]
pub struct LimitTable {
    /// One row per noise level, sorted by decreasing `delta`.
    pub rows: Vec<LimitRow>,
    /// Whether each quantity is nonincreasing along the sorted grid.
    pub decreasing: [bool; 3],
}

/// Estimates the three limit quantities by tail averaging (the last quarter
/// of the horizon) and reports whether each decreases with the noise level.
/// Needs at least three distinct levels.
pub fn limit_quantities(runs: &[RunSummary]) -> Result<LimitTable> {
    if runs.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "limit trends need at least three noise levels, got {}",
            runs.len()
        )));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let n = run.prefix_e.len();
        if n == 0 || run.w_sq.len() != n {
            return Err(Error::Shape(format!(
                "limit quantities: prefix series of lengths {} and {}",
                n,
                run.w_sq.len()
            )));
        }
        if !(run.delta > 0.0) || !(run.gamma > 0.0) || !(run.eta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "limit quantities need delta, gamma, eta > 0, got {}, {}, {}",
                run.delta, run.gamma, run.eta
            )));
        }
        let tail = (n / 4).max(1);
        let mut wsum = 0.0;
        let mut q1 = 0.0;
        let mut q3 = 0.0;
        for k in 0..n {
            wsum += run.w_sq[k];
            if k + tail >= n {
                let m = (k + 1) as f64;
                q1 += (run.prefix_e[k] + run.delta * m / run.eta) / (m * run.gamma);
                q3 += run.alpha * run.alpha * wsum / (m * run.gamma * run.gamma);
            }
        }
        rows.push(LimitRow {
            delta: run.delta,
            e1: q1 / tail as f64,
            e2: run.delta / (run.gamma * run.gamma),
            e3: q3 / tail as f64,
        });
    }
    rows.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    for pair in rows.windows(2) {
        if pair[0].delta == pair[1].delta {
            return Err(Error::InvalidInput("limit trends need distinct noise levels".into()));
        }
    }
    let mut decreasing = [true; 3];
    for pair in rows.windows(2) {
        let slack = 1.0 + 1e-12;
        decreasing[0] &= pair[1].e1 <= pair[0].e1 * slack;
        decreasing[1] &= pair[1].e2 <= pair[0].e2 * slack;
        decreasing[2] &= pair[1].e3 <= pair[0].e3 * slack;
    }
    Ok(LimitTable { rows, decreasing })
}

/// Empirical subdifferentiability factor on a lattice neighbourhood.
#[derive(Clone, Copy, Debug)]
pub struct GrowthEstimate {
    /// Largest certified growth factor.
    pub gamma: f64,
    /// Neighbourhood radius the certificate was checked on; the estimate
    /// says nothing outside it.
    pub radius: f64,
    pub checked_points: usize,
}

/// Largest growth factor for which [`certify_subdiff`] passes, found by
/// doubling and bisection. Errors when the slope is not even an
/// `eps`-subgradient (growth zero fails).
pub fn estimate_growth_factor(
    f: &GridFunction,
    point: &[f64],
    slope: &[f64],
    slack: f64,
    radius: f64,
    mode: CertMode,
) -> Result<GrowthEstimate> {
    let attempt = |growth: f64| {
        certify_subdiff(
            f,
            &SubdiffCertificate {
                point: point.to_vec(),
                slope: slope.to_vec(),
                growth,
                slack,
                radius,
                mode,
            },
        )
    };
    let base = attempt(0.0)?;
    if !base.valid {
        return Err(Error::Numerical(format!(
            "slope is not an approximate subgradient on the neighbourhood (worst violation {:.3e})",
            base.worst_violation
        )));
    }
    let cap = 1e9;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while attempt(hi)?.valid {
        lo = hi;
        hi *= 4.0;
        if hi > cap {
            return Ok(GrowthEstimate { gamma: cap, radius, checked_points: base.checked_points });
        }
    }
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if attempt(mid)?.valid {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-9 * hi.max(1.0) {
            break;
        }
    }
    Ok(GrowthEstimate { gamma: lo, radius, checked_points: base.checked_points })
}

/// One evaluation of a distance estimate.
#[derive(Clone, Copy, Debug)]
pub struct DistanceCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Right-hand side shared by the strong and semi-strong distance estimates:
/// `(e + eps)/((N+1) gamma) + delta/(2 gamma^2)
///  + alpha^2 w_sq/(2 gamma^2 (N+1))` with `eps = delta (N+1)/eta`.
pub fn strong_bound_rhs(
    e: f64,
    delta: f64,
    alpha: f64,
    eta: f64,
    gamma: f64,
    w_sq: f64,
    n_frames: usize,
) -> Result<f64> {
    if n_frames == 0 {
        return Err(Error::InvalidInput("distance estimate needs at least one frame".into()));
    }
    if !(gamma > 0.0) || !(eta > 0.0) || !(e >= 0.0) || !(delta >= 0.0) || !(w_sq >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "distance estimate needs gamma, eta > 0 and e, delta, w_sq >= 0; got {gamma}, {eta}, {e}, {delta}, {w_sq}"
        )));
    }
    let m = n_frames as f64;
    let eps = delta * m / eta;
    Ok((e + eps) / (m * gamma) + delta / (2.0 * gamma * gamma)
        + alpha * alpha * w_sq / (2.0 * gamma * gamma * m))
}

/// Checks the averaged distance estimate against a unique reference:
/// `(1/(N+1)) |x - x̂|^2 <= rhs`.
pub fn strong_check(
    x: &Trajectory,
    x_hat: &Trajectory,
    e: f64,
    delta: f64,
    alpha: f64,
    eta: f64,
    gamma: f64,
    w_sq: f64,
) -> Result<DistanceCheck> {
    let errs = averaged_sq_error(x, x_hat)?;
    let lhs = *errs.last().unwrap();
    let rhs = strong_bound_rhs(e, delta, alpha, eta, gamma, w_sq, x.n_frames())?;
    Ok(DistanceCheck { lhs, rhs, holds: lhs <= rhs + 1e-12 * (1.0 + rhs.abs()) })
}

/// Squared distance from a trajectory to a product solution set given by
/// per-frame candidate lists: frames minimise independently.
pub fn trajectory_dist_sq(x: &Trajectory, candidates: &[Vec<Vec<f64>>]) -> Result<f64> {
    if candidates.len() != x.n_frames() {
        return Err(Error::Shape(format!(
            "distance: {} candidate lists for {} frames",
            candidates.len(),
            x.n_frames()
        )));
    }
    let mut total = 0.0;
    for (k, list) in candidates.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::InvalidInput(format!("distance: empty candidate list at frame {k}")));
        }
        let mut best = f64::INFINITY;
        for cand in list {
            if cand.len() != x.frame_dim {
                return Err(Error::Shape(format!(
                    "distance: candidate dim {} at frame {k}, expected {}",
                    cand.len(),
                    x.frame_dim
                )));
            }
            let d: f64 = x.frames[k]
                .iter()
                .zip(cand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d);
        }
        total += best;
    }
    Ok(total)
}

/// Checks the averaged distance-to-solution-set estimate:
/// `(1/(N+1)) dist^2(x, X̂) <= rhs` with the set brute-forced per frame.
pub fn semi_strong_check(
    x: &Trajectory,
    candidates: &[Vec<Vec<f64>>],
    e: f64,
    delta: f64,
    alpha: f64,
    eta: f64,
    gamma: f64,
    w_sq: f64,
) -> Result<DistanceCheck> {
    let lhs = trajectory_dist_sq(x, candidates)? / x.n_frames() as f64;
    let rhs = strong_bound_rhs(e, delta, alpha, eta, gamma, w_sq, x.n_frames())?;
    Ok(DistanceCheck { lhs, rhs, holds: lhs <= rhs + 1e-12 * (1.0 + rhs.abs()) })
}

/// One checked inequality, in the shape the verdict file stores.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub name: String,
    pub frames: usize,
    pub violations: usize,
    /// Smallest observed slack; negative iff there are violations (up to
    /// the evaluation tolerance).
    pub worst_margin: f64,
}

impl Verdict {
    /// `name,frames,violations,worst_margin` on one line.
    pub fn line(&self) -> String {
        format!("{},{},{},{:.9e}", self.name, self.frames, self.violations, self.worst_margin)
    }
}

/// Per-frame verification record; the CSV rows of a run are built from
/// these.
#[derive(Clone, Copy, Debug)]
pub struct DiagnosticsRecord {
    pub frame: usize,
    /// `l(A x_k - b_k)` at the corrected iterate.
    pub data_fit: f64,
    /// `R(x_k)`.
    pub reg_value: f64,
    /// Running mean of `|x_t - x̂_t|^2`, nonnegative.
    pub cum_avg_sq_error: f64,
    /// Frame Bregman increment; nonnegative whenever the fitted witness is a
    /// valid subgradient at the reference.
    pub bregman: f64,
    pub e_increment: f64,
    /// Running mean of `|l'(n_t)|^2` up to this frame.
    pub noise_grad: f64,
    /// Running mean of `l(n_t)` up to this frame.
    pub noise_loss: f64,
    /// Smallest valid quadratic-bound constant at this horizon.
    pub quad_c: f64,
    /// Linearisation margin of this frame.
    pub lin_margin: f64,
    pub thm_lhs: f64,
    pub thm_rhs: f64,
    pub thm_holds: bool,
}

/// Everything a full verification pass needs, measured on one run.
pub struct DiagnoseInputs<'a> {
    pub model: FrameModel<'a>,
    pub k_op: &'a DiscreteGradient,
    /// Computed trajectory under scrutiny.
    pub x: &'a Trajectory,
    /// Minimum-regulariser reference trajectory.
    pub x_hat: &'a Trajectory,
    /// Corrupted stream the run consumed; carries the exact data too.
    pub stream: &'a MeasurementStream,
    pub noise: &'a NoiseSpec,
    pub alpha: f64,
    pub eta: f64,
    /// Clipped prefix accuracy `e^k`, one entry per frame.
    pub prefix_e: &'a [f64],
    /// Clipped frame accuracy increments.
    pub e_increments: &'a [f64],
    /// Converged dual fields certifying a regulariser subgradient, one per
    /// frame.
    pub dual_fields: &'a [Vec<f64>],
}

/// The assembled verification output of one run.
#[derive(Clone, Debug)]
pub struct RunDiagnostics {
    pub records: Vec<DiagnosticsRecord>,
    pub verdicts: Vec<Verdict>,
    pub witness: SourceWitness,
    pub noise: NoiseCheck,
    pub quadratic: QuadraticBound,
    pub linearisation: LinearisationCheck,
    pub theorem: TheoremSeries,
    pub bound_d: BoundConstD,
}

/// Runs every check on a finished linear-mode run: noise levels, the
/// quadratic residual bound, the linearisation margins, the averaged Bregman
/// estimate and the bound-constant consequences, all at every horizon.
///
/// The nonlinear model is rejected here because the witness fit and the
/// minimum-regulariser reference are linear constructions; the individual
/// checks that make sense for it can still be called directly.
pub fn diagnose_run(inp: &DiagnoseInputs) -> Result<RunDiagnostics> {
    let FrameModel::Linear(op) = inp.model else {
        return Err(Error::Unsupported(
            "full diagnostics need the linear forward model; run the individual checks instead"
                .into(),
        ));
    };
    check_pair(inp.x, inp.x_hat, "diagnose_run")?;
    let n = inp.x.n_frames();
    if inp.stream.n_frames() != n
        || inp.prefix_e.len() != n
        || inp.e_increments.len() != n
        || inp.dual_fields.len() != n
    {
        return Err(Error::Shape(format!(
            "diagnose_run: {} frames against stream {}, prefixes {}, increments {}, duals {}",
            n,
            inp.stream.n_frames(),
            inp.prefix_e.len(),
            inp.e_increments.len(),
            inp.dual_fields.len()
        )));
    }
    let p = &inp.stream.precision;
    let tv = |z: &[f64]| crate::reg::tv_value(inp.k_op, z);

    let mut fit_loss = Vec::with_capacity(n);
    let mut gap_loss = Vec::with_capacity(n);
    let mut reg_vals = Vec::with_capacity(n);
    let mut reg_hat = Vec::with_capacity(n);
    let mut noise_grad = Vec::with_capacity(n);
    let mut noise_loss = Vec::with_capacity(n);
    for k in 0..n {
        let ax = op.apply(&inp.x.frames[k])?;
        let axh = op.apply(&inp.x_hat.frames[k])?;
        let b = &inp.stream.corrupted[k];
        let r: Vec<f64> = ax.iter().zip(b).map(|(a, v)| a - v).collect();
        let g: Vec<f64> = ax.iter().zip(&axh).map(|(a, v)| a - v).collect();
        fit_loss.push(weighted_loss(&r, p));
        gap_loss.push(weighted_loss(&g, p));
        reg_vals.push(tv(&inp.x.frames[k])?);
        reg_hat.push(tv(&inp.x_hat.frames[k])?);
        let nk = inp.stream.noise_frame(k);
        noise_grad.push(weighted_grad_energy(&nk, p));
        noise_loss.push(weighted_loss(&nk, p));
    }

    let mut v_hat = Vec::with_capacity(n);
    for y in inp.dual_fields {
        v_hat.push(subgradient_from_dual(inp.k_op, y, inp.alpha)?);
    }
    let witness = fit_source_witness(op, &v_hat)?;
    let mut v_frames = Vec::with_capacity(n);
    for w in &witness.w {
        v_frames.push(op.adjoint_apply(w)?);
    }
    let breg = bregman_increments(tv, inp.x, inp.x_hat, &v_frames)?;

    let noise = check_noise_levels(inp.stream, inp.noise)?;
    let quadratic = check_quadratic_bound(&gap_loss, &fit_loss, &noise_grad)?;
    let linearisation = check_linearisation(&inp.model, inp.x, inp.x_hat, inp.stream, inp.eta)?;
    let theorem =
        theorem_bregman_check(&breg, &witness.w_sq, inp.prefix_e, inp.noise.delta, inp.alpha, inp.eta)?;
    let bound_d = boundconst_d(
        &gap_loss,
        &reg_vals,
        &reg_hat,
        inp.prefix_e,
        inp.noise,
        inp.alpha,
        quadratic.c,
    )?;
    let avg_err = averaged_sq_error(inp.x, inp.x_hat)?;

    let slack = 1.0 + 1e-12;
    let mut records = Vec::with_capacity(n);
    let mut ng_run = 0.0;
    let mut nl_run = 0.0;
    let mut ng_violations = 0;
    let mut nl_violations = 0;
    let mut ng_worst = f64::INFINITY;
    let mut nl_worst = f64::INFINITY;
    let loss_cap = inp.noise.c_prime * inp.noise.delta.powf(inp.noise.q);
    for k in 0..n {
        ng_run += noise_grad[k];
        nl_run += noise_loss[k];
        let m = (k + 1) as f64;
        let ng_mean = ng_run / m;
        let nl_mean = nl_run / m;
        if ng_mean > inp.noise.delta * slack {
            ng_violations += 1;
        }
        if nl_mean > loss_cap * slack {
            nl_violations += 1;
        }
        ng_worst = ng_worst.min(inp.noise.delta - ng_mean);
        nl_worst = nl_worst.min(loss_cap - nl_mean);
        records.push(DiagnosticsRecord {
            frame: k,
            data_fit: fit_loss[k],
            reg_value: reg_vals[k],
            cum_avg_sq_error: avg_err[k],
            bregman: breg[k],
            e_increment: inp.e_increments[k],
            noise_grad: ng_mean,
            noise_loss: nl_mean,
            quad_c: quadratic.per_horizon[k],
            lin_margin: linearisation.margins[k],
            thm_lhs: theorem.lhs[k],
            thm_rhs: theorem.rhs[k],
            thm_holds: theorem.holds[k],
        });
    }

    let quad_violations = quadratic
        .per_horizon
        .iter()
        .filter(|c| **c > QUADRATIC_C_CAP)
        .count();
    let verdicts = vec![
        Verdict { name: "noise-gradient".into(), frames: n, violations: ng_violations, worst_margin: ng_worst },
        Verdict { name: "noise-loss".into(), frames: n, violations: nl_violations, worst_margin: nl_worst },
        Verdict {
            name: "quadratic-c".into(),
            frames: n,
            violations: quad_violations,
            worst_margin: QUADRATIC_C_CAP - quadratic.c,
        },
        Verdict {
            name: "linearisation".into(),
            frames: n,
            violations: linearisation.negatives,
            worst_margin: linearisation.min_margin,
        },
        Verdict {
            name: "bregman-theorem".into(),
            frames: n,
            violations: theorem.violations,
            worst_margin: theorem.worst_margin,
        },
        Verdict {
            name: "bound-constant-fit".into(),
            frames: n,
            violations: bound_d.fit_violations,
            worst_margin: bound_d.fit_margin.iter().copied().fold(f64::INFINITY, f64::min),
        },
        Verdict {
            name: "bound-constant-reg".into(),
            frames: n,
            violations: bound_d.reg_violations,
            worst_margin: bound_d.reg_margin.iter().copied().fold(f64::INFINITY, f64::min),
        },
    ];

    Ok(RunDiagnostics { records, verdicts, witness, noise, quadratic, linearisation, theorem, bound_d })
}
