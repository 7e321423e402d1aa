//! Linear per-frame forward operators.
//!
//! The theory-verification experiments need a forward map whose adjoint is
//! exact (a pure transpose) and whose minimum-norm solutions are computable
//! precisely. The default is a 5x5 truncated Gaussian blur with zero padding,
//! optionally composed with a subsampling mask.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Side length of the blur stencil.
pub const BLUR_SIZE: usize = 5;

/// Standard deviation of the blur kernel, in pixels.
pub const BLUR_SIGMA: f64 = 1.0;

/// The 5x5 truncated Gaussian stencil, renormalised to sum exactly to one.
pub fn gaussian_kernel() -> [[f64; BLUR_SIZE]; BLUR_SIZE] {
    let mut axis = [0.0; BLUR_SIZE];
    for (i, a) in axis.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *a = (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let mut k = [[0.0; BLUR_SIZE]; BLUR_SIZE];
    let mut total = 0.0;
    for i in 0..BLUR_SIZE {
        for j in 0..BLUR_SIZE {
            k[i][j] = axis[i] * axis[j];
            total += k[i][j];
        }
    }
    for row in &mut k {
        for v in row {
            *v /= total;
        }
    }
    k
}

enum Kind {
    Identity,
    Diagonal(Vec<f64>),
    /// Row-major rows x cols matrix.
    Dense(Vec<f64>),
    Blur {
        nx: usize,
        ny: usize,
        kernel: [[f64; BLUR_SIZE]; BLUR_SIZE],
        /// Retained output pixels, strictly increasing; `None` keeps all.
        mask: Option<Vec<usize>>,
    },
}

/// A linear forward operator for one measurement frame.
///
/// Stateless after construction; `apply` and `adjoint_apply` may be called
/// concurrently from multiple threads.
pub struct LinearFrameOperator {
    kind: Kind,
    input_dim: usize,
    output_dim: usize,
}

impl LinearFrameOperator {
    pub fn identity(n: usize) -> Self {
        Self { kind: Kind::Identity, input_dim: n, output_dim: n }
    }

    pub fn diagonal(entries: Vec<f64>) -> Self {
        let n = entries.len();
        Self { kind: Kind::Diagonal(entries), input_dim: n, output_dim: n }
    }

    /// Dense operator from a row-major `rows x cols` matrix.
    pub fn from_dense(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Shape(format!(
                "dense operator needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        Ok(Self { kind: Kind::Dense(entries), input_dim: cols, output_dim: rows })
    }

    /// Gaussian blur on an `nx x ny` pixel grid (row-major, rows of length `nx`).
    pub fn gaussian_blur(nx: usize, ny: usize) -> Result<Self> {
        Self::gaussian_blur_masked(nx, ny, None)
    }

    /// Blur followed by subsampling: only the pixels listed in `mask` are measured.
    pub fn gaussian_blur_masked(nx: usize, ny: usize, mask: Option<Vec<usize>>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidInput("blur grid must be non-empty".into()));
        }
        let n = nx * ny;
        let output_dim = match &mask {
            None => n,
            Some(m) => {
                if m.is_empty() {
                    return Err(Error::InvalidInput("subsampling mask is empty".into()));
                }
                if !m.windows(2).all(|w| w[0] < w[1]) || *m.last().unwrap() >= n {
                    return Err(Error::InvalidInput(
                        "mask indices must be strictly increasing and in range".into(),
                    ));
                }
                m.len()
            }
        };
        Ok(Self {
            kind: Kind::Blur { nx, ny, kernel: gaussian_kernel(), mask },
            input_dim: n,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "apply: expected input dim {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(match &self.kind {
            Kind::Identity => x.to_vec(),
            Kind::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            Kind::Dense(a) => {
                let mut out = vec![0.0; self.output_dim];
                for (r, o) in out.iter_mut().enumerate() {
                    let row = &a[r * self.input_dim..(r + 1) * self.input_dim];
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
                out
            }
            Kind::Blur { nx, ny, kernel, mask } => {
                let full = blur_forward(*nx, *ny, kernel, x);
                match mask {
                    None => full,
                    Some(m) => m.iter().map(|&i| full[i]).collect(),
                }
            }
        })
    }

    pub fn adjoint_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.output_dim {
            return Err(Error::Shape(format!(
                "adjoint_apply: expected output dim {}, got {}",
                self.output_dim,
                y.len()
            )));
        }
        Ok(match &self.kind {
            Kind::Identity => y.to_vec(),
            Kind::Diagonal(d) => d.iter().zip(y).map(|(a, b)| a * b).collect(),
            Kind::Dense(a) => {
                let mut out = vec![0.0; self.input_dim];
                for (r, &yr) in y.iter().enumerate() {
                    let row = &a[r * self.input_dim..(r + 1) * self.input_dim];
                    for (o, &arc) in out.iter_mut().zip(row) {
                        *o += arc * yr;
                    }
                }
                out
            }
            Kind::Blur { nx, ny, kernel, mask } => {
                // Scatter each measurement back through the same stencil taps
                // the forward pass gathered from: an exact transpose.
                let n = nx * ny;
                let mut out = vec![0.0; n];
                let scatter = |out: &mut [f64], pix: usize, w: f64| {
                    let r = pix / nx;
                    let c = pix % nx;
                    for dr in 0..BLUR_SIZE {
                        let rr = r as isize + dr as isize - 2;
                        if rr < 0 || rr >= *ny as isize {
                            continue;
                        }
                        for dc in 0..BLUR_SIZE {
                            let cc = c as isize + dc as isize - 2;
                            if cc < 0 || cc >= *nx as isize {
                                continue;
                            }
                            out[rr as usize * nx + cc as usize] += kernel[dr][dc] * w;
                        }
                    }
                };
                match mask {
                    None => {
                        for (pix, &w) in y.iter().enumerate() {
                            scatter(&mut out, pix, w);
                        }
                    }
                    Some(m) => {
                        for (&pix, &w) in m.iter().zip(y) {
                            scatter(&mut out, pix, w);
                        }
                    }
                }
                out
            }
        })
    }

    /// Largest singular value, estimated by power iteration on `A* A`.
    ///
    /// Deterministic (fixed internal seed). Errors if the Rayleigh estimate
    /// has not settled after the iteration cap.
    pub fn operator_norm(&self) -> Result<f64> {
        let n = self.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(0x51ce_0b1a);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = |z: &[f64]| z.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = norm(&v);
        if nv == 0.0 {
            return Ok(0.0);
        }
        for a in &mut v {
            *a /= nv;
        }
        let mut prev = f64::INFINITY;
        let max_iter = 50_000;
        for _ in 0..max_iter {
            let z = self.adjoint_apply(&self.apply(&v)?)?;
            // Rayleigh quotient v' A'A v = sigma^2 estimate; v is unit.
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
        Err(Error::Numerical(format!(
            "operator norm power iteration did not converge after {max_iter} iterations \
             (last change {:.3e})",
            (prev - norm(&self.adjoint_apply(&self.apply(&v)?)?).sqrt()).abs()
        )))
    }

    /// Materialise the operator as a row-major `output_dim x input_dim` matrix.
    pub fn to_dense(&self) -> Result<Vec<f64>> {
        let mut a = vec![0.0; self.output_dim * self.input_dim];
        let mut e = vec![0.0; self.input_dim];
        for j in 0..self.input_dim {
            e[j] = 1.0;
            let col = self.apply(&e)?;
            e[j] = 0.0;
            for (i, &v) in col.iter().enumerate() {
                a[i * self.input_dim + j] = v;
            }
        }
        Ok(a)
    }
}

fn blur_forward(nx: usize, ny: usize, kernel: &[[f64; BLUR_SIZE]; BLUR_SIZE], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; nx * ny];
    for r in 0..ny {
        for c in 0..nx {
            let mut acc = 0.0;
            for (dr, krow) in kernel.iter().enumerate() {
                let rr = r as isize + dr as isize - 2;
                if rr < 0 || rr >= ny as isize {
                    continue;
                }
                let base = rr as usize * nx;
                for (dc, &k) in krow.iter().enumerate() {
                    let cc = c as isize + dc as isize - 2;
                    if cc < 0 || cc >= nx as isize {
                        continue;
                    }
                    acc += k * x[base + cc as usize];
                }
            }
            out[r * nx + c] = acc;
        }
    }
    out
}
