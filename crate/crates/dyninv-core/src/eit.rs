//! 2D Complete Electrode Model FEM for electrical impedance tomography.
//!
//! Potential-driven formulation: injection is applied by setting one
//! electrode to unit potential while the rest are grounded, and the data are
//! the resulting electrode currents. The weak form
//!   a(u, v) = sum_T int_T sigma grad u . grad v
//!           + sum_i (1/zeta_i) int_{e_i} u v
//!           = sum_i (1/zeta_i) int_{e_i} U_i v
//! yields a symmetric positive definite system (the electrode terms remove
//! the Neumann constant-shift kernel), so no extra gauge fixing is needed.
//! Currents follow from the contact-impedance law
//!   I_i = -(1/zeta_i) (U_i |e_i| - int_{e_i} u).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::reg::BoxConstraint;

/// Triangulated disk with electrode arcs on the boundary.
#[derive(Clone, Debug)]
pub struct Mesh {
    coords: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    /// Per electrode: boundary node indices in arc order; consecutive pairs
    /// are boundary edges.
    electrodes: Vec<Vec<usize>>,
}

impl Mesh {
    pub fn new(
        coords: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        electrodes: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let mesh = Self { coords, triangles, electrodes };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 || self.triangles.is_empty() {
            return Err(Error::InvalidInput("mesh needs nodes and triangles".into()));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("mesh has non-finite coordinates".into()));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::InvalidInput(format!("triangle {t} references a missing node")));
            }
            if signed_area2(&self.coords, tri) <= 1e-14 {
                return Err(Error::InvalidInput(format!(
                    "triangle {t} is degenerate or negatively oriented"
                )));
            }
        }
        if self.electrodes.is_empty() {
            return Err(Error::InvalidInput("mesh has no electrodes".into()));
        }
        // Boundary edges appear in exactly one triangle.
        let mut edge_count = std::collections::HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let a = tri[e];
                let b = tri[(e + 1) % 3];
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        let mut seen = vec![false; n];
        for (i, arc) in self.electrodes.iter().enumerate() {
            if arc.len() < 2 {
                return Err(Error::InvalidInput(format!("electrode {i} has no edge")));
            }
            for &v in arc {
                if v >= n {
                    return Err(Error::InvalidInput(format!("electrode {i} references a missing node")));
                }
                if seen[v] {
                    return Err(Error::InvalidInput(format!(
                        "electrode arcs overlap at node {v}"
                    )));
                }
                seen[v] = true;
            }
            for w in arc.windows(2) {
                let key = (w[0].min(w[1]), w[0].max(w[1]));
                if edge_count.get(&key) != Some(&1) {
                    return Err(Error::InvalidInput(format!(
                        "electrode {i} segment ({}, {}) is not a boundary edge",
                        w[0], w[1]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.electrodes.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn electrodes(&self) -> &[Vec<usize>] {
        &self.electrodes
    }

    /// Serialise to the plain-text mesh format:
    /// ```text
    /// dyninv-mesh 1
    /// nodes <n>
    /// <x> <y>              (n lines)
    /// triangles <m>
    /// <i> <j> <k>          (m lines, zero-based)
    /// electrodes <E>
    /// <len> <i0> <i1> ...  (E lines, arc node indices in order)
    /// ```
    pub fn write_text(&self) -> String {
        let mut s = String::new();
        s.push_str("dyninv-mesh 1\n");
        s.push_str(&format!("nodes {}\n", self.coords.len()));
        for c in &self.coords {
            s.push_str(&format!("{:e} {:e}\n", c[0], c[1]));
        }
        s.push_str(&format!("triangles {}\n", self.triangles.len()));
        for t in &self.triangles {
            s.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
        }
        s.push_str(&format!("electrodes {}\n", self.electrodes.len()));
        for e in &self.electrodes {
            s.push_str(&e.len().to_string());
            for v in e {
                s.push_str(&format!(" {v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn read_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let parse_err = |msg: &str| Error::Parse(format!("mesh text: {msg}"));
        let header = lines.next().ok_or_else(|| parse_err("empty input"))?;
        if header.trim() != "dyninv-mesh 1" {
            return Err(parse_err("missing 'dyninv-mesh 1' header"));
        }
        let expect_count = |line: Option<&str>, key: &str| -> Result<usize> {
            let line = line.ok_or_else(|| parse_err(&format!("missing '{key}' section")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(parse_err(&format!("expected '{key} <count>', got '{line}'")));
            }
            it.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(&format!("bad count in '{line}'")))
        };
        let n = expect_count(lines.next(), "nodes")?;
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| parse_err("truncated node list"))?;
            let mut it = line.split_whitespace().map(|v| v.parse::<f64>());
            match (it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y))) => coords.push([x, y]),
                _ => return Err(parse_err(&format!("bad node line '{line}'"))),
            }
        }
        let m = expect_count(lines.next(), "triangles")?;
        let mut triangles = Vec::with_capacity(m);
        for _ in 0..m {
            let line = lines.next().ok_or_else(|| parse_err("truncated triangle list"))?;
            let vals: Vec<usize> = line
                .split_whitespace()
                .map(|v| v.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(&format!("bad triangle line '{line}'")))?;
            if vals.len() != 3 {
                return Err(parse_err(&format!("bad triangle line '{line}'")));
            }
            triangles.push([vals[0], vals[1], vals[2]]);
        }
        let ne = expect_count(lines.next(), "electrodes")?;
        let mut electrodes = Vec::with_capacity(ne);
        for _ in 0..ne {
            let line = lines.next().ok_or_else(|| parse_err("truncated electrode list"))?;
            let vals: Vec<usize> = line
                .split_whitespace()
                .map(|v| v.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(&format!("bad electrode line '{line}'")))?;
            let (len, rest) = vals.split_first().ok_or_else(|| parse_err("empty electrode line"))?;
            if rest.len() != *len {
                return Err(parse_err(&format!("electrode length mismatch in '{line}'")));
            }
            electrodes.push(rest.to_vec());
        }
        Self::new(coords, triangles, electrodes)
    }
}

fn signed_area2(coords: &[[f64; 2]], tri: &[usize; 3]) -> f64 {
    let a = coords[tri[0]];
    let b = coords[tri[1]];
    let c = coords[tri[2]];
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Deterministic structured-ring disk mesh of roughly `target_nodes` nodes
/// with `n_elec` equally spaced electrode arcs covering half the boundary.
///
/// Ring `k` of `rings` has `n_elec * k` nodes at radius `k / rings`, so the
/// whole mesh is invariant under rotation by one electrode period. The ring
/// count is rounded to an even number so each electrode covers a whole number
/// of boundary edges.
pub fn disk_mesh(target_nodes: usize, n_elec: usize) -> Result<Mesh> {
    if n_elec < 2 {
        return Err(Error::InvalidInput("need at least two electrodes".into()));
    }
    // nodes(R) = 1 + n_elec * R (R + 1) / 2; pick the even R closest to target.
    let nodes_for = |r: usize| 1 + n_elec * r * (r + 1) / 2;
    let mut rings = 2usize;
    while nodes_for(rings + 2) <= target_nodes || nodes_for(rings) < target_nodes.min(49) {
        rings += 2;
        if rings > 512 {
            return Err(Error::InvalidInput("target mesh size too large".into()));
        }
    }
    if nodes_for(rings + 2).abs_diff(target_nodes) < nodes_for(rings).abs_diff(target_nodes) {
        rings += 2;
    }

    let mut coords = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize; rings + 1];
    for k in 1..=rings {
        ring_start[k] = coords.len();
        let m = n_elec * k;
        let r = k as f64 / rings as f64;
        for t in 0..m {
            let th = 2.0 * std::f64::consts::PI * t as f64 / m as f64;
            coords.push([r * th.cos(), r * th.sin()]);
        }
    }

    let mut triangles = Vec::new();
    // Centre fan.
    let m1 = n_elec;
    for t in 0..m1 {
        triangles.push([0, ring_start[1] + t, ring_start[1] + (t + 1) % m1]);
    }
    // Ring strips, merged by exact rational angle comparison so the pattern
    // repeats identically in every electrode sector.
    for k in 2..=rings {
        let (sa, ma) = (ring_start[k - 1], n_elec * (k - 1));
        let (sb, mb) = (ring_start[k], n_elec * k);
        let (mut i, mut j) = (0usize, 0usize);
        while i < ma || j < mb {
            let advance_inner = if j == mb {
                true
            } else if i == ma {
                false
            } else {
                // next inner angle (i+1)/ma vs next outer (j+1)/mb; ties go
                // to the outer ring.
                (i + 1) * mb < (j + 1) * ma
            };
            if advance_inner {
                triangles.push([sa + i % ma, sb + j % mb, sa + (i + 1) % ma]);
                i += 1;
            } else {
                triangles.push([sa + i % ma, sb + j % mb, sb + (j + 1) % mb]);
                j += 1;
            }
        }
    }
    for tri in &mut triangles {
        if signed_area2(&coords, tri) < 0.0 {
            tri.swap(1, 2);
        }
    }

    // Electrode i covers the first rings/2 boundary edges of its sector.
    let sb = ring_start[rings];
    let mb = n_elec * rings;
    let per = rings;
    let cover = rings / 2;
    let electrodes = (0..n_elec)
        .map(|e| (0..=cover).map(|t| sb + (e * per + t) % mb).collect())
        .collect();

    Mesh::new(coords, triangles, electrodes)
}

/// Node permutation realising rotation by one electrode period on a
/// rotationally symmetric disk mesh. Reconstructed from node radii and
/// angles, so it works for any mesh with that symmetry.
pub fn disk_rotation_permutation(mesh: &Mesh, n_elec: usize) -> Result<Vec<usize>> {
    let n = mesh.n_nodes();
    let mut order: Vec<usize> = (0..n).collect();
    let radius = |i: usize| {
        let c = mesh.coords()[i];
        (c[0] * c[0] + c[1] * c[1]).sqrt()
    };
    let angle = |i: usize| {
        let c = mesh.coords()[i];
        c[1].atan2(c[0])
    };
    order.sort_by(|&a, &b| radius(a).total_cmp(&radius(b)));
    let mut perm = vec![0usize; n];
    let mut g0 = 0;
    while g0 < n {
        let mut g1 = g0 + 1;
        // Same-ring radii agree only up to rounding, so group first and only
        // then order each ring by angle.
        while g1 < n && (radius(order[g1]) - radius(order[g0])).abs() < 1e-9 {
            g1 += 1;
        }
        order[g0..g1].sort_by(|&a, &b| angle(a).total_cmp(&angle(b)));
        let m = g1 - g0;
        if m % n_elec != 0 && m > 1 {
            return Err(Error::InvalidInput(format!(
                "ring of {m} nodes is not divisible into {n_elec} sectors"
            )));
        }
        let shift = m / n_elec;
        for t in 0..m {
            perm[order[g0 + t]] = order[g0 + (t + shift) % m];
        }
        g0 = g1;
    }
    Ok(perm)
}

/// Symmetric banded matrix with full in-band storage.
pub struct CemMatrix {
    n: usize,
    band: usize,
    data: Vec<f64>,
}

impl CemMatrix {
    fn zeros(n: usize, band: usize) -> Self {
        Self { n, band, data: vec![0.0; n * (2 * band + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> Option<usize> {
        let d = j as isize - i as isize;
        if d.unsigned_abs() > self.band {
            None
        } else {
            Some(i * (2 * self.band + 1) + (d + self.band as isize) as usize)
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.idx(i, j).map_or(0.0, |p| self.data[p])
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let p = self.idx(i, j).expect("assembly touched an out-of-band entry");
        self.data[p] += v;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add_scaled(&mut self, other: &CemMatrix, factor: f64) {
        assert_eq!(self.band, other.band);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    /// Banded Cholesky factorisation; errors if the matrix is not positive
    /// definite (singular system).
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let (n, band) = (self.n, self.band);
        let w = band + 1;
        let mut l = vec![0.0; n * w];
        // l[(i, j)] for j in [i-band, i] lives at i*w + (band - i + j).
        let at = |i: usize, j: usize| i * w + band + j - i;
        for i in 0..n {
            let lo = i.saturating_sub(band);
            for j in lo..=i {
                let mut s = self.entry(i, j);
                let kmin = lo.max(j.saturating_sub(band));
                for k in kmin..j {
                    s -= l[at(i, k)] * l[at(j, k)];
                }
                if j == i {
                    if s <= 0.0 {
                        return Err(Error::Numerical(format!(
                            "system is singular: nonpositive pivot {s:.3e} at row {i}"
                        )));
                    }
                    l[at(i, i)] = s.sqrt();
                } else {
                    l[at(i, j)] = s / l[at(j, j)];
                }
            }
        }
        Ok(BandCholesky { n, band, l })
    }
}

/// Lower banded Cholesky factor.
pub struct BandCholesky {
    n: usize,
    band: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::Shape(format!("solve: expected dim {}, got {}", self.n, b.len())));
        }
        let (n, band, w) = (self.n, self.band, self.band + 1);
        let at = |i: usize, j: usize| i * w + band + j - i;
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(band);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l[at(i, k)] * y[k];
            }
            y[i] = s / self.l[at(i, i)];
        }
        for i in (0..n).rev() {
            let hi = (i + band).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.l[at(k, i)] * y[k];
            }
            y[i] = s / self.l[at(i, i)];
        }
        Ok(y)
    }
}

/// Electrode currents for all patterns; pattern-major storage.
pub struct Currents {
    n_elec: usize,
    n_pat: usize,
    data: Vec<f64>,
}

impl Currents {
    pub fn current(&self, electrode: usize, pattern: usize) -> f64 {
        self.data[pattern * self.n_elec + electrode]
    }

    pub fn n_elec(&self) -> usize {
        self.n_elec
    }

    pub fn n_pat(&self) -> usize {
        self.n_pat
    }
}

/// Forward solve output: currents plus the cached potentials and
/// factorisation the adjoint pass reuses.
pub struct ForwardSolution {
    pub currents: Currents,
    potentials: Vec<Vec<f64>>,
    factor: BandCholesky,
}

struct TriGeom {
    v: [usize; 3],
    area: f64,
    /// Gram matrix of the barycentric basis gradients.
    g: [[f64; 3]; 3],
}

/// Assembled CEM context for one mesh and contact impedance set.
///
/// Forward solves for distinct patterns share one factorisation; the only
/// mutable state is the atomic solve counters.
pub struct CemSystem {
    mesh: Mesh,
    zeta: Vec<f64>,
    tris: Vec<TriGeom>,
    band: usize,
    /// Electrode boundary terms (1/zeta-weighted mass), sigma-independent.
    electrode_matrix: CemMatrix,
    /// Current pickup rows: c[i] = (1/zeta_i) int_{e_i} phi, sparse.
    pickup: Vec<Vec<(usize, f64)>>,
    /// Electrode arc lengths.
    arc_len: Vec<f64>,
    pde_solves: AtomicU64,
    adjoint_solves: AtomicU64,
    jacobian_solves: AtomicU64,
}

impl CemSystem {
    pub fn new(mesh: Mesh, zeta: Vec<f64>) -> Result<Self> {
        if zeta.len() != mesh.n_electrodes() {
            return Err(Error::Shape(format!(
                "{} impedances for {} electrodes",
                zeta.len(),
                mesh.n_electrodes()
            )));
        }
        if zeta.iter().any(|&z| !(z > 0.0) || !z.is_finite()) {
            return Err(Error::InvalidInput("contact impedances must be positive".into()));
        }
        let mut band = 0usize;
        let mut tris = Vec::with_capacity(mesh.n_triangles());
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let det = signed_area2(mesh.coords(), tri);
            if det.abs() < 1e-14 {
                return Err(Error::Numerical(format!("triangle {t} is degenerate")));
            }
            let a = mesh.coords()[tri[0]];
            let b = mesh.coords()[tri[1]];
            let c = mesh.coords()[tri[2]];
            let e1 = [b[0] - a[0], b[1] - a[1]];
            let e2 = [c[0] - a[0], c[1] - a[1]];
            let gb = [e2[1] / det, -e2[0] / det];
            let gc = [-e1[1] / det, e1[0] / det];
            let ga = [-gb[0] - gc[0], -gb[1] - gc[1]];
            let grads = [ga, gb, gc];
            let mut g = [[0.0; 3]; 3];
            for p in 0..3 {
                for q in 0..3 {
                    g[p][q] = grads[p][0] * grads[q][0] + grads[p][1] * grads[q][1];
                }
            }
            for &p in tri {
                for &q in tri {
                    band = band.max(p.abs_diff(q));
                }
            }
            tris.push(TriGeom { v: *tri, area: det / 2.0, g });
        }

        let n = mesh.n_nodes();
        let mut electrode_matrix = CemMatrix::zeros(n, band);
        let mut pickup = vec![Vec::new(); mesh.n_electrodes()];
        let mut arc_len = vec![0.0; mesh.n_electrodes()];
        for (i, arc) in mesh.electrodes().iter().enumerate() {
            let w = 1.0 / zeta[i];
            let mut row: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
            for seg in arc.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let pa = mesh.coords()[a];
                let pb = mesh.coords()[b];
                let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
                arc_len[i] += len;
                electrode_matrix.add(a, a, w * len / 3.0);
                electrode_matrix.add(b, b, w * len / 3.0);
                electrode_matrix.add(a, b, w * len / 6.0);
                electrode_matrix.add(b, a, w * len / 6.0);
                *row.entry(a).or_insert(0.0) += w * len / 2.0;
                *row.entry(b).or_insert(0.0) += w * len / 2.0;
            }
            pickup[i] = row.into_iter().collect();
        }

        Ok(Self {
            mesh,
            zeta,
            tris,
            band,
            electrode_matrix,
            pickup,
            arc_len,
            pde_solves: AtomicU64::new(0),
            adjoint_solves: AtomicU64::new(0),
            jacobian_solves: AtomicU64::new(0),
        })
    }

    pub fn with_uniform_impedance(mesh: Mesh, zeta: f64) -> Result<Self> {
        let n = mesh.n_electrodes();
        Self::new(mesh, vec![zeta; n])
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn n_patterns(&self) -> usize {
        self.mesh.n_electrodes()
    }

    pub fn n_measurements(&self) -> usize {
        let e = self.mesh.n_electrodes();
        (e - 1) * e
    }

    pub fn pde_solve_count(&self) -> u64 {
        self.pde_solves.load(Ordering::Relaxed)
    }

    pub fn adjoint_solve_count(&self) -> u64 {
        self.adjoint_solves.load(Ordering::Relaxed)
    }

    pub fn jacobian_solve_count(&self) -> u64 {
        self.jacobian_solves.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.pde_solves.store(0, Ordering::Relaxed);
        self.adjoint_solves.store(0, Ordering::Relaxed);
        self.jacobian_solves.store(0, Ordering::Relaxed);
    }

    fn check_sigma(&self, sigma: &[f64]) -> Result<()> {
        if sigma.len() != self.mesh.n_nodes() {
            return Err(Error::Shape(format!(
                "conductivity has {} nodal values for {} nodes",
                sigma.len(),
                self.mesh.n_nodes()
            )));
        }
        if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain("conductivity must be positive and finite".into()));
        }
        Ok(())
    }

    /// Conductivity-weighted stiffness block only (no electrode terms).
    pub fn stiffness_only(&self, sigma: &[f64]) -> Result<CemMatrix> {
        self.check_sigma(sigma)?;
        let mut k = CemMatrix::zeros(self.mesh.n_nodes(), self.band);
        for t in &self.tris {
            let mean = (sigma[t.v[0]] + sigma[t.v[1]] + sigma[t.v[2]]) / 3.0;
            let w = mean * t.area;
            for p in 0..3 {
                for q in 0..3 {
                    k.add(t.v[p], t.v[q], w * t.g[p][q]);
                }
            }
        }
        Ok(k)
    }

    /// The sigma-independent electrode boundary block.
    pub fn electrode_matrix(&self) -> &CemMatrix {
        &self.electrode_matrix
    }

    /// Full CEM system matrix `K(sigma) + B`.
    pub fn assemble(&self, sigma: &[f64]) -> Result<CemMatrix> {
        let mut s = self.stiffness_only(sigma)?;
        s.add_scaled(&self.electrode_matrix, 1.0);
        Ok(s)
    }

    /// Solve all excitation patterns at `sigma`: one assembly plus one
    /// factorisation, counted as a single PDE solve.
    pub fn solve_forward(&self, sigma: &[f64]) -> Result<ForwardSolution> {
        let factor = self.assemble(sigma)?.cholesky()?;
        let e = self.mesh.n_electrodes();
        let n = self.mesh.n_nodes();
        let mut potentials = Vec::with_capacity(e);
        let mut data = vec![0.0; e * e];
        for j in 0..e {
            let mut rhs = vec![0.0; n];
            for &(node, w) in &self.pickup[j] {
                rhs[node] = w;
            }
            let u = factor.solve(&rhs)?;
            for i in 0..e {
                let pick: f64 = self.pickup[i].iter().map(|&(node, w)| w * u[node]).sum();
                let drive = if i == j { self.arc_len[i] / self.zeta[i] } else { 0.0 };
                data[j * e + i] = pick - drive;
            }
            potentials.push(u);
        }
        self.pde_solves.fetch_add(1, Ordering::Relaxed);
        Ok(ForwardSolution { currents: Currents { n_elec: e, n_pat: e, data }, potentials, factor })
    }

    /// Stack per-pattern currents, dropping the excited electrode's own
    /// current: length (N_elec - 1) * N_pat.
    pub fn measurement_vector(&self, currents: &Currents) -> Result<Vec<f64>> {
        let e = self.mesh.n_electrodes();
        if currents.n_elec != e || currents.n_pat != e {
            return Err(Error::Shape(format!(
                "currents shaped {}x{}, system has {e} electrodes and patterns",
                currents.n_elec, currents.n_pat
            )));
        }
        let mut out = Vec::with_capacity((e - 1) * e);
        for j in 0..e {
            for i in 0..e {
                if i != j {
                    out.push(currents.current(i, j));
                }
            }
        }
        Ok(out)
    }

    fn embed_weights(&self, w: &[f64]) -> Result<Vec<Vec<f64>>> {
        let e = self.mesh.n_electrodes();
        if w.len() != (e - 1) * e {
            return Err(Error::Shape(format!(
                "residual weights have length {}, expected {}",
                w.len(),
                (e - 1) * e
            )));
        }
        let mut per_pattern = vec![vec![0.0; e]; e];
        let mut m = 0;
        for (j, pat) in per_pattern.iter_mut().enumerate() {
            for (i, slot) in pat.iter_mut().enumerate() {
                if i != j {
                    *slot = w[m];
                    m += 1;
                }
            }
        }
        Ok(per_pattern)
    }

    /// Adjoint-state gradient: `A'(sigma)* w` for a measurement-space weight
    /// vector `w` (the caller applies any precision weighting).
    ///
    /// One adjoint solve: all patterns reuse the forward factorisation.
    pub fn jacobian_adjoint_apply(&self, sol: &ForwardSolution, w: &[f64]) -> Result<Vec<f64>> {
        let per_pattern = self.embed_weights(w)?;
        let e = self.mesh.n_electrodes();
        let n = self.mesh.n_nodes();
        let mut grad = vec![0.0; n];
        for j in 0..e {
            let mut rhs = vec![0.0; n];
            for (i, &wi) in per_pattern[j].iter().enumerate() {
                if wi != 0.0 {
                    for &(node, c) in &self.pickup[i] {
                        rhs[node] += c * wi;
                    }
                }
            }
            let lambda = sol.factor.solve(&rhs)?;
            let u = &sol.potentials[j];
            for t in &self.tris {
                let mut q = 0.0;
                for p in 0..3 {
                    for r in 0..3 {
                        q += lambda[t.v[p]] * t.g[p][r] * u[t.v[r]];
                    }
                }
                let w_t = t.area / 3.0 * q;
                for &p in &t.v {
                    grad[p] -= w_t;
                }
            }
        }
        self.adjoint_solves.fetch_add(1, Ordering::Relaxed);
        Ok(grad)
    }

    /// Directional derivative of the measurement map: `A'(sigma) h`.
    pub fn jacobian_apply(&self, sol: &ForwardSolution, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.mesh.n_nodes() {
            return Err(Error::Shape(format!(
                "direction has {} nodal values for {} nodes",
                h.len(),
                self.mesh.n_nodes()
            )));
        }
        let e = self.mesh.n_electrodes();
        let n = self.mesh.n_nodes();
        let mut out = Vec::with_capacity((e - 1) * e);
        for j in 0..e {
            let u = &sol.potentials[j];
            // K'(h) u, assembled triangle by triangle.
            let mut kh_u = vec![0.0; n];
            for t in &self.tris {
                let mean = (h[t.v[0]] + h[t.v[1]] + h[t.v[2]]) / 3.0;
                let w = mean * t.area;
                for p in 0..3 {
                    let mut s = 0.0;
                    for r in 0..3 {
                        s += t.g[p][r] * u[t.v[r]];
                    }
                    kh_u[t.v[p]] += w * s;
                }
            }
            let du = sol.factor.solve(&kh_u)?;
            for i in 0..e {
                if i != j {
                    // dI_i = -C_i du (drive term is sigma-independent).
                    let pick: f64 = self.pickup[i].iter().map(|&(node, c)| c * du[node]).sum();
                    out.push(-pick);
                }
            }
        }
        self.jacobian_solves.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }
}

/// Nodal conductivity validated against its box bounds.
pub struct Conductivity {
    values: Vec<f64>,
}

impl Conductivity {
    pub fn new(values: Vec<f64>, bounds: &BoxConstraint) -> Result<Self> {
        if !(bounds.lo() > 0.0) {
            return Err(Error::Domain("conductivity lower bound must be positive".into()));
        }
        if !bounds.contains(&values) {
            return Err(Error::Domain(format!(
                "nodal conductivity leaves [{}, {}]",
                bounds.lo(),
                bounds.hi()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
