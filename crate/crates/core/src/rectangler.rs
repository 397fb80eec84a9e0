//! Fits a TPS control mesh that carries the valid region of a
//! deformed-boundary image onto a full rectangle by minimizing
//!
//! ```text
//! E = w_ap * data + w_ig * intergrid + w_bend * bending
//! ```
//!
//! over a stage schedule of nested parameter spaces: similarity (4 DoF) →
//! homography (8 DoF) → free TPS grid. Each stage initializes the next, so
//! the optimizer learns coarse global motion before local deformation.
//!
//! The data term is either the L1 difference between the mesh-warped input
//! and a ground-truth image (supervised, synthetic pipelines) or a
//! boundary-coverage energy that pushes every output probe's source location
//! inside the valid mask (unsupervised).

use nalgebra::{DMatrix, DVector, Matrix3, Point2, Rotation2, Vector2, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::distortion::FlowField;
use crate::mesh::{self, MeshGrid, MeshError};
use crate::raster::{self, ImageBuffer, ValidMask};
use crate::tps::{self, TpsError};

#[derive(Debug, Error)]
pub enum RectangleError {
    #[error("stage plan is empty")]
    EmptyPlan,
    #[error("stage plan is not in non-decreasing DoF order")]
    PlanOrder,
    #[error("energy weights must be non-negative and not all zero")]
    BadWeights,
    #[error("image dimensions disagree: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("non-finite energy encountered during optimization")]
    NonFiniteEnergy,
    #[error("valid mask is empty")]
    EmptyMask,
    #[error("valid mask does not contain the image center")]
    CenterInvalid,
    #[error("valid mask is disconnected")]
    DisconnectedMask,
    #[error("degenerate corner configuration for homography")]
    DegenerateCorners,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Tps(#[from] TpsError),
}

/// Transformation family optimized in one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StageKind {
    Similarity4Dof,
    Homography8Dof,
    TpsGrid,
}

impl StageKind {
    fn dof_rank(self) -> u8 {
        match self {
            StageKind::Similarity4Dof => 0,
            StageKind::Homography8Dof => 1,
            StageKind::TpsGrid => 2,
        }
    }
}

/// One stage of the schedule: family, iteration budget, initial step size.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub max_iters: usize,
    pub init_step: f64,
}

/// Ordered stage schedule; stages must appear in non-decreasing DoF order.
#[derive(Debug, Clone, Serialize)]
pub struct StagePlan {
    stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self, RectangleError> {
        if stages.is_empty() {
            return Err(RectangleError::EmptyPlan);
        }
        for pair in stages.windows(2) {
            if pair[1].kind.dof_rank() < pair[0].kind.dof_rank() {
                return Err(RectangleError::PlanOrder);
            }
        }
        Ok(Self { stages })
    }

    /// Default schedule: similarity 200, homography 300, TPS grid 1500.
    pub fn full() -> Self {
        Self {
            stages: vec![
                StageSpec {
                    kind: StageKind::Similarity4Dof,
                    max_iters: 200,
                    init_step: 1.0,
                },
                StageSpec {
                    kind: StageKind::Homography8Dof,
                    max_iters: 300,
                    init_step: 1.0,
                },
                StageSpec {
                    kind: StageKind::TpsGrid,
                    max_iters: 1500,
                    init_step: 1e3,
                },
            ],
        }
    }

    /// Single free-grid stage with the given budget (no curriculum).
    pub fn tps_only(max_iters: usize) -> Self {
        Self {
            stages: vec![StageSpec {
                kind: StageKind::TpsGrid,
                max_iters,
                init_step: 1e3,
            }],
        }
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }
}

/// Weights of the three energy terms.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyWeights {
    pub appearance: f64,
    pub intergrid: f64,
    pub bending: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            appearance: 1.0,
            intergrid: 1.0,
            bending: 1e-4,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<(), RectangleError> {
        let ok = self.appearance >= 0.0
            && self.intergrid >= 0.0
            && self.bending >= 0.0
            && (self.appearance > 0.0 || self.intergrid > 0.0 || self.bending > 0.0);
        if ok {
            Ok(())
        } else {
            Err(RectangleError::BadWeights)
        }
    }
}

/// Energy decomposition of a fitted result.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyBreakdown {
    pub data: f64,
    pub intergrid: f64,
    pub bending: f64,
    pub total: f64,
}

/// Per-stage optimization record.
#[derive(Debug, Clone, Serialize)]
pub struct StageTrace {
    pub kind: StageKind,
    pub iterations: usize,
    /// Accepted-iterate energies, starting with the stage's initial energy.
    pub energies: Vec<f64>,
    /// Final stage parameters: `[scale, rotation, tx, ty]` for similarity,
    /// the four mapped corners `[x0, y0, .., x3, y3]` for homography, empty
    /// for the free grid (the mesh itself is the parameter).
    pub params: Vec<f64>,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// True when the stage stopped before exhausting its iteration budget.
    pub converged: bool,
}

/// Fitted source mesh plus energy breakdown and per-stage trace.
#[derive(Debug, Clone)]
pub struct RectangleResult {
    pub src_mesh: MeshGrid,
    pub dst_mesh: MeshGrid,
    pub energy: EnergyBreakdown,
    pub trace: Vec<StageTrace>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// parametric mesh families
// ---------------------------------------------------------------------------

fn image_center(size: (usize, usize)) -> Point2<f64> {
    Point2::new((size.0 - 1) as f64 / 2.0, (size.1 - 1) as f64 / 2.0)
}

pub fn image_corners(size: (usize, usize)) -> [Point2<f64>; 4] {
    let w = (size.0 - 1) as f64;
    let h = (size.1 - 1) as f64;
    [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(0.0, h),
        Point2::new(w, h),
    ]
}

/// Applies `scale`/`rotation` about `center` followed by `translation`.
pub fn similarity_apply(
    scale: f64,
    rotation: f64,
    translation: Vector2<f64>,
    center: Point2<f64>,
    p: Point2<f64>,
) -> Point2<f64> {
    center + Rotation2::new(rotation) * (p - center) * scale + translation
}

/// Parameters of the inverse similarity (also about `center`).
pub fn similarity_inverse(
    scale: f64,
    rotation: f64,
    translation: Vector2<f64>,
) -> (f64, f64, Vector2<f64>) {
    let inv_rot = Rotation2::new(-rotation);
    (1.0 / scale, -rotation, -(inv_rot * translation) / scale)
}

/// Regular grid mapped by a similarity about the image center.
pub fn similarity_to_mesh(
    scale: f64,
    rotation: f64,
    translation: Vector2<f64>,
    grid: (usize, usize),
    size: (usize, usize),
) -> MeshGrid {
    assert!(scale > 0.0, "similarity scale must be positive");
    let center = image_center(size);
    let mut mesh = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
    for p in mesh.points_mut() {
        *p = similarity_apply(scale, rotation, translation, center, *p);
    }
    mesh
}

/// Plane projective transform.
#[derive(Debug, Clone, Copy)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Solves the unique homography carrying each `from` corner to its `to`
    /// counterpart (4-point direct linear transform, `h33 = 1`).
    pub fn from_corner_pairs(
        from: &[Point2<f64>; 4],
        to: &[Point2<f64>; 4],
    ) -> Result<Self, RectangleError> {
        // normalize for conditioning
        let s = from
            .iter()
            .chain(to.iter())
            .map(|p| p.x.abs().max(p.y.abs()))
            .fold(1.0, f64::max);
        let mut a = DMatrix::<f64>::zeros(8, 8);
        let mut b = DVector::<f64>::zeros(8);
        for (i, (f, t)) in from.iter().zip(to.iter()).enumerate() {
            let (x, y) = (f.x / s, f.y / s);
            let (xp, yp) = (t.x / s, t.y / s);
            let r0 = 2 * i;
            let r1 = 2 * i + 1;
            a[(r0, 0)] = x;
            a[(r0, 1)] = y;
            a[(r0, 2)] = 1.0;
            a[(r0, 6)] = -xp * x;
            a[(r0, 7)] = -xp * y;
            b[r0] = xp;
            a[(r1, 3)] = x;
            a[(r1, 4)] = y;
            a[(r1, 5)] = 1.0;
            a[(r1, 6)] = -yp * x;
            a[(r1, 7)] = -yp * y;
            b[r1] = yp;
        }
        let h = a.lu().solve(&b).ok_or(RectangleError::DegenerateCorners)?;
        // de-normalize: H_pixel = S * H_norm * S^{-1}, S = diag(s, s, 1)
        let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
        let s_mat = Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
        let s_inv = Matrix3::new(1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0, 0.0, 0.0, 1.0);
        let m = s_mat * hn * s_inv;
        if !m.iter().all(|v| v.is_finite()) {
            return Err(RectangleError::DegenerateCorners);
        }
        Ok(Self { m })
    }

    pub fn apply(&self, p: Point2<f64>) -> Point2<f64> {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        Point2::new(v.x / v.z, v.y / v.z)
    }

    pub fn inverse(&self) -> Result<Self, RectangleError> {
        let m = self
            .m
            .try_inverse()
            .ok_or(RectangleError::DegenerateCorners)?;
        Ok(Self { m })
    }
}

/// Regular grid mapped by the homography that carries the image's four
/// corners onto `corners` (order: top-left, top-right, bottom-left,
/// bottom-right).
pub fn homography_corners_to_mesh(
    corners: &[Point2<f64>; 4],
    grid: (usize, usize),
    size: (usize, usize),
) -> Result<MeshGrid, RectangleError> {
    let h = Homography::from_corner_pairs(&image_corners(size), corners)?;
    let mut out = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
    for p in out.points_mut() {
        *p = h.apply(*p);
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(RectangleError::DegenerateCorners);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// bending quadratic form for a fixed regular source grid
// ---------------------------------------------------------------------------

/// Bending energy of the spline interpolating from the regular grid to a
/// variable node set, as an explicit quadratic form. With the source side
/// fixed, `E(v) = v_x^T M v_x + v_y^T M v_y` for a constant matrix `M`, which
/// makes both the energy and its gradient cheap inside the optimizer.
pub struct GridBending {
    m: DMatrix<f64>,
    n: usize,
}

impl GridBending {
    pub fn new(grid: (usize, usize), size: (usize, usize)) -> Self {
        let reg = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
        let pts = reg.points();
        let n = pts.len();

        // normalize like the TPS solver (isotropic, bounding box)
        let (w, h) = ((size.0 - 1) as f64, (size.1 - 1) as f64);
        let center = Vector2::new(w / 2.0, h / 2.0);
        let scale = 0.5 * w.max(h);
        let src_n: Vec<Vector2<f64>> = pts.iter().map(|p| (p.coords - center) / scale).collect();

        let dim = n + 3;
        let mut l = DMatrix::<f64>::zeros(dim, dim);
        let mut k = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let u = tps::kernel_u((src_n[i] - src_n[j]).norm());
                l[(i, j)] = u;
                l[(j, i)] = u;
                k[(i, j)] = u;
                k[(j, i)] = u;
            }
            l[(i, n)] = 1.0;
            l[(i, n + 1)] = src_n[i].x;
            l[(i, n + 2)] = src_n[i].y;
            l[(n, i)] = 1.0;
            l[(n + 1, i)] = src_n[i].x;
            l[(n + 2, i)] = src_n[i].y;
        }
        let l_inv = l
            .lu()
            .try_inverse()
            .expect("regular grid yields a non-singular TPS system");
        // weights = W * targets with W the top-left N x N block of L^{-1}
        let w_block = l_inv.view((0, 0), (n, n)).into_owned();
        let m = (w_block.transpose() * k * w_block) / (scale * scale);
        Self { m, n }
    }

    pub fn energy(&self, nodes: &[Point2<f64>]) -> f64 {
        debug_assert_eq!(nodes.len(), self.n);
        let vx = DVector::from_iterator(self.n, nodes.iter().map(|p| p.x));
        let vy = DVector::from_iterator(self.n, nodes.iter().map(|p| p.y));
        let ex = (&vx.transpose() * &self.m * &vx)[(0, 0)];
        let ey = (&vy.transpose() * &self.m * &vy)[(0, 0)];
        (ex + ey).max(0.0)
    }

    /// Energy plus gradient with respect to every node.
    pub fn energy_and_grad(&self, nodes: &[Point2<f64>]) -> (f64, Vec<Vector2<f64>>) {
        let vx = DVector::from_iterator(self.n, nodes.iter().map(|p| p.x));
        let vy = DVector::from_iterator(self.n, nodes.iter().map(|p| p.y));
        let mx = &self.m * &vx;
        let my = &self.m * &vy;
        let ex = vx.dot(&mx);
        let ey = vy.dot(&my);
        let grad = (0..self.n)
            .map(|i| Vector2::new(2.0 * mx[i], 2.0 * my[i]))
            .collect();
        ((ex + ey).max(0.0), grad)
    }
}

// ---------------------------------------------------------------------------
// energy model
// ---------------------------------------------------------------------------

struct Probe {
    /// flattened index of the cell's top-left node
    base: usize,
    /// bilinear corner weights (00, 01, 10, 11)
    w: [f64; 4],
    /// output pixel for ground-truth lookup
    px: usize,
    py: usize,
}

enum DataTerm<'a> {
    Supervised {
        input: &'a ImageBuffer,
        gt: &'a ImageBuffer,
    },
    Coverage {
        input_size: (usize, usize),
        /// Euclidean distance (px) to the nearest valid pixel, 0 inside.
        dist: Vec<f32>,
        tau: f64,
    },
}

struct EnergyModel<'a> {
    grid: (usize, usize),
    size: (usize, usize),
    cols: usize,
    weights: EnergyWeights,
    bending: GridBending,
    probes: Vec<Probe>,
    data: DataTerm<'a>,
}

/// Saturation band (px) of the coverage penalty.
const COVERAGE_TAU: f64 = 16.0;

impl<'a> EnergyModel<'a> {
    fn new(
        grid: (usize, usize),
        size: (usize, usize),
        weights: EnergyWeights,
        stride: usize,
        data: DataTerm<'a>,
    ) -> Self {
        let (u_cells, v_cells) = grid;
        let (w, h) = size;
        let cols = v_cells + 1;
        let cell_w = (w - 1) as f64 / v_cells as f64;
        let cell_h = (h - 1) as f64 / u_cells as f64;
        let mut probes = Vec::new();
        let mut py = 0;
        while py < h {
            let mut px = 0;
            while px < w {
                let gx = px as f64 / cell_w;
                let gy = py as f64 / cell_h;
                let j = (gx.floor() as usize).min(v_cells - 1);
                let i = (gy.floor() as usize).min(u_cells - 1);
                let s = gx - j as f64;
                let t = gy - i as f64;
                probes.push(Probe {
                    base: i * cols + j,
                    w: [
                        (1.0 - s) * (1.0 - t),
                        s * (1.0 - t),
                        (1.0 - s) * t,
                        s * t,
                    ],
                    px,
                    py,
                });
                px += stride;
            }
            py += stride;
        }
        Self {
            grid,
            size,
            cols,
            weights,
            bending: GridBending::new(grid, size),
            probes,
            data,
        }
    }

    #[inline]
    fn probe_source(&self, nodes: &[Point2<f64>], p: &Probe) -> Point2<f64> {
        let a = nodes[p.base].coords;
        let b = nodes[p.base + 1].coords;
        let c = nodes[p.base + self.cols].coords;
        let d = nodes[p.base + self.cols + 1].coords;
        Point2::from(a * p.w[0] + b * p.w[1] + c * p.w[2] + d * p.w[3])
    }

    fn data_energy(&self, nodes: &[Point2<f64>]) -> f64 {
        match &self.data {
            DataTerm::Supervised { input, gt } => {
                let ch = input.channels();
                let mut vals = [0.0f64; 3];
                let mut acc = 0.0;
                for p in &self.probes {
                    let q = self.probe_source(nodes, p);
                    raster::sample_into(input, q.x, q.y, raster::SamplePolicy::Zero, &mut vals[..ch]);
                    let gt_px = gt.pixel(p.px, p.py);
                    for c in 0..ch {
                        acc += (vals[c] - gt_px[c] as f64).abs();
                    }
                }
                acc / (self.probes.len() * ch) as f64
            }
            DataTerm::Coverage {
                input_size,
                dist,
                tau,
            } => {
                let mut acc = 0.0;
                for p in &self.probes {
                    let q = self.probe_source(nodes, p);
                    acc += coverage_penalty(dist, *input_size, q, *tau);
                }
                acc / self.probes.len() as f64
            }
        }
    }

    /// Data energy plus its gradient with respect to the mesh nodes.
    fn data_energy_and_grad(&self, nodes: &[Point2<f64>]) -> (f64, Vec<Vector2<f64>>) {
        let mut grad = vec![Vector2::zeros(); nodes.len()];
        let mut acc = 0.0;
        match &self.data {
            DataTerm::Supervised { input, gt } => {
                let ch = input.channels();
                let norm = 1.0 / (self.probes.len() * ch) as f64;
                let mut vals = [0.0f64; 3];
                let mut gx = [0.0f64; 3];
                let mut gy = [0.0f64; 3];
                for p in &self.probes {
                    let q = self.probe_source(nodes, p);
                    raster::sample_value_and_grad(
                        input,
                        q.x,
                        q.y,
                        &mut vals[..ch],
                        &mut gx[..ch],
                        &mut gy[..ch],
                    );
                    let gt_px = gt.pixel(p.px, p.py);
                    let mut dq = Vector2::zeros();
                    for c in 0..ch {
                        let r = vals[c] - gt_px[c] as f64;
                        acc += r.abs();
                        let s = if r > 0.0 {
                            1.0
                        } else if r < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dq.x += s * gx[c];
                        dq.y += s * gy[c];
                    }
                    dq *= norm;
                    grad[p.base] += dq * p.w[0];
                    grad[p.base + 1] += dq * p.w[1];
                    grad[p.base + self.cols] += dq * p.w[2];
                    grad[p.base + self.cols + 1] += dq * p.w[3];
                }
                (acc * norm, grad)
            }
            DataTerm::Coverage {
                input_size,
                dist,
                tau,
            } => {
                let norm = 1.0 / self.probes.len() as f64;
                for p in &self.probes {
                    let q = self.probe_source(nodes, p);
                    let (pen, dq) = coverage_penalty_grad(dist, *input_size, q, *tau);
                    acc += pen;
                    let dq = dq * norm;
                    grad[p.base] += dq * p.w[0];
                    grad[p.base + 1] += dq * p.w[1];
                    grad[p.base + self.cols] += dq * p.w[2];
                    grad[p.base + self.cols + 1] += dq * p.w[3];
                }
                (acc * norm, grad)
            }
        }
    }

    fn breakdown(&self, nodes: &[Point2<f64>]) -> Result<EnergyBreakdown, RectangleError> {
        let mesh = MeshGrid::new(self.grid.0 + 1, self.grid.1 + 1, nodes.to_vec())?;
        let intergrid = mesh::intergrid_loss(&mesh)?;
        let bending = self.bending.energy(nodes);
        let data = self.data_energy(nodes);
        let total = self.weights.appearance * data
            + self.weights.intergrid * intergrid
            + self.weights.bending * bending;
        Ok(EnergyBreakdown {
            data,
            intergrid,
            bending,
            total,
        })
    }

    fn energy(&self, nodes: &[Point2<f64>]) -> Result<f64, RectangleError> {
        let mesh = MeshGrid::new(self.grid.0 + 1, self.grid.1 + 1, nodes.to_vec())?;
        let intergrid = mesh::intergrid_loss(&mesh)?;
        let bending = self.bending.energy(nodes);
        let data = self.data_energy(nodes);
        Ok(self.weights.appearance * data
            + self.weights.intergrid * intergrid
            + self.weights.bending * bending)
    }

    fn energy_and_node_grad(
        &self,
        nodes: &[Point2<f64>],
    ) -> Result<(f64, Vec<Vector2<f64>>), RectangleError> {
        let mesh = MeshGrid::new(self.grid.0 + 1, self.grid.1 + 1, nodes.to_vec())?;
        let (ig, ig_grad) = mesh::intergrid_loss_grad(&mesh)?;
        let (bend, bend_grad) = self.bending.energy_and_grad(nodes);
        let (data, data_grad) = self.data_energy_and_grad(nodes);
        let e = self.weights.appearance * data
            + self.weights.intergrid * ig
            + self.weights.bending * bend;
        let grad = (0..nodes.len())
            .map(|i| {
                self.weights.appearance * data_grad[i]
                    + self.weights.intergrid * ig_grad[i]
                    + self.weights.bending * bend_grad[i]
            })
            .collect();
        Ok((e, grad))
    }
}

// ---------------------------------------------------------------------------
// coverage distance field
// ---------------------------------------------------------------------------

/// Exact Euclidean distance (px) to the nearest valid pixel, 0 inside the
/// valid region. Two-pass 1D squared-distance transform.
fn distance_to_valid(mask: &ValidMask) -> Vec<f32> {
    let (w, h) = (mask.width(), mask.height());
    const INF: f64 = 1e18;

    fn dt_1d(f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0usize;
        v[0] = 0;
        z[0] = -INF;
        z[1] = INF;
        for q in 1..n {
            let mut s;
            loop {
                let p = v[k];
                s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
                if s <= z[k] {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = INF;
        }
        k = 0;
        for q in 0..n {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let d = q as f64 - p as f64;
            out[q] = d * d + f[p];
        }
    }

    let mut g = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            g[y * w + x] = if mask.get(x, y) { 0.0 } else { INF };
        }
    }
    // columns
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = g[y * w + x];
        }
        dt_1d(&col_in, &mut col_out);
        for y in 0..h {
            g[y * w + x] = col_out[y];
        }
    }
    // rows
    let mut row_out = vec![0.0f64; w];
    for y in 0..h {
        dt_1d(&g[y * w..(y + 1) * w], &mut row_out);
        for x in 0..w {
            g[y * w + x] = row_out[x];
        }
    }
    g.iter().map(|&d| (d.max(0.0)).sqrt() as f32).collect()
}

#[inline]
fn bilinear_dist(dist: &[f32], size: (usize, usize), x: f64, y: f64) -> (f64, Vector2<f64>) {
    let (w, h) = size;
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let i00 = dist[y0 * w + x0] as f64;
    let i10 = dist[y0 * w + x0 + 1] as f64;
    let i01 = dist[(y0 + 1) * w + x0] as f64;
    let i11 = dist[(y0 + 1) * w + x0 + 1] as f64;
    let top = i00 + fx * (i10 - i00);
    let bot = i01 + fx * (i11 - i01);
    let val = top + fy * (bot - top);
    let gx = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01);
    let gy = bot - top;
    (val, Vector2::new(gx, gy))
}

/// Saturating coverage penalty around a sample location; grows from 0 inside
/// the valid region to 1 at distance `tau` outside it. Locations outside the
/// image frame add their frame distance on top of the boundary value.
fn coverage_penalty(dist: &[f32], size: (usize, usize), q: Point2<f64>, tau: f64) -> f64 {
    coverage_penalty_grad(dist, size, q, tau).0
}

fn coverage_penalty_grad(
    dist: &[f32],
    size: (usize, usize),
    q: Point2<f64>,
    tau: f64,
) -> (f64, Vector2<f64>) {
    let (w, h) = size;
    let (inner, mut grad) = bilinear_dist(dist, size, q.x, q.y);
    let dx_out = (0.0 - q.x).max(q.x - (w - 1) as f64).max(0.0);
    let dy_out = (0.0 - q.y).max(q.y - (h - 1) as f64).max(0.0);
    let mut d = inner;
    if dx_out > 0.0 || dy_out > 0.0 {
        let frame = (dx_out * dx_out + dy_out * dy_out).sqrt();
        d += frame;
        // clamp kills the inner gradient along clamped axes
        let mut frame_grad = Vector2::zeros();
        if frame > 0.0 {
            if dx_out > 0.0 {
                frame_grad.x = dx_out / frame * q.x.signum_from_center(w);
                grad.x = 0.0;
            }
            if dy_out > 0.0 {
                frame_grad.y = dy_out / frame * q.y.signum_from_center(h);
                grad.y = 0.0;
            }
        }
        grad += frame_grad;
    }
    if d >= tau {
        (1.0, Vector2::zeros())
    } else {
        (d / tau, grad / tau)
    }
}

trait SignumFromCenter {
    fn signum_from_center(self, extent: usize) -> f64;
}

impl SignumFromCenter for f64 {
    /// -1 when the coordinate hangs off the low edge, +1 off the high edge.
    fn signum_from_center(self, extent: usize) -> f64 {
        if self < 0.0 {
            -1.0
        } else if self > (extent - 1) as f64 {
            1.0
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// descent
// ---------------------------------------------------------------------------

struct DescentOutcome {
    x: Vec<f64>,
    energies: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Monotone gradient descent with backtracking line search: only improving
/// steps are accepted, so the energy sequence is non-increasing by
/// construction.
fn descend<EF, GF, FF>(
    x0: Vec<f64>,
    max_iters: usize,
    init_step: f64,
    energy: EF,
    grad: GF,
    feasible: FF,
) -> Result<DescentOutcome, RectangleError>
where
    EF: Fn(&[f64]) -> Result<f64, RectangleError>,
    GF: Fn(&[f64]) -> Result<(f64, Vec<f64>), RectangleError>,
    FF: Fn(&[f64]) -> bool,
{
    let mut x = x0;
    let mut e = energy(&x)?;
    if !e.is_finite() {
        return Err(RectangleError::NonFiniteEnergy);
    }
    let mut energies = vec![e];
    let mut step = init_step;
    let step_floor = init_step * 1e-14;
    let step_ceil = init_step * 1e8;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iters {
        iterations += 1;
        let (_, g) = grad(&x)?;
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if !gnorm2.is_finite() {
            return Err(RectangleError::NonFiniteEnergy);
        }
        if gnorm2 <= 1e-28 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..48 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            if feasible(&cand) {
                if let Ok(ec) = energy(&cand) {
                    if ec.is_finite() && ec <= e - 1e-4 * step * gnorm2 {
                        x = cand;
                        e = ec;
                        energies.push(e);
                        accepted = true;
                        step = (step * 1.7).min(step_ceil);
                        break;
                    }
                }
            }
            step *= 0.5;
            if step < step_floor {
                break;
            }
        }
        if !accepted {
            converged = true;
            break;
        }
    }

    Ok(DescentOutcome {
        x,
        energies,
        iterations,
        converged,
    })
}

fn fd_gradient<EF>(x: &[f64], h: f64, energy: EF) -> Result<(f64, Vec<f64>), RectangleError>
where
    EF: Fn(&[f64]) -> Result<f64, RectangleError>,
{
    let e0 = energy(x)?;
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let ep = energy(&probe)?;
        probe[i] = x[i] - h;
        let em = energy(&probe)?;
        probe[i] = x[i];
        g[i] = (ep - em) / (2.0 * h);
    }
    Ok((e0, g))
}

// ---------------------------------------------------------------------------
// stage driver
// ---------------------------------------------------------------------------

struct FitState {
    /// similarity parameters `[scale, rotation, tx, ty]`
    sim: [f64; 4],
    /// mapped image corners (homography parameterization)
    corners: [Point2<f64>; 4],
    mesh_nodes: Vec<Point2<f64>>,
}

fn nodes_to_flat(nodes: &[Point2<f64>]) -> Vec<f64> {
    nodes.iter().flat_map(|p| [p.x, p.y]).collect()
}

fn flat_to_nodes(flat: &[f64]) -> Vec<Point2<f64>> {
    flat.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect()
}

fn run_plan(
    model: &EnergyModel,
    plan: &StagePlan,
) -> Result<(Vec<Point2<f64>>, Vec<StageTrace>), RectangleError> {
    let grid = model.grid;
    let size = model.size;
    let rows = grid.0 + 1;
    let cols = grid.1 + 1;
    let param_scale = (size.0.max(size.1) as f64) / 2.0;

    let regular = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
    let mut state = FitState {
        sim: [1.0, 0.0, 0.0, 0.0],
        corners: image_corners(size),
        mesh_nodes: regular.points().to_vec(),
    };
    let mut traces = Vec::new();

    for stage in plan.stages() {
        let trace = match stage.kind {
            StageKind::Similarity4Dof => {
                // scaled parameters: unit steps move nodes by comparable pixels
                let to_mesh = |u: &[f64]| -> Result<Vec<Point2<f64>>, RectangleError> {
                    let scale = 1.0 + u[0] / param_scale;
                    if scale <= 0.05 {
                        return Err(RectangleError::NonFiniteEnergy);
                    }
                    let mesh = similarity_to_mesh(
                        scale,
                        u[1] / param_scale,
                        Vector2::new(u[2], u[3]),
                        grid,
                        size,
                    );
                    Ok(mesh.points().to_vec())
                };
                let u0 = vec![
                    (state.sim[0] - 1.0) * param_scale,
                    state.sim[1] * param_scale,
                    state.sim[2],
                    state.sim[3],
                ];
                let energy = |u: &[f64]| model.energy(&to_mesh(u)?);
                let outcome = descend(
                    u0,
                    stage.max_iters,
                    stage.init_step,
                    &energy,
                    |u| fd_gradient(u, 1e-3, &energy),
                    |u| 1.0 + u[0] / param_scale > 0.05,
                )?;
                let u = outcome.x;
                state.sim = [
                    1.0 + u[0] / param_scale,
                    u[1] / param_scale,
                    u[2],
                    u[3],
                ];
                let center = image_center(size);
                state.corners = image_corners(size).map(|c| {
                    similarity_apply(
                        state.sim[0],
                        state.sim[1],
                        Vector2::new(state.sim[2], state.sim[3]),
                        center,
                        c,
                    )
                });
                state.mesh_nodes = to_mesh(&u)?;
                StageTrace {
                    kind: stage.kind,
                    iterations: outcome.iterations,
                    initial_energy: outcome.energies[0],
                    final_energy: *outcome.energies.last().unwrap(),
                    energies: outcome.energies,
                    params: state.sim.to_vec(),
                    converged: outcome.converged,
                }
            }
            StageKind::Homography8Dof => {
                let to_mesh = |u: &[f64]| -> Result<Vec<Point2<f64>>, RectangleError> {
                    let corners = [
                        Point2::new(u[0], u[1]),
                        Point2::new(u[2], u[3]),
                        Point2::new(u[4], u[5]),
                        Point2::new(u[6], u[7]),
                    ];
                    let mesh = homography_corners_to_mesh(&corners, grid, size)?;
                    Ok(mesh.points().to_vec())
                };
                let u0: Vec<f64> = state
                    .corners
                    .iter()
                    .flat_map(|p| [p.x, p.y])
                    .collect();
                let energy = |u: &[f64]| model.energy(&to_mesh(u)?);
                let outcome = descend(
                    u0,
                    stage.max_iters,
                    stage.init_step,
                    &energy,
                    |u| fd_gradient(u, 1e-3, &energy),
                    |u| to_mesh(u).is_ok(),
                )?;
                let u = outcome.x;
                state.corners = [
                    Point2::new(u[0], u[1]),
                    Point2::new(u[2], u[3]),
                    Point2::new(u[4], u[5]),
                    Point2::new(u[6], u[7]),
                ];
                state.mesh_nodes = to_mesh(&u)?;
                StageTrace {
                    kind: stage.kind,
                    iterations: outcome.iterations,
                    initial_energy: outcome.energies[0],
                    final_energy: *outcome.energies.last().unwrap(),
                    energies: outcome.energies,
                    params: u,
                    converged: outcome.converged,
                }
            }
            StageKind::TpsGrid => {
                let u0 = nodes_to_flat(&state.mesh_nodes);
                let energy = |u: &[f64]| model.energy(&flat_to_nodes(u));
                let outcome = descend(
                    u0,
                    stage.max_iters,
                    stage.init_step,
                    energy,
                    |u| {
                        let nodes = flat_to_nodes(u);
                        let (e, g) = model.energy_and_node_grad(&nodes)?;
                        Ok((e, g.iter().flat_map(|v| [v.x, v.y]).collect()))
                    },
                    |u| {
                        // orientation guard: never accept folded meshes
                        MeshGrid::new(rows, cols, flat_to_nodes(u))
                            .map(|m| mesh::foldover_count(&m) == 0)
                            .unwrap_or(false)
                    },
                )?;
                state.mesh_nodes = flat_to_nodes(&outcome.x);
                StageTrace {
                    kind: stage.kind,
                    iterations: outcome.iterations,
                    initial_energy: outcome.energies[0],
                    final_energy: *outcome.energies.last().unwrap(),
                    energies: outcome.energies,
                    params: Vec::new(),
                    converged: outcome.converged,
                }
            }
        };
        traces.push(trace);
    }

    Ok((state.mesh_nodes, traces))
}

fn finish_result(
    model: &EnergyModel,
    full_model: &EnergyModel,
    nodes: Vec<Point2<f64>>,
    traces: Vec<StageTrace>,
    seed: u64,
) -> Result<RectangleResult, RectangleError> {
    let grid = model.grid;
    let size = model.size;
    let src_mesh = MeshGrid::new(grid.0 + 1, grid.1 + 1, nodes)?;
    let dst_mesh = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
    let energy = full_model.breakdown(src_mesh.points())?;
    if !energy.total.is_finite() {
        return Err(RectangleError::NonFiniteEnergy);
    }
    Ok(RectangleResult {
        src_mesh,
        dst_mesh,
        energy,
        trace: traces,
        seed,
    })
}

/// Half-resolution probe stride used during optimization; the reported final
/// energy always uses the full-resolution lattice.
const OPT_STRIDE: usize = 2;

/// Fits the mesh against a known ground-truth image (synthetic pipelines):
/// minimizes the L1 appearance difference of the mesh-warped input to `gt`
/// plus the inter-grid and bending regularizers, staged per `plan`.
/// Deterministic for fixed inputs and seed.
#[allow(clippy::too_many_arguments)]
pub fn fit_supervised(
    rectified: &ImageBuffer,
    mask: &ValidMask,
    gt: &ImageBuffer,
    grid: (usize, usize),
    weights: EnergyWeights,
    plan: &StagePlan,
    seed: u64,
) -> Result<RectangleResult, RectangleError> {
    weights.validate()?;
    if rectified.width() != gt.width()
        || rectified.height() != gt.height()
        || rectified.channels() != gt.channels()
    {
        return Err(RectangleError::DimensionMismatch(
            rectified.width(),
            rectified.height(),
            gt.width(),
            gt.height(),
        ));
    }
    if mask.width() != rectified.width() || mask.height() != rectified.height() {
        return Err(RectangleError::DimensionMismatch(
            mask.width(),
            mask.height(),
            rectified.width(),
            rectified.height(),
        ));
    }
    let size = (gt.width(), gt.height());
    let model = EnergyModel::new(
        grid,
        size,
        weights,
        OPT_STRIDE,
        DataTerm::Supervised {
            input: rectified,
            gt,
        },
    );
    let (nodes, traces) = run_plan(&model, plan)?;
    let full = EnergyModel::new(
        grid,
        size,
        weights,
        1,
        DataTerm::Supervised {
            input: rectified,
            gt,
        },
    );
    finish_result(&model, &full, nodes, traces, seed)
}

/// Rectangles a deformed-boundary image without ground truth: the data term
/// is a boundary-coverage energy (mean saturating distance of each output
/// probe's source location to the valid region).
pub fn rectangle_unsupervised(
    rectified: &ImageBuffer,
    mask: &ValidMask,
    grid: (usize, usize),
    weights: EnergyWeights,
    plan: &StagePlan,
    seed: u64,
) -> Result<RectangleResult, RectangleError> {
    weights.validate()?;
    if mask.width() != rectified.width() || mask.height() != rectified.height() {
        return Err(RectangleError::DimensionMismatch(
            mask.width(),
            mask.height(),
            rectified.width(),
            rectified.height(),
        ));
    }
    check_mask_connected(mask)?;
    let size = (rectified.width(), rectified.height());
    let dist = distance_to_valid(mask);
    let model = EnergyModel::new(
        grid,
        size,
        weights,
        OPT_STRIDE,
        DataTerm::Coverage {
            input_size: size,
            dist: dist.clone(),
            tau: COVERAGE_TAU,
        },
    );
    let (nodes, traces) = run_plan(&model, plan)?;
    let full = EnergyModel::new(
        grid,
        size,
        weights,
        1,
        DataTerm::Coverage {
            input_size: size,
            dist,
            tau: COVERAGE_TAU,
        },
    );
    finish_result(&model, &full, nodes, traces, seed)
}

fn check_mask_connected(mask: &ValidMask) -> Result<(), RectangleError> {
    let (w, h) = (mask.width(), mask.height());
    let total = mask.count_valid();
    if total == 0 {
        return Err(RectangleError::EmptyMask);
    }
    let (cx, cy) = (w / 2, h / 2);
    if !mask.get(cx, cy) {
        return Err(RectangleError::CenterInvalid);
    }
    let mut seen = vec![false; w * h];
    let mut stack = vec![(cx, cy)];
    seen[cy * w + cx] = true;
    let mut reached = 0usize;
    while let Some((x, y)) = stack.pop() {
        reached += 1;
        let mut push = |nx: usize, ny: usize, stack: &mut Vec<(usize, usize)>| {
            let idx = ny * w + nx;
            if !seen[idx] && mask.get(nx, ny) {
                seen[idx] = true;
                stack.push((nx, ny));
            }
        };
        if x > 0 {
            push(x - 1, y, &mut stack);
        }
        if x + 1 < w {
            push(x + 1, y, &mut stack);
        }
        if y > 0 {
            push(x, y - 1, &mut stack);
        }
        if y + 1 < h {
            push(x, y + 1, &mut stack);
        }
    }
    if reached != total {
        return Err(RectangleError::DisconnectedMask);
    }
    Ok(())
}

/// Analytic rectangling flow: per-pixel displacement from rectified-image
/// coordinates to output coordinates, from the TPS solved on the fitted mesh
/// pair (source mesh → regular grid).
pub fn rectangling_flow(
    result: &RectangleResult,
    size: (usize, usize),
) -> Result<FlowField, RectangleError> {
    let cps = mesh::mesh_pair_to_control_points(&result.src_mesh, &result.dst_mesh)?;
    let t = tps::solve(&cps, 0.0)?;
    let (w, h) = size;
    let mut flow = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = Point2::new(x as f64, y as f64);
            let q = t.evaluate(p);
            flow.set(x, y, [(q.x - p.x) as f32, (q.y - p.y) as f32]);
        }
    }
    Ok(flow)
}

/// Compares an implemented gradient against central finite differences along
/// a direction set; returns the maximum relative error.
pub fn gradient_check<F>(
    energy: F,
    analytic_grad: &[f64],
    point: &[f64],
    directions: &[Vec<f64>],
    step: f64,
) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut worst = 0.0f64;
    for dir in directions {
        assert_eq!(dir.len(), point.len(), "direction dimension mismatch");
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let plus: Vec<f64> = point
            .iter()
            .zip(dir)
            .map(|(x, d)| x + step * d / norm)
            .collect();
        let minus: Vec<f64> = point
            .iter()
            .zip(dir)
            .map(|(x, d)| x - step * d / norm)
            .collect();
        let fd = (energy(&plus) - energy(&minus)) / (2.0 * step);
        let an: f64 = analytic_grad
            .iter()
            .zip(dir)
            .map(|(g, d)| g * d / norm)
            .sum();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}
