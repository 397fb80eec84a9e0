//! Thin-plate-spline solver, evaluator, bending energy, and dense warping.
//!
//! A TPS is the 2D interpolant minimizing the integral of squared second
//! derivatives among all maps that carry each source control point to its
//! target. It decomposes into an affine part plus a radial-basis sum with
//! kernel `U(r) = r^2 log r^2` centered at the source control points.

use nalgebra::{DMatrix, DVector, Matrix2x3, Point2, Vector2};
use thiserror::Error;

use crate::raster::{self, ImageBuffer, RasterError, SamplePolicy, ValidMask};

#[derive(Debug, Error)]
pub enum TpsError {
    #[error("need at least 3 control points, got {0}")]
    TooFewPoints(usize),
    #[error("source and target counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("non-finite control point coordinate")]
    NonFinite,
    #[error("degenerate control configuration (collinear or duplicated sources)")]
    Degenerate,
    #[error("negative regularization {0}")]
    NegativeRegularization(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Paired source/target control points.
#[derive(Debug, Clone)]
pub struct ControlPointSet {
    sources: Vec<Point2<f64>>,
    targets: Vec<Point2<f64>>,
}

impl ControlPointSet {
    pub fn new(
        sources: Vec<Point2<f64>>,
        targets: Vec<Point2<f64>>,
    ) -> Result<Self, TpsError> {
        if sources.len() != targets.len() {
            return Err(TpsError::CountMismatch(sources.len(), targets.len()));
        }
        if sources.len() < 3 {
            return Err(TpsError::TooFewPoints(sources.len()));
        }
        if sources
            .iter()
            .chain(targets.iter())
            .any(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(TpsError::NonFinite);
        }
        Ok(Self { sources, targets })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn sources(&self) -> &[Point2<f64>] {
        &self.sources
    }

    pub fn targets(&self) -> &[Point2<f64>] {
        &self.targets
    }
}

/// Radial basis kernel `U(r) = r^2 log(r^2)`, continuously extended with
/// `U(0) = 0`.
#[inline]
pub fn kernel_u(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        let s = r * r;
        s * s.ln()
    }
}

#[inline]
fn kernel_u_sq(s: f64) -> f64 {
    // same kernel, taking the squared radius directly
    if s <= 0.0 {
        0.0
    } else {
        s * s.ln()
    }
}

/// Solved thin-plate spline. Immutable; evaluation is pure.
#[derive(Debug, Clone)]
pub struct TpsTransform {
    /// Affine part as a 2x3 matrix acting on `[x, y, 1]`.
    affine: Matrix2x3<f64>,
    /// Kernel weights, one 2-vector per control point.
    weights: Vec<Vector2<f64>>,
    /// Source control points the kernel is centered at.
    centers: Vec<Point2<f64>>,
    /// Regularization used at solve time (applied to the normalized kernel
    /// matrix diagonal).
    regularization: f64,
}

/// Condition-number threshold past which the augmented system counts as
/// degenerate.
const CONDITION_LIMIT: f64 = 1e12;

/// Solves the standard augmented TPS system for the given pairs.
///
/// Coordinates are normalized to `[-1, 1]^2` internally (isotropic, from the
/// source bounding box) so the kernel matrix stays well-conditioned at image
/// scale; the returned transform is expressed back in input coordinates.
pub fn solve(cps: &ControlPointSet, regularization: f64) -> Result<TpsTransform, TpsError> {
    if regularization < 0.0 {
        return Err(TpsError::NegativeRegularization(regularization));
    }
    let n = cps.len();

    // isotropic normalization from the source bounding box
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &cps.sources {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let center = Vector2::new(0.5 * (min_x + max_x), 0.5 * (min_y + max_y));
    let half = 0.5 * ((max_x - min_x).max(max_y - min_y));
    if half <= 0.0 {
        return Err(TpsError::Degenerate);
    }
    let scale = half;

    let src_n: Vec<Vector2<f64>> = cps
        .sources
        .iter()
        .map(|p| (p.coords - center) / scale)
        .collect();
    let tgt_n: Vec<Vector2<f64>> = cps
        .targets
        .iter()
        .map(|p| (p.coords - center) / scale)
        .collect();

    // augmented system [[K + lambda I, P], [P^T, 0]]
    let dim = n + 3;
    let mut l = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        for j in (i + 1)..n {
            let u = kernel_u((src_n[i] - src_n[j]).norm());
            l[(i, j)] = u;
            l[(j, i)] = u;
        }
        l[(i, i)] = regularization;
        l[(i, n)] = 1.0;
        l[(i, n + 1)] = src_n[i].x;
        l[(i, n + 2)] = src_n[i].y;
        l[(n, i)] = 1.0;
        l[(n + 1, i)] = src_n[i].x;
        l[(n + 2, i)] = src_n[i].y;
    }

    let cond = {
        let sv = l.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if smin <= 0.0 {
            f64::INFINITY
        } else {
            smax / smin
        }
    };
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(TpsError::Degenerate);
    }

    let lu = l.lu();
    let mut rhs_x = DVector::<f64>::zeros(dim);
    let mut rhs_y = DVector::<f64>::zeros(dim);
    for i in 0..n {
        rhs_x[i] = tgt_n[i].x;
        rhs_y[i] = tgt_n[i].y;
    }
    let sol_x = lu.solve(&rhs_x).ok_or(TpsError::Degenerate)?;
    let sol_y = lu.solve(&rhs_y).ok_or(TpsError::Degenerate)?;

    // De-normalize into pixel-frame parameters. With
    //   T(x) = c + s * T_n((x - c) / s)
    // and U(d/s) = U(d)/s^2 - (log s^2 / s^2) d^2, the d^2 terms collapse to a
    // constant under the side conditions, leaving
    //   w_pix = w_n / s
    //   affine_pix = composed affine minus (log s^2 / s) * sum_i w_n,i |s_i|^2.
    let log_s2_over_s = (scale * scale).ln() / scale;
    let mut kappa = Vector2::zeros();
    for i in 0..n {
        let w_n = Vector2::new(sol_x[i], sol_y[i]);
        kappa += w_n * cps.sources[i].coords.norm_squared();
    }

    let a_lin = nalgebra::Matrix2::new(sol_x[n + 1], sol_x[n + 2], sol_y[n + 1], sol_y[n + 2]);
    let a_const = Vector2::new(sol_x[n], sol_y[n]);
    let translation = center - a_lin * center + scale * a_const - log_s2_over_s * kappa;

    let affine = Matrix2x3::new(
        a_lin[(0, 0)],
        a_lin[(0, 1)],
        translation.x,
        a_lin[(1, 0)],
        a_lin[(1, 1)],
        translation.y,
    );
    let weights = (0..n)
        .map(|i| Vector2::new(sol_x[i], sol_y[i]) / scale)
        .collect();

    Ok(TpsTransform {
        affine,
        weights,
        centers: cps.sources.clone(),
        regularization,
    })
}

impl TpsTransform {
    /// Identity transform with the given kernel centers (all weights zero).
    pub fn identity(centers: Vec<Point2<f64>>) -> Self {
        let n = centers.len();
        Self {
            affine: Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
            weights: vec![Vector2::zeros(); n],
            centers,
            regularization: 0.0,
        }
    }

    pub fn affine(&self) -> &Matrix2x3<f64> {
        &self.affine
    }

    pub fn weights(&self) -> &[Vector2<f64>] {
        &self.weights
    }

    pub fn centers(&self) -> &[Point2<f64>] {
        &self.centers
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    /// `A [q; 1] + sum_i w_i U(|center_i - q|)`.
    pub fn evaluate(&self, q: Point2<f64>) -> Point2<f64> {
        let mut out = Vector2::new(
            self.affine[(0, 0)] * q.x + self.affine[(0, 1)] * q.y + self.affine[(0, 2)],
            self.affine[(1, 0)] * q.x + self.affine[(1, 1)] * q.y + self.affine[(1, 2)],
        );
        for (w, c) in self.weights.iter().zip(&self.centers) {
            let d = q - c;
            out += *w * kernel_u_sq(d.norm_squared());
        }
        Point2::from(out)
    }

    /// Closed-form bending quadratic `w_x^T K w_x + w_y^T K w_y`,
    /// proportional to the thin-plate integral of squared second derivatives
    /// (the exact integral is `16 pi` times this value). Zero for purely
    /// affine transforms.
    pub fn bending_energy(&self) -> f64 {
        let n = self.weights.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let u = kernel_u_sq((self.centers[i] - self.centers[j]).norm_squared());
                acc += 2.0 * u * self.weights[i].dot(&self.weights[j]);
            }
        }
        // diagonal terms vanish: U(0) = 0
        acc.max(0.0)
    }

    /// Largest violation of the side conditions
    /// `sum w = 0`, `sum w x = 0`, `sum w y = 0` across both channels.
    pub fn side_condition_residual(&self) -> f64 {
        let mut s0 = Vector2::zeros();
        let mut sx = Vector2::zeros();
        let mut sy = Vector2::zeros();
        for (w, c) in self.weights.iter().zip(&self.centers) {
            s0 += *w;
            sx += *w * c.x;
            sy += *w * c.y;
        }
        [s0, sx, sy]
            .iter()
            .flat_map(|v| [v.x.abs(), v.y.abs()])
            .fold(0.0, f64::max)
    }
}

/// Backward-warps `src` through `t_out_to_src`: each output pixel is carried
/// by the transform into source coordinates and bilinearly sampled.
///
/// The mask is true where the mapped location lies inside the source domain,
/// independent of the fill policy.
pub fn dense_warp(
    src: &ImageBuffer,
    t_out_to_src: &TpsTransform,
    out_size: (usize, usize),
    policy: SamplePolicy,
) -> Result<(ImageBuffer, ValidMask), TpsError> {
    let (ow, oh) = out_size;
    let ch = src.channels();
    let mut out = ImageBuffer::new(ow, oh, ch)?;
    let mut mask = ValidMask::new_filled(ow, oh, false);
    let mut vals = [0.0f64; 3];
    for y in 0..oh {
        for x in 0..ow {
            let q = t_out_to_src.evaluate(Point2::new(x as f64, y as f64));
            let inside = src.in_domain(q.x, q.y);
            if policy == SamplePolicy::Error && !inside {
                return Err(TpsError::Raster(RasterError::OutOfBounds {
                    x: q.x,
                    y: q.y,
                    width: src.width(),
                    height: src.height(),
                }));
            }
            raster::sample_into(src, q.x, q.y, policy, &mut vals[..ch]);
            mask.set(x, y, inside);
            let px: [f32; 3] = [
                vals[0].clamp(0.0, 1.0) as f32,
                vals[1].clamp(0.0, 1.0) as f32,
                vals[2].clamp(0.0, 1.0) as f32,
            ];
            out.set_pixel(x, y, &px[..ch]);
        }
    }
    Ok((out, mask))
}
