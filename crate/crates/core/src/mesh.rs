//! Regular control grids, the inter-grid co-linearity energy, piecewise
//! bilinear mesh warping, and mesh file I/O.

use std::fs;
use std::path::Path;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, ImageBuffer, RasterError, SamplePolicy, ValidMask};
use crate::tps::{ControlPointSet, TpsError};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh needs at least 2x2 nodes, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("point count {got} does not match {rows}x{cols}")]
    CountMismatch { got: usize, rows: usize, cols: usize },
    #[error("non-finite mesh coordinate")]
    NonFinite,
    #[error("mesh shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("zero-length edge at node ({row}, {col})")]
    DegenerateEdge { row: usize, col: usize },
    #[error("destination mesh is not a regular grid covering the output")]
    IrregularDestination,
    #[error("malformed mesh file: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Tps(#[from] TpsError),
}

/// `(U+1) x (V+1)` control points forming a deformable mesh, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrid {
    rows: usize,
    cols: usize,
    points: Vec<Point2<f64>>,
}

impl MeshGrid {
    pub fn new(rows: usize, cols: usize, points: Vec<Point2<f64>>) -> Result<Self, MeshError> {
        if rows < 2 || cols < 2 {
            return Err(MeshError::TooSmall { rows, cols });
        }
        if points.len() != rows * cols {
            return Err(MeshError::CountMismatch {
                got: points.len(),
                rows,
                cols,
            });
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(MeshError::NonFinite);
        }
        Ok(Self { rows, cols, points })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Point2<f64>] {
        &mut self.points
    }

    #[inline]
    pub fn point(&self, row: usize, col: usize) -> Point2<f64> {
        self.points[row * self.cols + col]
    }

    #[inline]
    pub fn set_point(&mut self, row: usize, col: usize, p: Point2<f64>) {
        self.points[row * self.cols + col] = p;
    }

    pub fn same_shape(&self, other: &MeshGrid) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// `(U+1) x (V+1)` points evenly spanning `[0, w-1] x [0, h-1]`.
/// `u_cells` subdivides vertically (rows), `v_cells` horizontally (columns).
pub fn regular_grid(u_cells: usize, v_cells: usize, width: usize, height: usize) -> MeshGrid {
    assert!(u_cells >= 1 && v_cells >= 1, "need at least one cell per axis");
    assert!(width >= 2 && height >= 2, "degenerate image extent");
    let rows = u_cells + 1;
    let cols = v_cells + 1;
    let mut points = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = r as f64 * (height - 1) as f64 / u_cells as f64;
        for c in 0..cols {
            let x = c as f64 * (width - 1) as f64 / v_cells as f64;
            points.push(Point2::new(x, y));
        }
    }
    MeshGrid {
        rows,
        cols,
        points,
    }
}

/// Mean `1 - cos` angle between successive mesh edges, over horizontal
/// triples within each row and vertical triples within each column.
/// Zero exactly when every tuple is collinear and co-directed.
pub fn intergrid_loss(mesh: &MeshGrid) -> Result<f64, MeshError> {
    let (rows, cols) = (mesh.rows, mesh.cols);
    let tuples = rows * cols.saturating_sub(2) + cols * rows.saturating_sub(2);
    if tuples == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    let mut term = |a: Point2<f64>, b: Point2<f64>, c: Point2<f64>, row, col| {
        let e1 = b - a;
        let e2 = c - b;
        let n1 = e1.norm();
        let n2 = e2.norm();
        if n1 == 0.0 || n2 == 0.0 {
            return Err(MeshError::DegenerateEdge { row, col });
        }
        acc += 1.0 - e1.dot(&e2) / (n1 * n2);
        Ok(())
    };
    for r in 0..rows {
        for c in 0..cols - 2 {
            term(mesh.point(r, c), mesh.point(r, c + 1), mesh.point(r, c + 2), r, c)?;
        }
    }
    for c in 0..cols {
        for r in 0..rows - 2 {
            term(mesh.point(r, c), mesh.point(r + 1, c), mesh.point(r + 2, c), r, c)?;
        }
    }
    Ok(acc / tuples as f64)
}

/// Same energy plus its gradient with respect to every node.
pub fn intergrid_loss_grad(mesh: &MeshGrid) -> Result<(f64, Vec<Vector2<f64>>), MeshError> {
    let (rows, cols) = (mesh.rows, mesh.cols);
    let tuples = rows * cols.saturating_sub(2) + cols * rows.saturating_sub(2);
    let mut grad = vec![Vector2::zeros(); rows * cols];
    if tuples == 0 {
        return Ok((0.0, grad));
    }
    let inv_m = 1.0 / tuples as f64;
    let mut acc = 0.0;

    let mut tuple = |ia: usize, ib: usize, ic: usize| -> Result<(), MeshError> {
        let a = mesh.points[ia];
        let b = mesh.points[ib];
        let c = mesh.points[ic];
        let e1 = b - a;
        let e2 = c - b;
        let n1 = e1.norm();
        let n2 = e2.norm();
        if n1 == 0.0 || n2 == 0.0 {
            return Err(MeshError::DegenerateEdge {
                row: ib / cols,
                col: ib % cols,
            });
        }
        let dot = e1.dot(&e2);
        acc += 1.0 - dot / (n1 * n2);
        // d(cos)/de1 = e2/(n1 n2) - dot e1 / (n1^3 n2), likewise for e2
        let dcos_de1 = e2 / (n1 * n2) - e1 * (dot / (n1 * n1 * n1 * n2));
        let dcos_de2 = e1 / (n1 * n2) - e2 * (dot / (n1 * n2 * n2 * n2));
        // loss term = (1 - cos)/M; e1 = b - a, e2 = c - b
        grad[ia] += dcos_de1 * inv_m;
        grad[ib] -= (dcos_de1 - dcos_de2) * inv_m;
        grad[ic] -= dcos_de2 * inv_m;
        Ok(())
    };

    for r in 0..rows {
        for c in 0..cols - 2 {
            tuple(r * cols + c, r * cols + c + 1, r * cols + c + 2)?;
        }
    }
    for c in 0..cols {
        for r in 0..rows - 2 {
            tuple(r * cols + c, (r + 1) * cols + c, (r + 2) * cols + c)?;
        }
    }
    Ok((acc * inv_m, grad))
}

/// Number of quads whose two triangles (split along the main diagonal) contain
/// a non-positive signed area under the regular-grid orientation.
pub fn foldover_count(mesh: &MeshGrid) -> usize {
    let cross = |o: Point2<f64>, a: Point2<f64>, b: Point2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut count = 0;
    for r in 0..mesh.rows - 1 {
        for c in 0..mesh.cols - 1 {
            let p00 = mesh.point(r, c);
            let p01 = mesh.point(r, c + 1);
            let p11 = mesh.point(r + 1, c + 1);
            let p10 = mesh.point(r + 1, c);
            let a1 = cross(p00, p01, p11);
            let a2 = cross(p00, p11, p10);
            if a1 <= 0.0 || a2 <= 0.0 {
                count += 1;
            }
        }
    }
    count
}

/// Zips corresponding nodes of two congruent meshes into control pairs.
pub fn mesh_pair_to_control_points(
    src: &MeshGrid,
    dst: &MeshGrid,
) -> Result<ControlPointSet, MeshError> {
    if !src.same_shape(dst) {
        return Err(MeshError::ShapeMismatch(src.rows, src.cols, dst.rows, dst.cols));
    }
    Ok(ControlPointSet::new(src.points.clone(), dst.points.clone())?)
}

/// Validated regular-destination geometry for constant-time cell lookup.
pub(crate) struct RegularDst {
    pub width: usize,
    pub height: usize,
    pub cell_w: f64,
    pub cell_h: f64,
    pub u_cells: usize,
    pub v_cells: usize,
}

pub(crate) fn check_regular_dst(dst: &MeshGrid) -> Result<RegularDst, MeshError> {
    let u_cells = dst.rows - 1;
    let v_cells = dst.cols - 1;
    let origin = dst.point(0, 0);
    let far = dst.point(u_cells, v_cells);
    if origin.x != 0.0 || origin.y != 0.0 || far.x <= 0.0 || far.y <= 0.0 {
        return Err(MeshError::IrregularDestination);
    }
    let cell_w = far.x / v_cells as f64;
    let cell_h = far.y / u_cells as f64;
    for r in 0..dst.rows {
        for c in 0..dst.cols {
            let p = dst.point(r, c);
            if (p.x - c as f64 * cell_w).abs() > 1e-6 || (p.y - r as f64 * cell_h).abs() > 1e-6 {
                return Err(MeshError::IrregularDestination);
            }
        }
    }
    let width = far.x.round() as usize + 1;
    let height = far.y.round() as usize + 1;
    if (far.x - (width - 1) as f64).abs() > 1e-6 || (far.y - (height - 1) as f64).abs() > 1e-6 {
        return Err(MeshError::IrregularDestination);
    }
    Ok(RegularDst {
        width,
        height,
        cell_w,
        cell_h,
        u_cells,
        v_cells,
    })
}

/// Maps an output-domain point through the mesh pair: locates the regular
/// destination cell, then bilinearly blends the four source-quad corners.
#[inline]
pub(crate) fn mesh_map_point(
    src: &MeshGrid,
    geom: &RegularDst,
    x: f64,
    y: f64,
) -> Point2<f64> {
    let gx = x / geom.cell_w;
    let gy = y / geom.cell_h;
    let j = (gx.floor() as usize).min(geom.v_cells - 1);
    let i = (gy.floor() as usize).min(geom.u_cells - 1);
    let s = gx - j as f64;
    let t = gy - i as f64;
    let p00 = src.point(i, j).coords;
    let p01 = src.point(i, j + 1).coords;
    let p10 = src.point(i + 1, j).coords;
    let p11 = src.point(i + 1, j + 1).coords;
    let top = p00 + (p01 - p00) * s;
    let bot = p10 + (p11 - p10) * s;
    Point2::from(top + (bot - top) * t)
}

/// Warps `src` so that the deformed `src_mesh` is carried onto the regular
/// `dst_mesh`: each output pixel looks up its destination cell and samples the
/// corresponding source-quad location. Piecewise-bilinear counterpart of
/// [`crate::tps::dense_warp`].
pub fn warp_by_mesh(
    src: &ImageBuffer,
    src_mesh: &MeshGrid,
    dst_mesh: &MeshGrid,
    policy: SamplePolicy,
) -> Result<(ImageBuffer, ValidMask), MeshError> {
    if !src_mesh.same_shape(dst_mesh) {
        return Err(MeshError::ShapeMismatch(
            src_mesh.rows,
            src_mesh.cols,
            dst_mesh.rows,
            dst_mesh.cols,
        ));
    }
    let geom = check_regular_dst(dst_mesh)?;
    let ch = src.channels();
    let mut out = ImageBuffer::new(geom.width, geom.height, ch)?;
    let mut mask = ValidMask::new_filled(geom.width, geom.height, false);
    let mut vals = [0.0f64; 3];
    for y in 0..geom.height {
        for x in 0..geom.width {
            let q = mesh_map_point(src_mesh, &geom, x as f64, y as f64);
            let inside = src.in_domain(q.x, q.y);
            if policy == SamplePolicy::Error && !inside {
                return Err(MeshError::Raster(RasterError::OutOfBounds {
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

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshFile {
    rows: usize,
    cols: usize,
    points: Vec<[f64; 2]>,
}

/// Writes a mesh as JSON `{rows, cols, points: [[x, y], ...]}` row-major.
/// Coordinates round-trip losslessly (shortest exact decimal form).
pub fn write_mesh<P: AsRef<Path>>(mesh: &MeshGrid, path: P) -> Result<(), MeshError> {
    let file = MeshFile {
        rows: mesh.rows,
        cols: mesh.cols,
        points: mesh.points.iter().map(|p| [p.x, p.y]).collect(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| MeshError::Malformed(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_mesh<P: AsRef<Path>>(path: P) -> Result<MeshGrid, MeshError> {
    let text = fs::read_to_string(path)?;
    let file: MeshFile =
        serde_json::from_str(&text).map_err(|e| MeshError::Malformed(e.to_string()))?;
    if file.points.len() != file.rows * file.cols {
        return Err(MeshError::Malformed(format!(
            "point count {} does not match {}x{}",
            file.points.len(),
            file.rows,
            file.cols
        )));
    }
    MeshGrid::new(
        file.rows,
        file.cols,
        file.points
            .iter()
            .map(|&[x, y]| Point2::new(x, y))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn regular_grid_two_point_span() {
        let g = regular_grid(1, 1, 3, 3);
        assert_eq!(g.rows(), 2);
        assert_eq!(g.cols(), 2);
        assert_eq!(g.point(0, 0), Point2::new(0.0, 0.0));
        assert_eq!(g.point(0, 1), Point2::new(2.0, 0.0));
        assert_eq!(g.point(1, 0), Point2::new(0.0, 2.0));
        assert_eq!(g.point(1, 1), Point2::new(2.0, 2.0));
    }

    #[test]
    fn regular_grid_9x9_spacing() {
        let g = regular_grid(8, 8, 256, 256);
        assert_eq!(g.points().len(), 81);
        assert_abs_diff_eq!(g.point(0, 1).x - g.point(0, 0).x, 255.0 / 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.point(8, 8).x, 255.0, epsilon = 1e-12);
    }

    #[test]
    fn regular_grid_rectangular_counts() {
        let g = regular_grid(2, 1, 10, 10);
        assert_eq!(g.rows(), 3);
        assert_eq!(g.cols(), 2);
        assert_eq!(g.points().len(), 6);
    }

    #[test]
    fn intergrid_zero_on_regular_grids() {
        let g = regular_grid(4, 6, 65, 33);
        assert!(intergrid_loss(&g).unwrap() < 1e-12);
    }

    /// Direct tuple-by-tuple enumeration oracle for the 3x3 grid with the
    /// center moved from (1,1) to (1,1.5).
    #[test]
    fn intergrid_matches_hand_enumeration() {
        let mut g = regular_grid(2, 2, 3, 3);
        g.set_point(1, 1, Point2::new(1.0, 1.5));
        let got = intergrid_loss(&g).unwrap();

        // oracle: enumerate all 6 tuples explicitly
        let pts = |r: usize, c: usize| g.point(r, c);
        let tuples = [
            // rows
            (pts(0, 0), pts(0, 1), pts(0, 2)),
            (pts(1, 0), pts(1, 1), pts(1, 2)),
            (pts(2, 0), pts(2, 1), pts(2, 2)),
            // columns
            (pts(0, 0), pts(1, 0), pts(2, 0)),
            (pts(0, 1), pts(1, 1), pts(2, 1)),
            (pts(0, 2), pts(1, 2), pts(2, 2)),
        ];
        let mut want = 0.0;
        for (a, b, c) in tuples {
            let e1 = b - a;
            let e2 = c - b;
            want += 1.0 - e1.dot(&e2) / (e1.norm() * e2.norm());
        }
        want /= 6.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        assert!(got > 0.0);
    }

    #[test]
    fn intergrid_invariant_under_rigid_rotation() {
        let mut g = regular_grid(3, 3, 50, 50);
        g.set_point(1, 1, Point2::new(18.0, 15.0));
        g.set_point(2, 2, Point2::new(35.0, 31.0));
        let base = intergrid_loss(&g).unwrap();
        let ang = 17.0_f64.to_radians();
        let (s, c) = ang.sin_cos();
        let rotated: Vec<_> = g
            .points()
            .iter()
            .map(|p| Point2::new(c * p.x - s * p.y + 3.0, s * p.x + c * p.y - 11.0))
            .collect();
        let gr = MeshGrid::new(g.rows(), g.cols(), rotated).unwrap();
        assert_abs_diff_eq!(intergrid_loss(&gr).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn intergrid_invariant_under_uniform_scale() {
        let mut g = regular_grid(3, 3, 50, 50);
        g.set_point(1, 2, Point2::new(36.0, 14.0));
        let base = intergrid_loss(&g).unwrap();
        let scaled: Vec<_> = g.points().iter().map(|p| Point2::new(2.5 * p.x, 2.5 * p.y)).collect();
        let gs = MeshGrid::new(g.rows(), g.cols(), scaled).unwrap();
        assert_abs_diff_eq!(intergrid_loss(&gs).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn intergrid_rejects_zero_length_edges() {
        let mut g = regular_grid(2, 2, 3, 3);
        g.set_point(0, 1, g.point(0, 0));
        assert!(matches!(
            intergrid_loss(&g),
            Err(MeshError::DegenerateEdge { .. })
        ));
    }

    #[test]
    fn intergrid_grad_matches_finite_differences() {
        let mut g = regular_grid(3, 3, 100, 100);
        // deterministic jitter
        for (i, p) in g.points_mut().iter_mut().enumerate() {
            p.x += ((i * 37 % 11) as f64 - 5.0) * 0.8;
            p.y += ((i * 53 % 13) as f64 - 6.0) * 0.8;
        }
        let (_, grad) = intergrid_loss_grad(&g).unwrap();
        let h = 1e-6;
        for idx in [0usize, 5, 10, 15] {
            for axis in 0..2 {
                let mut gp = g.clone();
                let mut gm = g.clone();
                if axis == 0 {
                    gp.points_mut()[idx].x += h;
                    gm.points_mut()[idx].x -= h;
                } else {
                    gp.points_mut()[idx].y += h;
                    gm.points_mut()[idx].y -= h;
                }
                let fd = (intergrid_loss(&gp).unwrap() - intergrid_loss(&gm).unwrap()) / (2.0 * h);
                let an = if axis == 0 { grad[idx].x } else { grad[idx].y };
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "node {idx} axis {axis}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn foldover_zero_on_regular_grid() {
        assert_eq!(foldover_count(&regular_grid(4, 4, 64, 64)), 0);
    }

    #[test]
    fn foldover_detects_swapped_nodes() {
        let mut g = regular_grid(2, 2, 30, 30);
        let a = g.point(0, 0);
        let b = g.point(0, 1);
        g.set_point(0, 0, b);
        g.set_point(0, 1, a);
        assert!(foldover_count(&g) >= 1);
    }

    #[test]
    fn foldover_flags_all_quads_on_mirrored_mesh() {
        let g = regular_grid(3, 3, 40, 40);
        let mirrored: Vec<_> = g
            .points()
            .iter()
            .map(|p| Point2::new(39.0 - p.x, p.y))
            .collect();
        let gm = MeshGrid::new(g.rows(), g.cols(), mirrored).unwrap();
        assert_eq!(foldover_count(&gm), 9);
    }

    #[test]
    fn mesh_pair_zips_nodes() {
        let a = regular_grid(8, 8, 256, 256);
        let mut b = a.clone();
        for p in b.points_mut() {
            p.x += 3.0;
            p.y -= 2.0;
        }
        let cps = mesh_pair_to_control_points(&a, &b).unwrap();
        assert_eq!(cps.len(), 81);
        for (s, t) in cps.sources().iter().zip(cps.targets()) {
            assert_abs_diff_eq!(t.x - s.x, 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(t.y - s.y, -2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mesh_pair_shape_mismatch_errors() {
        let a = regular_grid(2, 2, 10, 10);
        let b = regular_grid(3, 3, 10, 10);
        assert!(matches!(
            mesh_pair_to_control_points(&a, &b),
            Err(MeshError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn mesh_pair_round_trip_through_tps() {
        let src = regular_grid(3, 3, 64, 64);
        let mut dst = src.clone();
        for (i, p) in dst.points_mut().iter_mut().enumerate() {
            p.x += ((i * 7 % 5) as f64 - 2.0) * 1.3;
            p.y += ((i * 11 % 7) as f64 - 3.0) * 1.1;
        }
        let cps = mesh_pair_to_control_points(&src, &dst).unwrap();
        let t = crate::tps::solve(&cps, 0.0).unwrap();
        for (s, d) in src.points().iter().zip(dst.points()) {
            let got = t.evaluate(*s);
            assert!((got - d).norm() < 1e-6);
        }
    }

    #[test]
    fn warp_identity_mesh_is_identity() {
        let img = crate::curriculum::synth_source(5, 33, 33);
        let g = regular_grid(4, 4, 33, 33);
        let (out, mask) = warp_by_mesh(&img, &g, &g, SamplePolicy::Zero).unwrap();
        let max_diff = img
            .pixels()
            .iter()
            .zip(out.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1.0 / 255.0);
        assert_eq!(mask.count_valid(), 33 * 33);
    }

    #[test]
    fn warp_translated_mesh_shifts_image() {
        let img = crate::curriculum::synth_source(9, 32, 32);
        let dst = regular_grid(4, 4, 32, 32);
        let mut src = dst.clone();
        for p in src.points_mut() {
            p.x += 3.0;
        }
        let (out, _) = warp_by_mesh(&img, &src, &dst, SamplePolicy::Zero).unwrap();
        for y in 0..32 {
            for x in 0..29 {
                let a = out.pixel(x, y);
                let b = img.pixel(x + 3, y);
                for c in 0..a.len() {
                    assert!((a[c] - b[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn warp_agrees_with_tps_dense_warp_on_smooth_mesh() {
        let img = crate::curriculum::synth_source(21, 128, 128);
        let dst = regular_grid(8, 8, 128, 128);
        let mut src = dst.clone();
        for (i, p) in src.points_mut().iter_mut().enumerate() {
            p.x += 2.0 * (0.37 * i as f64).sin();
            p.y += 2.0 * (0.53 * i as f64).cos();
        }
        let (a, _) = warp_by_mesh(&img, &src, &dst, SamplePolicy::Clamp).unwrap();
        let cps = mesh_pair_to_control_points(&dst, &src).unwrap();
        let t = crate::tps::solve(&cps, 0.0).unwrap();
        let (b, _) = crate::tps::dense_warp(&img, &t, (128, 128), SamplePolicy::Clamp).unwrap();
        let mad: f64 = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.pixels().len() as f64;
        assert!(mad <= 1.0 / 255.0, "mean abs difference {mad}");
    }

    #[test]
    fn mesh_io_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.json");
        let mut g = regular_grid(8, 8, 256, 256);
        for (i, p) in g.points_mut().iter_mut().enumerate() {
            p.x += (i as f64 * 0.123456789).sin() * 4.0;
            p.y += (i as f64 * 0.987654321).cos() * 4.0;
        }
        write_mesh(&g, &path).unwrap();
        let back = read_mesh(&path).unwrap();
        assert_eq!(g.rows(), back.rows());
        assert_eq!(g.cols(), back.cols());
        for (a, b) in g.points().iter().zip(back.points()) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }
        // 81 coordinate pairs on disk
        let text = fs::read_to_string(&path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["points"].as_array().unwrap().len(), 81);
    }

    #[test]
    fn mesh_io_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, r#"{"rows":2,"cols":2,"points":[[0,0],[1,0],[0,1]]}"#).unwrap();
        assert!(matches!(read_mesh(&path), Err(MeshError::Malformed(_))));
    }

    #[test]
    fn mesh_io_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.json");
        fs::write(
            &path,
            r#"{"rows":2,"cols":2,"points":[[0,0],[1,0],[0,1],[1,1]],"extra":1}"#,
        )
        .unwrap();
        assert!(matches!(read_mesh(&path), Err(MeshError::Malformed(_))));
    }
}
