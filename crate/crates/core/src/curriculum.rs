//! Dataset generator for the three optimization stages: 4-DoF similarity
//! pairs, 8-DoF homography pairs, and rectangling pairs with exact planted
//! ground truth.
//!
//! Every planted mesh uses the same convention as the rectangler's fitted
//! mesh: node `(r, c)` holds the position in the *input* image where the
//! content of the corresponding regular output node lives. Rectangling pairs
//! plant the polynomial rectification warp itself (the source image radially
//! pulled toward the principal point, leaving blank corners), so recovery is
//! quantifiable against an analytic ground truth instead of a hand-filtered
//! label pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Vector2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distortion::{self, DistortionError, DistortionParams, RadialMode};
use crate::mesh::{self, MeshError, MeshGrid};
use crate::raster::{self, ImageBuffer, RasterError, SamplePolicy, ValidMask};
use crate::rectangler::{self, Homography, RectangleError};
use crate::tps::{self, TpsError};

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("generation failed: {0}")]
    GenerationFailed(String),
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("source directory {0} holds no loadable images")]
    EmptySourceDir(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Tps(#[from] TpsError),
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error(transparent)]
    Rectangle(#[from] RectangleError),
}

/// 64-bit FNV-1a over the little-endian bytes of `master` then `index`;
/// the per-item RNG seed.
pub fn item_seed(master: u64, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut hash = OFFSET;
    for b in master.to_le_bytes().into_iter().chain(index.to_le_bytes()) {
        hash ^= b as u64;
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

// ---------------------------------------------------------------------------
// deterministic source imagery
// ---------------------------------------------------------------------------

/// Band-limited smooth RGB test image: a deterministic sum of low-frequency
/// cosine gratings (wavelengths 16..64 px), normalized into [0.06, 0.94].
pub fn synth_source(seed: u64, width: usize, height: usize) -> ImageBuffer {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    struct Grating {
        kx: f64,
        ky: f64,
        phase: f64,
        amp: f64,
    }
    let draw = |amp: f64, rng: &mut ChaCha12Rng| {
        let wavelength: f64 = rng.random_range(16.0..64.0);
        let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let omega = std::f64::consts::TAU / wavelength;
        Grating {
            kx: omega * dir.cos(),
            ky: omega * dir.sin(),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp,
        }
    };
    let shared: Vec<Grating> = (0..6).map(|m| draw(1.0 / (m + 1) as f64, &mut rng)).collect();
    let per_channel: Vec<Vec<Grating>> = (0..3)
        .map(|_| (0..2).map(|m| draw(0.3 / (m + 1) as f64, &mut rng)).collect())
        .collect();

    let mut raw = vec![0.0f64; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let base: f64 = shared
                .iter()
                .map(|g| g.amp * (g.kx * xf + g.ky * yf + g.phase).cos())
                .sum();
            for c in 0..3 {
                let delta: f64 = per_channel[c]
                    .iter()
                    .map(|g| g.amp * (g.kx * xf + g.ky * yf + g.phase).cos())
                    .sum();
                raw[(y * width + x) * 3 + c] = base + delta;
            }
        }
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let data: Vec<f32> = raw
        .iter()
        .map(|&v| (0.06 + 0.88 * (v - lo) / span) as f32)
        .collect();
    ImageBuffer::from_pixels(width, height, 3, data).expect("normalized samples are in range")
}

/// Single-channel checkerboard with the given cell size.
pub fn checkerboard(width: usize, height: usize, cell: usize) -> ImageBuffer {
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let on = ((x / cell) + (y / cell)) % 2 == 0;
            data.push(if on { 0.95 } else { 0.05 });
        }
    }
    ImageBuffer::from_pixels(width, height, 1, data).unwrap()
}

// ---------------------------------------------------------------------------
// stage generators
// ---------------------------------------------------------------------------

/// Parameter ranges for 4-DoF pairs. Defaults keep content in frame at
/// 256x256: scale 0.9..1.1, rotation ±15°, translation ±10 px.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityRanges {
    pub scale: (f64, f64),
    pub rotation: (f64, f64),
    pub translation: (f64, f64),
}

impl Default for SimilarityRanges {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            rotation: (-15.0_f64.to_radians(), 15.0_f64.to_radians()),
            translation: (-10.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub scale: f64,
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

#[derive(Debug, Clone)]
pub struct SimilarityPair {
    pub input: ImageBuffer,
    pub mask: ValidMask,
    pub params: SimilarityParams,
    /// Planted mesh: regular output nodes mapped into the input image.
    pub mesh: MeshGrid,
}

/// Draws 4-DoF parameters, warps `img` by the inverse similarity (clamp
/// policy, so the frame stays fully populated), and returns the planted
/// parameters and mesh.
pub fn gen_similarity_pair(
    img: &ImageBuffer,
    ranges: &SimilarityRanges,
    grid: (usize, usize),
    rng: &mut ChaCha12Rng,
) -> Result<SimilarityPair, CurriculumError> {
    let size = (img.width(), img.height());
    let scale = rng.random_range(ranges.scale.0..=ranges.scale.1);
    let rotation = rng.random_range(ranges.rotation.0..=ranges.rotation.1);
    let tx = rng.random_range(ranges.translation.0..=ranges.translation.1);
    let ty = rng.random_range(ranges.translation.0..=ranges.translation.1);
    let t = Vector2::new(tx, ty);

    let mesh = rectangler::similarity_to_mesh(scale, rotation, t, grid, size);
    let (si, ri, ti) = rectangler::similarity_inverse(scale, rotation, t);
    let inv_mesh = rectangler::similarity_to_mesh(si, ri, ti, grid, size);
    let regular = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
    let cps = mesh::mesh_pair_to_control_points(&regular, &inv_mesh)?;
    let t_inv = tps::solve(&cps, 0.0)?;
    let (input, mask) = tps::dense_warp(img, &t_inv, size, SamplePolicy::Clamp)?;
    Ok(SimilarityPair {
        input,
        mask,
        params: SimilarityParams {
            scale,
            rotation,
            tx,
            ty,
        },
        mesh,
    })
}

#[derive(Debug, Clone)]
pub struct HomographyPair {
    pub input: ImageBuffer,
    pub mask: ValidMask,
    /// Mapped image corners (top-left, top-right, bottom-left, bottom-right).
    pub corners: [Point2<f64>; 4],
    pub mesh: MeshGrid,
    /// Rejection-sampling attempts consumed (non-convex draws are redrawn).
    pub attempts: usize,
}

/// Convexity of the corner quad traversed tl → tr → br → bl.
pub fn corners_convex(corners: &[Point2<f64>; 4]) -> bool {
    let cycle = [corners[0], corners[1], corners[3], corners[2]];
    let mut sign = 0.0f64;
    for i in 0..4 {
        let a = cycle[i];
        let b = cycle[(i + 1) % 4];
        let c = cycle[(i + 2) % 4];
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross == 0.0 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Draws four corner offsets uniform in `[-max_perturb, max_perturb]^2`,
/// rejecting non-convex configurations (bounded retries), and warps `img` by
/// the inverse homography.
pub fn gen_homography_pair(
    img: &ImageBuffer,
    max_perturb: f64,
    grid: (usize, usize),
    rng: &mut ChaCha12Rng,
) -> Result<HomographyPair, CurriculumError> {
    let size = (img.width(), img.height());
    if max_perturb >= size.0.min(size.1) as f64 / 4.0 {
        return Err(CurriculumError::BadSpec(format!(
            "max_perturb {max_perturb} too large for {}x{} images",
            size.0, size.1
        )));
    }
    let base = rectangler::image_corners(size);
    for attempt in 1..=100 {
        let mut corners = base;
        for c in &mut corners {
            c.x += rng.random_range(-max_perturb..=max_perturb);
            c.y += rng.random_range(-max_perturb..=max_perturb);
        }
        if !corners_convex(&corners) {
            continue;
        }
        let h = match Homography::from_corner_pairs(&base, &corners) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let h_inv = match h.inverse() {
            Ok(h) => h,
            Err(_) => continue,
        };
        let mesh = rectangler::homography_corners_to_mesh(&corners, grid, size)?;
        let regular = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
        let inv_nodes: Vec<Point2<f64>> =
            regular.points().iter().map(|&p| h_inv.apply(p)).collect();
        let inv_mesh = MeshGrid::new(regular.rows(), regular.cols(), inv_nodes)?;
        let cps = mesh::mesh_pair_to_control_points(&regular, &inv_mesh)?;
        let t_inv = tps::solve(&cps, 0.0)?;
        let (input, mask) = tps::dense_warp(img, &t_inv, size, SamplePolicy::Clamp)?;
        return Ok(HomographyPair {
            input,
            mask,
            corners,
            mesh,
            attempts: attempt,
        });
    }
    Err(CurriculumError::GenerationFailed(
        "no convex corner draw in 100 attempts".into(),
    ))
}

/// Coefficient magnitude ranges (log-uniform draws) and deformation bounds
/// for rectangling pairs. The leading linear coefficient is fixed at 1; the
/// drawn values fill the cubic and higher slots, with the published
/// magnitude decades as defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectRanges {
    /// cubic-slot magnitude, sign fixed negative
    pub k1_magnitude: (f64, f64),
    /// quintic-slot magnitude, random sign
    pub k2_magnitude: (f64, f64),
    /// septic-slot magnitude, random sign
    pub k3_magnitude: (f64, f64),
    /// accepted planted-mesh corner displacement band (px)
    pub min_displacement: f64,
    pub max_displacement: f64,
    /// virtual focal length; defaults to half the image width
    pub focal: Option<f64>,
}

impl Default for RectRanges {
    fn default() -> Self {
        Self {
            k1_magnitude: (1e-8, 1e-4),
            k2_magnitude: (1e-12, 1e-8),
            k3_magnitude: (1e-16, 1e-12),
            min_displacement: 5.0,
            max_displacement: 12.0,
            focal: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RectPair {
    /// Deformed-boundary rectified input (blank corners).
    pub input: ImageBuffer,
    pub mask: ValidMask,
    pub coefficients: [f64; 4],
    pub focal: f64,
    /// Planted mesh: the inverse rectification map sampled at grid nodes.
    pub mesh: MeshGrid,
    pub attempts: usize,
}

fn log_uniform(rng: &mut ChaCha12Rng, range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Draws polynomial coefficients in the published magnitude decades
/// (rejecting non-monotone profiles and draws whose mask would stay
/// rectangular or deform outside the accepted band), rectifies the source
/// through the drawn profile, and records the exact analytic mesh.
pub fn gen_rectangling_pair(
    img: &ImageBuffer,
    ranges: &RectRanges,
    grid: (usize, usize),
    rng: &mut ChaCha12Rng,
) -> Result<RectPair, CurriculumError> {
    let size = (img.width(), img.height());
    let principal = Point2::new((size.0 - 1) as f64 / 2.0, (size.1 - 1) as f64 / 2.0);
    let focal = ranges.focal.unwrap_or(size.0 as f64 / 2.0);

    for attempt in 1..=100 {
        let k1 = -log_uniform(rng, ranges.k1_magnitude);
        let k2 = log_uniform(rng, ranges.k2_magnitude)
            * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let k3 = log_uniform(rng, ranges.k3_magnitude)
            * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let k = [1.0, k1, k2, k3];
        let params = match DistortionParams::new(k, principal, focal, RadialMode::PixelRadius, size)
        {
            Ok(p) => p,
            Err(DistortionError::NonMonotone { .. }) => continue,
            Err(e) => return Err(e.into()),
        };

        // the boundary must actually deform: all four corner offsets map
        // outside the frame
        let corners = rectangler::image_corners(size);
        let deforms = corners.iter().all(|c| {
            let q = params.rectify_point(c - principal);
            !(q.x >= 0.0
                && q.y >= 0.0
                && q.x <= (size.0 - 1) as f64
                && q.y <= (size.1 - 1) as f64)
        });
        if !deforms {
            continue;
        }

        // planted mesh: inverse rectification at grid nodes
        match planted_rect_mesh(&params, grid, size) {
            Ok(mesh) => {
                let regular = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
                let max_disp = mesh
                    .points()
                    .iter()
                    .zip(regular.points())
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                if max_disp < ranges.min_displacement || max_disp > ranges.max_displacement {
                    continue;
                }
                let (input, mask) = distortion::rectify_image(img, &params, size)?;
                return Ok(RectPair {
                    input,
                    mask,
                    coefficients: k,
                    focal,
                    mesh,
                    attempts: attempt,
                });
            }
            Err(_) => continue, // corner radius unreachable: profile too weak
        }
    }
    Err(CurriculumError::GenerationFailed(
        "no acceptable coefficient draw in 100 attempts".into(),
    ))
}

/// Inverse rectification map sampled at regular grid nodes: where each
/// output node's content sits in the rectified input.
pub fn planted_rect_mesh(
    params: &DistortionParams,
    grid: (usize, usize),
    size: (usize, usize),
) -> Result<MeshGrid, CurriculumError> {
    let regular = mesh::regular_grid(grid.0, grid.1, size.0, size.1);
    let principal = params.principal();
    let mut nodes = Vec::with_capacity(regular.points().len());
    for g in regular.points() {
        let offset = g - principal;
        let radius = offset.norm();
        if radius == 0.0 {
            nodes.push(principal);
            continue;
        }
        let t = params.invert_radial(radius)?;
        nodes.push(principal + offset * (t / radius));
    }
    Ok(MeshGrid::new(regular.rows(), regular.cols(), nodes)?)
}

/// Replays a planted warp: carries `gt` through the stored mesh (solving the
/// forward spline from mesh nodes to the regular grid) to reproduce the
/// generated input image.
pub fn replay_planted_warp(
    gt: &ImageBuffer,
    mesh: &MeshGrid,
) -> Result<(ImageBuffer, ValidMask), CurriculumError> {
    let size = (gt.width(), gt.height());
    let u_cells = mesh.rows() - 1;
    let v_cells = mesh.cols() - 1;
    let regular = mesh::regular_grid(u_cells, v_cells, size.0, size.1);
    let cps = mesh::mesh_pair_to_control_points(mesh, &regular)?;
    let t = tps::solve(&cps, 0.0)?;
    Ok(tps::dense_warp(gt, &t, size, SamplePolicy::Zero)?)
}

// ---------------------------------------------------------------------------
// dataset assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sim4,
    Homo8,
    Rect,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Sim4 => "sim4",
            Stage::Homo8 => "homo8",
            Stage::Rect => "rect",
        }
    }
}

/// Stage-specific parameter ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum StageRanges {
    Sim(SimilarityRanges),
    Homo { max_perturb: f64 },
    Rect(RectRanges),
}

impl StageRanges {
    pub fn default_for(stage: Stage) -> Self {
        match stage {
            Stage::Sim4 => StageRanges::Sim(SimilarityRanges::default()),
            Stage::Homo8 => StageRanges::Homo { max_perturb: 25.0 },
            Stage::Rect => StageRanges::Rect(RectRanges::default()),
        }
    }
}

/// Source of the rectilinear base images.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum SourceSpec {
    /// Band-limited synthetic images, seeded per item.
    Synthetic,
    /// Any directory of PPM/PGM images, cycled by index (sorted order).
    Directory(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSpec {
    pub stage: Stage,
    pub count: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// cells per axis; the mesh carries (grid.0 + 1) x (grid.1 + 1) nodes
    pub grid: (usize, usize),
    pub ranges: StageRanges,
    pub source: SourceSpec,
}

impl CurriculumSpec {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        if self.count == 0 {
            return Err(CurriculumError::BadSpec("count must be at least 1".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(CurriculumError::BadSpec("image size too small".into()));
        }
        if self.grid.0 < 1 || self.grid.1 < 1 {
            return Err(CurriculumError::BadSpec("grid needs at least one cell".into()));
        }
        let matches = matches!(
            (&self.ranges, self.stage),
            (StageRanges::Sim(_), Stage::Sim4)
                | (StageRanges::Homo { .. }, Stage::Homo8)
                | (StageRanges::Rect(_), Stage::Rect)
        );
        if !matches {
            return Err(CurriculumError::BadSpec(
                "ranges do not match the requested stage".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub index: usize,
    pub seed: u64,
    pub input: String,
    pub mask: String,
    pub gt: String,
    pub mesh: String,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: CurriculumSpec,
    pub items: Vec<ManifestItem>,
}

/// Writes `manifest.json` (spec echo plus per-item records) into `out_dir`.
pub fn write_manifest(manifest: &Manifest, out_dir: &Path) -> Result<PathBuf, CurriculumError> {
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CurriculumError::Manifest(e.to_string()))?;
    fs::write(&path, json)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CurriculumError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CurriculumError::Manifest(e.to_string()))
}

/// One generated dataset item, before or after writing to disk.
pub struct GeneratedItem {
    pub index: usize,
    pub seed: u64,
    pub gt: ImageBuffer,
    pub input: ImageBuffer,
    pub mask: ValidMask,
    pub mesh: MeshGrid,
    pub params: serde_json::Value,
}

fn load_source_list(dir: &Path) -> Result<Vec<PathBuf>, CurriculumError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CurriculumError::EmptySourceDir(dir.to_path_buf()));
    }
    Ok(files)
}

/// Generates a single item; fully determined by `spec` and the item index.
pub fn generate_item(
    spec: &CurriculumSpec,
    index: usize,
    sources: Option<&[PathBuf]>,
) -> Result<GeneratedItem, CurriculumError> {
    let seed = item_seed(spec.seed, index as u64);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gt = match (&spec.source, sources) {
        (SourceSpec::Synthetic, _) => synth_source(seed, spec.width, spec.height),
        (SourceSpec::Directory(_), Some(files)) => {
            let path = &files[index % files.len()];
            let img = raster::load_image(path)?;
            if img.width() != spec.width || img.height() != spec.height {
                return Err(CurriculumError::BadSpec(format!(
                    "source {} is {}x{}, expected {}x{}",
                    path.display(),
                    img.width(),
                    img.height(),
                    spec.width,
                    spec.height
                )));
            }
            img
        }
        (SourceSpec::Directory(dir), None) => {
            let files = load_source_list(dir)?;
            let path = &files[index % files.len()];
            raster::load_image(path)?
        }
    };

    let (input, mask, mesh, params) = match (&spec.ranges, spec.stage) {
        (StageRanges::Sim(ranges), Stage::Sim4) => {
            let pair = gen_similarity_pair(&gt, ranges, spec.grid, &mut rng)?;
            let params = serde_json::to_value(pair.params)
                .map_err(|e| CurriculumError::Manifest(e.to_string()))?;
            (pair.input, pair.mask, pair.mesh, params)
        }
        (StageRanges::Homo { max_perturb }, Stage::Homo8) => {
            let pair = gen_homography_pair(&gt, *max_perturb, spec.grid, &mut rng)?;
            let corners: Vec<[f64; 2]> = pair.corners.iter().map(|p| [p.x, p.y]).collect();
            let params = serde_json::json!({ "corners": corners });
            (pair.input, pair.mask, pair.mesh, params)
        }
        (StageRanges::Rect(ranges), Stage::Rect) => {
            let pair = gen_rectangling_pair(&gt, ranges, spec.grid, &mut rng)?;
            let params = serde_json::json!({
                "coefficients": pair.coefficients,
                "focal": pair.focal,
            });
            (pair.input, pair.mask, pair.mesh, params)
        }
        _ => {
            return Err(CurriculumError::BadSpec(
                "ranges do not match the requested stage".into(),
            ))
        }
    };

    Ok(GeneratedItem {
        index,
        seed,
        gt,
        input,
        mask,
        mesh,
        params,
    })
}

/// Generates the full dataset under `out_dir/{stage}/` and writes the
/// manifest at the root. Returns the manifest.
pub fn generate_dataset(
    spec: &CurriculumSpec,
    out_dir: &Path,
) -> Result<Manifest, CurriculumError> {
    spec.validate()?;
    let stage_dir = out_dir.join(spec.stage.dir_name());
    fs::create_dir_all(&stage_dir)?;
    let sources = match &spec.source {
        SourceSpec::Directory(dir) => Some(load_source_list(dir)?),
        SourceSpec::Synthetic => None,
    };

    let mut items = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let item = generate_item(spec, index, sources.as_deref())?;
        let rel = |suffix: &str| format!("{}/{:05}_{}", spec.stage.dir_name(), index, suffix);
        let input_rel = rel("input.ppm");
        let mask_rel = rel("mask.pgm");
        let gt_rel = rel("gt.ppm");
        let mesh_rel = rel("mesh.json");
        raster::save_image(&item.input, out_dir.join(&input_rel))?;
        raster::save_mask(&item.mask, out_dir.join(&mask_rel))?;
        raster::save_image(&item.gt, out_dir.join(&gt_rel))?;
        mesh::write_mesh(&item.mesh, out_dir.join(&mesh_rel))?;
        items.push(ManifestItem {
            index,
            seed: item.seed,
            input: input_rel,
            mask: mask_rel,
            gt: gt_rel,
            mesh: mesh_rel,
            params: item.params,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        items,
    };
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// boundary-shape measurement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

/// Maximum deviation (px) of a mask side's boundary from its least-squares
/// line, measured over the central `band` fraction of the side. `None` when
/// fewer than 8 boundary points exist.
pub fn mask_side_line_deviation(mask: &ValidMask, side: Side, band: (f64, f64)) -> Option<f64> {
    let (w, h) = (mask.width(), mask.height());
    let mut pts: Vec<(f64, f64)> = Vec::new();
    match side {
        Side::Top | Side::Bottom => {
            let x0 = (band.0 * w as f64) as usize;
            let x1 = (band.1 * w as f64) as usize;
            for x in x0..x1 {
                let mut found = None;
                for y in 0..h {
                    let yy = if side == Side::Top { y } else { h - 1 - y };
                    if mask.get(x, yy) {
                        found = Some(yy as f64);
                        break;
                    }
                }
                if let Some(y) = found {
                    pts.push((x as f64, y));
                }
            }
        }
        Side::Left | Side::Right => {
            let y0 = (band.0 * h as f64) as usize;
            let y1 = (band.1 * h as f64) as usize;
            for y in y0..y1 {
                let mut found = None;
                for x in 0..w {
                    let xx = if side == Side::Left { x } else { w - 1 - x };
                    if mask.get(xx, y) {
                        found = Some(xx as f64);
                        break;
                    }
                }
                if let Some(x) = found {
                    pts.push((y as f64, x));
                }
            }
        }
    }
    if pts.len() < 8 {
        return None;
    }
    // least-squares line v = a + b u
    let n = pts.len() as f64;
    let su: f64 = pts.iter().map(|p| p.0).sum();
    let sv: f64 = pts.iter().map(|p| p.1).sum();
    let suu: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let suv: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * suu - su * su;
    if denom.abs() < 1e-12 {
        return None;
    }
    let b = (n * suv - su * sv) / denom;
    let a = (sv - b * su) / n;
    Some(
        pts.iter()
            .map(|p| (p.1 - (a + b * p.0)).abs())
            .fold(0.0, f64::max),
    )
}
