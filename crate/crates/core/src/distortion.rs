//! Polynomial wide-angle camera model: synthesize distorted images from
//! rectilinear ones and rectify them back.
//!
//! The radial profile `r(t) = k1 t + k2 t^3 + k3 t^5 + k4 t^7` maps the
//! radial argument (incident angle, or pixel radius in the undistorted
//! image) to a pixel radius in the distorted image. Rectification carries an
//! output pixel at offset `d` from the principal point to the distorted
//! location `principal + r(t) * d / |d|`; synthesis inverts the profile by
//! bracketed bisection.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Point2, Vector2};
use thiserror::Error;

use crate::raster::{self, ImageBuffer, RasterError, ValidMask};

#[derive(Debug, Error)]
pub enum DistortionError {
    #[error("radial profile is not strictly increasing over [0, {max_arg}]")]
    NonMonotone { max_arg: f64 },
    #[error("focal length must be positive, got {0}")]
    BadFocal(f64),
    #[error("radius {target} outside achievable range [0, {max}]")]
    OutOfRange { target: f64, max: f64 },
    #[error("malformed flow file: {0}")]
    MalformedFlow(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Interpretation of the radial argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadialMode {
    /// Argument is the incident angle `theta = atan(|offset| / focal)`;
    /// synthesis maps back through `r_u = focal * tan(t)`.
    Angle,
    /// Argument is the pixel radius in the undistorted image directly.
    PixelRadius,
}

/// Polynomial radial model: coefficients of `t, t^3, t^5, t^7`, principal
/// point, virtual focal length, and argument mode. Validated strictly
/// monotone over the working range implied by the image diagonal.
#[derive(Debug, Clone)]
pub struct DistortionParams {
    k: [f64; 4],
    principal: Point2<f64>,
    focal: f64,
    mode: RadialMode,
    max_arg: f64,
}

/// Sample count for the monotonicity check of the derivative polynomial.
const MONOTONE_SAMPLES: usize = 4096;

impl DistortionParams {
    /// Builds parameters for images of `image_size`, validating `focal > 0`
    /// and strict monotonicity of the profile over the working range (the
    /// largest offset from the principal point to an image corner).
    pub fn new(
        k: [f64; 4],
        principal: Point2<f64>,
        focal: f64,
        mode: RadialMode,
        image_size: (usize, usize),
    ) -> Result<Self, DistortionError> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(DistortionError::BadFocal(focal));
        }
        let (w, h) = image_size;
        let corners = [
            Point2::new(0.0, 0.0),
            Point2::new((w - 1) as f64, 0.0),
            Point2::new(0.0, (h - 1) as f64),
            Point2::new((w - 1) as f64, (h - 1) as f64),
        ];
        let max_offset = corners
            .iter()
            .map(|c| (c - principal).norm())
            .fold(0.0, f64::max);
        let max_arg = match mode {
            RadialMode::Angle => (max_offset / focal).atan(),
            RadialMode::PixelRadius => max_offset,
        };
        let params = Self {
            k,
            principal,
            focal,
            mode,
            max_arg,
        };
        // r'(t) = k1 + 3 k2 t^2 + 5 k3 t^4 + 7 k4 t^6 must stay positive
        for i in 0..=MONOTONE_SAMPLES {
            let t = max_arg * i as f64 / MONOTONE_SAMPLES as f64;
            if params.profile_derivative(t) <= 0.0 {
                return Err(DistortionError::NonMonotone { max_arg });
            }
        }
        Ok(params)
    }

    /// Identity model (`r(t) = t`, pixel-radius mode).
    pub fn identity(image_size: (usize, usize)) -> Self {
        let (w, h) = image_size;
        let principal = Point2::new((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        Self::new(
            [1.0, 0.0, 0.0, 0.0],
            principal,
            w as f64 / 2.0,
            RadialMode::PixelRadius,
            image_size,
        )
        .expect("identity profile is monotone")
    }

    pub fn coefficients(&self) -> [f64; 4] {
        self.k
    }

    pub fn principal(&self) -> Point2<f64> {
        self.principal
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn mode(&self) -> RadialMode {
        self.mode
    }

    /// Upper end of the validated monotone argument range.
    pub fn max_arg(&self) -> f64 {
        self.max_arg
    }

    /// Largest distorted radius the profile reaches on the validated range.
    pub fn profile_max(&self) -> f64 {
        self.radial_profile(self.max_arg)
    }

    /// `k1 t + k2 t^3 + k3 t^5 + k4 t^7`.
    pub fn radial_profile(&self, t: f64) -> f64 {
        let s = t * t;
        t * (self.k[0] + s * (self.k[1] + s * (self.k[2] + s * self.k[3])))
    }

    fn profile_derivative(&self, t: f64) -> f64 {
        let s = t * t;
        self.k[0] + s * (3.0 * self.k[1] + s * (5.0 * self.k[2] + s * 7.0 * self.k[3]))
    }

    /// Finds `t` with `radial_profile(t) = r_target` by bisection on the
    /// validated monotone range.
    pub fn invert_radial(&self, r_target: f64) -> Result<f64, DistortionError> {
        let max = self.profile_max();
        if !(0.0..=max).contains(&r_target) {
            return Err(DistortionError::OutOfRange {
                target: r_target,
                max,
            });
        }
        if r_target == 0.0 {
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = self.max_arg;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.radial_profile(mid) < r_target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * self.max_arg.max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Maps an offset from the principal point (undistorted/rectified frame)
    /// to the absolute position in the distorted image. The zero offset maps
    /// to the principal point by continuity.
    pub fn rectify_point(&self, offset: Vector2<f64>) -> Point2<f64> {
        let norm = offset.norm();
        if norm == 0.0 {
            return self.principal;
        }
        let t = match self.mode {
            RadialMode::Angle => (norm / self.focal).atan(),
            RadialMode::PixelRadius => norm,
        };
        self.principal + offset * (self.radial_profile(t) / norm)
    }

    /// Inverse of [`Self::rectify_point`]: distorted-image position back to
    /// the undistorted offset radius (pixel radius, or `focal * tan(t)` in
    /// angle mode).
    fn undistorted_radius(&self, distorted_radius: f64) -> Result<f64, DistortionError> {
        let t = self.invert_radial(distorted_radius)?;
        Ok(match self.mode {
            RadialMode::Angle => self.focal * t.tan(),
            RadialMode::PixelRadius => t,
        })
    }
}

/// Rectifies a distorted image: each output pixel samples the distorted image
/// at its profile-mapped location. The mask marks pixels whose sample
/// location falls inside the distorted image domain; everything else is
/// filled black, producing the characteristic deformed-boundary image when
/// the profile shrinks content toward the principal point.
pub fn rectify_image(
    distorted: &ImageBuffer,
    params: &DistortionParams,
    out_size: (usize, usize),
) -> Result<(ImageBuffer, ValidMask), DistortionError> {
    let (ow, oh) = out_size;
    let ch = distorted.channels();
    let mut out = ImageBuffer::new(ow, oh, ch)?;
    let mut mask = ValidMask::new_filled(ow, oh, false);
    let mut vals = [0.0f64; 3];
    for y in 0..oh {
        for x in 0..ow {
            let offset = Point2::new(x as f64, y as f64) - params.principal;
            let q = params.rectify_point(offset);
            let inside = distorted.in_domain(q.x, q.y);
            mask.set(x, y, inside);
            if inside {
                raster::sample_into(distorted, q.x, q.y, raster::SamplePolicy::Zero, &mut vals[..ch]);
                let px: [f32; 3] = [
                    vals[0].clamp(0.0, 1.0) as f32,
                    vals[1].clamp(0.0, 1.0) as f32,
                    vals[2].clamp(0.0, 1.0) as f32,
                ];
                out.set_pixel(x, y, &px[..ch]);
            }
        }
    }
    Ok((out, mask))
}

/// Synthesizes a distorted image from a rectilinear source by inverse
/// mapping: each distorted pixel inverts the radial profile to find its
/// undistorted source location. Pixels beyond the profile's reach are filled
/// black (out of field of view).
pub fn synthesize_distorted(
    source: &ImageBuffer,
    params: &DistortionParams,
) -> Result<ImageBuffer, DistortionError> {
    let (w, h) = (source.width(), source.height());
    let ch = source.channels();
    let mut out = ImageBuffer::new(w, h, ch)?;
    let mut vals = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            let d = Point2::new(x as f64, y as f64) - params.principal;
            let radius = d.norm();
            let src_pos = if radius == 0.0 {
                params.principal
            } else {
                match params.undistorted_radius(radius) {
                    Ok(r_u) => params.principal + d * (r_u / radius),
                    Err(DistortionError::OutOfRange { .. }) => continue, // out of FoV, stays black
                    Err(e) => return Err(e),
                }
            };
            if !source.in_domain(src_pos.x, src_pos.y) {
                continue;
            }
            raster::sample_into(
                source,
                src_pos.x,
                src_pos.y,
                raster::SamplePolicy::Zero,
                &mut vals[..ch],
            );
            let px: [f32; 3] = [
                vals[0].clamp(0.0, 1.0) as f32,
                vals[1].clamp(0.0, 1.0) as f32,
                vals[2].clamp(0.0, 1.0) as f32,
            ];
            out.set_pixel(x, y, &px[..ch]);
        }
    }
    Ok(out)
}

/// Dense per-pixel displacement field, row-major `(u, v)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, vectors: Vec<[f32; 2]>) -> Result<Self, DistortionError> {
        if vectors.len() != width * height {
            return Err(DistortionError::MalformedFlow(format!(
                "vector count {} does not match {width}x{height}",
                vectors.len()
            )));
        }
        Ok(Self {
            width,
            height,
            vectors,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            vectors: vec![[0.0, 0.0]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f32; 2]) {
        self.vectors[y * self.width + x] = v;
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }
}

/// Analytic rectification flow: per-pixel displacement
/// `rectified_position - distorted_position` with both expressed in the
/// rectified frame (i.e. `p - rectify_point(p - principal)`).
pub fn rectification_flow(params: &DistortionParams, size: (usize, usize)) -> FlowField {
    let (w, h) = size;
    let mut flow = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = Point2::new(x as f64, y as f64);
            let q = params.rectify_point(p - params.principal);
            flow.set(x, y, [(p.x - q.x) as f32, (p.y - q.y) as f32]);
        }
    }
    flow
}

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Writes a Middlebury-style flow file: magic "PIEH", little-endian i32 width
/// and height, then interleaved f32 `(u, v)` row-major.
pub fn write_flo<P: AsRef<Path>>(flow: &FlowField, path: P) -> Result<(), DistortionError> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(FLO_MAGIC)?;
    w.write_all(&(flow.width as i32).to_le_bytes())?;
    w.write_all(&(flow.height as i32).to_le_bytes())?;
    for v in &flow.vectors {
        w.write_all(&v[0].to_le_bytes())?;
        w.write_all(&v[1].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flo<P: AsRef<Path>>(path: P) -> Result<FlowField, DistortionError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != FLO_MAGIC {
        return Err(DistortionError::MalformedFlow("bad magic".into()));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(DistortionError::MalformedFlow("bad dimensions".into()));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = 12 + width * height * 8;
    if bytes.len() != expected {
        return Err(DistortionError::MalformedFlow(format!(
            "payload length {} (expected {expected})",
            bytes.len()
        )));
    }
    let mut vectors = Vec::with_capacity(width * height);
    for chunk in bytes[12..].chunks_exact(8) {
        vectors.push([
            f32::from_le_bytes(chunk[0..4].try_into().unwrap()),
            f32::from_le_bytes(chunk[4..8].try_into().unwrap()),
        ]);
    }
    FlowField::new(width, height, vectors)
}
