//! Image containers, lossless PPM/PGM file I/O, and bilinear sampling.
//!
//! Pixel `(i, j)` sits at continuous coordinate `(i, j)`; the image domain is
//! `[0, width-1] x [0, height-1]`. Samples are real-valued in `[0, 1]`;
//! 8-bit quantization happens only at the file boundary.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image file: {0}")]
    Malformed(String),
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("invalid image dimensions {width}x{height}x{channels}")]
    InvalidDimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("pixel data length {got} does not match {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("sample {0} outside [0, 1]")]
    SampleRange(f32),
    #[error("coordinate ({x}, {y}) out of bounds for {width}x{height} image")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("non-finite sample coordinate ({x}, {y})")]
    NonFinite { x: f64, y: f64 },
}

/// Out-of-bounds policy for [`bilinear_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplePolicy {
    /// Out-of-bounds coordinates are an error.
    Error,
    /// Out-of-bounds taps contribute zero.
    Zero,
    /// Taps are clamped to the nearest edge pixel.
    Clamp,
}

/// Row-major raster with 1 (gray) or 3 (RGB) channels and unit-interval samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    /// All-zero image.
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, RasterError> {
        Self::check_dims(width, height, channels)?;
        Ok(Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        })
    }

    /// Constant-valued image.
    pub fn constant(
        width: usize,
        height: usize,
        channels: usize,
        value: f32,
    ) -> Result<Self, RasterError> {
        Self::check_dims(width, height, channels)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(RasterError::SampleRange(value));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        })
    }

    /// Wraps an existing sample vector, validating length and range.
    pub fn from_pixels(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, RasterError> {
        Self::check_dims(width, height, channels)?;
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(RasterError::LengthMismatch {
                got: data.len(),
                expected,
            });
        }
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
            return Err(RasterError::SampleRange(bad));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    fn check_dims(width: usize, height: usize, channels: usize) -> Result<(), RasterError> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(RasterError::InvalidDimensions {
                width,
                height,
                channels,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, value: &[f32]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(value);
    }

    /// True iff `(x, y)` lies inside the continuous image domain. A small
    /// tolerance absorbs round-off from analytically-identity transforms, so
    /// edge pixels do not flicker out of the valid mask.
    #[inline]
    pub fn in_domain(&self, x: f64, y: f64) -> bool {
        const EPS: f64 = 1e-6;
        x >= -EPS
            && y >= -EPS
            && x <= (self.width - 1) as f64 + EPS
            && y <= (self.height - 1) as f64 + EPS
    }

    /// Converts to a single-channel luminance image (ITU-R BT.601 weights).
    pub fn to_luma(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// Per-pixel validity flags; `true` marks pixels that carry real content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl ValidMask {
    pub fn new_filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, RasterError> {
        if bits.len() != width * height {
            return Err(RasterError::LengthMismatch {
                got: bits.len(),
                expected: width * height,
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of pixels marked valid.
    pub fn coverage(&self) -> f64 {
        self.count_valid() as f64 / self.bits.len() as f64
    }
}

/// Bilinearly sampled pixel value; holds up to 3 channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    channels: usize,
    values: [f64; 3],
}

impl PixelSample {
    pub fn new(values: &[f64]) -> Self {
        let mut v = [0.0; 3];
        v[..values.len()].copy_from_slice(values);
        Self {
            channels: values.len(),
            values: v,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.channels]
    }
}

impl fmt::Display for PixelSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.as_slice())
    }
}

/// Standard 4-tap bilinear blend at `(x, y)`.
///
/// Exact at integer lattice points. Out-of-bounds handling follows `policy`;
/// taps with zero interpolation weight are never fetched, so sampling at the
/// last row/column stays in bounds.
pub fn bilinear_sample(
    img: &ImageBuffer,
    x: f64,
    y: f64,
    policy: SamplePolicy,
) -> Result<PixelSample, RasterError> {
    if !x.is_finite() || !y.is_finite() {
        return Err(RasterError::NonFinite { x, y });
    }
    if policy == SamplePolicy::Error && !img.in_domain(x, y) {
        return Err(RasterError::OutOfBounds {
            x,
            y,
            width: img.width,
            height: img.height,
        });
    }
    let mut values = [0.0f64; 3];
    sample_into(img, x, y, policy, &mut values[..img.channels]);
    Ok(PixelSample {
        channels: img.channels,
        values,
    })
}

/// Inner sampling kernel shared by the warp loops. `out.len()` must equal the
/// channel count.
#[inline]
pub(crate) fn sample_into(img: &ImageBuffer, x: f64, y: f64, policy: SamplePolicy, out: &mut [f64]) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;

    let w = img.width as i64;
    let h = img.height as i64;
    let ch = img.channels;

    let weights = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];

    out.fill(0.0);
    for &(tx, ty, wgt) in &weights {
        if wgt == 0.0 {
            continue;
        }
        let (tx, ty) = match policy {
            SamplePolicy::Clamp => (tx.clamp(0, w - 1), ty.clamp(0, h - 1)),
            _ => {
                if tx < 0 || ty < 0 || tx >= w || ty >= h {
                    continue; // zero contribution
                }
                (tx, ty)
            }
        };
        let base = ((ty as usize) * img.width + tx as usize) * ch;
        for (c, o) in out.iter_mut().enumerate() {
            *o += wgt * img.data[base + c] as f64;
        }
    }
}

/// Sampled value plus its spatial derivative, from the same four taps.
/// Out-of-bounds taps contribute zero (matching [`SamplePolicy::Zero`]).
#[inline]
pub(crate) fn sample_value_and_grad(
    img: &ImageBuffer,
    x: f64,
    y: f64,
    value: &mut [f64],
    grad_x: &mut [f64],
    grad_y: &mut [f64],
) {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let w = img.width as i64;
    let h = img.height as i64;
    let ch = img.channels;

    let fetch = |tx: i64, ty: i64, buf: &mut [f64]| {
        if tx < 0 || ty < 0 || tx >= w || ty >= h {
            buf.fill(0.0);
        } else {
            let base = ((ty as usize) * img.width + tx as usize) * ch;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = img.data[base + c] as f64;
            }
        }
    };

    let mut p00 = [0.0; 3];
    let mut p10 = [0.0; 3];
    let mut p01 = [0.0; 3];
    let mut p11 = [0.0; 3];
    fetch(x0, y0, &mut p00[..ch]);
    fetch(x0 + 1, y0, &mut p10[..ch]);
    fetch(x0, y0 + 1, &mut p01[..ch]);
    fetch(x0 + 1, y0 + 1, &mut p11[..ch]);

    for c in 0..ch {
        let top = p00[c] + fx * (p10[c] - p00[c]);
        let bot = p01[c] + fx * (p11[c] - p01[c]);
        value[c] = top + fy * (bot - top);
        grad_x[c] = (1.0 - fy) * (p10[c] - p00[c]) + fy * (p11[c] - p01[c]);
        grad_y[c] = bot - top;
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads a binary PPM (P6, color) or PGM (P5, gray) file with maxval 255.
pub fn load_image<P: AsRef<Path>>(path: P) -> Result<ImageBuffer, RasterError> {
    let bytes = fs::read(path)?;
    parse_netpbm(&bytes)
}

fn parse_netpbm(bytes: &[u8]) -> Result<ImageBuffer, RasterError> {
    let mut pos = 0usize;

    let mut next_token = |bytes: &[u8]| -> Result<String, RasterError> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RasterError::Malformed("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(bytes)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => {
            return Err(RasterError::Unsupported(format!(
                "magic {other:?} (expected P5 or P6)"
            )))
        }
    };
    let width: usize = next_token(bytes)?
        .parse()
        .map_err(|_| RasterError::Malformed("bad width".into()))?;
    let height: usize = next_token(bytes)?
        .parse()
        .map_err(|_| RasterError::Malformed("bad height".into()))?;
    let maxval: usize = next_token(bytes)?
        .parse()
        .map_err(|_| RasterError::Malformed("bad maxval".into()))?;
    if maxval != 255 {
        return Err(RasterError::Unsupported(format!("maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(RasterError::Malformed("zero dimension".into()));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    let expected = width * height * channels;
    let payload = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| RasterError::Malformed("truncated pixel payload".into()))?;
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    ImageBuffer::from_pixels(width, height, channels, data)
}

/// Saves as binary PPM (3 channels) or PGM (1 channel), maxval 255.
pub fn save_image<P: AsRef<Path>>(img: &ImageBuffer, path: P) -> Result<(), RasterError> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Saves a validity mask as a P5 file (255 = valid, 0 = invalid).
pub fn save_mask<P: AsRef<Path>>(mask: &ValidMask, path: P) -> Result<(), RasterError> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    let bytes: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Loads a P5 mask; any sample above 127 counts as valid.
pub fn load_mask<P: AsRef<Path>>(path: P) -> Result<ValidMask, RasterError> {
    let img = load_image(path)?;
    if img.channels != 1 {
        return Err(RasterError::Unsupported("mask must be single-channel".into()));
    }
    let bits = img.data.iter().map(|&v| v > 0.5).collect();
    ValidMask::from_bits(img.width, img.height, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(w: usize, h: usize) -> ImageBuffer {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(((x + y * w) as f32) / ((w * h) as f32));
            }
        }
        ImageBuffer::from_pixels(w, h, 1, data).unwrap()
    }

    #[test]
    fn ppm_max_value_maps_to_one() {
        let bytes = b"P6\n2 2\n255\n\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff";
        let img = parse_netpbm(bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_zero_maps_to_zero() {
        let bytes = b"P6\n1 1\n255\n\x00\x00\x00";
        let img = parse_netpbm(bytes).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let bytes = b"P6\n2 2\n255\n\xff\xff";
        match parse_netpbm(bytes) {
            Err(RasterError::Malformed(_)) => {}
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x80\x40";
        let img = parse_netpbm(bytes).unwrap();
        assert_eq!(img.channels(), 1);
        assert!((img.pixel(0, 0)[0] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn save_load_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ppm");
        let mut data = Vec::new();
        let mut state = 0x12345678u32;
        for _ in 0..8 * 8 * 3 {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            data.push((state >> 8) as f32 / (u32::MAX >> 8) as f32);
        }
        let img = ImageBuffer::from_pixels(8, 8, 3, data).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        let max_diff = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 0.5 / 255.0 + 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn save_single_channel_writes_p5() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.pgm");
        let img = ImageBuffer::constant(3, 2, 1, 0.5).unwrap();
        save_image(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
        let back = load_image(&path).unwrap();
        assert_eq!(back.channels(), 1);
    }

    #[test]
    fn save_to_unwritable_path_errors() {
        let img = ImageBuffer::constant(2, 2, 3, 0.1).unwrap();
        let err = save_image(&img, "/nonexistent-dir-xyz/out.ppm").unwrap_err();
        assert!(matches!(err, RasterError::Io(_)));
    }

    #[test]
    fn integer_lattice_is_exact() {
        let img = gradient_image(5, 4);
        let s = bilinear_sample(&img, 2.0, 3.0, SamplePolicy::Error).unwrap();
        assert_eq!(s.as_slice()[0], img.pixel(2, 3)[0] as f64);
    }

    #[test]
    fn horizontal_midpoint_blends_evenly() {
        let img = ImageBuffer::from_pixels(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let s = bilinear_sample(&img, 0.5, 0.0, SamplePolicy::Error).unwrap();
        assert!((s.as_slice()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_policy_out_of_bounds_contributes_zero() {
        let img = ImageBuffer::constant(4, 4, 1, 1.0).unwrap();
        let s = bilinear_sample(&img, -0.5, 0.0, SamplePolicy::Zero).unwrap();
        // one in-bounds tap at weight 0.5
        assert!((s.as_slice()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn error_policy_rejects_out_of_domain() {
        let img = ImageBuffer::constant(4, 4, 1, 1.0).unwrap();
        let err = bilinear_sample(&img, -0.5, 0.0, SamplePolicy::Error).unwrap_err();
        assert!(matches!(err, RasterError::OutOfBounds { .. }));
    }

    #[test]
    fn clamp_policy_extends_edges() {
        let img = gradient_image(4, 4);
        let s = bilinear_sample(&img, -2.0, 1.0, SamplePolicy::Clamp).unwrap();
        assert_eq!(s.as_slice()[0], img.pixel(0, 1)[0] as f64);
    }

    #[test]
    fn value_and_grad_matches_finite_differences() {
        let img = gradient_image(9, 7);
        let (x, y) = (3.3, 2.6);
        let mut v = [0.0];
        let mut gx = [0.0];
        let mut gy = [0.0];
        sample_value_and_grad(&img, x, y, &mut v, &mut gx, &mut gy);
        let h = 1e-6;
        let vp = bilinear_sample(&img, x + h, y, SamplePolicy::Zero).unwrap().as_slice()[0];
        let vm = bilinear_sample(&img, x - h, y, SamplePolicy::Zero).unwrap().as_slice()[0];
        assert!((gx[0] - (vp - vm) / (2.0 * h)).abs() < 1e-6);
        let vp = bilinear_sample(&img, x, y + h, SamplePolicy::Zero).unwrap().as_slice()[0];
        let vm = bilinear_sample(&img, x, y - h, SamplePolicy::Zero).unwrap().as_slice()[0];
        assert!((gy[0] - (vp - vm) / (2.0 * h)).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn constant_images_sample_constant(
            v in 0.0f32..=1.0,
            x in 0.0f64..4.0,
            y in 0.0f64..4.0,
        ) {
            let img = ImageBuffer::constant(5, 5, 1, v).unwrap();
            let s = bilinear_sample(&img, x, y, SamplePolicy::Error).unwrap();
            prop_assert!((s.as_slice()[0] - v as f64).abs() < 1e-6);
        }

        #[test]
        fn sampling_is_linear_in_pixel_values(
            seed in 0u32..1000,
            x in 0.0f64..3.0,
            y in 0.0f64..3.0,
            alpha in 0.0f64..1.0,
        ) {
            let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
            let mut next = || {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                (state >> 8) as f32 / (u32::MAX >> 8) as f32
            };
            let a: Vec<f32> = (0..16).map(|_| next()).collect();
            let b: Vec<f32> = (0..16).map(|_| next()).collect();
            let beta = 1.0 - alpha;
            let mix: Vec<f32> = a.iter().zip(&b)
                .map(|(&u, &v)| (alpha * u as f64 + beta * v as f64) as f32)
                .collect();
            let ia = ImageBuffer::from_pixels(4, 4, 1, a).unwrap();
            let ib = ImageBuffer::from_pixels(4, 4, 1, b).unwrap();
            let im = ImageBuffer::from_pixels(4, 4, 1, mix).unwrap();
            let sa = bilinear_sample(&ia, x, y, SamplePolicy::Error).unwrap().as_slice()[0];
            let sb = bilinear_sample(&ib, x, y, SamplePolicy::Error).unwrap().as_slice()[0];
            let sm = bilinear_sample(&im, x, y, SamplePolicy::Error).unwrap().as_slice()[0];
            prop_assert!((sm - (alpha * sa + beta * sb)).abs() < 1e-5);
        }
    }
}
