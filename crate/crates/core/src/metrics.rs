//! Quantitative evaluation: PSNR, SSIM, mesh RMSE, flow endpoint error, and
//! flow color rendering.

use serde::Serialize;
use thiserror::Error;

use crate::distortion::FlowField;
use crate::mesh::MeshGrid;
use crate::raster::{ImageBuffer, RasterError, ValidMask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("mesh shapes differ: {0}x{1} vs {2}x{3}")]
    MeshShapeMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricsError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricsError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    if a.channels() != b.channels() {
        return Err(MetricsError::ChannelMismatch(a.channels(), b.channels()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on unit-interval samples:
/// `10 log10(1 / MSE)` over (optionally masked) pixels. Identical inputs
/// return `f64::INFINITY`.
pub fn psnr(
    a: &ImageBuffer,
    b: &ImageBuffer,
    mask: Option<&ValidMask>,
) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let ch = a.channels();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    match mask {
        None => {
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                let d = (*x - *y) as f64;
                acc += d * d;
            }
            count = a.pixels().len();
        }
        Some(m) => {
            if m.width() != a.width() || m.height() != a.height() {
                return Err(MetricsError::DimensionMismatch(
                    m.width(),
                    m.height(),
                    a.width(),
                    a.height(),
                ));
            }
            for y in 0..a.height() {
                for x in 0..a.width() {
                    if !m.get(x, y) {
                        continue;
                    }
                    let pa = a.pixel(x, y);
                    let pb = b.pixel(x, y);
                    for c in 0..ch {
                        let d = (pa[c] - pb[c]) as f64;
                        acc += d * d;
                    }
                    count += ch;
                }
            }
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let mse = acc / count as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), constants
/// `K1 = 0.01`, `K2 = 0.03`, dynamic range 1. Three-channel inputs are
/// reduced to BT.601 luminance first. The local map is evaluated wherever the
/// full window fits; with a mask, only window centers on valid pixels count.
pub fn ssim(
    a: &ImageBuffer,
    b: &ImageBuffer,
    mask: Option<&ValidMask>,
) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    if let Some(m) = mask {
        if m.width() != a.width() || m.height() != a.height() {
            return Err(MetricsError::DimensionMismatch(
                m.width(),
                m.height(),
                a.width(),
                a.height(),
            ));
        }
    }
    let la = a.to_luma();
    let lb = b.to_luma();
    let (w, h) = (la.width(), la.height());
    let half = SSIM_WINDOW / 2;
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::DimensionMismatch(w, h, SSIM_WINDOW, SSIM_WINDOW));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    // separable horizontal pass over the five tracked moments
    let n_mid = w - 2 * half;
    let mut rows: Vec<[f64; 5]> = vec![[0.0; 5]; n_mid * h];
    for y in 0..h {
        for xc in 0..n_mid {
            let mut m = [0.0; 5];
            for (k, &wk) in win.iter().enumerate() {
                let va = la.pixel(xc + k, y)[0] as f64;
                let vb = lb.pixel(xc + k, y)[0] as f64;
                m[0] += wk * va;
                m[1] += wk * vb;
                m[2] += wk * va * va;
                m[3] += wk * vb * vb;
                m[4] += wk * va * vb;
            }
            rows[y * n_mid + xc] = m;
        }
    }

    let mut acc = 0.0;
    let mut count = 0usize;
    for yc in half..h - half {
        for xc in half..w - half {
            if let Some(m) = mask {
                if !m.get(xc, yc) {
                    continue;
                }
            }
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            let col = xc - half;
            for (k, &wk) in win.iter().enumerate() {
                let m = &rows[(yc - half + k) * n_mid + col];
                mu_a += wk * m[0];
                mu_b += wk * m[1];
                saa += wk * m[2];
                sbb += wk * m[3];
                sab += wk * m[4];
            }
            let var_a = saa - mu_a * mu_a;
            let var_b = sbb - mu_b * mu_b;
            let cov = sab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            acc += s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(acc / count as f64)
}

/// Root mean squared node displacement between congruent meshes, in pixels.
pub fn mesh_rmse(pred: &MeshGrid, gt: &MeshGrid) -> Result<f64, MetricsError> {
    if !pred.same_shape(gt) {
        return Err(MetricsError::MeshShapeMismatch(
            pred.rows(),
            pred.cols(),
            gt.rows(),
            gt.cols(),
        ));
    }
    let acc: f64 = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok((acc / pred.points().len() as f64).sqrt())
}

/// Mean Euclidean endpoint error between flow fields, in pixels.
pub fn flow_epe(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&ValidMask>,
) -> Result<f64, MetricsError> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(MetricsError::DimensionMismatch(
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height(),
        ));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if let Some(m) = mask {
                if !m.get(x, y) {
                    continue;
                }
            }
            let p = pred.get(x, y);
            let g = gt.get(x, y);
            let du = (p[0] - g[0]) as f64;
            let dv = (p[1] - g[1]) as f64;
            acc += (du * du + dv * dv).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(acc / count as f64)
}

/// Renders a flow field on the standard color wheel: hue encodes direction,
/// saturation encodes magnitude relative to `max_norm` (auto-scaled to the
/// field maximum when absent). Zero flow renders white.
pub fn flow_to_color(flow: &FlowField, max_norm: Option<f64>) -> ImageBuffer {
    let auto_max = flow
        .vectors()
        .iter()
        .map(|v| ((v[0] as f64).powi(2) + (v[1] as f64).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let max = max_norm.unwrap_or(auto_max).max(1e-12);
    let mut out = ImageBuffer::new(flow.width(), flow.height(), 3).unwrap();
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let v = flow.get(x, y);
            let mag = ((v[0] as f64).powi(2) + (v[1] as f64).powi(2)).sqrt();
            let sat = (mag / max).min(1.0);
            let hue = (v[1] as f64).atan2(v[0] as f64); // radians, 0 = +x
            let rgb = hsv_to_rgb(hue, sat, 1.0);
            out.set_pixel(x, y, &rgb);
        }
    }
    out
}

/// Hue in radians (wraps), saturation and value in [0, 1].
fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f32; 3] {
    let tau = std::f64::consts::TAU;
    let h = ((hue % tau) + tau) % tau / tau * 6.0; // sector position in [0, 6)
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Per-item metric row of an evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct ItemMetrics {
    pub name: String,
    /// dB; `None` encodes the +infinity sentinel (identical images).
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh_rmse_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe_px: Option<f64>,
}

fn serialize_psnr<S: serde::Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        _ => s.serialize_none(), // null marks the +infinity sentinel
    }
}

/// Batch evaluation report: per-item rows plus arithmetic-mean aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub items: Vec<ItemMetrics>,
    pub mean_psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_mesh_rmse_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_epe_px: Option<f64>,
}

impl EvalReport {
    pub fn from_items(items: Vec<ItemMetrics>) -> Self {
        fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
            let v: Vec<f64> = vals.collect();
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        }
        // +infinity rows propagate into the aggregate
        let mean_psnr_db = mean(
            items
                .iter()
                .map(|i| i.psnr_db.unwrap_or(f64::INFINITY)),
        );
        let mean_ssim = mean(items.iter().filter_map(|i| i.ssim));
        let mean_mesh_rmse_px = mean(items.iter().filter_map(|i| i.mesh_rmse_px));
        let mean_epe_px = mean(items.iter().filter_map(|i| i.epe_px));
        Self {
            items,
            mean_psnr_db,
            mean_ssim,
            mean_mesh_rmse_px,
            mean_epe_px,
        }
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let fmt_opt = |v: Option<f64>, inf_ok: bool| match v {
            Some(x) if x.is_finite() => format!("{x:.4}"),
            Some(_) if inf_ok => "inf".to_string(),
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        let mut s = String::new();
        s.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>10} {:>8}\n",
            "item", "psnr_db", "ssim", "mesh_rmse", "epe"
        ));
        for it in &self.items {
            let psnr = match it.psnr_db {
                Some(x) if x.is_finite() => format!("{x:.4}"),
                _ => "inf".to_string(),
            };
            s.push_str(&format!(
                "{:<24} {:>10} {:>8} {:>10} {:>8}\n",
                it.name,
                psnr,
                fmt_opt(it.ssim, false),
                fmt_opt(it.mesh_rmse_px, false),
                fmt_opt(it.epe_px, false),
            ));
        }
        s.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>10} {:>8}\n",
            "mean",
            fmt_opt(self.mean_psnr_db, true),
            fmt_opt(self.mean_ssim, false),
            fmt_opt(self.mean_mesh_rmse_px, false),
            fmt_opt(self.mean_epe_px, false),
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::regular_grid;
    use approx::assert_abs_diff_eq;
    use nalgebra::Point2;

    #[test]
    fn psnr_identical_is_infinite() {
        let a = crate::curriculum::synth_source(1, 32, 32);
        assert!(psnr(&a, &a, None).unwrap().is_infinite());
    }

    #[test]
    fn psnr_zero_vs_one_is_zero_db() {
        let a = ImageBuffer::constant(16, 16, 1, 0.0).unwrap();
        let b = ImageBuffer::constant(16, 16, 1, 1.0).unwrap();
        assert_abs_diff_eq!(psnr(&a, &b, None).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psnr_constant_offset() {
        let a = ImageBuffer::constant(16, 16, 1, 0.4).unwrap();
        let b = ImageBuffer::constant(16, 16, 1, 0.5).unwrap();
        // MSE = 0.01 -> 20 dB
        assert_abs_diff_eq!(psnr(&a, &b, None).unwrap(), 20.0, epsilon = 1e-6);
    }

    #[test]
    fn psnr_dimension_mismatch_errors() {
        let a = ImageBuffer::constant(16, 16, 1, 0.4).unwrap();
        let b = ImageBuffer::constant(8, 16, 1, 0.4).unwrap();
        assert!(matches!(
            psnr(&a, &b, None),
            Err(MetricsError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn psnr_empty_mask_errors() {
        let a = ImageBuffer::constant(8, 8, 1, 0.4).unwrap();
        let m = ValidMask::new_filled(8, 8, false);
        assert!(matches!(psnr(&a, &a, Some(&m)), Err(MetricsError::EmptyMask)));
    }

    #[test]
    fn psnr_symmetric() {
        let a = crate::curriculum::synth_source(5, 32, 32);
        let b = crate::curriculum::synth_source(6, 32, 32);
        assert_abs_diff_eq!(
            psnr(&a, &b, None).unwrap(),
            psnr(&b, &a, None).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = crate::curriculum::synth_source(9, 48, 48);
        assert_abs_diff_eq!(ssim(&a, &a, None).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_inverted_structure_below_one() {
        let a = crate::curriculum::synth_source(9, 48, 48);
        let inv: Vec<f32> = a.pixels().iter().map(|v| 1.0 - v).collect();
        let b = ImageBuffer::from_pixels(48, 48, a.channels(), inv).unwrap();
        let s = ssim(&a, &b, None).unwrap();
        assert!(s < 0.5, "anti-correlated SSIM {s}");
    }

    #[test]
    fn ssim_symmetric() {
        let a = crate::curriculum::synth_source(2, 48, 48);
        let b = crate::curriculum::synth_source(3, 48, 48);
        assert_abs_diff_eq!(
            ssim(&a, &b, None).unwrap(),
            ssim(&b, &a, None).unwrap(),
            epsilon = 1e-12
        );
    }

    /// Naive direct-sum reference implementation, independent of the
    /// separable-filter path.
    fn ssim_reference(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let la = a.to_luma();
        let lb = b.to_luma();
        let (w, h) = (la.width(), la.height());
        let half = SSIM_WINDOW / 2;
        let win = gaussian_window();
        let c1 = SSIM_K1.powi(2);
        let c2 = SSIM_K2.powi(2);
        let mut acc = 0.0;
        let mut count = 0;
        for yc in half..h - half {
            for xc in half..w - half {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy] * win[dx];
                        let va = la.pixel(xc - half + dx, yc - half + dy)[0] as f64;
                        let vb = lb.pixel(xc - half + dx, yc - half + dy)[0] as f64;
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let var_a = saa - mu_a * mu_a;
                let var_b = sbb - mu_b * mu_b;
                let cov = sab - mu_a * mu_b;
                acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_checkerboard_vs_gray_matches_reference() {
        let a = crate::curriculum::checkerboard(64, 64, 8);
        let mean = a.pixels().iter().map(|&v| v as f64).sum::<f64>() / a.pixels().len() as f64;
        let b = ImageBuffer::constant(64, 64, a.channels(), mean as f32).unwrap();
        let got = ssim(&a, &b, None).unwrap();
        let want = ssim_reference(&a, &b);
        assert!((got - want).abs() < 1e-4, "{got} vs reference {want}");
    }

    #[test]
    fn ssim_random_matches_reference() {
        let a = crate::curriculum::synth_source(100, 40, 40);
        let b = crate::curriculum::synth_source(101, 40, 40);
        let got = ssim(&a, &b, None).unwrap();
        let want = ssim_reference(&a, &b);
        assert!((got - want).abs() < 1e-10, "{got} vs reference {want}");
    }

    #[test]
    fn mesh_rmse_cases() {
        let a = regular_grid(8, 8, 256, 256);
        assert_eq!(mesh_rmse(&a, &a).unwrap(), 0.0);

        let mut b = a.clone();
        for p in b.points_mut() {
            p.x += 3.0;
            p.y += 4.0;
        }
        assert_abs_diff_eq!(mesh_rmse(&a, &b).unwrap(), 5.0, epsilon = 1e-12);

        let mut c = a.clone();
        c.points_mut()[0] = Point2::new(a.points()[0].x + 9.0, a.points()[0].y);
        assert_abs_diff_eq!(mesh_rmse(&a, &c).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mesh_rmse_shape_mismatch() {
        let a = regular_grid(2, 2, 10, 10);
        let b = regular_grid(3, 3, 10, 10);
        assert!(mesh_rmse(&a, &b).is_err());
    }

    #[test]
    fn flow_epe_cases() {
        let a = FlowField::zeros(8, 8);
        assert_eq!(flow_epe(&a, &a, None).unwrap(), 0.0);
        let b = FlowField::new(8, 8, vec![[1.0, 0.0]; 64]).unwrap();
        assert_abs_diff_eq!(flow_epe(&a, &b, None).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn flow_color_zero_is_white() {
        let f = FlowField::zeros(4, 4);
        let img = flow_to_color(&f, None);
        assert!(img.pixels().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn flow_color_uniform_positive_x_is_saturated_red() {
        let f = FlowField::new(4, 4, vec![[2.0, 0.0]; 16]).unwrap();
        let img = flow_to_color(&f, Some(2.0));
        let px = img.pixel(1, 1);
        assert!((px[0] - 1.0).abs() < 1e-6);
        assert!(px[1].abs() < 1e-6);
        assert!(px[2].abs() < 1e-6);
    }

    #[test]
    fn flow_color_hue_equivariant_at_anchor_angles() {
        // rotating the flow by 60 degrees walks the RGB anchors in order
        let anchors = [
            [1.0f32, 0.0, 0.0], // 0
            [1.0, 1.0, 0.0],    // 60
            [0.0, 1.0, 0.0],    // 120
            [0.0, 1.0, 1.0],    // 180
            [0.0, 0.0, 1.0],    // 240
            [1.0, 0.0, 1.0],    // 300
        ];
        for (i, want) in anchors.iter().enumerate() {
            let ang = i as f64 * 60.0_f64.to_radians();
            let f = FlowField::new(1, 1, vec![[ang.cos() as f32, ang.sin() as f32]]).unwrap();
            let img = flow_to_color(&f, Some(1.0));
            let px = img.pixel(0, 0);
            for c in 0..3 {
                assert!(
                    (px[c] - want[c]).abs() < 1e-5,
                    "anchor {i}: {px:?} vs {want:?}"
                );
            }
        }
    }

    #[test]
    fn eval_report_serializes_infinity_as_null() {
        let report = EvalReport::from_items(vec![ItemMetrics {
            name: "x".into(),
            psnr_db: Some(f64::INFINITY),
            ssim: Some(1.0),
            mesh_rmse_px: None,
            epe_px: None,
        }]);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"psnr_db\":null"));
        let table = report.to_table();
        assert!(table.contains("inf"));
    }
}
