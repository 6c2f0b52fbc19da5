//! Image quality metrics on `[0, 1]` data.

use crate::error::{Error, Result};

/// Returned by [`psnr`] for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Rec. 601 luma of interleaved RGB.
pub fn luminance(rgb: &[f64]) -> Vec<f64> {
    rgb.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

/// Mean SSIM over all 8x8 windows (stride 1) of two single-channel
/// `height x width` images.
pub fn ssim_gray(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: vec![height, width],
            rhs: vec![a.len().max(b.len())],
        });
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    // Summed-area tables of a, b, a^2, b^2, ab.
    let stride = width + 1;
    let mut tables = vec![vec![0.0f64; (height + 1) * stride]; 5];
    for r in 0..height {
        for c in 0..width {
            let (x, y) = (a[r * width + c], b[r * width + c]);
            let vals = [x, y, x * x, y * y, x * y];
            for (t, v) in tables.iter_mut().zip(vals) {
                t[(r + 1) * stride + c + 1] = v + t[r * stride + c + 1] + t[(r + 1) * stride + c] - t[r * stride + c];
            }
        }
    }
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=height - k {
        for c in 0..=width - k {
            let s = |t: &[f64]| t[(r + k) * stride + c + k] - t[r * stride + c + k] - t[(r + k) * stride + c] + t[r * stride + c];
            let (sa, sb, saa, sbb, sab) = (s(&tables[0]), s(&tables[1]), s(&tables[2]), s(&tables[3]), s(&tables[4]));
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two interleaved RGB images on their luminance.
pub fn ssim_rgb(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    ssim_gray(&luminance(a), &luminance(b), height, width)
}

/// Mean per-frame SSIM of two `[F, H, W, 3]` videos.
pub fn video_ssim(a: &[f64], b: &[f64], frames: usize, height: usize, width: usize) -> Result<f64> {
    let plane = height * width * 3;
    if a.len() != frames * plane || b.len() != frames * plane || frames == 0 {
        return Err(Error::ShapeMismatch {
            op: "video_ssim",
            lhs: vec![frames, height, width, 3],
            rhs: vec![a.len().min(b.len())],
        });
    }
    let mut s = 0.0;
    for t in 0..frames {
        s += ssim_rgb(&a[t * plane..(t + 1) * plane], &b[t * plane..(t + 1) * plane], height, width)?;
    }
    Ok(s / frames as f64)
}
