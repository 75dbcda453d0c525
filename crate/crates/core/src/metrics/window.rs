use crate::error::{FrnError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const UIQI_WINDOW: usize = 8;
/// Window variances below this are treated as exactly zero.
pub const VARIANCE_FLOOR: f64 = 1e-14;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let z = (i as f64 - c) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn too_small(h: usize, w: usize, k: usize) -> Result<()> {
    if h < k || w < k {
        return Err(FrnError::Contract(format!("{h}x{w} image is smaller than the {k}x{k} window")));
    }
    Ok(())
}

/// Valid-mode separable correlation of `[h, w]` with `taps ⊗ taps`.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps.iter().enumerate().map(|(i, t)| t * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions of one band.
pub fn ssim_band(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    too_small(h, w, SSIM_WINDOW)?;
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let sxx = filter_valid(&prod(x, x), h, w, &taps);
    let syy = filter_valid(&prod(y, y), h, w, &taps);
    let sxy = filter_valid(&prod(x, y), h, w, &taps);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Summed-area table with a zero border, `[(h+1), (w+1)]`.
fn integral(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut run = 0.0;
        for c in 0..w {
            run += x[r * w + c];
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + run;
        }
    }
    s
}

/// Mean UIQI over stride-1 windows whose denominator is nonzero, or `None`
/// if there are none.
pub fn uiqi_band(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<Option<f64>> {
    too_small(h, w, UIQI_WINDOW)?;
    let k = UIQI_WINDOW;
    let n = (k * k) as f64;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let sx = integral(x, h, w);
    let sy = integral(y, h, w);
    let sxx = integral(&prod(x, x), h, w);
    let syy = integral(&prod(y, y), h, w);
    let sxy = integral(&prod(x, y), h, w);
    let stride = w + 1;
    let boxsum = |s: &[f64], r: usize, c: usize| {
        s[(r + k) * stride + c + k] - s[r * stride + c + k] - s[(r + k) * stride + c] + s[r * stride + c]
    };
    let (mut total, mut count) = (0.0, 0usize);
    for r in 0..=h - k {
        for c in 0..=w - k {
            let mx = boxsum(&sx, r, c) / n;
            let my = boxsum(&sy, r, c) / n;
            let vx = floor(boxsum(&sxx, r, c) / n - mx * mx);
            let vy = floor(boxsum(&syy, r, c) / n - my * my);
            let cov = boxsum(&sxy, r, c) / n - mx * my;
            let den = (vx + vy) * (mx * mx + my * my);
            if den == 0.0 {
                continue;
            }
            total += 4.0 * cov * mx * my / den;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

fn floor(v: f64) -> f64 {
    if v < VARIANCE_FLOOR {
        0.0
    } else {
        v
    }
}
