//! Full-reference quality metrics between a reconstructed and a ground-truth
//! cube. Predictions are clamped to `[0, 1]` first; SSIM and UIQI are
//! computed per band and averaged.

mod report;
mod window;

pub use report::{evaluate, MetricReport, PerBand};
pub use window::{
    gaussian_window, ssim_band, uiqi_band, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, UIQI_WINDOW,
    VARIANCE_FLOOR,
};

use crate::error::{FrnError, Result};
use crate::numerics::Tensor;

fn check(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.shape() != gt.shape() || pred.rank() != 3 {
        return Err(FrnError::Shape {
            op: "metric",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

fn clamp(v: f32) -> f64 {
    v.clamp(0.0, 1.0) as f64
}

fn mse(pred: &[f32], gt: &[f32]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let d = clamp(p) - g as f64;
            d * d
        })
        .sum();
    s / pred.len() as f64
}

/// `10·log10(1 / MSE)`; identical inputs give `+∞`.
pub fn psnr(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    check(pred, gt)?;
    Ok(psnr_from_mse(mse(pred.data(), gt.data())))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Root mean squared error on the 0–255 scale.
pub fn rmse(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    check(pred, gt)?;
    Ok(255.0 * mse(pred.data(), gt.data()).sqrt())
}

fn per_band(pred: &Tensor<f32>, gt: &Tensor<f32>, f: fn(&[f64], &[f64], usize, usize) -> Result<f64>) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let (l, h, w) = (gt.dim(0), gt.dim(1), gt.dim(2));
    let p = h * w;
    (0..l)
        .map(|b| {
            let x: Vec<f64> = pred.data()[b * p..(b + 1) * p].iter().map(|&v| clamp(v)).collect();
            let y: Vec<f64> = gt.data()[b * p..(b + 1) * p].iter().map(|&v| v as f64).collect();
            f(&x, &y, h, w)
        })
        .collect()
}

pub fn ssim_per_band(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Vec<f64>> {
    per_band(pred, gt, ssim_band)
}

/// Per-band UIQI; a band whose every window is degenerate yields `NaN`.
pub fn uiqi_per_band(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Vec<f64>> {
    per_band(pred, gt, |x, y, h, w| Ok(uiqi_band(x, y, h, w)?.unwrap_or(f64::NAN)))
}

pub fn ssim(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    let v = ssim_per_band(pred, gt)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean over bands with at least one valid window; `1.0` if none has one.
pub fn uiqi(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    let v: Vec<f64> = uiqi_per_band(pred, gt)?.into_iter().filter(|q| !q.is_nan()).collect();
    Ok(if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
}
