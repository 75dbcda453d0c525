use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use frn_core::simdata::{save_png_bands, SpectralCube};
use frn_core::Tensor;
use image::{ImageBuffer, Rgb};

fn quantize(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Binary 16-bit PGM of one `[H, W]` plane with values in `[0, 1]`.
pub fn pgm16(plane: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(plane.len() * 2);
    for &v in plane {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    out
}

/// One `band_XX.pgm` and one `band_XX.png` per band of `cube: [L, H, W]`.
pub fn write_bands(dir: &Path, cube: &Tensor<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (h, w) = (cube.dim(1), cube.dim(2));
    for b in 0..cube.dim(0) {
        let plane = &cube.data()[b * h * w..(b + 1) * h * w];
        let path = dir.join(format!("band_{b:02}.pgm"));
        std::fs::write(&path, pgm16(plane, h, w)).with_context(|| format!("writing {}", path.display()))?;
    }
    let clamped = Tensor::from_fn(cube.shape().to_vec(), |i| cube.data()[i].clamp(0.0, 1.0));
    save_png_bands(dir, &SpectralCube::new(clamped, None)?)?;
    Ok(())
}

pub fn abs_residual(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_fn(gt.shape().to_vec(), |i| (pred.data()[i].clamp(0.0, 1.0) - gt.data()[i]).abs())
}

/// 16-bit RGB PNG of `rgb: [3, H, W]`.
pub fn write_rgb_png(path: &Path, rgb: &Tensor<f32>) -> Result<()> {
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let p = h * w;
    let d = rgb.data();
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(d[i]), quantize(d[p + i]), quantize(d[2 * p + i])])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// `wavelength_nm,gt,pred` rows for pixel `(y, x)`.
pub fn spectral_curve(gt: &Tensor<f32>, pred: &Tensor<f32>, wavelengths: &[f32], y: usize, x: usize) -> String {
    let (h, w) = (gt.dim(1), gt.dim(2));
    let mut out = String::from("wavelength_nm,gt,pred\n");
    for (b, nm) in wavelengths.iter().enumerate() {
        let i = (b * h + y) * w + x;
        let _ = writeln!(out, "{nm},{},{}", gt.data()[i], pred.data()[i].clamp(0.0, 1.0));
    }
    out
}

/// Center and the two diagonal quarter points.
pub fn probe_pixels(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut v = vec![(h / 2, w / 2), (h / 4, w / 4), (3 * h / 4, 3 * w / 4)];
    v.dedup();
    v
}
