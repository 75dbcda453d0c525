use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::crf::Crf;
use super::cube::SpectralCube;
use crate::error::{FrnError, Result};
use crate::numerics::Tensor;

/// Linear interpolation along the band axis onto `target` evenly spaced
/// positions spanning the same first and last band.
pub fn resample_bands(cube: &SpectralCube, target: usize) -> Result<SpectralCube> {
    let l = cube.bands();
    if target < 2 || l < 2 {
        return Err(FrnError::Contract(format!("cannot resample {l} bands to {target}")));
    }
    if target == l {
        return Ok(cube.clone());
    }
    let p = cube.height() * cube.width();
    let src = cube.data.data();
    let mut out = Vec::with_capacity(target * p);
    let mut wl = Vec::with_capacity(target);
    for j in 0..target {
        let pos = j as f64 * (l - 1) as f64 / (target - 1) as f64;
        let i0 = (pos.floor() as usize).min(l - 2);
        let f = pos - i0 as f64;
        let (a, b) = (&src[i0 * p..(i0 + 1) * p], &src[(i0 + 1) * p..(i0 + 2) * p]);
        out.extend(a.iter().zip(b).map(|(&u, &v)| ((1.0 - f) * u as f64 + f * v as f64) as f32));
        if let Some(w) = &cube.wavelengths {
            wl.push(((1.0 - f) * w[i0] as f64 + f * w[i0 + 1] as f64) as f32);
        }
    }
    let data = Tensor::new([target, cube.height(), cube.width()], out)?;
    SpectralCube::new(data, cube.wavelengths.as_ref().map(|_| wl))
}

/// An aligned training crop.
#[derive(Clone, Debug)]
pub struct Patch {
    /// `[L, size, size]`
    pub cube: Tensor<f32>,
    /// `[3, size, size]`
    pub rgb: Tensor<f32>,
    pub row: usize,
    pub col: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

/// Crops `[C, size, size]` at `(row, col)`, optionally mirrored.
pub fn crop(t: &Tensor<f32>, row: usize, col: usize, size: usize, flip_h: bool, flip_v: bool) -> Tensor<f32> {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let sy = row + if flip_v { size - 1 - y } else { y };
            for x in 0..size {
                let sx = col + if flip_h { size - 1 - x } else { x };
                out.push(t.data()[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new([c, size, size], out).expect("crop size is consistent")
}

/// Uniformly placed aligned crops of a cube and its RGB rendering. With
/// `flips`, each crop is mirrored horizontally and/or vertically with
/// probability one half, identically in both.
pub fn crop_patches(
    cube: &Tensor<f32>,
    rgb: &Tensor<f32>,
    size: usize,
    count: usize,
    seed: u64,
    flips: bool,
) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_patch(cube, rgb, size, flips, &mut rng)).collect()
}

pub fn sample_patch<R: Rng + ?Sized>(
    cube: &Tensor<f32>,
    rgb: &Tensor<f32>,
    size: usize,
    flips: bool,
    rng: &mut R,
) -> Result<Patch> {
    let (h, w) = (cube.dim(1), cube.dim(2));
    if rgb.shape() != [3, h, w] {
        return Err(FrnError::Shape {
            op: "crop_patches",
            lhs: cube.shape().to_vec(),
            rhs: rgb.shape().to_vec(),
        });
    }
    if size == 0 || size > h.min(w) {
        return Err(FrnError::Contract(format!("patch size {size} does not fit a {h}x{w} image")));
    }
    let row = rng.gen_range(0..=h - size);
    let col = rng.gen_range(0..=w - size);
    let (flip_h, flip_v) = if flips { (rng.gen(), rng.gen()) } else { (false, false) };
    Ok(Patch {
        cube: crop(cube, row, col, size, flip_h, flip_v),
        rgb: crop(rgb, row, col, size, flip_h, flip_v),
        row,
        col,
        flip_h,
        flip_v,
    })
}

fn invert3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det: f64 = (0..3).map(|j| m[0][j] * cof[0][j]).sum();
    if det.abs() < 1e-300 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof[j][i] / det;
        }
    }
    Some(inv)
}

/// Minimum-norm linear spectral upsampling: each pixel's spectrum is
/// `Φ (ΦᵀΦ)⁻¹ x`.
pub fn pinv_upsample(rgb: &Tensor<f32>, crf: &Crf) -> Result<Tensor<f32>> {
    if rgb.rank() != 3 || rgb.dim(0) != 3 {
        return Err(FrnError::Contract(format!("rgb must be [3, H, W], got {:?}", rgb.shape())));
    }
    let l = crf.bands();
    let mut gram = [[0.0; 3]; 3];
    for i in 0..l {
        for a in 0..3 {
            for b in 0..3 {
                gram[a][b] += crf.at(i, a) * crf.at(i, b);
            }
        }
    }
    let inv = invert3(gram).ok_or_else(|| FrnError::contract("CRF columns are linearly dependent"))?;
    // Row i of Φ(ΦᵀΦ)⁻¹.
    let proj: Vec<[f64; 3]> = (0..l)
        .map(|i| {
            let mut r = [0.0; 3];
            for (c, rc) in r.iter_mut().enumerate() {
                *rc = (0..3).map(|k| crf.at(i, k) * inv[k][c]).sum();
            }
            r
        })
        .collect();
    let p = rgb.dim(1) * rgb.dim(2);
    let d = rgb.data();
    let mut out = Vec::with_capacity(l * p);
    for r in &proj {
        out.extend((0..p).map(|px| {
            (r[0] * d[px] as f64 + r[1] * d[p + px] as f64 + r[2] * d[2 * p + px] as f64) as f32
        }));
    }
    Tensor::new([l, rgb.dim(1), rgb.dim(2)], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{crf_project, gaussian_crf, linear_wavelengths, DEFAULT_CENTERS_NM};

    #[test]
    fn resample_identity_and_linear_exactness() {
        let t = Tensor::from_fn([5, 1, 2], |i| (i / 2) as f32 * 0.25 + (i % 2) as f32 * 0.1);
        let c = SpectralCube::new(t, Some(linear_wavelengths(5, 400.0, 700.0))).unwrap();
        assert_eq!(resample_bands(&c, 5).unwrap(), c);
        let r = resample_bands(&c, 9).unwrap();
        for j in 0..9 {
            assert!((r.data.at(&[j, 0, 0]) - j as f32 * 0.125).abs() < 1e-6);
        }
        assert_eq!(r.wavelengths.as_ref().unwrap()[8], 700.0);
    }

    #[test]
    fn pinv_inverts_projection_on_crf_span() {
        let crf = gaussian_crf(16, DEFAULT_CENTERS_NM, 40.0).unwrap();
        let rgb = Tensor::<f32>::from_fn([3, 2, 2], |i| 0.1 + 0.07 * i as f32);
        let y = pinv_upsample(&rgb, &crf).unwrap();
        let back = crf_project(&SpectralCube::new(y, None).unwrap(), &crf).unwrap();
        assert!(back.max_abs_diff(&rgb) < 1e-5);
    }

    #[test]
    fn patches_are_aligned() {
        let cube = Tensor::from_fn([2, 6, 5], |i| i as f32);
        let rgb = Tensor::from_fn([3, 6, 5], |i| 1000.0 + i as f32);
        for p in crop_patches(&cube, &rgb, 3, 10, 1, true).unwrap() {
            let y = if p.flip_v { 2 } else { 0 };
            let x = if p.flip_h { 2 } else { 0 };
            assert_eq!(p.cube.at(&[1, y, x]), cube.at(&[1, p.row, p.col]));
            assert_eq!(p.rgb.at(&[2, y, x]), rgb.at(&[2, p.row, p.col]));
        }
        assert!(crop_patches(&cube, &rgb, 7, 1, 1, false).is_err());
    }
}
