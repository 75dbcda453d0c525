use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::cube::{linear_wavelengths, SpectralCube};
use crate::error::{FrnError, Result};
use crate::numerics::{gemm, Real, Tensor};

pub const DEFAULT_CENTERS_NM: [f64; 3] = [600.0, 540.0, 460.0];
pub const DEFAULT_SIGMA_NM: f64 = 40.0;
const CSV_HEADER: &str = "wavelength_nm,r,g,b";

/// Camera response: an `L × 3` nonnegative matrix, one column per R, G, B.
#[derive(Clone, Debug, PartialEq)]
pub struct Crf {
    /// Row-major `[L, 3]`.
    pub phi: Vec<f64>,
    pub wavelengths: Vec<f64>,
}

impl Crf {
    pub fn new(phi: Vec<f64>, wavelengths: Vec<f64>) -> Result<Self> {
        if phi.len() != 3 * wavelengths.len() || wavelengths.is_empty() {
            return Err(FrnError::Contract(format!(
                "CRF has {} entries for {} wavelengths",
                phi.len(),
                wavelengths.len()
            )));
        }
        if phi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(FrnError::contract("CRF entries must be finite and nonnegative"));
        }
        Ok(Crf { phi, wavelengths })
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn at(&self, band: usize, channel: usize) -> f64 {
        self.phi[band * 3 + channel]
    }

    pub fn column_sums(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for row in self.phi.chunks(3) {
            for c in 0..3 {
                s[c] += row[c];
            }
        }
        s
    }

    /// Scales each column to sum to one.
    pub fn normalized(mut self) -> Result<Self> {
        let s = self.column_sums();
        if s.iter().any(|v| *v <= 0.0) {
            return Err(FrnError::contract("CRF column sums to zero"));
        }
        for row in self.phi.chunks_mut(3) {
            for c in 0..3 {
                row[c] /= s[c];
            }
        }
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (w, row) in self.wavelengths.iter().zip(self.phi.chunks(3)) {
            let _ = writeln!(out, "{w},{},{},{}", row[0], row[1], row[2]);
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| FrnError::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        match lines.next() {
            Some(h) if h.replace(' ', "") == CSV_HEADER => {}
            other => return Err(bad(format!("expected header `{CSV_HEADER}`, got {other:?}"))),
        }
        let mut wavelengths = Vec::new();
        let mut phi = Vec::new();
        for (n, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("row {}: {e}", n + 1)))?;
            if vals.len() != 4 {
                return Err(bad(format!("row {} has {} fields, expected 4", n + 1, vals.len())));
            }
            wavelengths.push(vals[0]);
            phi.extend_from_slice(&vals[1..]);
        }
        Crf::new(phi, wavelengths).map_err(|e| bad(e.to_string()))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FrnError::io(path, e))?;
        Crf::from_csv(&text, path)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| FrnError::io(path, e))
    }
}

/// Gaussian sensitivities over `L` bands spaced evenly on 400–700 nm, each
/// column normalized to sum to one.
pub fn gaussian_crf(bands: usize, centers_nm: [f64; 3], sigma_nm: f64) -> Result<Crf> {
    let wl: Vec<f64> = linear_wavelengths(bands, 400.0, 700.0).iter().map(|&w| w as f64).collect();
    gaussian_crf_at(&wl, centers_nm, sigma_nm)
}

pub fn gaussian_crf_at(wavelengths: &[f64], centers_nm: [f64; 3], sigma_nm: f64) -> Result<Crf> {
    if wavelengths.len() < 3 {
        return Err(FrnError::Contract(format!("a CRF needs at least 3 bands, got {}", wavelengths.len())));
    }
    if !(sigma_nm > 0.0) {
        return Err(FrnError::contract("CRF sigma must be positive"));
    }
    let mut phi = Vec::with_capacity(3 * wavelengths.len());
    for &w in wavelengths {
        for c in centers_nm {
            let z = (w - c) / sigma_nm;
            phi.push((-0.5 * z * z).exp());
        }
    }
    Crf::new(phi, wavelengths.to_vec())?.normalized()
}

fn check_bands(bands: usize, crf: &Crf) -> Result<()> {
    if bands != crf.bands() {
        return Err(FrnError::Shape {
            op: "crf_project",
            lhs: vec![bands],
            rhs: vec![crf.bands(), 3],
        });
    }
    Ok(())
}

/// `X = Φᵀ Y` as one matrix product over the band-major `[L, H, W]` data.
pub fn project_matrix<T: Real>(y: &Tensor<T>, crf: &Crf) -> Result<Tensor<T>> {
    check_bands(y.dim(0), crf)?;
    let (l, h, w) = (y.dim(0), y.dim(1), y.dim(2));
    let phi: Vec<T> = crf.phi.iter().map(|&v| T::of(v)).collect();
    let mut out = vec![T::zero(); 3 * h * w];
    // phi is stored [L, 3], i.e. the transpose of the [3, L] left factor.
    gemm(3, l, h * w, &phi, true, y.data(), false, &mut out, false);
    Tensor::new([3, h, w], out)
}

/// The same projection as an explicit per-pixel, per-channel sum.
pub fn project_loop<T: Real>(y: &Tensor<T>, crf: &Crf) -> Result<Tensor<T>> {
    check_bands(y.dim(0), crf)?;
    let (l, h, w) = (y.dim(0), y.dim(1), y.dim(2));
    let p = h * w;
    let mut out = Tensor::zeros([3, h, w]);
    for c in 0..3 {
        for px in 0..p {
            let mut acc = T::zero();
            for i in 0..l {
                acc += T::of(crf.at(i, c)) * y.data()[i * p + px];
            }
            out.data_mut()[c * p + px] = acc;
        }
    }
    Ok(out)
}

/// Renders the RGB image a camera with response `crf` records of `cube`.
/// Accumulates in 64-bit.
pub fn crf_project(cube: &SpectralCube, crf: &Crf) -> Result<Tensor<f32>> {
    Ok(project_matrix(&cube.data.cast::<f64>(), crf)?.cast())
}
