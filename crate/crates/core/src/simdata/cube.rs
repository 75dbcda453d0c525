use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{FrnError, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"FRNC";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 12 + 1;
/// Cubes larger than this many scalars are rejected when loading.
const MAX_ELEMENTS: u64 = 1 << 32;

/// A band-major `[L, H, W]` hyperspectral cube.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube {
    pub data: Tensor<f32>,
    /// Band centers in nm, strictly increasing.
    pub wavelengths: Option<Vec<f32>>,
}

impl SpectralCube {
    pub fn new(data: Tensor<f32>, wavelengths: Option<Vec<f32>>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(FrnError::Contract(format!("cube must be [L, H, W], got {:?}", data.shape())));
        }
        if let Some(w) = &wavelengths {
            if w.len() != data.dim(0) {
                return Err(FrnError::Contract(format!(
                    "{} wavelengths for {} bands",
                    w.len(),
                    data.dim(0)
                )));
            }
            if w.windows(2).any(|p| !(p[0] < p[1])) {
                return Err(FrnError::contract("wavelengths must be strictly increasing"));
            }
        }
        Ok(SpectralCube { data, wavelengths })
    }

    pub fn bands(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn band(&self, i: usize) -> &[f32] {
        let p = self.height() * self.width();
        &self.data.data()[i * p..(i + 1) * p]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// `L` centers evenly spaced over `[lo, hi]` nm.
pub fn linear_wavelengths(bands: usize, lo: f64, hi: f64) -> Vec<f32> {
    if bands == 1 {
        return vec![((lo + hi) / 2.0) as f32];
    }
    (0..bands)
        .map(|i| (lo + (hi - lo) * i as f64 / (bands - 1) as f64) as f32)
        .collect()
}

pub fn encode_cube(cube: &SpectralCube) -> Vec<u8> {
    let l = cube.bands();
    let wl = cube.wavelengths.as_ref().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(HEADER + 4 * (wl + cube.data.numel()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [l, cube.height(), cube.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(u8::from(cube.wavelengths.is_some()));
    for v in cube.wavelengths.iter().flatten().chain(cube.data.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cube(bytes: &[u8], path: &Path) -> Result<SpectralCube> {
    let truncated = |expected: u64| FrnError::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FrnError::BadMagic {
            path: path.to_path_buf(),
            expected: "FRNC",
        });
    }
    if bytes.len() < HEADER {
        return Err(truncated(HEADER as u64));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(FrnError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let dims = [word(8) as u64, word(12) as u64, word(16) as u64];
    let has_wl = match bytes[20] {
        0 => false,
        1 => true,
        f => {
            return Err(FrnError::Malformed {
                path: path.to_path_buf(),
                reason: format!("wavelength flag {f}"),
            })
        }
    };
    let elements = match dims[0].checked_mul(dims[1]).and_then(|v| v.checked_mul(dims[2])) {
        Some(n) if n <= MAX_ELEMENTS && n > 0 => n,
        _ => {
            return Err(FrnError::DimensionOverflow {
                path: path.to_path_buf(),
                dims: dims.to_vec(),
            })
        }
    };
    let wl = if has_wl { dims[0] } else { 0 };
    let expected = HEADER as u64 + 4 * (wl + elements);
    if bytes.len() as u64 != expected {
        return Err(truncated(expected));
    }
    let floats: Vec<f32> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (wavelengths, data) = floats.split_at(wl as usize);
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    let data = Tensor::new(shape, data.to_vec())?;
    SpectralCube::new(data, has_wl.then(|| wavelengths.to_vec())).map_err(|e| FrnError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn save_cube(path: impl AsRef<Path>, cube: &SpectralCube) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| FrnError::io(path, e))?;
    f.write_all(&encode_cube(cube)).map_err(|e| FrnError::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FrnError::io(path, e))?;
    decode_cube(&bytes, path)
}

/// Loads a directory of equally sized 8- or 16-bit grayscale images as one
/// band each, in lexicographic file-name order.
pub fn load_png_band_dir(dir: impl AsRef<Path>) -> Result<SpectralCube> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| FrnError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(FrnError::Malformed {
            path: dir.to_path_buf(),
            reason: "no PNG bands found".into(),
        });
    }
    let mut data = Vec::new();
    let mut layout: Option<(u32, u32, u8)> = None;
    for file in &files {
        let img = image::open(file).map_err(|source| FrnError::Image {
            path: file.clone(),
            source,
        })?;
        let (w, h) = (img.width(), img.height());
        let (depth, values): (u8, Vec<f32>) = match img {
            image::DynamicImage::ImageLuma8(b) => (8, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
            image::DynamicImage::ImageLuma16(b) => {
                (16, b.into_raw().into_iter().map(|v| (v as f64 / 65535.0) as f32).collect())
            }
            other => {
                return Err(FrnError::Malformed {
                    path: file.clone(),
                    reason: format!("expected 8/16-bit grayscale, got {:?}", other.color()),
                })
            }
        };
        match layout {
            None => layout = Some((w, h, depth)),
            Some(l) if l != (w, h, depth) => {
                return Err(FrnError::Malformed {
                    path: file.clone(),
                    reason: format!(
                        "{w}x{h} at {depth} bits differs from first band's {}x{} at {} bits",
                        l.0, l.1, l.2
                    ),
                })
            }
            Some(_) => {}
        }
        data.extend(values);
    }
    let (w, h, _) = layout.expect("at least one band");
    SpectralCube::new(Tensor::new([files.len(), h as usize, w as usize], data)?, None)
}

/// Writes each band as a 16-bit grayscale PNG named `band_XX.png`, values
/// clamped to `[0, 1]`.
pub fn save_png_bands(dir: impl AsRef<Path>, cube: &SpectralCube) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| FrnError::io(dir, e))?;
    let width = (cube.bands().max(2) - 1).to_string().len().max(2);
    for b in 0..cube.bands() {
        let path = dir.join(format!("band_{b:0width$}.png"));
        let px: Vec<u16> = cube.band(b).iter().map(|&v| to_u16(v)).collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(cube.width() as u32, cube.height() as u32, px)
            .expect("buffer matches dimensions");
        img.save(&path).map_err(|source| FrnError::Image { path, source })?;
    }
    Ok(())
}

pub(crate) fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> SpectralCube {
        let t = Tensor::from_fn([3, 2, 4], |i| i as f32 / 24.0);
        SpectralCube::new(t, Some(linear_wavelengths(3, 400.0, 700.0))).unwrap()
    }

    #[test]
    fn encode_decode_roundtrip() {
        let c = cube();
        let back = decode_cube(&encode_cube(&c), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn distinct_error_kinds() {
        let mut bytes = encode_cube(&cube());
        let p = Path::new("mem");
        assert!(matches!(decode_cube(&bytes[..bytes.len() - 1], p), Err(FrnError::Truncated { .. })));
        let mut big = bytes.clone();
        big[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        big[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_cube(&big, p), Err(FrnError::DimensionOverflow { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode_cube(&ver, p), Err(FrnError::UnsupportedVersion { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_cube(&bytes, p), Err(FrnError::BadMagic { .. })));
    }

    #[test]
    fn rejects_unordered_wavelengths() {
        let t = Tensor::zeros([2, 1, 1]);
        assert!(SpectralCube::new(t, Some(vec![500.0, 400.0])).is_err());
    }
}
