use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cube::{linear_wavelengths, SpectralCube};
use crate::error::{FrnError, Result};
use crate::numerics::Tensor;

/// A smooth reflectance spectrum: a floor plus Gaussian bumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub floor: f64,
    /// `(center_nm, width_nm, amplitude)`
    pub bumps: Vec<(f64, f64, f64)>,
}

impl Signature {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let count = rng.gen_range(1..=3);
        Signature {
            floor: rng.gen_range(0.02..0.2),
            bumps: (0..count)
                .map(|_| {
                    (
                        rng.gen_range(380.0..720.0),
                        rng.gen_range(25.0..120.0),
                        rng.gen_range(0.2..1.0),
                    )
                })
                .collect(),
        }
    }

    pub fn eval(&self, nm: f64) -> f64 {
        self.floor
            + self
                .bumps
                .iter()
                .map(|&(c, w, a)| {
                    let z = (nm - c) / w;
                    a * (-0.5 * z * z).exp()
                })
                .sum::<f64>()
    }
}

/// `count` random signatures; scenes drawing from a shared library differ
/// only in their materials' arrangement and selection.
pub fn endmember_library(count: usize, seed: u64) -> Vec<Signature> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11b7_a3e5);
    (0..count).map(|_| Signature::random(&mut rng)).collect()
}

/// Recipe for a synthetic low-rank scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Number of materials `E`.
    pub endmembers: usize,
    pub seed: u64,
    /// When set, the `E` materials are drawn without replacement from here;
    /// otherwise they are generated from `seed`.
    pub library: Option<Vec<Signature>>,
    /// Approximate feature size of the abundance fields, in pixels.
    pub feature_px: f64,
    /// Softmax sharpness; larger values give crisper material boundaries.
    pub sharpness: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            endmembers: 3,
            seed: 0,
            library: None,
            feature_px: 24.0,
            sharpness: 4.0,
        }
    }
}

/// Smooth random field: a sum of random plane waves with periods around
/// `feature_px`, normalized to unit peak magnitude.
fn smooth_field<R: Rng + ?Sized>(h: usize, w: usize, feature_px: f64, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let period = feature_px * rng.gen_range(0.7..2.5);
            let k = std::f64::consts::TAU / period;
            (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0))
        })
        .collect();
    let mut f: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).cos()).sum()
        })
        .collect();
    let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    f.iter_mut().for_each(|v| *v /= peak);
    f
}

/// `[E, H, W]` abundances: nonnegative and summing to one per pixel.
pub fn abundances(spec: &SceneSpec, h: usize, w: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xab);
    let e = spec.endmembers;
    let fields: Vec<Vec<f64>> = (0..e).map(|_| smooth_field(h, w, spec.feature_px, &mut rng)).collect();
    let p = h * w;
    let mut out = vec![0.0; e * p];
    for px in 0..p {
        let m = fields.iter().map(|f| f[px]).fold(f64::NEG_INFINITY, f64::max);
        let z: Vec<f64> = fields.iter().map(|f| (spec.sharpness * (f[px] - m)).exp()).collect();
        let s: f64 = z.iter().sum();
        for (k, v) in z.iter().enumerate() {
            out[k * p + px] = v / s;
        }
    }
    out
}

fn signatures(spec: &SceneSpec) -> Result<Vec<Signature>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.library {
        None => Ok((0..spec.endmembers).map(|_| Signature::random(&mut rng)).collect()),
        Some(lib) => {
            if lib.len() < spec.endmembers {
                return Err(FrnError::Contract(format!(
                    "library of {} signatures cannot supply {} endmembers",
                    lib.len(),
                    spec.endmembers
                )));
            }
            let picks = rand::seq::index::sample(&mut rng, lib.len(), spec.endmembers);
            Ok(picks.into_iter().map(|i| lib[i].clone()).collect())
        }
    }
}

/// Renders `Σ_e abundance_e(h, w) · signature_e(λ)` over `bands` wavelengths
/// evenly spaced on 400–700 nm, divided by its maximum.
pub fn synth_scene(spec: &SceneSpec, bands: usize, height: usize, width: usize) -> Result<SpectralCube> {
    if spec.endmembers == 0 || bands == 0 || height == 0 || width == 0 {
        return Err(FrnError::contract("scene needs at least one endmember, band and pixel"));
    }
    let wl = linear_wavelengths(bands, 400.0, 700.0);
    let sig = signatures(spec)?;
    let ab = abundances(spec, height, width);
    let p = height * width;
    let mut data = vec![0.0f64; bands * p];
    for (e, s) in sig.iter().enumerate() {
        for (b, &nm) in wl.iter().enumerate() {
            let v = s.eval(nm as f64);
            let row = &mut data[b * p..(b + 1) * p];
            row.iter_mut().zip(&ab[e * p..(e + 1) * p]).for_each(|(d, &a)| *d += a * v);
        }
    }
    let peak = data.iter().fold(0.0f64, |m, &v| m.max(v));
    let data: Vec<f32> = data.iter().map(|&v| (v / peak) as f32).collect();
    SpectralCube::new(Tensor::new([bands, height, width], data)?, Some(wl))
}
