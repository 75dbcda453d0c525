use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Scene;
use super::trainer::resample_tensor;
use crate::error::{FrnError, Result};
use crate::fractal::Frn;
use crate::metrics::{evaluate, MetricReport};
use crate::numerics::{ParamStore, Tensor};
use crate::simdata::{pinv_upsample, Crf};
use crate::ssm::{EpsilonPolicy, ScanContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub name: String,
    pub metrics: MetricReport,
}

/// Mean metrics over scenes plus one row per scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: MetricReport,
    pub scenes: Vec<SceneMetrics>,
}

impl EvalReport {
    pub fn from_rows(scenes: Vec<SceneMetrics>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(FrnError::contract("no scenes to evaluate"));
        }
        let n = scenes.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| scenes.iter().map(|s| f(&s.metrics)).sum::<f64>() / n;
        let mean = MetricReport {
            psnr_db: avg(|m| m.psnr_db),
            rmse_255: avg(|m| m.rmse_255),
            ssim: avg(|m| m.ssim),
            uiqi: avg(|m| m.uiqi),
            per_band: None,
        };
        Ok(EvalReport { mean, scenes })
    }
}

/// Inference-time threshold policy: ε = α/2, or no mask when α = 0.
pub fn inference_policy(alpha: f64) -> EpsilonPolicy {
    if alpha > 0.0 {
        EpsilonPolicy::Fixed(alpha / 2.0)
    } else {
        EpsilonPolicy::Off
    }
}

/// Tile origins along an axis of length `len`: stride `tile − overlap`,
/// with the last tile flush against the end.
pub fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Per-position blending weight: a linear ramp across each overlap margin.
fn ramp(tile: usize, overlap: usize) -> Vec<f32> {
    (0..tile)
        .map(|x| {
            if overlap == 0 {
                1.0
            } else {
                let d = (x + 1).min(tile - x) as f32 / (overlap + 1) as f32;
                d.min(1.0)
            }
        })
        .collect()
}

fn pad_edge(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (c, h0, w0) = (t.dim(0), t.dim(1), t.dim(2));
    if (h, w) == (h0, w0) {
        return t.clone();
    }
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.data()[(ch * h0 + y.min(h0 - 1)) * w0 + x.min(w0 - 1)]
    })
}

/// Full-image prediction from overlapping tiles blended linearly.
pub fn predict_tiled(
    frn: &Frn,
    store: &ParamStore<f32>,
    rgb: &Tensor<f32>,
    tile: usize,
    overlap: usize,
) -> Result<Tensor<f32>> {
    if rgb.rank() != 3 || rgb.dim(0) != 3 {
        return Err(FrnError::Contract(format!("rgb must be [3, H, W], got {:?}", rgb.shape())));
    }
    let m = 1usize << frn.config.depth;
    if tile == 0 || tile % m != 0 {
        return Err(FrnError::Contract(format!("tile {tile} must be a positive multiple of {m}")));
    }
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let round_up = |v: usize| v.div_ceil(m) * m;
    let (th, tw) = (tile.min(round_up(h)), tile.min(round_up(w)));
    let (hp, wp) = (h.max(th), w.max(tw));
    let padded = pad_edge(rgb, hp, wp);
    let k = frn.config.k_bands;
    let policy = inference_policy(frn.config.alpha);
    let origins: Vec<(usize, usize)> = tile_starts(hp, th, overlap.min(th / 2))
        .into_iter()
        .flat_map(|y| tile_starts(wp, tw, overlap.min(tw / 2)).into_iter().map(move |x| (y, x)))
        .collect();
    let outs: Vec<Tensor<f32>> = origins
        .par_iter()
        .map(|&(y, x)| {
            let crop = Tensor::from_fn([3, th, tw], |i| {
                let (c, r, q) = (i / (th * tw), (i / tw) % th, i % tw);
                padded.data()[(c * hp + y + r) * wp + x + q]
            });
            frn.reconstruct(store, &crop, &mut ScanContext::new(policy, 0)?)
        })
        .collect::<Result<_>>()?;
    let (ry, rx) = (ramp(th, overlap.min(th / 2)), ramp(tw, overlap.min(tw / 2)));
    let mut acc = vec![0.0f32; k * hp * wp];
    let mut wsum = vec![0.0f32; hp * wp];
    for (&(y, x), out) in origins.iter().zip(&outs) {
        for r in 0..th {
            for q in 0..tw {
                let wt = ry[r] * rx[q];
                let px = (y + r) * wp + x + q;
                wsum[px] += wt;
                for c in 0..k {
                    acc[c * hp * wp + px] += wt * out.data()[(c * th + r) * tw + q];
                }
            }
        }
    }
    Ok(Tensor::from_fn([k, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let px = y * wp + x;
        acc[c * hp * wp + px] / wsum[px]
    }))
}

/// Predicts every scene, maps predictions back to each scene's band count
/// and scores them.
pub fn evaluate_scenes(
    frn: &Frn,
    store: &ParamStore<f32>,
    scenes: &[Scene],
    tile: usize,
    overlap: usize,
) -> Result<EvalReport> {
    let rows = scenes
        .iter()
        .map(|s| {
            let pred = predict_tiled(frn, store, &s.rgb, tile, overlap)?;
            let pred = resample_tensor(&pred, s.cube.dim(0))?;
            Ok(SceneMetrics {
                name: s.name.clone(),
                metrics: evaluate(&pred, &s.cube, false)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// Scores the pseudo-inverse spectral upsampling baseline.
pub fn evaluate_baseline(scenes: &[Scene], crf: &Crf) -> Result<EvalReport> {
    let rows = scenes
        .iter()
        .map(|s| {
            let pred = pinv_upsample(&s.rgb, crf)?;
            Ok(SceneMetrics {
                name: s.name.clone(),
                metrics: evaluate(&pred, &s.cube, false)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}
