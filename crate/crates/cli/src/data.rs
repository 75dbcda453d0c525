use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use frn_core::simdata::{gaussian_crf, load_cube, load_png_band_dir, resample_bands, Crf, SpectralCube, DEFAULT_CENTERS_NM, DEFAULT_SIGMA_NM};
use frn_core::train::Dataset;

use crate::config::{DataConfig, DataError};

pub const CUBE_EXT: &str = "frnc";

/// Scenes of a data directory in name order: `*.frnc` files and
/// subdirectories holding PNG band stacks.
pub fn load_cubes(dir: &Path, bands: Option<usize>) -> Result<Vec<(String, SpectralCube)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| DataError(format!("cannot read data directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() || p.extension().is_some_and(|x| x == CUBE_EXT))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let cube = if p.is_dir() {
            let has_png = std::fs::read_dir(&p)?
                .filter_map(|e| e.ok())
                .any(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")));
            if !has_png {
                continue;
            }
            load_png_band_dir(&p)?
        } else {
            load_cube(&p)?
        };
        let cube = match bands {
            Some(l) if l != cube.bands() => resample_bands(&cube, l)?,
            _ => cube,
        };
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, cube));
    }
    if out.is_empty() {
        return Err(DataError(format!("no cubes found in {}", dir.display())).into());
    }
    Ok(out)
}

/// The configured CRF, `<dir>/crf.csv`, or the built-in Gaussian one.
pub fn load_crf(cfg: &DataConfig, bands: usize) -> Result<Crf> {
    let path = cfg.crf.clone().or_else(|| {
        let p = cfg.dir.join("crf.csv");
        p.exists().then_some(p)
    });
    let crf = match path {
        Some(p) => Crf::load_csv(&p).with_context(|| format!("loading CRF {}", p.display()))?,
        None => gaussian_crf(bands, DEFAULT_CENTERS_NM, DEFAULT_SIGMA_NM)?,
    };
    if crf.bands() != bands {
        return Err(DataError(format!("CRF has {} bands but the cubes have {bands}", crf.bands())).into());
    }
    Ok(crf)
}

/// Training and evaluation splits. With no holdout both are the full set.
pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
    pub crf: Crf,
}

pub fn load_split(cfg: &DataConfig) -> Result<Split> {
    let mut cubes = load_cubes(&cfg.dir, cfg.bands)?;
    let bands = cubes[0].1.bands();
    if let Some((name, _)) = cubes.iter().find(|(_, c)| c.bands() != bands) {
        return Err(DataError(format!("scene {name} does not have {bands} bands like the others")).into());
    }
    if cfg.holdout >= cubes.len() && cfg.holdout > 0 {
        return Err(DataError(format!(
            "holdout {} leaves no training scenes out of {}",
            cfg.holdout,
            cubes.len()
        ))
        .into());
    }
    let crf = load_crf(cfg, bands)?;
    let held = cubes.split_off(cubes.len() - cfg.holdout);
    let train = Dataset::from_cubes(cubes, &crf)?;
    let eval = if held.is_empty() {
        Dataset {
            scenes: train.scenes.clone(),
        }
    } else {
        Dataset::from_cubes(held, &crf)?
    };
    Ok(Split { train, eval, crf })
}
