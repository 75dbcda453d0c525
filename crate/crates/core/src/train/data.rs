use crate::error::{FrnError, Result};
use crate::numerics::Tensor;
use crate::simdata::{crf_project, Crf, SpectralCube};

/// A ground-truth cube with its RGB rendering.
#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    /// `[K, H, W]`
    pub cube: Tensor<f32>,
    /// `[3, H, W]`
    pub rgb: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Renders each cube through `crf`. All cubes must share a band count.
    pub fn from_cubes(cubes: Vec<(String, SpectralCube)>, crf: &Crf) -> Result<Self> {
        let scenes = cubes
            .into_iter()
            .map(|(name, cube)| {
                let rgb = crf_project(&cube, crf)?;
                Ok(Scene {
                    name,
                    cube: cube.data,
                    rgb,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { scenes };
        ds.bands()?;
        Ok(ds)
    }

    /// Shared band count; errors on an empty or inconsistent set.
    pub fn bands(&self) -> Result<usize> {
        let first = self
            .scenes
            .first()
            .ok_or_else(|| FrnError::contract("dataset has no scenes"))?
            .cube
            .dim(0);
        if let Some(s) = self.scenes.iter().find(|s| s.cube.dim(0) != first) {
            return Err(FrnError::Contract(format!(
                "scene {} has {} bands, expected {first}",
                s.name,
                s.cube.dim(0)
            )));
        }
        Ok(first)
    }
}
