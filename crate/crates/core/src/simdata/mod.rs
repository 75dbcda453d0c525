//! Camera forward model, synthetic low-rank scenes, cube I/O and patch
//! extraction.

mod crf;
mod cube;
mod ops;
mod scene;

pub use crf::{
    crf_project, gaussian_crf, gaussian_crf_at, project_loop, project_matrix, Crf, DEFAULT_CENTERS_NM,
    DEFAULT_SIGMA_NM,
};
pub use cube::{
    decode_cube, encode_cube, linear_wavelengths, load_cube, load_png_band_dir, save_cube, save_png_bands,
    SpectralCube,
};
pub use ops::{crop, crop_patches, pinv_upsample, resample_bands, sample_patch, Patch};
pub use scene::{abundances, endmember_library, synth_scene, SceneSpec, Signature};
