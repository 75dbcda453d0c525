//! Band-aware selective state-space scanning.
//!
//! The continuous diagonal system `h' = A h + B x`, `y = C h + D x` is
//! discretized with a zero-order hold per token, scanned along four raster
//! orders of a feature map, and read out through a binary mask that drops
//! tokens whose input gate falls below a threshold ε.

mod block;
mod context;
mod cross;
mod kernel;
mod scan;
mod zoh;

pub use block::{BssmBlock, LN_EPS};
pub use context::{EpsilonPolicy, ScanContext};
pub use cross::{
    cross_scan_2d, permute_tokens, project_head, scan_orders, unpermute_tokens, HeadProjection,
    SsmHead, INITIAL_DELTA,
};
pub use kernel::{fused_scan, kernel_gate, ScanDirection, ScanInputs};
pub use scan::{band_mask, gate_statistic, mask_from_gate, selective_scan, BandMask};
pub use zoh::{phi_exact, phi_series, zoh_coeffs, zoh_discretize, DiscretizedParams, SERIES_SWITCH};
