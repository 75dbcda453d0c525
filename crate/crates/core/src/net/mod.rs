//! The atomic generator: a small encoder–decoder of band-aware scan blocks
//! mapping `S` reference channels plus RGB to `n` new spectral channels.

mod generator;

pub use generator::{param_count, AtomicGenerator, GeneratorConfig};
