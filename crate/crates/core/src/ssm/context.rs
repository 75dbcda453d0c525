use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FrnError, Result};

/// How the band-mask threshold ε is chosen for each scan direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonPolicy {
    /// No mask: the vanilla selective scan.
    Off,
    /// The same ε for every direction.
    Fixed(f64),
    /// A fresh ε ~ U[0, α] per direction (training).
    Uniform { alpha: f64 },
}

/// Per-forward-pass state threaded through every scan: the ε policy, its
/// random stream and a record of the draws.
#[derive(Clone, Debug)]
pub struct ScanContext {
    policy: EpsilonPolicy,
    rng: ChaCha8Rng,
    draws: Vec<f64>,
}

impl ScanContext {
    pub fn new(policy: EpsilonPolicy, seed: u64) -> Result<Self> {
        match policy {
            EpsilonPolicy::Fixed(e) if !(0.0..=1.0).contains(&e) => {
                return Err(FrnError::contract(format!("epsilon {e} outside [0, 1]")))
            }
            EpsilonPolicy::Uniform { alpha } if !(0.0..=1.0).contains(&alpha) => {
                return Err(FrnError::contract(format!("alpha {alpha} outside [0, 1]")))
            }
            _ => {}
        }
        Ok(ScanContext {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: Vec::new(),
        })
    }

    /// Unmasked scans.
    pub fn unmasked() -> Self {
        Self::new(EpsilonPolicy::Off, 0).expect("valid policy")
    }

    /// Inference setting: ε = α/2.
    pub fn inference(alpha: f64) -> Result<Self> {
        Self::new(EpsilonPolicy::Fixed(alpha / 2.0), 0)
    }

    /// Training setting: ε ~ U[0, α] per direction.
    pub fn training(alpha: f64, seed: u64) -> Result<Self> {
        Self::new(EpsilonPolicy::Uniform { alpha }, seed)
    }

    pub fn policy(&self) -> EpsilonPolicy {
        self.policy
    }

    pub fn next_epsilon(&mut self) -> Option<f64> {
        let e = match self.policy {
            EpsilonPolicy::Off => return None,
            EpsilonPolicy::Fixed(e) => e,
            EpsilonPolicy::Uniform { alpha } if alpha == 0.0 => 0.0,
            EpsilonPolicy::Uniform { alpha } => self.rng.gen_range(0.0..=alpha),
        };
        self.draws.push(e);
        Some(e)
    }

    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    pub fn mean_epsilon(&self) -> f64 {
        if self.draws.is_empty() {
            0.0
        } else {
            self.draws.iter().sum::<f64>() / self.draws.len() as f64
        }
    }
}
