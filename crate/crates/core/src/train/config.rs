use serde::{Deserialize, Serialize};

use crate::error::{FrnError, Result};
use crate::fractal::FrnConfig;
use crate::net::GeneratorConfig;

/// Optimization and recursion settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub total_steps: u64,
    pub patch: usize,
    /// Recursion depth `M`.
    pub levels: usize,
    /// Outputs per atomic call `n`; `None` picks `round(K^(1/M))`.
    pub branch: Option<usize>,
    /// Reference planes `S`.
    pub refs: usize,
    pub alpha: f64,
    pub use_rgb: bool,
    pub seed: u64,
    /// Steps between evaluations; 0 disables.
    pub eval_every: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub deep_supervision: bool,
    pub deep_weight: f64,
    pub flips: bool,
    pub eval_tile: usize,
    pub eval_overlap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 4e-4,
            lr_min: 1e-6,
            batch: 32,
            total_steps: 2000,
            patch: 64,
            levels: 5,
            branch: None,
            refs: 4,
            alpha: 0.5,
            use_rgb: true,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            deep_supervision: false,
            deep_weight: 0.5,
            flips: true,
            eval_tile: 64,
            eval_overlap: 8,
        }
    }
}

/// Generator architecture shared by every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub d_state: usize,
    /// See [`FrnConfig::slot_heads`].
    pub slot_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        ModelConfig {
            base_width: g.base_width,
            depth: g.depth,
            blocks_per_stage: g.blocks_per_stage,
            d_state: g.d_state,
            slot_heads: true,
        }
    }
}

/// `n` for `M` levels over `K` bands: `K` itself for one level, otherwise
/// the nearest integer to `K^(1/M)`, at least 2.
pub fn auto_branch(k_bands: usize, levels: usize) -> usize {
    if levels <= 1 {
        return k_bands;
    }
    ((k_bands as f64).powf(1.0 / levels as f64).round() as usize).max(2)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FrnError::Contract(m));
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min < self.lr0) {
            return bad(format!("need 0 <= lr_min < lr0, got lr_min={} lr0={}", self.lr_min, self.lr0));
        }
        if self.batch == 0 || self.patch == 0 {
            return bad("batch and patch must be at least 1".into());
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.refs == 0 {
            return bad("refs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if self.eval_overlap * 2 >= self.eval_tile {
            return bad(format!(
                "eval_overlap {} must be less than half of eval_tile {}",
                self.eval_overlap, self.eval_tile
            ));
        }
        Ok(())
    }

    /// Network for data with `k_bands` channels. The network itself emits
    /// `n^M` bands, which may differ from `k_bands`.
    pub fn frn_config(&self, model: &ModelConfig, k_bands: usize) -> Result<FrnConfig> {
        self.validate()?;
        let n = self.branch.unwrap_or_else(|| auto_branch(k_bands, self.levels));
        let k_eff = u32::try_from(self.levels)
            .ok()
            .and_then(|m| n.checked_pow(m))
            .ok_or_else(|| FrnError::Contract(format!("{n}^{} overflows", self.levels)))?;
        let cfg = FrnConfig {
            k_bands: k_eff,
            branch: n,
            references: self.refs,
            use_rgb: self.use_rgb,
            base_width: model.base_width,
            depth: model.depth,
            blocks_per_stage: model.blocks_per_stage,
            d_state: model.d_state,
            alpha: self.alpha,
            slot_heads: model.slot_heads,
        };
        cfg.validate()?;
        let m = 1usize << model.depth;
        for (what, size) in [("patch", self.patch), ("eval_tile", self.eval_tile)] {
            if size == 0 || size % m != 0 {
                return Err(FrnError::Contract(format!(
                    "{what} {size} must be a positive multiple of {m} for depth {}",
                    model.depth
                )));
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_branch_for_levels_axis() {
        assert_eq!(auto_branch(32, 5), 2);
        assert_eq!(auto_branch(32, 3), 3);
        assert_eq!(auto_branch(32, 2), 6);
        assert_eq!(auto_branch(32, 1), 32);
    }

    #[test]
    fn default_resolves_to_32_bands() {
        let c = TrainConfig::default().frn_config(&ModelConfig::default(), 32).unwrap();
        assert_eq!((c.k_bands, c.branch), (32, 2));
    }

    #[test]
    fn rejects_bad_schedule() {
        let c = TrainConfig {
            lr_min: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
