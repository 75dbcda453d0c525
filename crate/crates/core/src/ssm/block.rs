use rand::Rng;

use super::context::ScanContext;
use super::cross::{cross_scan_2d, SsmHead};
use crate::error::{FrnError, Result};
use crate::numerics::{fan_in_uniform, BoundParams, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const DW_KERNEL: usize = 3;

/// Residual band-aware scan block:
/// `out = CS(LN(x)) ⊙ SiLU(LN(x)) + x`, with
/// `CS = DWConv → SiLU → cross-scan → LN`.
#[derive(Clone, Debug)]
pub struct BssmBlock {
    pub width: usize,
    pub ln_in_gamma: ParamId,
    pub ln_in_beta: ParamId,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub head: SsmHead,
    pub ln_out_gamma: ParamId,
    pub ln_out_beta: ParamId,
}

impl BssmBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        d_state: usize,
        rng: &mut R,
    ) -> Self {
        let ln_in_gamma = store.add(format!("{prefix}.ln_in.gamma"), Tensor::full([width], T::one()));
        let ln_in_beta = store.add(format!("{prefix}.ln_in.beta"), Tensor::zeros([width]));
        let fan = DW_KERNEL * DW_KERNEL;
        let dw_weight = store.add(
            format!("{prefix}.dwconv.weight"),
            fan_in_uniform([width, DW_KERNEL, DW_KERNEL], fan, rng),
        );
        let dw_bias = store.add(format!("{prefix}.dwconv.bias"), fan_in_uniform([width], fan, rng));
        let head = SsmHead::new(store, &format!("{prefix}.ssm"), width, d_state, rng);
        let ln_out_gamma = store.add(format!("{prefix}.ln_out.gamma"), Tensor::full([width], T::one()));
        let ln_out_beta = store.add(format!("{prefix}.ln_out.beta"), Tensor::zeros([width]));
        BssmBlock {
            width,
            ln_in_gamma,
            ln_in_beta,
            dw_weight,
            dw_bias,
            head,
            ln_out_gamma,
            ln_out_beta,
        }
    }

    /// Learnable scalars in one block of the given width and state size.
    pub fn scalar_count(width: usize, d_state: usize) -> usize {
        let r = SsmHead::dt_rank_for(width);
        let ln = 2 * width;
        let dw = width * DW_KERNEL * DW_KERNEL + width;
        let head = 2 * width * r + width + 3 * width * d_state + width;
        2 * ln + dw + head
    }

    /// Parameters of the `CS(·)` output normalization; zeroing both turns
    /// the block into the identity.
    pub fn branch_scale_params(&self) -> [ParamId; 2] {
        [self.ln_out_gamma, self.ln_out_beta]
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        feat: Var,
        ctx: &mut ScanContext,
    ) -> Result<Var> {
        let s = g.shape(feat);
        if s.len() != 3 || s[0] != self.width {
            return Err(FrnError::Shape {
                op: "bssm_block",
                lhs: s.to_vec(),
                rhs: vec![self.width],
            });
        }
        let ln = g.layer_norm(feat, p.var(self.ln_in_gamma), p.var(self.ln_in_beta), LN_EPS)?;
        let gate = g.silu(ln)?;
        let u = g.dwconv2d(ln, p.var(self.dw_weight), Some(p.var(self.dw_bias)), DW_KERNEL / 2)?;
        let u = g.silu(u)?;
        let y = cross_scan_2d(g, p, &self.head, u, ctx)?;
        let cs = g.layer_norm(y, p.var(self.ln_out_gamma), p.var(self.ln_out_beta), LN_EPS)?;
        let branch = g.mul(cs, gate)?;
        g.add(branch, feat)
    }
}
