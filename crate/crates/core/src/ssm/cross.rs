use std::sync::Arc;

use rand::Rng;

use super::context::ScanContext;
use super::kernel::{fused_scan, ScanDirection, ScanInputs};
use crate::error::{FrnError, Result};
use crate::numerics::{fan_in_uniform, BoundParams, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Softplus target for the initial Δ.
pub const INITIAL_DELTA: f64 = 0.05;

/// The four raster traversals of an `h×w` grid, as token (row-major flat)
/// indices: row-major forward, row-major backward, column-major forward,
/// column-major backward.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
    let row_rev = row.iter().rev().copied().collect();
    let col_rev = col.iter().rev().copied().collect();
    [row, row_rev, col, col_rev]
}

/// Gathers `tokens` (one row per token) into traversal order.
pub fn permute_tokens<T: Copy>(tokens: &[T], order: &[usize], row: usize) -> Vec<T> {
    order
        .iter()
        .flat_map(|&t| tokens[t * row..(t + 1) * row].iter().copied())
        .collect()
}

/// Inverse of [`permute_tokens`].
pub fn unpermute_tokens<T: Copy + Default>(seq: &[T], order: &[usize], row: usize) -> Vec<T> {
    let mut out = vec![T::default(); seq.len()];
    for (s, &t) in order.iter().enumerate() {
        out[t * row..(t + 1) * row].copy_from_slice(&seq[s * row..(s + 1) * row]);
    }
    out
}

/// Parameters of one selective-scan head over `width` channels.
#[derive(Clone, Debug)]
pub struct SsmHead {
    pub width: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    /// `[C, r]`
    pub dt_down: ParamId,
    /// `[r, C]`
    pub dt_up: ParamId,
    /// `[C]`
    pub dt_bias: ParamId,
    /// `[C, N]`
    pub b_proj: ParamId,
    /// `[C, N]`
    pub c_proj: ParamId,
    /// `[C, N]`; A = −exp(a_log)
    pub a_log: ParamId,
    /// `[C]`
    pub d_skip: ParamId,
}

impl SsmHead {
    pub fn dt_rank_for(width: usize) -> usize {
        width.div_ceil(16).max(1)
    }

    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        d_state: usize,
        rng: &mut R,
    ) -> Self {
        let r = Self::dt_rank_for(width);
        let dt_down = store.add(format!("{prefix}.dt_down"), fan_in_uniform([width, r], width, rng));
        let dt_up = store.add(format!("{prefix}.dt_up"), fan_in_uniform([r, width], r, rng));
        let bias = (INITIAL_DELTA.exp() - 1.0).ln();
        let dt_bias = store.add(format!("{prefix}.dt_bias"), Tensor::full([width], T::of(bias)));
        let b_proj = store.add(format!("{prefix}.b_proj"), fan_in_uniform([width, d_state], width, rng));
        let c_proj = store.add(format!("{prefix}.c_proj"), fan_in_uniform([width, d_state], width, rng));
        // |A| log-uniform over [1/16, 1] along the state axis.
        let lo = (1.0f64 / 16.0).ln();
        let a_log = Tensor::from_fn([width, d_state], |i| {
            let n = i % d_state;
            let frac = if d_state > 1 {
                n as f64 / (d_state - 1) as f64
            } else {
                0.0
            };
            T::of(lo * (1.0 - frac))
        });
        let a_log = store.add(format!("{prefix}.a_log"), a_log);
        let d_skip = store.add(format!("{prefix}.d_skip"), Tensor::full([width], T::one()));
        SsmHead {
            width,
            d_state,
            dt_rank: r,
            dt_down,
            dt_up,
            dt_bias,
            b_proj,
            c_proj,
            a_log,
            d_skip,
        }
    }
}

/// Projected per-token scan inputs of a head, all in token-major layout.
pub struct HeadProjection {
    pub inputs: ScanInputs,
    pub tokens: usize,
}

/// Computes Δ, B, C and A for token features `xt: [T, C]`.
pub fn project_head<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    head: &SsmHead,
    xt: Var,
) -> Result<HeadProjection> {
    let tokens = g.shape(xt)[0];
    let low = g.matmul(xt, p.var(head.dt_down))?;
    let dt = g.matmul(low, p.var(head.dt_up))?;
    let bias = g.broadcast_to(p.var(head.dt_bias), [tokens, head.width])?;
    let dt = g.add(dt, bias)?;
    let delta = g.softplus(dt)?;
    let b = g.matmul(xt, p.var(head.b_proj))?;
    let c = g.matmul(xt, p.var(head.c_proj))?;
    let a = g.exp(p.var(head.a_log))?;
    let a = g.neg(a)?;
    Ok(HeadProjection {
        inputs: ScanInputs {
            x: xt,
            delta,
            a,
            b,
            c,
            d_skip: p.var(head.d_skip),
        },
        tokens,
    })
}

/// Four-direction band-masked scan of a `[C, H, W]` feature map. Each
/// direction draws its own ε from `ctx`; outputs are mapped back to the
/// original layout and averaged.
pub fn cross_scan_2d<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    head: &SsmHead,
    feat: Var,
    ctx: &mut ScanContext,
) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    if s.len() != 3 || s[0] != head.width || s[1] == 0 || s[2] == 0 {
        return Err(FrnError::Shape {
            op: "cross_scan_2d",
            lhs: s,
            rhs: vec![head.width],
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = g.reshape(feat, [c, h * w])?;
    let xt = g.transpose(flat)?;
    let proj = project_head(g, p, head, xt)?;
    let dirs: Vec<ScanDirection> = scan_orders(h, w)
        .into_iter()
        .map(|order| ScanDirection {
            order: Arc::from(order),
            epsilon: ctx.next_epsilon(),
        })
        .collect();
    let y = fused_scan(g, proj.inputs, &dirs)?;
    let y = g.transpose(y)?;
    g.reshape(y, [c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_orders() {
        let [a, b, c, d] = scan_orders(2, 2);
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert_eq!(b, vec![3, 2, 1, 0]);
        assert_eq!(c, vec![0, 2, 1, 3]);
        assert_eq!(d, vec![3, 1, 2, 0]);
    }

    #[test]
    fn permutation_roundtrip() {
        let data: Vec<u32> = (0..3 * 5 * 2).collect();
        for order in scan_orders(3, 5) {
            let p = permute_tokens(&data, &order, 2);
            assert_eq!(unpermute_tokens(&p, &order, 2), data);
        }
    }

    #[test]
    fn single_pixel_orders_coincide() {
        let orders = scan_orders(1, 1);
        assert!(orders.iter().all(|o| o == &[0]));
    }
}
