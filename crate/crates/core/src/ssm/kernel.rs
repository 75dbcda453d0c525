//! Fused multi-direction selective scan with its reverse-mode rule.
//!
//! The ZOH coefficients depend only on the token, not on the traversal
//! order, so they are evaluated once and shared by every direction. Hidden
//! states are not retained; backward recomputes them one direction at a
//! time.

use std::sync::Arc;

use super::scan::{check_epsilon, gate_value};
use super::zoh::{phi_prime, zoh_coeffs};
use crate::error::{FrnError, Result};
use crate::numerics::{CustomOp, Graph, Real, Tensor, Var};

/// One traversal of the token sequence. `order[s]` is the token visited at
/// step `s`; `epsilon` of `None` disables the band mask.
#[derive(Clone, Debug)]
pub struct ScanDirection {
    pub order: Arc<[usize]>,
    pub epsilon: Option<f64>,
}

impl ScanDirection {
    pub fn identity(tokens: usize, epsilon: Option<f64>) -> Self {
        ScanDirection {
            order: (0..tokens).collect::<Vec<_>>().into(),
            epsilon,
        }
    }
}

/// Graph inputs of one scan head.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    /// `[T, D]`
    pub x: Var,
    /// `[T, D]`, strictly positive
    pub delta: Var,
    /// `[D, N]`, strictly negative
    pub a: Var,
    /// `[T, N]`
    pub b: Var,
    /// `[T, N]`
    pub c: Var,
    /// `[D]`
    pub d_skip: Var,
}

struct Dims {
    t: usize,
    d: usize,
    n: usize,
}

struct Coeffs<T> {
    /// `ā`, `[T, D, N]`
    a_bar: Vec<T>,
    /// `φ(ΔA)`, `[T, D, N]`
    phi: Vec<T>,
    /// `e^{ΔA} − 1`, `[T, D, N]`
    em1: Vec<T>,
}

fn coeffs<T: Real>(delta: &[T], a: &[T], dims: &Dims) -> Coeffs<T> {
    let len = dims.t * dims.d * dims.n;
    let mut out = Coeffs {
        a_bar: Vec::with_capacity(len),
        phi: Vec::with_capacity(len),
        em1: Vec::with_capacity(len),
    };
    for t in 0..dims.t {
        for d in 0..dims.d {
            let dt = delta[t * dims.d + d];
            for &av in &a[d * dims.n..(d + 1) * dims.n] {
                let (ab, phi, em1) = zoh_coeffs(dt * av);
                out.a_bar.push(ab);
                out.phi.push(phi);
                out.em1.push(em1);
            }
        }
    }
    out
}

fn gate_mask<T: Real>(em1: &[T], dims: &Dims, epsilon: f64) -> Vec<u8> {
    let eps = T::of(epsilon);
    let n = T::of(dims.n as f64);
    em1.chunks(dims.n)
        .map(|row| {
            let s: T = row.iter().map(|&v| -v).sum();
            u8::from(s / n >= eps)
        })
        .collect()
}

/// Runs every direction, returning the mean of the per-direction outputs in
/// the original token layout, plus the masks used.
#[allow(clippy::too_many_arguments)]
fn forward<T: Real>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    co: &Coeffs<T>,
    dims: &Dims,
    dirs: &[ScanDirection],
) -> (Vec<T>, Vec<Option<Vec<u8>>>) {
    let (dd, nn) = (dims.d, dims.n);
    let weight = T::of(1.0 / dirs.len() as f64);
    let mut y = vec![T::zero(); dims.t * dd];
    let mut h = vec![T::zero(); dd * nn];
    let mut masks = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let mask = dir.epsilon.map(|e| gate_mask(&co.em1, dims, e));
        h.iter_mut().for_each(|v| *v = T::zero());
        for &t in dir.order.iter() {
            let brow = &b[t * nn..(t + 1) * nn];
            let crow = &c[t * nn..(t + 1) * nn];
            for d in 0..dd {
                let i = t * dd + d;
                let xv = x[i];
                let dx = delta[i] * xv;
                let base = i * nn;
                let ab = &co.a_bar[base..base + nn];
                let ph = &co.phi[base..base + nn];
                let hs = &mut h[d * nn..(d + 1) * nn];
                let mut acc = T::zero();
                for n in 0..nn {
                    hs[n] = ab[n] * hs[n] + ph[n] * brow[n] * dx;
                    acc += crow[n] * hs[n];
                }
                let m = match &mask {
                    Some(m) if m[i] == 0 => T::zero(),
                    _ => T::one(),
                };
                y[i] += weight * (m * acc + d_skip[d] * xv);
            }
        }
        masks.push(mask);
    }
    (y, masks)
}

struct CrossScanOp<T> {
    dirs: Vec<ScanDirection>,
    masks: Vec<Option<Vec<u8>>>,
    co: Coeffs<T>,
}

impl<T: Real> CustomOp<T> for CrossScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, delta, a, b, c, d_skip) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        let dims = Dims {
            t: inputs[0].dim(0),
            d: inputs[0].dim(1),
            n: inputs[2].dim(1),
        };
        let (tt, dd, nn) = (dims.t, dims.d, dims.n);
        let co = &self.co;
        let weight = T::of(1.0 / self.dirs.len() as f64);

        let mut gx = vec![T::zero(); tt * dd];
        let mut gc = vec![T::zero(); tt * nn];
        let mut gd = vec![T::zero(); dd];
        // Gradients w.r.t. ā and b̄, summed over directions.
        let mut g_abar = vec![T::zero(); tt * dd * nn];
        let mut g_bbar = vec![T::zero(); tt * dd * nn];
        let mut hs = vec![T::zero(); tt * dd * nn];
        let mut carry = vec![T::zero(); dd * nn];

        for (dir, mask) in self.dirs.iter().zip(&self.masks) {
            // Recompute hidden states in traversal order.
            let mut prev: Option<usize> = None;
            for (s, &t) in dir.order.iter().enumerate() {
                let brow = &b[t * nn..(t + 1) * nn];
                for d in 0..dd {
                    let i = t * dd + d;
                    let dx = delta[i] * x[i];
                    let base = i * nn;
                    let cur = (s * dd + d) * nn;
                    for n in 0..nn {
                        let hp = match prev {
                            Some(p) => hs[(p * dd + d) * nn + n],
                            None => T::zero(),
                        };
                        hs[cur + n] = co.a_bar[base + n] * hp + co.phi[base + n] * brow[n] * dx;
                    }
                }
                prev = Some(s);
            }
            carry.iter_mut().for_each(|v| *v = T::zero());
            for (s, &t) in dir.order.iter().enumerate().rev() {
                let brow = &b[t * nn..(t + 1) * nn];
                let crow = &c[t * nn..(t + 1) * nn];
                for d in 0..dd {
                    let i = t * dd + d;
                    let gyv = gy[i] * weight;
                    let xv = x[i];
                    gx[i] += gyv * d_skip[d];
                    gd[d] += gyv * xv;
                    let gm = match mask {
                        Some(m) if m[i] == 0 => T::zero(),
                        _ => gyv,
                    };
                    let base = i * nn;
                    let cur = (s * dd + d) * nn;
                    let bq_scale = delta[i];
                    let mut gxi = T::zero();
                    for n in 0..nn {
                        let hcur = hs[cur + n];
                        gc[t * nn + n] += gm * hcur;
                        let gh = carry[d * nn + n] + gm * crow[n];
                        let hprev = if s > 0 { hs[cur - dd * nn + n] } else { T::zero() };
                        g_abar[base + n] += gh * hprev;
                        g_bbar[base + n] += gh * xv;
                        gxi += gh * co.phi[base + n] * brow[n] * bq_scale;
                        carry[d * nn + n] = gh * co.a_bar[base + n];
                    }
                    gx[i] += gxi;
                }
            }
        }

        // Chain through ā = e^z, b̄ = φ(z)·Δ·B with z = Δ·A.
        let mut gdelta = vec![T::zero(); tt * dd];
        let mut ga = vec![T::zero(); dd * nn];
        let mut gb = vec![T::zero(); tt * nn];
        for t in 0..tt {
            let brow = &b[t * nn..(t + 1) * nn];
            for d in 0..dd {
                let i = t * dd + d;
                let dt = delta[i];
                let arow = &a[d * nn..(d + 1) * nn];
                let base = i * nn;
                let mut gdt = T::zero();
                for n in 0..nn {
                    let z = dt * arow[n];
                    let gbb = g_bbar[base + n];
                    let gz = g_abar[base + n] * co.a_bar[base + n]
                        + gbb * phi_prime(z, co.em1[base + n]) * dt * brow[n];
                    gdt += gz * arow[n] + gbb * co.phi[base + n] * brow[n];
                    ga[d * nn + n] += gz * dt;
                    gb[t * nn + n] += gbb * co.phi[base + n] * dt;
                }
                gdelta[i] = gdt;
            }
        }

        let outs = [gx, gdelta, ga, gb, gc, gd];
        outs.into_iter()
            .zip(needs)
            .map(|(g, &need)| need.then_some(g))
            .collect()
    }
}

/// Records a fused selective scan over the given directions. The result is
/// `[T, D]` in the original token layout, averaged over directions.
pub fn fused_scan<T: Real>(graph: &mut Graph<T>, inp: ScanInputs, dirs: &[ScanDirection]) -> Result<Var> {
    if dirs.is_empty() {
        return Err(FrnError::contract("fused_scan needs at least one direction"));
    }
    let xs = graph.shape(inp.x).to_vec();
    let shape_err = |rhs: &[usize]| FrnError::Shape {
        op: "selective_scan",
        lhs: xs.clone(),
        rhs: rhs.to_vec(),
    };
    if xs.len() != 2 {
        return Err(shape_err(&[]));
    }
    let (tt, dd) = (xs[0], xs[1]);
    if graph.shape(inp.delta) != [tt, dd] {
        return Err(shape_err(graph.shape(inp.delta)));
    }
    let sa = graph.shape(inp.a).to_vec();
    if sa.len() != 2 || sa[0] != dd {
        return Err(shape_err(&sa));
    }
    let nn = sa[1];
    for v in [inp.b, inp.c] {
        if graph.shape(v) != [tt, nn] {
            return Err(shape_err(graph.shape(v)));
        }
    }
    if graph.shape(inp.d_skip) != [dd] {
        return Err(shape_err(graph.shape(inp.d_skip)));
    }
    for dir in dirs {
        if dir.order.len() != tt {
            return Err(FrnError::contract(format!(
                "scan order has {} entries for {tt} tokens",
                dir.order.len()
            )));
        }
        debug_assert!(is_permutation(&dir.order));
        if let Some(e) = dir.epsilon {
            check_epsilon(e, 1.0)?;
        }
    }
    let dims = Dims { t: tt, d: dd, n: nn };
    let delta = graph.value(inp.delta).data();
    let a = graph.value(inp.a).data();
    if delta.iter().chain(a).any(|v| !v.is_finite()) {
        return Err(FrnError::NonFinite { op: "selective_scan" });
    }
    if delta.iter().any(|v| !(*v > T::zero())) || a.iter().any(|v| !(*v < T::zero())) {
        return Err(FrnError::contract("selective_scan needs delta > 0 and A < 0"));
    }
    let co = coeffs(delta, a, &dims);
    let (y, masks) = forward(
        graph.value(inp.x).data(),
        delta,
        graph.value(inp.b).data(),
        graph.value(inp.c).data(),
        graph.value(inp.d_skip).data(),
        &co,
        &dims,
        dirs,
    );
    let out = Tensor::new([tt, dd], y)?;
    let op = CrossScanOp {
        dirs: dirs.to_vec(),
        masks,
        co,
    };
    graph.custom(
        &[inp.x, inp.delta, inp.a, inp.b, inp.c, inp.d_skip],
        out,
        Box::new(op),
    )
}

fn is_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    order
        .iter()
        .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

/// Gate statistic computed exactly as the fused kernel does.
pub fn kernel_gate<T: Real>(delta: &Tensor<T>, a: &Tensor<T>) -> Tensor<T> {
    let (tt, dd) = (delta.dim(0), delta.dim(1));
    let nn = a.dim(1);
    Tensor::from_fn([tt, dd], |i| {
        let d = i % dd;
        gate_value(delta.data()[i], &a.data()[d * nn..(d + 1) * nn])
    })
}
