use super::zoh::{zoh_coeffs, DiscretizedParams};
use crate::error::{FrnError, Result};
use crate::numerics::{Real, Tensor};

/// Binary readout mask `[T, d_inner]` and the threshold that produced it.
#[derive(Clone, Debug)]
pub struct BandMask<T: Real> {
    pub m: Tensor<T>,
    pub epsilon: f64,
    pub alpha: f64,
}

impl<T: Real> BandMask<T> {
    /// The all-ones mask (ε = 0).
    pub fn ones(tokens: usize, channels: usize) -> Self {
        BandMask {
            m: Tensor::full([tokens, channels], T::one()),
            epsilon: 0.0,
            alpha: 0.0,
        }
    }

    pub fn count_ones(&self) -> usize {
        self.m.data().iter().filter(|v| **v != T::zero()).count()
    }
}

/// Input-gate statistic `g[t,d] = mean_n(1 − exp(Δ[t,d]·A[d,n]))`, the
/// fraction of the hidden state overwritten by token `t`.
pub fn gate_statistic<T: Real>(delta: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let (t_len, d_inner) = (delta.dim(0), delta.dim(1));
    if a.rank() != 2 || a.dim(0) != d_inner {
        return Err(FrnError::Shape {
            op: "gate_statistic",
            lhs: delta.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let d_state = a.dim(1);
    let (dv, av) = (delta.data(), a.data());
    let mut g = Vec::with_capacity(t_len * d_inner);
    for t in 0..t_len {
        for d in 0..d_inner {
            let dt = dv[t * d_inner + d];
            let row = &av[d * d_state..(d + 1) * d_state];
            g.push(gate_value(dt, row));
        }
    }
    Tensor::new([t_len, d_inner], g)
}

#[inline]
pub(crate) fn gate_value<T: Real>(dt: T, a_row: &[T]) -> T {
    let s: T = a_row.iter().map(|&a| -zoh_coeffs(dt * a).2).sum();
    s / T::of(a_row.len() as f64)
}

/// `M[t,d] = 1` iff `g[t,d] ≥ ε`, with `ε ∈ [0, α]`.
pub fn band_mask<T: Real>(delta: &Tensor<T>, a: &Tensor<T>, epsilon: f64, alpha: f64) -> Result<BandMask<T>> {
    let g = gate_statistic(delta, a)?;
    mask_from_gate(&g, epsilon, alpha)
}

/// Thresholds a precomputed gate statistic (boundary inclusive).
pub fn mask_from_gate<T: Real>(gate: &Tensor<T>, epsilon: f64, alpha: f64) -> Result<BandMask<T>> {
    check_epsilon(epsilon, alpha)?;
    let eps = T::of(epsilon);
    let m = gate.map(|v| if v >= eps { T::one() } else { T::zero() });
    Ok(BandMask { m, epsilon, alpha })
}

pub(crate) fn check_epsilon(epsilon: f64, alpha: f64) -> Result<()> {
    if !(0.0..=alpha).contains(&epsilon) {
        return Err(FrnError::contract(format!(
            "epsilon {epsilon} outside [0, {alpha}]"
        )));
    }
    Ok(())
}

/// Masked selective scan over one token sequence:
/// `h_t = ā_t ⊙ h_{t−1} + b̄_t·x_t`, `y_t = Σ_n (c_t ⊙ M_t) h_t + D ⊙ x_t`.
pub fn selective_scan<T: Real>(
    x: &Tensor<T>,
    disc: &DiscretizedParams<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    mask: &BandMask<T>,
) -> Result<Tensor<T>> {
    let (t_len, d_inner) = (x.dim(0), x.dim(1));
    let ds = disc.a_bar.shape();
    let shape_err = |rhs: &[usize]| FrnError::Shape {
        op: "selective_scan",
        lhs: x.shape().to_vec(),
        rhs: rhs.to_vec(),
    };
    if ds.len() != 3 || ds[0] != t_len || ds[1] != d_inner || disc.b_bar.shape() != ds {
        return Err(shape_err(ds));
    }
    let d_state = ds[2];
    if c.shape() != [t_len, d_state] {
        return Err(shape_err(c.shape()));
    }
    if d_skip.shape() != [d_inner] {
        return Err(shape_err(d_skip.shape()));
    }
    if mask.m.shape() != [t_len, d_inner] {
        return Err(shape_err(mask.m.shape()));
    }
    let (xv, ab, bb, cv, dv, mv) = (
        x.data(),
        disc.a_bar.data(),
        disc.b_bar.data(),
        c.data(),
        d_skip.data(),
        mask.m.data(),
    );
    let mut h = vec![T::zero(); d_inner * d_state];
    let mut y = vec![T::zero(); t_len * d_inner];
    for t in 0..t_len {
        let crow = &cv[t * d_state..(t + 1) * d_state];
        for d in 0..d_inner {
            let xt = xv[t * d_inner + d];
            let base = (t * d_inner + d) * d_state;
            let hs = &mut h[d * d_state..(d + 1) * d_state];
            let mut acc = T::zero();
            for n in 0..d_state {
                hs[n] = ab[base + n] * hs[n] + bb[base + n] * xt;
                acc += crow[n] * hs[n];
            }
            y[t * d_inner + d] = mv[t * d_inner + d] * acc + dv[d] * xt;
        }
    }
    Tensor::new([t_len, d_inner], y)
}
