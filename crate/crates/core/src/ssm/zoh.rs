use crate::error::{FrnError, Result};
use crate::numerics::{Real, Tensor};

/// Below this `|ΔA|` the closed-form `(e^z − 1)/z` is replaced by its
/// second-order series.
pub const SERIES_SWITCH: f64 = 1e-4;

/// `(ā, φ, e^z − 1)` for `z = Δ·a`, where `ā = e^z` and `φ = (e^z − 1)/z`,
/// so that `b̄ = φ·Δ·b`.
#[inline]
pub fn zoh_coeffs<T: Real>(z: T) -> (T, T, T) {
    let em1 = z.exp_m1();
    let a_bar = em1 + T::one();
    let phi = if z.abs() < T::of(SERIES_SWITCH) {
        phi_series(z)
    } else {
        em1 / z
    };
    (a_bar, phi, em1)
}

#[inline]
pub fn phi_series<T: Real>(z: T) -> T {
    T::one() + z * (T::of(0.5) + z * T::of(1.0 / 6.0))
}

#[inline]
pub fn phi_exact<T: Real>(z: T) -> T {
    z.exp_m1() / z
}

/// `dφ/dz`, given `e^z − 1` for the same `z`.
#[inline]
pub(crate) fn phi_prime<T: Real>(z: T, em1: T) -> T {
    if z.abs() < T::of(2e-2) {
        let c = [0.5, 1.0 / 3.0, 1.0 / 8.0, 1.0 / 30.0, 1.0 / 144.0];
        c.iter().rev().fold(T::zero(), |acc, &k| acc * z + T::of(k))
    } else {
        ((em1 + T::one()) * z - em1) / (z * z)
    }
}

/// Discretized transition and input matrices, both `[T, d_inner, d_state]`.
#[derive(Clone, Debug)]
pub struct DiscretizedParams<T: Real> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
}

/// Zero-order-hold discretization of a diagonal continuous system:
/// `ā = exp(ΔA)`, `b̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`, evaluated elementwise.
pub fn zoh_discretize<T: Real>(delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<DiscretizedParams<T>> {
    if delta.rank() != 2 || a.rank() != 2 || b.rank() != 2 {
        return Err(FrnError::contract("zoh_discretize expects rank-2 delta, a and b"));
    }
    let (t_len, d_inner) = (delta.dim(0), delta.dim(1));
    let d_state = a.dim(1);
    if a.dim(0) != d_inner {
        return Err(FrnError::Shape {
            op: "zoh_discretize",
            lhs: delta.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    if b.shape() != [t_len, d_state] {
        return Err(FrnError::Shape {
            op: "zoh_discretize",
            lhs: vec![t_len, d_state],
            rhs: b.shape().to_vec(),
        });
    }
    if let Some(bad) = delta.data().iter().find(|v| !(**v > T::zero())) {
        return Err(FrnError::contract(format!("delta must be positive, found {bad}")));
    }
    if let Some(bad) = a.data().iter().find(|v| !(**v < T::zero())) {
        return Err(FrnError::contract(format!("A must be negative, found {bad}")));
    }
    let mut a_bar = Vec::with_capacity(t_len * d_inner * d_state);
    let mut b_bar = Vec::with_capacity(t_len * d_inner * d_state);
    let (dv, av, bv) = (delta.data(), a.data(), b.data());
    for t in 0..t_len {
        for d in 0..d_inner {
            let dt = dv[t * d_inner + d];
            for n in 0..d_state {
                let (ab, phi, _) = zoh_coeffs(dt * av[d * d_state + n]);
                a_bar.push(ab);
                b_bar.push(phi * dt * bv[t * d_state + n]);
            }
        }
    }
    let shape = vec![t_len, d_inner, d_state];
    Ok(DiscretizedParams {
        a_bar: Tensor::new(shape.clone(), a_bar)?,
        b_bar: Tensor::new(shape, b_bar)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form() {
        let delta = Tensor::new([1, 1], vec![std::f64::consts::LN_2]).unwrap();
        let a = Tensor::new([1, 1], vec![-1.0]).unwrap();
        let b = Tensor::new([1, 1], vec![1.0]).unwrap();
        let d = zoh_discretize(&delta, &a, &b).unwrap();
        assert!((d.a_bar.data()[0] - 0.5).abs() < 1e-12);
        assert!((d.b_bar.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn small_argument_limit_is_delta_b() {
        let delta = Tensor::<f64>::new([1, 1], vec![1e-9]).unwrap();
        let a = Tensor::<f64>::new([1, 1], vec![-1.0]).unwrap();
        let b = Tensor::<f64>::new([1, 1], vec![3.0]).unwrap();
        let d = zoh_discretize(&delta, &a, &b).unwrap();
        assert!((d.b_bar.data()[0] / 3e-9 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn branches_agree_at_switch() {
        for z in [SERIES_SWITCH, -SERIES_SWITCH] {
            assert!((phi_series(z) - phi_exact(z)).abs() < 1e-9);
        }
    }

    #[test]
    fn phi_prime_matches_difference_quotient() {
        for z in [-3.0, -0.5, -0.03, -0.019, -1e-3, 0.0, 1e-5] {
            let h = 1e-6;
            let num = (phi_exact_or_series(z + h) - phi_exact_or_series(z - h)) / (2.0 * h);
            let (_, _, em1) = zoh_coeffs(z);
            assert!((phi_prime(z, em1) - num).abs() < 1e-8, "z={z}");
        }
    }

    fn phi_exact_or_series(z: f64) -> f64 {
        zoh_coeffs(z).1
    }

    #[test]
    fn rejects_nonpositive_delta() {
        let delta = Tensor::new([1, 1], vec![0.0]).unwrap();
        let a = Tensor::new([1, 1], vec![-1.0]).unwrap();
        let b = Tensor::new([1, 1], vec![1.0]).unwrap();
        assert!(matches!(zoh_discretize(&delta, &a, &b), Err(FrnError::Contract(_))));
    }
}
