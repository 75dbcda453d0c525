use crate::error::{FrnError, Result};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

/// Mean absolute difference, differentiable through `pred`.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(FrnError::Shape {
            op: "l1_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`, clamped to `lr_min`
/// past the end.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(FrnError::Contract(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(FrnError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let bc1 = T::of(1.0 / (1.0 - self.beta1.powi(t)));
        let bc2 = T::of(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + c1 * gv;
                *vv = b2 * *vv + c2 * gv * gv;
                let mh = *mv * bc1;
                let vh = *vv * bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 4e-4, 1e-6), 4e-4);
        assert!((cosine_lr(100, 100, 4e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 4e-4, 1e-6) - 2.005e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 4e-4, 1e-6), 1e-6);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.step(store.tensors_mut(), &[vec![1.0]], 1e-3).unwrap();
        let p = store.tensors_mut()[0].data()[0];
        assert!((p - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        store.add("p", Tensor::full([3], 0.25));
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.step(store.tensors_mut(), &[vec![0.0; 3]], 1e-2).unwrap();
        assert_eq!(store.tensors_mut()[0].data(), &[0.25; 3]);
    }

    #[test]
    fn l1_of_constant_gap() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full([2, 3], 0.4));
        let b = g.input(Tensor::full([2, 3], 0.5));
        let l = l1_loss(&mut g, a, b).unwrap();
        assert!((g.value(l).data()[0] - 0.1).abs() < 1e-12);
    }
}
