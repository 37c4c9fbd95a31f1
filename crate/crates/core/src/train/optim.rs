//! Adam with decoupled weight decay, and global-norm gradient clipping.

use routecast_tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[Tensor<T>], weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let decay = T::of(1.0 - lr * self.weight_decay);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv = *pv * decay - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let x = v.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = vec![Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::zeros(&[3])];
        let mut opt = AdamW::new(&p, 0.01);
        opt.update(&mut p, &g, 0.1);
        assert_eq!(p[0].data(), &[1.0 * 0.999, -2.0 * 0.999, 0.5 * 0.999]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g) up to eps
        let mut p = vec![Tensor::new(&[2], vec![0.0f64, 0.0]).unwrap()];
        let g = vec![Tensor::new(&[2], vec![3.0, -0.5]).unwrap()];
        let mut opt = AdamW::new(&p, 0.0);
        opt.update(&mut p, &g, 0.01);
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0f64, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 2.0), global_norm(&g));
    }
}
