//! Adam and global-norm gradient clipping.

use crate::autodiff::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient keep their moments
    /// and value.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(*id).data_mut();
            assert_eq!(p.len(), g.len(), "gradient size mismatch for {}", i);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|(_, g)| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let mut opt = Adam::new(&store, 0.1);
        opt.step(&mut store, &[(id, vec![3.0, -0.5, 0.0])]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(&[2], vec![3.0, -4.0]));
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut store, &[(id, g)]);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::zeros(&[2]));
        let b = store.register("b", Tensor::zeros(&[1]));
        let mut g = vec![(a, vec![3.0, 0.0]), (b, vec![4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].1[0] - 0.6).abs() < 1e-12 && (g[1].1[0] - 0.8).abs() < 1e-12);
        let mut small = vec![(a, vec![0.1, 0.0])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].1, vec![0.1, 0.0]);
    }
}
