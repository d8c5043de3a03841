use std::f64::consts::PI;

use super::params::{Gradients, ParamStore};
use super::tensor::{Matrix, Real};

/// Adam moment buffers, kept separate so they can be checkpointed.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Matrix<T>>,
    pub second: Vec<Matrix<T>>,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Matrix<T>> = store
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                first: zeros.clone(),
                second: zeros,
            },
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.state.first[i].data_mut();
            let v = self.state.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((pv, mv), vv), &gv) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv = *pv - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

/// Cosine decay from `base` at step 0 to zero at `total_steps`.
pub fn cosine_lr(base: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::new(1, 2, vec![3.0f64, -2.0]));
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            let x = store.get(id).clone();
            let grads = Gradients::from_vec(vec![Some(x.map(|v| 2.0 * v))]);
            adam.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_and_schedule() {
        let mut g = Gradients::from_vec(vec![Some(Matrix::new(1, 2, vec![3.0f32, 4.0]))]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-12);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }
}
